//! Line-oriented network description:
//!
//! ```text
//! # comment
//! input 3
//! factor 4
//! block 5 11 1 1 0      # filters size pool lrn upsample
//! block 5 7 1 1 0
//! block 5 5 1 0 1
//! combiner linear       # or channel_max
//! lrn_params 2 1e-4 0.75 5
//! ```
//!
//! `factor` defaults to the reduction implied by the blocks and `lrn_params`
//! to the usual LRN constants.

use std::path::Path;

use super::read_bytes;
use crate::error::{Error, Result};
use crate::layers::{CombineMode, LrnParams};
use crate::network::{BlockSpec, NetworkSpec};

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{source}:{line}"),
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(tok: &str, source: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(source, line, format!("invalid {what} {tok:?}")))
}

fn flag(tok: &str, source: &str, line: usize, what: &str) -> Result<bool> {
    match tok {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(source, line, format!("{what} flag must be 0 or 1, got {tok:?}"))),
    }
}

/// Parses spec text; `source` names the input in error locations.
pub fn parse_spec(text: &str, source: &str) -> Result<NetworkSpec> {
    let mut input = None;
    let mut factor = None;
    let mut combiner = None;
    let mut lrn = LrnParams::default();
    let mut blocks = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content.split_whitespace().collect();
        let Some((&key, args)) = toks.split_first() else {
            continue;
        };
        let want = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(parse_err(source, line, format!("{key} takes {n} values, got {}", args.len())))
            }
        };
        match key {
            "input" => {
                want(1)?;
                input = Some(field(args[0], source, line, "channel count")?);
            }
            "factor" => {
                want(1)?;
                factor = Some(field(args[0], source, line, "factor")?);
            }
            "block" => {
                want(5)?;
                blocks.push(BlockSpec {
                    num_filters: field(args[0], source, line, "filter count")?,
                    filter_size: field(args[1], source, line, "filter size")?,
                    pool: flag(args[2], source, line, "pool")?,
                    lrn: flag(args[3], source, line, "lrn")?,
                    upsample: flag(args[4], source, line, "upsample")?,
                });
            }
            "combiner" => {
                want(1)?;
                combiner = Some(match args[0] {
                    "linear" => CombineMode::Linear,
                    "channel_max" => CombineMode::ChannelMax,
                    other => return Err(parse_err(source, line, format!("unknown combiner {other:?}"))),
                });
            }
            "lrn_params" => {
                want(4)?;
                lrn = LrnParams {
                    k: field(args[0], source, line, "k")?,
                    alpha: field(args[1], source, line, "alpha")?,
                    beta: field(args[2], source, line, "beta")?,
                    n: field(args[3], source, line, "n")?,
                };
            }
            other => return Err(parse_err(source, line, format!("unknown directive {other:?}"))),
        }
    }
    let input_channels = input.ok_or_else(|| parse_err(source, 0, "missing `input` line"))?;
    let mut spec = NetworkSpec {
        input_channels,
        blocks,
        combiner: combiner.unwrap_or(CombineMode::Linear),
        target_factor: 1,
        lrn,
    };
    spec.target_factor = factor.unwrap_or_else(|| spec.layout_factor());
    spec.validate()?;
    Ok(spec)
}

pub fn read_spec_file(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        location: path.display().to_string(),
        message: "not UTF-8 text".into(),
    })?;
    parse_spec(&text, &path.display().to_string())
}

/// Text that [`parse_spec`] reads back to the same spec.
pub fn format_spec(spec: &NetworkSpec) -> String {
    let mut s = format!("input {}\nfactor {}\n", spec.input_channels, spec.target_factor);
    for b in &spec.blocks {
        s += &format!(
            "block {} {} {} {} {}\n",
            b.num_filters, b.filter_size, b.pool as u8, b.lrn as u8, b.upsample as u8
        );
    }
    s += match spec.combiner {
        CombineMode::Linear => "combiner linear\n",
        CombineMode::ChannelMax => "combiner channel_max\n",
    };
    let l = spec.lrn;
    s += &format!("lrn_params {:?} {:?} {:?} {}\n", l.k, l.alpha, l.beta, l.n);
    s
}
