use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use halfcnn::gradcheck::{check_layers, check_network, CheckConfig, GradReport};
use halfcnn::groundtruth::{gaussian_map, prepare_sample};
use halfcnn::io::{self, Annotation, Manifest, Record, SynthConfig};
use halfcnn::metrics::{auc, fixations_from_map, sauc, FixationSet};
use halfcnn::optim::{lbfgs_train, sgd_train, write_trace_csv, LbfgsConfig, SgdConfig};
use halfcnn::retrieval::{detect, match_count};
use halfcnn::{Error, LossConfig, Network, TargetSource, Tensor, Window};

use crate::{
    EvalDetectionArgs, EvalSaliencyArgs, GradcheckArgs, MakeGtArgs, Optimizer, PredictArgs, SynthArgs, TrainArgs,
};

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

fn pad_to_multiple(img: &Tensor, m: usize) -> Tensor {
    let (h, w) = (img.height(), img.width());
    img.pad_zero(0, round_up(h, m) - h, 0, round_up(w, m) - w)
}

/// Network output for an image of any size, cropped to the cells that touch content.
fn predict_map(net: &Network, img: &Tensor) -> Result<Tensor> {
    let f = net.spec().target_factor;
    let m = net.spec().input_multiple().max(f);
    let out = net.predict(&pad_to_multiple(img, m))?;
    Ok(out.crop(0, 0, img.height().div_ceil(f), img.width().div_ceil(f))?)
}

/// Ground-truth target at `1 / factor` resolution for a windows or map record.
fn target_map(manifest: &Manifest, record: &Record, img: &Tensor, factor: usize) -> Result<Tensor> {
    let source = match &record.annotation {
        Annotation::Windows(ws) => TargetSource::Windows(ws.clone()),
        Annotation::Map(p) => TargetSource::Map(io::read_map(manifest.resolve(p))?),
        Annotation::Fixations(_) => {
            return Err(Error::Usage(format!("{}: fixation records have no target map", record.image.display())).into())
        }
    };
    let (h, w) = (round_up(img.height(), factor), round_up(img.width(), factor));
    Ok(prepare_sample(img, &source, h, w, factor)?.target)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let spec = io::read_spec_file(&a.spec_file)?;
    if spec.target_factor != a.factor {
        return Err(Error::Config(format!(
            "--factor {} does not match the spec's factor {}",
            a.factor, spec.target_factor
        ))
        .into());
    }
    let manifest = Manifest::read(&a.manifest)?;
    let samples = io::load_dataset(&manifest, a.canvas, a.canvas, a.factor)?;
    let net = Network::build(spec, a.seed)?;
    let loss = LossConfig { lambda: a.lambda };
    loss.validate()?;
    let start = Instant::now();
    let trained = match a.optimizer {
        Optimizer::Lbfgs => {
            let cfg = LbfgsConfig {
                max_iterations: a.max_iter,
                ..LbfgsConfig::default()
            };
            let (net, result) = lbfgs_train(&net, &samples, &cfg, &loss)?;
            eprintln!(
                "lbfgs: {:?} after {} iterations, objective {:.6e} -> {:.6e}",
                result.status,
                result.iterations(),
                result.trace[0].objective,
                result.value
            );
            if let Some(p) = &a.trace {
                let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                write_trace_csv(&result.trace, BufWriter::new(f))?;
            }
            net
        }
        Optimizer::Sgd => {
            let cfg = SgdConfig {
                learning_rate: a.learning_rate,
                momentum: a.momentum,
                epochs: a.epochs,
                batch_size: a.batch_size,
                seed: a.seed,
            };
            let (net, report) = sgd_train(&net, &samples, &cfg, &loss)?;
            if report.batch_clamped {
                eprintln!("sgd: batch size reduced to {}", samples.len());
            }
            if let Some(last) = report.epoch_losses.last() {
                eprintln!("sgd: {} epochs, last epoch mean objective {last:.6e}", report.epoch_losses.len());
            }
            net
        }
    };
    io::save_checkpoint(&trained, &a.out)?;
    eprintln!(
        "trained on {} images in {:.1}s, wrote {}",
        samples.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn predict(a: PredictArgs) -> Result<ExitCode> {
    let net = io::load_checkpoint(&a.ckpt)?;
    let img = io::read_image(&a.image)?;
    let map = predict_map(&net, &img)?;
    let is_pgm = a.out_map.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        io::write_map(&map, &a.out_map)?;
    } else {
        io::write_raw_map(&map, &a.out_map)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval_detection(a: EvalDetectionArgs) -> Result<ExitCode> {
    let manifest = Manifest::read(&a.manifest)?;
    let net = a.ckpt.as_ref().map(io::load_checkpoint).transpose()?;
    let factor = net.as_ref().map_or(a.factor, |n| n.spec().target_factor);
    let mut out = open_output(a.out.as_deref())?;
    writeln!(out, "image,truth,predicted,matched")?;
    let (mut truth_total, mut pred_total, mut hits) = (0, 0, 0);
    for r in &manifest.records {
        let img = io::read_image(manifest.resolve(&r.image))?;
        let target = target_map(&manifest, r, &img, factor)?;
        let truth: Vec<Window> = match &r.annotation {
            Annotation::Windows(ws) => ws.clone(),
            _ => detect(&target, a.threshold, factor)?,
        };
        let map = match &net {
            Some(n) => predict_map(n, &img)?,
            None => target,
        };
        let pred = detect(&map, a.threshold, factor)?;
        let m = match_count(&pred, &truth, a.iou);
        writeln!(out, "{},{},{},{m}", r.image.display(), truth.len(), pred.len())?;
        truth_total += truth.len();
        pred_total += pred.len();
        hits += m;
    }
    writeln!(out, "all,{truth_total},{pred_total},{hits}")?;
    out.flush()?;
    let rate = if truth_total == 0 { 1.0 } else { hits as f64 / truth_total as f64 };
    eprintln!("retrieval rate {rate:.4} ({hits}/{truth_total}) at IoU >= {}", a.iou);
    Ok(ExitCode::SUCCESS)
}

fn fixations_for(
    manifest: &Manifest,
    r: &Record,
    img: &Tensor,
    cells: (usize, usize),
    factor: usize,
    top_frac: f64,
) -> Result<FixationSet> {
    let id = r.image.display().to_string();
    let (ch, cw) = cells;
    let set = match &r.annotation {
        Annotation::Fixations(pts) => FixationSet::new(
            pts.iter()
                .map(|&(x, y)| (x / factor, y / factor))
                .filter(|&(x, y)| x < cw && y < ch),
            id,
        ),
        other => {
            let full = match other {
                Annotation::Windows(ws) => gaussian_map(ws, img.height(), img.width())?,
                Annotation::Map(p) => io::read_map(manifest.resolve(p))?,
                Annotation::Fixations(_) => unreachable!(),
            };
            let down = pad_to_multiple(&full, factor).block_downsample(factor)?;
            fixations_from_map(&down.crop(0, 0, ch, cw)?, top_frac, id)?
        }
    };
    if set.is_empty() {
        bail!("{}: no fixations inside the image", r.image.display());
    }
    Ok(set)
}

pub fn eval_saliency(a: EvalSaliencyArgs) -> Result<ExitCode> {
    let manifest = Manifest::read(&a.manifest)?;
    let net = io::load_checkpoint(&a.ckpt)?;
    let factor = net.spec().target_factor;
    let mut maps = Vec::new();
    let mut fixations = Vec::new();
    for r in &manifest.records {
        let img = io::read_image(manifest.resolve(&r.image))?;
        let map = predict_map(&net, &img)?;
        let cells = (map.height(), map.width());
        fixations.push(fixations_for(&manifest, r, &img, cells, factor, a.top_frac)?);
        maps.push(map);
    }
    let mut out = open_output(a.out.as_deref())?;
    writeln!(out, "image,auc,sauc")?;
    let (mut auc_sum, mut sauc_sum) = (0.0, 0.0);
    for (i, (map, fix)) in maps.iter().zip(&fixations).enumerate() {
        let pool: Vec<FixationSet> = fixations
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, f)| f.clone())
            .collect();
        let a_score = auc(map, fix)?;
        let s_score = sauc(map, fix, &pool, a.sauc_rounds, a.seed.wrapping_add(i as u64))?;
        auc_sum += a_score;
        sauc_sum += s_score;
        writeln!(out, "{},{a_score:.6},{s_score:.6}", fix.image_id)?;
    }
    let n = maps.len() as f64;
    writeln!(out, "mean,{:.6},{:.6}", auc_sum / n, sauc_sum / n)?;
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

pub fn make_gt(a: MakeGtArgs) -> Result<ExitCode> {
    let manifest = Manifest::read(&a.manifest)?;
    let dir = a.out_dir.clone().unwrap_or_else(|| manifest.dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let samples = io::load_dataset(&manifest, a.canvas, a.canvas, a.factor)?;
    for (r, s) in manifest.records.iter().zip(&samples) {
        let base = stem(&r.image);
        io::write_raw_map(&s.target, dir.join(format!("{base}.target.raw")))?;
        io::write_map(&s.target, dir.join(format!("{base}.target.pgm")))?;
        io::write_map(&s.mask, dir.join(format!("{base}.mask.pgm")))?;
    }
    eprintln!("wrote {} target maps to {}", samples.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig::new(a.count, a.canvas, a.factor, a.seed);
    cfg.min_windows = a.min_windows;
    cfg.max_windows = a.max_windows;
    let m = io::synth_dataset(&cfg, &a.out_dir)?;
    eprintln!("wrote {} images to {}", m.records.len(), a.out_dir.join("manifest.tsv").display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let spec = io::read_spec_file(&a.spec_file)?;
    let m = spec.input_multiple();
    let size = a.size.unwrap_or_else(|| round_up(8, m));
    if size == 0 || size % m != 0 {
        return Err(Error::Usage(format!("--size must be a positive multiple of {m}")).into());
    }
    let cfg = CheckConfig {
        eps: a.eps,
        tol: a.tol,
        ..CheckConfig::default()
    };
    let mut reports: Vec<GradReport> = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        if a.layers {
            reports.extend(check_layers(seed, a.eps, a.tol)?);
        }
        reports.push(check_network(&spec, (size, size), seed, &cfg)?);
    }
    let mut text = String::new();
    for r in &reports {
        let _ = write!(text, "{r}");
    }
    print!("{text}");
    let failed: Vec<&GradReport> = reports.iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        println!("gradcheck passed ({} reports, tol {:e})", reports.len(), a.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        for r in &failed {
            println!("FAILED: {} (max relative error {:.3e})", r.label, r.max_rel_error());
        }
        Ok(ExitCode::FAILURE)
    }
}
