//! Tab-separated data set manifests.
//!
//! One record per line: `image_path<TAB>kind<TAB>payload`, where kind is
//! `windows` (`cx,cy,w,h;...` in pixels), `map` (path of a target map in
//! `[0, 1]`, same size as the image) or `fixations` (`x,y;...` in pixels).
//! Relative paths are resolved against the manifest's directory. Blank lines
//! and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{read_image, read_map};
use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::groundtruth::{prepare_sample, Sample, TargetSource, Window};

#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Windows(Vec<Window>),
    Map(PathBuf),
    Fixations(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Path as written in the manifest.
    pub image: PathBuf,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub dir: PathBuf,
    pub records: Vec<Record>,
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{source}:{line}"),
        message: message.into(),
    }
}

fn numbers<T: std::str::FromStr>(item: &str, n: usize, source: &str, line: usize) -> Result<Vec<T>> {
    let parts: Vec<&str> = item.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(parse_err(source, line, format!("expected {n} comma-separated values in {item:?}")));
    }
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| parse_err(source, line, format!("invalid number {p:?}")))
        })
        .collect()
}

fn items(payload: &str) -> impl Iterator<Item = &str> {
    payload.split(';').map(str::trim).filter(|s| !s.is_empty())
}

impl Manifest {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Manifest {
            dir: dir.into(),
            records: Vec::new(),
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.dir.join(path)
        }
    }

    /// Parses manifest text. Paths are not checked.
    pub fn parse(text: &str, dir: impl Into<PathBuf>, source: &str) -> Result<Self> {
        let mut m = Manifest::new(dir);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err(source, line, format!("expected 3 tab-separated columns, got {}", cols.len())));
            }
            let payload = cols[2].trim();
            let annotation = match cols[1].trim() {
                "windows" => Annotation::Windows(
                    items(payload)
                        .map(|it| {
                            let v: Vec<f64> = numbers(it, 4, source, line)?;
                            Window::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err(source, line, e.to_string()))
                        })
                        .collect::<Result<_>>()?,
                ),
                "map" => {
                    if payload.is_empty() {
                        return Err(parse_err(source, line, "map record without a path"));
                    }
                    Annotation::Map(PathBuf::from(payload))
                }
                "fixations" => Annotation::Fixations(
                    items(payload)
                        .map(|it| {
                            let v: Vec<usize> = numbers(it, 2, source, line)?;
                            Ok((v[0], v[1]))
                        })
                        .collect::<Result<_>>()?,
                ),
                other => return Err(parse_err(source, line, format!("unknown record kind {other:?}"))),
            };
            m.records.push(Record {
                image: PathBuf::from(cols[0].trim()),
                annotation,
            });
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::Parse {
            location: path.display().to_string(),
            message: "not UTF-8 text".into(),
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, dir, &path.display().to_string())?;
        if m.records.is_empty() {
            return Err(Error::Input(format!("{}: manifest has no records", path.display())));
        }
        for r in &m.records {
            let mut refs = vec![&r.image];
            if let Annotation::Map(p) = &r.annotation {
                refs.push(p);
            }
            for p in refs {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let (kind, payload) = match &r.annotation {
                Annotation::Windows(ws) => (
                    "windows",
                    ws.iter()
                        .map(|w| format!("{},{},{},{}", w.cx, w.cy, w.w, w.h))
                        .collect::<Vec<_>>()
                        .join(";"),
                ),
                Annotation::Map(p) => ("map", p.display().to_string()),
                Annotation::Fixations(fs) => (
                    "fixations",
                    fs.iter().map(|(x, y)| format!("{x},{y}")).collect::<Vec<_>>().join(";"),
                ),
            };
            let _ = writeln!(s, "{}\t{kind}\t{payload}", r.image.display());
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), self.to_text().as_bytes())
    }
}

/// Loads every record onto a `canvas_h x canvas_w` canvas with targets at `1 / factor` resolution.
///
/// Fixation records carry no target map and are rejected here.
pub fn load_dataset(manifest: &Manifest, canvas_h: usize, canvas_w: usize, factor: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let image_path = manifest.resolve(&r.image);
            let image = read_image(&image_path)?;
            let source = match &r.annotation {
                Annotation::Windows(ws) => TargetSource::Windows(ws.clone()),
                Annotation::Map(p) => TargetSource::Map(read_map(manifest.resolve(p))?),
                Annotation::Fixations(_) => {
                    return Err(Error::Usage(format!(
                        "{}: fixation records have no target map to train or evaluate against",
                        image_path.display()
                    )))
                }
            };
            prepare_sample(&image, &source, canvas_h, canvas_w, factor).map_err(|e| match e {
                Error::Input(m) => Error::Input(format!("{}: {m}", image_path.display())),
                other => other,
            })
        })
        .collect()
}
