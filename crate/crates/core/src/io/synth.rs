//! Synthetic detection data: bright elliptical blobs on dark noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::write_image;
use super::manifest::{Annotation, Manifest, Record};
use crate::error::{Error, Result};
use crate::groundtruth::Window;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub canvas: usize,
    pub factor: usize,
    pub min_windows: usize,
    pub max_windows: usize,
    /// Window sides are drawn from `[min_size, max_size]` pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum free pixels between any two windows.
    pub gap: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Windows between a quarter and 7/16 of the canvas, one to two per image.
    pub fn new(count: usize, canvas: usize, factor: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            canvas,
            factor,
            min_windows: 1,
            max_windows: 2,
            min_size: (canvas / 4).max(1),
            max_size: (canvas * 7 / 16).max(1),
            gap: factor,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.canvas == 0 || self.canvas % self.factor != 0 {
            return Err(Error::Dimension(format!(
                "canvas {} is not divisible by factor {}",
                self.canvas, self.factor
            )));
        }
        if self.min_windows > self.max_windows || self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config("window count and size ranges must be non-empty".into()));
        }
        if self.max_size > self.canvas {
            return Err(Error::Config(format!(
                "window size {} exceeds canvas {}",
                self.max_size, self.canvas
            )));
        }
        Ok(())
    }
}

fn separated(a: &Window, b: &Window, gap: f64) -> bool {
    a.right() + gap <= b.left() || b.right() + gap <= a.left() || a.bottom() + gap <= b.top() || b.bottom() + gap <= a.top()
}

/// Windows with integer corners, fully inside the canvas and mutually separated.
///
/// Placement is by rejection; an image may get fewer windows than drawn when
/// the canvas is crowded, but never fewer than one.
fn draw_windows(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Window> {
    let want = rng.gen_range(cfg.min_windows..=cfg.max_windows);
    let mut out: Vec<Window> = Vec::with_capacity(want);
    let mut attempts = 0;
    while out.len() < want && attempts < 1000 {
        attempts += 1;
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h = rng.gen_range(cfg.min_size..=cfg.max_size);
        let left = rng.gen_range(0..=cfg.canvas - w);
        let top = rng.gen_range(0..=cfg.canvas - h);
        let win = Window {
            cx: left as f64 + w as f64 / 2.0,
            cy: top as f64 + h as f64 / 2.0,
            w: w as f64,
            h: h as f64,
        };
        if out.iter().all(|o| separated(o, &win, cfg.gap as f64)) {
            out.push(win);
        }
    }
    out
}

fn render(cfg: &SynthConfig, windows: &[Window], rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.canvas;
    let mut img = Tensor::from_fn(1, n, n, |_, _, _| 0.08 + 0.14 * rng.gen::<f64>());
    for win in windows {
        let brightness = rng.gen_range(0.75..0.95);
        let (rx, ry) = (win.w / 2.0, win.h / 2.0);
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 - win.cx) / rx;
                let dy = (y as f64 - win.cy) / ry;
                let r2 = dx * dx + dy * dy;
                if r2 <= 1.0 {
                    let v = brightness - 0.15 * r2 + 0.06 * (rng.gen::<f64>() - 0.5);
                    img.set(0, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

/// Writes `img_NNNN.pgm` files and `manifest.tsv` into `out_dir`.
///
/// Output is byte-identical for the same config.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut manifest = Manifest::new(dir);
    for i in 0..cfg.count {
        let windows = draw_windows(cfg, &mut rng);
        let img = render(cfg, &windows, &mut rng);
        let name = PathBuf::from(format!("img_{i:04}.pgm"));
        write_image(&img, dir.join(&name))?;
        manifest.records.push(Record {
            image: name,
            annotation: Annotation::Windows(windows),
        });
    }
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig::new(4, 32, 4, 17);
        synth_dataset(&cfg, a.path()).unwrap();
        synth_dataset(&cfg, b.path()).unwrap();
        for name in ["manifest.tsv", "img_0000.pgm", "img_0003.pgm"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn zero_images_gives_empty_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = synth_dataset(&SynthConfig::new(0, 64, 4, 0), d.path()).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(std::fs::read(d.path().join("manifest.tsv")).unwrap(), b"");
    }

    #[test]
    fn windows_inside_and_apart() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(40, 64, 4, 5);
        let m = synth_dataset(&cfg, d.path()).unwrap();
        for r in &m.records {
            let Annotation::Windows(ws) = &r.annotation else {
                panic!()
            };
            assert!((1..=2).contains(&ws.len()));
            for (i, w) in ws.iter().enumerate() {
                assert!(w.inside(64, 64));
                for o in &ws[i + 1..] {
                    assert!(separated(w, o, 4.0));
                }
            }
        }
        assert!(matches!(
            synth_dataset(&SynthConfig::new(1, 30, 4, 0), d.path()),
            Err(Error::Dimension(_))
        ));
    }
}
