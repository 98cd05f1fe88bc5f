//! Target map synthesis and fixed-canvas sample preparation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower end of the renormalized target range.
pub const TARGET_FLOOR: f64 = 0.1;
/// Upper end of the renormalized target range.
pub const TARGET_CEIL: f64 = 0.9;

/// Axis-aligned detection window in pixel coordinates (pixel centres at integers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Window {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let win = Window { cx, cy, w, h };
        win.validate()?;
        Ok(win)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.w.is_finite() || !self.h.is_finite() {
            return Err(Error::Input(format!(
                "window size {}x{} must be positive",
                self.w, self.h
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Input("window centre must be finite".into()));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Gaussian spread per axis: a sixth of the window extent.
    pub fn sigmas(&self) -> (f64, f64) {
        (self.w / 6.0, self.h / 6.0)
    }

    /// Reflection about the vertical centre line of an image `image_width` pixels wide.
    pub fn mirrored(&self, image_width: usize) -> Window {
        Window {
            cx: (image_width as f64 - 1.0) - self.cx,
            ..*self
        }
    }

    /// Whether the window lies within `[0, width] x [0, height]`.
    pub fn inside(&self, height: usize, width: usize) -> bool {
        self.left() >= 0.0 && self.top() >= 0.0 && self.right() <= width as f64 && self.bottom() <= height as f64
    }
}

/// One training or evaluation item on a fixed canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    /// Single-channel target at map resolution.
    pub target: Tensor,
    /// 1 where the map cell is entirely image content, 0 over padding.
    pub mask: Tensor,
    pub windows: Vec<Window>,
    /// Fixation cells `(x, y)` at map resolution.
    pub fixations: Vec<(usize, usize)>,
    /// Height and width of the original image before padding.
    pub content_size: (usize, usize),
}

impl Sample {
    pub fn new(image: Tensor, target: Tensor, mask: Tensor) -> Result<Self> {
        if target.channels() != 1 {
            return Err(Error::Shape("target must be single-channel".into()));
        }
        target.expect_same_shape(&mask, "sample target vs mask")?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        let content_size = (image.height(), image.width());
        Ok(Sample {
            image,
            target,
            mask,
            windows: Vec::new(),
            fixations: Vec::new(),
            content_size,
        })
    }
}

/// Peak-normalized Gaussians, one per window with `sigma = size / 6`, combined by pixelwise max.
pub fn gaussian_map(windows: &[Window], height: usize, width: usize) -> Result<Tensor> {
    for w in windows {
        w.validate()?;
    }
    let mut map = Tensor::zeros(1, height, width);
    for win in windows {
        let (sx, sy) = win.sigmas();
        let (ax, ay) = (0.5 / (sx * sx), 0.5 / (sy * sy));
        let gx: Vec<f64> = (0..width)
            .map(|x| {
                let d = x as f64 - win.cx;
                -d * d * ax
            })
            .collect();
        for y in 0..height {
            let dy = y as f64 - win.cy;
            let ey = -dy * dy * ay;
            let row = &mut map.data_mut()[y * width..(y + 1) * width];
            for (v, ex) in row.iter_mut().zip(&gx) {
                *v = v.max((ex + ey).exp());
            }
        }
    }
    Ok(map)
}

/// Affine map `[0, 1] -> [0.1, 0.9]`.
pub fn renormalize_range(map: &Tensor) -> Result<Tensor> {
    if let Some(bad) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("map value {bad} outside [0, 1]")));
    }
    Ok(map.map(|v| TARGET_FLOOR + (TARGET_CEIL - TARGET_FLOOR) * v))
}

/// Where a sample's full-resolution target comes from.
#[derive(Debug, Clone)]
pub enum TargetSource {
    Windows(Vec<Window>),
    /// Single-channel map with values in `[0, 1]`, same size as the image.
    Map(Tensor),
}

/// Content mask at map resolution: a cell is 1 iff its whole `factor x factor`
/// source block lies inside the `content_h x content_w` top-left region.
pub fn content_mask(content_h: usize, content_w: usize, canvas_h: usize, canvas_w: usize, factor: usize) -> Tensor {
    let (full_h, full_w) = (content_h / factor, content_w / factor);
    Tensor::from_fn(1, canvas_h / factor, canvas_w / factor, |_, y, x| {
        if y < full_h && x < full_w {
            1.0
        } else {
            0.0
        }
    })
}

/// Pads `image` onto a top-left-anchored canvas and builds its downsampled target and mask.
pub fn prepare_sample(
    image: &Tensor,
    source: &TargetSource,
    canvas_h: usize,
    canvas_w: usize,
    factor: usize,
) -> Result<Sample> {
    let (h, w) = (image.height(), image.width());
    if h > canvas_h || w > canvas_w {
        return Err(Error::Input(format!(
            "image {h}x{w} does not fit canvas {canvas_h}x{canvas_w}"
        )));
    }
    if factor == 0 || canvas_h % factor != 0 || canvas_w % factor != 0 {
        return Err(Error::Dimension(format!(
            "canvas {canvas_h}x{canvas_w} is not divisible by factor {factor}"
        )));
    }
    let padded = image.pad_zero(0, canvas_h - h, 0, canvas_w - w);
    let (full, windows) = match source {
        TargetSource::Windows(ws) => (gaussian_map(ws, canvas_h, canvas_w)?, ws.clone()),
        TargetSource::Map(m) => {
            if m.shape() != (1, h, w) {
                return Err(Error::Shape(format!(
                    "target map {:?} does not match image {h}x{w}",
                    m.shape()
                )));
            }
            (m.pad_zero(0, canvas_h - h, 0, canvas_w - w), Vec::new())
        }
    };
    let target = renormalize_range(&full.block_downsample(factor)?)?;
    let mask = content_mask(h, w, canvas_h, canvas_w, factor);
    let mut sample = Sample::new(padded, target, mask)?;
    sample.windows = windows;
    sample.content_size = (h, w);
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gaussian_peak_and_three_sigma() {
        let win = Window::new(128.0, 128.0, 96.0, 96.0).unwrap();
        assert_eq!(win.sigmas(), (16.0, 16.0));
        let map = gaussian_map(&[win], 256, 256).unwrap();
        assert_eq!(map.get(0, 128, 128), 1.0);
        let expected = (-4.5f64).exp();
        assert!((expected - 0.011109).abs() < 1e-6);
        assert!((map.get(0, 128, 176) - expected).abs() < 1e-15);
    }

    #[test]
    fn duplicate_windows_are_idempotent() {
        let win = Window::new(20.3, 14.0, 12.0, 30.0).unwrap();
        let one = gaussian_map(&[win], 40, 50).unwrap();
        let two = gaussian_map(&[win, win], 40, 50).unwrap();
        assert_eq!(one, two);
        assert!(gaussian_map(&[], 4, 4).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_degenerate_windows() {
        assert!(matches!(Window::new(1.0, 1.0, 0.0, 3.0), Err(Error::Input(_))));
        let bad = Window {
            cx: 0.0,
            cy: 0.0,
            w: -2.0,
            h: 2.0,
        };
        assert!(matches!(gaussian_map(&[bad], 4, 4), Err(Error::Input(_))));
    }

    #[test]
    fn renormalize_examples() {
        let t = Tensor::new(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let r = renormalize_range(&t).unwrap();
        assert!((r.data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(r.data()[1], 0.5);
        assert!((r.data()[2] - 0.9).abs() < 1e-15);
        assert!(matches!(
            renormalize_range(&Tensor::filled(1, 1, 1, 1.5)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lfw_sized_image_on_256_canvas() {
        let image = Tensor::filled(3, 250, 250, 0.5);
        let win = Window::new(125.0, 125.0, 100.0, 120.0).unwrap();
        let s = prepare_sample(&image, &TargetSource::Windows(vec![win]), 256, 256, 4).unwrap();
        assert_eq!(s.target.shape(), (1, 64, 64));
        assert_eq!(s.image.shape(), (3, 256, 256));
        for y in 0..64 {
            for x in 0..64 {
                let expected = if y < 62 && x < 62 { 1.0 } else { 0.0 };
                assert_eq!(s.mask.get(0, y, x), expected, "cell ({y},{x})");
            }
        }
        assert_eq!(s.content_size, (250, 250));
    }

    #[test]
    fn canvas_sized_image_is_fully_unmasked() {
        let image = Tensor::filled(1, 64, 64, 0.5);
        let s = prepare_sample(&image, &TargetSource::Windows(vec![]), 64, 64, 4).unwrap();
        assert!(s.mask.data().iter().all(|&m| m == 1.0));
        assert!(s.target.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn prepare_rejects_oversized_images() {
        let image = Tensor::zeros(1, 65, 10);
        let r = prepare_sample(&image, &TargetSource::Windows(vec![]), 64, 64, 4);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn raw_map_targets_are_padded_and_downsampled() {
        let image = Tensor::zeros(1, 6, 8);
        let map = Tensor::filled(1, 6, 8, 1.0);
        let s = prepare_sample(&image, &TargetSource::Map(map), 8, 8, 2).unwrap();
        assert_eq!(s.target.shape(), (1, 4, 4));
        // rows 0..3 are content, row 3 is padding
        assert!((s.target.get(0, 0, 0) - 0.9).abs() < 1e-15);
        assert!((s.target.get(0, 3, 0) - 0.1).abs() < 1e-15);
        assert_eq!(s.mask.get(0, 2, 3), 1.0);
        assert_eq!(s.mask.get(0, 3, 3), 0.0);
    }

    proptest! {
        #[test]
        fn targets_stay_in_range(cx in 0.0f64..64.0, cy in 0.0f64..64.0, w in 2.0f64..60.0, h in 2.0f64..60.0,
                                 ih in 8usize..=64, iw in 8usize..=64) {
            let image = Tensor::zeros(1, ih, iw);
            let win = Window::new(cx, cy, w, h).unwrap();
            let s = prepare_sample(&image, &TargetSource::Windows(vec![win]), 64, 64, 4).unwrap();
            prop_assert!(s.target.data().iter().all(|v| (0.1..=0.9).contains(v)));
            prop_assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        }

        #[test]
        fn mirrored_windows_mirror_the_map(cx in 0.0f64..40.0, cy in 0.0f64..30.0, w in 2.0f64..30.0, h in 2.0f64..30.0) {
            let (height, width) = (30, 40);
            let win = Window::new(cx, cy, w, h).unwrap();
            let map = gaussian_map(&[win], height, width).unwrap();
            let mirrored = gaussian_map(&[win.mirrored(width)], height, width).unwrap();
            for y in 0..height {
                for x in 0..width {
                    let a = map.get(0, y, x);
                    let b = mirrored.get(0, y, width - 1 - x);
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
                }
            }
        }
    }
}
