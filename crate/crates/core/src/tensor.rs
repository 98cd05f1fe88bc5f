//! Dense rank-3 tensors (channels x height x width) of `f64`.
//!
//! Layout is channel-major and row-major within a channel, so a single
//! channel is one contiguous slice and one row is one contiguous sub-slice.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// Panics if any dimension is zero.
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "tensor dimensions must be >= 1, got {channels}x{height}x{width}"
        );
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds a tensor from `f(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    /// A single-channel tensor from a row-major slice of rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(1, height, width, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Inner product; shapes must match.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Zero-pads each channel by the given margins.
    pub fn pad_zero(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
        let h = self.height + top + bottom;
        let w = self.width + left + right;
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                let src = &self.data[self.index(c, y, 0)..][..self.width];
                let dst = out.index(c, y + top, left);
                out.data[dst..dst + self.width].copy_from_slice(src);
            }
        }
        out
    }

    /// Averages each non-overlapping `factor x factor` block.
    pub fn block_downsample(&self, factor: usize) -> Result<Tensor> {
        if factor == 0 {
            return Err(Error::Dimension("downsample factor must be >= 1".into()));
        }
        if self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let mut out = Tensor::zeros(self.channels, oh, ow);
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        let row = self.index(c, oy * factor + dy, ox * factor);
                        acc += self.data[row..row + factor].iter().sum::<f64>();
                    }
                    out.set(c, oy, ox, acc * scale);
                }
            }
        }
        Ok(out)
    }

    /// Extracts the `h x w` region whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = self.index(c, top + y, left);
                let dst = out.index(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }
}

/// Neumaier-compensated sum; rounding error stays at one ulp of the result.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Convolution filters and per-output-channel biases.
///
/// Weights are stored out-major, then input channel, then kernel row, then
/// kernel column.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Config("filter bank needs >= 1 input and output channel".into()));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel {kernel_h}x{kernel_w} must have odd sides for same-padding"
            )));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if weights.len() != expected || biases.len() != out_channels {
            return Err(Error::Shape(format!(
                "filter bank {out_channels}x{in_channels}x{kernel_h}x{kernel_w} needs {expected} weights \
                 and {out_channels} biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        Ok(FilterBank {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights,
            biases,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            vec![0.0; out_channels],
        )
    }

    /// Identity bank: a centered delta from each input channel to the same output channel.
    pub fn identity(channels: usize, kernel: usize) -> Result<Self> {
        let mut bank = Self::zeros(channels, channels, kernel, kernel)?;
        let centre = kernel / 2;
        for c in 0..channels {
            let i = bank.weight_index(c, c, centre, centre);
            bank.weights[i] = 1.0;
        }
        Ok(bank)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    /// Number of scalar parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    /// The `kernel_h * kernel_w` weights connecting input `i` to output `o`.
    pub fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let n = self.kernel_h * self.kernel_w;
        let start = (o * self.in_channels + i) * n;
        &self.weights[start..start + n]
    }
}
