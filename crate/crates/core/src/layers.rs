//! Forward and backward passes for the building blocks of a regression network.
//!
//! Every backward function takes the upstream gradient (dL/d output) and
//! returns dL/d input, plus parameter gradients where the layer has any.

use crate::error::{Error, Result};
use crate::tensor::{FilterBank, Tensor};

/// Cross-channel local response normalization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Neighbourhood size in channels, centred on the channel being normalized.
    pub n: usize,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
            n: 5,
        }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !(self.beta > 0.0) || !(self.alpha >= 0.0) || self.n == 0 {
            return Err(Error::Config(format!(
                "invalid LRN parameters {self:?}: need k > 0, alpha >= 0, beta > 0, n >= 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    /// Weighted sum of channels plus bias.
    Linear,
    /// Per-pixel maximum over channels.
    ChannelMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams {
    pub mode: CombineMode,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl CombinerParams {
    pub fn linear(weights: Vec<f64>, bias: f64) -> Self {
        CombinerParams {
            mode: CombineMode::Linear,
            weights,
            bias,
        }
    }

    pub fn channel_max() -> Self {
        CombinerParams {
            mode: CombineMode::ChannelMax,
            weights: Vec::new(),
            bias: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.mode {
            CombineMode::Linear => self.weights.len() + 1,
            CombineMode::ChannelMax => 0,
        }
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if self.mode == CombineMode::Linear && self.weights.len() != channels {
            return Err(Error::Shape(format!(
                "combiner has {} weights for {channels} channels",
                self.weights.len()
            )));
        }
        Ok(())
    }
}

/// Argmax bookkeeping from a max-pooling forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub factor: usize,
    pub input_shape: (usize, usize, usize),
    /// Flat input index of the winning cell, one per output cell.
    pub argmax: Vec<usize>,
}

/// State saved by one convolution block's forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input to the convolution.
    pub input: Tensor,
    /// Convolution output before ReLU.
    pub pre_activation: Tensor,
    pub pool: Option<PoolIndices>,
    /// Input to the LRN layer, when present.
    pub lrn_input: Option<Tensor>,
    pub upsampled: bool,
}

/// Gradients of a same-padded convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients of the output combiner.
#[derive(Debug, Clone)]
pub struct CombineGrads {
    pub dz: Tensor,
    /// Empty in channel-max mode.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub channels: Tensor,
}

fn check_conv(input: &Tensor, bank: &FilterBank) -> Result<()> {
    if input.channels() != bank.in_channels() {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, got {}",
            bank.in_channels(),
            input.channels()
        )));
    }
    Ok(())
}

/// Valid destination range `[lo, hi)` for an offset `d` on an axis of length `n`.
#[inline]
fn shifted_range(n: usize, d: isize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(n);
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// Same-padded 2-D cross-correlation: output size equals input size.
pub fn conv_same_forward(input: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    check_conv(input, bank)?;
    let (_, h, w) = input.shape();
    let (kh, kw) = (bank.kernel_h(), bank.kernel_w());
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(bank.out_channels(), h, w);
    for o in 0..bank.out_channels() {
        let plane = out.channel_mut(o);
        plane.fill(bank.biases[o]);
        for i in 0..bank.in_channels() {
            let src = input.channel(i);
            let kernel = bank.kernel(o, i);
            for ky in 0..kh {
                let dy = ky as isize - ph;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..kw {
                    let wgt = kernel[ky * kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pw;
                    let (x0, x1) = shifted_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_same_backward(input: &Tensor, bank: &FilterBank, upstream: &Tensor) -> Result<ConvGrads> {
    check_conv(input, bank)?;
    let (_, h, w) = input.shape();
    if upstream.shape() != (bank.out_channels(), h, w) {
        return Err(Error::Shape(format!(
            "convolution upstream gradient {:?} does not match output {:?}",
            upstream.shape(),
            (bank.out_channels(), h, w)
        )));
    }
    let (kh, kw) = (bank.kernel_h(), bank.kernel_w());
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut d_input = Tensor::zeros(input.channels(), h, w);
    let mut d_weights = vec![0.0; bank.weights.len()];
    let mut d_biases = vec![0.0; bank.out_channels()];

    for o in 0..bank.out_channels() {
        let g = upstream.channel(o);
        d_biases[o] = g.iter().sum();
        for i in 0..bank.in_channels() {
            let src = input.channel(i);
            let kernel = bank.kernel(o, i);
            for ky in 0..kh {
                let dy = ky as isize - ph;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..kw {
                    let dx = kx as isize - pw;
                    let (x0, x1) = shifted_range(w, dx);
                    if x0 == x1 {
                        continue;
                    }
                    let wgt = kernel[ky * kw + kx];
                    let mut acc = 0.0;
                    let d_plane = d_input.channel_mut(i);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let s = &src[s0..s0 + (x1 - x0)];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if wgt != 0.0 {
                            let ds = &mut d_plane[s0..s0 + (x1 - x0)];
                            for (d, gv) in ds.iter_mut().zip(gr) {
                                *d += wgt * gv;
                            }
                        }
                    }
                    d_weights[bank.weight_index(o, i, ky, kx)] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        weights: d_weights,
        biases: d_biases,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(upstream, "relu backward")?;
    let mut out = upstream.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

fn check_divisible(t: &Tensor, p: usize, what: &str) -> Result<()> {
    if p == 0 || t.height() % p != 0 || t.width() % p != 0 {
        return Err(Error::Dimension(format!(
            "{what}: {}x{} is not divisible by {p}",
            t.height(),
            t.width()
        )));
    }
    Ok(())
}

/// Non-overlapping `p x p` max-pooling. Ties go to the first cell in row-major order.
pub fn maxpool_forward(input: &Tensor, p: usize) -> Result<(Tensor, PoolIndices)> {
    check_divisible(input, p, "max-pool")?;
    let (c, h, w) = input.shape();
    let (oh, ow) = (h / p, w / p);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let data = input.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = input.index(ch, oy * p, ox * p);
                for dy in 0..p {
                    let row = input.index(ch, oy * p + dy, ox * p);
                    for idx in row..row + p {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.set(ch, oy, ox, data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            factor: p,
            input_shape: (c, h, w),
            argmax,
        },
    ))
}

pub fn maxpool_backward(upstream: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::Shape(format!(
            "max-pool upstream has {} cells, forward produced {}",
            upstream.len(),
            indices.argmax.len()
        )));
    }
    let (c, h, w) = indices.input_shape;
    let mut out = Tensor::zeros(c, h, w);
    let d = out.data_mut();
    for (&g, &idx) in upstream.data().iter().zip(&indices.argmax) {
        d[idx] += g;
    }
    Ok(out)
}

/// Sum of squares over the clipped channel neighbourhood at each pixel.
fn lrn_denominators(input: &Tensor, params: &LrnParams) -> Tensor {
    let (c, h, w) = input.shape();
    let n = h * w;
    let half = params.n / 2;
    let mut denom = Tensor::zeros(c, h, w);
    let a = input.data();
    let d = denom.data_mut();
    for ch in 0..c {
        let lo = ch.saturating_sub(half);
        let hi = (ch + half).min(c - 1);
        let dst = &mut d[ch * n..(ch + 1) * n];
        for j in lo..=hi {
            for (acc, &v) in dst.iter_mut().zip(&a[j * n..(j + 1) * n]) {
                *acc += v * v;
            }
        }
        for v in dst.iter_mut() {
            *v = params.k + params.alpha * *v;
        }
    }
    denom
}

/// `b_c = a_c / (k + alpha * sum_{j in N(c)} a_j^2)^beta`, neighbourhood clipped at the ends.
pub fn lrn_forward(input: &Tensor, params: &LrnParams) -> Result<Tensor> {
    params.validate()?;
    let denom = lrn_denominators(input, params);
    let mut out = input.clone();
    for (b, &d) in out.data_mut().iter_mut().zip(denom.data()) {
        *b *= d.powf(-params.beta);
    }
    Ok(out)
}

pub fn lrn_backward(input: &Tensor, params: &LrnParams, upstream: &Tensor) -> Result<Tensor> {
    params.validate()?;
    input.expect_same_shape(upstream, "lrn backward")?;
    let (c, h, w) = input.shape();
    let n = h * w;
    let half = params.n / 2;
    let denom = lrn_denominators(input, params);
    let a = input.data();
    let g = upstream.data();
    let dd = denom.data();
    // t_c = g_c * a_c * D_c^(-beta-1)
    let t: Vec<f64> = (0..a.len())
        .map(|i| g[i] * a[i] * dd[i].powf(-params.beta - 1.0))
        .collect();
    let scale = 2.0 * params.alpha * params.beta;
    let mut out = Tensor::zeros(c, h, w);
    let o = out.data_mut();
    for ch in 0..c {
        let lo = ch.saturating_sub(half);
        let hi = (ch + half).min(c - 1);
        for p in 0..n {
            let i = ch * n + p;
            let mut cross = 0.0;
            for j in lo..=hi {
                cross += t[j * n + p];
            }
            o[i] = g[i] * dd[i].powf(-params.beta) - scale * a[i] * cross;
        }
    }
    Ok(out)
}

/// Nearest-neighbour block copy: every input cell becomes a constant `p x p` block.
pub fn upsample_forward(input: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::Dimension("up-sampling factor must be >= 1".into()));
    }
    let (c, h, w) = input.shape();
    Ok(Tensor::from_fn(c, h * p, w * p, |ch, y, x| {
        input.get(ch, y / p, x / p)
    }))
}

/// Exact adjoint of [`upsample_forward`]: each cell receives the sum of its block's gradient.
pub fn upsample_backward(upstream: &Tensor, p: usize) -> Result<Tensor> {
    check_divisible(upstream, p, "up-sampling backward")?;
    let (c, h, w) = upstream.shape();
    let mut out = Tensor::zeros(c, h / p, w / p);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = out.index(ch, y / p, x / p);
                out.data_mut()[i] += upstream.get(ch, y, x);
            }
        }
    }
    Ok(out)
}

/// Block-constant shortcut `dA(x, y) = p^2 * dA_up(p*x + p - 1, p*y + p - 1)`.
///
/// Agrees with [`upsample_backward`] only when the upstream gradient is
/// constant within every block. Kept as a negative control for gradient checks.
pub fn upsample_backward_block_constant(upstream: &Tensor, p: usize) -> Result<Tensor> {
    check_divisible(upstream, p, "up-sampling backward")?;
    let (c, h, w) = upstream.shape();
    let scale = (p * p) as f64;
    Ok(Tensor::from_fn(c, h / p, w / p, |ch, y, x| {
        scale * upstream.get(ch, y * p + p - 1, x * p + p - 1)
    }))
}

/// Logistic function, saturating at the nearest representable values inside (0, 1).
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Channel index attaining the per-pixel maximum (first on ties).
fn channel_argmax(channels: &Tensor, p: usize) -> usize {
    let n = channels.plane_len();
    let d = channels.data();
    let mut best = 0;
    for c in 1..channels.channels() {
        if d[c * n + p] > d[best * n + p] {
            best = c;
        }
    }
    best
}

/// Returns `(A_o, Z)` with `A_o = sigmoid(Z)`, both single-channel.
pub fn combine_forward(channels: &Tensor, params: &CombinerParams) -> Result<(Tensor, Tensor)> {
    params.check_channels(channels.channels())?;
    let (c, h, w) = channels.shape();
    let n = h * w;
    let mut z = Tensor::zeros(1, h, w);
    match params.mode {
        CombineMode::Linear => {
            let zd = z.data_mut();
            zd.fill(params.bias);
            for ch in 0..c {
                let wgt = params.weights[ch];
                for (acc, &v) in zd.iter_mut().zip(channels.channel(ch)) {
                    *acc += wgt * v;
                }
            }
        }
        CombineMode::ChannelMax => {
            for p in 0..n {
                let best = channel_argmax(channels, p);
                z.data_mut()[p] = channels.data()[best * n + p];
            }
        }
    }
    let a = z.map(sigmoid);
    Ok((a, z))
}

/// Backward pass of the combiner with content mask `mask`:
/// `dZ = mask * dA_o * A_o * (1 - A_o)`.
pub fn combine_backward(
    d_out: &Tensor,
    a_out: &Tensor,
    channels: &Tensor,
    mask: &Tensor,
    params: &CombinerParams,
) -> Result<CombineGrads> {
    params.check_channels(channels.channels())?;
    let (c, h, w) = channels.shape();
    for (t, name) in [(d_out, "dA_o"), (a_out, "A_o"), (mask, "mask")] {
        if t.shape() != (1, h, w) {
            return Err(Error::Shape(format!(
                "combiner {name} is {:?}, expected {:?}",
                t.shape(),
                (1, h, w)
            )));
        }
    }
    let n = h * w;
    let dz = Tensor::new(
        1,
        h,
        w,
        (0..n)
            .map(|p| {
                let a = a_out.data()[p];
                mask.data()[p] * d_out.data()[p] * a * (1.0 - a)
            })
            .collect(),
    )?;
    let mut d_channels = Tensor::zeros(c, h, w);
    let (weights, bias) = match params.mode {
        CombineMode::Linear => {
            let dw = (0..c)
                .map(|ch| channels.channel(ch).iter().zip(dz.data()).map(|(a, g)| a * g).sum())
                .collect();
            for ch in 0..c {
                let wgt = params.weights[ch];
                for (d, &g) in d_channels.channel_mut(ch).iter_mut().zip(dz.data()) {
                    *d = wgt * g;
                }
            }
            (dw, dz.sum())
        }
        CombineMode::ChannelMax => {
            for p in 0..n {
                let best = channel_argmax(channels, p);
                d_channels.data_mut()[best * n + p] = dz.data()[p];
            }
            (Vec::new(), 0.0)
        }
    };
    Ok(CombineGrads {
        dz,
        weights,
        bias,
        channels: d_channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation with explicit bounds checks.
    fn naive_conv(input: &Tensor, bank: &FilterBank) -> Tensor {
        let (_, h, w) = input.shape();
        let (kh, kw) = (bank.kernel_h() as isize, bank.kernel_w() as isize);
        Tensor::from_fn(bank.out_channels(), h, w, |o, y, x| {
            let mut acc = bank.biases[o];
            for i in 0..bank.in_channels() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = y as isize + ky - kh / 2;
                        let sx = x as isize + kx - kw / 2;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            acc += bank.weights[bank.weight_index(o, i, ky as usize, kx as usize)]
                                * input.get(i, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_zero_filter_gives_bias() {
        let input = Tensor::filled(1, 3, 3, 1.0);
        let mut bank = FilterBank::zeros(1, 1, 3, 3).unwrap();
        bank.biases[0] = 0.5;
        let out = conv_same_forward(&input, &bank).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for channels in 1..4 {
            let input = random_tensor(&mut rng, channels, 5, 7);
            let bank = FilterBank::identity(channels, 5).unwrap();
            assert_eq!(conv_same_forward(&input, &bank).unwrap(), input);
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_tensor(&mut rng, 1, 4, 4);
        let bank = FilterBank::new(
            1,
            1,
            3,
            3,
            (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![rng.gen_range(-1.0..1.0)],
        )
        .unwrap();
        let fast = conv_same_forward(&input, &bank).unwrap();
        let slow = naive_conv(&input, &bank);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, 2, 1, 2);
        let bank = FilterBank::new(
            1,
            2,
            7,
            5,
            (0..70).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![0.3],
        )
        .unwrap();
        let fast = conv_same_forward(&input, &bank).unwrap();
        let slow = naive_conv(&input, &bank);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = random_tensor(&mut rng, 1, 1, 2);
        let grads = conv_same_backward(&input, &bank, &g).unwrap();
        assert_eq!(grads.input.shape(), (2, 1, 2));
    }

    #[test]
    fn conv_rejects_bad_configs() {
        assert!(matches!(
            FilterBank::zeros(1, 1, 2, 3),
            Err(Error::Config(_))
        ));
        let bank = FilterBank::zeros(1, 2, 3, 3).unwrap();
        assert!(matches!(
            conv_same_forward(&Tensor::zeros(1, 4, 4), &bank),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::filled(2, 2, 2, -3.0)).data().iter().all(|&v| v == 0.0));
        let x = Tensor::new(1, 1, 3, vec![-1.0, 2.0, 0.0]).unwrap();
        let g = relu_backward(&x, &Tensor::filled(1, 1, 3, 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxpool_examples() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let (out, idx) = maxpool_forward(&t, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);

        let (out, idx) = maxpool_forward(&Tensor::filled(1, 2, 2, 5.0), 2).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(idx.argmax, vec![0]);

        let (out, _) = maxpool_forward(&Tensor::filled(2, 6, 4, 1.5), 2).unwrap();
        assert_eq!(out.shape(), (2, 3, 2));
        assert!(out.data().iter().all(|&v| v == 1.5));

        assert!(matches!(
            maxpool_forward(&Tensor::zeros(1, 3, 4), 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let t = Tensor::from_rows(&[&[1.0, 9.0, 0.0, 0.0], &[3.0, 4.0, 0.0, -1.0]]).unwrap();
        let (_, idx) = maxpool_forward(&t, 2).unwrap();
        for (k, &i) in idx.argmax.iter().enumerate() {
            let (oy, ox) = (k / 2, k % 2);
            let (y, x) = (i / 4, i % 4);
            assert!(y / 2 == oy && x / 2 == ox);
        }
        let g = maxpool_backward(&Tensor::new(1, 1, 2, vec![2.0, 3.0]).unwrap(), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lrn_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 4, 3, 3);
        let identity = LrnParams {
            k: 1.0,
            alpha: 0.0,
            beta: 0.75,
            n: 3,
        };
        assert_eq!(lrn_forward(&t, &identity).unwrap(), t);

        let p = LrnParams {
            k: 2.0,
            alpha: 1.0,
            beta: 0.75,
            n: 1,
        };
        let out = lrn_forward(&Tensor::filled(1, 2, 2, 1.0), &p).unwrap();
        let expected = 3f64.powf(-0.75);
        assert!((expected - 0.438691).abs() < 1e-6);
        assert!(out.data().iter().all(|&v| (v - expected).abs() < 1e-15));

        let zeros = lrn_forward(&Tensor::zeros(3, 2, 2), &LrnParams::default()).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lrn_clips_neighbourhood() {
        // channel 0 of 3 with n = 3 sees channels 0 and 1 only
        let t = Tensor::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = LrnParams {
            k: 1.0,
            alpha: 1.0,
            beta: 1.0,
            n: 3,
        };
        let out = lrn_forward(&t, &p).unwrap();
        assert!((out.data()[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((out.data()[1] - 2.0 / 15.0).abs() < 1e-15);
        assert!((out.data()[2] - 3.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn upsample_examples() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let up = upsample_forward(&t, 2).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), &expected);
        let cell = upsample_forward(&Tensor::filled(1, 1, 1, 0.7), 3).unwrap();
        assert_eq!(cell.shape(), (1, 3, 3));
        assert!(cell.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = upsample_backward(&Tensor::filled(1, 4, 4, 1.0), 2).unwrap();
        assert!(g.data().iter().all(|&v| v == 4.0));
        let block = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(upsample_backward(&block, 2).unwrap().data(), &[10.0]);
        // the block-constant shortcut only agrees for uniform blocks
        assert_eq!(upsample_backward_block_constant(&block, 2).unwrap().data(), &[16.0]);
        assert_eq!(
            upsample_backward_block_constant(&Tensor::filled(1, 4, 4, 1.0), 2).unwrap(),
            g
        );
    }

    #[test]
    fn upsample_adjoint_and_pool_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in 1..4 {
            let a = random_tensor(&mut rng, 2, 3, 4);
            let g = random_tensor(&mut rng, 2, 3 * p, 4 * p);
            let lhs = upsample_forward(&a, p).unwrap().dot(&g).unwrap();
            let rhs = a.dot(&upsample_backward(&g, p).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
            let (back, _) = maxpool_forward(&upsample_forward(&a, p).unwrap(), p).unwrap();
            assert_eq!(back, a);
        }
    }

    #[test]
    fn combine_examples() {
        let params = CombinerParams::linear(vec![1.0], 0.0);
        let (a, _) = combine_forward(&Tensor::zeros(1, 2, 2), &params).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zeros = CombinerParams::linear(vec![0.0; 3], 0.0);
        let (a, _) = combine_forward(&random_tensor(&mut rng, 3, 2, 2), &zeros).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.5));

        let two = Tensor::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let (a, z) = combine_forward(&two, &CombinerParams::linear(vec![2.0, -1.0], 0.5)).unwrap();
        assert_eq!(z.data(), &[0.5]);
        assert!((a.data()[0] - 0.622459).abs() < 1e-6);
        assert_eq!(a.data()[0], 1.0 / (1.0 + (-0.5f64).exp()));

        assert!(matches!(
            combine_forward(&two, &CombinerParams::linear(vec![1.0], 0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn combine_output_in_open_interval() {
        let extreme = Tensor::new(1, 1, 4, vec![-1e4, -40.0, 40.0, 1e4]).unwrap();
        let (a, _) = combine_forward(&extreme, &CombinerParams::linear(vec![1.0], 0.0)).unwrap();
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn combine_backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch = random_tensor(&mut rng, 3, 4, 4);
        let params = CombinerParams::linear(vec![0.3, -0.2, 0.9], 0.1);
        let (a, _) = combine_forward(&ch, &params).unwrap();
        let d = random_tensor(&mut rng, 1, 4, 4);
        let g = combine_backward(&d, &a, &ch, &Tensor::zeros(1, 4, 4), &params).unwrap();
        assert!(g.dz.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert_eq!(g.bias, 0.0);
        assert!(g.channels.data().iter().all(|&v| v == 0.0));

        let one = Tensor::filled(1, 1, 1, 1.0);
        let half = Tensor::filled(1, 1, 1, 0.5);
        let g = combine_backward(&one, &half, &Tensor::zeros(1, 1, 1), &one, &CombinerParams::linear(vec![1.0], 0.0))
            .unwrap();
        assert_eq!(g.dz.data(), &[0.25]);
    }

    #[test]
    fn channel_max_routes_to_winner() {
        let ch = Tensor::new(2, 1, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let params = CombinerParams::channel_max();
        let (a, z) = combine_forward(&ch, &params).unwrap();
        assert_eq!(z.data(), &[3.0, 5.0]);
        let g = combine_backward(&Tensor::filled(1, 1, 2, 1.0), &a, &ch, &Tensor::filled(1, 1, 2, 1.0), &params)
            .unwrap();
        let dz = g.dz.data();
        // pixel 1 ties between channels; the first channel wins
        assert_eq!(g.channels.data(), &[0.0, dz[1], dz[0], 0.0]);
        assert!(g.weights.is_empty());
    }
}
