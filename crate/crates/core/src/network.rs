//! Convolution blocks plus an output combiner, trained as a whole-image regressor.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::groundtruth::Sample;
use crate::layers::{self, CombineMode, CombinerParams, LayerCache, LrnParams};
use crate::tensor::{compensated_sum, FilterBank, Tensor};

/// One convolution block: conv, ReLU, then optional 2x max-pool, LRN and 2x up-sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub num_filters: usize,
    pub filter_size: usize,
    pub pool: bool,
    pub lrn: bool,
    pub upsample: bool,
}

impl BlockSpec {
    pub fn new(num_filters: usize, filter_size: usize) -> Self {
        BlockSpec {
            num_filters,
            filter_size,
            pool: false,
            lrn: false,
            upsample: false,
        }
    }

    pub fn pooled(mut self) -> Self {
        self.pool = true;
        self
    }

    pub fn with_lrn(mut self) -> Self {
        self.lrn = true;
        self
    }

    pub fn upsampled(mut self) -> Self {
        self.pool = true;
        self.upsample = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub combiner: CombineMode,
    /// Required ratio of input size to output map size.
    pub target_factor: usize,
    /// Shared by every block that enables LRN.
    pub lrn: LrnParams,
}

impl NetworkSpec {
    /// Three blocks of five filters (11x11, 7x7, 5x5) with a net 4x reduction.
    pub fn face(input_channels: usize) -> Self {
        NetworkSpec {
            input_channels,
            blocks: vec![
                BlockSpec::new(5, 11).pooled().with_lrn(),
                BlockSpec::new(5, 7).pooled().with_lrn(),
                BlockSpec::new(5, 5).upsampled(),
            ],
            combiner: CombineMode::Linear,
            target_factor: 4,
            lrn: LrnParams::default(),
        }
    }

    /// Four blocks of ten filters (7x7 twice, 5x5 twice) with a net 4x reduction.
    pub fn saliency(input_channels: usize) -> Self {
        NetworkSpec {
            input_channels,
            blocks: vec![
                BlockSpec::new(10, 7).pooled().with_lrn(),
                BlockSpec::new(10, 7).pooled().with_lrn(),
                BlockSpec::new(10, 5).upsampled(),
                BlockSpec::new(10, 5).upsampled(),
            ],
            combiner: CombineMode::Linear,
            target_factor: 4,
            lrn: LrnParams::default(),
        }
    }

    /// Downsampling factor implied by the block layout.
    pub fn layout_factor(&self) -> usize {
        let pools = self.blocks.iter().filter(|b| b.pool).count();
        let ups = self.blocks.iter().filter(|b| b.upsample).count();
        1 << pools.saturating_sub(ups)
    }

    /// Input height and width must be multiples of this for every pooling stage to divide evenly.
    pub fn input_multiple(&self) -> usize {
        let mut depth = 0u32;
        let mut deepest = 0u32;
        for b in &self.blocks {
            if b.pool {
                depth += 1;
                deepest = deepest.max(depth);
            }
            if b.upsample {
                depth -= 1;
            }
        }
        1 << deepest
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.num_filters == 0 {
                return Err(Error::Config(format!("block {i}: num_filters must be >= 1")));
            }
            if b.filter_size % 2 == 0 {
                return Err(Error::Config(format!(
                    "block {i}: filter size {} must be odd",
                    b.filter_size
                )));
            }
            if b.upsample && !b.pool {
                return Err(Error::Config(format!(
                    "block {i}: up-sampling must follow a pooling layer"
                )));
            }
        }
        if self.blocks.iter().any(|b| b.lrn) {
            self.lrn.validate()?;
        }
        if self.target_factor == 0 || !self.target_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "target factor {} must be a power of two",
                self.target_factor
            )));
        }
        let actual = self.layout_factor();
        if actual != self.target_factor {
            return Err(Error::Config(format!(
                "block layout reduces by {actual}, target factor is {}",
                self.target_factor
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut in_ch = self.input_channels;
        let mut n = 0;
        for b in &self.blocks {
            n += b.num_filters * (in_ch * b.filter_size * b.filter_size + 1);
            in_ch = b.num_filters;
        }
        if self.combiner == CombineMode::Linear {
            n += in_ch + 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Coefficient of the `lambda / 2 * ||params||^2` penalty.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Backward rule used for up-sampling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleRule {
    /// Sum over each block (the true adjoint).
    #[default]
    Exact,
    /// Scaled single-cell read; wrong unless upstream blocks are constant.
    BlockConstant,
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    banks: Vec<FilterBank>,
    combiner: CombinerParams,
    seed: u64,
    upsample_rule: UpsampleRule,
    // Changes whenever parameters change; forward passes record it.
    stamp: u64,
}

/// Everything a backward pass needs from the forward pass that produced it.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Sigmoid output map.
    pub output: Tensor,
    /// Pre-sigmoid map.
    pub z: Tensor,
    /// Channels fed to the combiner.
    pub features: Tensor,
    pub caches: Vec<LayerCache>,
    input_shape: (usize, usize, usize),
    stamp: u64,
}

/// Gradient of an objective with respect to the parameters and the input image.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub params: Vec<f64>,
    pub input: Tensor,
}

impl Network {
    /// Builds a network with seeded random initialization.
    ///
    /// Filters are uniform in `±sqrt(3 / fan_in)`, combiner weights uniform in
    /// `±0.1`, all biases zero.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bank in &mut net.banks {
            let fan_in = (bank.in_channels() * bank.kernel_h() * bank.kernel_w()) as f64;
            let s = (3.0 / fan_in).sqrt();
            for w in &mut bank.weights {
                *w = rng.gen_range(-s..s);
            }
        }
        for w in &mut net.combiner.weights {
            *w = rng.gen_range(-0.1..0.1);
        }
        Ok(net)
    }

    /// Builds a network with every parameter set to zero.
    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = spec.input_channels;
        let mut banks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            banks.push(FilterBank::zeros(b.num_filters, in_ch, b.filter_size, b.filter_size)?);
            in_ch = b.num_filters;
        }
        let combiner = match spec.combiner {
            CombineMode::Linear => CombinerParams::linear(vec![0.0; in_ch], 0.0),
            CombineMode::ChannelMax => CombinerParams::channel_max(),
        };
        Ok(Network {
            spec,
            banks,
            combiner,
            seed: 0,
            upsample_rule: UpsampleRule::Exact,
            stamp: fresh_stamp(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn banks(&self) -> &[FilterBank] {
        &self.banks
    }

    pub fn combiner(&self) -> &CombinerParams {
        &self.combiner
    }

    /// Seed used for initialization.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn upsample_rule(&self) -> UpsampleRule {
        self.upsample_rule
    }

    pub fn set_upsample_rule(&mut self, rule: UpsampleRule) {
        self.upsample_rule = rule;
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Parameters in canonical order: per block weights then biases, then
    /// combiner weights and bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for bank in &self.banks {
            v.extend_from_slice(&bank.weights);
            v.extend_from_slice(&bank.biases);
        }
        if self.combiner.mode == CombineMode::Linear {
            v.extend_from_slice(&self.combiner.weights);
            v.push(self.combiner.bias);
        }
        v
    }

    pub fn unflatten_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, network needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut rest = params;
        for bank in &mut self.banks {
            let (w, r) = rest.split_at(bank.weights.len());
            bank.weights.copy_from_slice(w);
            let (b, r) = r.split_at(bank.biases.len());
            bank.biases.copy_from_slice(b);
            rest = r;
        }
        if self.combiner.mode == CombineMode::Linear {
            let (w, r) = rest.split_at(self.combiner.weights.len());
            self.combiner.weights.copy_from_slice(w);
            self.combiner.bias = r[0];
        }
        self.stamp = fresh_stamp();
        Ok(())
    }

    /// A copy of this network carrying `params`.
    pub fn with_params(&self, params: &[f64]) -> Result<Network> {
        let mut net = self.clone();
        net.unflatten_params(params)?;
        Ok(net)
    }

    /// Output map size for an input of the given size, after divisibility checks.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let m = self.spec.input_multiple();
        if height % m != 0 || width % m != 0 {
            return Err(Error::Dimension(format!(
                "input {height}x{width} must be a multiple of {m} for this block layout"
            )));
        }
        let f = self.spec.target_factor;
        Ok((height / f, width / f))
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        if image.channels() != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, image has {}",
                self.spec.input_channels,
                image.channels()
            )));
        }
        self.output_size(image.height(), image.width())?;
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.banks.len());
        for (block, bank) in self.spec.blocks.iter().zip(&self.banks) {
            let pre = layers::conv_same_forward(&x, bank)?;
            let mut cur = layers::relu(&pre);
            let mut pool = None;
            if block.pool {
                let (p, idx) = layers::maxpool_forward(&cur, 2)?;
                cur = p;
                pool = Some(idx);
            }
            let mut lrn_input = None;
            if block.lrn {
                let out = layers::lrn_forward(&cur, &self.spec.lrn)?;
                lrn_input = Some(std::mem::replace(&mut cur, out));
            }
            if block.upsample {
                cur = layers::upsample_forward(&cur, 2)?;
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, cur),
                pre_activation: pre,
                pool,
                lrn_input,
                upsampled: block.upsample,
            });
        }
        let (output, z) = layers::combine_forward(&x, &self.combiner)?;
        Ok(ForwardPass {
            output,
            z,
            features: x,
            caches,
            input_shape: image.shape(),
            stamp: self.stamp,
        })
    }

    /// Convenience: the output map only.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image)?.output)
    }

    fn check_pass(&self, pass: &ForwardPass) -> Result<()> {
        if pass.stamp != self.stamp || pass.caches.len() != self.banks.len() {
            return Err(Error::Usage(
                "forward pass was produced by different parameters".into(),
            ));
        }
        Ok(())
    }

    /// Gradient of the data term only (no penalty).
    fn data_gradient(&self, pass: &ForwardPass, d_out: &Tensor, mask: &Tensor) -> Result<Gradient> {
        self.check_pass(pass)?;
        let comb = layers::combine_backward(d_out, &pass.output, &pass.features, mask, &self.combiner)?;
        let mut block_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.banks.len());
        let mut g = comb.channels;
        for (cache, bank) in pass.caches.iter().zip(&self.banks).rev() {
            if cache.upsampled {
                g = match self.upsample_rule {
                    UpsampleRule::Exact => layers::upsample_backward(&g, 2)?,
                    UpsampleRule::BlockConstant => layers::upsample_backward_block_constant(&g, 2)?,
                };
            }
            if let Some(lrn_in) = &cache.lrn_input {
                g = layers::lrn_backward(lrn_in, &self.spec.lrn, &g)?;
            }
            if let Some(idx) = &cache.pool {
                g = layers::maxpool_backward(&g, idx)?;
            }
            g = layers::relu_backward(&cache.pre_activation, &g)?;
            let conv = layers::conv_same_backward(&cache.input, bank, &g)?;
            block_grads.push((conv.weights, conv.biases));
            g = conv.input;
        }
        let mut params = Vec::with_capacity(self.param_count());
        for (w, b) in block_grads.into_iter().rev() {
            params.extend(w);
            params.extend(b);
        }
        if self.combiner.mode == CombineMode::Linear {
            params.extend(comb.weights);
            params.push(comb.bias);
        }
        debug_assert_eq!(g.shape(), pass.input_shape);
        Ok(Gradient { params, input: g })
    }

    /// Gradient of `loss + lambda / 2 * ||params||^2` given `dA_o` from [`loss_and_grad`].
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_out: &Tensor,
        mask: &Tensor,
        cfg: &LossConfig,
    ) -> Result<Gradient> {
        cfg.validate()?;
        let mut grad = self.data_gradient(pass, d_out, mask)?;
        if cfg.lambda != 0.0 {
            for (g, p) in grad.params.iter_mut().zip(self.flatten_params()) {
                *g += cfg.lambda * p;
            }
        }
        Ok(grad)
    }

    /// Unpenalized loss and gradient for one sample.
    pub fn sample_objective(&self, sample: &Sample) -> Result<(f64, Gradient)> {
        let pass = self.forward(&sample.image)?;
        let (loss, d_out) = loss_and_grad(&pass.output, &sample.target, &sample.mask)?;
        let grad = self.data_gradient(&pass, &d_out, &sample.mask)?;
        Ok((loss, grad))
    }

    fn penalty(&self, lambda: f64) -> f64 {
        0.5 * lambda * compensated_sum(self.flatten_params().iter().map(|p| p * p))
    }
}

/// Masked mean-squared error: `sum(M * (A - T)^2) / (2 |M|)` and its gradient `M * (A - T) / |M|`.
pub fn loss_and_grad(output: &Tensor, target: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
    output.expect_same_shape(target, "loss target")?;
    output.expect_same_shape(mask, "loss mask")?;
    let mut count = 0usize;
    for &m in mask.data() {
        if m == 1.0 {
            count += 1;
        } else if m != 0.0 {
            return Err(Error::Input(format!("mask value {m} is not 0 or 1")));
        }
    }
    if count == 0 {
        return Err(Error::DegenerateSample("mask has no content cells".into()));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(output.channels(), output.height(), output.width());
    let mut squares = Vec::with_capacity(count);
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let r = output.data()[i] - target.data()[i];
        squares.push(r * r);
        *g = r * inv;
    }
    Ok((0.5 * compensated_sum(squares) * inv, grad))
}

/// Mean per-sample loss plus one L2 penalty, and its gradient.
///
/// Samples are evaluated in parallel and reduced in index order.
pub fn batch_objective(net: &Network, samples: &[Sample], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("batch objective needs at least one sample".into()));
    }
    let per_sample: Vec<Result<(f64, Gradient)>> =
        samples.par_iter().map(|s| net.sample_objective(s)).collect();
    let n = samples.len() as f64;
    let mut losses = Vec::with_capacity(samples.len());
    let mut grad = vec![0.0; net.param_count()];
    for r in per_sample {
        let (l, g) = r?;
        losses.push(l);
        for (acc, v) in grad.iter_mut().zip(&g.params) {
            *acc += v;
        }
    }
    let params = net.flatten_params();
    for (g, p) in grad.iter_mut().zip(&params) {
        *g = *g / n + cfg.lambda * p;
    }
    Ok((compensated_sum(losses) / n + net.penalty(cfg.lambda), grad))
}

/// [`batch_objective`] evaluated at an explicit parameter vector.
pub fn batch_objective_at(
    net: &Network,
    params: &[f64],
    samples: &[Sample],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    batch_objective(&net.with_params(params)?, samples, cfg)
}
