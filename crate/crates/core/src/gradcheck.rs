//! Central finite-difference checks for every backward pass.
//!
//! Relative error is `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::groundtruth::Sample;
use crate::layers::{self, CombinerParams, LrnParams};
use crate::network::{batch_objective_at, loss_and_grad, LossConfig, Network, NetworkSpec};
use crate::tensor::{compensated_sum, FilterBank, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct NumericGradient {
    pub values: Vec<f64>,
    /// Indices where either perturbed evaluation was not finite.
    pub non_finite: Vec<usize>,
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> NumericGradient {
    let mut probe = x.to_vec();
    let mut values = Vec::with_capacity(x.len());
    let mut non_finite = Vec::new();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            non_finite.push(i);
            values.push(f64::NAN);
        } else {
            values.push((plus - minus) / (2.0 * eps));
        }
    }
    NumericGradient { values, non_finite }
}

/// Comparison of one named group of partial derivatives.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub non_finite: Vec<usize>,
}

impl GroupReport {
    pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &NumericGradient) -> Self {
        assert_eq!(analytic.len(), numeric.values.len(), "gradient length mismatch");
        let mut report = GroupReport {
            name: name.into(),
            count: analytic.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: analytic.first().copied().unwrap_or(0.0),
            worst_numeric: numeric.values.first().copied().unwrap_or(0.0),
            non_finite: numeric.non_finite.clone(),
        };
        for (i, (&a, &n)) in analytic.iter().zip(&numeric.values).enumerate() {
            if !n.is_finite() {
                continue;
            }
            let e = relative_error(a, n);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = n;
            }
        }
        report
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub label: String,
    pub tol: f64,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.max_rel_error < self.tol && g.non_finite.is_empty())
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} (tol {:e})",
            self.label,
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol
        )?;
        writeln!(
            f,
            "  {:<18} {:>6} {:>12} {:>7} {:>14} {:>14}",
            "group", "count", "max rel err", "worst", "analytic", "numeric"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<18} {:>6} {:>12.3e} {:>7} {:>14.6e} {:>14.6e}{}",
                g.name,
                g.count,
                g.max_rel_error,
                g.worst_index,
                g.worst_analytic,
                g.worst_numeric,
                if g.non_finite.is_empty() {
                    String::new()
                } else {
                    format!("  ({} non-finite)", g.non_finite.len())
                }
            )?;
        }
        Ok(())
    }
}

/// Settings for a whole-network check.
#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub loss: LossConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
            loss: LossConfig::default(),
        }
    }
}

/// A random sample for `net`: uniform image, target in `[0.1, 0.9]`, and a
/// mask with roughly a quarter of the cells switched off.
pub fn random_sample(net: &Network, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let image = Tensor::from_fn(net.spec().input_channels, height, width, |_, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let (oh, ow) = net.output_size(height, width)?;
    let target = Tensor::from_fn(1, oh, ow, |_, _, _| rng.gen_range(0.1..0.9));
    let mut mask = Tensor::from_fn(1, oh, ow, |_, _, _| if rng.gen_bool(0.75) { 1.0 } else { 0.0 });
    mask.data_mut()[0] = 1.0;
    Sample::new(image, target, mask)
}

/// Checks the batch objective gradient of `net` on `sample` with respect to
/// every parameter and every input pixel.
pub fn check_network_instance(net: &Network, sample: &Sample, cfg: &CheckConfig) -> Result<GradReport> {
    let params = net.flatten_params();
    let samples = std::slice::from_ref(sample);
    let (_, analytic) = batch_objective_at(net, &params, samples, &cfg.loss)?;
    let numeric = numeric_gradient(
        |p| batch_objective_at(net, p, samples, &cfg.loss).map_or(f64::NAN, |(v, _)| v),
        &params,
        cfg.eps,
    );

    let mut groups = Vec::new();
    let mut offset = 0;
    let mut slice = |name: String, len: usize, groups: &mut Vec<GroupReport>| {
        let nv = NumericGradient {
            values: numeric.values[offset..offset + len].to_vec(),
            non_finite: numeric
                .non_finite
                .iter()
                .filter(|&&i| i >= offset && i < offset + len)
                .map(|&i| i - offset)
                .collect(),
        };
        groups.push(GroupReport::compare(name, &analytic[offset..offset + len], &nv));
        offset += len;
    };
    for (i, bank) in net.banks().iter().enumerate() {
        slice(format!("block{i}.weights"), bank.weights.len(), &mut groups);
        slice(format!("block{i}.biases"), bank.biases.len(), &mut groups);
    }
    let comb = net.combiner();
    if comb.param_count() > 0 {
        slice("combiner.weights".into(), comb.weights.len(), &mut groups);
        slice("combiner.bias".into(), 1, &mut groups);
    }

    let (_, grad) = net.sample_objective(sample)?;
    let (c, h, w) = sample.image.shape();
    let numeric_input = numeric_gradient(
        |x| {
            let mut s = sample.clone();
            s.image = Tensor::new(c, h, w, x.to_vec()).expect("same shape");
            match net.sample_objective(&s) {
                Ok((loss, _)) => loss,
                Err(_) => f64::NAN,
            }
        },
        sample.image.data(),
        cfg.eps,
    );
    groups.push(GroupReport::compare("input", grad.input.data(), &numeric_input));

    Ok(GradReport {
        label: "network".into(),
        tol: cfg.tol,
        groups,
    })
}

/// Builds `spec` with random parameters from `seed` and checks it on a random
/// sample of the given input size.
pub fn check_network(spec: &NetworkSpec, input_size: (usize, usize), seed: u64, cfg: &CheckConfig) -> Result<GradReport> {
    let mut net = Network::build(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7c);
    // O(1) parameters keep every partial derivative well above the rounding
    // noise of the central differences; training init is far smaller.
    let params: Vec<f64> = (0..net.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.unflatten_params(&params)?;
    let sample = random_sample(&net, input_size.0, input_size.1, &mut rng)?;
    let mut report = check_network_instance(&net, &sample, cfg)?;
    report.label = format!("network seed {seed} input {}x{}", input_size.0, input_size.1);
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, so a ReLU kink is never within `eps`.
fn away_from_zero(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn tensor_fn<'a>(shape: (usize, usize, usize), f: impl Fn(&Tensor) -> f64 + 'a) -> impl FnMut(&[f64]) -> f64 + 'a {
    move |x: &[f64]| f(&Tensor::new(shape.0, shape.1, shape.2, x.to_vec()).expect("same shape"))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| x * y))
}

/// Checks each layer in isolation on the scalar `<layer(x), G>` for a random `G`.
pub fn check_layers(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let report = |label: &str, groups: Vec<GroupReport>| GradReport {
        label: format!("{label} (seed {seed})"),
        tol,
        groups,
    };

    // convolution
    {
        let (ci, co, k) = (rng.gen_range(2..=3), rng.gen_range(2..=3), 3);
        let x = random_tensor(&mut rng, ci, 6, 7);
        let bank = FilterBank::new(
            co,
            ci,
            k,
            k,
            (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let g = random_tensor(&mut rng, co, 6, 7);
        let grads = layers::conv_same_backward(&x, &bank, &g)?;
        let nx = numeric_gradient(
            tensor_fn(x.shape(), |t| dot(&layers::conv_same_forward(t, &bank).unwrap(), &g)),
            x.data(),
            eps,
        );
        let nw = numeric_gradient(
            |w| {
                let b = FilterBank::new(co, ci, k, k, w.to_vec(), bank.biases.clone()).unwrap();
                dot(&layers::conv_same_forward(&x, &b).unwrap(), &g)
            },
            &bank.weights,
            eps,
        );
        let nb = numeric_gradient(
            |bs| {
                let b = FilterBank::new(co, ci, k, k, bank.weights.clone(), bs.to_vec()).unwrap();
                dot(&layers::conv_same_forward(&x, &b).unwrap(), &g)
            },
            &bank.biases,
            eps,
        );
        reports.push(report(
            "conv",
            vec![
                GroupReport::compare("input", grads.input.data(), &nx),
                GroupReport::compare("weights", &grads.weights, &nw),
                GroupReport::compare("biases", &grads.biases, &nb),
            ],
        ));
    }

    // relu
    {
        let c = rng.gen_range(2..=3);
        let x = away_from_zero(&mut rng, c, 5, 5);
        let g = random_tensor(&mut rng, c, 5, 5);
        let analytic = layers::relu_backward(&x, &g)?;
        let nx = numeric_gradient(tensor_fn(x.shape(), |t| dot(&layers::relu(t), &g)), x.data(), eps);
        reports.push(report("relu", vec![GroupReport::compare("input", analytic.data(), &nx)]));
    }

    // max-pool
    {
        let c = rng.gen_range(2..=3);
        let x = random_tensor(&mut rng, c, 8, 8);
        let (_, idx) = layers::maxpool_forward(&x, 2)?;
        let g = random_tensor(&mut rng, c, 4, 4);
        let analytic = layers::maxpool_backward(&g, &idx)?;
        let nx = numeric_gradient(
            tensor_fn(x.shape(), |t| dot(&layers::maxpool_forward(t, 2).unwrap().0, &g)),
            x.data(),
            eps,
        );
        reports.push(report("maxpool", vec![GroupReport::compare("input", analytic.data(), &nx)]));
    }

    // LRN, with constants large enough that the cross-channel term matters
    {
        let c = 3;
        let x = random_tensor(&mut rng, c, 5, 6);
        let params = LrnParams {
            k: 1.5,
            alpha: 0.5,
            beta: 0.75,
            n: 3,
        };
        let g = random_tensor(&mut rng, c, 5, 6);
        let analytic = layers::lrn_backward(&x, &params, &g)?;
        let nx = numeric_gradient(
            tensor_fn(x.shape(), |t| dot(&layers::lrn_forward(t, &params).unwrap(), &g)),
            x.data(),
            eps,
        );
        reports.push(report("lrn", vec![GroupReport::compare("input", analytic.data(), &nx)]));
    }

    // up-sampling
    {
        let c = rng.gen_range(2..=3);
        let x = random_tensor(&mut rng, c, 4, 4);
        let g = random_tensor(&mut rng, c, 8, 8);
        let analytic = layers::upsample_backward(&g, 2)?;
        let nx = numeric_gradient(
            tensor_fn(x.shape(), |t| dot(&layers::upsample_forward(t, 2).unwrap(), &g)),
            x.data(),
            eps,
        );
        reports.push(report("upsample", vec![GroupReport::compare("input", analytic.data(), &nx)]));
    }

    // combiners with a content mask
    for mode in ["combine.linear", "combine.channel_max"] {
        let c = rng.gen_range(2..=3);
        let x = random_tensor(&mut rng, c, 6, 6);
        let params = if mode == "combine.linear" {
            CombinerParams::linear((0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-0.5..0.5))
        } else {
            CombinerParams::channel_max()
        };
        let g = random_tensor(&mut rng, 1, 6, 6);
        let mask = Tensor::from_fn(1, 6, 6, |_, _, _| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        let masked = |a: &Tensor| -> f64 {
            compensated_sum(
                a.data()
                    .iter()
                    .zip(g.data())
                    .zip(mask.data())
                    .map(|((a, g), m)| a * g * m),
            )
        };
        let (a, _) = layers::combine_forward(&x, &params)?;
        let grads = layers::combine_backward(&g, &a, &x, &mask, &params)?;
        let nx = numeric_gradient(
            tensor_fn(x.shape(), |t| masked(&layers::combine_forward(t, &params).unwrap().0)),
            x.data(),
            eps,
        );
        let mut groups = vec![GroupReport::compare("input", grads.channels.data(), &nx)];
        if mode == "combine.linear" {
            let nw = numeric_gradient(
                |w| {
                    let p = CombinerParams::linear(w.to_vec(), params.bias);
                    masked(&layers::combine_forward(&x, &p).unwrap().0)
                },
                &params.weights,
                eps,
            );
            let nb = numeric_gradient(
                |b| {
                    let p = CombinerParams::linear(params.weights.clone(), b[0]);
                    masked(&layers::combine_forward(&x, &p).unwrap().0)
                },
                &[params.bias],
                eps,
            );
            groups.push(GroupReport::compare("weights", &grads.weights, &nw));
            groups.push(GroupReport::compare("bias", &[grads.bias], &nb));
        }
        reports.push(report(mode, groups));
    }

    // masked squared-error loss
    {
        let a = Tensor::from_fn(1, 6, 6, |_, _, _| rng.gen_range(0.01..0.99));
        let t = Tensor::from_fn(1, 6, 6, |_, _, _| rng.gen_range(0.1..0.9));
        let mut m = Tensor::from_fn(1, 6, 6, |_, _, _| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
        m.data_mut()[0] = 1.0;
        let (_, d) = loss_and_grad(&a, &t, &m)?;
        let na = numeric_gradient(
            tensor_fn(a.shape(), |x| loss_and_grad(x, &t, &m).unwrap().0),
            a.data(),
            eps,
        );
        reports.push(report("loss", vec![GroupReport::compare("output", d.data(), &na)]));
    }

    Ok(reports)
}
