//! Minimizers for the batch objective.
//!
//! [`lbfgs_minimize`] is the full-batch trainer: two-loop recursion over the
//! last `memory` curvature pairs with Armijo backtracking. [`sgd_minimize`]
//! is a mini-batch momentum fallback for data sets too large for full batches.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::groundtruth::Sample;
use crate::network::{batch_objective_at, LossConfig, Network};

/// Curvature pairs with `s.y` at or below this are not stored.
pub const CURVATURE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the gradient max-norm is at or below this.
    pub gradient_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step multiplier applied on each rejected trial.
    pub backtrack: f64,
    pub max_halvings: usize,
    pub initial_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            c1: 1e-4,
            backtrack: 0.5,
            max_halvings: 40,
            initial_step: 1.0,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be >= 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.initial_step > 0.0) {
            return Err(Error::Config("L-BFGS tolerance and initial step must be > 0".into()));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) || !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::Config("L-BFGS c1 and backtrack factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

/// One accepted iterate. Row 0 is the starting point with step 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_max_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub status: Status,
    pub trace: Vec<TraceRow>,
    pub evaluations: usize,
}

impl LbfgsResult {
    /// Number of accepted steps.
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Search direction `-H g` from the two-loop recursion; `-g` when `pairs` is empty.
fn two_loop(grad: &[f64], pairs: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for (p, a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    for qi in &mut q {
        *qi = -*qi;
    }
    q
}

/// Minimizes `objective`, which returns the value and gradient at a point.
///
/// Accepted iterates strictly decrease the objective. Running out of
/// backtracking steps ends the run with [`Status::LineSearchFailed`].
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = objective(&x)?;
    let mut evaluations = 1;
    if g.len() != x.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} variables",
            g.len(),
            x.len()
        )));
    }
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("objective or gradient is not finite at the starting point".into()));
    }
    let mut trace = vec![TraceRow {
        iteration: 0,
        objective: fx,
        grad_max_norm: max_norm(&g),
        step: 0.0,
    }];
    let mut pairs: VecDeque<CurvaturePair> = VecDeque::with_capacity(cfg.memory);
    let mut status = Status::MaxIterations;

    for iteration in 1..=cfg.max_iterations + 1 {
        if max_norm(&g) <= cfg.gradient_tolerance {
            status = Status::Converged;
            break;
        }
        if iteration > cfg.max_iterations {
            break;
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        let mut step = cfg.initial_step;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = objective(&trial)?;
            evaluations += 1;
            if ft.is_finite() && ft < fx && ft <= fx + cfg.c1 * step * slope && gt.iter().all(|v| v.is_finite()) {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= cfg.backtrack;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            status = Status::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        } else {
            // stale pairs describe a region the iterate has left
            pairs.clear();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(TraceRow {
            iteration,
            objective: fx,
            grad_max_norm: max_norm(&g),
            step,
        });
    }

    Ok(LbfgsResult {
        x,
        value: fx,
        gradient: g,
        status,
        trace,
        evaluations,
    })
}

/// Writes `iteration,objective,grad_max_norm,step` rows with a header.
pub fn write_trace_csv(trace: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,objective,grad_max_norm,step")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.iteration, r.objective, r.grad_max_norm, r.step)?;
    }
    Ok(())
}

/// Full-batch L-BFGS over `samples`; returns the trained network.
pub fn lbfgs_train(
    net: &Network,
    samples: &[Sample],
    cfg: &LbfgsConfig,
    loss: &LossConfig,
) -> Result<(Network, LbfgsResult)> {
    let result = lbfgs_minimize(
        |p| batch_objective_at(net, p, samples, loss),
        &net.flatten_params(),
        cfg,
    )?;
    Ok((net.with_params(&result.x)?, result))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgdReport {
    pub x: Vec<f64>,
    /// Mean mini-batch objective per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    /// Set when `batch_size` exceeded the data set and was reduced to it.
    pub batch_clamped: bool,
}

/// Momentum SGD: `v <- mu v - lr g`, `x <- x + v`, over seeded shuffles of `0..n_items`.
///
/// `objective(x, batch)` returns the value and gradient on the given item indices.
pub fn sgd_minimize<F>(mut objective: F, x0: &[f64], n_items: usize, cfg: &SgdConfig) -> Result<SgdReport>
where
    F: FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Usage("SGD needs at least one item".into()));
    }
    let batch_clamped = cfg.batch_size > n_items;
    let batch = cfg.batch_size.min(n_items);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut x = x0.to_vec();
    let mut velocity = vec![0.0; x.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let (fx, g) = objective(&x, chunk)?;
            if g.len() != x.len() {
                return Err(Error::Shape("gradient length does not match parameters".into()));
            }
            total += fx;
            batches += 1;
            for ((v, xi), gi) in velocity.iter_mut().zip(x.iter_mut()).zip(&g) {
                *v = cfg.momentum * *v - cfg.learning_rate * gi;
                *xi += *v;
            }
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(SgdReport {
        x,
        epoch_losses,
        batch_clamped,
    })
}

/// Mini-batch momentum SGD over `samples`; returns the trained network.
pub fn sgd_train(
    net: &Network,
    samples: &[Sample],
    cfg: &SgdConfig,
    loss: &LossConfig,
) -> Result<(Network, SgdReport)> {
    let report = sgd_minimize(
        |p, idx| {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            batch_objective_at(net, p, &batch, loss)
        },
        &net.flatten_params(),
        samples.len(),
        cfg,
    )?;
    Ok((net.with_params(&report.x)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x| {
            let r: Vec<f64> = x.iter().zip(&c).map(|(a, b)| a - b).collect();
            Ok((0.5 * dot(&r, &r), r))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    fn assert_monotone(trace: &[TraceRow]) {
        for w in trace.windows(2) {
            assert!(w[1].objective <= w[0].objective, "{:?}", w);
        }
    }

    #[test]
    fn isotropic_quadratic_in_one_step() {
        let c = vec![1.5, -2.0, 0.25, 7.0];
        let r = lbfgs_minimize(quadratic(c.clone()), &[0.0, 3.0, -1.0, 2.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert!(r.iterations() <= 2);
        let dist: f64 = r.x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-10);
        assert_monotone(&r.trace);
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let cfg = LbfgsConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            ..LbfgsConfig::default()
        };
        let r = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(r.iterations() <= 200, "{:?} after {}", r.status, r.iterations());
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?} {:?} {}", r.x, r.status, r.iterations());
        assert_monotone(&r.trace);
    }

    #[test]
    fn first_direction_is_steepest_descent() {
        let g = vec![3.0, -1.0, 0.5];
        assert_eq!(two_loop(&g, &VecDeque::new()), vec![-3.0, 1.0, -0.5]);
    }

    #[test]
    fn bad_curvature_pairs_are_skipped() {
        // a linear objective has y = 0 for every step
        let r = lbfgs_minimize(
            |x: &[f64]| Ok((x[0] + x[1], vec![1.0, 1.0])),
            &[0.0, 0.0],
            &LbfgsConfig {
                max_iterations: 5,
                ..LbfgsConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.status, Status::MaxIterations);
        // every step stays steepest descent with unit length
        assert!(r.trace[1..].iter().all(|t| t.step == 1.0));
        assert_eq!(r.x, vec![-5.0, -5.0]);
    }

    #[test]
    fn non_finite_start_is_an_input_error() {
        let r = lbfgs_minimize(|_x: &[f64]| Ok((f64::NAN, vec![0.0])), &[1.0], &LbfgsConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn line_search_exhaustion_is_reported() {
        // gradient points the wrong way, so no step decreases the value
        let r = lbfgs_minimize(
            |x: &[f64]| Ok((x[0] * x[0], vec![-1.0])),
            &[1.0],
            &LbfgsConfig {
                max_halvings: 5,
                ..LbfgsConfig::default()
            },
        )
        .unwrap();
        assert_eq!(r.status, Status::LineSearchFailed);
        assert_eq!(r.x, vec![1.0]);
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        let rows = [TraceRow {
            iteration: 0,
            objective: 0.5,
            grad_max_norm: 2.0,
            step: 0.0,
        }];
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "iteration,objective,grad_max_norm,step\n0,5e-1,2e0,0e0\n");
    }

    #[test]
    fn sgd_matches_scalar_momentum_recursion() {
        // f(x) = 0.5 * a * (x - c)^2 on a single item
        let (a, c) = (2.0, 3.0);
        let cfg = SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 25,
            batch_size: 1,
            seed: 4,
        };
        let report = sgd_minimize(
            |x, _| Ok((0.5 * a * (x[0] - c).powi(2), vec![a * (x[0] - c)])),
            &[0.0],
            1,
            &cfg,
        )
        .unwrap();
        let (mut x, mut v) = (0.0f64, 0.0f64);
        for _ in 0..cfg.epochs {
            let g = a * (x - c);
            v = cfg.momentum * v - cfg.learning_rate * g;
            x += v;
        }
        assert!((report.x[0] - x).abs() < 1e-12);
    }

    #[test]
    fn tiny_learning_rate_barely_moves() {
        let cfg = SgdConfig {
            learning_rate: 1e-15,
            epochs: 3,
            batch_size: 2,
            ..SgdConfig::default()
        };
        let x0 = [1.0, -2.0];
        let report = sgd_minimize(|x, _| Ok((0.0, x.to_vec())), &x0, 4, &cfg).unwrap();
        for (a, b) in report.x.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_is_deterministic_and_clamps_batches() {
        let cfg = SgdConfig {
            batch_size: 10,
            epochs: 4,
            seed: 99,
            ..SgdConfig::default()
        };
        let run = || {
            sgd_minimize(
                |x, idx| {
                    let w = idx.iter().map(|&i| i as f64 + 1.0).sum::<f64>();
                    Ok((w * x[0] * x[0], vec![2.0 * w * x[0] * 0.01]))
                },
                &[1.0],
                3,
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.x, b.x);
        assert!(a.batch_clamped);
    }
}
