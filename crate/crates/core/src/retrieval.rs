//! Window recovery from heatmaps and detection scoring.

use crate::error::{Error, Result};
use crate::groundtruth::{Window, TARGET_FLOOR};
use crate::tensor::Tensor;

/// Default binarization threshold for [`components`].
pub const DEFAULT_THRESHOLD: f64 = 0.2;
/// Default IoU needed for a prediction to count as a hit.
pub const DEFAULT_IOU: f64 = 0.5;

/// An 8-connected set of map cells above a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// `(x, y, value)` at map resolution, in row-major order.
    pub cells: Vec<(usize, usize, f64)>,
    pub label: usize,
    /// Threshold the component was extracted at.
    pub threshold: f64,
}

impl Component {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

fn single_plane(map: &Tensor) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!(
            "expected a single-channel map, got {} channels",
            map.channels()
        )));
    }
    Ok(())
}

/// Maximal 8-connected groups of cells with value `> threshold`, labelled in
/// row-major discovery order.
pub fn components(map: &Tensor, threshold: f64) -> Result<Vec<Component>> {
    single_plane(map)?;
    let (h, w) = (map.height(), map.width());
    let data = map.data();
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || !(data[start] > threshold) {
            continue;
        }
        let id = out.len();
        label[start] = id;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / w, i % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if label[j] == usize::MAX && data[j] > threshold {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        members.sort_unstable();
        out.push(Component {
            cells: members.into_iter().map(|i| (i % w, i / w, data[i])).collect(),
            label: id,
            threshold,
        });
    }
    Ok(out)
}

/// Second-moment ratio of a 2D unit Gaussian restricted to `r^2 < t`.
fn truncation_factor(t: f64) -> f64 {
    if !(t > 1e-9) {
        return 1.0;
    }
    let e = (-t / 2.0).exp();
    1.0 - (t / 2.0) * e / (1.0 - e)
}

/// Fits the window whose renormalized Gaussian would produce `c`.
///
/// Moments use weights `max(value - 0.1, 0)`. The variance is corrected for the
/// threshold cut-off and for block averaging, then `w = 6 sigma_x f`,
/// `h = 6 sigma_y f`, each at least `f`.
pub fn fit_window(c: &Component, factor: usize) -> Result<Window> {
    if c.cells.is_empty() {
        return Err(Error::DegenerateComponent("empty component".into()));
    }
    if factor == 0 {
        return Err(Error::Config("factor must be >= 1".into()));
    }
    let weights: Vec<f64> = c.cells.iter().map(|&(_, _, v)| (v - TARGET_FLOOR).max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateComponent(format!(
            "all {} cells are at or below the {TARGET_FLOOR} floor",
            c.cells.len()
        )));
    }
    let (mut mx, mut my) = (0.0, 0.0);
    for (&(x, y, _), u) in c.cells.iter().zip(&weights) {
        mx += u * x as f64;
        my += u * y as f64;
    }
    mx /= total;
    my /= total;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (&(x, y, _), u) in c.cells.iter().zip(&weights) {
        vx += u * (x as f64 - mx).powi(2);
        vy += u * (y as f64 - my).powi(2);
    }
    vx /= total;
    vy /= total;

    let peak = weights.iter().cloned().fold(0.0, f64::max);
    let cut = c.threshold - TARGET_FLOOR;
    let correction = if cut > 0.0 && peak > cut {
        truncation_factor(2.0 * (peak / cut).ln())
    } else {
        1.0
    };
    let unblur = |v: f64| (v / correction - 1.0 / 12.0).max(0.0);
    let f = factor as f64;
    let (sx, sy) = (unblur(vx).sqrt(), unblur(vy).sqrt());
    Window::new(
        (mx + 0.5) * f - 0.5,
        (my + 0.5) * f - 0.5,
        (6.0 * sx * f).max(f),
        (6.0 * sy * f).max(f),
    )
}

/// Intersection over union of two axis-aligned windows.
pub fn iou(a: &Window, b: &Window) -> f64 {
    // edge arithmetic can lose an ulp on identical windows
    if a == b {
        return 1.0;
    }
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).min(1.0)
    } else {
        0.0
    }
}

/// All windows fitted from the components of `map` above `threshold`.
///
/// Components whose cells all sit at the background floor are skipped.
pub fn detect(map: &Tensor, threshold: f64, factor: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for c in components(map, threshold)? {
        match fit_window(&c, factor) {
            Ok(w) => out.push(w),
            Err(Error::DegenerateComponent(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Number of truth windows in one image matched one-to-one by predictions.
///
/// Pairs are taken greedily in order of decreasing IoU.
pub fn match_count(predicted: &[Window], truth: &[Window], iou_min: f64) -> usize {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let v = iou(p, t);
            if v >= iou_min {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut hits = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            hits += 1;
        }
    }
    hits
}

/// Fraction of truth windows, over all images, matched by a prediction.
///
/// With no truth windows at all the rate is 1.0: nothing was missed.
pub fn retrieval_rate(predicted: &[Vec<Window>], truth: &[Vec<Window>], iou_min: f64) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} images",
            predicted.len(),
            truth.len()
        )));
    }
    let total: usize = truth.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(1.0);
    }
    let hits: usize = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| match_count(p, t, iou_min))
        .sum();
    Ok(hits as f64 / total as f64)
}
