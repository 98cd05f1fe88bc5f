//! Saliency scores: AUC against all other cells, and shuffled AUC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of negative draws averaged by [`sauc`].
pub const DEFAULT_SAUC_ROUNDS: usize = 100;
/// Default share of cells taken by [`fixations_from_map`].
pub const DEFAULT_TOP_FRACTION: f64 = 0.05;

/// Fixated cells `(x, y)` at map resolution for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationSet {
    pub points: Vec<(usize, usize)>,
    pub image_id: String,
}

impl FixationSet {
    /// Keeps the first occurrence of each point.
    pub fn new(points: impl IntoIterator<Item = (usize, usize)>, image_id: impl Into<String>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let points = points.into_iter().filter(|p| seen.insert(*p)).collect();
        FixationSet {
            points,
            image_id: image_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn plane(map: &Tensor) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Shape(format!(
            "expected a single-channel map, got {} channels",
            map.channels()
        )));
    }
    Ok(())
}

fn value_at(map: &Tensor, (x, y): (usize, usize)) -> Result<f64> {
    if x >= map.width() || y >= map.height() {
        return Err(Error::Input(format!(
            "fixation ({x}, {y}) outside {}x{} map",
            map.width(),
            map.height()
        )));
    }
    Ok(map.get(0, y, x))
}

/// Mann-Whitney statistic over all positive/negative pairs, ties counting one half.
pub fn pairwise_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Input("AUC needs at least one positive and one negative".into()));
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positives {
        let below = neg.partition_point(|&v| v < p);
        let not_above = neg.partition_point(|&v| v <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (positives.len() as f64 * neg.len() as f64))
}

/// ROC area with fixated cells as positives and every other cell as a negative.
pub fn auc(map: &Tensor, fixations: &FixationSet) -> Result<f64> {
    plane(map)?;
    if fixations.is_empty() {
        return Err(Error::Input(format!("no fixations for image {:?}", fixations.image_id)));
    }
    let w = map.width();
    let mut fixated = vec![false; map.len()];
    let mut positives = Vec::with_capacity(fixations.len());
    for &p in &fixations.points {
        positives.push(value_at(map, p)?);
        fixated[p.1 * w + p.0] = true;
    }
    let negatives: Vec<f64> = map
        .data()
        .iter()
        .zip(&fixated)
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v)
        .collect();
    pairwise_auc(&positives, &negatives)
}

/// Shuffled AUC: the mean over `n_rounds` of the ROC area against `|fixations|`
/// negatives drawn with replacement from the union of `pool`, read off this map.
///
/// Pool points outside the map are ignored. Round `r` draws from stream `r` of a
/// ChaCha8 generator seeded with `seed`, so the result does not depend on threading.
pub fn sauc(map: &Tensor, fixations: &FixationSet, pool: &[FixationSet], n_rounds: usize, seed: u64) -> Result<f64> {
    plane(map)?;
    if fixations.is_empty() {
        return Err(Error::Input(format!("no fixations for image {:?}", fixations.image_id)));
    }
    if n_rounds == 0 {
        return Err(Error::Config("sAUC needs at least one round".into()));
    }
    let positives = fixations
        .points
        .iter()
        .map(|&p| value_at(map, p))
        .collect::<Result<Vec<_>>>()?;
    let union = FixationSet::new(pool.iter().flat_map(|s| s.points.iter().copied()), "pool");
    let candidates: Vec<f64> = union
        .points
        .iter()
        .filter(|&&(x, y)| x < map.width() && y < map.height())
        .map(|&(x, y)| map.get(0, y, x))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Input("shuffle pool has no locations on this map".into()));
    }
    let scores = (0..n_rounds)
        .into_par_iter()
        .map(|round| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(round as u64);
            let negatives: Vec<f64> = (0..positives.len())
                .map(|_| candidates[rng.gen_range(0..candidates.len())])
                .collect();
            pairwise_auc(&positives, &negatives)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / n_rounds as f64)
}

/// The `ceil(top_fraction * cells)` highest cells, ties broken row-major.
pub fn fixations_from_map(map: &Tensor, top_fraction: f64, image_id: impl Into<String>) -> Result<FixationSet> {
    plane(map)?;
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction {top_fraction} must lie in (0, 1]")));
    }
    let n = map.len();
    // the small slack keeps products like 0.05 * 4000 from rounding up past an integer
    let count = ((top_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let data = map.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]));
    let w = map.width();
    Ok(FixationSet::new(
        order[..count].iter().map(|&i| (i % w, i / w)),
        image_id,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(1, h, w, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn constant_map_is_chance() {
        let m = Tensor::filled(1, 6, 6, 0.3);
        let f = FixationSet::new([(0, 0), (3, 4), (5, 5)], "a");
        assert_eq!(auc(&m, &f).unwrap(), 0.5);
    }

    #[test]
    fn dominant_fixations_score_one() {
        let mut m = Tensor::filled(1, 4, 4, 0.1);
        m.set(0, 1, 2, 0.9);
        m.set(0, 3, 0, 0.8);
        let f = FixationSet::new([(2, 1), (0, 3)], "a");
        assert_eq!(auc(&m, &f).unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = random_map(&mut rng, 8, 8).map(|v| (v * 10.0).floor());
            let mut pts = Vec::new();
            while pts.len() < 5 {
                let p = (rng.gen_range(0..8), rng.gen_range(0..8));
                if !pts.contains(&p) {
                    pts.push(p);
                }
            }
            let f = FixationSet::new(pts.clone(), "r");
            let pos: Vec<f64> = pts.iter().map(|&(x, y)| m.get(0, y, x)).collect();
            let neg: Vec<f64> = (0..64)
                .filter(|i| !pts.contains(&(i % 8, i / 8)))
                .map(|i| m.data()[i])
                .collect();
            assert!((auc(&m, &f).unwrap() - brute(&pos, &neg)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_fixations_rejected() {
        let m = Tensor::filled(1, 2, 2, 0.0);
        assert!(matches!(auc(&m, &FixationSet::new([], "e")), Err(Error::Input(_))));
        let f = FixationSet::new([(0, 0)], "e");
        assert!(matches!(sauc(&m, &f, &[], 10, 0), Err(Error::Input(_))));
    }

    #[test]
    fn sauc_with_low_negatives_is_one() {
        let mut m = Tensor::filled(1, 4, 4, 0.0);
        m.set(0, 0, 0, 1.0);
        m.set(0, 0, 1, 2.0);
        let f = FixationSet::new([(0, 0), (1, 0)], "a");
        let pool = [FixationSet::new([(3, 3), (2, 2)], "b")];
        assert_eq!(sauc(&m, &f, &pool, 20, 5).unwrap(), 1.0);
    }

    #[test]
    fn sauc_toy_pair_count() {
        // one round, a pool of one location: every negative is the same value
        let m = Tensor::from_rows(&[&[0.2, 0.5, 0.9], &[0.5, 0.0, 0.0]]).unwrap();
        let f = FixationSet::new([(0, 0), (1, 0), (2, 0)], "a");
        let pool = [FixationSet::new([(0, 1)], "b")];
        // positives 0.2, 0.5, 0.9 against 0.5 x3: 0 + 0.5 + 1 per negative
        let expected = brute(&[0.2, 0.5, 0.9], &[0.5, 0.5, 0.5]);
        assert!((expected - 0.5).abs() < 1e-15);
        assert_eq!(sauc(&m, &f, &pool, 1, 3).unwrap(), expected);
    }

    #[test]
    fn sauc_self_pool_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_map(&mut rng, 16, 16);
        let f = fixations_from_map(&m.map(|v| (v * 7.3).sin()), 0.1, "a").unwrap();
        let score = sauc(&m, &f, std::slice::from_ref(&f), 200, 9).unwrap();
        assert!((score - 0.5).abs() <= 0.05, "{score}");
    }

    #[test]
    fn sauc_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 10, 10);
        let f = FixationSet::new([(1, 1), (4, 7), (9, 2)], "a");
        let pool = [FixationSet::new([(0, 0), (5, 5), (8, 8), (2, 6)], "b")];
        let a = sauc(&m, &f, &pool, 50, 42).unwrap();
        assert_eq!(a.to_bits(), sauc(&m, &f, &pool, 50, 42).unwrap().to_bits());
        assert_ne!(a, sauc(&m, &f, &pool, 50, 43).unwrap());
    }

    #[test]
    fn top_fraction_examples() {
        let mut m = Tensor::filled(1, 3, 3, 0.0);
        m.set(0, 2, 1, 5.0);
        assert_eq!(fixations_from_map(&m, 0.1, "a").unwrap().points, vec![(1, 2)]);

        let flat = Tensor::filled(1, 3, 4, 1.0);
        let f = fixations_from_map(&flat, 0.25, "a").unwrap();
        assert_eq!(f.points, vec![(0, 0), (1, 0), (2, 0)]);

        let big = Tensor::filled(1, 64, 64, 0.0);
        assert_eq!(fixations_from_map(&big, 0.05, "a").unwrap().len(), 205);
        assert!(fixations_from_map(&big, 0.0, "a").is_err());
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 30), k in 1usize..10) {
            let m = Tensor::new(1, 5, 6, vals).unwrap();
            let f = FixationSet::new((0..k).map(|i| ((i * 7) % 6, (i * 3) % 5)), "p");
            let a = auc(&m, &f).unwrap();
            let t = auc(&m.map(|v| (v * 0.7).exp() + 3.0), &f).unwrap();
            prop_assert!((a - t).abs() < 1e-12);
        }

        #[test]
        fn auc_of_negated_map_complements(vals in proptest::collection::hash_set(-1000i32..1000, 30)) {
            let data: Vec<f64> = vals.into_iter().map(f64::from).collect();
            let m = Tensor::new(1, 5, 6, data).unwrap();
            let f = FixationSet::new([(0, 0), (3, 2), (5, 4)], "p");
            let sum = auc(&m, &f).unwrap() + auc(&m.map(|v| -v), &f).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
