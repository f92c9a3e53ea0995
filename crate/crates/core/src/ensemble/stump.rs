//! Weighted decision stumps on 2-D points, a cheap weak learner for
//! checking the boosting loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SampleWeights, WeakLearner};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    /// Class predicted for `x[feature] <= threshold`.
    pub left: usize,
    pub right: usize,
}

impl Stump {
    pub fn predict(&self, x: &[f64; 2]) -> usize {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }
}

fn heaviest(mass: &[f64]) -> usize {
    let mut best = 0;
    for (c, &m) in mass.iter().enumerate() {
        if m > mass[best] {
            best = c;
        }
    }
    best
}

/// Stump with the least weighted error over every feature and every split
/// between consecutive distinct values; each side predicts its heaviest
/// class.
pub fn fit_stump(xs: &[[f64; 2]], ys: &[usize], weights: &[f64], num_classes: usize) -> Result<Stump> {
    if xs.is_empty() || xs.len() != ys.len() || ys.len() != weights.len() {
        return Err(Error::shape("fit_stump", format!("{} points, {} labels, {} weights", xs.len(), ys.len(), weights.len())));
    }
    let mut total = vec![0.0; num_classes];
    for (&y, &w) in ys.iter().zip(weights) {
        total[y] += w;
    }
    let mut best: Option<(f64, Stump)> = None;
    for feature in 0..2 {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[a][feature].total_cmp(&xs[b][feature]));
        let mut left = vec![0.0; num_classes];
        // Split after position i (everything up to i goes left); the last
        // candidate puts every point on the left.
        for (i, &j) in order.iter().enumerate() {
            left[ys[j]] += weights[j];
            let next = order.get(i + 1).map(|&n| xs[n][feature]);
            if next == Some(xs[j][feature]) {
                continue;
            }
            let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let (lc, rc) = (heaviest(&left), heaviest(&right));
            let err = left.iter().sum::<f64>() - left[lc] + right.iter().sum::<f64>() - right[rc];
            let threshold = match next {
                Some(n) => 0.5 * (xs[j][feature] + n),
                None => xs[j][feature],
            };
            if best.as_ref().is_none_or(|(e, _)| err < *e - 1e-15) {
                best = Some((err, Stump { feature, threshold, left: lc, right: rc }));
            }
        }
    }
    Ok(best.expect("non-empty input").1)
}

/// Seeded 2-D task: points uniform in `[-1, 1]^2`, labelled 1 inside the
/// disc of radius 0.6 and 0 outside. No single axis-aligned split does well,
/// but a weighted vote of many does.
pub fn disc_dataset(m: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<[f64; 2]> = (0..m).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let ys = xs.iter().map(|p| usize::from(p[0] * p[0] + p[1] * p[1] < 0.36)).collect();
    (xs, ys)
}

/// [`WeakLearner`] fitting one stump per round on a fixed training set.
pub struct StumpLearner {
    pub xs: Vec<[f64; 2]>,
    pub ys: Vec<usize>,
    pub num_classes: usize,
}

impl WeakLearner for StumpLearner {
    type Model = Stump;

    fn fit(&mut self, _round: usize, _attempt: usize, d: &SampleWeights) -> Result<Stump> {
        fit_stump(&self.xs, &self.ys, &d.weights, self.num_classes)
    }

    fn predict_train(&self, model: &Stump) -> Result<Vec<usize>> {
        Ok(self.xs.iter().map(|x| model.predict(x)).collect())
    }
}
