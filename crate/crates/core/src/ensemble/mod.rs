//! AdaBoost over arbitrary weak learners and the weighted-vote ensemble.

pub mod manifest;
pub mod stump;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Classifier, Noise};
use crate::model::{Batch, EncoderModel};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// Clamp applied to weighted errors before taking logs.
pub const ERROR_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
    pub round: usize,
}

impl SampleWeights {
    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("sample weights need m >= 1".into()));
        }
        Ok(Self { weights: vec![1.0 / m as f64; m], round: 1 })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn init_sample_weights(m: usize) -> Result<SampleWeights> {
    SampleWeights::uniform(m)
}

/// `Σ_j D_j · 1[pred_j ≠ label_j]`.
pub fn weighted_error(predictions: &[usize], labels: &[usize], d: &SampleWeights) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != d.len() {
        return Err(Error::shape(
            "weighted_error",
            format!("{} predictions, {} labels, {} weights", predictions.len(), labels.len(), d.len()),
        ));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .zip(&d.weights)
        .filter(|((p, y), _)| p != y)
        .map(|(_, w)| w)
        .sum())
}

/// Learner weight: `½ ln((1−e)/e)` for two classes, `ln((1−e)/e) + ln(K−1)`
/// otherwise, with `e` clamped to `[ERROR_EPS, 1 − ERROR_EPS]`.
pub fn model_weight(e: f64, k: usize) -> f64 {
    let e = e.clamp(ERROR_EPS, 1.0 - ERROR_EPS);
    let odds = ((1.0 - e) / e).ln();
    if k <= 2 {
        0.5 * odds
    } else {
        odds + ((k - 1) as f64).ln()
    }
}

/// True when a learner is no better than chance: `e ≥ (K−1)/K`.
pub fn is_degenerate(e: f64, k: usize) -> bool {
    e >= (k - 1) as f64 / k as f64
}

/// Multiplies correct samples by `exp(−α)` and wrong ones by `exp(α)`, then
/// renormalizes.
pub fn update_sample_weights(d: &SampleWeights, alpha: f64, correct: &[bool]) -> Result<SampleWeights> {
    if correct.len() != d.len() {
        return Err(Error::shape("update_sample_weights", format!("{} flags for {} weights", correct.len(), d.len())));
    }
    let (down, up) = ((-alpha).exp(), alpha.exp());
    let raw: Vec<f64> = d.weights.iter().zip(correct).map(|(&w, &c)| w * if c { down } else { up }).collect();
    let z: f64 = raw.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Degenerate(format!("sample weights normalize to {z}")));
    }
    Ok(SampleWeights { weights: raw.iter().map(|w| w / z).collect(), round: d.round + 1 })
}

/// How members are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteRule {
    /// `score_k = Σ α_i · 1[argmax h_i = k]`.
    #[default]
    Hard,
    /// `score_k = Σ α_i · softmax(h_i)_k`.
    Soft,
}

/// Weighted vote over per-member class scores (`[m, K]` each). Hard votes
/// read each row's argmax; soft votes use the rows directly. Returns the
/// argmax class per sample (ties to the lowest class) and the scores.
pub fn combine_votes(member_scores: &[Tensor], alphas: &[f64], rule: VoteRule) -> Result<(Vec<usize>, Tensor)> {
    let first = member_scores.first().ok_or_else(|| Error::Invalid("ensemble has no members".into()))?;
    if member_scores.len() != alphas.len() {
        return Err(Error::shape("combine_votes", format!("{} members, {} alphas", member_scores.len(), alphas.len())));
    }
    let shape = first.shape().to_vec();
    let k = first.last_dim();
    let mut scores = vec![0f64; first.numel()];
    for (s, &a) in member_scores.iter().zip(alphas) {
        if s.shape() != shape.as_slice() {
            return Err(Error::shape("combine_votes", format!("{:?} vs {shape:?}", s.shape())));
        }
        match rule {
            VoteRule::Hard => {
                for (row, c) in s.argmax_rows().into_iter().enumerate() {
                    scores[row * k + c] += a;
                }
            }
            VoteRule::Soft => {
                for (acc, &p) in scores.iter_mut().zip(s.data()) {
                    *acc += a * p as f64;
                }
            }
        }
    }
    let classes = scores
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let scores = Tensor::new(shape, scores.into_iter().map(|v| v as f32).collect())?;
    Ok((classes, scores))
}

/// A weak learner driven by [`adaboost_train`].
pub trait WeakLearner {
    type Model;

    /// Fits a fresh model under sample weights `d`. `attempt` counts every
    /// training call, including discarded ones, so retries can reseed.
    fn fit(&mut self, round: usize, attempt: usize, d: &SampleWeights) -> Result<Self::Model>;

    /// Predictions on the training set, indexed like the sample weights.
    fn predict_train(&self, model: &Self::Model) -> Result<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub attempt: usize,
    pub error: f64,
    pub alpha: f64,
    pub accepted: bool,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct Member<M> {
    pub model: M,
    pub alpha: f64,
    pub round: usize,
}

#[derive(Clone, Debug)]
pub struct BoostOutcome<M> {
    pub members: Vec<Member<M>>,
    pub rounds: Vec<RoundDiagnostics>,
    /// Weights after the final accepted update.
    pub final_weights: SampleWeights,
    pub degenerate_rounds: usize,
    pub stopped_early: bool,
}

/// Runs `rounds` boosting rounds. A round whose learner is no better than
/// chance is discarded, the sample weights are reset to uniform and the
/// next round starts from a reseeded learner. A round with error at most
/// [`ERROR_EPS`] is kept with the clamped maximum weight and ends training.
pub fn adaboost_train<L: WeakLearner>(learner: &mut L, labels: &[usize], num_classes: usize, rounds: usize) -> Result<BoostOutcome<L::Model>> {
    if rounds == 0 {
        return Err(Error::Invalid("ensemble size N must be >= 1".into()));
    }
    let mut d = SampleWeights::uniform(labels.len())?;
    let mut members = Vec::new();
    let mut diags = Vec::new();
    let mut degenerate = 0;
    let mut stopped_early = false;
    for attempt in 1..=rounds {
        let start = std::time::Instant::now();
        let round = members.len() + 1;
        let model = learner.fit(round, attempt, &d)?;
        let preds = learner.predict_train(&model)?;
        let e = weighted_error(&preds, labels, &d)?;
        let alpha = model_weight(e, num_classes);
        let accepted = !is_degenerate(e, num_classes);
        log::info!("boost round {round} attempt {attempt}: e={e:.6} alpha={alpha:.6} accepted={accepted}");
        diags.push(RoundDiagnostics {
            round,
            attempt,
            error: e,
            alpha,
            accepted,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
        if !accepted {
            degenerate += 1;
            d = SampleWeights::uniform(labels.len())?;
            continue;
        }
        let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, y)| p == y).collect();
        d = update_sample_weights(&d, alpha, &correct)?;
        members.push(Member { model, alpha, round });
        if e <= ERROR_EPS {
            stopped_early = true;
            break;
        }
    }
    if members.is_empty() {
        let errors: Vec<String> = diags.iter().map(|r| format!("{:.4}", r.error)).collect();
        return Err(Error::Degenerate(format!(
            "all {rounds} rounds were no better than chance (weighted errors {})",
            errors.join(", ")
        )));
    }
    Ok(BoostOutcome { members, rounds: diags, final_weights: d, degenerate_rounds: degenerate, stopped_early })
}

/// A boosted ensemble of encoder classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<(EncoderModel, f64)>,
    pub num_classes: usize,
    pub vote: VoteRule,
}

impl EnsembleModel {
    pub fn new(members: Vec<(EncoderModel, f64)>, vote: VoteRule) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Invalid("ensemble has no members".into()))?;
        let k = first.0.config.num_classes;
        if members.iter().any(|(m, a)| m.config.num_classes != k || !a.is_finite()) {
            return Err(Error::Invalid("members must share the class count and have finite alphas".into()));
        }
        Ok(Self { members, num_classes: k, vote })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.members.iter().map(|(_, a)| *a).collect()
    }

    /// Class predictions and vote scores. Member `i` draws noise from
    /// `derive_seed([noise.seed, i])`.
    pub fn predict_scores(&self, batch: &Batch, noise: Option<Noise>) -> Result<(Vec<usize>, Tensor)> {
        let member_scores = self
            .members
            .iter()
            .enumerate()
            .map(|(i, (m, _))| {
                let logits = match noise {
                    Some(n) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[n.seed, i as u64]));
                        m.noise_injected_forward(batch, n.variance, &mut rng)?.logits
                    }
                    None => m.logits(batch)?,
                };
                Ok(softmax_rows(&logits))
            })
            .collect::<Result<Vec<_>>>()?;
        combine_votes(&member_scores, &self.alphas(), self.vote)
    }
}

pub fn ensemble_predict(ensemble: &EnsembleModel, batch: &Batch) -> Result<(Vec<usize>, Tensor)> {
    ensemble.predict_scores(batch, None)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.last_dim();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = row.iter().map(|&x| ((x - max) as f64).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / z) as f32));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

impl Classifier for EnsembleModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn max_seq_len(&self) -> usize {
        self.members.iter().map(|(m, _)| m.config.max_seq_len).min().unwrap_or(1)
    }

    fn predict_batch(&self, batch: &Batch, noise: Option<Noise>) -> Result<Vec<usize>> {
        Ok(self.predict_scores(batch, noise)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_weights() {
        assert_eq!(model_weight(0.5, 2), 0.0);
        assert!((model_weight(0.25, 2) - 0.5 * 3f64.ln()).abs() < 1e-15);
        assert!((model_weight(0.25, 3) - (3f64.ln() + 2f64.ln())).abs() < 1e-15);
        assert!(model_weight(0.0, 2).is_finite());
    }

    #[test]
    fn update_hand_example() {
        let d = init_sample_weights(4).unwrap();
        assert_eq!(d.weights, vec![0.25; 4]);
        let d2 = update_sample_weights(&d, 0.5 * 3f64.ln(), &[true, true, true, false]).unwrap();
        assert!((d2.weights[3] - 0.5).abs() < 1e-12);
        assert!(d2.weights[..3].iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn error_counts_weight_of_mistakes() {
        let d = init_sample_weights(4).unwrap();
        assert_eq!(weighted_error(&[0, 1, 1, 0], &[0, 1, 1, 0], &d).unwrap(), 0.0);
        assert_eq!(weighted_error(&[0, 1, 1, 1], &[0, 1, 1, 0], &d).unwrap(), 0.25);
        assert!(weighted_error(&[0], &[0, 1], &d).is_err());
        assert!(init_sample_weights(0).is_err());
    }

    #[test]
    fn weighted_vote_prefers_heavier_member() {
        let a = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
        let (c, _) = combine_votes(&[a.clone(), b.clone()], &[0.6, 0.4], VoteRule::Hard).unwrap();
        assert_eq!(c, vec![0]);
        let (c, _) = combine_votes(&[a, b], &[0.4, 0.6], VoteRule::Hard).unwrap();
        assert_eq!(c, vec![1]);
    }
}
