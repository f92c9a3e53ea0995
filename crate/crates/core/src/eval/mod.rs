//! Metrics, the noise-robustness protocol and cost accounting.

mod cost;
pub mod report;

pub use cost::{flops_model_size, CostReport, LayerCost, SizeEntry, MIB};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, EncoderModel};
use crate::par::{map_indexed, ExecMode};
use crate::seeds::derive_seed;

/// Embedding-noise request for one prediction pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Noise {
    pub variance: f64,
    pub seed: u64,
}

/// Anything that maps a batch to class predictions.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    /// Argmax class per row. With `noise`, Gaussian noise is added to the
    /// embedding output; the draws depend only on `noise.seed`.
    fn predict_batch(&self, batch: &Batch, noise: Option<Noise>) -> Result<Vec<usize>>;
}

impl Classifier for EncoderModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn predict_batch(&self, batch: &Batch, noise: Option<Noise>) -> Result<Vec<usize>> {
        let logits = match noise {
            Some(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(n.seed);
                self.noise_injected_forward(batch, n.variance, &mut rng)?.logits
            }
            None => self.logits(batch)?,
        };
        Ok(logits.argmax_rows())
    }
}

/// Evaluation settings shared by every prediction pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub mode: ExecMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 64, mode: ExecMode::Sequential }
    }
}

/// Predictions for the whole dataset in example order. Batches are fixed
/// consecutive chunks; batch `i` draws noise from `derive_seed([seed, i])`.
pub fn predict_dataset<C: Classifier + ?Sized>(
    clf: &C,
    data: &Dataset,
    opts: EvalOptions,
    noise: Option<Noise>,
) -> Result<Vec<usize>> {
    let batches = data.batches(opts.batch_size, clf.max_seq_len())?;
    let per_batch = map_indexed(opts.mode, batches.len(), |i| {
        let n = noise.map(|n| Noise { variance: n.variance, seed: derive_seed(&[n.seed, i as u64]) });
        clf.predict_batch(&batches[i].1, n)
    });
    let mut out = Vec::with_capacity(data.len());
    for p in per_batch {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Binary Matthews correlation; present only for two classes.
    pub matthews: Option<f64>,
    /// `confusion[label][prediction]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn accuracy_and_confusion(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Invalid("cannot score an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "accuracy_and_confusion",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Invalid(format!("class index outside [0, {num_classes}): pred {p}, label {y}")));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let matthews = (num_classes == 2).then(|| {
        let tp = confusion[1][1] as f64;
        let tn = confusion[0][0] as f64;
        let fp = confusion[0][1] as f64;
        let fn_ = confusion[1][0] as f64;
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (tp * tn - fp * fn_) / denom
        }
    });
    Ok(MetricsReport { accuracy: correct as f64 / predictions.len() as f64, matthews, confusion })
}

pub fn evaluate<C: Classifier + ?Sized>(clf: &C, data: &Dataset, opts: EvalOptions) -> Result<MetricsReport> {
    let preds = predict_dataset(clf, data, opts, None)?;
    accuracy_and_confusion(&preds, &data.labels(), clf.num_classes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub noise_variance: f64,
    pub rounds: usize,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over rounds.
    pub std: f64,
}

/// Mean and population standard deviation, two-pass.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy under embedding noise for `rounds` independent draws; round `r`
/// (1-based) uses seed `derive_seed([seed, r])`.
pub fn robustness_eval<C: Classifier + ?Sized>(
    clf: &C,
    data: &Dataset,
    variance: f64,
    rounds: usize,
    seed: u64,
    opts: EvalOptions,
) -> Result<RobustnessReport> {
    if rounds < 1 {
        return Err(Error::Invalid("robustness needs at least one round".into()));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Invalid(format!("noise variance must be >= 0, got {variance}")));
    }
    let labels = data.labels();
    let mut accuracies = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let noise = Noise { variance, seed: derive_seed(&[seed, r as u64]) };
        let preds = predict_dataset(clf, data, opts, Some(noise))?;
        accuracies.push(accuracy_and_confusion(&preds, &labels, clf.num_classes())?.accuracy);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(RobustnessReport { noise_variance: variance, rounds, seed, accuracies, mean, std })
}
