//! Knowledge-distillation losses and the per-round student training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, EncoderModel, ForwardTrace, TapeTrace};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Which losses a student minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KdStrategy {
    /// Hard-label cross-entropy, no teacher.
    A,
    /// Soft cross-entropy against the teacher's predictions.
    B,
    /// Hidden-state and attention matching, then prediction matching, as two
    /// separate backward passes per mini-batch.
    C,
}

impl KdStrategy {
    pub fn needs_teacher(self) -> bool {
        self != KdStrategy::A
    }

    /// Backward passes per mini-batch.
    pub fn backward_passes_per_step(self) -> usize {
        match self {
            KdStrategy::A | KdStrategy::B => 1,
            KdStrategy::C => 2,
        }
    }
}

impl fmt::Display for KdStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for KdStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(KdStrategy::A),
            "B" | "b" => Ok(KdStrategy::B),
            "C" | "c" => Ok(KdStrategy::C),
            "D" | "d" => Err(Error::Invalid("KD strategy D (direction-matching) is not implemented".into())),
            _ => Err(Error::Invalid(format!("unknown KD strategy {s:?}; expected A, B or C"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub kd: KdStrategy,
    #[serde(default = "one")]
    pub temperature: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs < 1 {
            errs.push("epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Batch weights rescaled to sum to one; uniform when they sum to zero.
pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / w.len().max(1) as f64; w.len()]
    }
}

/// Frozen random map from student hidden width to teacher hidden width, or
/// `None` when the widths already agree.
pub fn hidden_projection(student_dim: usize, teacher_dim: usize, seed: u64) -> Option<Tensor> {
    if student_dim == teacher_dim {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b0a7);
    let normal = Normal::new(0.0, 1.0 / (student_dim as f64).sqrt()).expect("positive std");
    let data = (0..student_dim * teacher_dim).map(|_| normal.sample(&mut rng) as f32).collect();
    Some(Tensor::new(vec![student_dim, teacher_dim], data).expect("sized"))
}

fn check_weights(batch: usize, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != batch {
        return Err(Error::shape("sample weights", format!("{} weights for batch of {batch}", weights.len())));
    }
    Ok(normalize_weights(weights))
}

/// Hidden-state plus attention MSE on the tape.
///
/// Every per-sample term is a mean over that sample's real tokens (and real
/// token pairs for attention); samples are then combined with normalized
/// weights.
pub fn loss_trm_on_tape<T: Float>(
    tape: &mut Tape<T>,
    student: &TapeTrace,
    teacher: &ForwardTrace,
    batch: &Batch,
    weights: &[f64],
    projection: Option<&Tensor>,
) -> Result<Var> {
    let (b, s) = (batch.batch, batch.seq);
    let w = check_weights(b, weights)?;
    if student.hidden_states.len() != teacher.hidden_states.len() || student.attentions.len() != teacher.attentions.len() {
        return Err(Error::shape(
            "loss_trm",
            format!(
                "student has {} layers, teacher {}",
                student.attentions.len(),
                teacher.attentions.len()
            ),
        ));
    }
    let counts = batch.valid_counts();
    let mut terms = Vec::new();

    let proj = projection.map(|p| tape.constant(p.cast()));
    for (&hs, ht) in student.hidden_states.iter().zip(&teacher.hidden_states) {
        let ht_dim = *ht.shape().last().unwrap_or(&0);
        let mut hs = hs;
        if let Some(p) = proj {
            hs = tape.matmul(hs, p)?;
        }
        if tape.value(hs).shape() != [b * s, ht_dim] || ht.shape() != [b, s, ht_dim] {
            return Err(Error::shape(
                "loss_trm",
                format!("student hidden {:?} vs teacher {:?}", tape.value(hs).shape(), ht.shape()),
            ));
        }
        let target = tape.constant(ht.cast::<T>().reshape(&[b * s, ht_dim])?);
        let mut wt = vec![T::zero(); b * s * ht_dim];
        for bi in 0..b {
            if counts[bi] == 0 {
                continue;
            }
            let c = T::lit(w[bi] / (counts[bi] * ht_dim) as f64);
            for si in 0..s {
                if batch.mask[bi * s + si] {
                    wt[(bi * s + si) * ht_dim..(bi * s + si + 1) * ht_dim].fill(c);
                }
            }
        }
        let wt = tape.constant(Tensor::new(vec![b * s, ht_dim], wt)?);
        let d = tape.sub(hs, target)?;
        let sq = tape.mul(d, d)?;
        let weighted = tape.mul(sq, wt)?;
        terms.push(tape.sum(weighted));
    }

    for (&a_s, a_t) in student.attentions.iter().zip(&teacher.attentions) {
        let heads = a_t.shape().get(1).copied().unwrap_or(0);
        if tape.value(a_s).shape() != [b * heads, s, s] || a_t.shape() != [b, heads, s, s] {
            return Err(Error::shape(
                "loss_trm",
                format!("student attention {:?} vs teacher {:?}", tape.value(a_s).shape(), a_t.shape()),
            ));
        }
        let target = tape.constant(a_t.cast::<T>().reshape(&[b * heads, s, s])?);
        let mut wt = vec![T::zero(); b * heads * s * s];
        for bi in 0..b {
            if counts[bi] == 0 {
                continue;
            }
            let c = T::lit(w[bi] / (heads * counts[bi] * counts[bi]) as f64);
            for h in 0..heads {
                for i in 0..s {
                    for j in 0..s {
                        if batch.mask[bi * s + i] && batch.mask[bi * s + j] {
                            wt[((bi * heads + h) * s + i) * s + j] = c;
                        }
                    }
                }
            }
        }
        let wt = tape.constant(Tensor::new(vec![b * heads, s, s], wt)?);
        let d = tape.sub(a_s, target)?;
        let sq = tape.mul(d, d)?;
        let weighted = tape.mul(sq, wt)?;
        terms.push(tape.sum(weighted));
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Soft cross-entropy `-Σ softmax(t/τ) · log_softmax(s/τ)` with normalized
/// sample weights.
pub fn loss_pred_on_tape<T: Float>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor,
    weights: &[f64],
    temperature: f64,
) -> Result<Var> {
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_logits.shape() || shape.len() != 2 {
        return Err(Error::shape("loss_pred", format!("student {shape:?} vs teacher {:?}", teacher_logits.shape())));
    }
    let (b, k) = (shape[0], shape[1]);
    let w = check_weights(b, weights)?;
    let mut target = Vec::with_capacity(b * k);
    for (bi, row) in teacher_logits.data().chunks(k).enumerate() {
        let z: Vec<f64> = row.iter().map(|&x| x as f64 / temperature).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        target.extend(e.iter().map(|x| T::lit(-w[bi] * x / sum)));
    }
    let target = tape.constant(Tensor::new(shape, target)?);
    let scaled = tape.scale(student_logits, T::lit(1.0 / temperature));
    let logp = tape.log_softmax(scaled);
    let prod = tape.mul(logp, target)?;
    Ok(tape.sum(prod))
}

/// Weighted cross-entropy against integer labels.
pub fn hard_label_loss_on_tape<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("hard_label_loss", format!("logits {shape:?} for {} labels", labels.len())));
    }
    let (b, k) = (shape[0], shape[1]);
    let w = check_weights(b, weights)?;
    let mut pick = vec![T::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Invalid(format!("label {y} at row {i} is outside [0, {k})")));
        }
        pick[i * k + y] = T::lit(-w[i]);
    }
    let pick = tape.constant(Tensor::new(shape, pick)?);
    let logp = tape.log_softmax(logits);
    let prod = tape.mul(logp, pick)?;
    Ok(tape.sum(prod))
}

fn trace_on_tape(tape: &mut Tape<f64>, trace: &ForwardTrace) -> Result<TapeTrace> {
    let mut constant = |t: &Tensor, shape: &[usize]| -> Result<Var> { Ok(tape.constant(t.cast::<f64>().reshape(shape)?)) };
    let logits = constant(&trace.logits, trace.logits.shape())?;
    let hidden_states = trace
        .hidden_states
        .iter()
        .map(|h| {
            let s = h.shape();
            constant(h, &[s[0] * s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    let attentions = trace
        .attentions
        .iter()
        .map(|a| {
            let s = a.shape();
            constant(a, &[s[0] * s[1], s[2], s[3]])
        })
        .collect::<Result<_>>()?;
    Ok(TapeTrace { logits, hidden_states, attentions })
}

/// Value of [`loss_trm_on_tape`] for two recorded traces.
pub fn loss_trm(teacher: &ForwardTrace, student: &ForwardTrace, batch: &Batch, weights: &[f64], projection: Option<&Tensor>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let st = trace_on_tape(&mut tape, student)?;
    let loss = loss_trm_on_tape(&mut tape, &st, teacher, batch, weights, projection)?;
    Ok(tape.value(loss).data()[0])
}

pub fn loss_pred(teacher_logits: &Tensor, student_logits: &Tensor, weights: &[f64], temperature: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(student_logits.cast());
    let loss = loss_pred_on_tape(&mut tape, s, teacher_logits, weights, temperature)?;
    Ok(tape.value(loss).data()[0])
}

pub fn hard_label_loss(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(logits.cast());
    let loss = hard_label_loss_on_tape(&mut tape, s, labels, weights)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    HardLabel,
    Prediction,
    Intermediate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::HardLabel => "hard",
            Phase::Prediction => "pred",
            Phase::Intermediate => "trm",
        })
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub elapsed_secs: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} phase={} loss={:.6} wall_clock={:.3}", self.step, self.phase, self.loss, self.elapsed_secs)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mini-batches processed.
    pub steps: usize,
    pub backward_passes: usize,
    pub wall_clock_secs: f64,
    pub log: Vec<LogLine>,
}

pub struct TrainOutcome {
    pub model: EncoderModel,
    pub report: TrainReport,
}

fn check_teacher(student: &EncoderModel, teacher: Option<&EncoderModel>, kd: KdStrategy) -> Result<()> {
    match (kd.needs_teacher(), teacher) {
        (true, None) => return Err(Error::Invalid(format!("KD strategy {kd} needs a teacher"))),
        (false, Some(_)) => return Err(Error::Invalid("KD strategy A takes no teacher".into())),
        _ => {}
    }
    let Some(t) = teacher else { return Ok(()) };
    let (sc, tc) = (&student.config, &t.config);
    let mut errs = Vec::new();
    if sc.num_classes != tc.num_classes {
        errs.push(format!("teacher has {} classes, student {}", tc.num_classes, sc.num_classes));
    }
    if kd == KdStrategy::C {
        if sc.num_layers != tc.num_layers {
            errs.push(format!("teacher has {} layers, student {}", tc.num_layers, sc.num_layers));
        }
        if sc.num_heads != tc.num_heads {
            errs.push(format!("teacher has {} heads, student {}", tc.num_heads, sc.num_heads));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// Fine-tunes a copy of `init` on `data`. `sample_weights` is indexed by
/// each example's weight slot.
pub fn train_student(
    init: &EncoderModel,
    teacher: Option<&EncoderModel>,
    data: &Dataset,
    sample_weights: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(init, teacher, cfg.kd)?;
    if data.num_classes != init.config.num_classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, model {}",
            data.num_classes, init.config.num_classes
        )));
    }
    if let Some(e) = data.examples.iter().find(|e| e.weight_slot >= sample_weights.len()) {
        return Err(Error::Invalid(format!(
            "example {} uses weight slot {} but only {} weights were given",
            e.id,
            e.weight_slot,
            sample_weights.len()
        )));
    }
    let projection = teacher.and_then(|t| hidden_projection(init.config.hidden_dim, t.config.hidden_dim, cfg.seed));

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate as f32);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk, model.config.max_seq_len)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.examples[i].label).collect();
            let weights: Vec<f64> = chunk.iter().map(|&i| sample_weights[data.examples[i].weight_slot]).collect();
            let teacher_trace = teacher.map(|t| t.forward(&batch)).transpose()?;

            let phases: &[Phase] = match cfg.kd {
                KdStrategy::A => &[Phase::HardLabel],
                KdStrategy::B => &[Phase::Prediction],
                KdStrategy::C => &[Phase::Intermediate, Phase::Prediction],
            };
            for &phase in phases {
                let mut tape = Tape::<f32>::new();
                let (trace, vars) = model.forward_on_tape(&mut tape, &batch, true, None)?;
                let loss = match phase {
                    Phase::HardLabel => hard_label_loss_on_tape(&mut tape, trace.logits, &labels, &weights)?,
                    Phase::Prediction => {
                        let t = teacher_trace.as_ref().expect("checked above");
                        loss_pred_on_tape(&mut tape, trace.logits, &t.logits, &weights, cfg.temperature)?
                    }
                    Phase::Intermediate => {
                        let t = teacher_trace.as_ref().expect("checked above");
                        loss_trm_on_tape(&mut tape, &trace, t, &batch, &weights, projection.as_ref())?
                    }
                };
                let loss_value = tape.value(loss).data()[0] as f64;
                if !loss_value.is_finite() {
                    return Err(Error::Degenerate(format!("non-finite {phase} loss at step {}", report.steps)));
                }
                let mut grads = tape.backward(loss)?;
                report.backward_passes += 1;
                let named: BTreeMap<String, Tensor> = vars
                    .0
                    .iter()
                    .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
                    .collect();
                opt.step(&mut model.params, &named)?;
                let line = LogLine {
                    step: report.steps,
                    phase,
                    loss: loss_value,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                };
                log::debug!("{line}");
                report.log.push(line);
            }
            report.steps += 1;
        }
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, report })
}
