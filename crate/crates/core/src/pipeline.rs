//! End-to-end stages: full-precision teacher, ternary student, ternary
//! weight split, boosting, evaluation, robustness and cost.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_tsv, make_synthetic_task, Dataset, Split, TaskKind, TaskSpec};
use crate::distill::{train_student, KdStrategy, TrainConfig, TrainReport};
use crate::ensemble::{adaboost_train, EnsembleModel, RoundDiagnostics, SampleWeights, VoteRule, WeakLearner};
use crate::error::{Error, Result};
use crate::eval::{predict_dataset, EvalOptions};
use crate::fsutil;
use crate::model::{EncoderConfig, EncoderModel, QuantMap, BYTE_VOCAB};
use crate::optim::OptimizerKind;
use crate::par::ExecMode;
use crate::seeds::derive_seed;

/// Where the data comes from: TSV files or a synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    pub task: TaskKind,
    pub m: usize,
    pub dev_m: usize,
    pub num_classes: usize,
    pub noise_rate: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_min_len() -> usize {
    8
}

fn default_max_len() -> usize {
    24
}

/// Encoder geometry of the full-precision teacher; the student is the
/// half-width ternary version of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    #[serde(flatten)]
    pub train: StageTrain,
    pub kd: KdStrategy,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    #[serde(flatten)]
    pub train: StageTrain,
    pub kd: KdStrategy,
    pub ensemble_size: usize,
    #[serde(default)]
    pub vote: VoteRule,
    #[serde(default = "one")]
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub noise_variance: f64,
    pub rounds: usize,
    pub threads: usize,
    pub cost_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub teacher: StageTrain,
    pub student: StudentConfig,
    pub boost: BoostConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Desk-scale defaults: the synthetic keyword task, a two-layer teacher
    /// of width 32 and an ensemble of two binary students.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            data: DataConfig {
                train_path: None,
                dev_path: None,
                task: TaskKind::KeywordVsKeyword,
                m: 2000,
                dev_m: 1000,
                num_classes: 2,
                noise_rate: 0.1,
                min_len: default_min_len(),
                max_len: default_max_len(),
            },
            arch: ArchConfig { hidden_dim: 32, num_layers: 2, num_heads: 2, ffn_dim: 64, max_seq_len: 24 },
            teacher: StageTrain { epochs: 3, batch_size: 32, learning_rate: 1e-3, optimizer: OptimizerKind::Adam },
            student: StudentConfig {
                train: StageTrain { epochs: 2, batch_size: 32, learning_rate: 1e-3, optimizer: OptimizerKind::Adam },
                kd: KdStrategy::C,
                temperature: 1.0,
            },
            boost: BoostConfig {
                train: StageTrain { epochs: 1, batch_size: 32, learning_rate: 5e-4, optimizer: OptimizerKind::Adam },
                kd: KdStrategy::A,
                ensemble_size: 2,
                vote: VoteRule::Hard,
                temperature: 1.0,
            },
            eval: EvalConfig { batch_size: 64, noise_variance: 0.01, rounds: 10, threads: 1, cost_seq_len: 128 },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(errs) => Error::Config(errs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |r: Result<()>, scope: &str| {
            if let Err(e) = r {
                match e {
                    Error::Config(v) => errs.extend(v.into_iter().map(|m| format!("{scope}: {m}"))),
                    other => errs.push(format!("{scope}: {other}")),
                }
            }
        };
        push(self.teacher_config().validate(), "arch");
        push(self.student_model_config().validate(), "arch (half-size student)");
        push(self.teacher_train().validate(), "teacher");
        push(self.student_train().validate(), "student");
        push(self.boost_train(0).validate(), "boost");
        if self.data.train_path.is_none() {
            push(self.train_spec().validate(), "data");
            push(self.dev_spec().validate(), "data (dev)");
        }
        if self.student.kd == KdStrategy::A {
            errs.push("student: the ternary student is distilled; kd must be B or C".into());
        }
        if self.boost.ensemble_size < 1 {
            errs.push("boost: ensemble_size must be >= 1".into());
        }
        if self.eval.batch_size < 1 || self.eval.rounds < 1 || self.eval.threads < 1 {
            errs.push("eval: batch_size, rounds and threads must be >= 1".into());
        }
        if !(self.eval.noise_variance >= 0.0 && self.eval.noise_variance.is_finite()) {
            errs.push(format!("eval: noise_variance must be >= 0, got {}", self.eval.noise_variance));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn train_spec(&self) -> TaskSpec {
        let d = &self.data;
        TaskSpec {
            kind: d.task,
            m: d.m,
            num_classes: d.num_classes,
            seed: derive_seed(&[self.seed, 1]),
            noise_rate: d.noise_rate,
            min_len: d.min_len,
            max_len: d.max_len,
        }
    }

    /// The dev set is noiseless and drawn from an independent seed.
    pub fn dev_spec(&self) -> TaskSpec {
        TaskSpec { m: self.data.dev_m, seed: derive_seed(&[self.seed, 2]), noise_rate: 0.0, ..self.train_spec() }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match (&self.data.train_path, &self.data.dev_path) {
            (Some(t), Some(d)) => {
                let train = load_tsv(t)?;
                let mut dev = load_tsv(d)?;
                dev.split = Split::Dev;
                let k = train.num_classes.max(dev.num_classes).max(self.data.num_classes);
                Ok((Dataset { num_classes: k, ..train }, Dataset { num_classes: k, ..dev }))
            }
            (Some(_), None) | (None, Some(_)) => Err(Error::Config(vec![
                "data: train_path and dev_path must be given together".into(),
            ])),
            (None, None) => Ok((
                make_synthetic_task(&self.train_spec(), Split::Train)?,
                make_synthetic_task(&self.dev_spec(), Split::Dev)?,
            )),
        }
    }

    pub fn teacher_config(&self) -> EncoderConfig {
        let a = &self.arch;
        EncoderConfig {
            vocab_size: BYTE_VOCAB,
            max_seq_len: a.max_seq_len,
            hidden_dim: a.hidden_dim,
            num_layers: a.num_layers,
            num_heads: a.num_heads,
            ffn_dim: a.ffn_dim,
            num_classes: self.data.num_classes,
            quant: QuantMap::full_precision(),
            weight_branches: 1,
            seed: derive_seed(&[self.seed, 10]),
        }
    }

    pub fn student_model_config(&self) -> EncoderConfig {
        EncoderConfig { seed: derive_seed(&[self.seed, 20]), ..self.teacher_config().half_size() }.with_quant(QuantMap::ternary())
    }

    pub fn teacher_train(&self) -> TrainConfig {
        let t = &self.teacher;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            seed: derive_seed(&[self.seed, 11]),
            kd: KdStrategy::A,
            temperature: 1.0,
        }
    }

    pub fn student_train(&self) -> TrainConfig {
        let s = &self.student;
        TrainConfig {
            epochs: s.train.epochs,
            batch_size: s.train.batch_size,
            learning_rate: s.train.learning_rate,
            optimizer: s.train.optimizer,
            seed: derive_seed(&[self.seed, 21]),
            kd: s.kd,
            temperature: s.temperature,
        }
    }

    /// Training settings of boosting attempt `attempt`; each attempt gets
    /// its own data order.
    pub fn boost_train(&self, attempt: usize) -> TrainConfig {
        let b = &self.boost;
        TrainConfig {
            epochs: b.train.epochs,
            batch_size: b.train.batch_size,
            learning_rate: b.train.learning_rate,
            optimizer: b.train.optimizer,
            seed: derive_seed(&[self.seed, 30, attempt as u64]),
            kd: b.kd,
            temperature: b.temperature,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { batch_size: self.eval.batch_size, mode: ExecMode::for_threads(self.eval.threads) }
    }
}

pub struct Trained {
    pub model: EncoderModel,
    pub report: TrainReport,
}

pub fn train_teacher(cfg: &PipelineConfig, train: &Dataset) -> Result<Trained> {
    let init = EncoderModel::build(cfg.teacher_config())?;
    let uniform = vec![1.0 / train.len() as f64; slot_count(train)];
    let out = train_student(&init, None, train, &uniform, &cfg.teacher_train())?;
    Ok(Trained { model: out.model, report: out.report })
}

fn slot_count(data: &Dataset) -> usize {
    data.examples.iter().map(|e| e.weight_slot + 1).max().unwrap_or(0)
}

/// Largest absolute logit difference between two models over `data`.
pub fn max_logit_gap(a: &EncoderModel, b: &EncoderModel, data: &Dataset, batch_size: usize) -> Result<f32> {
    let mut gap = 0f32;
    for (_, batch) in data.batches(batch_size, a.config.max_seq_len.min(b.config.max_seq_len))? {
        let d = a
            .logits(&batch)?
            .max_abs_diff(&b.logits(&batch)?)
            .ok_or_else(|| Error::Assertion("logit shapes differ".into()))?;
        gap = gap.max(d);
    }
    Ok(gap)
}

/// Tolerance of the split-equivalence check.
pub const TWS_TOLERANCE: f32 = 1e-5;

pub struct DistillSplit {
    pub ternary: EncoderModel,
    pub split: EncoderModel,
    pub report: TrainReport,
    pub max_logit_gap: f32,
}

/// Distills a half-width ternary student from `teacher`, then splits it into
/// a two-branch binary model. Fails with [`Error::Assertion`] if the split
/// model's logits differ from the ternary model's by more than
/// [`TWS_TOLERANCE`] anywhere on `check`.
pub fn distill_split(cfg: &PipelineConfig, teacher: &EncoderModel, train: &Dataset, check: &Dataset) -> Result<DistillSplit> {
    let expected = cfg.teacher_config();
    let t = &teacher.config;
    if (t.num_layers, t.num_heads, t.num_classes, t.max_seq_len)
        != (expected.num_layers, expected.num_heads, expected.num_classes, expected.max_seq_len)
    {
        return Err(Error::Config(vec![format!(
            "teacher geometry (layers {}, heads {}, classes {}, seq {}) does not match the configured arch",
            t.num_layers, t.num_heads, t.num_classes, t.max_seq_len
        )]));
    }
    let init = EncoderModel::build(cfg.student_model_config())?;
    let uniform = vec![1.0 / train.len() as f64; slot_count(train)];
    let out = train_student(&init, Some(teacher), train, &uniform, &cfg.student_train())?;
    let split = out.model.ternary_weight_split()?;
    let gap = max_logit_gap(&out.model, &split, check, cfg.eval.batch_size)?;
    if gap.is_nan() || gap > TWS_TOLERANCE {
        return Err(Error::Assertion(format!(
            "ternary weight split changed logits by {gap:e} (tolerance {TWS_TOLERANCE:e}); refusing to emit"
        )));
    }
    Ok(DistillSplit { ternary: out.model, split, report: out.report, max_logit_gap: gap })
}

/// Boosting weak learner: each round fine-tunes a fresh copy of the split
/// checkpoint under the current sample weights.
pub struct StudentLearner<'a> {
    pub cfg: &'a PipelineConfig,
    pub init: &'a EncoderModel,
    pub teacher: Option<&'a EncoderModel>,
    pub train: &'a Dataset,
    pub reports: Vec<TrainReport>,
}

impl WeakLearner for StudentLearner<'_> {
    type Model = EncoderModel;

    fn fit(&mut self, _round: usize, attempt: usize, d: &SampleWeights) -> Result<EncoderModel> {
        let mut by_slot = vec![0.0; slot_count(self.train)];
        for (e, &w) in self.train.examples.iter().zip(&d.weights) {
            by_slot[e.weight_slot] = w;
        }
        let out = train_student(self.init, self.teacher, self.train, &by_slot, &self.cfg.boost_train(attempt))?;
        self.reports.push(out.report);
        Ok(out.model)
    }

    fn predict_train(&self, model: &EncoderModel) -> Result<Vec<usize>> {
        predict_dataset(model, self.train, self.cfg.eval_options(), None)
    }
}

pub struct Boosted {
    pub ensemble: EnsembleModel,
    pub rounds: Vec<RoundDiagnostics>,
    pub degenerate_rounds: usize,
    pub reports: Vec<TrainReport>,
}

pub fn boost(cfg: &PipelineConfig, split: &EncoderModel, teacher: Option<&EncoderModel>, train: &Dataset) -> Result<Boosted> {
    let teacher = if cfg.boost.kd.needs_teacher() {
        Some(teacher.ok_or_else(|| Error::Invalid(format!("KD strategy {} needs a teacher", cfg.boost.kd)))?)
    } else {
        None
    };
    let mut learner = StudentLearner { cfg, init: split, teacher, train, reports: Vec::new() };
    let out = adaboost_train(&mut learner, &train.labels(), train.num_classes, cfg.boost.ensemble_size)?;
    let members = out.members.into_iter().map(|m| (m.model, m.alpha)).collect();
    Ok(Boosted {
        ensemble: EnsembleModel::new(members, cfg.boost.vote)?,
        rounds: out.rounds,
        degenerate_rounds: out.degenerate_rounds,
        reports: learner.reports,
    })
}

/// A file a run produced, with its digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_clock_secs: f64,
}

/// Self-describing record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: toml::Table,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputFile>,
    pub stages: Vec<StageTiming>,
    #[serde(default)]
    pub notes: toml::Table,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: toml::Table) -> Self {
        Self {
            command: command.into(),
            version: artifact_version(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            stages: Vec::new(),
            notes: toml::Table::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let sha256 = fsutil::sha256_hex(&fsutil::read(path)?);
        self.outputs.push(OutputFile { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    /// Runs `f` and records its wall-clock under `stage`.
    pub fn time<R>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let start = Instant::now();
        log::info!("stage {stage}: start");
        let r = f(self).map_err(|e| Error::Stage { stage: stage.into(), source: Box::new(e) })?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("stage {stage}: done in {secs:.2}s");
        self.stages.push(StageTiming { stage: stage.into(), wall_clock_secs: secs });
        Ok(r)
    }

    pub fn note(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.notes.insert(key.into(), value.into());
    }

    /// Writes the manifest atomically; only called once a run succeeded.
    pub fn write(&self, path: &Path) -> Result<()> {
        crate::eval::report::write_toml(self, path)
    }
}

/// `CARGO_PKG_VERSION` plus the output of `git describe`, when available.
pub fn artifact_version() -> String {
    let pkg = env!("CARGO_PKG_VERSION");
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match git {
        Some(g) => format!("{pkg}+{g}"),
        None => pkg.to_string(),
    }
}
