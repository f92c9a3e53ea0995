//! Datasets, byte-level tokenization, synthetic tasks and augmentation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::Batch;

pub const PAD_ID: usize = 0;

/// Per-byte substitution probability used by [`augment`].
pub const AUGMENT_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: usize,
    pub text: Vec<u8>,
    pub label: usize,
    /// Index of this example's entry in the boosting sample weights.
    pub weight_slot: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, split: Split) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        if num_classes < 2 {
            return Err(Error::Invalid(format!("num_classes must be >= 2, got {num_classes}")));
        }
        if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "example {} has label {} outside [0, {num_classes})",
                e.id, e.label
            )));
        }
        Ok(Self { examples, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Tokenized batch of the examples at `indices`, padded to the longest
    /// text among them (capped at `max_seq_len`).
    pub fn batch(&self, indices: &[usize], max_seq_len: usize) -> Result<Batch> {
        let seq = indices
            .iter()
            .map(|&i| self.examples[i].text.len())
            .max()
            .unwrap_or(0)
            .clamp(1, max_seq_len.max(1));
        let (ids, mask) = indices.iter().map(|&i| tokenize(&self.examples[i].text, seq)).unzip();
        Batch::new(ids, mask)
    }

    /// Consecutive batches covering the dataset in order.
    pub fn batches(&self, batch_size: usize, max_seq_len: usize) -> Result<Vec<(Vec<usize>, Batch)>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| Ok((c.to_vec(), self.batch(c, max_seq_len)?)))
            .collect()
    }
}

/// Bytes shifted by one into `1..=256`, truncated or padded with
/// [`PAD_ID`] to `max_seq_len`.
pub fn tokenize(text: &[u8], max_seq_len: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids: Vec<usize> = text.iter().take(max_seq_len).map(|&b| b as usize + 1).collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_seq_len, PAD_ID);
    mask.resize(max_seq_len, false);
    (ids, mask)
}

/// Inverse of [`tokenize`]; pad and out-of-range ids are dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| (1..=256).contains(&id)).map(|&id| (id - 1) as u8).collect()
}

pub fn load_tsv(path: &Path) -> Result<Dataset> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(format!("expected `text<TAB>label`, found {} tab(s)", fields.len() - 1)));
        }
        let label = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| err(format!("bad label {:?}: {e}", fields[1])))?;
        let id = examples.len();
        examples.push(Example { id, text: fields[0].as_bytes().to_vec(), label, weight_slot: id });
    }
    if examples.is_empty() {
        return Err(Error::Parse { path: path.into(), line: 0, msg: "empty dataset".into() });
    }
    let k = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    Dataset::new(examples, k.max(2), Split::Train)
}

pub fn save_tsv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &dataset.examples {
        let text = std::str::from_utf8(&e.text)
            .map_err(|_| Error::Invalid(format!("example {} is not UTF-8", e.id)))?;
        if text.contains(['\t', '\n', '\r']) {
            return Err(Error::Invalid(format!("example {} contains a tab or newline", e.id)));
        }
        out.push_str(text);
        out.push('\t');
        out.push_str(&e.label.to_string());
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Label is the number of occurrences of a marker byte, mod K.
    ParityOfMarker,
    /// Exactly one of K keywords is embedded in filler; the label names it.
    KeywordVsKeyword,
    /// Text over K symbols; the label is the most frequent one.
    MajorityByte,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ParityOfMarker => "parity-of-marker",
            TaskKind::KeywordVsKeyword => "keyword-vs-keyword",
            TaskKind::MajorityByte => "majority-byte",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity-of-marker" => Ok(TaskKind::ParityOfMarker),
            "keyword-vs-keyword" => Ok(TaskKind::KeywordVsKeyword),
            "majority-byte" => Ok(TaskKind::MajorityByte),
            _ => Err(Error::Invalid(format!("unknown task kind {s:?}"))),
        }
    }
}

/// Parameters of a synthetic task. The noiseless label is a deterministic
/// function of the text, so the Bayes accuracy is `1 - noise_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub m: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub noise_rate: f64,
    #[serde(default = "default_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_len() -> usize {
    8
}

fn default_max_len() -> usize {
    24
}

impl TaskSpec {
    pub fn new(kind: TaskKind, m: usize, num_classes: usize, seed: u64, noise_rate: f64) -> Self {
        Self { kind, m, num_classes, seed, noise_rate, min_len: default_len(), max_len: default_max_len() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.m < 10 {
            errs.push(format!("m must be >= 10, got {}", self.m));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            errs.push(format!("noise_rate must be in [0, 0.5), got {}", self.noise_rate));
        }
        if !(2..=8).contains(&self.num_classes) {
            errs.push(format!("num_classes must be in [2, 8], got {}", self.num_classes));
        }
        if self.min_len < 4 || self.min_len > self.max_len {
            errs.push(format!("need 4 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

const FILLER: &[u8] = b"abcdefghijklmnopqrstuvw";
const MARKER: u8 = b'x';
const KEYWORDS: [&[u8]; 8] = [b"yes", b"zip", b"Yak", b"Zen", b"YYZ", b"ZoY", b"yZy", b"zzY"];
const SYMBOLS: &[u8] = b"abcdefgh";

fn gen_text(kind: TaskKind, k: usize, len: usize, rng: &mut impl Rng) -> (Vec<u8>, usize) {
    match kind {
        TaskKind::ParityOfMarker => {
            let text: Vec<u8> = (0..len)
                .map(|_| if rng.random_bool(0.25) { MARKER } else { FILLER[rng.random_range(0..FILLER.len())] })
                .collect();
            let count = text.iter().filter(|&&b| b == MARKER).count();
            (text, count % k)
        }
        TaskKind::KeywordVsKeyword => {
            let label = rng.random_range(0..k);
            let kw = KEYWORDS[label];
            let mut text: Vec<u8> = (0..len - kw.len()).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
            let at = rng.random_range(0..=text.len());
            text.splice(at..at, kw.iter().copied());
            (text, label)
        }
        TaskKind::MajorityByte => loop {
            let text: Vec<u8> = (0..len).map(|_| SYMBOLS[rng.random_range(0..k)]).collect();
            let mut counts = vec![0usize; k];
            for &b in &text {
                counts[SYMBOLS.iter().position(|&s| s == b).expect("symbol")] += 1;
            }
            let top = *counts.iter().max().expect("k >= 2");
            if counts.iter().filter(|&&c| c == top).count() == 1 {
                break (text, counts.iter().position(|&c| c == top).expect("max exists"));
            }
        },
    }
}

/// Deterministic synthetic dataset. Exactly `round(noise_rate * m)` labels,
/// chosen by a seeded shuffle, are replaced by a different class.
pub fn make_synthetic_task(spec: &TaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples: Vec<Example> = (0..spec.m)
        .map(|id| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let (text, label) = gen_text(spec.kind, spec.num_classes, len, &mut rng);
            Example { id, text, label, weight_slot: id }
        })
        .collect();
    let flips = (spec.noise_rate * spec.m as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.m).collect();
    order.shuffle(&mut rng);
    for &i in &order[..flips] {
        let e = &mut examples[i];
        e.label = (e.label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
    }
    Dataset::new(examples, spec.num_classes, split)
}

/// Appends `factor - 1` perturbed copies of every example. Each byte is
/// replaced with probability [`AUGMENT_RATE`] by a different printable ASCII
/// byte; labels are kept. Copies get fresh ids and weight slots after the
/// originals.
pub fn augment(dataset: &Dataset, factor: usize, seed: u64) -> Result<Dataset> {
    if factor == 0 {
        return Err(Error::Invalid("augmentation factor must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = dataset.examples.clone();
    let mut next = examples.iter().map(|e| e.id.max(e.weight_slot) + 1).max().unwrap_or(0);
    for _ in 1..factor {
        for e in &dataset.examples {
            let text = e
                .text
                .iter()
                .map(|&b| {
                    if rng.random_bool(AUGMENT_RATE) {
                        loop {
                            let c = rng.random_range(0x20u8..=0x7e);
                            if c != b {
                                break c;
                            }
                        }
                    } else {
                        b
                    }
                })
                .collect();
            examples.push(Example { id: next, text, label: e.label, weight_slot: next });
            next += 1;
        }
    }
    Dataset::new(examples, dataset.num_classes, dataset.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize(b"AB", 4), (vec![66, 67, 0, 0], vec![true, true, false, false]));
        assert_eq!(tokenize(b"", 3), (vec![0; 3], vec![false; 3]));
        let long = vec![b'q'; 100];
        let (ids, mask) = tokenize(&long, 32);
        assert_eq!(ids, vec![b'q' as usize + 1; 32]);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        for kind in [TaskKind::ParityOfMarker, TaskKind::KeywordVsKeyword, TaskKind::MajorityByte] {
            let spec = TaskSpec::new(kind, 200, 3, 5, 0.0);
            let a = make_synthetic_task(&spec, Split::Train).unwrap();
            assert_eq!(a, make_synthetic_task(&spec, Split::Train).unwrap());
            assert!(a.examples.iter().all(|e| e.label < 3 && (8..=24).contains(&e.text.len())));
            // noiseless: equal texts always carry equal labels
            let mut seen = std::collections::HashMap::new();
            for e in &a.examples {
                assert_eq!(*seen.entry(e.text.clone()).or_insert(e.label), e.label);
            }
        }
    }

    #[test]
    fn flip_count_is_exact() {
        let clean = make_synthetic_task(&TaskSpec::new(TaskKind::MajorityByte, 10_000, 2, 3, 0.0), Split::Train).unwrap();
        let noisy = make_synthetic_task(&TaskSpec::new(TaskKind::MajorityByte, 10_000, 2, 3, 0.1), Split::Train).unwrap();
        let flipped = clean.examples.iter().zip(&noisy.examples).filter(|(a, b)| a.label != b.label).count();
        assert_eq!(flipped, 1000);
    }

    #[test]
    fn invalid_task_params() {
        assert!(make_synthetic_task(&TaskSpec::new(TaskKind::MajorityByte, 5, 2, 0, 0.0), Split::Train).is_err());
        assert!(make_synthetic_task(&TaskSpec::new(TaskKind::MajorityByte, 50, 2, 0, 0.5), Split::Train).is_err());
    }

    #[test]
    fn augment_counts() {
        let d = make_synthetic_task(&TaskSpec::new(TaskKind::KeywordVsKeyword, 10, 2, 1, 0.0), Split::Train).unwrap();
        assert_eq!(augment(&d, 1, 0).unwrap(), d);
        let a = augment(&d, 3, 0).unwrap();
        assert_eq!(a.len(), 30);
        let ids: std::collections::BTreeSet<_> = a.examples.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), 30);
        assert!(augment(&d, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(text in proptest::collection::vec(any::<u8>(), 0..40)) {
            let (ids, _) = tokenize(&text, 40);
            prop_assert_eq!(detokenize(&ids), text.clone());
            prop_assert_eq!(tokenize(&detokenize(&ids), 40).0, ids);
        }
    }
}
