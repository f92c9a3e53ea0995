use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{QuantKind, QuantSpec};

/// Byte-level vocabulary: 256 byte values shifted by one, plus the pad id 0.
pub const BYTE_VOCAB: usize = 257;

/// Quantization rule per parameter group.
///
/// Position embeddings, layer-norm parameters, biases and the classifier
/// head are always full precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantMap {
    pub word_embedding: QuantSpec,
    pub attention: QuantSpec,
    pub ffn: QuantSpec,
    /// Applied to the inputs of every matmul inside the encoder layers.
    pub activations: QuantSpec,
}

impl QuantMap {
    pub fn full_precision() -> Self {
        let fp = QuantSpec::full_precision();
        Self { word_embedding: fp, attention: fp, ffn: fp, activations: fp }
    }

    /// Weights, embeddings and activations at 1-1-4 bits.
    pub fn binary() -> Self {
        let w = QuantSpec::new(QuantKind::Binary);
        Self { word_embedding: w, attention: w, ffn: w, activations: QuantSpec::new(QuantKind::Uniform4) }
    }

    /// Ternary weights and embeddings with 4-bit activations.
    pub fn ternary() -> Self {
        let w = QuantSpec::new(QuantKind::Ternary);
        Self { word_embedding: w, attention: w, ffn: w, activations: QuantSpec::new(QuantKind::Uniform4) }
    }

    /// `W-E-A` bit label, e.g. `1-1-4`.
    pub fn label(&self) -> String {
        let attn = self.attention.kind.bits();
        let ffn = self.ffn.kind.bits();
        let w = if attn == ffn { attn.to_string() } else { format!("{attn}/{ffn}") };
        format!("{w}-{}-{}", self.word_embedding.kind.bits(), self.activations.kind.bits())
    }

    fn validate(&self, errs: &mut Vec<String>) {
        for (name, spec) in [
            ("word_embedding", self.word_embedding),
            ("attention", self.attention),
            ("ffn", self.ffn),
            ("activations", self.activations),
        ] {
            if let Err(e) = spec.validate() {
                errs.push(format!("quant.{name}: {e}"));
            }
        }
        if !matches!(self.activations.kind, QuantKind::FullPrecision | QuantKind::Uniform4) {
            errs.push(format!(
                "quant.activations must be full_precision or uniform4, got {:?}",
                self.activations.kind
            ));
        }
        for (name, spec) in [("word_embedding", self.word_embedding), ("attention", self.attention), ("ffn", self.ffn)] {
            if spec.kind == QuantKind::Uniform4 {
                errs.push(format!("quant.{name}: uniform4 is an activation quantizer"));
            }
        }
    }
}

impl Default for QuantMap {
    fn default() -> Self {
        Self::full_precision()
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub quant: QuantMap,
    /// Parallel binary branches per quantized weight; 2 after a ternary
    /// weight split.
    #[serde(default = "one")]
    pub weight_branches: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small full-precision encoder over the byte vocabulary.
    pub fn tiny(num_classes: usize, seed: u64) -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            max_seq_len: 32,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            num_classes,
            quant: QuantMap::full_precision(),
            weight_branches: 1,
            seed,
        }
    }

    /// BERT-base geometry, used for cost accounting.
    pub fn bert_base(quant: QuantMap) -> Self {
        Self {
            vocab_size: 30522,
            max_seq_len: 512,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            num_classes: 2,
            quant,
            weight_branches: 1,
            seed: 0,
        }
    }

    pub fn with_quant(mut self, quant: QuantMap) -> Self {
        self.quant = quant;
        self
    }

    /// Hidden and feed-forward widths halved, everything else unchanged.
    pub fn half_size(&self) -> Self {
        Self { hidden_dim: self.hidden_dim / 2, ffn_dim: self.ffn_dim / 2, ..self.clone() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("weight_branches", self.weight_branches),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.num_layers < 1 {
            errs.push("num_layers must be >= 1".into());
        }
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_heads > 0 && !self.hidden_dim.is_multiple_of(self.num_heads) {
            errs.push(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        self.quant.validate(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Closed-form parameter count of the encoder this config describes.
    pub fn param_count(&self) -> usize {
        let (v, s, h, k, l, b) = (
            self.vocab_size,
            self.max_seq_len,
            self.hidden_dim,
            self.num_classes,
            self.num_layers,
            self.weight_branches,
        );
        let embeddings = v * h * b + s * h + 2 * h;
        embeddings + l * self.layer_param_count() + h * k + k
    }

    /// Parameters of one encoder layer.
    pub fn layer_param_count(&self) -> usize {
        let (h, f, b) = (self.hidden_dim, self.ffn_dim, self.weight_branches);
        let attention = 4 * (h * h * b + h) + 2 * h;
        let ffn = h * f * b + f + f * h * b + h + 2 * h;
        attention + ffn
    }
}
