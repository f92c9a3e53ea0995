//! Closed-form model size and FLOPs of an encoder configuration.
//!
//! A quantized matmul is charged `2 * MACs * bits_w * bits_a / 64` FLOPs
//! (a 64-lane bitwise unit retires 64 one-bit MACs per full-precision
//! MAC-equivalent); a matmul with a 32-bit operand is charged `2 * MACs`.
//! Elementwise work (softmax, layer norm, GELU, residual and bias adds) is
//! counted at full precision.

use serde::{Deserialize, Serialize};

use crate::model::{quant_group, EncoderConfig};

/// Bytes per mebibyte.
pub const MIB: f64 = 1024.0 * 1024.0;

const SOFTMAX_OPS: u64 = 5;
const LAYER_NORM_OPS: u64 = 8;
const GELU_OPS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub bits_w: u32,
    pub bits_a: u32,
    pub macs: u64,
    pub effective_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEntry {
    pub name: String,
    pub bits: u32,
    pub count: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub seq_len: usize,
    pub ensemble_size: usize,
    /// One member.
    pub model_size_bytes: u64,
    pub model_flops: f64,
    /// All members.
    pub model_size_bytes_total: u64,
    pub flops_total: f64,
    /// Per-member FLOPs when members run in parallel (`flops_total / N`).
    pub flops_parallel: f64,
    pub breakdown: Vec<LayerCost>,
    pub size_breakdown: Vec<SizeEntry>,
}

impl CostReport {
    pub fn size_mib(&self) -> f64 {
        self.model_size_bytes_total as f64 / MIB
    }

    pub fn gflops_total(&self) -> f64 {
        self.flops_total / 1e9
    }

    pub fn gflops_parallel(&self) -> f64 {
        self.flops_parallel / 1e9
    }
}

pub fn cost_factor(bits_w: u32, bits_a: u32) -> f64 {
    if bits_w <= 8 && bits_a <= 8 {
        (bits_w * bits_a) as f64 / 64.0
    } else {
        1.0
    }
}

fn matmul(name: String, bits_w: u32, bits_a: u32, macs: u64) -> LayerCost {
    LayerCost { name, bits_w, bits_a, macs, effective_flops: 2.0 * macs as f64 * cost_factor(bits_w, bits_a) }
}

fn elementwise(name: String, ops: u64) -> LayerCost {
    LayerCost { name, bits_w: 32, bits_a: 32, macs: 0, effective_flops: ops as f64 }
}

/// Size and FLOPs of `config` at sequence length `seq_len`, for an ensemble
/// of `ensemble_size` identical members.
pub fn flops_model_size(config: &EncoderConfig, ensemble_size: usize, seq_len: usize) -> CostReport {
    let q = &config.quant;
    let (s, h, f, nh, k) = (
        seq_len as u64,
        config.hidden_dim as u64,
        config.ffn_dim as u64,
        config.num_heads as u64,
        config.num_classes as u64,
    );
    let br = config.weight_branches as u64;
    let ba = q.activations.kind.bits();
    let (bw_attn, bw_ffn) = (q.attention.kind.bits(), q.ffn.kind.bits());

    let mut flops = Vec::new();
    flops.push(elementwise("embeddings.add_ln".into(), s * h * (1 + LAYER_NORM_OPS)));
    for l in 0..config.num_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        flops.push(matmul(p("attn.qkv"), bw_attn, ba, 3 * br * s * h * h));
        flops.push(matmul(p("attn.scores"), ba, ba, s * s * h));
        flops.push(matmul(p("attn.context"), ba, ba, s * s * h));
        flops.push(matmul(p("attn.output"), bw_attn, ba, br * s * h * h));
        flops.push(matmul(p("ffn.up"), bw_ffn, ba, br * s * h * f));
        flops.push(matmul(p("ffn.down"), bw_ffn, ba, br * s * f * h));
        let softmax = nh * s * s * (SOFTMAX_OPS + 1);
        let ln = 2 * s * h * LAYER_NORM_OPS;
        let adds = 2 * s * h + 4 * s * h + s * f + s * h;
        flops.push(elementwise(p("elementwise"), softmax + ln + adds + s * f * GELU_OPS));
    }
    flops.push(elementwise("pool".into(), s * h));
    flops.push(matmul("head".into(), 32, 32, h * k));

    let mut sizes: Vec<SizeEntry> = Vec::new();
    let layout = [
        ("embeddings.word".to_string(), (config.vocab_size * config.hidden_dim) as u64),
        ("embeddings.position".to_string(), (config.max_seq_len * config.hidden_dim) as u64),
        ("attn.weight".to_string(), config.num_layers as u64 * 4 * h * h),
        ("ffn.weight".to_string(), config.num_layers as u64 * 2 * h * f),
        ("embeddings.ln".to_string(), 2 * h),
        ("layers.bias_ln".to_string(), config.num_layers as u64 * (4 * h + 4 * h + f + h)),
        ("head".to_string(), h * k + k),
    ];
    for (name, count) in layout {
        let spec = match name.as_str() {
            "embeddings.word" => quant_group(q, "embeddings.word.0"),
            "attn.weight" => quant_group(q, "layers.0.attn.query.weight.0"),
            "ffn.weight" => quant_group(q, "layers.0.ffn.up.weight.0"),
            _ => None,
        };
        let (bits, count) = match spec {
            Some(spec) => (spec.kind.bits(), count * br),
            None => (32, count),
        };
        sizes.push(SizeEntry { name, bits, count, bytes: (count * bits as u64).div_ceil(8) });
    }

    let model_size_bytes: u64 = sizes.iter().map(|e| e.bytes).sum();
    let model_flops: f64 = flops.iter().map(|c| c.effective_flops).sum();
    let n = ensemble_size.max(1);
    CostReport {
        label: q.label(),
        seq_len,
        ensemble_size: n,
        model_size_bytes,
        model_flops,
        model_size_bytes_total: model_size_bytes * n as u64,
        flops_total: model_flops * n as f64,
        flops_parallel: model_flops,
        breakdown: flops,
        size_breakdown: sizes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuantMap;

    #[test]
    fn cost_factors() {
        assert_eq!(cost_factor(1, 4), 1.0 / 16.0);
        assert_eq!(cost_factor(4, 4), 0.25);
        assert_eq!(cost_factor(32, 32), 1.0);
        assert_eq!(cost_factor(1, 32), 1.0);
    }

    #[test]
    fn doubling_members_doubles_totals() {
        let cfg = EncoderConfig::bert_base(QuantMap::binary());
        let one = flops_model_size(&cfg, 1, 128);
        let two = flops_model_size(&cfg, 2, 128);
        assert_eq!(two.model_size_bytes_total, 2 * one.model_size_bytes_total);
        assert_eq!(two.flops_total, 2.0 * one.flops_total);
        assert_eq!(two.flops_parallel, one.flops_total);
        assert_eq!(one.model_flops, one.breakdown.iter().map(|c| c.effective_flops).sum::<f64>());
    }
}
