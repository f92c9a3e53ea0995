//! Tiny post-layer-norm transformer encoder classifier.
//!
//! Weights that belong to a quantized group are stored as latent
//! full-precision tensors and quantized on every forward pass. A group with
//! `weight_branches = 2` holds two latent tensors whose quantized views are
//! summed before use, which is the parallel-sum structure produced by a
//! ternary weight split.

pub mod checkpoint;
mod config;

pub use config::{EncoderConfig, QuantMap, BYTE_VOCAB};

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::quant::{quantize_activation, quantize_on_tape, QuantKind, QuantSpec, QuantizedParam, RowGroups};
use crate::tensor::{Float, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;
const MASK_BIAS: f64 = -1e9;

/// A padded batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    /// Row-major `[batch, seq]` token ids.
    pub ids: Vec<usize>,
    /// Row-major `[batch, seq]`; `true` marks a real token.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(ids: Vec<Vec<usize>>, mask: Vec<Vec<bool>>) -> Result<Self> {
        let batch = ids.len();
        let seq = ids.first().map_or(0, Vec::len);
        if mask.len() != batch
            || ids.iter().any(|r| r.len() != seq)
            || mask.iter().any(|r| r.len() != seq)
        {
            return Err(Error::shape("batch", "token ids and mask must be equal-shaped rectangles"));
        }
        Ok(Self { batch, seq, ids: ids.concat(), mask: mask.concat() })
    }

    pub fn valid_counts(&self) -> Vec<usize> {
        self.mask.chunks(self.seq.max(1)).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }
}

/// Intermediate quantities of one forward pass, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[batch, classes]`
    pub logits: Tensor,
    /// `num_layers + 1` tensors of shape `[batch, seq, hidden]`; entry 0 is
    /// the embedding output.
    pub hidden_states: Vec<Tensor>,
    /// `num_layers` tensors of shape `[batch, heads, seq, seq]`.
    pub attentions: Vec<Tensor>,
}

/// The same quantities as tape variables. Hidden states are `[batch*seq,
/// hidden]` and attentions `[batch*heads, seq, seq]`.
#[derive(Clone, Debug)]
pub struct TapeTrace {
    pub logits: Var,
    pub hidden_states: Vec<Var>,
    pub attentions: Vec<Var>,
}

impl TapeTrace {
    pub fn values<T: Float>(&self, tape: &Tape<T>, batch: &Batch, cfg: &EncoderConfig) -> Result<ForwardTrace> {
        let (b, s, h, n) = (batch.batch, batch.seq, cfg.hidden_dim, cfg.num_heads);
        let cast = |v: Var| -> Tensor { tape.value(v).cast() };
        Ok(ForwardTrace {
            logits: cast(self.logits),
            hidden_states: self
                .hidden_states
                .iter()
                .map(|&v| cast(v).reshape(&[b, s, h]))
                .collect::<Result<_>>()?,
            attentions: self
                .attentions
                .iter()
                .map(|&v| cast(v).reshape(&[b, n, s, s]))
                .collect::<Result<_>>()?,
        })
    }
}

/// Tape handles of the parameters used by one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(pub BTreeMap<String, Var>);

/// Gaussian perturbation of the embedding output.
pub struct EmbeddingNoise<'a> {
    pub variance: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn branch_name(base: &str, branch: usize) -> String {
    format!("{base}.{branch}")
}

/// `(name, shape, init)` of every parameter, in a fixed order.
fn param_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, s, h, f, k) = (cfg.vocab_size, cfg.max_seq_len, cfg.hidden_dim, cfg.ffn_dim, cfg.num_classes);
    let mut out = Vec::new();
    let weight = |out: &mut Vec<_>, base: &str, shape: Vec<usize>| {
        for b in 0..cfg.weight_branches {
            out.push((branch_name(base, b), shape.clone(), Init::Normal));
        }
    };
    weight(&mut out, "embeddings.word", vec![v, h]);
    out.push(("embeddings.position".into(), vec![s, h], Init::Normal));
    out.push(("embeddings.ln.gamma".into(), vec![h], Init::Ones));
    out.push(("embeddings.ln.beta".into(), vec![h], Init::Zeros));
    for l in 0..cfg.num_layers {
        for proj in ["query", "key", "value", "output"] {
            weight(&mut out, &format!("layers.{l}.attn.{proj}.weight"), vec![h, h]);
            out.push((format!("layers.{l}.attn.{proj}.bias"), vec![h], Init::Zeros));
        }
        out.push((format!("layers.{l}.attn.ln.gamma"), vec![h], Init::Ones));
        out.push((format!("layers.{l}.attn.ln.beta"), vec![h], Init::Zeros));
        weight(&mut out, &format!("layers.{l}.ffn.up.weight"), vec![h, f]);
        out.push((format!("layers.{l}.ffn.up.bias"), vec![f], Init::Zeros));
        weight(&mut out, &format!("layers.{l}.ffn.down.weight"), vec![f, h]);
        out.push((format!("layers.{l}.ffn.down.bias"), vec![h], Init::Zeros));
        out.push((format!("layers.{l}.ffn.ln.gamma"), vec![h], Init::Ones));
        out.push((format!("layers.{l}.ffn.ln.beta"), vec![h], Init::Zeros));
    }
    out.push(("head.weight".into(), vec![h, k], Init::Normal));
    out.push(("head.bias".into(), vec![k], Init::Zeros));
    out
}

/// Quantization group of a parameter name, if it is quantized at all.
pub fn quant_group<'a>(quant: &'a QuantMap, name: &str) -> Option<&'a QuantSpec> {
    if name.starts_with("embeddings.word") {
        Some(&quant.word_embedding)
    } else if name.contains(".attn.") && name.contains(".weight") {
        Some(&quant.attention)
    } else if name.contains(".ffn.") && name.contains(".weight") {
        Some(&quant.ffn)
    } else {
        None
    }
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f32 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return (z * std) as f32;
        }
    }
}

/// Per-forward context: batch geometry and the tape handles of parameters.
struct Ctx<'m> {
    model: &'m EncoderModel,
    vars: ParamVars,
    trainable: bool,
}

impl<'m> Ctx<'m> {
    fn var<T: Float>(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.0.get(name) {
            return Ok(v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?
            .cast::<T>();
        let v = if self.trainable { tape.param(t) } else { tape.constant(t) };
        self.vars.0.insert(name.to_string(), v);
        Ok(v)
    }

    /// Effective (quantized, branch-summed) weight of a possibly-split group.
    fn weight<T: Float>(&mut self, tape: &mut Tape<T>, base: &str) -> Result<Var> {
        let spec = *quant_group(&self.model.config.quant, base).unwrap_or(&QuantSpec::full_precision());
        let mut total: Option<Var> = None;
        for b in 0..self.model.config.weight_branches {
            let latent = self.var(tape, &branch_name(base, b))?;
            let q = quantize_on_tape(tape, latent, &spec)?;
            total = Some(match total {
                None => q,
                Some(t) => tape.add(t, q)?,
            });
        }
        total.ok_or_else(|| Error::Invalid("weight_branches must be positive".into()))
    }
}

impl EncoderModel {
    /// Fresh model with seeded initialization.
    pub fn build(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Normal => (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names of the quantized weight groups (without branch suffix).
    pub fn weight_groups(&self) -> Vec<String> {
        param_layout(&self.config)
            .into_iter()
            .filter_map(|(name, _, _)| name.strip_suffix(".0").map(str::to_string))
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.batch == 0 || batch.seq == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if batch.seq > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        let vocab = self.config.vocab_size;
        if let Some(pos) = batch.ids.iter().position(|&id| id >= vocab) {
            return Err(Error::TokenOutOfRange {
                row: pos / batch.seq,
                pos: pos % batch.seq,
                id: batch.ids[pos],
                vocab,
            });
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. With `trainable`, parameters are
    /// gradient-tracked leaves; otherwise constants.
    pub fn forward_on_tape<T: Float>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        trainable: bool,
        noise: Option<EmbeddingNoise<'_>>,
    ) -> Result<(TapeTrace, ParamVars)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, s, h, nh) = (batch.batch, batch.seq, cfg.hidden_dim, cfg.num_heads);
        let d = cfg.head_dim();
        let quant_acts = cfg.quant.activations.kind == QuantKind::Uniform4;
        let mut ctx = Ctx { model: self, vars: ParamVars::default(), trainable };

        let token_rows = RowGroups { groups: b, rows_per_group: s, valid: batch.mask.clone() };
        let head_rows = RowGroups {
            groups: b,
            rows_per_group: nh * s,
            valid: (0..b)
                .flat_map(|bi| (0..nh).flat_map(move |_| (0..s).map(move |si| (bi, si))))
                .map(|(bi, si)| batch.mask[bi * s + si])
                .collect(),
        };
        let act = |tape: &mut Tape<T>, x: Var, rows: &RowGroups| -> Result<Var> {
            if quant_acts {
                quantize_activation(tape, x, rows)
            } else {
                Ok(x)
            }
        };

        // embeddings
        let word = ctx.weight(tape, "embeddings.word")?;
        let tok = tape.embedding(word, &batch.ids)?;
        let pos_table = ctx.var(tape, "embeddings.position")?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let summed = tape.add(tok, pos)?;
        let (g, be) = (ctx.var(tape, "embeddings.ln.gamma")?, ctx.var(tape, "embeddings.ln.beta")?);
        let mut x = tape.layer_norm(summed, g, be)?;
        if let Some(noise) = noise {
            if noise.variance < 0.0 || !noise.variance.is_finite() {
                return Err(Error::Invalid(format!("noise variance must be >= 0, got {}", noise.variance)));
            }
            if noise.variance > 0.0 {
                let normal = Normal::new(0.0, noise.variance.sqrt()).expect("finite std");
                let data = (0..b * s * h).map(|_| T::lit(normal.sample(noise.rng))).collect();
                let n = tape.constant(Tensor::new(vec![b * s, h], data)?);
                x = tape.add(x, n)?;
            }
        }

        let mut mask_bias = Vec::with_capacity(b * nh * s * s);
        for bi in 0..b {
            for _ in 0..nh {
                for _ in 0..s {
                    for sj in 0..s {
                        mask_bias.push(if batch.mask[bi * s + sj] { T::zero() } else { T::lit(MASK_BIAS) });
                    }
                }
            }
        }
        let mask_bias = tape.constant(Tensor::new(vec![b * nh, s, s], mask_bias)?);
        let inv_sqrt_d = T::lit(1.0 / (d as f64).sqrt());

        let mut hidden_states = vec![x];
        let mut attentions = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let xq = act(tape, x, &token_rows)?;
            let proj = |tape: &mut Tape<T>, ctx: &mut Ctx, name: &str, input: Var| -> Result<Var> {
                let w = ctx.weight(tape, &p(&format!("attn.{name}.weight")))?;
                let bias = ctx.var(tape, &p(&format!("attn.{name}.bias")))?;
                let y = tape.matmul(input, w)?;
                tape.add_row(y, bias)
            };
            let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
                let v = tape.reshape(v, &[b, s, nh, d])?;
                let v = tape.permute(v, &[0, 2, 1, 3])?;
                tape.reshape(v, &[b * nh, s, d])
            };
            let q = proj(tape, &mut ctx, "query", xq)?;
            let k = proj(tape, &mut ctx, "key", xq)?;
            let v = proj(tape, &mut ctx, "value", xq)?;
            let q = split(tape, q)?;
            let k = split(tape, k)?;
            let v = split(tape, v)?;
            let q = act(tape, q, &head_rows)?;
            let k = act(tape, k, &head_rows)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let scores = tape.add(scores, mask_bias)?;
            let probs = tape.softmax(scores);
            attentions.push(probs);
            let pq = act(tape, probs, &head_rows)?;
            let vq = act(tape, v, &head_rows)?;
            let ctx_heads = tape.batch_matmul(pq, vq, false)?;
            let merged = tape.reshape(ctx_heads, &[b, nh, s, d])?;
            let merged = tape.permute(merged, &[0, 2, 1, 3])?;
            let merged = tape.reshape(merged, &[b * s, h])?;
            let merged = act(tape, merged, &token_rows)?;
            let attn_out = proj(tape, &mut ctx, "output", merged)?;
            let res = tape.add(x, attn_out)?;
            let (g, be) = (ctx.var(tape, &p("attn.ln.gamma"))?, ctx.var(tape, &p("attn.ln.beta"))?);
            let x1 = tape.layer_norm(res, g, be)?;

            let x1q = act(tape, x1, &token_rows)?;
            let w_up = ctx.weight(tape, &p("ffn.up.weight"))?;
            let b_up = ctx.var(tape, &p("ffn.up.bias"))?;
            let up = tape.matmul(x1q, w_up)?;
            let up = tape.add_row(up, b_up)?;
            let up = tape.gelu(up);
            let upq = act(tape, up, &token_rows)?;
            let w_down = ctx.weight(tape, &p("ffn.down.weight"))?;
            let b_down = ctx.var(tape, &p("ffn.down.bias"))?;
            let down = tape.matmul(upq, w_down)?;
            let down = tape.add_row(down, b_down)?;
            let res = tape.add(x1, down)?;
            let (g, be) = (ctx.var(tape, &p("ffn.ln.gamma"))?, ctx.var(tape, &p("ffn.ln.beta"))?);
            x = tape.layer_norm(res, g, be)?;
            hidden_states.push(x);
        }

        // masked mean-pool, then full-precision linear head
        let mut pool = vec![T::zero(); b * b * s];
        for (bi, count) in batch.valid_counts().into_iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = T::lit(1.0 / count as f64);
            for si in 0..s {
                if batch.mask[bi * s + si] {
                    pool[bi * b * s + bi * s + si] = w;
                }
            }
        }
        let pool = tape.constant(Tensor::new(vec![b, b * s], pool)?);
        let pooled = tape.matmul(pool, x)?;
        let hw = ctx.var(tape, "head.weight")?;
        let hb = ctx.var(tape, "head.bias")?;
        let logits = tape.matmul(pooled, hw)?;
        let logits = tape.add_row(logits, hb)?;
        Ok((TapeTrace { logits, hidden_states, attentions }, ctx.vars))
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardTrace> {
        let mut tape = Tape::<f32>::new();
        let (trace, _) = self.forward_on_tape(&mut tape, batch, false, None)?;
        trace.values(&tape, batch, &self.config)
    }

    /// Forward pass with i.i.d. Gaussian noise of the given variance added to
    /// the embedding output.
    pub fn noise_injected_forward(&self, batch: &Batch, variance: f64, rng: &mut dyn RngCore) -> Result<ForwardTrace> {
        let mut tape = Tape::<f32>::new();
        let noise = EmbeddingNoise { variance, rng };
        let (trace, _) = self.forward_on_tape(&mut tape, batch, false, Some(noise))?;
        trace.values(&tape, batch, &self.config)
    }

    /// Logits only, `[batch, classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let (trace, _) = self.forward_on_tape(&mut tape, batch, false, None)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Splits every ternary weight group into two binary branches whose sum
    /// equals the ternary weight exactly. The result computes the same
    /// function as `self`.
    pub fn ternary_weight_split(&self) -> Result<Self> {
        let quant = self.config.quant;
        if self.config.weight_branches != 1 {
            return Err(Error::Invalid("model is already split".into()));
        }
        let groups = [quant.word_embedding, quant.attention, quant.ffn];
        if groups.iter().any(|g| g.kind != QuantKind::Ternary) {
            return Err(Error::Invalid(format!(
                "ternary weight split needs ternary weights, got {}",
                quant.label()
            )));
        }
        let binary = |s: QuantSpec| QuantSpec { kind: QuantKind::Binary, ..s };
        let config = EncoderConfig {
            quant: QuantMap {
                word_embedding: binary(quant.word_embedding),
                attention: binary(quant.attention),
                ffn: binary(quant.ffn),
                activations: quant.activations,
            },
            weight_branches: 2,
            ..self.config.clone()
        };
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            match (name.strip_suffix(".0"), quant_group(&quant, name)) {
                (Some(base), Some(spec)) => {
                    let (a, b) = crate::quant::ternary_weight_split(&QuantizedParam::new(t.clone(), *spec))?;
                    params.insert(branch_name(base, 0), a.latent);
                    params.insert(branch_name(base, 1), b.latent);
                }
                _ => {
                    params.insert(name.clone(), t.clone());
                }
            }
        }
        Self::from_parts(config, params)
    }

    /// The quantized (forward-time) view of every weight group's branches.
    pub fn quantized_weight(&self, name: &str) -> Option<Tensor> {
        let latent = self.params.get(name)?;
        let spec = quant_group(&self.config.quant, name).copied().unwrap_or_default();
        Some(crate::quant::quantize(latent, spec.kind).values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_of(rows: &[&[usize]], seq: usize) -> Batch {
        let ids = rows.iter().map(|r| (0..seq).map(|i| r.get(i).copied().unwrap_or(0)).collect()).collect();
        let mask = rows.iter().map(|r| (0..seq).map(|i| i < r.len()).collect()).collect();
        Batch::new(ids, mask).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = EncoderModel::build(EncoderConfig::tiny(2, 11)).unwrap();
        let b = EncoderModel::build(EncoderConfig::tiny(2, 11)).unwrap();
        assert_eq!(a, b);
        let c = EncoderModel::build(EncoderConfig::tiny(2, 12)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = EncoderConfig {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 256,
            vocab_size: 256,
            num_classes: 2,
            ..EncoderConfig::tiny(2, 0)
        };
        // embeddings: 256*64 + 32*64 + 2*64; per layer: 4*(64*64+64) + 2*64 + 64*256 + 256 + 256*64 + 64 + 2*64
        let layer = 4 * (64 * 64 + 64) + 128 + 64 * 256 + 256 + 256 * 64 + 64 + 128;
        let expected = 256 * 64 + 32 * 64 + 128 + 2 * layer + 64 * 2 + 2;
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(EncoderModel::build(cfg).unwrap().param_count(), expected);
    }

    #[test]
    fn single_token_attention_is_one() {
        let cfg = EncoderConfig { num_layers: 1, ..EncoderConfig::tiny(2, 3) };
        let model = EncoderModel::build(cfg).unwrap();
        let trace = model.forward(&batch_of(&[&[66]], 1)).unwrap();
        assert_eq!(trace.attentions.len(), 1);
        assert_eq!(trace.hidden_states.len(), 2);
        assert_eq!(trace.attentions[0].data(), &[1.0, 1.0]);
        assert!(trace.logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let model = EncoderModel::build(EncoderConfig::tiny(2, 3)).unwrap();
        let err = model.forward(&batch_of(&[&[1, 2], &[3, 999]], 2)).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { row: 1, pos: 1, id: 999, .. }), "{err}");
    }

    #[test]
    fn negative_noise_variance_is_rejected() {
        let model = EncoderModel::build(EncoderConfig::tiny(2, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.noise_injected_forward(&batch_of(&[&[5]], 1), -0.1, &mut rng).is_err());
    }

    #[test]
    fn binary_weights_take_two_values() {
        let model = EncoderModel::build(EncoderConfig::tiny(2, 5).with_quant(QuantMap::binary())).unwrap();
        for name in model.params.keys().filter(|n| n.contains(".weight.")) {
            let q = model.quantized_weight(name).unwrap();
            let mut distinct: Vec<f32> = q.data().to_vec();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            assert_eq!(distinct.len(), 2, "{name}");
            assert_eq!(distinct[0], -distinct[1]);
        }
    }

    #[test]
    fn ternary_split_preserves_logits() {
        let model = EncoderModel::build(EncoderConfig::tiny(2, 4).with_quant(QuantMap::ternary())).unwrap();
        let split = model.ternary_weight_split().unwrap();
        assert_eq!(split.config.weight_branches, 2);
        let batch = batch_of(&[&[3, 9, 27], &[81, 243]], 3);
        assert_eq!(model.logits(&batch).unwrap(), split.logits(&batch).unwrap());
        assert!(EncoderModel::build(EncoderConfig::tiny(2, 4)).unwrap().ternary_weight_split().is_err());
    }

    #[test]
    fn padding_invariance() {
        for quant in [QuantMap::full_precision(), QuantMap::binary()] {
            let model = EncoderModel::build(EncoderConfig::tiny(3, 9).with_quant(quant)).unwrap();
            let rows: [&[usize]; 2] = [&[10, 20, 30], &[40, 50]];
            let short = model.logits(&batch_of(&rows, 3)).unwrap();
            let long = model.logits(&batch_of(&rows, 8)).unwrap();
            assert!(short.max_abs_diff(&long).unwrap() < 1e-5, "{quant:?}");
        }
    }
}
