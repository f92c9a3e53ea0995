//! Weight and activation quantizers, their straight-through gradient rules,
//! and ternary weight splitting.
//!
//! Scales are recomputed from the latent tensor on every call; nothing is
//! cached between forward passes. Reductions run in `f64` and are rounded
//! once, which makes ternary/binary scale relations (`beta = alpha / 2`)
//! exact in the element type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Number of positive levels of the symmetric 4-bit lattice (`-7..=7`).
pub const UNIFORM4_LEVELS: f64 = 7.0;

/// Ternarization threshold as a fraction of the mean absolute latent weight.
pub const TERNARY_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    FullPrecision,
    Binary,
    Ternary,
    Uniform4,
}

impl QuantKind {
    /// Storage bits per element.
    pub fn bits(self) -> u32 {
        match self {
            QuantKind::FullPrecision => 32,
            QuantKind::Binary => 1,
            QuantKind::Ternary => 2,
            QuantKind::Uniform4 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub kind: QuantKind,
    #[serde(default)]
    pub granularity: Granularity,
    /// Latent magnitude above which the straight-through gradient is zeroed.
    #[serde(default = "default_ste_clip")]
    pub ste_clip: f32,
}

fn default_ste_clip() -> f32 {
    1.0
}

impl QuantSpec {
    pub fn new(kind: QuantKind) -> Self {
        Self { kind, granularity: Granularity::PerTensor, ste_clip: default_ste_clip() }
    }

    pub fn full_precision() -> Self {
        Self::new(QuantKind::FullPrecision)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ste_clip.is_nan() || self.ste_clip <= 0.0 {
            return Err(Error::Invalid(format!("ste_clip must be > 0, got {}", self.ste_clip)));
        }
        Ok(())
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self::full_precision()
    }
}

/// Output of a quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T = f32> {
    pub values: Tensor<T>,
    pub scale: T,
    /// Set when the input carried no usable magnitude (all-zero latent, or no
    /// entry above the ternary threshold).
    pub degenerate: bool,
}

fn abs_mean<T: Float>(xs: impl Iterator<Item = T>) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for x in xs {
        sum += x.to_f64().unwrap().abs();
        n += 1;
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

/// `scale = mean(|w|)`, values `scale * sign(w)` with `sign(0) = +1`.
pub fn binarize<T: Float>(latent: &Tensor<T>) -> Quantized<T> {
    let (mean, _) = abs_mean(latent.data().iter().copied());
    let scale = T::lit(mean);
    if scale == T::zero() {
        return Quantized { values: Tensor::zeros(latent.shape()), scale, degenerate: true };
    }
    let values = latent.map(|w| if w < T::zero() { -scale } else { scale });
    Quantized { values, scale, degenerate: false }
}

/// Threshold `0.7 * mean(|w|)`; survivors map to `±mean(|w| over survivors)`.
pub fn ternarize<T: Float>(latent: &Tensor<T>) -> Quantized<T> {
    let (mean, _) = abs_mean(latent.data().iter().copied());
    let threshold = TERNARY_THRESHOLD * mean;
    let keep = |w: T| w.to_f64().unwrap().abs() > threshold;
    let (survivor_mean, survivors) = abs_mean(latent.data().iter().copied().filter(|&w| keep(w)));
    if survivors == 0 || survivor_mean == 0.0 {
        return Quantized { values: Tensor::zeros(latent.shape()), scale: T::zero(), degenerate: true };
    }
    let scale = T::lit(survivor_mean);
    let values = latent.map(|w| {
        if !keep(w) {
            T::zero()
        } else if w < T::zero() {
            -scale
        } else {
            scale
        }
    });
    Quantized { values, scale, degenerate: false }
}

fn uniform4_level(x: f64, max_abs: f64) -> f64 {
    (x * UNIFORM4_LEVELS / max_abs).round().clamp(-UNIFORM4_LEVELS, UNIFORM4_LEVELS)
}

/// Symmetric 15-level quantizer with `s = max(|x|) / 7`.
pub fn quantize_uniform4<T: Float>(x: &Tensor<T>) -> Quantized<T> {
    let max_abs = x.data().iter().map(|v| v.to_f64().unwrap().abs()).fold(0.0, f64::max);
    if max_abs == 0.0 {
        return Quantized { values: Tensor::zeros(x.shape()), scale: T::one(), degenerate: true };
    }
    let step = max_abs / UNIFORM4_LEVELS;
    let values = x.map(|v| T::lit(uniform4_level(v.to_f64().unwrap(), max_abs) * step));
    Quantized { values, scale: T::lit(step), degenerate: false }
}

pub fn quantize<T: Float>(x: &Tensor<T>, kind: QuantKind) -> Quantized<T> {
    match kind {
        QuantKind::FullPrecision => Quantized { values: x.clone(), scale: T::one(), degenerate: false },
        QuantKind::Binary => binarize(x),
        QuantKind::Ternary => ternarize(x),
        QuantKind::Uniform4 => quantize_uniform4(x),
    }
}

/// Straight-through pass mask: hard-tanh window `|w| <= ste_clip` for weight
/// quantizers, the clipping range `[-7s, 7s]` for the activation quantizer.
pub fn ste_mask<T: Float>(latent: &Tensor<T>, spec: &QuantSpec) -> Vec<bool> {
    match spec.kind {
        QuantKind::FullPrecision => vec![true; latent.numel()],
        QuantKind::Binary | QuantKind::Ternary => {
            let clip = f64::from(spec.ste_clip);
            latent.data().iter().map(|w| w.to_f64().unwrap().abs() <= clip).collect()
        }
        QuantKind::Uniform4 => {
            let range = quantize_uniform4(latent).scale.to_f64().unwrap() * UNIFORM4_LEVELS;
            latent.data().iter().map(|w| w.to_f64().unwrap().abs() <= range).collect()
        }
    }
}

pub fn ste_backward<T: Float>(upstream: &Tensor<T>, latent: &Tensor<T>, spec: &QuantSpec) -> Result<Tensor<T>> {
    if upstream.shape() != latent.shape() {
        return Err(Error::shape(
            "ste_backward",
            format!("upstream {:?} vs latent {:?}", upstream.shape(), latent.shape()),
        ));
    }
    let mask = ste_mask(latent, spec);
    let data = upstream
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, pass)| if pass { g } else { T::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Records the quantizer for `latent` on the tape with its STE rule attached.
pub fn quantize_on_tape<T: Float>(tape: &mut Tape<T>, latent: Var, spec: &QuantSpec) -> Result<Var> {
    if spec.kind == QuantKind::FullPrecision {
        return Ok(latent);
    }
    let value = tape.value(latent);
    let mask = ste_mask(value, spec);
    let q = quantize(value, spec.kind);
    tape.straight_through(latent, q.values, mask)
}

/// Row structure of an activation tensor for per-example 4-bit quantization.
///
/// The tensor is viewed as `groups` consecutive blocks of `rows_per_group`
/// rows. Each block (one example) gets its own scale, computed over its valid
/// rows only; invalid (padding) rows are quantized with that scale and
/// clipped.
#[derive(Clone, Debug)]
pub struct RowGroups {
    pub groups: usize,
    pub rows_per_group: usize,
    pub valid: Vec<bool>,
}

impl RowGroups {
    pub fn all_valid(groups: usize, rows_per_group: usize) -> Self {
        Self { groups, rows_per_group, valid: vec![true; groups * rows_per_group] }
    }
}

/// Per-example uniform 4-bit activation quantization recorded on the tape.
pub fn quantize_activation<T: Float>(tape: &mut Tape<T>, x: Var, rows: &RowGroups) -> Result<Var> {
    let xv = tape.value(x);
    let n_rows = rows.groups * rows.rows_per_group;
    if n_rows == 0 || !xv.numel().is_multiple_of(n_rows) || rows.valid.len() != n_rows {
        return Err(Error::shape(
            "quantize_activation",
            format!("{:?} with {} groups x {} rows", xv.shape(), rows.groups, rows.rows_per_group),
        ));
    }
    let cols = xv.numel() / n_rows;
    let block = rows.rows_per_group * cols;
    let mut out = vec![T::zero(); xv.numel()];
    let mut pass = vec![true; xv.numel()];
    for g in 0..rows.groups {
        let src = &xv.data()[g * block..(g + 1) * block];
        let valid = &rows.valid[g * rows.rows_per_group..(g + 1) * rows.rows_per_group];
        let max_abs = src
            .chunks(cols)
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .flat_map(|(r, _)| r.iter())
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max);
        if max_abs == 0.0 {
            // all-zero example: output stays zero, gradient passes
            continue;
        }
        let step = max_abs / UNIFORM4_LEVELS;
        for (i, &v) in src.iter().enumerate() {
            let v = v.to_f64().unwrap();
            out[g * block + i] = T::lit(uniform4_level(v, max_abs) * step);
            pass[g * block + i] = v.abs() <= max_abs;
        }
    }
    let forward = Tensor::new(xv.shape().to_vec(), out)?;
    tape.straight_through(x, forward, pass)
}

/// A latent full-precision tensor together with the rule that derives its
/// quantized view.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedParam {
    pub latent: Tensor,
    pub spec: QuantSpec,
}

impl QuantizedParam {
    pub fn new(latent: Tensor, spec: QuantSpec) -> Self {
        Self { latent, spec }
    }

    pub fn quantized(&self) -> Quantized {
        quantize(&self.latent, self.spec.kind)
    }
}

/// Splits a ternary parameter into two binary parameters whose quantized
/// views sum exactly to the ternary view.
///
/// `+a -> (+b, +b)`, `-a -> (-b, -b)`, `0 -> (+b, -b)` at odd flattened
/// indices and `(-b, +b)` at even ones, with `b = a / 2`. The latent of each
/// half is set to its assigned binary value, so both halves re-binarize to
/// exactly `±b`.
pub fn ternary_weight_split(param: &QuantizedParam) -> Result<(QuantizedParam, QuantizedParam)> {
    if param.spec.kind != QuantKind::Ternary {
        return Err(Error::Invalid(format!(
            "ternary weight split needs a ternary parameter, got {:?}",
            param.spec.kind
        )));
    }
    let q = ternarize(&param.latent);
    let half = q.scale / 2.0;
    let n = q.values.numel();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for (i, &t) in q.values.data().iter().enumerate() {
        let (x, y) = if t > 0.0 {
            (half, half)
        } else if t < 0.0 {
            (-half, -half)
        } else if i % 2 == 1 {
            (half, -half)
        } else {
            (-half, half)
        };
        a.push(x);
        b.push(y);
    }
    let spec = QuantSpec { kind: QuantKind::Binary, ..param.spec };
    let shape = param.latent.shape().to_vec();
    Ok((
        QuantizedParam::new(Tensor::new(shape.clone(), a)?, spec),
        QuantizedParam::new(Tensor::new(shape, b)?, spec),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn binarize_mean_abs_rule() {
        let q = binarize(&t(&[0.3, -0.7, 0.1, -0.5]));
        assert!((q.scale - 0.4).abs() < 1e-7);
        assert!(close(q.values.data(), &[0.4, -0.4, 0.4, -0.4], 1e-7));
    }

    #[test]
    fn binarize_constant_is_fixed_point() {
        let q = binarize(&t(&[0.25, 0.25, 0.25]));
        assert_eq!(q.values.data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn binarize_zero_is_degenerate() {
        let q = binarize(&t(&[0.0, 0.0]));
        assert!(q.degenerate);
        assert_eq!(q.scale, 0.0);
        assert!(q.values.data().iter().all(|v| *v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn binarize_sign_of_zero_is_positive() {
        let q = binarize(&t(&[0.0, -1.0, 1.0]));
        assert!(q.values.data()[0] > 0.0);
    }

    #[test]
    fn ternarize_hand_example() {
        let q = ternarize(&t(&[0.8, -0.1, 0.5, -0.9]));
        assert!((q.scale - 0.733_333_3).abs() < 1e-6);
        assert!(close(q.values.data(), &[0.733_333_3, 0.0, 0.733_333_3, -0.733_333_3], 1e-6));
    }

    #[test]
    fn ternarize_zero_input() {
        let q = ternarize(&t(&[0.0; 5]));
        assert!(q.degenerate);
        assert!(q.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform4_hand_example() {
        let q = quantize_uniform4(&t(&[-1.4, 0.2, 0.7]));
        assert!((q.scale - 0.2).abs() < 1e-7);
        assert!(close(q.values.data(), &[-1.4, 0.2, 0.8], 1e-6), "{:?}", q.values.data());
    }

    #[test]
    fn uniform4_zero_input() {
        let q = quantize_uniform4(&t(&[0.0, 0.0]));
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.values.data(), &[0.0, 0.0]);
    }

    #[test]
    fn ste_mask_rule() {
        let spec = QuantSpec::new(QuantKind::Binary);
        let g = ste_backward(&t(&[1.0, 1.0, 1.0]), &t(&[0.5, -2.0, 0.9]), &spec).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0]);
        let open = QuantSpec { ste_clip: f32::INFINITY, ..spec };
        let g = ste_backward(&t(&[1.0, 2.0, 3.0]), &t(&[0.5, -2.0, 90.0]), &open).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn split_hand_example() {
        // latent chosen so that ternarize gives [0.8, 0, -0.8]
        let p = QuantizedParam::new(t(&[0.8, 0.0, -0.8]), QuantSpec::new(QuantKind::Ternary));
        assert!(close(p.quantized().values.data(), &[0.8, 0.0, -0.8], 1e-7));
        let (a, b) = ternary_weight_split(&p).unwrap();
        assert!(close(a.quantized().values.data(), &[0.4, 0.4, -0.4], 1e-7));
        assert!(close(b.quantized().values.data(), &[0.4, -0.4, -0.4], 1e-7));
    }

    #[test]
    fn split_rejects_non_ternary() {
        let p = QuantizedParam::new(t(&[0.5, -0.5]), QuantSpec::new(QuantKind::Binary));
        assert!(ternary_weight_split(&p).is_err());
    }

    #[test]
    fn grouped_activation_ignores_padding_rows() {
        let mut tape = Tape::<f32>::new();
        // one group, two rows of two columns; second row is padding with a huge value
        let x = tape.param(Tensor::new(vec![2, 2], vec![0.7, -1.4, 50.0, 0.0]).unwrap());
        let rows = RowGroups { groups: 1, rows_per_group: 2, valid: vec![true, false] };
        let q = quantize_activation(&mut tape, x, &rows).unwrap();
        let v = tape.value(q).data().to_vec();
        assert!(close(&v[..2], &[0.8, -1.4], 1e-6), "{v:?}");
        assert!((v[2] - 1.4).abs() < 1e-6, "padding is clipped to the lattice");
        let loss = tape.sum(q);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn value_sets_respected(data in prop::collection::vec(-3.0f32..3.0, 1..64)) {
            let x = t(&data);
            let b = binarize(&x);
            prop_assert!(b.values.data().iter().all(|&v| v == b.scale || v == -b.scale));
            let tq = ternarize(&x);
            prop_assert!(tq.values.data().iter().all(|&v| v == tq.scale || v == -tq.scale || v == 0.0));
            let u = quantize_uniform4(&x);
            let s = f64::from(u.scale);
            for &v in u.values.data() {
                let level = f64::from(v) / s;
                prop_assert!((level - level.round()).abs() < 1e-4 && level.abs() <= 7.0 + 1e-4);
            }
        }

        #[test]
        fn uniform4_is_idempotent(data in prop::collection::vec(-5.0f32..5.0, 1..64)) {
            let once = quantize_uniform4(&t(&data)).values;
            let twice = quantize_uniform4(&once).values;
            prop_assert_eq!(once.data(), twice.data());
        }

        #[test]
        fn split_sums_exactly(data in prop::collection::vec(-2.0f32..2.0, 1..64)) {
            let p = QuantizedParam::new(t(&data), QuantSpec::new(QuantKind::Ternary));
            let tern = p.quantized().values;
            let (a, b) = ternary_weight_split(&p).unwrap();
            prop_assert_eq!(a.latent.numel() + b.latent.numel(), 2 * p.latent.numel());
            let (qa, qb) = (a.quantized().values, b.quantized().values);
            for i in 0..tern.numel() {
                prop_assert_eq!(qa.data()[i] + qb.data()[i], tern.data()[i]);
            }
        }
    }
}
