use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use binens::model::{EncoderConfig, EncoderModel, QuantMap};
use binens::quant::{binarize, quantize_on_tape, ternary_weight_split, QuantKind, QuantSpec, QuantizedParam};
use binens::tensor::{Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], range: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-range..range)).collect()).unwrap()
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

#[test]
fn mean_abs_scale_beats_every_grid_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let latent = random(&mut rng, &[1000], 1.5);
    let q = binarize(&latent);
    let ours: Vec<f64> = q.values.data().iter().map(|&v| v as f64).collect();
    let best = sq_dist(latent.data(), &ours);
    for i in 1..=400 {
        let beta = i as f64 * 0.005;
        let alt: Vec<f64> = latent.data().iter().map(|&w| if w < 0.0 { -beta } else { beta }).collect();
        assert!(best <= sq_dist(latent.data(), &alt) + 1e-9, "beta {beta} does better");
    }
}

fn binary_linear_loss(latent: &Tensor, x: &Tensor, grad: bool) -> (f64, Option<Tensor>) {
    let mut tape = Tape::<f32>::new();
    let w = if grad { tape.param(latent.clone()) } else { tape.constant(latent.clone()) };
    let q = quantize_on_tape(&mut tape, w, &QuantSpec::new(QuantKind::Binary)).unwrap();
    let xv = tape.constant(x.clone());
    let y = tape.matmul(xv, q).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    let value = tape.value(loss).data()[0] as f64;
    let g = grad.then(|| tape.backward(loss).unwrap().get(w).cloned().unwrap());
    (value, g)
}

#[test]
fn binarized_linear_latents_get_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let latent = random(&mut rng, &[4, 3], 0.9);
    let x = random(&mut rng, &[5, 4], 1.0);
    let (base, g) = binary_linear_loss(&latent, &x, true);
    let g = g.unwrap();
    assert!(g.data().iter().any(|v| v.abs() > 0.0));
    // Flipping the sign of the latent with the largest gradient moves the
    // loss, so the gradient points at something the loss depends on.
    let k = (0..g.numel()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
    let mut flipped = latent.clone();
    flipped.data_mut()[k] = -flipped.data()[k];
    let (moved, _) = binary_linear_loss(&flipped, &x, false);
    assert!((moved - base).abs() > 1e-6, "{moved} vs {base}");
}

#[test]
fn split_doubles_parameters_and_sums_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = QuantizedParam::new(random(&mut rng, &[16, 8], 1.0), QuantSpec::new(QuantKind::Ternary));
    let (a, b) = ternary_weight_split(&p).unwrap();
    assert_eq!(a.latent.numel() + b.latent.numel(), 2 * p.latent.numel());
    let t = p.quantized().values;
    for ((x, y), z) in a.quantized().values.data().iter().zip(b.quantized().values.data()).zip(t.data()) {
        assert_eq!(x + y, *z);
    }
}

#[test]
fn split_model_has_twice_the_quantized_parameters() {
    let cfg = EncoderConfig::tiny(2, 1).with_quant(QuantMap::ternary());
    let ternary = EncoderModel::build(cfg).unwrap();
    let split = ternary.ternary_weight_split().unwrap();
    let quantized = |m: &EncoderModel| -> usize {
        m.params.iter().filter(|(n, _)| binens::model::quant_group(&m.config.quant, n).is_some()).map(|(_, t)| t.numel()).sum()
    };
    assert_eq!(quantized(&split), 2 * quantized(&ternary));
    assert_eq!(split.param_count() - ternary.param_count(), quantized(&ternary));
}
