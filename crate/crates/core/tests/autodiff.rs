//! Every differentiable tape primitive against central differences, at f64
//! on inputs drawn from [-2, 2].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use binens::tensor::{finite_diff_grad, max_relative_error, Tape, Tensor, Var};

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let loss = weighted_sum(&mut tape, y);
    let grads = tape.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let y = build(&mut tape, &vars);
                let loss = weighted_sum(&mut tape, y);
                Ok(tape.value(loss).data()[0])
            },
            x,
            1e-4,
        )
        .unwrap();
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "{name}: input {i} relative error {err:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_and_batch_matmul() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 5])], &|t, v| t.matmul(v[0], v[1]).unwrap());
    check("batch_matmul", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 2])], &|t, v| {
        t.batch_matmul(v[0], v[1], false).unwrap()
    });
    check("batch_matmul_t", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 5, 4])], &|t, v| {
        t.batch_matmul(v[0], v[1], true).unwrap()
    });
}

#[test]
fn elementwise() {
    let mut r = rng();
    let pair = |r: &mut ChaCha8Rng| vec![random(r, &[3, 4]), random(r, &[3, 4])];
    check("add", pair(&mut r), &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", pair(&mut r), &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", pair(&mut r), &|t, v| t.mul(v[0], v[1]).unwrap());
    check("add_row", vec![random(&mut r, &[3, 4]), random(&mut r, &[4])], &|t, v| t.add_row(v[0], v[1]).unwrap());
    check("scale", vec![random(&mut r, &[5])], &|t, v| t.scale(v[0], -1.7));
    check("gelu", vec![random(&mut r, &[4, 4])], &|t, v| t.gelu(v[0]));
}

#[test]
fn kinks_away_from_the_sample() {
    // Inputs kept off the nondifferentiable points of maximum and clip.
    let a = Tensor::new(vec![4], vec![-1.5, 0.3, 1.2, -0.4]).unwrap();
    let b = Tensor::new(vec![4], vec![0.5, -0.9, 1.9, -1.1]).unwrap();
    check("maximum", vec![a.clone(), b], &|t, v| t.maximum(v[0], v[1]).unwrap());
    check("clip", vec![a], &|t, v| t.clip(v[0], -1.0, 1.0));
}

#[test]
fn shape_ops() {
    let mut r = rng();
    check("reshape", vec![random(&mut r, &[2, 6])], &|t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check("permute", vec![random(&mut r, &[2, 3, 4])], &|t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    check("transpose", vec![random(&mut r, &[3, 5])], &|t, v| t.transpose(v[0]).unwrap());
    check("sum", vec![random(&mut r, &[3, 2])], &|t, v| t.sum(v[0]));
    check("mean", vec![random(&mut r, &[3, 2])], &|t, v| t.mean(v[0]));
}

#[test]
fn normalizations() {
    let mut r = rng();
    check("softmax", vec![random(&mut r, &[3, 5])], &|t, v| t.softmax(v[0]));
    check("log_softmax", vec![random(&mut r, &[3, 5])], &|t, v| t.log_softmax(v[0]));
    check("layer_norm", vec![random(&mut r, &[3, 6]), random(&mut r, &[6]), random(&mut r, &[6])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn embedding_lookup() {
    let mut r = rng();
    check("embedding", vec![random(&mut r, &[5, 3])], &|t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn two_layer_mlp() {
    let mut r = rng();
    let inputs = vec![
        random(&mut r, &[4, 3]),
        random(&mut r, &[3, 8]),
        random(&mut r, &[8]),
        random(&mut r, &[8, 2]),
        random(&mut r, &[2]),
    ];
    check("mlp", inputs, &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, v[3]).unwrap();
        let o = t.add_row(o, v[4]).unwrap();
        t.log_softmax(o)
    });
}
