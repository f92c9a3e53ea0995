use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use binens::data::{make_synthetic_task, Split, TaskKind, TaskSpec};
use binens::eval::{
    accuracy_and_confusion, evaluate, flops_model_size, predict_dataset, robustness_eval, EvalOptions, Noise, MIB,
};
use binens::model::{Batch, EncoderConfig, EncoderModel, QuantMap};
use binens::par::ExecMode;

fn model() -> EncoderModel {
    EncoderModel::build(EncoderConfig::tiny(2, 5)).unwrap()
}

fn data(m: usize) -> binens::data::Dataset {
    make_synthetic_task(&TaskSpec::new(TaskKind::KeywordVsKeyword, m, 2, 6, 0.0), Split::Dev).unwrap()
}

fn full_batch(rows: usize) -> Batch {
    let ids: Vec<Vec<usize>> = (0..rows).map(|r| (0..32).map(|i| 1 + (r * 31 + i * 7) % 256).collect()).collect();
    Batch::new(ids, vec![vec![true; 32]; rows]).unwrap()
}

#[test]
fn injected_noise_has_the_requested_variance() {
    let m = model();
    let batch = full_batch(16);
    let clean = m.forward(&batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy = m.noise_injected_forward(&batch, 0.01, &mut rng).unwrap();
    let diffs: Vec<f64> = noisy.hidden_states[0]
        .data()
        .iter()
        .zip(clean.hidden_states[0].data())
        .map(|(a, b)| (*a - *b) as f64)
        .collect();
    assert!(diffs.len() >= 10_000);
    let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    assert!((var - 0.01).abs() <= 0.05 * 0.01, "{var}");
}

#[test]
fn zero_variance_is_the_clean_forward() {
    let m = model();
    let batch = full_batch(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(m.noise_injected_forward(&batch, 0.0, &mut rng).unwrap(), m.forward(&batch).unwrap());
}

#[test]
fn zero_variance_robustness() {
    let (m, d) = (model(), data(200));
    let opts = EvalOptions::default();
    let clean = evaluate(&m, &d, opts).unwrap().accuracy;
    let r = robustness_eval(&m, &d, 0.0, 4, 1, opts).unwrap();
    assert_eq!(r.std, 0.0);
    assert_eq!(r.mean, clean);
    assert_eq!(r.accuracies, vec![clean; 4]);
}

#[test]
fn robustness_is_seeded_and_std_is_population() {
    let (m, d) = (model(), data(200));
    let opts = EvalOptions { batch_size: 32, ..Default::default() };
    let a = robustness_eval(&m, &d, 0.5, 6, 42, opts).unwrap();
    assert_eq!(a, robustness_eval(&m, &d, 0.5, 6, 42, opts).unwrap());
    let n = a.accuracies.len() as f64;
    let mut mean = 0.0;
    for x in &a.accuracies {
        mean += x / n;
    }
    let mut var = 0.0;
    for x in &a.accuracies {
        var += (x - mean) * (x - mean) / n;
    }
    assert!((a.mean - mean).abs() < 1e-12);
    assert!((a.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn parallel_and_sequential_predictions_agree() {
    let (m, d) = (model(), data(150));
    let seq = EvalOptions { batch_size: 16, mode: ExecMode::Sequential };
    let par = EvalOptions { mode: ExecMode::Parallel, ..seq };
    let noise = Some(Noise { variance: 0.2, seed: 8 });
    assert_eq!(predict_dataset(&m, &d, seq, None).unwrap(), predict_dataset(&m, &d, par, None).unwrap());
    assert_eq!(predict_dataset(&m, &d, seq, noise).unwrap(), predict_dataset(&m, &d, par, noise).unwrap());
}

proptest! {
    #[test]
    fn confusion_matches_loop(
        (k, pairs) in (1usize..5).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..60)))
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = accuracy_and_confusion(&preds, &labels, k).unwrap();
        let mut correct = 0;
        for y in 0..k {
            for p in 0..k {
                let count = pairs.iter().filter(|&&(pp, yy)| pp == p && yy == y).count();
                prop_assert_eq!(r.confusion[y][p], count);
            }
            correct += r.confusion[y][y];
        }
        prop_assert_eq!(r.accuracy, correct as f64 / pairs.len() as f64);
    }
}

#[test]
fn matthews_hand_cases() {
    let labels = [1, 1, 1, 0, 0, 0, 0, 0];
    let preds = [1, 1, 0, 1, 0, 0, 0, 0];
    // tp 2, tn 4, fp 1, fn 1
    let expected = (2.0 * 4.0 - 1.0) / (3.0f64 * 3.0 * 5.0 * 5.0).sqrt();
    let r = accuracy_and_confusion(&preds, &labels, 2).unwrap();
    assert!((r.matthews.unwrap() - expected).abs() < 1e-12);
    let inverted: Vec<usize> = labels.iter().map(|y| 1 - y).collect();
    assert_eq!(accuracy_and_confusion(&inverted, &labels, 2).unwrap().matthews, Some(-1.0));
    assert!(accuracy_and_confusion(&[0, 3], &[0, 1], 2).is_err());
}

#[test]
fn size_breakdown_counts_every_parameter() {
    let tiny = EncoderConfig::tiny(3, 1);
    let split = EncoderConfig { weight_branches: 2, ..tiny.clone().with_quant(QuantMap::binary()) };
    for cfg in [tiny, split] {
        let built = EncoderModel::build(cfg.clone()).unwrap();
        let report = flops_model_size(&cfg, 1, 32);
        let counted: u64 = report.size_breakdown.iter().map(|e| e.count).sum();
        assert_eq!(counted as usize, built.param_count());
        assert_eq!(built.param_count(), cfg.param_count());
    }
}

#[test]
fn bert_base_full_precision_size() {
    // bert-base-uncased has 109,482,240 parameters. This encoder has no
    // token-type table (2 x 768) and no pooler (768 x 768 + 768), and adds a
    // two-way head (768 x 2 + 2).
    let params: u64 = 109_482_240 - 2 * 768 - (768 * 768 + 768) + 768 * 2 + 2;
    let cfg = EncoderConfig::bert_base(QuantMap::full_precision());
    assert_eq!(cfg.param_count() as u64, params);
    let report = flops_model_size(&cfg, 1, 128);
    assert_eq!(report.model_size_bytes, 4 * params);
    assert!((report.model_size_bytes as f64 / MIB - 415.39).abs() < 0.01);
}
