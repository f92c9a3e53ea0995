use proptest::prelude::*;

use binens::ensemble::stump::{fit_stump, Stump, StumpLearner};
use binens::ensemble::{
    adaboost_train, combine_votes, init_sample_weights, model_weight, update_sample_weights, weighted_error, EnsembleModel,
    SampleWeights, VoteRule, WeakLearner,
};
use binens::model::{Batch, EncoderConfig, EncoderModel};
use binens::tensor::Tensor;
use binens::Error;

#[test]
fn hand_values() {
    assert_eq!(init_sample_weights(4).unwrap().weights, vec![0.25; 4]);
    assert_eq!(init_sample_weights(1).unwrap().weights, vec![1.0]);
    assert!(init_sample_weights(0).is_err());
    assert!((model_weight(0.25, 2) - 0.5 * 3f64.ln()).abs() < 1e-12);
    assert!((model_weight(0.25, 3) - (3f64.ln() + 2f64.ln())).abs() < 1e-12);
    let d = init_sample_weights(4).unwrap();
    let next = update_sample_weights(&d, 0.5 * 3f64.ln(), &[true, true, true, false]).unwrap();
    for (w, e) in next.weights.iter().zip([1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5]) {
        assert!((w - e).abs() < 1e-12);
    }
    assert_eq!(update_sample_weights(&d, 0.0, &[true, false, true, false]).unwrap().weights, d.weights);
}

fn weights(m: usize) -> impl Strategy<Value = SampleWeights> {
    prop::collection::vec(0.001f64..1.0, m).prop_map(|raw| {
        let z: f64 = raw.iter().sum();
        SampleWeights { weights: raw.iter().map(|w| w / z).collect(), round: 1 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn uniform_weights_sum_to_one(m in 1usize..500) {
        prop_assert!((init_sample_weights(m).unwrap().weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_error_matches_loop(
        (d, preds, labels) in (1usize..40).prop_flat_map(|m| (
            weights(m),
            prop::collection::vec(0usize..3, m),
            prop::collection::vec(0usize..3, m),
        ))
    ) {
        let mut oracle = 0.0;
        for j in 0..labels.len() {
            if preds[j] != labels[j] {
                oracle += d.weights[j];
            }
        }
        prop_assert_eq!(weighted_error(&preds, &labels, &d).unwrap(), oracle);
    }

    #[test]
    fn votes_match_score_loop(
        (scores, alphas, rule) in (1usize..5, 1usize..10, 2usize..5).prop_flat_map(|(n, m, k)| (
            prop::collection::vec(prop::collection::vec(0.0f32..1.0, m * k), n)
                .prop_map(move |v| v.into_iter().map(|d| Tensor::new(vec![m, k], d).unwrap()).collect::<Vec<_>>()),
            prop::collection::vec(0.0f64..2.0, n),
            prop_oneof![Just(VoteRule::Hard), Just(VoteRule::Soft)],
        ))
    ) {
        let (m, k) = (scores[0].shape()[0], scores[0].shape()[1]);
        let (classes, _) = combine_votes(&scores, &alphas, rule).unwrap();
        for row in 0..m {
            let mut score = vec![0.0f64; k];
            for (s, a) in scores.iter().zip(&alphas) {
                let r = &s.data()[row * k..(row + 1) * k];
                match rule {
                    VoteRule::Hard => score[s.argmax_rows()[row]] += a,
                    VoteRule::Soft => (0..k).for_each(|c| score[c] += a * r[c] as f64),
                }
            }
            let best = (0..k).fold(0, |b, c| if score[c] > score[b] { c } else { b });
            prop_assert_eq!(classes[row], best);
        }
    }

    #[test]
    fn zero_alpha_member_changes_nothing(
        (scores, alphas) in (1usize..4, 1usize..10, 2usize..5).prop_flat_map(|(n, m, k)| (
            prop::collection::vec(prop::collection::vec(0.0f32..1.0, m * k), n + 1)
                .prop_map(move |v| v.into_iter().map(|d| Tensor::new(vec![m, k], d).unwrap()).collect::<Vec<_>>()),
            prop::collection::vec(0.01f64..2.0, n),
        ))
    ) {
        let mut with_zero = alphas.clone();
        with_zero.push(0.0);
        let n = alphas.len();
        prop_assert_eq!(
            combine_votes(&scores[..n], &alphas, VoteRule::Hard).unwrap().0,
            combine_votes(&scores, &with_zero, VoteRule::Hard).unwrap().0
        );
    }
}

#[test]
fn heavier_member_wins_a_disagreement() {
    let a = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
    let b = Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap();
    assert_eq!(combine_votes(&[a.clone(), b.clone()], &[0.6, 0.4], VoteRule::Hard).unwrap().0, vec![0]);
    assert_eq!(combine_votes(&[a, b], &[0.4, 0.6], VoteRule::Hard).unwrap().0, vec![1]);
}

/// Label 1 in the first and third quadrants.
fn xor_set(m: usize) -> (Vec<[f64; 2]>, Vec<usize>) {
    let xs: Vec<[f64; 2]> = (0..m)
        .map(|i| {
            let t = i as f64 * 0.618_033_988_75;
            [(t.fract() * 2.0 - 1.0), ((t * 7.3).fract() * 2.0 - 1.0)]
        })
        .collect();
    let ys = xs.iter().map(|p| usize::from(p[0] * p[1] > 0.0)).collect();
    (xs, ys)
}

fn stump_error(members: &[(Stump, f64)], xs: &[[f64; 2]], ys: &[usize]) -> f64 {
    let wrong = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let mut v = [0.0; 2];
            members.iter().for_each(|(s, a)| v[s.predict(x)] += a);
            usize::from(v[1] > v[0]) != y
        })
        .count();
    wrong as f64 / ys.len() as f64
}

#[test]
fn stumps_on_xor_like_set() {
    let (xs, ys) = xor_set(300);
    let best_single = {
        let s = fit_stump(&xs, &ys, &vec![1.0 / 300.0; 300], 2).unwrap();
        stump_error(&[(s, 1.0)], &xs, &ys)
    };
    let mut learner = StumpLearner { xs: xs.clone(), ys: ys.clone(), num_classes: 2 };
    let out = adaboost_train(&mut learner, &ys, 2, 10).unwrap();
    let members: Vec<(Stump, f64)> = out.members.into_iter().map(|m| (m.model, m.alpha)).collect();
    assert!(stump_error(&members, &xs, &ys) < best_single);
}

struct AlwaysWrong;

impl WeakLearner for AlwaysWrong {
    type Model = ();

    fn fit(&mut self, _: usize, _: usize, _: &SampleWeights) -> binens::Result<()> {
        Ok(())
    }

    fn predict_train(&self, _: &()) -> binens::Result<Vec<usize>> {
        Ok(vec![1; 4])
    }
}

#[test]
fn chance_level_learner_is_degenerate() {
    let err = adaboost_train(&mut AlwaysWrong, &[0; 4], 2, 3).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)), "{err}");
}

#[test]
fn single_member_ensemble_is_the_member() {
    let model = EncoderModel::build(EncoderConfig::tiny(3, 8)).unwrap();
    let batch = Batch::new(
        vec![vec![5, 6, 7], vec![100, 200, 0], vec![33, 0, 0]],
        vec![vec![true; 3], vec![true, true, false], vec![true, false, false]],
    )
    .unwrap();
    let ens = EnsembleModel::new(vec![(model.clone(), 0.7)], VoteRule::Hard).unwrap();
    assert_eq!(binens::ensemble::ensemble_predict(&ens, &batch).unwrap().0, model.logits(&batch).unwrap().argmax_rows());
}
