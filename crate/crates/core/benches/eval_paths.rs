//! Sequential vs rayon evaluation over the same model and dev set. Without
//! the `parallel` feature both arms run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use binens::data::{make_synthetic_task, Split, TaskKind, TaskSpec};
use binens::eval::{predict_dataset, robustness_eval, EvalOptions};
use binens::model::{EncoderConfig, EncoderModel};
use binens::par::ExecMode;

fn eval_paths(c: &mut Criterion) {
    let model = EncoderModel::build(EncoderConfig { max_seq_len: 24, ..EncoderConfig::tiny(2, 1) }).unwrap();
    let dev = make_synthetic_task(&TaskSpec::new(TaskKind::KeywordVsKeyword, 512, 2, 3, 0.0), Split::Dev).unwrap();
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let opts = EvalOptions { batch_size: 32, mode };
        c.bench_function(&format!("predict_dataset/{mode:?}"), |b| {
            b.iter(|| predict_dataset(&model, black_box(&dev), opts, None).unwrap())
        });
        c.bench_function(&format!("robustness_eval/{mode:?}"), |b| {
            b.iter(|| robustness_eval(&model, black_box(&dev), 0.01, 3, 7, opts).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = eval_paths
}
criterion_main!(benches);
