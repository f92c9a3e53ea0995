use std::path::{Path, PathBuf};

use binens::data::{load_tsv, Dataset, Split};
use binens::distill::{KdStrategy, TrainReport};
use binens::ensemble::manifest::EnsembleManifest;
use binens::ensemble::{EnsembleModel, RoundDiagnostics};
use binens::eval::report::{bar_chart_svg, write_csv, write_svg, write_toml};
use binens::eval::{evaluate, flops_model_size, robustness_eval, Classifier, CostReport, MetricsReport, RobustnessReport};
use binens::model::checkpoint::Checkpoint;
use binens::model::{EncoderConfig, EncoderModel, QuantMap};
use binens::par::with_threads;
use binens::pipeline::{self, PipelineConfig, RunManifest};
use binens::{Error, Result};

use crate::{Common, Target};

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::desk(1),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.eval.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, verb: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(verb))
}

fn new_manifest(command: &str, cfg: &PipelineConfig, common: &Common) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, cfg.seed, cfg.to_table()?);
    m.inputs.extend(common.config.iter().cloned());
    Ok(m)
}

fn save_model(manifest: &mut RunManifest, model: &EncoderModel, path: &Path) -> Result<()> {
    Checkpoint::from(model.clone()).save(path)?;
    manifest.add_output(path)
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    Ok(Checkpoint::load(path)?.model)
}

fn write_train_log(manifest: &mut RunManifest, reports: &[&TrainReport], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .enumerate()
        .flat_map(|(run, r)| {
            r.log.iter().map(move |l| {
                vec![
                    run.to_string(),
                    l.step.to_string(),
                    l.phase.to_string(),
                    format!("{:.6}", l.loss),
                    format!("{:.3}", l.elapsed_secs),
                ]
            })
        })
        .collect();
    write_csv(path, &["run", "step", "phase", "loss", "wall_clock"], &rows)?;
    manifest.add_output(path)
}

fn write_metrics(manifest: &mut RunManifest, metrics: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    let toml_path = dir.join(format!("{stem}.toml"));
    write_toml(metrics, &toml_path)?;
    manifest.add_output(&toml_path)?;
    let k = metrics.confusion.len();
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..k).map(|c| format!("pred_{c}"))).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = metrics
        .confusion
        .iter()
        .enumerate()
        .map(|(y, row)| std::iter::once(y.to_string()).chain(row.iter().map(|c| c.to_string())).collect())
        .collect();
    let csv_path = dir.join(format!("{stem}_confusion.csv"));
    write_csv(&csv_path, &header, &rows)?;
    manifest.add_output(&csv_path)
}

fn write_robustness(manifest: &mut RunManifest, report: &RobustnessReport, dir: &Path, stem: &str) -> Result<()> {
    let toml_path = dir.join(format!("{stem}.toml"));
    write_toml(report, &toml_path)?;
    manifest.add_output(&toml_path)?;
    let rows: Vec<Vec<String>> =
        report.accuracies.iter().enumerate().map(|(r, a)| vec![(r + 1).to_string(), format!("{a:.6}")]).collect();
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, &["round", "accuracy"], &rows)?;
    manifest.add_output(&csv_path)?;
    let bars: Vec<(String, f64, Option<f64>)> =
        report.accuracies.iter().enumerate().map(|(r, &a)| (format!("round {}", r + 1), a, None)).collect();
    let svg_path = dir.join(format!("{stem}.svg"));
    let title = format!(
        "accuracy under noise variance {} (mean {:.4}, std {:.4})",
        report.noise_variance, report.mean, report.std
    );
    write_svg(&svg_path, &bar_chart_svg(&title, &bars))?;
    manifest.add_output(&svg_path)
}

fn write_rounds(manifest: &mut RunManifest, rounds: &[RoundDiagnostics], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = rounds
        .iter()
        .map(|r| {
            vec![
                r.round.to_string(),
                r.attempt.to_string(),
                format!("{:.6}", r.error),
                format!("{:.6}", r.alpha),
                r.accepted.to_string(),
                format!("{:.3}", r.wall_clock_secs),
            ]
        })
        .collect();
    write_csv(path, &["round", "attempt", "error", "alpha", "accepted", "wall_clock"], &rows)?;
    manifest.add_output(path)
}

fn write_cost(manifest: &mut RunManifest, report: &CostReport, dir: &Path) -> Result<()> {
    let toml_path = dir.join("cost.toml");
    write_toml(report, &toml_path)?;
    manifest.add_output(&toml_path)?;
    let rows: Vec<Vec<String>> = report
        .breakdown
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.bits_w.to_string(),
                c.bits_a.to_string(),
                c.macs.to_string(),
                format!("{:.1}", c.effective_flops),
            ]
        })
        .collect();
    let csv_path = dir.join("cost.csv");
    write_csv(&csv_path, &["name", "bits_w", "bits_a", "macs", "effective_flops"], &rows)?;
    manifest.add_output(&csv_path)?;
    let bars = vec![
        ("size (MiB)".to_string(), report.size_mib(), None),
        ("FLOPs total (G)".to_string(), report.gflops_total(), None),
        ("FLOPs parallel (G)".to_string(), report.gflops_parallel(), None),
    ];
    let title = format!("{} x{}; parallel = total / N", report.label, report.ensemble_size);
    let svg_path = dir.join("cost.svg");
    write_svg(&svg_path, &bar_chart_svg(&title, &bars))?;
    manifest.add_output(&svg_path)
}

fn eval_data(cfg: &PipelineConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => Ok(Dataset { split: Split::Dev, ..load_tsv(p)? }),
        None => Ok(cfg.load_data()?.1),
    }
}

enum Loaded {
    Model(EncoderModel),
    Ensemble(EnsembleModel),
}

impl Loaded {
    fn open(target: &Target) -> Result<(Self, PathBuf)> {
        match (&target.model, &target.ensemble) {
            (Some(p), _) => Ok((Loaded::Model(load_model(p)?), p.clone())),
            (None, Some(p)) => Ok((Loaded::Ensemble(EnsembleManifest::load(p)?.1), p.clone())),
            (None, None) => Err(Error::Invalid("give --model or --ensemble".into())),
        }
    }

    fn classifier(&self) -> &dyn Classifier {
        match self {
            Loaded::Model(m) => m,
            Loaded::Ensemble(e) => e,
        }
    }
}

fn finish(manifest: &RunManifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    println!("{}", path.display());
    Ok(())
}

pub fn train_teacher(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "train-teacher");
    let mut m = new_manifest("train-teacher", &cfg, common)?;
    let (train, dev) = m.time("data", |_| cfg.load_data())?;
    let teacher = m.time("train-teacher", |_| pipeline::train_teacher(&cfg, &train))?;
    save_model(&mut m, &teacher.model, &dir.join("teacher.ckpt"))?;
    write_train_log(&mut m, &[&teacher.report], &dir.join("train_log.csv"))?;
    let metrics = with_threads(cfg.eval.threads, || evaluate(&teacher.model, &dev, cfg.eval_options()))?;
    write_metrics(&mut m, &metrics, &dir, "dev_metrics")?;
    m.note("dev_accuracy", metrics.accuracy);
    println!("teacher dev accuracy {:.4}", metrics.accuracy);
    finish(&m, &dir)
}

pub fn distill_split(common: &Common, teacher_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "distill-split");
    let mut m = new_manifest("distill-split", &cfg, common)?;
    m.inputs.push(teacher_path.to_path_buf());
    let teacher = load_model(teacher_path)?;
    let (train, dev) = m.time("data", |_| cfg.load_data())?;
    let ds = m.time("distill-split", |_| pipeline::distill_split(&cfg, &teacher, &train, &dev))?;
    save_model(&mut m, &ds.ternary, &dir.join("ternary.ckpt"))?;
    save_model(&mut m, &ds.split, &dir.join("split.ckpt"))?;
    write_train_log(&mut m, &[&ds.report], &dir.join("distill_log.csv"))?;
    m.note("max_logit_gap", ds.max_logit_gap as f64);
    m.note("backward_passes", ds.report.backward_passes as i64);
    println!("split exactness: max logit gap {:e}", ds.max_logit_gap);
    finish(&m, &dir)
}

pub fn boost(
    common: &Common,
    split_path: &Path,
    teacher_path: Option<&Path>,
    kd: Option<KdStrategy>,
    ensemble_size: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(kd) = kd {
        cfg.boost.kd = kd;
    }
    if let Some(n) = ensemble_size {
        cfg.boost.ensemble_size = n;
    }
    cfg.validate()?;
    let dir = out_dir(common, "boost");
    let mut m = new_manifest("boost", &cfg, common)?;
    m.inputs.push(split_path.to_path_buf());
    m.inputs.extend(teacher_path.map(Path::to_path_buf));
    let split = load_model(split_path)?;
    let teacher = teacher_path.map(load_model).transpose()?;
    let (train, _) = m.time("data", |_| cfg.load_data())?;
    let b = m.time("boost", |_| pipeline::boost(&cfg, &split, teacher.as_ref(), &train))?;
    let (_, written) = EnsembleManifest::save(&b.ensemble, &b.rounds, b.degenerate_rounds, &dir.join("ensemble"))?;
    for p in &written {
        m.add_output(p)?;
    }
    write_rounds(&mut m, &b.rounds, &dir.join("rounds.csv"))?;
    let reports: Vec<&TrainReport> = b.reports.iter().collect();
    write_train_log(&mut m, &reports, &dir.join("boost_log.csv"))?;
    m.note("errors", b.rounds.iter().map(|r| r.error).collect::<Vec<_>>());
    m.note("alphas", b.ensemble.alphas());
    m.note("degenerate_rounds", b.degenerate_rounds as i64);
    for r in &b.rounds {
        println!("round {} attempt {}: e={:.4} alpha={:.4} accepted={}", r.round, r.attempt, r.error, r.alpha, r.accepted);
    }
    finish(&m, &dir)
}

pub fn eval(common: &Common, target: &Target, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "eval");
    let mut m = new_manifest("eval", &cfg, common)?;
    let (loaded, path) = Loaded::open(target)?;
    m.inputs.push(path);
    m.inputs.extend(data.map(Path::to_path_buf));
    let ds = eval_data(&cfg, data)?;
    let metrics = m.time("eval", |_| with_threads(cfg.eval.threads, || evaluate(loaded.classifier(), &ds, cfg.eval_options())))?;
    write_metrics(&mut m, &metrics, &dir, "metrics")?;
    match metrics.matthews {
        Some(mcc) => println!("accuracy {:.4} mcc {:.4}", metrics.accuracy, mcc),
        None => println!("accuracy {:.4}", metrics.accuracy),
    }
    finish(&m, &dir)
}

pub fn robustness(
    common: &Common,
    target: &Target,
    data: Option<&Path>,
    variance: Option<f64>,
    rounds: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(v) = variance {
        cfg.eval.noise_variance = v;
    }
    if let Some(r) = rounds {
        cfg.eval.rounds = r;
    }
    cfg.validate()?;
    let dir = out_dir(common, "robustness");
    let mut m = new_manifest("robustness", &cfg, common)?;
    let (loaded, path) = Loaded::open(target)?;
    m.inputs.push(path);
    let ds = eval_data(&cfg, data)?;
    let report = m.time("robustness", |_| {
        with_threads(cfg.eval.threads, || {
            robustness_eval(loaded.classifier(), &ds, cfg.eval.noise_variance, cfg.eval.rounds, cfg.seed, cfg.eval_options())
        })
    })?;
    write_robustness(&mut m, &report, &dir, "robustness")?;
    println!("mean {:.4} std {:.4} over {} rounds", report.mean, report.std, report.rounds);
    finish(&m, &dir)
}

fn parse_quant(s: &str) -> Result<QuantMap> {
    match s {
        "fp" | "32-32-32" => Ok(QuantMap::full_precision()),
        "1-1-4" => Ok(QuantMap::binary()),
        "2-2-4" => Ok(QuantMap::ternary()),
        _ => Err(Error::Invalid(format!("unknown quant setting {s:?}; expected fp, 1-1-4 or 2-2-4"))),
    }
}

pub fn cost(common: &Common, bert_base: bool, quant: &str, ensemble_size: Option<usize>, seq_len: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, "cost");
    let mut m = new_manifest("cost", &cfg, common)?;
    let model_cfg = if bert_base {
        EncoderConfig::bert_base(parse_quant(quant)?)
    } else {
        let ternary = cfg.student_model_config();
        EncoderConfig { weight_branches: 2, ..ternary }.with_quant(QuantMap::binary())
    };
    let n = ensemble_size.unwrap_or(if bert_base { 1 } else { cfg.boost.ensemble_size });
    let seq = seq_len.unwrap_or(cfg.eval.cost_seq_len);
    let report = m.time("cost", |_| Ok(flops_model_size(&model_cfg, n, seq)))?;
    write_cost(&mut m, &report, &dir)?;
    println!(
        "{} N={}: size {:.2} MiB, FLOPs {:.3} G total / {:.3} G parallel",
        report.label,
        report.ensemble_size,
        report.size_mib(),
        report.gflops_total(),
        report.gflops_parallel()
    );
    finish(&m, &dir)
}

pub fn pipeline(
    common: &Common,
    kd: Option<KdStrategy>,
    ensemble_size: Option<usize>,
    variance: Option<f64>,
    rounds: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(kd) = kd {
        cfg.boost.kd = kd;
    }
    if let Some(n) = ensemble_size {
        cfg.boost.ensemble_size = n;
    }
    if let Some(v) = variance {
        cfg.eval.noise_variance = v;
    }
    if let Some(r) = rounds {
        cfg.eval.rounds = r;
    }
    cfg.validate()?;
    let dir = out_dir(common, "pipeline");
    let mut m = new_manifest("pipeline", &cfg, common)?;
    let opts = cfg.eval_options();
    let threads = cfg.eval.threads;

    let (train, dev) = m.time("data", |_| cfg.load_data())?;
    let teacher = m.time("train-teacher", |m| {
        let t = pipeline::train_teacher(&cfg, &train)?;
        save_model(m, &t.model, &dir.join("teacher.ckpt"))?;
        write_train_log(m, &[&t.report], &dir.join("teacher_log.csv"))?;
        Ok(t)
    })?;
    let ds = m.time("distill-split", |m| {
        let ds = pipeline::distill_split(&cfg, &teacher.model, &train, &dev)?;
        save_model(m, &ds.ternary, &dir.join("ternary.ckpt"))?;
        save_model(m, &ds.split, &dir.join("split.ckpt"))?;
        write_train_log(m, &[&ds.report], &dir.join("distill_log.csv"))?;
        Ok(ds)
    })?;
    let boosted = m.time("boost", |m| {
        let b = pipeline::boost(&cfg, &ds.split, Some(&teacher.model), &train)?;
        let (_, written) = EnsembleManifest::save(&b.ensemble, &b.rounds, b.degenerate_rounds, &dir.join("ensemble"))?;
        for p in &written {
            m.add_output(p)?;
        }
        write_rounds(m, &b.rounds, &dir.join("rounds.csv"))?;
        Ok(b)
    })?;
    let single = &boosted.ensemble.members[0].0;
    let rows = m.time("eval", |m| {
        let mut rows = Vec::new();
        let named: [(&str, &dyn Classifier); 5] = [
            ("teacher", &teacher.model),
            ("ternary", &ds.ternary),
            ("split", &ds.split),
            ("single", single),
            ("ensemble", &boosted.ensemble),
        ];
        for (name, clf) in named {
            let metrics = with_threads(threads, || evaluate(clf, &dev, opts))?;
            write_metrics(m, &metrics, &dir, &format!("metrics_{name}"))?;
            rows.push((name.to_string(), metrics.accuracy));
        }
        Ok(rows)
    })?;
    let robust = m.time("robustness", |m| {
        let mut out = Vec::new();
        let named: [(&str, &dyn Classifier); 2] = [("single", single), ("ensemble", &boosted.ensemble)];
        for (name, clf) in named {
            let r = with_threads(threads, || {
                robustness_eval(clf, &dev, cfg.eval.noise_variance, cfg.eval.rounds, cfg.seed, opts)
            })?;
            write_robustness(m, &r, &dir, &format!("robustness_{name}"))?;
            out.push((name.to_string(), r));
        }
        Ok(out)
    })?;
    m.time("cost", |m| {
        let split_cfg = ds.split.config.clone();
        let report = flops_model_size(&split_cfg, boosted.ensemble.members.len(), cfg.eval.cost_seq_len);
        write_cost(m, &report, &dir)
    })?;

    let summary_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|(n, a)| {
            let std = robust.iter().find(|(r, _)| r == n).map(|(_, r)| format!("{:.6}", r.std)).unwrap_or_default();
            vec![n.clone(), format!("{a:.6}"), std]
        })
        .collect();
    let summary_csv = dir.join("summary.csv");
    write_csv(&summary_csv, &["model", "dev_accuracy", "noise_std"], &summary_rows)?;
    m.add_output(&summary_csv)?;
    let bars: Vec<(String, f64, Option<f64>)> = rows
        .iter()
        .map(|(n, a)| (n.clone(), *a, robust.iter().find(|(r, _)| r == n).map(|(_, r)| r.std)))
        .collect();
    let summary_svg = dir.join("summary.svg");
    write_svg(&summary_svg, &bar_chart_svg("dev accuracy (whiskers: std under embedding noise)", &bars))?;
    m.add_output(&summary_svg)?;
    for (name, acc) in &rows {
        m.note(&format!("dev_accuracy_{name}"), *acc);
        println!("{name:>9}: dev accuracy {acc:.4}");
    }
    m.note("alphas", boosted.ensemble.alphas());
    m.note("errors", boosted.rounds.iter().map(|r| r.error).collect::<Vec<_>>());
    m.note("max_logit_gap", ds.max_logit_gap as f64);
    finish(&m, &dir)
}
