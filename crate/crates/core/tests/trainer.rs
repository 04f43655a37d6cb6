use std::collections::HashMap;
use std::fs;

use icl_core::funcspace::CompositeExpr;
use icl_core::model::{load_checkpoint, ModelConfig, TransformerConfig};
use icl_core::sampler::{SamplerConfig, ScaleRegime, TaskMixture};
use icl_core::trainer::*;
use icl_core::Error;

fn expr(s: &str) -> CompositeExpr {
    s.parse().unwrap()
}

fn tiny(n_points: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig { embed_dim: 16, n_layers: 1, n_heads: 2, n_points, dropout: 0.0 })
}

fn run_config(mixture: TaskMixture, steps: usize) -> RunConfig {
    RunConfig {
        model: tiny(8),
        train: TrainConfig { steps, batch_size: 8, learning_rate: 3e-3, seed: 11, ..TrainConfig::default() },
        sampler: SamplerConfig { n_points: 8, ..SamplerConfig::default() },
        mixture: Some(mixture),
    }
}

#[test]
fn adamw_matches_closed_form_on_scalar_quadratic() {
    // f(θ) = a/2 (θ − c)², two steps with weight decay.
    let (a, c, lr, wd) = (3.0, 0.25, 0.01, 0.1);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut opt = AdamW::<f64>::new(1, OptimizerConfig::Adamw { beta1: b1, beta2: b2, eps }, wd);
    let mut theta = [1.5];

    let g1 = a * (1.5 - c);
    opt.step(&mut theta, &[g1], lr);
    let t1 = 1.5 * (1.0 - lr * wd) - lr * g1 / (g1.abs() + eps);
    assert!((theta[0] - t1).abs() < 1e-12);

    let g2 = a * (t1 - c);
    opt.step(&mut theta, &[g2], lr);
    let m = (b1 * (1.0 - b1) * g1 + (1.0 - b1) * g2) / (1.0 - b1 * b1);
    let v = (b2 * (1.0 - b2) * g1 * g1 + (1.0 - b2) * g2 * g2) / (1.0 - b2 * b2);
    let t2 = t1 * (1.0 - lr * wd) - lr * m / (v.sqrt() + eps);
    assert!((theta[0] - t2).abs() < 1e-12);
}

#[test]
fn zero_steps_returns_initial_parameters() {
    let cfg = run_config(TaskMixture::uniform(vec![expr("sin:1")]).unwrap(), 0);
    let out = train(&cfg, None, |_| {}).unwrap();
    assert_eq!(out.params, initial_params(&cfg).unwrap());
    assert!(out.record.loss_trace.is_empty());
    assert_eq!(out.record.sequences_consumed, 0);
}

#[test]
fn single_entry_mixture_uses_only_that_template() {
    let cfg = run_config(TaskMixture::uniform(vec![expr("mul(sin:1, cos:2)")]).unwrap(), 5);
    let schedule = Schedule::new(&cfg).unwrap();
    for step in 0..5 {
        for s in schedule.batch(step).unwrap() {
            assert_eq!(s.truth.template_text(), "mul(sin:1, cos:2)");
        }
    }
}

#[test]
fn baseline_classes_are_drawn_uniformly() {
    let mut cfg = run_config(standard_mixture(MixtureId::ConvexBaseline), 1000);
    cfg.train.batch_size = 128;
    let schedule = Schedule::new(&cfg).unwrap();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for step in 0..1000 {
        for s in schedule.batch(step).unwrap() {
            *counts.entry(s.truth.template_text()).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 5);
    for (t, n) in counts {
        let f = n as f64 / 128_000.0;
        assert!((f - 0.2).abs() < 0.02, "{t}: {f}");
    }
}

#[test]
fn batches_are_reproducible_and_fresh() {
    let cfg = run_config(standard_mixture(MixtureId::ConvexCfl), 3);
    let a = Schedule::new(&cfg).unwrap();
    let b = Schedule::new(&cfg).unwrap();
    assert_eq!(a.batch(2).unwrap(), b.batch(2).unwrap());
    assert_ne!(a.batch(1).unwrap(), a.batch(2).unwrap());
    let mut threaded = cfg.clone();
    threaded.train.workers = 3;
    assert_eq!(Schedule::new(&threaded).unwrap().batch(1).unwrap(), a.batch(1).unwrap());
}

#[test]
fn curriculum_switches_exactly_at_the_boundary() {
    let mut cfg = run_config(standard_mixture(MixtureId::FourBase), 200);
    let combos = TaskMixture::uniform(vec![expr("mul(sin:1, sin:2)"), expr("mul(sin:1, cos:1)")]).unwrap();
    cfg.mixture = None;
    cfg.train.curriculum = Some(vec![
        CurriculumStage { mixture: standard_mixture(MixtureId::FourBase), steps: 100 },
        CurriculumStage { mixture: combos.clone(), steps: 100 },
    ]);
    let schedule = Schedule::new(&cfg).unwrap();
    assert_eq!(schedule.total_steps(), 200);
    let allowed: Vec<String> = combos.templates().map(|t| t.template_text()).collect();
    for step in 0..200 {
        for s in schedule.batch(step).unwrap() {
            if step < 100 {
                assert!(!s.truth.is_combination(), "step {}", step + 1);
            } else {
                assert!(allowed.contains(&s.truth.template_text()), "step {}", step + 1);
            }
        }
    }
    assert!(schedule.batch(200).is_err());
}

#[test]
fn scale_up_only_touches_baseline_mixtures() {
    let count_scaled = |id: MixtureId| {
        let mut cfg = run_config(standard_mixture(id), 50);
        cfg.train.scale_up = Some(ScaleRegime::Convex);
        cfg.train.batch_size = 64;
        let schedule = Schedule::new(&cfg).unwrap();
        let mut scaled = 0;
        let mut total = 0;
        for step in 0..50 {
            for s in schedule.batch(step).unwrap() {
                total += 1;
                if s.truth.leaves().iter().any(|(_, w)| w.unwrap().value().abs() > 1.0) {
                    scaled += 1;
                }
            }
        }
        scaled as f64 / total as f64
    };
    let f = count_scaled(MixtureId::ConvexBaseline);
    assert!((f - 0.2).abs() < 0.03, "{f}");
    assert_eq!(count_scaled(MixtureId::ConvexCfl), 0.0);
}

#[test]
fn budget_is_independent_of_mixture() {
    let a = train(&run_config(standard_mixture(MixtureId::ConvexBaseline), 6), None, |_| {}).unwrap();
    let b = train(&run_config(standard_mixture(MixtureId::ProductCfl4), 6), None, |_| {}).unwrap();
    assert_eq!(a.record.sequences_consumed, 48);
    assert_eq!(a.record.sequences_consumed, b.record.sequences_consumed);
    assert_eq!(a.record.optimizer_steps, 6);
    assert_eq!(a.record.optimizer_steps, b.record.optimizer_steps);
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(standard_mixture(MixtureId::ConvexCfl), 8);
    let out = RunOutput { runs_dir: dir.path().join("runs"), label: "r".into() };
    let a = train(&cfg, Some(&out), |_| {}).unwrap();
    let b = train(&cfg, Some(&out), |_| {}).unwrap();
    assert_eq!(a.record.run_id, "r");
    assert_eq!(b.record.run_id, "r-2");
    let read = |id: &str| fs::read(dir.path().join("runs").join(id).join("final.iclm")).unwrap();
    assert_eq!(read("r"), read("r-2"));
    assert_eq!(a.record.loss_trace, b.record.loss_trace);
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = run_config(TaskMixture::uniform(vec![expr("cos:1")]).unwrap(), 6);
    cfg.train.checkpoint_every = 2;
    let out = RunOutput { runs_dir: dir.path().to_path_buf(), label: "layout".into() };
    let res = train(&cfg, Some(&out), |_| {}).unwrap();
    let run = dir.path().join("layout");
    assert_eq!(res.run_dir.as_deref(), Some(run.as_path()));
    for f in ["config.json", "loss.csv", "ckpt_2.iclm", "ckpt_4.iclm", "ckpt_6.iclm", "final.iclm", "record.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("1,"));

    let record = RunRecord::read(&run).unwrap();
    assert_eq!(record, res.record);
    assert!(record.loss_trace.windows(2).all(|w| w[0].0 < w[1].0));
    assert_eq!(record.final_checkpoint.as_deref(), Some("final.iclm"));
    assert_eq!(load_checkpoint(&run.join("final.iclm")).unwrap(), res.params);
    let snapshot: RunConfig = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot, cfg);
}

#[test]
fn divergence_reports_step_and_template() {
    let mut cfg = run_config(TaskMixture::uniform(vec![expr("sin:2")]).unwrap(), 10);
    cfg.train.learning_rate = 1e30;
    match train(&cfg, None, |_| {}) {
        Err(Error::Divergence { step, templates, .. }) => {
            assert!(step >= 2 && step <= 10, "{step}");
            assert_eq!(templates, "sin:2");
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.record.loss_trace)),
    }
}

#[test]
fn loss_trends_down_on_a_single_class() {
    let mut cfg = run_config(TaskMixture::uniform(vec![expr("sin:1")]).unwrap(), 400);
    cfg.model = ModelConfig::Transformer(TransformerConfig { embed_dim: 32, n_layers: 2, n_heads: 4, n_points: 8, dropout: 0.0 });
    cfg.train.batch_size = 32;
    cfg.train.learning_rate = 1e-3;
    cfg.train.warmup_steps = 50;
    let out = train(&cfg, None, |_| {}).unwrap();
    let median = |s: &[(usize, f64)]| {
        let mut v: Vec<f64> = s.iter().map(|p| p.1).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let t = &out.record.loss_trace;
    let (first, last) = (median(&t[..100]), median(&t[300..]));
    assert!(last < 0.8 * first, "first {first} last {last}");
}

#[test]
fn standard_mixture_contents() {
    let texts = |id| -> Vec<String> { standard_mixture(id).templates().map(|t| t.template_text()).collect() };
    assert_eq!(texts(MixtureId::ConvexBaseline), ["sin:1", "cos:1", "sin:2", "cos:2", "sin:3"]);
    assert_eq!(
        texts(MixtureId::ProductCfl2),
        ["sin:1", "cos:1", "sin:2", "cos:2", "mul(sin:1, sin:2)", "mul(sin:1, cos:1)"]
    );
    assert_eq!(
        texts(MixtureId::ProductCfl4)[4..],
        ["mul(sin:1, sin:2)", "mul(sin:1, cos:1)", "mul(cos:1, cos:2)", "mul(sin:2, cos:2)"]
    );
    assert_eq!(texts(MixtureId::CompositionCfl1)[4], "compose(sin:1, sin:2)");
    assert_eq!(
        texts(MixtureId::ReversedBaseline),
        ["add(sin:1, cos:1)", "add(sin:1, cos:2)", "add(cos:1, sin:2)", "add(sin:2, cos:2)"]
    );
    assert_eq!(texts(MixtureId::ReversedCfl).last().unwrap(), "sin:1");
    assert_eq!(texts(MixtureId::SixteenClass).len(), 16);
    for id in MixtureId::ALL {
        let m = standard_mixture(id);
        let p = 1.0 / m.entries().len() as f64;
        assert!(m.entries().iter().all(|e| e.probability == p));
    }
    assert!(standard_mixtures("convex_cfl").is_ok());
    assert!(matches!(standard_mixtures("bogus"), Err(Error::Unknown { .. })));
}
