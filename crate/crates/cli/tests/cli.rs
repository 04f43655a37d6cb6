use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icl_core::evaluator::{read_curve_csv, read_report_file, PosRange};
use icl_core::experiment::{recipe, ExperimentConfig, Scale};
use icl_core::model::{ModelConfig, TransformerConfig};
use icl_core::trainer::RunRecord;

fn icl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl")).args(args).env_remove("ICL_SEED").output().unwrap()
}

fn icl_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl")).args(args).env("ICL_SEED", seed).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "icl failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A recipe shrunk to a few steps of a tiny model on 8-point prompts.
fn tiny_config(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = recipe(name, Scale::Desk).unwrap();
    let n = 8;
    cfg.model = match cfg.model {
        ModelConfig::Transformer(_) => {
            ModelConfig::Transformer(TransformerConfig { embed_dim: 16, n_layers: 1, n_heads: 2, n_points: n, dropout: 0.0 })
        }
        ModelConfig::Mlp(mut m) => {
            m.hidden = vec![8];
            m.n_points = n;
            m.input_dim = 2 * n - 1;
            ModelConfig::Mlp(m)
        }
    };
    cfg.sampler.n_points = n;
    cfg.train.steps = 3;
    cfg.train.batch_size = 4;
    if let Some(stages) = &mut cfg.train.curriculum {
        stages[0].steps = 1;
        stages[1].steps = 2;
    }
    cfg.eval.truncate(3);
    cfg.curves.truncate(1);
    cfg.eval_options.n_runs = 4;
    cfg.eval_options.ranges = vec![PosRange::new(1, 4), PosRange::new(5, 8)];
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(format!("{}.json", cfg.name));
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn train_creates_run_directory_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg_path = write_config(tmp.path(), &tiny_config("convex_cfl", &out));
    let run_id = stdout(&icl(&["train", "--config", cfg_path.to_str().unwrap()])).trim().to_string();
    let run_dir = out.join("runs").join(&run_id);
    for f in ["final.iclm", "record.json", "config.json", "loss.csv", "report.csv", "table.md", "curve.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    assert!(files_under(tmp.path()).iter().all(|p| p.starts_with(&out) || *p == cfg_path));
    let report = read_report_file(&run_dir.join("report.csv")).unwrap();
    assert_eq!(report.len(), 3 * 2);
    assert_eq!(read_curve_csv(fs::File::open(run_dir.join("curve.csv")).unwrap()).unwrap().len(), 200);
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny_config("convex_baseline", &out);
    cfg.eval.clear();
    cfg.curves.clear();
    cfg.train.seed = 3;
    let p = write_config(tmp.path(), &cfg);
    let p = p.to_str().unwrap();
    let seed_of = |o: Output| {
        let id = stdout(&o).trim().to_string();
        RunRecord::read(&out.join("runs").join(id)).unwrap().seed
    };
    assert_eq!(seed_of(icl(&["train", "--config", p])), 3);
    assert_eq!(seed_of(icl_env(&["train", "--config", p], "11")), 11);
    assert_eq!(seed_of(icl_env(&["train", "--config", p, "--seed", "7"], "11")), 7);
    assert_eq!(icl_env(&["train", "--config", p], "x").status.code(), Some(2));
}

#[test]
fn reuse_skips_training_for_identical_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny_config("convex_baseline", &out);
    cfg.eval.clear();
    cfg.curves.clear();
    let p = write_config(tmp.path(), &cfg);
    let p = p.to_str().unwrap();
    let first = stdout(&icl(&["train", "--config", p, "--reuse"]));
    let second = stdout(&icl(&["train", "--config", p, "--reuse"]));
    assert_eq!(first, second);
    let third = stdout(&icl(&["train", "--config", p, "--reuse", "--seed", "5"]));
    assert_ne!(first, third);
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    let o = icl(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));

    let garbled = tmp.path().join("garbled.json");
    fs::write(&garbled, "{ not json").unwrap();
    assert_eq!(icl(&["train", "--config", garbled.to_str().unwrap()]).status.code(), Some(2));

    let bad_template = tmp.path().join("bad.json");
    let text = tiny_config("convex_cfl", tmp.path()).to_json().replace("\"sin:1\"", "\"sine:1\"");
    fs::write(&bad_template, text).unwrap();
    assert_eq!(icl(&["train", "--config", bad_template.to_str().unwrap()]).status.code(), Some(2));

    assert_eq!(icl(&["recipe", "no_such_recipe"]).status.code(), Some(2));

    let mut cfg = tiny_config("convex_baseline", &tmp.path().join("div"));
    cfg.train.learning_rate = 1e30;
    cfg.train.steps = 20;
    let p = write_config(tmp.path(), &cfg);
    let o = icl(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let junk = tmp.path().join("junk.iclm");
    fs::write(&junk, b"ICLMxxxx").unwrap();
    assert_eq!(icl(&["eval", junk.to_str().unwrap(), "--tasks", "sin:1"]).status.code(), Some(4));
    assert_eq!(icl(&["describe", junk.to_str().unwrap()]).status.code(), Some(4));
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let out = dir.join("out");
    let mut cfg = tiny_config("convex_baseline", &out);
    cfg.eval.clear();
    cfg.curves.clear();
    let p = write_config(dir, &cfg);
    let id = stdout(&icl(&["train", "--config", p.to_str().unwrap()])).trim().to_string();
    out.join("runs").join(id).join("final.iclm")
}

#[test]
fn eval_trace_table_and_describe() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(tmp.path());
    let ck = ckpt.to_str().unwrap();

    let a = tmp.path().join("a");
    stdout(&icl(&["eval", ck, "--tasks", "add(sin:1,cos:2)", "--runs", "8", "--ranges", "1-4,5-8", "--out", a.to_str().unwrap()]));
    let rows = read_report_file(&a.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.task == "add(sin:1, cos:2)" && r.noise_mode == "none" && r.oor_mode == "none"));
    assert!(a.join("table.md").is_file());

    let b = tmp.path().join("b");
    stdout(&icl(&[
        "eval", ck, "--tasks", "sin:1;cos:1", "--runs", "8", "--noise", "full:2", "--oor", "both:2:io",
        "--with-clean", "--ranges", "1-4,8", "--model-id", "other", "--out", b.to_str().unwrap(),
    ]));
    let rows = read_report_file(&b.join("report.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    let full = rows.iter().find(|r| r.noise_mode == "full").unwrap();
    assert_eq!(full.noise_strength, 2.0);
    let oor = rows.iter().find(|r| r.oor_mode != "none").unwrap();
    assert_eq!((oor.oor_mode.as_str(), oor.oor_placement.as_str()), ("input_and_output2", "both"));
    assert!(rows.iter().any(|r| r.range == "8"));

    let merged = tmp.path().join("merged.csv");
    let table = stdout(&icl(&[
        "table",
        a.join("report.csv").to_str().unwrap(),
        b.join("report.csv").to_str().unwrap(),
        "--csv",
        merged.to_str().unwrap(),
    ]));
    assert!(table.contains("other"));
    assert_eq!(read_report_file(&merged).unwrap().len(), 2 + 12);

    let curve = tmp.path().join("c").join("curve.csv");
    stdout(&icl(&["trace", ck, "--task", "sin:1", "--task", "cos:2", "--grid", "50", "--out", curve.to_str().unwrap()]));
    assert_eq!(read_curve_csv(fs::File::open(&curve).unwrap()).unwrap().len(), 100);

    let desc = stdout(&icl(&["describe", ck]));
    assert!(desc.contains("transformer"));
    assert!(desc.lines().count() > 5);
}

#[test]
fn recipe_output_round_trips_losslessly() {
    for name in icl_core::experiment::RECIPES {
        for scale in ["full", "desk"] {
            let text = stdout(&icl(&["recipe", name, "--scale", scale]));
            let cfg = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(cfg.to_json() + "\n", text, "{name} {scale}");
            let canon: serde_json::Value = serde_json::from_str(&text).unwrap();
            let again: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(canon, again);
        }
    }
}

#[test]
fn recipe_examples() {
    let get = |args: &[&str]| -> serde_json::Value { serde_json::from_str(&stdout(&icl(args))).unwrap() };
    let p = get(&["recipe", "product_cfl4", "--scale", "desk"]);
    let templates: Vec<&str> = p["mixture"].as_array().unwrap().iter().map(|e| e["template"].as_str().unwrap()).collect();
    assert_eq!(templates.len(), 8);
    assert_eq!(templates.iter().filter(|t| t.starts_with("mul(")).count(), 4);
    assert_eq!(p["model"]["n_layers"], 3);
    assert_eq!(p["model"]["embed_dim"], 64);
    assert_eq!(p["train"]["steps"], 5000);

    let c = get(&["recipe", "curriculum"]);
    let stages = c["train"]["curriculum"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert!(stages.iter().all(|s| s["steps"] == 25000));

    let s = get(&["recipe", "sixteen_class"]);
    let mut names: Vec<&str> = s["mixture"].as_array().unwrap().iter().map(|e| e["template"].as_str().unwrap()).collect();
    names.sort();
    let mut want: Vec<String> = (1..=8).flat_map(|k| [format!("sin:{k}"), format!("cos:{k}")]).collect();
    want.sort();
    assert_eq!(names, want);
}

#[test]
fn every_recipe_runs_end_to_end_when_shrunk() {
    let tmp = tempfile::tempdir().unwrap();
    for name in icl_core::experiment::RECIPES {
        let out = tmp.path().join(name);
        let p = write_config(tmp.path(), &tiny_config(name, &out));
        let id = stdout(&icl(&["train", "--config", p.to_str().unwrap(), "--log-every", "0"])).trim().to_string();
        assert!(out.join("runs").join(id).join("report.csv").is_file(), "{name}");
    }
}
