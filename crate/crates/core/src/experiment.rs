//! Experiment configs, named recipes and the train-then-evaluate driver.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{
    combination_tasks, evaluate_se, render_table, report_records, standard_eval_tasks, trace_curve, write_curve_csv,
    write_report_csv, EvalConfig, PosRange, Predictor, SweepRow, DEFAULT_RANGES,
};
use crate::funcspace::{legendre_dictionary, CompositeExpr, Op};
use crate::model::{load_checkpoint, MlpConfig, ModelConfig, ModelParams, TransformerConfig};
use crate::sampler::{NoiseMode, OorMode, PerturbationSpec, Placement, SamplerConfig, ScaleRegime, TaskMixture};
use crate::trainer::{standard_mixture, train, CurriculumStage, MixtureId, RunConfig, RunOutput, RunRecord, StepReport, TrainConfig};

pub const RECIPES: [&str; 15] = [
    "convex_baseline",
    "convex_cfl",
    "product_cfl1",
    "product_cfl2",
    "product_cfl4",
    "composition_cfl1",
    "composition_cfl2",
    "composition_cfl4",
    "reversed",
    "curriculum",
    "legendre",
    "sixteen_class",
    "mlp_baseline",
    "noise_sweep",
    "oor_sweep",
];

pub const DESK_STEPS: usize = 5000;
pub const DESK_BATCH: usize = 64;
pub const DESK_LEARNING_RATE: f64 = 1e-3;
pub const DESK_WARMUP: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Unknown { kind: "scale", name: s.to_string() }),
        }
    }
}

/// A standard mixture by name, or an explicit list of entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MixtureSpec {
    Named(String),
    Inline(TaskMixture),
}

impl MixtureSpec {
    pub fn resolve(&self) -> Result<TaskMixture> {
        match self {
            MixtureSpec::Named(name) => Ok(standard_mixture(name.parse::<MixtureId>()?)),
            MixtureSpec::Inline(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub template: CompositeExpr,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(rename = "_notes", default)]
    pub notes: Vec<String>,
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Absent when `train.curriculum` lists the mixtures.
    #[serde(default)]
    pub mixture: Option<MixtureSpec>,
    #[serde(default)]
    pub eval: Vec<EvalItem>,
    #[serde(default)]
    pub eval_options: EvalConfig,
    /// Templates traced after `n_points − 1` context points.
    #[serde(default)]
    pub curves: Vec<CompositeExpr>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mixture = match (&self.mixture, &self.train.curriculum) {
            (Some(m), _) => Some(m.resolve()?),
            (None, Some(_)) => None,
            (None, None) => return Err(Error::config(format!("experiment `{}` has no mixture", self.name))),
        };
        Ok(RunConfig { model: self.model.clone(), train: self.train.clone(), sampler: self.sampler.clone(), mixture })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("experiment name `{}` is not a plain file name", self.name)));
        }
        self.run_config()?.validate()?;
        for item in &self.eval {
            item.perturbation.validate()?;
        }
        Ok(())
    }

    /// Replaces every seed (training and evaluation).
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval_options.seed = seed;
    }

    /// Desk profile: 3 layers, width 64, 4 heads, 5000 steps of 64
    /// sequences. Curriculum stages keep their proportions.
    pub fn to_desk(&mut self) {
        match &mut self.model {
            ModelConfig::Transformer(t) => {
                *t = TransformerConfig { embed_dim: 64, n_layers: 3, n_heads: 4, ..*t };
            }
            ModelConfig::Mlp(m) => m.hidden = vec![64; 3],
        }
        let old = self.train.steps.max(1);
        if let Some(stages) = &mut self.train.curriculum {
            let mut left = DESK_STEPS;
            let n = stages.len();
            for (i, s) in stages.iter_mut().enumerate() {
                s.steps = if i + 1 == n { left } else { s.steps * DESK_STEPS / old };
                left -= s.steps;
            }
        }
        self.train.steps = DESK_STEPS;
        self.train.batch_size = DESK_BATCH;
        self.train.learning_rate = DESK_LEARNING_RATE;
        self.train.warmup_steps = DESK_WARMUP;
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }
}

fn clean(tasks: Vec<CompositeExpr>) -> Vec<EvalItem> {
    tasks.into_iter().map(|template| EvalItem { template, perturbation: PerturbationSpec::none() }).collect()
}

fn crossed(tasks: &[CompositeExpr], perturbations: &[PerturbationSpec]) -> Vec<EvalItem> {
    perturbations
        .iter()
        .flat_map(|p| tasks.iter().map(move |t| EvalItem { template: t.clone(), perturbation: *p }))
        .collect()
}

/// Clean prompts plus label noise of strength 1 and 2, on 10 points or all.
pub fn noise_grid() -> Vec<PerturbationSpec> {
    let mut out = vec![PerturbationSpec::none()];
    for s in [1.0, 2.0] {
        out.push(PerturbationSpec::noise(NoiseMode::Partial { count: 10 }, s));
        out.push(PerturbationSpec::noise(NoiseMode::Full, s));
    }
    out
}

/// Clean prompts plus 10 out-of-range points, input-only and with output
/// offset, at every placement.
pub fn oor_grid() -> Vec<PerturbationSpec> {
    let mut out = vec![PerturbationSpec::none()];
    for mode in [OorMode::InputOnly, OorMode::InputAndOutput] {
        for pl in [Placement::Prepend, Placement::Append, Placement::Both] {
            out.push(PerturbationSpec::oor(mode, 10, pl));
        }
    }
    out
}

/// Fully expanded config for a named recipe.
pub fn recipe(name: &str, scale: Scale) -> Result<ExperimentConfig> {
    let transformer = ModelConfig::Transformer(TransformerConfig::default());
    let train = |steps: usize, scale_up: Option<ScaleRegime>| TrainConfig { steps, scale_up, ..TrainConfig::default() };
    let named = |id: MixtureId| Some(MixtureSpec::Named(id.name().to_string()));
    let add_tasks = standard_eval_tasks(Op::Add);
    let mul_tasks = standard_eval_tasks(Op::Mul);
    let mut comp_tasks: Vec<CompositeExpr> = standard_eval_tasks(Op::Add)[..4].to_vec();
    comp_tasks.extend(combination_tasks(Op::Compose, &crate::funcspace::sinusoid_dictionary()));

    let (notes, model, train, mixture, eval, ranges): (&str, _, _, _, _, Vec<PosRange>) = match name {
        "convex_baseline" => (
            "Baseline of the convex-combination experiment: five single classes, 20% of draws scaled up.",
            transformer,
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::ConvexBaseline),
            clean(add_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "convex_cfl" => (
            "Convex-combination learner: four single classes plus add(sin:1, sin:2).",
            transformer,
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::ConvexCfl),
            clean(add_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "product_cfl1" | "product_cfl2" | "product_cfl4" => (
            "Product learner with 1, 2 or 4 of the pairs sin:1*sin:2, sin:1*cos:1, cos:1*cos:2, sin:2*cos:2.",
            transformer,
            train(50_000, Some(ScaleRegime::Product)),
            named(name.parse()?),
            clean(mul_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "composition_cfl1" | "composition_cfl2" | "composition_cfl4" => (
            "Composition learner with 1, 2 or 4 composed pairs; composition runs train twice as long.",
            transformer,
            train(100_000, None),
            named(name.parse()?),
            clean(comp_tasks),
            DEFAULT_RANGES.to_vec(),
        ),
        "reversed" => (
            "Roles reversed: trained only on four pairwise sums, evaluated on single classes. Use mixture reversed_cfl for the learner that also sees sin:1.",
            transformer,
            train(50_000, None),
            named(MixtureId::ReversedBaseline),
            clean(add_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "curriculum" => {
            let combos = TaskMixture::uniform(vec!["mul(sin:1, sin:2)".parse()?])?;
            let mut t = train(50_000, None);
            t.curriculum = Some(vec![
                CurriculumStage { mixture: standard_mixture(MixtureId::FourBase), steps: 25_000 },
                CurriculumStage { mixture: combos, steps: 25_000 },
            ]);
            (
                "Two stages: single classes only, then the product pair only.",
                transformer,
                t,
                None,
                clean(mul_tasks.clone()),
                DEFAULT_RANGES.to_vec(),
            )
        }
        "legendre" => {
            let dict = legendre_dictionary();
            let mut tasks: Vec<CompositeExpr> = dict.iter().map(|b| CompositeExpr::leaf(*b)).collect();
            tasks.extend(combination_tasks(Op::Add, &dict));
            (
                "Polynomial dictionary baseline. Use mixture legendre_cfl for the learner that also sees add(legendre1, legendre3).",
                transformer,
                train(50_000, Some(ScaleRegime::Convex)),
                named(MixtureId::LegendreBaseline),
                clean(tasks),
                DEFAULT_RANGES.to_vec(),
            )
        }
        "sixteen_class" => (
            "Sixteen single classes: sin and cos at frequencies 1 to 8.",
            transformer,
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::SixteenClass),
            clean(add_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "mlp_baseline" => (
            "MLP on the convex baseline mixture; it sees 39 pairs and the 40th input, missing pairs zero-filled.",
            ModelConfig::Mlp(MlpConfig::default()),
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::ConvexBaseline),
            clean(add_tasks.clone()),
            DEFAULT_RANGES.to_vec(),
        ),
        "noise_sweep" => (
            "Convex baseline under label noise; position 40 is reported separately.",
            transformer,
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::ConvexBaseline),
            crossed(&add_tasks, &noise_grid()),
            [&DEFAULT_RANGES[..], &[PosRange::new(40, 40)]].concat(),
        ),
        "oor_sweep" => (
            "Convex baseline with 10 out-of-range examples; inserted points replace clean ones so prompts keep 40 points.",
            transformer,
            train(50_000, Some(ScaleRegime::Convex)),
            named(MixtureId::ConvexBaseline),
            crossed(&add_tasks, &oor_grid()),
            [&DEFAULT_RANGES[..], &[PosRange::new(20, 20), PosRange::new(30, 30), PosRange::new(40, 40)]].concat(),
        ),
        _ => return Err(Error::Unknown { kind: "recipe", name: name.to_string() }),
    };
    let curves = eval
        .iter()
        .filter(|i| i.perturbation == PerturbationSpec::none())
        .map(|i| i.template.clone())
        .collect();
    let mut cfg = ExperimentConfig {
        notes: vec![notes.to_string()],
        name: name.to_string(),
        model,
        train,
        mixture,
        eval,
        eval_options: EvalConfig { ranges, ..EvalConfig::default() },
        curves,
        sampler: SamplerConfig::default(),
        output_dir: PathBuf::from("out").join(name),
    };
    if let Some(m) = &cfg.mixture {
        cfg.mixture = Some(MixtureSpec::Inline(m.resolve()?));
    }
    if scale == Scale::Desk {
        cfg.to_desk();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `full:S`, `partial:S` or `partial:S:COUNT` (COUNT defaults to 10).
pub fn parse_noise_flag(s: &str) -> Result<PerturbationSpec> {
    let bad = || Error::config(format!("noise flag `{s}` is not full:S, partial:S or partial:S:COUNT"));
    let parts: Vec<&str> = s.split(':').collect();
    let strength: f64 = parts.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mode = match (parts[0], parts.len()) {
        ("full", 2) => NoiseMode::Full,
        ("partial", 2) => NoiseMode::Partial { count: 10 },
        ("partial", 3) => NoiseMode::Partial { count: parts[2].parse().map_err(|_| bad())? },
        _ => return Err(bad()),
    };
    let spec = PerturbationSpec::noise(mode, strength);
    spec.validate()?;
    Ok(spec)
}

/// Parses `PLACEMENT:COUNT:MODE` with placement prepend/append/both and mode
/// `in` (input only) or `io` (input and output).
pub fn parse_oor_flag(s: &str) -> Result<PerturbationSpec> {
    let bad = || Error::config(format!("oor flag `{s}` is not PLACEMENT:COUNT:MODE"));
    let parts: Vec<&str> = s.split(':').collect();
    let [placement, count, mode] = parts.as_slice() else { return Err(bad()) };
    let placement = match *placement {
        "prepend" => Placement::Prepend,
        "append" => Placement::Append,
        "both" => Placement::Both,
        _ => return Err(bad()),
    };
    let mode = match *mode {
        "in" => OorMode::InputOnly,
        "io" => OorMode::InputAndOutput,
        _ => return Err(bad()),
    };
    let spec = PerturbationSpec::oor(mode, count.parse().map_err(|_| bad())?, placement);
    spec.validate()?;
    Ok(spec)
}

/// Evaluates `(template, perturbation)` pairs in order.
pub fn evaluate_items(
    model_id: &str,
    model: &dyn Predictor,
    items: &[EvalItem],
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    items
        .iter()
        .map(|i| {
            Ok(SweepRow {
                model_id: model_id.to_string(),
                report: evaluate_se(model, &i.template, sampler, &i.perturbation, cfg)?,
            })
        })
        .collect()
}

/// Writes `report.csv` and `table.md` into `dir`.
pub fn write_reports(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records = report_records(rows);
    write_report_csv(BufWriter::new(File::create(dir.join("report.csv"))?), &records)?;
    fs::write(dir.join("table.md"), render_table(&records))?;
    Ok(())
}

pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub params: ModelParams<f32>,
    pub rows: Vec<SweepRow>,
    /// True when an earlier identical run was reused instead of training.
    pub reused: bool,
}

/// An earlier completed run under `runs_dir` with exactly this config.
pub fn find_completed_run(runs_dir: &Path, config: &RunConfig) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs_dir).ok()?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    dirs.into_iter().find(|d| {
        d.join("final.iclm").is_file() && RunRecord::read(d).map(|r| &r.config == config).unwrap_or(false)
    })
}

/// Trains (or, with `reuse`, picks up an identical finished run), then runs
/// the evaluation plan and curve traces, writing everything into the run
/// directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    reuse: bool,
    progress: impl FnMut(&StepReport),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let run_cfg = cfg.run_config()?;
    let existing = if reuse { find_completed_run(&cfg.runs_dir(), &run_cfg) } else { None };
    let (run_dir, record, params, reused) = match existing {
        Some(dir) => {
            let record = RunRecord::read(&dir)?;
            let params = load_checkpoint(&dir.join("final.iclm"))?;
            (dir, record, params, true)
        }
        None => {
            let out = RunOutput { runs_dir: cfg.runs_dir(), label: cfg.name.clone() };
            let res = train(&run_cfg, Some(&out), progress)?;
            (res.run_dir.expect("run dir requested"), res.record, res.params, false)
        }
    };
    let rows = evaluate_items(&record.run_id, &params, &cfg.eval, &cfg.sampler, &cfg.eval_options)?;
    if !rows.is_empty() {
        write_reports(&run_dir, &rows)?;
    }
    if !cfg.curves.is_empty() {
        let ctx = cfg.sampler.n_points - 1;
        let curves = cfg
            .curves
            .iter()
            .map(|t| trace_curve(&params, t, &cfg.sampler, ctx, 200, cfg.eval_options.seed))
            .collect::<Result<Vec<_>>>()?;
        write_curve_csv(BufWriter::new(File::create(run_dir.join("curve.csv"))?), &record.run_id, &curves)?;
    }
    Ok(ExperimentOutcome { run_dir, record, params, rows, reused })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_recipe_validates_at_both_scales() {
        for name in RECIPES {
            for scale in [Scale::Full, Scale::Desk] {
                let cfg = recipe(name, scale).unwrap();
                assert_eq!(cfg.name, name);
            }
        }
        assert!(recipe("nope", Scale::Full).is_err());
    }

    #[test]
    fn desk_profile() {
        let cfg = recipe("curriculum", Scale::Desk).unwrap();
        assert_eq!(cfg.model, ModelConfig::Transformer(TransformerConfig { embed_dim: 64, n_layers: 3, n_heads: 4, n_points: 40, dropout: 0.0 }));
        assert_eq!((cfg.train.steps, cfg.train.batch_size), (5000, 64));
        let stages: Vec<usize> = cfg.train.curriculum.unwrap().iter().map(|s| s.steps).collect();
        assert_eq!(stages, vec![2500, 2500]);
    }

    #[test]
    fn named_and_inline_mixtures_resolve() {
        let named: MixtureSpec = serde_json::from_str("\"convex_cfl\"").unwrap();
        assert_eq!(named.resolve().unwrap(), standard_mixture(MixtureId::ConvexCfl));
        let inline: MixtureSpec =
            serde_json::from_str(r#"[{"template": "sin:1", "probability": 0.5}, {"template": "cos:1", "probability": 0.5}]"#).unwrap();
        assert_eq!(inline.resolve().unwrap().entries().len(), 2);
        assert!(MixtureSpec::Named("bogus".into()).resolve().is_err());
    }

    #[test]
    fn perturbation_flags() {
        let n = parse_noise_flag("full:2").unwrap();
        assert_eq!((n.noise_mode, n.noise_strength), (NoiseMode::Full, 2.0));
        assert_eq!(parse_noise_flag("partial:1").unwrap().noise_mode, NoiseMode::Partial { count: 10 });
        assert_eq!(parse_noise_flag("partial:1:5").unwrap().noise_mode, NoiseMode::Partial { count: 5 });
        let o = parse_oor_flag("both:10:io").unwrap();
        assert_eq!((o.oor_placement, o.oor_count, o.oor_mode), (Placement::Both, 10, OorMode::InputAndOutput));
        assert_eq!(parse_oor_flag("append:3:in").unwrap().oor_mode, OorMode::InputOnly);
        for bad in ["full", "full:x", "half:2", "partial:1:2:3", "full:-1"] {
            assert!(parse_noise_flag(bad).is_err(), "{bad}");
        }
        for bad in ["both:10", "both:3:io", "middle:2:in", "both:2:out"] {
            assert!(parse_oor_flag(bad).is_err(), "{bad}");
        }
    }
}
