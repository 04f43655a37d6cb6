//! Training loop: fresh batches every step, AdamW updates, optional
//! two-stage curriculum, run-directory persistence.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcspace::{BaseClass, CompositeExpr};
use crate::model::{save_checkpoint, ModelConfig, ModelParams, Scalar, Workspace};
use crate::rng::{derive_seed, par_map, stream_rng};
use crate::sampler::{build_prompt, MixtureContext, PerturbationSpec, PromptSequence, SamplerConfig, ScaleRegime, TaskMixture};

const INIT_SALT: u64 = 1;
const DATA_SALT: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adamw { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adamw { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub mixture: TaskMixture,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerConfig,
    /// Linear warmup length; 0 keeps the rate constant.
    pub warmup_steps: usize,
    pub curriculum: Option<Vec<CurriculumStage>>,
    /// Weight scale-up for single-class templates of mixtures without
    /// combination templates.
    pub scale_up: Option<ScaleRegime>,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Batch generation threads. Results do not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 128,
            learning_rate: 5e-5,
            weight_decay: 0.0,
            optimizer: OptimizerConfig::default(),
            warmup_steps: 0,
            curriculum: None,
            scale_up: None,
            seed: 0,
            checkpoint_every: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        let OptimizerConfig::Adamw { beta1, beta2, eps } = self.optimizer;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::config("AdamW needs betas in [0, 1) and eps > 0"));
        }
        if let Some(stages) = &self.curriculum {
            if stages.is_empty() {
                return Err(Error::config("curriculum has no stages"));
            }
            let total: usize = stages.iter().map(|s| s.steps).sum();
            if total != self.steps {
                return Err(Error::config(format!(
                    "curriculum stages sum to {total} steps, config says {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize, optimizer: OptimizerConfig, weight_decay: f64) -> Self {
        let OptimizerConfig::Adamw { beta1, beta2, eps } = optimizer;
        AdamW { beta1, beta2, eps, weight_decay, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p = *p * decay - step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

/// Named training mixtures. All are uniform over their templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureId {
    /// sin:1, cos:1, sin:2, cos:2, sin:3
    ConvexBaseline,
    /// The four sinusoid classes plus add(sin:1, sin:2).
    ConvexCfl,
    /// The four sinusoid classes alone.
    FourBase,
    ProductCfl1,
    ProductCfl2,
    ProductCfl4,
    CompositionCfl1,
    CompositionCfl2,
    CompositionCfl4,
    ReversedBaseline,
    ReversedCfl,
    LegendreBaseline,
    LegendreCfl,
    SixteenClass,
}

impl MixtureId {
    pub const ALL: [MixtureId; 14] = [
        MixtureId::ConvexBaseline,
        MixtureId::ConvexCfl,
        MixtureId::FourBase,
        MixtureId::ProductCfl1,
        MixtureId::ProductCfl2,
        MixtureId::ProductCfl4,
        MixtureId::CompositionCfl1,
        MixtureId::CompositionCfl2,
        MixtureId::CompositionCfl4,
        MixtureId::ReversedBaseline,
        MixtureId::ReversedCfl,
        MixtureId::LegendreBaseline,
        MixtureId::LegendreCfl,
        MixtureId::SixteenClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixtureId::ConvexBaseline => "convex_baseline",
            MixtureId::ConvexCfl => "convex_cfl",
            MixtureId::FourBase => "four_base",
            MixtureId::ProductCfl1 => "product_cfl1",
            MixtureId::ProductCfl2 => "product_cfl2",
            MixtureId::ProductCfl4 => "product_cfl4",
            MixtureId::CompositionCfl1 => "composition_cfl1",
            MixtureId::CompositionCfl2 => "composition_cfl2",
            MixtureId::CompositionCfl4 => "composition_cfl4",
            MixtureId::ReversedBaseline => "reversed_baseline",
            MixtureId::ReversedCfl => "reversed_cfl",
            MixtureId::LegendreBaseline => "legendre_baseline",
            MixtureId::LegendreCfl => "legendre_cfl",
            MixtureId::SixteenClass => "sixteen_class",
        }
    }
}

impl fmt::Display for MixtureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixtureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixtureId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown { kind: "mixture", name: s.to_string() })
    }
}

fn leaf(b: BaseClass) -> CompositeExpr {
    CompositeExpr::leaf(b)
}

fn pair(op: fn(Vec<CompositeExpr>) -> Result<CompositeExpr>, a: BaseClass, b: BaseClass) -> CompositeExpr {
    op(vec![leaf(a), leaf(b)]).expect("two children")
}

fn compose(a: BaseClass, b: BaseClass) -> CompositeExpr {
    CompositeExpr::compose(leaf(a), leaf(b))
}

/// The pairs F1·F3, F1·F2, F2·F4, F3·F4 in the order the CFL variants add them.
fn combination_pairs() -> [(BaseClass, BaseClass); 4] {
    let (s1, c1, s2, c2) = (BaseClass::sin(1), BaseClass::cos(1), BaseClass::sin(2), BaseClass::cos(2));
    [(s1, s2), (s1, c1), (c1, c2), (s2, c2)]
}

fn four_base() -> Vec<CompositeExpr> {
    crate::funcspace::sinusoid_dictionary().into_iter().map(leaf).collect()
}

pub fn standard_mixture(id: MixtureId) -> TaskMixture {
    let (s1, c1, s2, c2) = (BaseClass::sin(1), BaseClass::cos(1), BaseClass::sin(2), BaseClass::cos(2));
    let with_pairs = |k: usize, make: &dyn Fn(BaseClass, BaseClass) -> CompositeExpr| {
        let mut t = four_base();
        t.extend(combination_pairs()[..k].iter().map(|&(a, b)| make(a, b)));
        t
    };
    let mul = |a, b| pair(CompositeExpr::mul, a, b);
    let templates = match id {
        MixtureId::ConvexBaseline => {
            let mut t = four_base();
            t.push(leaf(BaseClass::sin(3)));
            t
        }
        MixtureId::ConvexCfl => {
            let mut t = four_base();
            t.push(pair(CompositeExpr::add, s1, s2));
            t
        }
        MixtureId::FourBase => four_base(),
        MixtureId::ProductCfl1 => with_pairs(1, &mul),
        MixtureId::ProductCfl2 => with_pairs(2, &mul),
        MixtureId::ProductCfl4 => with_pairs(4, &mul),
        MixtureId::CompositionCfl1 => with_pairs(1, &compose),
        MixtureId::CompositionCfl2 => with_pairs(2, &compose),
        MixtureId::CompositionCfl4 => with_pairs(4, &compose),
        MixtureId::ReversedBaseline | MixtureId::ReversedCfl => {
            let add = |a, b| pair(CompositeExpr::add, a, b);
            let mut t = vec![add(s1, c1), add(s1, c2), add(c1, s2), add(s2, c2)];
            if id == MixtureId::ReversedCfl {
                t.push(leaf(s1));
            }
            t
        }
        MixtureId::LegendreBaseline | MixtureId::LegendreCfl => {
            let mut t: Vec<_> = crate::funcspace::legendre_dictionary().into_iter().map(leaf).collect();
            if id == MixtureId::LegendreCfl {
                t.push(pair(CompositeExpr::add, BaseClass::legendre(1), BaseClass::legendre(3)));
            }
            t
        }
        MixtureId::SixteenClass => (1..=8).flat_map(|k| [leaf(BaseClass::sin(k)), leaf(BaseClass::cos(k))]).collect(),
    };
    TaskMixture::uniform(templates).expect("non-empty standard mixture")
}

/// Parses a mixture name; see [`MixtureId`].
pub fn standard_mixtures(name: &str) -> Result<TaskMixture> {
    Ok(standard_mixture(name.parse()?))
}

/// Active mixture plus its scale-up context, if any.
pub struct Stage<'a> {
    pub mixture: &'a TaskMixture,
    scale: Option<MixtureContext>,
}

impl<'a> Stage<'a> {
    pub fn new(mixture: &'a TaskMixture, regime: Option<ScaleRegime>, sampler: &SamplerConfig) -> Result<Self> {
        let baseline = !mixture.templates().any(CompositeExpr::is_combination);
        let scale = match regime {
            Some(r) if baseline => Some(MixtureContext::new(mixture, r, sampler.domain())?),
            _ => None,
        };
        Ok(Stage { mixture, scale })
    }
}

/// Sequence `j` of step `step` uses stream `step · batch_size + j`, which
/// picks its template and then builds the prompt.
pub fn sample_training_batch(
    stage: &Stage<'_>,
    sampler: &SamplerConfig,
    batch_size: usize,
    seed: u64,
    step: usize,
    workers: usize,
) -> Result<Vec<PromptSequence>> {
    let first = (step * batch_size) as u64;
    par_map(batch_size, workers, |j| {
        let mut rng = stream_rng(seed, first + j as u64);
        let template = stage.mixture.sample(&mut rng);
        build_prompt(template, sampler, &PerturbationSpec::none(), stage.scale.as_ref(), &mut rng)
    })
    .into_iter()
    .collect()
}

/// Stages of a run with their cumulative step boundaries.
pub struct Schedule<'a> {
    stages: Vec<(Stage<'a>, usize)>,
    sampler: &'a SamplerConfig,
    batch_size: usize,
    seed: u64,
    workers: usize,
}

impl<'a> Schedule<'a> {
    pub fn new(config: &'a RunConfig) -> Result<Self> {
        let mut end = 0;
        let stages = config
            .stages()
            .into_iter()
            .map(|(mixture, steps)| {
                end += steps;
                Ok((Stage::new(mixture, config.train.scale_up, &config.sampler)?, end))
            })
            .collect::<Result<_>>()?;
        Ok(Schedule {
            stages,
            sampler: &config.sampler,
            batch_size: config.train.batch_size,
            seed: derive_seed(config.train.seed, DATA_SALT),
            workers: config.train.workers,
        })
    }

    /// Stage active at 0-based `step`.
    pub fn stage_at(&self, step: usize) -> Option<&Stage<'a>> {
        self.stages.iter().find(|(_, end)| step < *end).map(|(s, _)| s)
    }

    pub fn total_steps(&self) -> usize {
        self.stages.last().map_or(0, |(_, end)| *end)
    }

    pub fn batch(&self, step: usize) -> Result<Vec<PromptSequence>> {
        let stage = self
            .stage_at(step)
            .ok_or_else(|| Error::config(format!("step {step} is past the end of the schedule")))?;
        sample_training_batch(stage, self.sampler, self.batch_size, self.seed, step, self.workers)
    }
}

/// Everything a run was started from; written as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Ignored when `train.curriculum` is set.
    pub mixture: Option<TaskMixture>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.sampler.n_points != self.model.n_points() {
            return Err(Error::config(format!(
                "sampler draws {} points but the model expects {}",
                self.sampler.n_points,
                self.model.n_points()
            )));
        }
        if self.train.curriculum.is_none() && self.mixture.is_none() {
            return Err(Error::EmptyMixture);
        }
        Ok(())
    }

    /// `(mixture, steps)` in execution order.
    pub fn stages(&self) -> Vec<(&TaskMixture, usize)> {
        match (&self.train.curriculum, &self.mixture) {
            (Some(stages), _) => stages.iter().map(|s| (&s.mixture, s.steps)).collect(),
            (None, Some(m)) => vec![(m, self.train.steps)],
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub loss_trace: Vec<(usize, f64)>,
    pub optimizer_steps: usize,
    pub sequences_consumed: usize,
    pub parameter_count: usize,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
    pub final_checkpoint: Option<String>,
}

impl RunRecord {
    pub fn read(run_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(run_dir.join("record.json"))?)?)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub record: RunRecord,
    pub run_dir: Option<PathBuf>,
}

/// Where a run persists its artifacts: `runs_dir/<run_id>/`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub runs_dir: PathBuf,
    pub label: String,
}

/// First free id among `label`, `label-2`, `label-3`, …
pub fn allocate_run_id(runs_dir: &Path, label: &str) -> String {
    let mut id = label.to_string();
    let mut k = 2;
    while runs_dir.join(&id).exists() {
        id = format!("{label}-{k}");
        k += 1;
    }
    id
}

/// Per-step observation passed to the progress callback.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: usize,
    pub steps: usize,
    pub loss: f64,
    pub elapsed_secs: f64,
}

pub fn initial_params(config: &RunConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(config.model.clone(), derive_seed(config.train.seed, INIT_SALT))
}

pub fn train(
    config: &RunConfig,
    output: Option<&RunOutput>,
    mut progress: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let cfg = &config.train;
    let mut params = initial_params(config)?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());

    let (run_id, run_dir) = match output {
        Some(out) => {
            fs::create_dir_all(&out.runs_dir)?;
            let id = allocate_run_id(&out.runs_dir, &out.label);
            let dir = out.runs_dir.join(&id);
            fs::create_dir(&dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
            (id, Some(dir))
        }
        None => ("in-memory".to_string(), None),
    };
    let mut loss_csv = match &run_dir {
        Some(dir) => {
            let mut w = BufWriter::new(File::create(dir.join("loss.csv"))?);
            writeln!(w, "step,loss")?;
            Some(w)
        }
        None => None,
    };

    let schedule = Schedule::new(config)?;
    let mut opt = AdamW::<f32>::new(params.count(), cfg.optimizer, cfg.weight_decay);
    let mut ws = Workspace::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut consumed = 0;
    for step in 0..schedule.total_steps() {
        let batch = schedule.batch(step)?;
        consumed += batch.len();
        let (loss, grad) = params.loss_and_grad_in(&batch, &mut ws)?;
        if !loss.is_finite() {
            let mut names: Vec<String> = batch.iter().map(|s| s.truth.template_text()).collect();
            names.sort();
            names.dedup();
            return Err(Error::Divergence { step: step + 1, loss, templates: names.join("; ") });
        }
        opt.step(params.data_mut(), grad.data(), cfg.lr_at(step));
        let done = step + 1;
        trace.push((done, loss));
        if let Some(w) = &mut loss_csv {
            writeln!(w, "{done},{loss}")?;
        }
        if let (Some(dir), true) = (&run_dir, cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            let name = format!("ckpt_{done}.iclm");
            save_checkpoint(&dir.join(&name), &params)?;
            checkpoints.push(name);
        }
        progress(&StepReport { step: done, steps: cfg.steps, loss, elapsed_secs: started.elapsed().as_secs_f64() });
    }
    if let Some(w) = &mut loss_csv {
        w.flush()?;
    }
    let final_checkpoint = match &run_dir {
        Some(dir) => {
            save_checkpoint(&dir.join("final.iclm"), &params)?;
            Some("final.iclm".to_string())
        }
        None => None,
    };
    let record = RunRecord {
        run_id,
        config: config.clone(),
        seed: cfg.seed,
        loss_trace: trace,
        optimizer_steps: opt.steps_taken() as usize,
        sequences_consumed: consumed,
        parameter_count: params.count(),
        started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints,
        final_checkpoint,
    };
    if let Some(dir) = &run_dir {
        fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(TrainOutcome { params, record, run_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut opt = AdamW::<f64>::new(3, OptimizerConfig::default(), 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[4.0, -0.25, 0.0], 0.1);
        assert!((p[0] - (1.0 - 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 0.25 / (0.25 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = TrainConfig { learning_rate: 1.0, warmup_steps: 4, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn curriculum_must_cover_steps() {
        let stage = CurriculumStage { mixture: standard_mixture(MixtureId::FourBase), steps: 3 };
        let cfg = TrainConfig { steps: 5, curriculum: Some(vec![stage]), ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_ids_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(allocate_run_id(dir.path(), "a"), "a");
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("a-2")).unwrap();
        assert_eq!(allocate_run_id(dir.path(), "a"), "a-3");
    }

    #[test]
    fn mixture_names_round_trip() {
        for id in MixtureId::ALL {
            assert_eq!(id.name().parse::<MixtureId>().unwrap(), id);
        }
        assert!("nope".parse::<MixtureId>().is_err());
    }
}
