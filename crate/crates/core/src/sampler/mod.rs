//! Prompt construction: weight and input sampling, weight scale-up for
//! baseline mixtures, and the label-noise / out-of-range perturbations.

mod export;

use rand::Rng as _;
use rand::seq::index::sample as sample_indices;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcspace::{
    codomain_extremes, eval_composite, BaseClass, CompositeExpr, Interval, Weight,
};
use crate::rng::{par_map, stream_rng, Rng};

pub use export::{read_batch, read_batch_file, write_batch, write_batch_csv, write_batch_file};

/// How the second parameter of a Gaussian written `N(0, a)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `a` is the variance, σ = √a.
    #[default]
    Variance,
    /// `a` is the standard deviation.
    Std,
}

impl SigmaMode {
    pub fn sigma(self, a: f64) -> f64 {
        match self {
            SigmaMode::Variance => a.sqrt(),
            SigmaMode::Std => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Clean inputs live in `[−k, k]`.
    pub k: f64,
    pub n_points: usize,
    pub scale_up_fraction: f64,
    pub scale_up_n: f64,
    pub oor_offset: f64,
    /// Reading of `N(0, k/2)` for inputs and `N(0, k/4)` for out-of-range draws.
    pub input_sigma_mode: SigmaMode,
    /// Reading of `N(0, s)` for label noise. Defaults to `s` being a standard
    /// deviation.
    pub noise_sigma_mode: SigmaMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: std::f64::consts::PI,
            n_points: 40,
            scale_up_fraction: 0.20,
            scale_up_n: 1.0,
            oor_offset: 10.0,
            input_sigma_mode: SigmaMode::Variance,
            noise_sigma_mode: SigmaMode::Std,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config(format!("k must be positive, got {}", self.k)));
        }
        if self.n_points < 2 {
            return Err(Error::config("n_points must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.scale_up_fraction) {
            return Err(Error::config("scale_up_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn domain(&self) -> Interval {
        Interval::symmetric(self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointFlag {
    Clean,
    Noisy,
    Oor,
}

impl PointFlag {
    pub fn code(self) -> u8 {
        match self {
            PointFlag::Clean => 0,
            PointFlag::Noisy => 1,
            PointFlag::Oor => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PointFlag::Clean),
            1 => Some(PointFlag::Noisy),
            2 => Some(PointFlag::Oor),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PointFlag::Clean => "clean",
            PointFlag::Noisy => "noisy",
            PointFlag::Oor => "oor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub flag: PointFlag,
}

/// An ordered prompt; the last point is the query.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub points: Vec<Point>,
    /// The instantiated generating function.
    pub truth: CompositeExpr,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.y).collect()
    }

    /// Noise-free labels `f(x)` at every position, regardless of flags.
    pub fn clean_ys(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| eval_composite(&self.truth, p.x).expect("truth is instantiated"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseMode {
    #[default]
    None,
    Partial { count: usize },
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OorMode {
    #[default]
    None,
    InputOnly,
    InputAndOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Prepend,
    /// Inserted right before the query point.
    Append,
    #[default]
    Both,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Prepend => "prepend",
            Placement::Append => "append",
            Placement::Both => "both",
        }
    }
}

impl NoiseMode {
    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::Partial { .. } => "partial",
            NoiseMode::Full => "full",
        }
    }
}

impl OorMode {
    pub fn name(self) -> &'static str {
        match self {
            OorMode::None => "none",
            OorMode::InputOnly => "input_only",
            OorMode::InputAndOutput => "input_and_output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    pub noise_strength: f64,
    pub noise_mode: NoiseMode,
    pub oor_mode: OorMode,
    pub oor_count: usize,
    pub oor_placement: Placement,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            noise_strength: 0.0,
            noise_mode: NoiseMode::None,
            oor_mode: OorMode::None,
            oor_count: 10,
            oor_placement: Placement::Both,
        }
    }
}

impl PerturbationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn noise(mode: NoiseMode, strength: f64) -> Self {
        PerturbationSpec {
            noise_strength: strength,
            noise_mode: mode,
            ..Self::default()
        }
    }

    pub fn oor(mode: OorMode, count: usize, placement: Placement) -> Self {
        PerturbationSpec {
            oor_mode: mode,
            oor_count: count,
            oor_placement: placement,
            ..Self::default()
        }
    }

    /// Number of out-of-range points this spec inserts.
    pub fn inserted_points(&self) -> usize {
        match self.oor_mode {
            OorMode::None => 0,
            _ => self.oor_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_strength >= 0.0 && self.noise_strength.is_finite()) {
            return Err(Error::config("noise strength must be finite and >= 0"));
        }
        if self.oor_mode != OorMode::None
            && self.oor_placement == Placement::Both
            && self.oor_count % 2 != 0
        {
            return Err(Error::config(format!(
                "oor_count {} cannot be split evenly between both ends",
                self.oor_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub template: CompositeExpr,
    pub probability: f64,
}

/// A weighted set of templates defining one training problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureEntry>", into = "Vec<MixtureEntry>")]
pub struct TaskMixture {
    entries: Vec<MixtureEntry>,
}

impl TryFrom<Vec<MixtureEntry>> for TaskMixture {
    type Error = Error;

    fn try_from(entries: Vec<MixtureEntry>) -> Result<Self> {
        TaskMixture::new(entries)
    }
}

impl From<TaskMixture> for Vec<MixtureEntry> {
    fn from(m: TaskMixture) -> Self {
        m.entries
    }
}

impl TaskMixture {
    pub fn new(entries: Vec<MixtureEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyMixture);
        }
        for e in &entries {
            if !(e.probability > 0.0) {
                return Err(Error::config(format!(
                    "mixture probability for `{}` must be > 0",
                    e.template.template_text()
                )));
            }
            if !e.template.is_template() {
                return Err(Error::AlreadyInstantiated(e.template.to_string()));
            }
        }
        let total: f64 = entries.iter().map(|e| e.probability).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "mixture probabilities sum to {total}, not 1"
            )));
        }
        Ok(TaskMixture { entries })
    }

    pub fn uniform(templates: Vec<CompositeExpr>) -> Result<Self> {
        let n = templates.len();
        TaskMixture::new(
            templates
                .into_iter()
                .map(|template| MixtureEntry {
                    template,
                    probability: 1.0 / n as f64,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[MixtureEntry] {
        &self.entries
    }

    pub fn templates(&self) -> impl Iterator<Item = &CompositeExpr> {
        self.entries.iter().map(|e| &e.template)
    }

    pub fn sample<'a>(&'a self, rng: &mut Rng) -> &'a CompositeExpr {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for e in &self.entries {
            acc += e.probability;
            if u < acc {
                return &e.template;
            }
        }
        &self.entries.last().expect("non-empty").template
    }

    /// Distinct base classes used anywhere in the mixture, in first-seen order.
    pub fn base_classes(&self) -> Vec<BaseClass> {
        let mut out: Vec<BaseClass> = Vec::new();
        for t in self.templates() {
            for (b, _) in t.leaves() {
                if !out.contains(&b) {
                    out.push(b);
                }
            }
        }
        out
    }
}

/// Which scale-up rule applies to a baseline mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRegime {
    /// `φ = n·M`
    Convex,
    /// `φ = (∏ Mᵢ) / M`
    Product,
}

/// Per-class magnitudes `Mᵢ = max(|V_min|, |V_max|)` of a mixture's base
/// classes at unit weight, computed once per mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureContext {
    pub regime: ScaleRegime,
    pub magnitudes: Vec<(BaseClass, f64)>,
}

impl MixtureContext {
    pub fn new(mixture: &TaskMixture, regime: ScaleRegime, domain: Interval) -> Result<Self> {
        let magnitudes = mixture
            .base_classes()
            .into_iter()
            .map(|b| {
                let e = codomain_extremes(&CompositeExpr::weighted(b, 1.0), domain)?;
                Ok((b, e.magnitude()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureContext { regime, magnitudes })
    }

    /// `M = maxᵢ Mᵢ`
    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes.iter().map(|(_, m)| *m).fold(0.0, f64::max)
    }

    /// Weight magnitude assigned to a scaled-up leaf.
    pub fn scaled_weight(&self, scale_up_n: f64) -> f64 {
        let m = self.max_magnitude();
        match self.regime {
            ScaleRegime::Convex => scale_up_n * m.abs(),
            ScaleRegime::Product => self.magnitudes.iter().map(|(_, mi)| *mi).product::<f64>() / m,
        }
    }
}

/// `φ = clamp(z, −1, 1)`, `z ~ N(0, 1)`.
pub fn sample_weight(rng: &mut Rng) -> Weight {
    let z: f64 = StandardNormal.sample(rng);
    Weight::new(z.clamp(-1.0, 1.0)).expect("finite")
}

/// `x = clamp(z, −k, k)`, `z ~ N(0, k/2)`.
pub fn sample_input(rng: &mut Rng, cfg: &SamplerConfig) -> f64 {
    let sigma = cfg.input_sigma_mode.sigma(cfg.k / 2.0);
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z).clamp(-cfg.k, cfg.k)
}

/// An input in `[−2k, −k] ∪ [k, 2k]`: `z ~ N(0, k/4)` clamped to `[−k/2, k/2]`,
/// shifted by `±3k/2` with a fair sign.
pub fn sample_oor_input(rng: &mut Rng, cfg: &SamplerConfig) -> f64 {
    let sigma = cfg.input_sigma_mode.sigma(cfg.k / 4.0);
    let z: f64 = StandardNormal.sample(rng);
    let z = (sigma * z).clamp(-cfg.k / 2.0, cfg.k / 2.0);
    let shift = 1.5 * cfg.k;
    if rng.random_bool(0.5) {
        z + shift
    } else {
        z - shift
    }
}

/// Draws a weight for every leaf of `template`. With `scale` set and a
/// single-leaf template, a `scale_up_fraction` share of draws is replaced by
/// the mixture's scaled weight with a random sign.
pub fn instantiate(
    template: &CompositeExpr,
    rng: &mut Rng,
    cfg: &SamplerConfig,
    scale: Option<&MixtureContext>,
) -> Result<CompositeExpr> {
    if !template.is_template() {
        return Err(Error::AlreadyInstantiated(template.to_string()));
    }
    let mut expr = template.map_leaves(&mut |base, _| CompositeExpr::Leaf {
        base,
        weight: Some(sample_weight(rng)),
    });
    if let (Some(ctx), CompositeExpr::Leaf { weight, .. }) = (scale, &mut expr) {
        if rng.random_bool(cfg.scale_up_fraction) {
            let magnitude = ctx.scaled_weight(cfg.scale_up_n);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *weight = Some(Weight::new(sign * magnitude)?);
        }
    }
    Ok(expr)
}

/// Instantiates `template`, draws `cfg.n_points` clean points and applies the
/// perturbation (label noise first, then out-of-range insertion).
pub fn build_prompt(
    template: &CompositeExpr,
    cfg: &SamplerConfig,
    perturbation: &PerturbationSpec,
    scale: Option<&MixtureContext>,
    rng: &mut Rng,
) -> Result<PromptSequence> {
    perturbation.validate()?;
    let truth = instantiate(template, rng, cfg, scale)?;
    let mut points = Vec::with_capacity(cfg.n_points + perturbation.inserted_points());
    for _ in 0..cfg.n_points {
        let x = sample_input(rng, cfg);
        let y = eval_composite(&truth, x)?;
        points.push(Point {
            x,
            y,
            flag: PointFlag::Clean,
        });
    }
    let seq = PromptSequence { points, truth };
    let seq = inject_label_noise(seq, perturbation.noise_strength, perturbation.noise_mode, cfg, rng)?;
    inject_oor(seq, perturbation, cfg, rng)
}

/// Adds Gaussian noise to in-context labels. The final (query) point is
/// never touched; `x` values are left bit-identical.
pub fn inject_label_noise(
    mut seq: PromptSequence,
    strength: f64,
    mode: NoiseMode,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<PromptSequence> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::config("noise strength must be finite and >= 0"));
    }
    let in_context = seq.len().saturating_sub(1);
    let targets: Vec<usize> = match mode {
        NoiseMode::None => return Ok(seq),
        NoiseMode::Full => (0..in_context).collect(),
        NoiseMode::Partial { count } => {
            if count > in_context {
                return Err(Error::config(format!(
                    "partial noise on {count} points but only {in_context} in-context points"
                )));
            }
            let mut idx = sample_indices(rng, in_context, count).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    if strength == 0.0 {
        return Ok(seq);
    }
    let noise = Normal::new(0.0, cfg.noise_sigma_mode.sigma(strength))
        .map_err(|e| Error::config(e.to_string()))?;
    for i in targets {
        let p = &mut seq.points[i];
        p.y += noise.sample(rng);
        p.flag = PointFlag::Noisy;
    }
    Ok(seq)
}

/// Inserts `oor_count` out-of-range examples. `prepend` puts them first,
/// `append` right before the query point, `both` splits them evenly.
pub fn inject_oor(
    mut seq: PromptSequence,
    spec: &PerturbationSpec,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<PromptSequence> {
    if spec.oor_mode == OorMode::None || spec.oor_count == 0 {
        return Ok(seq);
    }
    spec.validate()?;
    let offset = match spec.oor_mode {
        OorMode::InputAndOutput => cfg.oor_offset,
        _ => 0.0,
    };
    let draw = |n: usize, rng: &mut Rng| -> Result<Vec<Point>> {
        (0..n)
            .map(|_| {
                let x = sample_oor_input(rng, cfg);
                Ok(Point {
                    x,
                    y: eval_composite(&seq.truth, x)? + offset,
                    flag: PointFlag::Oor,
                })
            })
            .collect()
    };
    let (front, back) = match spec.oor_placement {
        Placement::Prepend => (spec.oor_count, 0),
        Placement::Append => (0, spec.oor_count),
        Placement::Both => (spec.oor_count / 2, spec.oor_count / 2),
    };
    let front_pts = draw(front, rng)?;
    let back_pts = draw(back, rng)?;
    let query = seq.points.pop().expect("non-empty prompt");
    let mut points = front_pts;
    points.append(&mut seq.points);
    points.extend(back_pts);
    points.push(query);
    seq.points = points;
    Ok(seq)
}

/// Deterministic batch: sequence `i` uses stream `first_index + i` of `seed`,
/// so results do not depend on `workers`.
pub fn generate_batch(
    templates: &[CompositeExpr],
    cfg: &SamplerConfig,
    perturbation: &PerturbationSpec,
    seed: u64,
    first_index: u64,
    workers: usize,
) -> Result<Vec<PromptSequence>> {
    par_map(templates.len(), workers, |i| {
        let mut rng = stream_rng(seed, first_index + i as u64);
        build_prompt(&templates[i], cfg, perturbation, None, &mut rng)
    })
    .into_iter()
    .collect()
}
