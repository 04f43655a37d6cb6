//! Squared-error evaluation against clean truth, curve tracing, the
//! random-codomain baseline, reference oracles and sweep reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funcspace::{codomain_extremes, eval_composite, BaseClass, CompositeExpr, Interval, Op};
use crate::model::{ModelParams, Scalar};
use crate::rng::{derive_seed, par_map, stream_rng, Rng};
use crate::sampler::{build_prompt, PerturbationSpec, Point, PointFlag, PromptSequence, SamplerConfig};

/// Anything producing a prediction at every position of every prompt.
pub trait Predictor: Sync {
    fn n_points(&self) -> usize;
    fn predict_batch(&self, batch: &[PromptSequence], workers: usize) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> Predictor for ModelParams<T> {
    fn n_points(&self) -> usize {
        self.config().n_points()
    }

    fn predict_batch(&self, batch: &[PromptSequence], workers: usize) -> Result<Vec<Vec<f64>>> {
        self.predict(batch, workers)
    }
}

/// Inclusive 1-based position range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PosRange {
    pub first: usize,
    pub last: usize,
}

impl PosRange {
    pub const fn new(first: usize, last: usize) -> Self {
        PosRange { first, last }
    }

    pub fn label(&self) -> String {
        if self.first == self.last {
            self.first.to_string()
        } else {
            format!("{}-{}", self.first, self.last)
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad position range `{s}`"));
        let (a, b) = s.split_once('-').unwrap_or((s, s));
        let r = PosRange::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if r.first == 0 || r.first > r.last {
            return Err(bad());
        }
        Ok(r)
    }

    pub fn mean_of(&self, per_position: &[f64]) -> Option<f64> {
        let slice = per_position.get(self.first - 1..self.last)?;
        Some(slice.iter().sum::<f64>() / slice.len() as f64)
    }
}

pub const DEFAULT_RANGES: [PosRange; 4] =
    [PosRange::new(1, 10), PosRange::new(11, 20), PosRange::new(21, 30), PosRange::new(31, 40)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub seed: u64,
    pub workers: usize,
    /// Ranges past the prompt length are skipped.
    pub ranges: Vec<PosRange>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_runs: 128, seed: 0, workers: 1, ranges: DEFAULT_RANGES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeMean {
    pub range: PosRange,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub per_position_se: Vec<f64>,
    pub range_means: Vec<RangeMean>,
    pub n_runs: usize,
    pub perturbation: PerturbationSpec,
}

impl EvalReport {
    fn from_errors(task: String, per_position_se: Vec<f64>, n_runs: usize, perturbation: PerturbationSpec, ranges: &[PosRange]) -> Self {
        let range_means = ranges
            .iter()
            .filter_map(|r| r.mean_of(&per_position_se).map(|mean| RangeMean { range: *r, mean }))
            .collect();
        EvalReport { task, per_position_se, range_means, n_runs, perturbation }
    }

    pub fn range_mean(&self, range: PosRange) -> Option<f64> {
        self.range_means.iter().find(|m| m.range == range).map(|m| m.mean)
    }

    /// SE at a 1-based position.
    pub fn at(&self, position: usize) -> f64 {
        self.per_position_se[position - 1]
    }
}

fn task_seed(seed: u64, template: &CompositeExpr) -> u64 {
    // FNV-1a over the canonical text, so every task has its own prompts and a
    // task's prompts do not depend on which other tasks are evaluated.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in template.template_text().bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(seed, h)
}

/// Prompts of exactly `sampler.n_points` points: out-of-range insertions
/// take the place of clean draws. Run `r` uses stream `r`, so the clean part
/// of a prompt is shared between perturbations with the same point count.
pub fn eval_prompts(
    template: &CompositeExpr,
    sampler: &SamplerConfig,
    perturbation: &PerturbationSpec,
    n_runs: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PromptSequence>> {
    let inserted = perturbation.inserted_points();
    if inserted + 2 > sampler.n_points {
        return Err(Error::config(format!(
            "{inserted} inserted points leave no room in a {}-point prompt",
            sampler.n_points
        )));
    }
    let cfg = SamplerConfig { n_points: sampler.n_points - inserted, ..sampler.clone() };
    let seed = task_seed(seed, template);
    par_map(n_runs, workers, |r| {
        build_prompt(template, &cfg, perturbation, None, &mut stream_rng(seed, r as u64))
    })
    .into_iter()
    .collect()
}

fn squared_errors(batch: &[PromptSequence], preds: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = batch.first().map_or(0, |s| s.len());
    let mut se = vec![0.0; n];
    for (seq, pred) in batch.iter().zip(preds) {
        if pred.len() != n || seq.len() != n {
            return Err(Error::shape("prediction and prompt lengths differ"));
        }
        for ((acc, p), t) in se.iter_mut().zip(pred).zip(seq.clean_ys()) {
            *acc += (p - t) * (p - t);
        }
    }
    let runs = batch.len() as f64;
    se.iter_mut().for_each(|v| *v /= runs);
    Ok(se)
}

/// Mean squared error per position against clean truth over `cfg.n_runs`
/// fresh prompts.
pub fn evaluate_se(
    model: &dyn Predictor,
    template: &CompositeExpr,
    sampler: &SamplerConfig,
    perturbation: &PerturbationSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if sampler.n_points != model.n_points() {
        return Err(Error::shape(format!(
            "prompts of {} points for a model with n_points {}",
            sampler.n_points,
            model.n_points()
        )));
    }
    if cfg.n_runs == 0 {
        return Err(Error::EmptyReport("n_runs is 0".into()));
    }
    let batch = eval_prompts(template, sampler, perturbation, cfg.n_runs, cfg.seed, cfg.workers)?;
    let preds = model.predict_batch(&batch, cfg.workers)?;
    let se = squared_errors(&batch, &preds)?;
    Ok(EvalReport::from_errors(template.template_text(), se, cfg.n_runs, *perturbation, &cfg.ranges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub task: String,
    pub context_len: usize,
    pub context: Vec<Point>,
    pub grid: Vec<f64>,
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
}

/// `n` points from `-k` to `k` inclusive.
pub fn uniform_grid(k: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| if i == n - 1 { k } else { -k + 2.0 * k * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Sweeps the query over `grid_size` points of `[−k, k]` after one fixed
/// context of `context_len` clean points.
pub fn trace_curve(
    model: &dyn Predictor,
    template: &CompositeExpr,
    sampler: &SamplerConfig,
    context_len: usize,
    grid_size: usize,
    seed: u64,
) -> Result<Curve> {
    let n = model.n_points();
    if context_len >= n {
        return Err(Error::config(format!("context length {context_len} must be below n_points {n}")));
    }
    let cfg = SamplerConfig { n_points: context_len + 1, ..sampler.clone() };
    let base = build_prompt(template, &cfg, &PerturbationSpec::none(), None, &mut stream_rng(task_seed(seed, template), 0))?;
    let context: Vec<Point> = base.points[..context_len].to_vec();
    let grid = uniform_grid(sampler.k, grid_size);
    let batch: Vec<PromptSequence> = grid
        .iter()
        .map(|&x| {
            let mut points = context.clone();
            points.push(Point { x, y: 0.0, flag: PointFlag::Clean });
            PromptSequence { points, truth: base.truth.clone() }
        })
        .collect();
    let preds = model.predict_batch(&batch, 1)?;
    let predictions = preds.iter().map(|p| p[context_len]).collect();
    let truth = grid.iter().map(|&x| eval_composite(&base.truth, x)).collect::<Result<_>>()?;
    Ok(Curve { task: template.template_text(), context_len, context, grid, predictions, truth })
}

/// SE of predicting each position by a uniform draw over the instantiated
/// function's codomain on `[−k, k]`.
pub fn random_baseline_se(
    template: &CompositeExpr,
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let batch = eval_prompts(template, sampler, &PerturbationSpec::none(), cfg.n_runs, cfg.seed, cfg.workers)?;
    let guess_seed = derive_seed(task_seed(cfg.seed, template), 0x5eed);
    let preds = par_map(batch.len(), cfg.workers, |r| {
        random_guesses(&batch[r].truth, sampler.domain(), batch[r].len(), &mut stream_rng(guess_seed, r as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let se = squared_errors(&batch, &preds)?;
    Ok(EvalReport::from_errors(template.template_text(), se, cfg.n_runs, PerturbationSpec::none(), &cfg.ranges))
}

/// `n` independent uniform draws over the codomain of `truth` on `domain`.
pub fn random_guesses(truth: &CompositeExpr, domain: Interval, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let e = codomain_extremes(truth, domain)?;
    Ok((0..n)
        .map(|_| if e.v_max > e.v_min { rng.random_range(e.v_min..=e.v_max) } else { e.v_min })
        .collect())
}

/// Grid resolution of the product oracle per axis.
pub const ORACLE_GRID: usize = 401;

enum Hypothesis {
    /// `y = Σ cⱼ·shapeⱼ(x) + bias` with free coefficients.
    Linear { leaves: Vec<BaseClass> },
    /// `y = leaf₁(x; φ₁)·leaf₂(x; φ₂)`, `φ ∈ [−1, 1]²`.
    Product { a: BaseClass, b: BaseClass },
}

impl Hypothesis {
    fn from_template(t: &CompositeExpr) -> Result<Self> {
        let unsupported = || Error::UnsupportedDictionary(t.template_text());
        match t {
            CompositeExpr::Leaf { base, .. } => Ok(Hypothesis::Linear { leaves: vec![*base] }),
            CompositeExpr::Node { op: Op::Add, children } => {
                let mut leaves = Vec::new();
                for c in children {
                    match Hypothesis::from_template(c)? {
                        Hypothesis::Linear { leaves: l } => leaves.extend(l),
                        Hypothesis::Product { .. } => return Err(unsupported()),
                    }
                }
                Ok(Hypothesis::Linear { leaves })
            }
            CompositeExpr::Node { op: Op::Mul, children } => match children.as_slice() {
                [CompositeExpr::Leaf { base: a, .. }, CompositeExpr::Leaf { base: b, .. }] => {
                    Ok(Hypothesis::Product { a: *a, b: *b })
                }
                _ => Err(unsupported()),
            },
            _ => Err(unsupported()),
        }
    }

    fn unknowns(&self) -> usize {
        match self {
            Hypothesis::Linear { leaves } => leaves.len(),
            Hypothesis::Product { .. } => 2,
        }
    }

    /// Value with every weight at zero.
    fn bias_only(&self) -> f64 {
        match self {
            Hypothesis::Linear { leaves } => leaves.iter().map(|b| b.bias()).sum(),
            Hypothesis::Product { a, b } => a.bias() * b.bias(),
        }
    }

    /// Fits on `pts`; returns the residual sum of squares and the prediction
    /// at `query`.
    fn fit(&self, pts: &[Point], query: f64) -> (f64, f64) {
        match self {
            Hypothesis::Linear { leaves } => fit_linear(leaves, pts, query),
            Hypothesis::Product { a, b } => fit_product(*a, *b, pts, query),
        }
    }
}

fn fit_linear(leaves: &[BaseClass], pts: &[Point], query: f64) -> (f64, f64) {
    let bias: f64 = leaves.iter().map(|b| b.bias()).sum();
    let a = DMatrix::from_fn(pts.len(), leaves.len(), |i, j| leaves[j].shape(pts[i].x));
    let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.y - bias));
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(leaves.len()));
    let rss = (&a * &coef - &y).norm_squared();
    let pred = bias + leaves.iter().zip(coef.iter()).map(|(b, c)| c * b.shape(query)).sum::<f64>();
    (rss, pred)
}

fn fit_product(a: BaseClass, b: BaseClass, pts: &[Point], query: f64) -> (f64, f64) {
    let sa: Vec<f64> = pts.iter().map(|p| a.shape(p.x)).collect();
    let sb: Vec<f64> = pts.iter().map(|p| b.shape(p.x)).collect();
    let (ba, bb) = (a.bias(), b.bias());
    let sse = |pa: f64, pb: f64| -> f64 {
        let (ea, eb) = (a.effective_weight(pa), b.effective_weight(pb));
        pts.iter()
            .zip(sa.iter().zip(&sb))
            .map(|(p, (u, v))| {
                let r = (ea * u + ba) * (eb * v + bb) - p.y;
                r * r
            })
            .sum()
    };
    let search = |lo: (f64, f64), step: f64, n: usize| -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, lo.0, lo.1);
        for i in 0..n {
            let pa = lo.0 + step * i as f64;
            for j in 0..n {
                let pb = lo.1 + step * j as f64;
                let e = sse(pa, pb);
                if e < best.0 {
                    best = (e, pa, pb);
                }
            }
        }
        best
    };
    let step = 2.0 / (ORACLE_GRID - 1) as f64;
    let (_, pa, pb) = search((-1.0, -1.0), step, ORACLE_GRID);
    // One refinement: 10× finer over the cells adjacent to the best node.
    let fine = step / 10.0;
    let (rss, pa, pb) = search((pa - step, pb - step), fine, 21);
    let pred = (a.effective_weight(pa) * a.shape(query) + ba) * (b.effective_weight(pb) * b.shape(query) + bb);
    (rss, pred)
}

/// Reference predictor: at each position, fits every dictionary template to
/// the preceding points and predicts with the best fit. Templates with more
/// unknowns than available points are skipped; with none left the first
/// template's zero-weight value is used.
pub fn oracle_predict(prompt: &PromptSequence, dictionary: &[CompositeExpr]) -> Result<Vec<f64>> {
    if dictionary.is_empty() {
        return Err(Error::UnsupportedDictionary("empty dictionary".into()));
    }
    let hyps = dictionary.iter().map(Hypothesis::from_template).collect::<Result<Vec<_>>>()?;
    Ok((0..prompt.len())
        .map(|i| {
            let pts = &prompt.points[..i];
            let query = prompt.points[i].x;
            hyps.iter()
                .filter(|h| h.unknowns() <= i)
                .map(|h| (h.fit(pts, query), h.unknowns()))
                .min_by(|((ra, _), ua), ((rb, _), ub)| ra.total_cmp(rb).then(ua.cmp(ub)))
                .map_or_else(|| hyps[0].bias_only(), |((_, pred), _)| pred)
        })
        .collect())
}

/// The oracle as a [`Predictor`].
pub struct OraclePredictor {
    pub dictionary: Vec<CompositeExpr>,
    pub n_points: usize,
}

impl Predictor for OraclePredictor {
    fn n_points(&self) -> usize {
        self.n_points
    }

    fn predict_batch(&self, batch: &[PromptSequence], workers: usize) -> Result<Vec<Vec<f64>>> {
        par_map(batch.len(), workers, |i| oracle_predict(&batch[i], &self.dictionary)).into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_id: String,
    pub report: EvalReport,
}

/// Cross product of models × tasks × perturbations; an empty perturbation
/// list means clean prompts only.
pub fn sweep(
    models: &[(String, &dyn Predictor)],
    tasks: &[CompositeExpr],
    perturbations: &[PerturbationSpec],
    sampler: &SamplerConfig,
    cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    if models.is_empty() || tasks.is_empty() {
        return Err(Error::EmptyReport("sweep needs at least one model and one task".into()));
    }
    let none = [PerturbationSpec::none()];
    let perturbations = if perturbations.is_empty() { &none[..] } else { perturbations };
    let mut rows = Vec::with_capacity(models.len() * tasks.len() * perturbations.len());
    for (model_id, model) in models {
        for p in perturbations {
            for t in tasks {
                let report = evaluate_se(*model, t, sampler, p, cfg)?;
                rows.push(SweepRow { model_id: model_id.clone(), report });
            }
        }
    }
    Ok(rows)
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub model_id: String,
    pub task: String,
    pub noise_mode: String,
    pub noise_strength: f64,
    pub oor_mode: String,
    pub oor_placement: String,
    pub range: String,
    pub se_mean: f64,
    pub n_runs: usize,
    pub is_col_min: bool,
}

impl ReportRecord {
    fn cell_key(&self) -> (String, String, String, String, String) {
        (
            self.task.clone(),
            format!("{}:{}", self.noise_mode, self.noise_strength),
            self.oor_mode.clone(),
            self.oor_placement.clone(),
            self.range.clone(),
        )
    }
}

fn noise_label(p: &PerturbationSpec) -> String {
    match p.noise_mode {
        crate::sampler::NoiseMode::Partial { count } => format!("partial{count}"),
        m => m.name().to_string(),
    }
}

fn oor_label(p: &PerturbationSpec) -> String {
    match p.oor_mode {
        crate::sampler::OorMode::None => "none".into(),
        m => format!("{}{}", m.name(), p.oor_count),
    }
}

/// Flattens rows to one record per range and marks the per-column minimum
/// across models.
pub fn report_records(rows: &[SweepRow]) -> Vec<ReportRecord> {
    let mut out: Vec<ReportRecord> = rows
        .iter()
        .flat_map(|row| {
            let p = row.report.perturbation;
            row.report.range_means.iter().map(move |m| ReportRecord {
                model_id: row.model_id.clone(),
                task: row.report.task.clone(),
                noise_mode: noise_label(&p),
                noise_strength: p.noise_strength,
                oor_mode: oor_label(&p),
                oor_placement: if p.oor_mode == crate::sampler::OorMode::None { "none".into() } else { p.oor_placement.name().into() },
                range: m.range.label(),
                se_mean: m.mean,
                n_runs: row.report.n_runs,
                is_col_min: false,
            })
        })
        .collect();
    mark_column_minima(&mut out);
    out
}

pub fn mark_column_minima(records: &mut [ReportRecord]) {
    let mut best: BTreeMap<_, f64> = BTreeMap::new();
    for r in records.iter() {
        let e = best.entry(r.cell_key()).or_insert(f64::INFINITY);
        *e = e.min(r.se_mean);
    }
    for r in records.iter_mut() {
        r.is_col_min = best[&r.cell_key()] == r.se_mean;
    }
}

pub fn write_report_csv<W: Write>(w: W, records: &[ReportRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<ReportRecord>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(csv_err)).collect()
}

pub fn read_report_file(path: &Path) -> Result<Vec<ReportRecord>> {
    read_report_csv(std::fs::File::open(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Container(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub x: f64,
    pub y_pred: f64,
    pub y_true: f64,
    pub context_len: usize,
    pub task: String,
    pub model_id: String,
}

pub fn write_curve_csv<W: Write>(w: W, model_id: &str, curves: &[Curve]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for c in curves {
        for ((x, p), t) in c.grid.iter().zip(&c.predictions).zip(&c.truth) {
            wr.serialize(CurveRecord {
                x: *x,
                y_pred: *p,
                y_true: *t,
                context_len: c.context_len,
                task: c.task.clone(),
                model_id: model_id.to_string(),
            })
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_curve_csv<R: Read>(r: R) -> Result<Vec<CurveRecord>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn is_base_task(task: &str) -> bool {
    task.parse::<CompositeExpr>().map(|e| e.is_leaf()).unwrap_or(false)
}

/// Markdown grid: one block per perturbation, rows `(range, model)`, columns
/// tasks in first-seen order plus `Mean_B` over single-class tasks and
/// `Mean_C` over combinations. Column minima are bold.
pub fn render_table(records: &[ReportRecord]) -> String {
    let mut tasks: Vec<String> = Vec::new();
    let mut blocks: Vec<(String, String, String, String)> = Vec::new();
    let mut ranges: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String, String, String, String, String, String), f64> = BTreeMap::new();
    let push = |v: &mut Vec<String>, s: &String| {
        if !v.contains(s) {
            v.push(s.clone());
        }
    };
    for r in records {
        push(&mut tasks, &r.task);
        push(&mut ranges, &r.range);
        push(&mut models, &r.model_id);
        let block = (r.noise_mode.clone(), format!("{}", r.noise_strength), r.oor_mode.clone(), r.oor_placement.clone());
        if !blocks.contains(&block) {
            blocks.push(block.clone());
        }
        cells.insert(
            (block.0, block.1, block.2, block.3, r.range.clone(), r.model_id.clone(), r.task.clone()),
            r.se_mean,
        );
    }
    let base: Vec<&String> = tasks.iter().filter(|t| is_base_task(t)).collect();
    let comb: Vec<&String> = tasks.iter().filter(|t| !is_base_task(t)).collect();
    let mut columns: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    if !base.is_empty() {
        columns.push("Mean_B".into());
    }
    columns.extend(comb.iter().map(|s| s.to_string()));
    if !comb.is_empty() {
        columns.push("Mean_C".into());
    }

    let mut out = String::new();
    for b in &blocks {
        let _ = writeln!(out, "### noise {} (strength {}), oor {} ({})\n", b.0, b.1, b.2, b.3);
        let _ = writeln!(out, "| Range | Model | {} |", columns.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(columns.len() + 2));
        for range in &ranges {
            let mut grid: Vec<(String, Vec<Option<f64>>)> = Vec::new();
            for m in &models {
                let get = |t: &String| {
                    cells.get(&(b.0.clone(), b.1.clone(), b.2.clone(), b.3.clone(), range.clone(), m.clone(), t.clone())).copied()
                };
                let mean = |ts: &[&String]| -> Option<f64> {
                    let v: Option<Vec<f64>> = ts.iter().map(|t| get(t)).collect();
                    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                };
                let mut row: Vec<Option<f64>> = base.iter().map(|t| get(t)).collect();
                if !base.is_empty() {
                    row.push(mean(&base));
                }
                row.extend(comb.iter().map(|t| get(t)));
                if !comb.is_empty() {
                    row.push(mean(&comb));
                }
                if row.iter().any(Option::is_some) {
                    grid.push((m.clone(), row));
                }
            }
            let minima: Vec<f64> = (0..columns.len())
                .map(|c| grid.iter().filter_map(|(_, r)| r[c]).fold(f64::INFINITY, f64::min))
                .collect();
            for (m, row) in &grid {
                let cells: Vec<String> = row
                    .iter()
                    .zip(&minima)
                    .map(|(v, min)| match v {
                        Some(v) if *v == *min && grid.len() > 1 => format!("**{v:.2e}**"),
                        Some(v) => format!("{v:.2e}"),
                        None => "-".into(),
                    })
                    .collect();
                let _ = writeln!(out, "| {range} | {m} | {} |", cells.join(" | "));
            }
        }
        out.push('\n');
    }
    out
}

/// The four sinusoid classes, their six pairwise combinations under `op` and
/// the combination of all four.
pub fn standard_eval_tasks(op: Op) -> Vec<CompositeExpr> {
    let dict = crate::funcspace::sinusoid_dictionary();
    let mut tasks: Vec<CompositeExpr> = dict.iter().map(|b| CompositeExpr::leaf(*b)).collect();
    tasks.extend(combination_tasks(op, &dict));
    tasks
}

/// Pairwise combinations of `dict` (plus the all-class combination for
/// `add` and `mul`).
pub fn combination_tasks(op: Op, dict: &[BaseClass]) -> Vec<CompositeExpr> {
    let leaf = |b: &BaseClass| CompositeExpr::leaf(*b);
    let mut out = Vec::new();
    for i in 0..dict.len() {
        for j in i + 1..dict.len() {
            out.push(CompositeExpr::node(op, vec![leaf(&dict[i]), leaf(&dict[j])]).expect("binary node"));
        }
    }
    if op != Op::Compose {
        out.push(CompositeExpr::node(op, dict.iter().map(leaf).collect()).expect("n-ary node"));
    }
    out
}
