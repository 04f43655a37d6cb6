//! Base function dictionaries and the combination algebra over them.
//!
//! A [`CompositeExpr`] is either a weighted base-class leaf or an `add`, `mul`
//! or `compose` node. Templates carry no weights; instantiated expressions
//! carry one [`Weight`] per leaf and can be evaluated.
//!
//! The canonical text form is `family:freq` for trig leaves (`sin:1`,
//! `cos:2`), `legendre1`..`legendre4` for the polynomial dictionary, and
//! `op(child, child, ...)` for nodes. Instantiated leaves append `@weight`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Uniform grid resolution used by [`codomain_extremes`].
pub const EXTREMES_GRID: usize = 4096;
/// Golden-section refinement stops once the bracket is narrower than this.
pub const EXTREMES_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Sin,
    Cos,
    Legendre1,
    Legendre2,
    Legendre3,
    Legendre4,
}

impl Family {
    pub fn is_trig(self) -> bool {
        matches!(self, Family::Sin | Family::Cos)
    }
}

/// One base function class. Trig classes carry a frequency `β ≥ 1`; the
/// polynomial classes carry none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BaseClass {
    family: Family,
    frequency: Option<u32>,
}

impl BaseClass {
    pub fn sin(beta: u32) -> Self {
        Self::trig(Family::Sin, beta)
    }

    pub fn cos(beta: u32) -> Self {
        Self::trig(Family::Cos, beta)
    }

    fn trig(family: Family, beta: u32) -> Self {
        assert!(beta >= 1, "trig frequency must be >= 1");
        BaseClass {
            family,
            frequency: Some(beta),
        }
    }

    /// Polynomial class `legendre{degree}`, degree in 1..=4.
    pub fn legendre(degree: u32) -> Self {
        let family = match degree {
            1 => Family::Legendre1,
            2 => Family::Legendre2,
            3 => Family::Legendre3,
            4 => Family::Legendre4,
            _ => panic!("legendre degree must be in 1..=4, got {degree}"),
        };
        BaseClass {
            family,
            frequency: None,
        }
    }

    pub fn new(family: Family, frequency: Option<u32>) -> Result<Self> {
        match (family.is_trig(), frequency) {
            (true, Some(b)) if b >= 1 => Ok(BaseClass { family, frequency }),
            (true, _) => Err(Error::InvalidExpr(format!(
                "{family:?} needs a frequency >= 1"
            ))),
            (false, None) => Ok(BaseClass { family, frequency }),
            (false, Some(_)) => Err(Error::InvalidExpr(format!(
                "{family:?} takes no frequency"
            ))),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn frequency(&self) -> Option<u32> {
        self.frequency
    }

    /// Dictionary index: `sin β → 2β−1`, `cos β → 2β` (so sin:1, cos:1,
    /// sin:2, cos:2, sin:3 are 1..=5), polynomial classes are `100 + degree`.
    pub fn id(&self) -> u32 {
        match (self.family, self.frequency) {
            (Family::Sin, Some(b)) => 2 * b - 1,
            (Family::Cos, Some(b)) => 2 * b,
            (Family::Legendre1, _) => 101,
            (Family::Legendre2, _) => 102,
            (Family::Legendre3, _) => 103,
            (Family::Legendre4, _) => 104,
            _ => unreachable!("trig class without frequency"),
        }
    }

    /// Vertical offset `(−1)^β·β/2` of the trig classes; zero for polynomials.
    pub fn bias(&self) -> f64 {
        match self.frequency {
            Some(b) => {
                let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
                sign * f64::from(b) / 2.0
            }
            None => 0.0,
        }
    }

    /// The weight-dependent part with unit weight. For every class except
    /// `legendre1` the base value is `weight * shape(x) + bias`.
    pub fn shape(&self, x: f64) -> f64 {
        match (self.family, self.frequency) {
            (Family::Sin, Some(b)) => (f64::from(b) * x).sin(),
            (Family::Cos, Some(b)) => (f64::from(b) * x).cos(),
            (Family::Legendre1, _) => 30f64.sqrt() / 50.0 * x,
            (Family::Legendre2, _) => 2f64.sqrt() / 50.0 * (3.0 * x * x - 25.0),
            (Family::Legendre3, _) => 70f64.sqrt() / 500.0 * (x * x * x - 15.0 * x),
            (Family::Legendre4, _) => {
                3.0 * 10f64.sqrt() / 10000.0 * (7.0 * x.powi(4) - 150.0 * x * x + 375.0)
            }
            _ => unreachable!("trig class without frequency"),
        }
    }

    /// `legendre1` uses `|w|`, so its output is not linear in the signed weight.
    pub fn effective_weight(&self, phi: f64) -> f64 {
        match self.family {
            Family::Legendre1 => phi.abs(),
            _ => phi,
        }
    }
}

impl fmt::Display for BaseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.family, self.frequency) {
            (Family::Sin, Some(b)) => write!(f, "sin:{b}"),
            (Family::Cos, Some(b)) => write!(f, "cos:{b}"),
            (Family::Legendre1, _) => f.write_str("legendre1"),
            (Family::Legendre2, _) => f.write_str("legendre2"),
            (Family::Legendre3, _) => f.write_str("legendre3"),
            (Family::Legendre4, _) => f.write_str("legendre4"),
            _ => unreachable!(),
        }
    }
}

/// Leaf weight φ (the polynomial dictionary's `w` occupies the same slot).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Weight(f64);

impl Weight {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Weight(value))
        } else {
            Err(Error::InvalidExpr(format!("non-finite weight {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `eval_base`: a single base function with weight `phi` at `x`.
pub fn eval_base(base: BaseClass, phi: Weight, x: f64) -> f64 {
    let phi = phi.value();
    match base.family {
        Family::Sin | Family::Cos => phi * base.shape(x) + base.bias(),
        _ => base.shape(x) * base.effective_weight(phi),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Add,
    Mul,
    Compose,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Compose => "compose",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompositeExpr {
    Leaf {
        base: BaseClass,
        weight: Option<Weight>,
    },
    Node {
        op: Op,
        children: Vec<CompositeExpr>,
    },
}

impl CompositeExpr {
    pub fn leaf(base: BaseClass) -> Self {
        CompositeExpr::Leaf { base, weight: None }
    }

    pub fn weighted(base: BaseClass, phi: f64) -> Self {
        CompositeExpr::Leaf {
            base,
            weight: Some(Weight::new(phi).expect("finite weight")),
        }
    }

    /// Builds a node, checking arity: `compose` takes exactly two children
    /// (outer, inner), `add` and `mul` at least two.
    pub fn node(op: Op, children: Vec<CompositeExpr>) -> Result<Self> {
        let n = children.len();
        let ok = match op {
            Op::Compose => n == 2,
            Op::Add | Op::Mul => n >= 2,
        };
        if !ok {
            return Err(Error::InvalidExpr(format!(
                "{} node with {n} children",
                op.name()
            )));
        }
        Ok(CompositeExpr::Node { op, children })
    }

    pub fn add(children: Vec<CompositeExpr>) -> Result<Self> {
        Self::node(Op::Add, children)
    }

    pub fn mul(children: Vec<CompositeExpr>) -> Result<Self> {
        Self::node(Op::Mul, children)
    }

    pub fn compose(outer: CompositeExpr, inner: CompositeExpr) -> Self {
        CompositeExpr::Node {
            op: Op::Compose,
            children: vec![outer, inner],
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, CompositeExpr::Leaf { .. })
    }

    pub fn depth(&self) -> usize {
        match self {
            CompositeExpr::Leaf { .. } => 1,
            CompositeExpr::Node { children, .. } => {
                1 + children.iter().map(Self::depth).max().unwrap_or(0)
            }
        }
    }

    /// Leaves in left-to-right order.
    pub fn leaves(&self) -> Vec<(BaseClass, Option<Weight>)> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<(BaseClass, Option<Weight>)>) {
        match self {
            CompositeExpr::Leaf { base, weight } => out.push((*base, *weight)),
            CompositeExpr::Node { children, .. } => {
                for c in children {
                    c.collect_leaves(out);
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            CompositeExpr::Leaf { .. } => 1,
            CompositeExpr::Node { children, .. } => children.iter().map(Self::leaf_count).sum(),
        }
    }

    pub fn is_instantiated(&self) -> bool {
        self.leaves().iter().all(|(_, w)| w.is_some())
    }

    pub fn is_template(&self) -> bool {
        self.leaves().iter().all(|(_, w)| w.is_none())
    }

    /// Copy of this expression with every weight removed.
    pub fn template(&self) -> CompositeExpr {
        match self {
            CompositeExpr::Leaf { base, .. } => CompositeExpr::leaf(*base),
            CompositeExpr::Node { op, children } => CompositeExpr::Node {
                op: *op,
                children: children.iter().map(Self::template).collect(),
            },
        }
    }

    /// Assigns weights to the leaves in left-to-right order.
    pub fn with_weights(&self, weights: &[f64]) -> Result<CompositeExpr> {
        if weights.len() != self.leaf_count() {
            return Err(Error::shape(format!(
                "{} weights for {} leaves of `{}`",
                weights.len(),
                self.leaf_count(),
                self.template_text()
            )));
        }
        let mut it = weights.iter();
        Ok(self.map_leaves(&mut |base, _| {
            CompositeExpr::weighted(base, *it.next().expect("counted above"))
        }))
    }

    pub(crate) fn map_leaves(
        &self,
        f: &mut impl FnMut(BaseClass, Option<Weight>) -> CompositeExpr,
    ) -> CompositeExpr {
        match self {
            CompositeExpr::Leaf { base, weight } => f(*base, *weight),
            CompositeExpr::Node { op, children } => CompositeExpr::Node {
                op: *op,
                children: children.iter().map(|c| c.map_leaves(f)).collect(),
            },
        }
    }

    /// Canonical template text, weights omitted.
    pub fn template_text(&self) -> String {
        let mut s = String::new();
        self.write_text(&mut s, false);
        s
    }

    fn write_text(&self, s: &mut String, with_weights: bool) {
        match self {
            CompositeExpr::Leaf { base, weight } => {
                s.push_str(&base.to_string());
                if let (true, Some(w)) = (with_weights, weight) {
                    s.push('@');
                    s.push_str(&w.value().to_string());
                }
            }
            CompositeExpr::Node { op, children } => {
                s.push_str(op.name());
                s.push('(');
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        s.push_str(", ");
                    }
                    c.write_text(s, with_weights);
                }
                s.push(')');
            }
        }
    }

    /// True when the expression contains at least one combination node.
    pub fn is_combination(&self) -> bool {
        !self.is_leaf()
    }
}

impl fmt::Display for CompositeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_text(&mut s, true);
        f.write_str(&s)
    }
}

impl FromStr for CompositeExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser { src: s, pos: 0 };
        let expr = p.expr()?;
        p.skip_ws();
        if p.pos != s.len() {
            return Err(p.error("trailing input"));
        }
        Ok(expr)
    }
}

impl Serialize for CompositeExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CompositeExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            input: self.src.to_string(),
            message: format!("{message} at byte {}", self.pos),
        }
    }

    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> &str {
        self.skip_ws();
        let start = self.pos;
        let len = self
            .rest()
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(self.rest().len());
        self.pos += len;
        &self.src[start..self.pos]
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E')))
            .unwrap_or(self.rest().len());
        let text = &self.rest()[..len];
        let value = text
            .parse::<f64>()
            .map_err(|_| self.error("expected a number"))?;
        self.pos += len;
        Ok(value)
    }

    fn expr(&mut self) -> Result<CompositeExpr> {
        let name = self.ident().to_string();
        let op = match name.as_str() {
            "add" => Some(Op::Add),
            "mul" => Some(Op::Mul),
            "compose" => Some(Op::Compose),
            _ => None,
        };
        if let Some(op) = op {
            if !self.eat('(') {
                return Err(self.error("expected `(`"));
            }
            let mut children = vec![self.expr()?];
            while self.eat(',') {
                children.push(self.expr()?);
            }
            if !self.eat(')') {
                return Err(self.error("expected `)` or `,`"));
            }
            return CompositeExpr::node(op, children).map_err(|e| self.error(&e.to_string()));
        }
        let base = match name.as_str() {
            "sin" | "cos" => {
                if !self.eat(':') {
                    return Err(self.error("expected `:` after trig family"));
                }
                let beta = self.number()?;
                if beta < 1.0 || beta.fract() != 0.0 || beta > f64::from(u32::MAX) {
                    return Err(self.error("frequency must be a positive integer"));
                }
                let family = if name == "sin" { Family::Sin } else { Family::Cos };
                BaseClass::trig(family, beta as u32)
            }
            "legendre1" => BaseClass::legendre(1),
            "legendre2" => BaseClass::legendre(2),
            "legendre3" => BaseClass::legendre(3),
            "legendre4" => BaseClass::legendre(4),
            "" => return Err(self.error("expected an expression")),
            other => return Err(self.error(&format!("unknown function `{other}`"))),
        };
        let weight = if self.eat('@') {
            Some(Weight::new(self.number()?).map_err(|_| self.error("non-finite weight"))?)
        } else {
            None
        };
        Ok(CompositeExpr::Leaf { base, weight })
    }
}

/// `eval_composite`: evaluates an instantiated expression at `x`.
///
/// `add` and `mul` fold their children left to right starting from the first
/// child's value.
pub fn eval_composite(expr: &CompositeExpr, x: f64) -> Result<f64> {
    eval_inner(expr, x).ok_or_else(|| Error::Template(expr.template_text()))
}

fn eval_inner(expr: &CompositeExpr, x: f64) -> Option<f64> {
    match expr {
        CompositeExpr::Leaf { base, weight } => weight.map(|w| eval_base(*base, w, x)),
        CompositeExpr::Node { op, children } => match op {
            Op::Add => {
                let mut acc = eval_inner(&children[0], x)?;
                for c in &children[1..] {
                    acc += eval_inner(c, x)?;
                }
                Some(acc)
            }
            Op::Mul => {
                let mut acc = eval_inner(&children[0], x)?;
                for c in &children[1..] {
                    acc *= eval_inner(c, x)?;
                }
                Some(acc)
            }
            Op::Compose => {
                let inner = eval_inner(&children[1], x)?;
                eval_inner(&children[0], inner)
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    /// `[−k, k]`
    pub fn symmetric(k: f64) -> Self {
        Interval { lo: -k, hi: k }
    }

    pub fn default_domain() -> Self {
        Self::symmetric(PI)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub v_min: f64,
    pub v_max: f64,
    pub domain: Interval,
}

impl Extremes {
    /// `max(|v_min|, |v_max|)`
    pub fn magnitude(&self) -> f64 {
        self.v_min.abs().max(self.v_max.abs())
    }
}

/// Minimum and maximum of an instantiated expression on `domain`: a
/// [`EXTREMES_GRID`]-point uniform scan, with the best grid point of each kind
/// refined by golden-section search over its two adjacent cells.
pub fn codomain_extremes(expr: &CompositeExpr, domain: Interval) -> Result<Extremes> {
    if !(domain.lo < domain.hi) {
        return Err(Error::config(format!(
            "empty domain [{}, {}]",
            domain.lo, domain.hi
        )));
    }
    if !expr.is_instantiated() {
        return Err(Error::Template(expr.template_text()));
    }
    let f = |x: f64| eval_inner(expr, x).expect("instantiated");
    let n = EXTREMES_GRID;
    let step = (domain.hi - domain.lo) / (n - 1) as f64;
    let grid_x = |i: usize| {
        if i == n - 1 {
            domain.hi
        } else {
            domain.lo + step * i as f64
        }
    };

    let (mut imin, mut imax) = (0, 0);
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let v = f(grid_x(i));
        if v < vmin {
            vmin = v;
            imin = i;
        }
        if v > vmax {
            vmax = v;
            imax = i;
        }
    }

    let bracket = |i: usize| (grid_x(i.saturating_sub(1)), grid_x((i + 1).min(n - 1)));
    let (a, b) = bracket(imin);
    let refined_min = golden_section(&f, a, b, false);
    let (a, b) = bracket(imax);
    let refined_max = golden_section(&f, a, b, true);

    Ok(Extremes {
        v_min: vmin.min(refined_min),
        v_max: vmax.max(refined_max),
        domain,
    })
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, maximize: bool) -> f64 {
    let g = |x: f64| if maximize { -f(x) } else { f(x) };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (g(c), g(d));
    while b - a >= EXTREMES_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = g(d);
        }
    }
    let best = g(0.5 * (a + b)).min(fc).min(fd);
    if maximize {
        -best
    } else {
        best
    }
}

/// The four trig classes sin:1, cos:1, sin:2, cos:2.
pub fn sinusoid_dictionary() -> Vec<BaseClass> {
    vec![
        BaseClass::sin(1),
        BaseClass::cos(1),
        BaseClass::sin(2),
        BaseClass::cos(2),
    ]
}

pub fn legendre_dictionary() -> Vec<BaseClass> {
    (1..=4).map(BaseClass::legendre).collect()
}
