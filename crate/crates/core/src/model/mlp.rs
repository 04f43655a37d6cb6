//! Fixed-width ReLU network fed a flat context of `(x, y)` pairs plus a query.
//! Positions with fewer than `n_points - 1` context pairs are zero-padded.

use std::ops::Range;

use super::linalg::{gemm, sum_rows, Scalar};
use super::{two_mut, LayoutBuilder, MlpConfig};

pub(super) struct Index {
    layers: Vec<(Range<usize>, Range<usize>)>,
    widths: Vec<usize>,
}

impl Index {
    pub(super) fn build(cfg: &MlpConfig, lb: &mut LayoutBuilder) -> Self {
        let mut widths = vec![cfg.input_dim];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wr = lb.push(format!("layers.{i}.weight"), &[w[0], w[1]]);
                let br = lb.push(format!("layers.{i}.bias"), &[w[1]]);
                (wr, br)
            })
            .collect();
        Self { layers, widths }
    }

    pub(super) fn of(cfg: &MlpConfig) -> Self {
        Self::build(cfg, &mut LayoutBuilder::default())
    }
}

/// Appends the input row predicting position `i` of one sequence.
pub(super) fn encode<T: Scalar>(cfg: &MlpConfig, xs: &[T], ys: &[T], i: usize, out: &mut Vec<T>) {
    let slots = cfg.n_points - 1;
    for j in 0..slots {
        if j < i {
            out.push(xs[j]);
            out.push(ys[j]);
        } else {
            out.push(T::zero());
            out.push(T::zero());
        }
    }
    out.push(xs[i]);
}

pub(super) struct Cache<T> {
    rows: usize,
    /// Input of every layer; hidden entries are post-ReLU.
    acts: Vec<Vec<T>>,
}

pub(super) fn forward<T: Scalar>(
    p: &[T],
    ix: &Index,
    _cfg: &MlpConfig,
    input: &[T],
    rows: usize,
    keep: bool,
) -> (Vec<T>, Option<Cache<T>>) {
    let mut acts = vec![input.to_vec()];
    let last = ix.layers.len() - 1;
    for (l, (wr, br)) in ix.layers.iter().enumerate() {
        let (n_in, n_out) = (ix.widths[l], ix.widths[l + 1]);
        let mut z = vec![T::zero(); rows * n_out];
        gemm(false, false, rows, n_in, n_out, acts.last().unwrap(), &p[wr.clone()], &mut z, false);
        let bias = &p[br.clone()];
        for row in z.chunks_exact_mut(n_out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
                if l != last && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        acts.push(z);
    }
    let out = acts.pop().unwrap();
    (out, keep.then_some(Cache { rows, acts }))
}

pub(super) fn backward<T: Scalar>(
    p: &[T],
    ix: &Index,
    _cfg: &MlpConfig,
    c: &Cache<T>,
    dout: &[T],
    g: &mut [T],
) {
    let rows = c.rows;
    let mut delta = dout.to_vec();
    for l in (0..ix.layers.len()).rev() {
        let (wr, br) = &ix.layers[l];
        let (n_in, n_out) = (ix.widths[l], ix.widths[l + 1]);
        let a = &c.acts[l];
        {
            let (gw, gb) = two_mut(g, wr.clone(), br.clone());
            gemm(true, false, n_in, rows, n_out, a, &delta, gw, true);
            sum_rows(&delta, n_out, gb);
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![T::zero(); rows * n_in];
        gemm(false, true, rows, n_out, n_in, &delta, &p[wr.clone()], &mut prev, false);
        // ReLU gate: the stored activation is zero exactly where the unit was off.
        for (d, &v) in prev.iter_mut().zip(a) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        delta = prev;
    }
}
