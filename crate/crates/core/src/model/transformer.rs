//! Decoder-only transformer over the interleaved stream `x1, y1, ..., xn`.
//! Pre-norm blocks, fused QKV projection, tanh-GELU feed-forward with 4x
//! expansion, final layer norm and a scalar readout at every x token.

use std::ops::Range;

use super::linalg::{axpy, dot, gemm, gemm_strided, sum_rows, Scalar, Strides};
use super::{two_mut, LayoutBuilder, TransformerConfig, LN_EPS};

pub(super) struct Linear {
    w: Range<usize>,
    b: Range<usize>,
}

impl Linear {
    fn build(lb: &mut LayoutBuilder, name: &str, n_in: usize, n_out: usize) -> Self {
        let w = lb.push(format!("{name}.weight"), &[n_in, n_out]);
        let b = lb.push(format!("{name}.bias"), &[n_out]);
        Self { w, b }
    }
}

pub(super) struct Norm {
    g: Range<usize>,
    b: Range<usize>,
}

impl Norm {
    fn build(lb: &mut LayoutBuilder, name: &str, d: usize) -> Self {
        let g = lb.push(format!("{name}.gain"), &[d]);
        let b = lb.push(format!("{name}.bias"), &[d]);
        Self { g, b }
    }
}

pub(super) struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    fc: Linear,
    proj: Linear,
}

pub(super) struct Index {
    x_embed: Linear,
    y_embed: Linear,
    pos: Range<usize>,
    blocks: Vec<Block>,
    ln_f: Norm,
    readout: Linear,
}

impl Index {
    pub(super) fn build(cfg: &TransformerConfig, lb: &mut LayoutBuilder) -> Self {
        let d = cfg.embed_dim;
        let x_embed = Linear::build(lb, "x_embed", 1, d);
        let y_embed = Linear::build(lb, "y_embed", 1, d);
        let pos = lb.push("pos_embed", &[cfg.n_tokens(), d]);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                Block {
                    ln1: Norm::build(lb, &format!("{p}.ln1"), d),
                    qkv: Linear::build(lb, &format!("{p}.attn.qkv"), d, 3 * d),
                    out: Linear::build(lb, &format!("{p}.attn.out"), d, d),
                    ln2: Norm::build(lb, &format!("{p}.ln2"), d),
                    fc: Linear::build(lb, &format!("{p}.mlp.fc"), d, 4 * d),
                    proj: Linear::build(lb, &format!("{p}.mlp.proj"), 4 * d, d),
                }
            })
            .collect();
        let ln_f = Norm::build(lb, "ln_f", d);
        let readout = Linear::build(lb, "readout", d, 1);
        Self { x_embed, y_embed, pos, blocks, ln_f, readout }
    }

    pub(super) fn of(cfg: &TransformerConfig) -> Self {
        Self::build(cfg, &mut LayoutBuilder::default())
    }
}

#[derive(Default)]
pub(super) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Default)]
struct LayerCache<T> {
    ln1: NormCache<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: NormCache<T>,
    a2: Vec<T>,
    u: Vec<T>,
    th: Vec<T>,
    gu: Vec<T>,
}

/// Activations of the last forward pass plus backward scratch. Reused across
/// calls so a training step does not reallocate its buffers.
#[derive(Default)]
pub(super) struct Workspace<T> {
    b: usize,
    n: usize,
    kept: bool,
    xs: Vec<T>,
    ys: Vec<T>,
    h: Vec<T>,
    layers: Vec<LayerCache<T>>,
    ln_f: NormCache<T>,
    hf: Vec<T>,
    dhf: Vec<T>,
    dh: Vec<T>,
    dgu: Vec<T>,
    da: Vec<T>,
    dattn: Vec<T>,
    dqkv: Vec<T>,
    ds: Vec<T>,
}

/// Resizes without clearing; for buffers that are fully overwritten.
fn sized<T: Scalar>(v: &mut Vec<T>, len: usize) -> &mut [T] {
    v.resize(len, T::zero());
    v
}

fn zeroed<T: Scalar>(v: &mut Vec<T>, len: usize) -> &mut [T] {
    v.clear();
    v.resize(len, T::zero());
    v
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, noticeably cheaper than the libm call.
fn tanh<T: Scalar>(x: T) -> T {
    T::one() - (T::one() + T::one()) / ((x + x).exp() + T::one())
}

/// Returns `(gelu(u), tanh(inner))`; the second value feeds [`gelu_grad`].
fn gelu<T: Scalar>(u: T) -> (T, T) {
    let half = T::of(0.5);
    let t = tanh(T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u));
    (half * u * (T::one() + t), t)
}

fn gelu_grad<T: Scalar>(u: T, t: T) -> T {
    let half = T::of(0.5);
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * u * u);
    half * (T::one() + t) + half * u * (T::one() - t * t) * dinner
}

fn norm_forward<T: Scalar>(x: &[T], g: &[T], beta: &[T], d: usize, out: &mut Vec<T>, cache: &mut NormCache<T>) {
    let rows = x.len() / d;
    let out = sized(out, x.len());
    let xhat = sized(&mut cache.xhat, x.len());
    let rstd = sized(&mut cache.rstd, rows);
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + beta[j];
        }
    }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    g: &[T],
    d: usize,
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

fn add_bias<T: Scalar>(m: &mut [T], bias: &[T]) {
    for row in m.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Causal multi-head attention on `b` sequences of `t` tokens. Fills the
/// `b·heads` row-stochastic `t×t` weight blocks and the concatenated heads.
fn attention_forward<T: Scalar>(
    qkv: &[T],
    b: usize,
    t: usize,
    cfg: &TransformerConfig,
    probs: &mut Vec<T>,
    out: &mut Vec<T>,
) {
    let d = cfg.embed_dim;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let row3 = Strides(3 * d, 1);
    let col3 = Strides(1, 3 * d);
    let probs = sized(probs, b * nh * t * t);
    let out = sized(out, b * t * d);
    for bi in 0..b {
        let base = bi * t;
        for h in 0..nh {
            let q = &qkv[base * 3 * d + h * hd..];
            let k = &qkv[base * 3 * d + d + h * hd..];
            let v = &qkv[base * 3 * d + 2 * d + h * hd..];
            let block = &mut probs[(bi * nh + h) * t * t..][..t * t];
            gemm_strided(t, hd, t, q, row3, k, col3, block, Strides(t, 1), false);
            for (i, row) in block.chunks_exact_mut(t).enumerate() {
                let mut max = T::neg_infinity();
                for s in &mut row[..=i] {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = T::zero();
                for s in &mut row[..=i] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut row[..=i] {
                    *s /= sum;
                }
                row[i + 1..].fill(T::zero());
            }
            let o = &mut out[base * d + h * hd..];
            gemm_strided(t, t, hd, block, Strides(t, 1), v, row3, o, Strides(d, 1), false);
        }
    }
}

/// Adds the gradient with respect to `qkv` into `dqkv`.
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    b: usize,
    t: usize,
    cfg: &TransformerConfig,
    dqkv: &mut [T],
    ds: &mut Vec<T>,
) {
    let d = cfg.embed_dim;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let row3 = Strides(3 * d, 1);
    let col3 = Strides(1, 3 * d);
    let square = Strides(t, 1);
    let square_t = Strides(1, t);
    let ds = sized(ds, t * t);
    for bi in 0..b {
        let base = bi * t;
        for h in 0..nh {
            let q_off = base * 3 * d + h * hd;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let block = &probs[(bi * nh + h) * t * t..][..t * t];
            let d_o = &dout[base * d + h * hd..];
            gemm_strided(t, hd, t, d_o, Strides(d, 1), &qkv[v_off..], col3, ds, square, false);
            gemm_strided(t, t, hd, block, square_t, d_o, Strides(d, 1), &mut dqkv[v_off..], row3, true);
            for (i, (drow, prow)) in ds.chunks_exact_mut(t).zip(block.chunks_exact(t)).enumerate() {
                let weighted: T = drow[..=i].iter().zip(&prow[..=i]).map(|(a, p)| *a * *p).sum();
                for (dv, p) in drow[..=i].iter_mut().zip(&prow[..=i]) {
                    *dv = *p * (*dv - weighted) * scale;
                }
                drow[i + 1..].fill(T::zero());
            }
            gemm_strided(t, t, hd, ds, square, &qkv[k_off..], row3, &mut dqkv[q_off..], row3, true);
            gemm_strided(t, t, hd, ds, square_t, &qkv[q_off..], row3, &mut dqkv[k_off..], row3, true);
        }
    }
}

/// `xs`, `ys`: `b × n` row-major. Only `ys[.., ..n-1]` enter the token
/// stream. Returns `b × n` predictions. With `keep`, every layer's
/// activations stay in `ws` for [`backward`]; otherwise one layer slot is
/// recycled.
#[allow(clippy::too_many_arguments)]
pub(super) fn forward<T: Scalar>(
    p: &[T],
    ix: &Index,
    cfg: &TransformerConfig,
    b: usize,
    n: usize,
    xs: &[T],
    ys: &[T],
    keep: bool,
    ws: &mut Workspace<T>,
) -> Vec<T> {
    let d = cfg.embed_dim;
    let t = 2 * n - 1;
    let rows = b * t;
    ws.b = b;
    ws.n = n;
    ws.kept = keep;
    ws.xs.clear();
    ws.xs.extend_from_slice(xs);
    ws.ys.clear();
    ws.ys.extend_from_slice(ys);

    let h = sized(&mut ws.h, rows * d);
    let pos = &p[ix.pos.clone()];
    for bi in 0..b {
        for ti in 0..t {
            let (emb, v) = if ti % 2 == 0 {
                (&ix.x_embed, xs[bi * n + ti / 2])
            } else {
                (&ix.y_embed, ys[bi * n + ti / 2])
            };
            let w = &p[emb.w.clone()];
            let bias = &p[emb.b.clone()];
            let row = &mut h[(bi * t + ti) * d..][..d];
            for j in 0..d {
                row[j] = v * w[j] + bias[j] + pos[ti * d + j];
            }
        }
    }

    let slots = if keep { ix.blocks.len() } else { 1 };
    if ws.layers.len() < slots {
        ws.layers.resize_with(slots, Default::default);
    }
    for (l, blk) in ix.blocks.iter().enumerate() {
        let lc = &mut ws.layers[if keep { l } else { 0 }];
        let h = &mut ws.h;
        norm_forward(h, &p[blk.ln1.g.clone()], &p[blk.ln1.b.clone()], d, &mut lc.a1, &mut lc.ln1);
        let qkv = sized(&mut lc.qkv, rows * 3 * d);
        gemm(false, false, rows, d, 3 * d, &lc.a1, &p[blk.qkv.w.clone()], qkv, false);
        add_bias(qkv, &p[blk.qkv.b.clone()]);
        attention_forward(&lc.qkv, b, t, cfg, &mut lc.probs, &mut lc.attn);
        gemm(false, false, rows, d, d, &lc.attn, &p[blk.out.w.clone()], h, true);
        add_bias(h, &p[blk.out.b.clone()]);

        norm_forward(h, &p[blk.ln2.g.clone()], &p[blk.ln2.b.clone()], d, &mut lc.a2, &mut lc.ln2);
        let u = sized(&mut lc.u, rows * 4 * d);
        gemm(false, false, rows, d, 4 * d, &lc.a2, &p[blk.fc.w.clone()], u, false);
        add_bias(u, &p[blk.fc.b.clone()]);
        let th = sized(&mut lc.th, rows * 4 * d);
        let gu = sized(&mut lc.gu, rows * 4 * d);
        for ((g, t), &v) in gu.iter_mut().zip(th.iter_mut()).zip(lc.u.iter()) {
            (*g, *t) = gelu(v);
        }
        gemm(false, false, rows, 4 * d, d, &lc.gu, &p[blk.proj.w.clone()], h, true);
        add_bias(h, &p[blk.proj.b.clone()]);
    }

    norm_forward(&ws.h, &p[ix.ln_f.g.clone()], &p[ix.ln_f.b.clone()], d, &mut ws.hf, &mut ws.ln_f);
    let w_out = &p[ix.readout.w.clone()];
    let b_out = p[ix.readout.b.start];
    let mut preds = vec![T::zero(); b * n];
    for bi in 0..b {
        for i in 0..n {
            preds[bi * n + i] = dot(&ws.hf[(bi * t + 2 * i) * d..][..d], w_out) + b_out;
        }
    }
    preds
}

/// Accumulates the gradient of `sum(dpred · preds)` into `g`, using the
/// activations left in `ws` by a `keep` forward pass.
pub(super) fn backward<T: Scalar>(
    p: &[T],
    ix: &Index,
    cfg: &TransformerConfig,
    ws: &mut Workspace<T>,
    dpred: &[T],
    g: &mut [T],
) {
    assert!(ws.kept, "backward needs a forward pass that kept activations");
    let d = cfg.embed_dim;
    let (b, n) = (ws.b, ws.n);
    let t = 2 * n - 1;
    let rows = b * t;

    let dhf = zeroed(&mut ws.dhf, rows * d);
    let w_out = &p[ix.readout.w.clone()];
    {
        let (gw, gb) = two_mut(g, ix.readout.w.clone(), ix.readout.b.clone());
        for bi in 0..b {
            for i in 0..n {
                let dp = dpred[bi * n + i];
                let row = (bi * t + 2 * i) * d;
                axpy(dp, w_out, &mut dhf[row..row + d]);
                axpy(dp, &ws.hf[row..row + d], gw);
                gb[0] += dp;
            }
        }
    }
    let dh = zeroed(&mut ws.dh, rows * d);
    {
        let (dg, db) = two_mut(g, ix.ln_f.g.clone(), ix.ln_f.b.clone());
        norm_backward(&ws.dhf, &ws.ln_f, &p[ix.ln_f.g.clone()], d, dg, db, dh);
    }

    let dgu = sized(&mut ws.dgu, rows * 4 * d);
    let da = sized(&mut ws.da, rows * d);
    let dattn = sized(&mut ws.dattn, rows * d);
    for (blk, lc) in ix.blocks.iter().zip(&ws.layers).rev() {
        // feed-forward
        gemm(true, false, 4 * d, rows, d, &lc.gu, dh, &mut g[blk.proj.w.clone()], true);
        sum_rows(dh, d, &mut g[blk.proj.b.clone()]);
        gemm(false, true, rows, d, 4 * d, dh, &p[blk.proj.w.clone()], dgu, false);
        for ((dv, &u), &th) in dgu.iter_mut().zip(&lc.u).zip(&lc.th) {
            *dv *= gelu_grad(u, th);
        }
        gemm(true, false, d, rows, 4 * d, &lc.a2, dgu, &mut g[blk.fc.w.clone()], true);
        sum_rows(dgu, 4 * d, &mut g[blk.fc.b.clone()]);
        gemm(false, true, rows, 4 * d, d, dgu, &p[blk.fc.w.clone()], da, false);
        {
            let (dg, db) = two_mut(g, blk.ln2.g.clone(), blk.ln2.b.clone());
            norm_backward(da, &lc.ln2, &p[blk.ln2.g.clone()], d, dg, db, dh);
        }

        // attention
        gemm(true, false, d, rows, d, &lc.attn, dh, &mut g[blk.out.w.clone()], true);
        sum_rows(dh, d, &mut g[blk.out.b.clone()]);
        gemm(false, true, rows, d, d, dh, &p[blk.out.w.clone()], dattn, false);
        let dqkv = zeroed(&mut ws.dqkv, rows * 3 * d);
        attention_backward(&lc.qkv, &lc.probs, dattn, b, t, cfg, dqkv, &mut ws.ds);
        gemm(true, false, d, rows, 3 * d, &lc.a1, dqkv, &mut g[blk.qkv.w.clone()], true);
        sum_rows(dqkv, 3 * d, &mut g[blk.qkv.b.clone()]);
        gemm(false, true, rows, 3 * d, d, dqkv, &p[blk.qkv.w.clone()], da, false);
        {
            let (dg, db) = two_mut(g, blk.ln1.g.clone(), blk.ln1.b.clone());
            norm_backward(da, &lc.ln1, &p[blk.ln1.g.clone()], d, dg, db, dh);
        }
    }

    for bi in 0..b {
        for ti in 0..t {
            let row = &dh[(bi * t + ti) * d..][..d];
            axpy(T::one(), row, &mut g[ix.pos.start + ti * d..][..d]);
            let (emb, v) = if ti % 2 == 0 {
                (&ix.x_embed, ws.xs[bi * n + ti / 2])
            } else {
                (&ix.y_embed, ws.ys[bi * n + ti / 2])
            };
            let (gw, gb) = two_mut(g, emb.w.clone(), emb.b.clone());
            axpy(v, row, gw);
            axpy(T::one(), row, gb);
        }
    }
}
