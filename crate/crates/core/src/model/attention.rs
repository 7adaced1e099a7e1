//! Window multi-head self-attention with a learned relative position bias.
//!
//! The kernels work on `(N, 3C)` query/key/value rows already gathered into
//! window order. Attention probabilities are not stored; the backward pass
//! recomputes them window by window.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::layers::{trunc_normal, Linear};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `((2M-1)^2, heads)`
    pub rel_bias: Array2<f64>,
}

crate::impl_parameters!(WindowAttention { qkv, proj, rel_bias });

impl WindowAttention {
    pub fn zeros(c: usize, m: usize, heads: usize) -> Self {
        WindowAttention {
            qkv: Linear::zeros(c, 3 * c),
            proj: Linear::zeros(c, c),
            rel_bias: Array2::zeros(((2 * m - 1) * (2 * m - 1), heads)),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, c: usize, m: usize, heads: usize) -> Self {
        WindowAttention {
            qkv: Linear::init(rng, c, 3 * c),
            proj: Linear::init(rng, c, c),
            rel_bias: trunc_normal(rng, 0.02, ((2 * m - 1) * (2 * m - 1), heads)),
        }
    }

    pub fn window_size(&self) -> usize {
        let side = (self.rel_bias.nrows() as f64).sqrt().round() as usize;
        side.div_ceil(2)
    }

    pub fn n_heads(&self) -> usize {
        self.rel_bias.ncols()
    }
}

/// Static geometry of one window: relative-position bias indices.
pub(crate) struct Geometry {
    pub n: usize,
    pub heads: usize,
    pub c: usize,
    pub rel_index: Vec<usize>,
}

/// One window and head: queries `(n, d)` pre-scaled, keys and values
/// transposed to `(d, n)` so the inner loops run over contiguous tokens.
struct HeadBuffers {
    q: Vec<f64>,
    kt: Vec<f64>,
    vt: Vec<f64>,
}

/// `y += a * x`.
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent partial sums so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Geometry {
    pub fn new(m: usize, heads: usize, c: usize) -> Self {
        let n = m * m;
        let mut rel_index = Vec::with_capacity(n * n);
        for t in 0..n {
            let (a, b) = (t / m, t % m);
            for s in 0..n {
                let (cc, d) = (s / m, s % m);
                rel_index.push((a + m - 1 - cc) * (2 * m - 1) + (b + m - 1 - d));
            }
        }
        Geometry { n, heads, c, rel_index }
    }

    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// Bias expanded to `(heads, n * n)`.
    fn dense_bias(&self, rel_bias: &Array2<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.heads * self.n * self.n);
        for h in 0..self.heads {
            out.extend(self.rel_index.iter().map(|&r| rel_bias[[r, h]]));
        }
        out
    }

    fn buffers(&self) -> HeadBuffers {
        let len = self.n * self.head_dim();
        HeadBuffers {
            q: vec![0.0; len],
            kt: vec![0.0; len],
            vt: vec![0.0; len],
        }
    }

    fn gather(&self, qkv: &[f64], win: usize, head: usize, buf: &mut HeadBuffers) {
        let (n, c, d) = (self.n, self.c, self.head_dim());
        let scale = self.scale();
        for t in 0..n {
            let row = &qkv[(win * n + t) * 3 * c..][..3 * c];
            for e in 0..d {
                buf.q[t * d + e] = row[head * d + e] * scale;
                buf.kt[e * n + t] = row[c + head * d + e];
                buf.vt[e * n + t] = row[2 * c + head * d + e];
            }
        }
    }

    /// Region labels of one window, or `None` when all tokens share a region.
    fn window_labels<'a>(&self, labels: Option<&'a [u8]>, win: usize) -> Option<&'a [u8]> {
        let l = &labels?[win * self.n..(win + 1) * self.n];
        l.iter().any(|&v| v != l[0]).then_some(l)
    }

    /// Softmax probabilities `(n, n)` for one window and head.
    fn probs(&self, buf: &HeadBuffers, bias: &[f64], labels: Option<&[u8]>, out: &mut [f64]) {
        let (n, d) = (self.n, self.head_dim());
        for t in 0..n {
            let row = &mut out[t * n..(t + 1) * n];
            row.copy_from_slice(&bias[t * n..(t + 1) * n]);
            for e in 0..d {
                axpy(buf.q[t * d + e], &buf.kt[e * n..(e + 1) * n], row);
            }
            if let Some(l) = labels {
                let lt = l[t];
                for (slot, &ls) in row.iter_mut().zip(l) {
                    if ls != lt {
                        *slot = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            let inv = 1.0 / sum;
            for slot in row.iter_mut() {
                *slot *= inv;
            }
        }
    }

    /// Probabilities of every `(window, head)` pair, window-major.
    fn all_probs(&self, qkv: &Array2<f64>, rel_bias: &Array2<f64>, labels: Option<&[u8]>) -> Vec<Vec<f64>> {
        let n = self.n;
        let qkv_s = qkv.as_slice().expect("standard layout");
        let bias = self.dense_bias(rel_bias);
        let mut buf = self.buffers();
        let mut out = Vec::new();
        for win in 0..qkv.nrows() / n {
            let wl = self.window_labels(labels, win);
            for head in 0..self.heads {
                self.gather(qkv_s, win, head, &mut buf);
                let mut p = vec![0.0; n * n];
                self.probs(&buf, &bias[head * n * n..(head + 1) * n * n], wl, &mut p);
                out.push(p);
            }
        }
        out
    }

    pub fn forward(&self, qkv: &Array2<f64>, rel_bias: &Array2<f64>, labels: Option<&[u8]>) -> Array2<f64> {
        let (n, c, d) = (self.n, self.c, self.head_dim());
        let n_tok = qkv.nrows();
        let qkv_s = qkv.as_slice().expect("standard layout");
        let bias = self.dense_bias(rel_bias);
        let mut ctx = Array2::zeros((n_tok, c));
        let ctx_s = ctx.as_slice_mut().unwrap();
        let mut buf = self.buffers();
        let mut p = vec![0.0; n * n];
        for win in 0..n_tok / n {
            let wl = self.window_labels(labels, win);
            for head in 0..self.heads {
                self.gather(qkv_s, win, head, &mut buf);
                self.probs(&buf, &bias[head * n * n..(head + 1) * n * n], wl, &mut p);
                for t in 0..n {
                    let prow = &p[t * n..(t + 1) * n];
                    let out = &mut ctx_s[(win * n + t) * c + head * d..][..d];
                    for (e, o) in out.iter_mut().enumerate() {
                        *o = dot(prow, &buf.vt[e * n..(e + 1) * n]);
                    }
                }
            }
        }
        ctx
    }

    /// Returns `(d qkv, d rel_bias)`.
    pub fn backward(
        &self,
        qkv: &Array2<f64>,
        rel_bias: &Array2<f64>,
        labels: Option<&[u8]>,
        dctx: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (n, c, d) = (self.n, self.c, self.head_dim());
        let scale = self.scale();
        let n_tok = qkv.nrows();
        let qkv_s = qkv.as_slice().expect("standard layout");
        let dctx_s = dctx.as_slice().expect("standard layout");
        let bias = self.dense_bias(rel_bias);
        let mut dbias_dense = vec![0.0; self.heads * n * n];
        let mut dqkv = Array2::zeros((n_tok, 3 * c));
        let dq_s = dqkv.as_slice_mut().unwrap();
        let mut buf = self.buffers();
        let mut grads = self.buffers();
        let mut p = vec![0.0; n * n];
        let mut ds = vec![0.0; n];
        for win in 0..n_tok / n {
            let wl = self.window_labels(labels, win);
            for head in 0..self.heads {
                let hb = head * n * n..(head + 1) * n * n;
                self.gather(qkv_s, win, head, &mut buf);
                self.probs(&buf, &bias[hb.clone()], wl, &mut p);
                grads.q.fill(0.0);
                grads.kt.fill(0.0);
                grads.vt.fill(0.0);
                let db = &mut dbias_dense[hb];

                for t in 0..n {
                    let g = &dctx_s[(win * n + t) * c + head * d..][..d];
                    let prow = &p[t * n..(t + 1) * n];
                    // Through the value mix: dP = g V^T, dV += P^T g.
                    ds.fill(0.0);
                    for (e, &ge) in g.iter().enumerate() {
                        axpy(ge, &buf.vt[e * n..(e + 1) * n], &mut ds);
                        axpy(ge, prow, &mut grads.vt[e * n..(e + 1) * n]);
                    }
                    // Through the softmax.
                    let inner = dot(prow, &ds);
                    for (dsv, &pv) in ds.iter_mut().zip(prow) {
                        *dsv = pv * (*dsv - inner);
                    }
                    // Through the scores.
                    axpy(1.0, &ds, &mut db[t * n..(t + 1) * n]);
                    for e in 0..d {
                        grads.q[t * d + e] = dot(&ds, &buf.kt[e * n..(e + 1) * n]);
                        axpy(buf.q[t * d + e], &ds, &mut grads.kt[e * n..(e + 1) * n]);
                    }
                }

                for t in 0..n {
                    let row = &mut dq_s[(win * n + t) * 3 * c..][..3 * c];
                    for e in 0..d {
                        row[head * d + e] += grads.q[t * d + e] * scale;
                        row[c + head * d + e] += grads.kt[e * n + t];
                        row[2 * c + head * d + e] += grads.vt[e * n + t];
                    }
                }
            }
        }
        let mut dbias = Array2::zeros(rel_bias.dim());
        for h in 0..self.heads {
            for (ts, &r) in self.rel_index.iter().enumerate() {
                dbias[[r, h]] += dbias_dense[h * n * n + ts];
            }
        }
        (dqkv, dbias)
    }
}

/// Multi-head self-attention applied independently inside each window.
///
/// `tokens` is `(windows, M*M, C)`. When `region_labels` is given (one label
/// per token, window-major), query/key pairs with different labels are
/// excluded, which is the cross-boundary mask used for shifted windows.
pub fn msa_window(tokens: &Array3<f64>, attn: &WindowAttention, region_labels: Option<&[u8]>) -> Result<Array3<f64>> {
    let (n_win, n, c) = tokens.dim();
    let (m, heads) = (attn.window_size(), attn.n_heads());
    if c % heads != 0 {
        return Err(Error::Config(format!("channels {c} not divisible by {heads} heads")));
    }
    if n != m * m || attn.qkv.weight.nrows() != c {
        return Err(Error::Shape(format!(
            "tokens ({n_win}, {n}, {c}) incompatible with window {m} and {} input channels",
            attn.qkv.weight.nrows()
        )));
    }
    if let Some(l) = region_labels {
        if l.len() != n_win * n {
            return Err(Error::Shape(format!("{} region labels for {} tokens", l.len(), n_win * n)));
        }
    }
    let flat = tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n_win * n, c))
        .expect("contiguous");
    let geom = Geometry::new(m, heads, c);
    let qkv = attn.qkv.forward(&flat);
    let ctx = geom.forward(&qkv, &attn.rel_bias, region_labels);
    let out = attn.proj.forward(&ctx);
    Ok(out.into_shape_with_order((n_win, n, c)).expect("contiguous"))
}

/// Attention probabilities, one `(n, n)` matrix per window and head in
/// window-major order; exposed for inspection and tests.
pub fn attention_probs(tokens: &Array3<f64>, attn: &WindowAttention, region_labels: Option<&[u8]>) -> Vec<Array2<f64>> {
    let (n_win, n, c) = tokens.dim();
    let geom = Geometry::new(attn.window_size(), attn.n_heads(), c);
    let flat = tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n_win * n, c))
        .expect("contiguous");
    let qkv = attn.qkv.forward(&flat);
    geom.all_probs(&qkv, &attn.rel_bias, region_labels)
        .into_iter()
        .map(|p| Array2::from_shape_vec((n, n), p).expect("n x n"))
        .collect()
}
