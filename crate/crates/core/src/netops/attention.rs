//! Scaled dot-product multi-head self-attention over token sequences.
//! Forward and backward are fused into one tape rule; the softmax
//! probabilities and projections are saved for the reverse pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

/// Projection weights for multi-head self-attention. All projections are
/// packed [D, D]; heads are contiguous column blocks of width D / heads.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        bq: Tensor,
        bk: Tensor,
        bv: Tensor,
        bo: Tensor,
        heads: usize,
    ) -> Result<Self> {
        let d = match *wq.shape() {
            [d, d2] if d == d2 => d,
            _ => return Err(Error::shapes("mha", "square [D, D] wq", format!("{:?}", wq.shape()))),
        };
        for (name, w) in [("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if w.shape() != [d, d] {
                return Err(Error::shapes("mha", format!("[{d}, {d}] {name}"), format!("{:?}", w.shape())));
            }
        }
        for (name, b) in [("bq", &bq), ("bk", &bk), ("bv", &bv), ("bo", &bo)] {
            if b.shape() != [d] {
                return Err(Error::shapes("mha", format!("[{d}] {name}"), format!("{:?}", b.shape())));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(
                "mha",
                format!("model width {d} must be divisible by head count {heads}"),
            ));
        }
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            bq,
            bk,
            bv,
            bo,
            heads,
            width: d,
        })
    }
}

/// y = x W + b for x: [T, D], W: [D, M], row-major slices.
fn affine(x: &[f64], w: &[f64], b: &[f64], t: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * m];
    for row in out.chunks_exact_mut(m) {
        row.copy_from_slice(b);
    }
    linalg::gemm_acc(&mut out, x, w, t, d, m);
    out
}

fn softmax_rows(scores: &mut [f64], t: usize) {
    for row in scores.chunks_exact_mut(t) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gather a head's columns: src [T, D] -> dst [T, dh].
fn head_slice(src: &[f64], t: usize, d: usize, h0: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * dh];
    for ti in 0..t {
        out[ti * dh..(ti + 1) * dh].copy_from_slice(&src[ti * d + h0..ti * d + h0 + dh]);
    }
    out
}

fn head_scatter_add(dst: &mut [f64], src: &[f64], t: usize, d: usize, h0: usize, dh: usize) {
    for ti in 0..t {
        for j in 0..dh {
            dst[ti * d + h0 + j] += src[ti * dh + j];
        }
    }
}

struct MhaSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // heads x [T, T], concatenated
    ctx: Vec<f64>,   // [T, D] before the output projection
}

struct MhaRule {
    x: Option<NodeId>,
    wq: Option<NodeId>,
    wk: Option<NodeId>,
    wv: Option<NodeId>,
    wo: Option<NodeId>,
    bq: Option<NodeId>,
    bk: Option<NodeId>,
    bv: Option<NodeId>,
    bo: Option<NodeId>,
    x_data: Arc<Vec<f64>>,
    wq_data: Arc<Vec<f64>>,
    wk_data: Arc<Vec<f64>>,
    wv_data: Arc<Vec<f64>>,
    wo_data: Arc<Vec<f64>>,
    saved: Vec<MhaSaved>, // per batch item
    batch: usize,
    t: usize,
    d: usize,
    heads: usize,
}

impl Backward for MhaRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (t, d, heads) = (self.t, self.d, self.heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let td = t * d;

        let mut dx = vec![0.0; self.batch * td];
        let mut dwq = vec![0.0; d * d];
        let mut dwk = vec![0.0; d * d];
        let mut dwv = vec![0.0; d * d];
        let mut dwo = vec![0.0; d * d];
        let mut dbq = vec![0.0; d];
        let mut dbk = vec![0.0; d];
        let mut dbv = vec![0.0; d];
        let mut dbo = vec![0.0; d];

        let wot = linalg::transpose(&self.wo_data, d, d);
        let wqt = linalg::transpose(&self.wq_data, d, d);
        let wkt = linalg::transpose(&self.wk_data, d, d);
        let wvt = linalg::transpose(&self.wv_data, d, d);

        for bi in 0..self.batch {
            let saved = &self.saved[bi];
            let gb = &g[bi * td..(bi + 1) * td];
            let xb = &self.x_data[bi * td..(bi + 1) * td];

            // output projection
            let ctx_t = linalg::transpose(&saved.ctx, t, d);
            linalg::gemm_acc(&mut dwo, &ctx_t, gb, d, t, d);
            for row in gb.chunks_exact(d) {
                for (acc, v) in dbo.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let mut dctx = vec![0.0; td];
            linalg::gemm_acc(&mut dctx, gb, &wot, t, d, d);

            // per-head attention
            let mut dq = vec![0.0; td];
            let mut dk = vec![0.0; td];
            let mut dv = vec![0.0; td];
            for h in 0..heads {
                let h0 = h * dh;
                let qh = head_slice(&saved.q, t, d, h0, dh);
                let kh = head_slice(&saved.k, t, d, h0, dh);
                let vh = head_slice(&saved.v, t, d, h0, dh);
                let ph = &saved.probs[h * t * t..(h + 1) * t * t];
                let dctx_h = head_slice(&dctx, t, d, h0, dh);

                // d probs = dctx_h V^T ; dV = P^T dctx_h
                let vht = linalg::transpose(&vh, t, dh);
                let mut dp = vec![0.0; t * t];
                linalg::gemm_acc(&mut dp, &dctx_h, &vht, t, dh, t);
                let pht = linalg::transpose(ph, t, t);
                let mut dvh = vec![0.0; t * dh];
                linalg::gemm_acc(&mut dvh, &pht, &dctx_h, t, t, dh);

                // softmax backward: dS = P .* (dP - rowsum(dP .* P))
                let mut ds = vec![0.0; t * t];
                for r in 0..t {
                    let prow = &ph[r * t..(r + 1) * t];
                    let dprow = &dp[r * t..(r + 1) * t];
                    let dot: f64 = prow.iter().zip(dprow).map(|(p, dp)| p * dp).sum();
                    for c in 0..t {
                        ds[r * t + c] = prow[c] * (dprow[c] - dot) * scale;
                    }
                }

                // dQ_h = dS K_h ; dK_h = dS^T Q_h
                let mut dqh = vec![0.0; t * dh];
                linalg::gemm_acc(&mut dqh, &ds, &kh, t, t, dh);
                let dst = linalg::transpose(&ds, t, t);
                let mut dkh = vec![0.0; t * dh];
                linalg::gemm_acc(&mut dkh, &dst, &qh, t, t, dh);

                head_scatter_add(&mut dq, &dqh, t, d, h0, dh);
                head_scatter_add(&mut dk, &dkh, t, d, h0, dh);
                head_scatter_add(&mut dv, &dvh, t, d, h0, dh);
            }

            // projections back to x and weights
            let xt = linalg::transpose(xb, t, d);
            linalg::gemm_acc(&mut dwq, &xt, &dq, d, t, d);
            linalg::gemm_acc(&mut dwk, &xt, &dk, d, t, d);
            linalg::gemm_acc(&mut dwv, &xt, &dv, d, t, d);
            for row in dq.chunks_exact(d) {
                for (acc, v) in dbq.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for row in dk.chunks_exact(d) {
                for (acc, v) in dbk.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for row in dv.chunks_exact(d) {
                for (acc, v) in dbv.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let dxb = &mut dx[bi * td..(bi + 1) * td];
            linalg::gemm_acc(dxb, &dq, &wqt, t, d, d);
            linalg::gemm_acc(dxb, &dk, &wkt, t, d, d);
            linalg::gemm_acc(dxb, &dv, &wvt, t, d, d);
        }

        if let Some(n) = self.x {
            sink.accumulate_owned(n, dx);
        }
        for (node, grad) in [
            (self.wq, dwq),
            (self.wk, dwk),
            (self.wv, dwv),
            (self.wo, dwo),
            (self.bq, dbq),
            (self.bk, dbk),
            (self.bv, dbv),
            (self.bo, dbo),
        ] {
            if let Some(n) = node {
                sink.accumulate_owned(n, grad);
            }
        }
    }
}

/// Multi-head self-attention over x: [B, T, D]. Softmax over keys; no
/// positional term and no masking inside the op (so it is permutation
/// equivariant over tokens); the caller adds residuals.
pub fn mha(tape: &mut Tape, x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (b, t, d) = match *x.shape() {
        [b, t, d] => (b, t, d),
        _ => return Err(Error::shapes("mha", "rank-3 input [B, T, D]", format!("{:?}", x.shape()))),
    };
    if d != p.width {
        return Err(Error::shapes(
            "mha",
            format!("model width {}", p.width),
            format!("input width {d} (shape {:?})", x.shape()),
        ));
    }
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let td = t * d;

    let mut out = vec![0.0; b * td];
    let mut saved = Vec::with_capacity(b);
    for bi in 0..b {
        let xb = &x.data()[bi * td..(bi + 1) * td];
        let q = affine(xb, p.wq.data(), p.bq.data(), t, d, d);
        let k = affine(xb, p.wk.data(), p.bk.data(), t, d, d);
        let v = affine(xb, p.wv.data(), p.bv.data(), t, d, d);

        let mut probs = vec![0.0; heads * t * t];
        let mut ctx = vec![0.0; td];
        for h in 0..heads {
            let h0 = h * dh;
            let qh = head_slice(&q, t, d, h0, dh);
            let kh = head_slice(&k, t, d, h0, dh);
            let vh = head_slice(&v, t, d, h0, dh);
            let kht = linalg::transpose(&kh, t, dh);
            let scores = &mut probs[h * t * t..(h + 1) * t * t];
            linalg::gemm_acc(scores, &qh, &kht, t, dh, t);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_rows(scores, t);
            let mut ctx_h = vec![0.0; t * dh];
            linalg::gemm_acc(&mut ctx_h, scores, &vh, t, t, dh);
            head_scatter_add(&mut ctx, &ctx_h, t, d, h0, dh);
        }
        let y = affine(&ctx, p.wo.data(), p.bo.data(), t, d, d);
        out[bi * td..(bi + 1) * td].copy_from_slice(&y);
        saved.push(MhaSaved { q, k, v, probs, ctx });
    }

    let params_tracked = [&p.wq, &p.wk, &p.wv, &p.wo, &p.bq, &p.bk, &p.bv, &p.bo]
        .iter()
        .any(|t| t.is_tracked());
    let tracked = tape.is_recording() && (x.is_tracked() || params_tracked);
    let rule = tracked.then(|| {
        Box::new(MhaRule {
            x: x.node(),
            wq: p.wq.node(),
            wk: p.wk.node(),
            wv: p.wv.node(),
            wo: p.wo.node(),
            bq: p.bq.node(),
            bk: p.bk.node(),
            bv: p.bv.node(),
            bo: p.bo.node(),
            x_data: x.data_arc(),
            wq_data: p.wq.data_arc(),
            wk_data: p.wk.data_arc(),
            wv_data: p.wv.data_arc(),
            wo_data: p.wo.data_arc(),
            saved,
            batch: b,
            t,
            d,
            heads,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![b, t, d], out, rule))
}
