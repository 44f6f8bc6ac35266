//! Primitive differentiable ops. Layer-level operations (convolution,
//! attention, spectral filtering, ...) live in `netops` and register their
//! own rules through the same machinery.

use std::sync::Arc;

use super::{Backward, GradSink, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shapes(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

// ── elementwise binary ──────────────────────────────────────────────

struct AddRule {
    a: Option<NodeId>,
    b: Option<NodeId>,
    sign_b: f64,
}

impl Backward for AddRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        if let Some(a) = self.a {
            sink.accumulate(a, g);
        }
        if let Some(b) = self.b {
            if self.sign_b == 1.0 {
                sink.accumulate(b, g);
            } else {
                sink.accumulate_owned(b, g.iter().map(|v| v * self.sign_b).collect());
            }
        }
    }
}

struct MulRule {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<f64>>,
    b_data: Arc<Vec<f64>>,
}

impl Backward for MulRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        if let Some(a) = self.a {
            sink.accumulate_owned(a, g.iter().zip(self.b_data.iter()).map(|(g, b)| g * b).collect());
        }
        if let Some(b) = self.b {
            sink.accumulate_owned(b, g.iter().zip(self.a_data.iter()).map(|(g, a)| g * a).collect());
        }
    }
}

// ── unary ───────────────────────────────────────────────────────────

struct ScaleRule {
    x: NodeId,
    c: f64,
}

impl Backward for ScaleRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate_owned(self.x, g.iter().map(|v| v * self.c).collect());
    }
}

struct ReluRule {
    x: NodeId,
    x_data: Arc<Vec<f64>>,
}

impl Backward for ReluRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate_owned(
            self.x,
            g.iter()
                .zip(self.x_data.iter())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        );
    }
}

struct SigmoidRule {
    x: NodeId,
    y_data: Arc<Vec<f64>>,
}

impl Backward for SigmoidRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate_owned(
            self.x,
            self.y_data
                .iter()
                .zip(g)
                .map(|(y, g)| g * y * (1.0 - y))
                .collect(),
        );
    }
}

// GELU, tanh form.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct GeluRule {
    x: NodeId,
    x_data: Arc<Vec<f64>>,
}

impl Backward for GeluRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate_owned(
            self.x,
            g.iter()
                .zip(self.x_data.iter())
                .map(|(g, x)| g * gelu_grad(*x))
                .collect(),
        );
    }
}

// ── reductions ──────────────────────────────────────────────────────

struct SumRule {
    x: NodeId,
    len: usize,
    scale: f64,
}

impl Backward for SumRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        sink.accumulate_owned(self.x, vec![g[0] * self.scale; self.len]);
    }
}

// ── matmul / linear ─────────────────────────────────────────────────

struct MatmulRule {
    a: Option<NodeId>,
    b: Option<NodeId>,
    a_data: Arc<Vec<f64>>,
    b_data: Arc<Vec<f64>>,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        if let Some(a) = self.a {
            // dA = G * B^T
            let bt = linalg::transpose(&self.b_data, self.k, self.n);
            let mut da = vec![0.0; self.m * self.k];
            linalg::gemm_acc(&mut da, g, &bt, self.m, self.n, self.k);
            sink.accumulate_owned(a, da);
        }
        if let Some(b) = self.b {
            // dB = A^T * G
            let at = linalg::transpose(&self.a_data, self.m, self.k);
            let mut db = vec![0.0; self.k * self.n];
            linalg::gemm_acc(&mut db, &at, g, self.k, self.m, self.n);
            sink.accumulate_owned(b, db);
        }
    }
}

struct LinearRule {
    x: Option<NodeId>,
    w: Option<NodeId>,
    b: Option<NodeId>,
    x_data: Arc<Vec<f64>>,
    w_data: Arc<Vec<f64>>,
    n: usize,
    d: usize,
    m: usize,
}

impl Backward for LinearRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        if let Some(x) = self.x {
            let wt = linalg::transpose(&self.w_data, self.d, self.m);
            let mut dx = vec![0.0; self.n * self.d];
            linalg::gemm_acc(&mut dx, g, &wt, self.n, self.m, self.d);
            sink.accumulate_owned(x, dx);
        }
        if let Some(w) = self.w {
            let xt = linalg::transpose(&self.x_data, self.n, self.d);
            let mut dw = vec![0.0; self.d * self.m];
            linalg::gemm_acc(&mut dw, &xt, g, self.d, self.n, self.m);
            sink.accumulate_owned(w, dw);
        }
        if let Some(b) = self.b {
            let mut db = vec![0.0; self.m];
            for row in g.chunks_exact(self.m) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            sink.accumulate_owned(b, db);
        }
    }
}

// ── structure ───────────────────────────────────────────────────────

struct ConcatChannelsRule {
    a: Option<NodeId>,
    b: Option<NodeId>,
    batch: usize,
    ca: usize,
    cb: usize,
    hw: usize,
}

impl Backward for ConcatChannelsRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (ca, cb, hw) = (self.ca, self.cb, self.hw);
        let stride = (ca + cb) * hw;
        if let Some(a) = self.a {
            let mut da = vec![0.0; self.batch * ca * hw];
            for bi in 0..self.batch {
                da[bi * ca * hw..(bi + 1) * ca * hw]
                    .copy_from_slice(&g[bi * stride..bi * stride + ca * hw]);
            }
            sink.accumulate_owned(a, da);
        }
        if let Some(b) = self.b {
            let mut db = vec![0.0; self.batch * cb * hw];
            for bi in 0..self.batch {
                db[bi * cb * hw..(bi + 1) * cb * hw]
                    .copy_from_slice(&g[bi * stride + ca * hw..(bi + 1) * stride]);
            }
            sink.accumulate_owned(b, db);
        }
    }
}

struct GapRule {
    x: NodeId,
    hw: usize,
}

impl Backward for GapRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let inv = 1.0 / self.hw as f64;
        let mut dx = vec![0.0; g.len() * self.hw];
        for (i, gv) in g.iter().enumerate() {
            let v = gv * inv;
            dx[i * self.hw..(i + 1) * self.hw].fill(v);
        }
        sink.accumulate_owned(self.x, dx);
    }
}

struct PermuteRule {
    x: NodeId,
    /// forward[i] = source index of output element i; backward scatters.
    forward: std::sync::Arc<Vec<usize>>,
}

impl Backward for PermuteRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let mut dx = vec![0.0; g.len()];
        for (i, &src) in self.forward.iter().enumerate() {
            dx[src] = g[i];
        }
        sink.accumulate_owned(self.x, dx);
    }
}

struct AddRowsRule {
    x: Option<NodeId>,
    rows: Option<NodeId>,
    batch: usize,
    row_len: usize,
}

impl Backward for AddRowsRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        if let Some(x) = self.x {
            sink.accumulate(x, g);
        }
        if let Some(rows) = self.rows {
            let mut dr = vec![0.0; self.row_len];
            for bi in 0..self.batch {
                for (d, v) in dr.iter_mut().zip(&g[bi * self.row_len..(bi + 1) * self.row_len]) {
                    *d += v;
                }
            }
            sink.accumulate_owned(rows, dr);
        }
    }
}

impl Tape {
    fn any_tracked(&self, inputs: &[&Tensor]) -> bool {
        self.is_recording() && inputs.iter().any(|t| t.is_tracked())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let rule = self.any_tracked(&[a, b]).then(|| {
            Box::new(AddRule {
                a: a.node(),
                b: b.node(),
                sign_b: 1.0,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(a.shape().to_vec(), data, rule))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let rule = self.any_tracked(&[a, b]).then(|| {
            Box::new(AddRule {
                a: a.node(),
                b: b.node(),
                sign_b: -1.0,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(a.shape().to_vec(), data, rule))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let rule = self.any_tracked(&[a, b]).then(|| {
            Box::new(MulRule {
                a: a.node(),
                b: b.node(),
                a_data: a.data_arc(),
                b_data: b.data_arc(),
            }) as Box<dyn Backward>
        });
        Ok(self.emit(a.shape().to_vec(), data, rule))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let rule = self
            .any_tracked(&[x])
            .then(|| Box::new(ScaleRule { x: x.node().unwrap(), c }) as Box<dyn Backward>);
        self.emit(x.shape().to_vec(), data, rule)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(ReluRule {
                x: x.node().unwrap(),
                x_data: x.data_arc(),
            }) as Box<dyn Backward>
        });
        self.emit(x.shape().to_vec(), data, rule)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let data: Arc<Vec<f64>> = Arc::new(
            x.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                })
                .collect(),
        );
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(SigmoidRule {
                x: x.node().unwrap(),
                y_data: Arc::clone(&data),
            }) as Box<dyn Backward>
        });
        self.emit_arc(x.shape().to_vec(), data, rule)
    }

    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|&v| gelu_val(v)).collect();
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(GeluRule {
                x: x.node().unwrap(),
                x_data: x.data_arc(),
            }) as Box<dyn Backward>
        });
        self.emit(x.shape().to_vec(), data, rule)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(SumRule {
                x: x.node().unwrap(),
                len: x.numel(),
                scale: 1.0,
            }) as Box<dyn Backward>
        });
        self.emit(vec![], vec![s], rule)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let n = x.numel();
        let s: f64 = x.data().iter().sum::<f64>() / n as f64;
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(SumRule {
                x: x.node().unwrap(),
                len: n,
                scale: 1.0 / n as f64,
            }) as Box<dyn Backward>
        });
        self.emit(vec![], vec![s], rule)
    }

    /// [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = match *a.shape() {
            [m, k] => (m, k),
            _ => return Err(Error::shapes("matmul", "rank-2 lhs", format!("{:?}", a.shape()))),
        };
        let (k2, n) = match *b.shape() {
            [k2, n] => (k2, n),
            _ => return Err(Error::shapes("matmul", "rank-2 rhs", format!("{:?}", b.shape()))),
        };
        if k != k2 {
            return Err(Error::shapes(
                "matmul",
                format!("[{m}, {k}] x [{k}, n]"),
                format!("[{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm_acc(&mut out, a.data(), b.data(), m, k, n);
        let rule = self.any_tracked(&[a, b]).then(|| {
            Box::new(MatmulRule {
                a: a.node(),
                b: b.node(),
                a_data: a.data_arc(),
                b_data: b.data_arc(),
                m,
                k,
                n,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(vec![m, n], out, rule))
    }

    /// x: [n, d] row-major, w: [d, m], b: [m] -> [n, m].
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, d) = match *x.shape() {
            [n, d] => (n, d),
            _ => {
                return Err(Error::shapes("linear", "rank-2 input", format!("{:?}", x.shape())))
            }
        };
        let (d2, m) = match *w.shape() {
            [d2, m] => (d2, m),
            _ => {
                return Err(Error::shapes("linear", "rank-2 weight", format!("{:?}", w.shape())))
            }
        };
        if d != d2 || b.shape() != [m] {
            return Err(Error::shapes(
                "linear",
                format!("x [n,{d}] w [{d},m] b [m]"),
                format!("x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(b.data());
        }
        linalg::gemm_acc(&mut out, x.data(), w.data(), n, d, m);
        let rule = self.any_tracked(&[x, w, b]).then(|| {
            Box::new(LinearRule {
                x: x.node(),
                w: w.node(),
                b: b.node(),
                x_data: x.data_arc(),
                w_data: w.data_arc(),
                n,
                d,
                m,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(vec![n, m], out, rule))
    }

    /// Concatenate two [B, C, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ((ba, ca, ha, wa), (bb, cb, hb, wb)) = match (a.shape(), b.shape()) {
            (&[ba, ca, ha, wa], &[bb, cb, hb, wb]) => ((ba, ca, ha, wa), (bb, cb, hb, wb)),
            _ => {
                return Err(Error::shapes(
                    "concat_channels",
                    "two rank-4 tensors",
                    format!("{:?} and {:?}", a.shape(), b.shape()),
                ))
            }
        };
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::shapes(
                "concat_channels",
                format!("matching batch/spatial dims {:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity((ca + cb) * ba * hw);
        for bi in 0..ba {
            data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
            data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let rule = self.any_tracked(&[a, b]).then(|| {
            Box::new(ConcatChannelsRule {
                a: a.node(),
                b: b.node(),
                batch: ba,
                ca,
                cb,
                hw,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(vec![ba, ca + cb, ha, wa], data, rule))
    }

    /// Global average pool: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::shapes(
                    "global_avg_pool",
                    "rank-4 input",
                    format!("{:?}", x.shape()),
                ))
            }
        };
        let hw = h * w;
        let data: Vec<f64> = x
            .data()
            .chunks_exact(hw)
            .map(|m| m.iter().sum::<f64>() / hw as f64)
            .collect();
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(GapRule {
                x: x.node().unwrap(),
                hw,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(vec![b, c], data, rule))
    }

    fn permute(&mut self, x: &Tensor, shape: Vec<usize>, forward: Vec<usize>) -> Tensor {
        let data: Vec<f64> = forward.iter().map(|&src| x.data()[src]).collect();
        let rule = self.any_tracked(&[x]).then(|| {
            Box::new(PermuteRule {
                x: x.node().unwrap(),
                forward: std::sync::Arc::new(forward),
            }) as Box<dyn Backward>
        });
        self.emit(shape, data, rule)
    }

    /// [B, C, H, W] -> [B, H*W, C]: one token per spatial position.
    pub fn nchw_to_tokens(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::shapes(
                    "nchw_to_tokens",
                    "rank-4 input",
                    format!("{:?}", x.shape()),
                ))
            }
        };
        let hw = h * w;
        let mut forward = Vec::with_capacity(b * hw * c);
        for bi in 0..b {
            for pos in 0..hw {
                for ci in 0..c {
                    forward.push((bi * c + ci) * hw + pos);
                }
            }
        }
        Ok(self.permute(x, vec![b, hw, c], forward))
    }

    /// [B, T, C] -> [B, C, H, W] with T == H*W.
    pub fn tokens_to_nchw(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, t, c) = match *x.shape() {
            [b, t, c] => (b, t, c),
            _ => {
                return Err(Error::shapes(
                    "tokens_to_nchw",
                    "rank-3 input",
                    format!("{:?}", x.shape()),
                ))
            }
        };
        if t != h * w {
            return Err(Error::shapes(
                "tokens_to_nchw",
                format!("{h}*{w} tokens"),
                format!("{t}"),
            ));
        }
        let mut forward = Vec::with_capacity(b * c * t);
        for bi in 0..b {
            for ci in 0..c {
                for pos in 0..t {
                    forward.push((bi * t + pos) * c + ci);
                }
            }
        }
        Ok(self.permute(x, vec![b, c, h, w], forward))
    }

    /// x: [B, T, D] plus a learned [T, D] table broadcast over the batch.
    pub fn add_rows(&mut self, x: &Tensor, rows: &Tensor) -> Result<Tensor> {
        let (b, t, d) = match *x.shape() {
            [b, t, d] => (b, t, d),
            _ => {
                return Err(Error::shapes("add_rows", "rank-3 input", format!("{:?}", x.shape())))
            }
        };
        if rows.shape() != [t, d] {
            return Err(Error::shapes(
                "add_rows",
                format!("[{t}, {d}] table"),
                format!("{:?}", rows.shape()),
            ));
        }
        let row_len = t * d;
        let mut data = Vec::with_capacity(b * row_len);
        for bi in 0..b {
            data.extend(
                x.data()[bi * row_len..(bi + 1) * row_len]
                    .iter()
                    .zip(rows.data())
                    .map(|(x, r)| x + r),
            );
        }
        let rule = self.any_tracked(&[x, rows]).then(|| {
            Box::new(AddRowsRule {
                x: x.node(),
                rows: rows.node(),
                batch: b,
                row_len,
            }) as Box<dyn Backward>
        });
        Ok(self.emit(vec![b, t, d], data, rule))
    }
}
