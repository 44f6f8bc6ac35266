//! Anti-aliased downsampling: low-pass blur (reflect padding) followed by
//! subsampling, the BlurPool scheme. The blur kernel is a normalized binomial
//! row whose 2-D outer product sums to one.

use crate::error::{Error, Result};
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

/// Separable binomial blur kernel.
#[derive(Clone, Debug)]
pub struct BlurKernel {
    taps: Vec<f64>,
}

impl BlurKernel {
    /// Binomial row with `n` taps (e.g. 3 -> [1, 2, 1] / 4).
    pub fn binomial(n: usize) -> Result<Self> {
        if n == 0 || n % 2 == 0 {
            return Err(Error::contract(
                "blurpool2d",
                format!("tap count must be odd and positive, got {n}"),
            ));
        }
        let mut row = vec![1.0f64];
        for _ in 1..n {
            let mut next = vec![0.0; row.len() + 1];
            for (i, v) in row.iter().enumerate() {
                next[i] += v;
                next[i + 1] += v;
            }
            row = next;
        }
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        Ok(BlurKernel { taps: row })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }
}

impl Default for BlurKernel {
    fn default() -> Self {
        BlurKernel::binomial(3).expect("3 is odd")
    }
}

/// Reflect across the edge pixel (no edge repeat): -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // extents here are tiny; a loop is clearer than modular arithmetic
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Reflected source index for every (output, tap) pair along one axis.
fn axis_lut(extent: usize, out_extent: usize, stride: usize, taps: usize) -> Vec<usize> {
    let r = taps / 2;
    let mut lut = vec![0usize; out_extent * taps];
    for o in 0..out_extent {
        for k in 0..taps {
            lut[o * taps + k] = reflect((o * stride + k) as isize - r as isize, extent);
        }
    }
    lut
}

struct BlurPoolRule {
    x: NodeId,
    taps: Vec<f64>,
    batch_ch: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Backward for BlurPoolRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let nt = self.taps.len();
        let ylut = axis_lut(self.h, self.oh, self.stride, nt);
        let xlut = axis_lut(self.w, self.ow, self.stride, nt);
        let mut dx = vec![0.0; self.batch_ch * self.h * self.w];
        for bc in 0..self.batch_ch {
            let gp = &g[bc * self.oh * self.ow..(bc + 1) * self.oh * self.ow];
            let dp = &mut dx[bc * self.h * self.w..(bc + 1) * self.h * self.w];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let gv = gp[oy * self.ow + ox];
                    for ky in 0..nt {
                        let row = ylut[oy * nt + ky] * self.w;
                        let gty = gv * self.taps[ky];
                        for kx in 0..nt {
                            dp[row + xlut[ox * nt + kx]] += gty * self.taps[kx];
                        }
                    }
                }
            }
        }
        sink.accumulate_owned(self.x, dx);
    }
}

/// Blur with reflect padding, then subsample by `stride`. Spatial dims must be
/// divisible by the stride.
pub fn blurpool2d(tape: &mut Tape, x: &Tensor, kernel: &BlurKernel, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shapes("blurpool2d", "rank-4 input", format!("{:?}", x.shape()))),
    };
    if stride == 0 {
        return Err(Error::contract("blurpool2d", "stride must be positive"));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::contract(
            "blurpool2d",
            format!("spatial dims {h}x{w} not divisible by stride {stride}"),
        ));
    }
    if h < 2 || w < 2 {
        return Err(Error::contract(
            "blurpool2d",
            format!("spatial dims {h}x{w} too small for reflect padding"),
        ));
    }
    let (oh, ow) = (h / stride, w / stride);
    let taps = kernel.taps();
    let nt = taps.len();
    let ylut = axis_lut(h, oh, stride, nt);
    let xlut = axis_lut(w, ow, stride, nt);

    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let xp = &x.data()[bc * h * w..(bc + 1) * h * w];
        let op = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..nt {
                    let row = ylut[oy * nt + ky] * w;
                    let mut racc = 0.0;
                    for kx in 0..nt {
                        racc += taps[kx] * xp[row + xlut[ox * nt + kx]];
                    }
                    acc += taps[ky] * racc;
                }
                op[oy * ow + ox] = acc;
            }
        }
    }

    let rule = (tape.is_recording() && x.is_tracked()).then(|| {
        Box::new(BlurPoolRule {
            x: x.node().unwrap(),
            taps: taps.to_vec(),
            batch_ch: b * c,
            h,
            w,
            stride,
            oh,
            ow,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![b, c, oh, ow], out, rule))
}

/// Plain stride-2 subsampling with no low-pass filter; the aliasing-prone
/// baseline the shift-consistency tests compare against.
pub fn naive_subsample2d(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::shapes(
                "naive_subsample2d",
                "rank-4 input",
                format!("{:?}", x.shape()),
            ))
        }
    };
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::contract(
            "naive_subsample2d",
            format!("spatial dims {h}x{w} not divisible by stride {stride}"),
        ));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[bc * oh * ow + oy * ow + ox] = x.data()[bc * h * w + oy * stride * w + ox * stride];
            }
        }
    }
    Tensor::new([b, c, oh, ow], out)
}
