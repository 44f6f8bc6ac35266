//! 2-D cross-correlation with bias, implemented as im2col + GEMM.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

/// Convolution parameters. Weights are [out_ch, in_ch, kh, kw]; kernels must
/// have odd spatial dims and the output size must come out integral.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (o, _c, kh, kw) = match *weights.shape() {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::shapes(
                    "conv2d",
                    "[out_ch, in_ch, kh, kw] weights",
                    format!("{:?}", weights.shape()),
                ))
            }
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(
                "conv2d",
                format!("kernel dims must be odd, got {kh}x{kw}"),
            ));
        }
        if bias.shape() != [o] {
            return Err(Error::shapes("conv2d", format!("[{o}] bias"), format!("{:?}", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        match *self.weights.shape() {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => unreachable!("validated at construction"),
        }
    }
}

fn out_extent(op: &'static str, input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::contract(
            op,
            format!("output extent not integral: (in {input} + 2*pad {padding} - k {k}) / stride {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Gather padded patches: cols is [C*kh*kw, oh*ow], row-major. Stride-1 rows
/// are contiguous input spans, so the interior copies straight through.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * ohw..((ci * kh + ky) * kw + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if stride == 1 {
                        // valid input columns for this kx: ix = ox + kx - padding
                        let off = kx as isize - padding as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if hi > lo {
                            dst[lo..hi]
                                .copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            dst[ox] = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of the patch matrix back into an image (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * ohw..((ci * kh + ky) * kw + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let off = kx as isize - padding as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).min(ow as isize)).max(0) as usize;
                        for ox in lo..hi {
                            dst[(ox as isize + off) as usize] += srow[ox];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// 1x1 stride-1 convolutions run as plain GEMMs on the raw feature map;
// everything else lowers to im2col + GEMM.

struct Conv2dRule {
    x: Option<NodeId>,
    w: Option<NodeId>,
    b: Option<NodeId>,
    x_data: Arc<Vec<f64>>,
    w_data: Arc<Vec<f64>>,
    batch: usize,
    c: usize,
    h: usize,
    w_in: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dRule {
    fn is_1x1_s1(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

impl Backward for Conv2dRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (c, h, w) = (self.c, self.h, self.w_in);
        let (kh, kw, oh, ow, o) = (self.kh, self.kw, self.oh, self.ow, self.o);
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let chw = c * h * w;

        let mut dw = if self.w.is_some() { vec![0.0; o * ckk] } else { Vec::new() };
        let mut dx = if self.x.is_some() { vec![0.0; self.batch * chw] } else { Vec::new() };

        if self.is_1x1_s1() {
            let wt = if self.x.is_some() {
                linalg::transpose(&self.w_data, o, c)
            } else {
                Vec::new()
            };
            for bi in 0..self.batch {
                let gb = &g[bi * o * ohw..(bi + 1) * o * ohw];
                let xb = &self.x_data[bi * chw..(bi + 1) * chw];
                if self.x.is_some() {
                    linalg::gemm_acc(&mut dx[bi * chw..(bi + 1) * chw], &wt, gb, c, o, ohw);
                }
                if self.w.is_some() {
                    linalg::gemm_acc_abt(&mut dw, gb, xb, o, ohw, c);
                }
            }
        } else {
            let mut cols = vec![0.0; ckk * ohw];
            let mut dcols = vec![0.0; ckk * ohw];
            let mut dwt = if self.w.is_some() { vec![0.0; ckk * o] } else { Vec::new() };
            let wt = if self.x.is_some() {
                linalg::transpose(&self.w_data, o, ckk)
            } else {
                Vec::new()
            };
            for bi in 0..self.batch {
                let gb = &g[bi * o * ohw..(bi + 1) * o * ohw];
                if self.w.is_some() {
                    im2col(
                        &self.x_data[bi * chw..(bi + 1) * chw],
                        c, h, w, kh, kw, self.stride, self.padding, oh, ow, &mut cols,
                    );
                    // dW^T += cols [ckk, ohw] * G_b^T [ohw, o]
                    let gt = linalg::transpose(gb, o, ohw);
                    linalg::gemm_acc(&mut dwt, &cols, &gt, ckk, ohw, o);
                }
                if self.x.is_some() {
                    // dcols = W^T [ckk, o] * G_b [o, ohw]
                    linalg::gemm(&mut dcols, &wt, gb, ckk, o, ohw);
                    col2im(
                        &dcols,
                        c, h, w, kh, kw, self.stride, self.padding, oh, ow,
                        &mut dx[bi * chw..(bi + 1) * chw],
                    );
                }
            }
            if self.w.is_some() {
                dw = linalg::transpose(&dwt, ckk, o);
            }
        }

        if let Some(wn) = self.w {
            sink.accumulate_owned(wn, dw);
        }
        if let Some(xn) = self.x {
            sink.accumulate_owned(xn, dx);
        }
        if let Some(bn) = self.b {
            let mut db = vec![0.0; o];
            for bi in 0..self.batch {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += g[(bi * o + oc) * ohw..(bi * o + oc + 1) * ohw].iter().sum::<f64>();
                }
            }
            sink.accumulate_owned(bn, db);
        }
    }
}

/// Cross-correlation of x: [B, C, H, W] with p, producing [B, out_ch, H', W'].
pub fn conv2d(tape: &mut Tape, x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shapes("conv2d", "rank-4 input", format!("{:?}", x.shape()))),
    };
    let (o, cw, kh, kw) = p.dims();
    if c != cw {
        return Err(Error::shapes(
            "conv2d",
            format!("input channels {cw} (weights {:?})", p.weights.shape()),
            format!("input {:?}", x.shape()),
        ));
    }
    let oh = out_extent("conv2d", h, kh, p.stride, p.padding)?;
    let ow = out_extent("conv2d", w, kw, p.stride, p.padding)?;

    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let chw = c * h * w;
    let mut out = vec![0.0; b * o * ohw];
    let fast_1x1 = kh == 1 && kw == 1 && p.stride == 1 && p.padding == 0;
    let mut cols = if fast_1x1 { Vec::new() } else { vec![0.0; ckk * ohw] };
    for bi in 0..b {
        let xb = &x.data()[bi * chw..(bi + 1) * chw];
        let out_b = &mut out[bi * o * ohw..(bi + 1) * o * ohw];
        for (oc, chunk) in out_b.chunks_exact_mut(ohw).enumerate() {
            chunk.fill(p.bias.data()[oc]);
        }
        if fast_1x1 {
            linalg::gemm_acc(out_b, p.weights.data(), xb, o, c, ohw);
        } else {
            im2col(xb, c, h, w, kh, kw, p.stride, p.padding, oh, ow, &mut cols);
            linalg::gemm_acc(out_b, p.weights.data(), &cols, o, ckk, ohw);
        }
    }

    let tracked = tape.is_recording()
        && (x.is_tracked() || p.weights.is_tracked() || p.bias.is_tracked());
    let rule = tracked.then(|| {
        Box::new(Conv2dRule {
            x: x.node(),
            w: p.weights.node(),
            b: p.bias.node(),
            x_data: x.data_arc(),
            w_data: p.weights.data_arc(),
            batch: b,
            c,
            h,
            w_in: w,
            o,
            kh,
            kw,
            stride: p.stride,
            padding: p.padding,
            oh,
            ow,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![b, o, oh, ow], out, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn conv_naive(x: &Tensor, p: &ConvParams) -> Vec<f64> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!(),
        };
        let (o, _, kh, kw) = p.dims();
        let oh = (h + 2 * p.padding - kh) / p.stride + 1;
        let ow = (w + 2 * p.padding - kw) / p.stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[oc];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                            * p.weights.data()[((oc * c + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::new([1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let p = ConvParams::new(
            Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros([1]),
            1,
            0,
        )
        .unwrap();
        let mut tape = Tape::inference();
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_field_gives_9c_interior() {
        let c = 0.7;
        let x = Tensor::full([1, 1, 5, 5], c);
        let p = ConvParams::new(
            Tensor::full([1, 1, 3, 3], 1.0),
            Tensor::zeros([1]),
            1,
            1,
        )
        .unwrap();
        let mut tape = Tape::inference();
        let y = conv2d(&mut tape, &x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 5, 5]);
        for iy in 1..4 {
            for ix in 1..4 {
                assert!((y.data()[iy * 5 + ix] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner only sees a 2x2 patch
        assert!((y.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_reference_on_random_input() {
        let mut rng = Rng::new(31);
        for &(stride, padding) in &[(1usize, 1usize), (1, 0), (2, 1)] {
            let x = Tensor::rand_uniform([2, 2, 9, 9], -1.0, 1.0, &mut rng);
            let p = ConvParams::new(
                Tensor::rand_uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng),
                Tensor::rand_uniform([3], -1.0, 1.0, &mut rng),
                stride,
                padding,
            )
            .unwrap();
            let mut tape = Tape::inference();
            let y = conv2d(&mut tape, &x, &p).unwrap();
            let want = conv_naive(&x, &p);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_listing_both_shapes() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let p = ConvParams::new(
            Tensor::zeros([2, 2, 3, 3]),
            Tensor::zeros([2]),
            1,
            1,
        )
        .unwrap();
        let mut tape = Tape::inference();
        let err = conv2d(&mut tape, &x, &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2, 3, 3]") && msg.contains("[1, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn rejects_even_kernel() {
        let r = ConvParams::new(Tensor::zeros([1, 1, 2, 2]), Tensor::zeros([1]), 1, 0);
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let report = grad_check(
            "conv2d",
            &[vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]],
            &GradCheckConfig::default(),
            |tape, xs| {
                let p = ConvParams::new(xs[1].clone(), xs[2].clone(), 1, 1)?;
                conv2d(tape, &xs[0], &p)
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
