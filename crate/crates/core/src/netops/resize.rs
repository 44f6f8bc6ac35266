//! Bilinear upsampling (align_corners = false) by an integer factor.

use crate::error::{Error, Result};
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

/// Source coordinate and lerp weights for one output position.
fn lerp_coords(dst: usize, factor: usize, extent: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    let lo = src.floor();
    let t = src - lo;
    let i0 = (lo.max(0.0) as usize).min(extent - 1);
    let i1 = ((lo + 1.0).max(0.0) as usize).min(extent - 1);
    (i0, i1, t)
}

struct BilinearUpsampleRule {
    x: NodeId,
    batch_ch: usize,
    h: usize,
    w: usize,
    factor: usize,
}

impl Backward for BilinearUpsampleRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let (h, w, f) = (self.h, self.w, self.factor);
        let (oh, ow) = (h * f, w * f);
        let mut dx = vec![0.0; self.batch_ch * h * w];
        for bc in 0..self.batch_ch {
            let gp = &g[bc * oh * ow..(bc + 1) * oh * ow];
            let dp = &mut dx[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, ty) = lerp_coords(oy, f, h);
                for ox in 0..ow {
                    let (x0, x1, tx) = lerp_coords(ox, f, w);
                    let gv = gp[oy * ow + ox];
                    dp[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                    dp[y0 * w + x1] += gv * (1.0 - ty) * tx;
                    dp[y1 * w + x0] += gv * ty * (1.0 - tx);
                    dp[y1 * w + x1] += gv * ty * tx;
                }
            }
        }
        sink.accumulate_owned(self.x, dx);
    }
}

/// Upsample [B, C, H, W] to [B, C, H*factor, W*factor].
pub fn bilinear_upsample(tape: &mut Tape, x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::shapes(
                "bilinear_upsample",
                "rank-4 input",
                format!("{:?}", x.shape()),
            ))
        }
    };
    if factor < 1 {
        return Err(Error::contract("bilinear_upsample", "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let xp = &x.data()[bc * h * w..(bc + 1) * h * w];
        let op = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ty) = lerp_coords(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, tx) = lerp_coords(ox, factor, w);
                op[oy * ow + ox] = (1.0 - ty) * ((1.0 - tx) * xp[y0 * w + x0] + tx * xp[y0 * w + x1])
                    + ty * ((1.0 - tx) * xp[y1 * w + x0] + tx * xp[y1 * w + x1]);
            }
        }
    }

    let rule = (tape.is_recording() && x.is_tracked()).then(|| {
        Box::new(BilinearUpsampleRule {
            x: x.node().unwrap(),
            batch_ch: b * c,
            h,
            w,
            factor,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![b, c, oh, ow], out, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::new([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::inference();
        let y = bilinear_upsample(&mut tape, &x, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn constant_field_stays_constant() {
        let x = Tensor::full([1, 2, 3, 3], 0.42);
        let mut tape = Tape::inference();
        let y = bilinear_upsample(&mut tape, &x, 4).unwrap();
        assert_eq!(y.shape(), [1, 2, 12, 12]);
        for v in y.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_factor_zero() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        let mut tape = Tape::inference();
        assert!(bilinear_upsample(&mut tape, &x, 0).is_err());
    }

    #[test]
    fn two_by_two_matches_hand_evaluated_formula() {
        // input [[0,1],[2,3]], factor 2; evaluate the closed-form interpolation
        // at the 16 sample points independently of the op internals
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::inference();
        let y = bilinear_upsample(&mut tape, &x, 2).unwrap();

        let sample = |fy: f64, fx: f64| -> f64 {
            // clamp to the source grid, then lerp between the 4 neighbors
            let cy = fy.clamp(0.0, 1.0);
            let cx = fx.clamp(0.0, 1.0);
            let (y0, x0) = (cy.floor(), cx.floor());
            let (ty, tx) = (cy - y0, cx - x0);
            let at = |r: f64, c: f64| -> f64 {
                let r = r.min(1.0) as usize;
                let c = c.min(1.0) as usize;
                [[0.0, 1.0], [2.0, 3.0]][r][c]
            };
            (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0))
                + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0))
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let fy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let fx = (ox as f64 + 0.5) / 2.0 - 0.5;
                let want = sample(fy, fx);
                let got = y.data()[oy * 4 + ox];
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let report = grad_check(
            "bilinear_upsample",
            &[vec![1, 2, 4, 4]],
            &GradCheckConfig::default(),
            |tape, xs| bilinear_upsample(tape, &xs[0], 4),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
