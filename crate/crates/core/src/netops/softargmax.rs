//! Differentiable heatmap decoding: expected (x, y) under a per-map softmax.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

struct SoftArgmaxRule {
    x: NodeId,
    probs: Arc<Vec<f64>>,  // [B*K, H*W] softmax values
    coords: Arc<Vec<f64>>, // [B*K, 2] expected (x, y)
    maps: usize,
    h: usize,
    w: usize,
    beta: f64,
}

impl Backward for SoftArgmaxRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let hw = self.h * self.w;
        let mut dx = vec![0.0; self.maps * hw];
        for m in 0..self.maps {
            let p = &self.probs[m * hw..(m + 1) * hw];
            let (ex, ey) = (self.coords[m * 2], self.coords[m * 2 + 1]);
            let (gx, gy) = (g[m * 2], g[m * 2 + 1]);
            let d = &mut dx[m * hw..(m + 1) * hw];
            for y in 0..self.h {
                for x in 0..self.w {
                    let j = y * self.w + x;
                    d[j] = self.beta * p[j] * (gx * (x as f64 - ex) + gy * (y as f64 - ey));
                }
            }
        }
        sink.accumulate_owned(self.x, dx);
    }
}

/// Per-map softmax with temperature `beta`, then the expected (x, y) under
/// that distribution, in heatmap pixel units. h: [B, K, H', W'] -> [B, K, 2].
pub fn soft_argmax(tape: &mut Tape, h: &Tensor, beta: f64) -> Result<Tensor> {
    let (b, k, hh, ww) = match *h.shape() {
        [b, k, hh, ww] => (b, k, hh, ww),
        _ => return Err(Error::shapes("soft_argmax", "rank-4 input", format!("{:?}", h.shape()))),
    };
    if beta <= 0.0 {
        return Err(Error::contract("soft_argmax", format!("beta must be > 0, got {beta}")));
    }
    let maps = b * k;
    let hw = hh * ww;
    let mut probs = vec![0.0; maps * hw];
    let mut coords = vec![0.0; maps * 2];
    for m in 0..maps {
        let src = &h.data()[m * hw..(m + 1) * hw];
        let p = &mut probs[m * hw..(m + 1) * hw];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (pv, sv) in p.iter_mut().zip(src) {
            *pv = (beta * (sv - max)).exp();
            sum += *pv;
        }
        let mut ex = 0.0;
        let mut ey = 0.0;
        for y in 0..hh {
            for x in 0..ww {
                let pv = p[y * ww + x] / sum;
                p[y * ww + x] = pv;
                ex += pv * x as f64;
                ey += pv * y as f64;
            }
        }
        coords[m * 2] = ex;
        coords[m * 2 + 1] = ey;
    }

    let coords = Arc::new(coords);
    let rule = (tape.is_recording() && h.is_tracked()).then(|| {
        Box::new(SoftArgmaxRule {
            x: h.node().unwrap(),
            probs: Arc::new(probs),
            coords: Arc::clone(&coords),
            maps,
            h: hh,
            w: ww,
            beta,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit_arc(vec![b, k, 2], coords, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    #[test]
    fn one_hot_map_decodes_to_the_hot_pixel() {
        for beta in [1.0, 10.0, 50.0] {
            let mut data = vec![0.0; 8 * 8];
            data[3 * 8 + 5] = 1.0; // (x=5, y=3)
            let h = Tensor::new([1, 1, 8, 8], data).unwrap();
            let mut tape = Tape::inference();
            let c = soft_argmax(&mut tape, &h, beta).unwrap();
            // softmax of a one-hot is not a delta, but the expectation is
            // symmetric around the hot pixel pull; high beta sharpens it
            if beta >= 50.0 {
                assert!((c.data()[0] - 5.0).abs() < 1e-3, "beta {beta}: {}", c.data()[0]);
                assert!((c.data()[1] - 3.0).abs() < 1e-3);
            }
        }
        // degenerate distribution: a map whose non-peak entries are -inf-like
        let mut data = vec![-1e3; 8 * 8];
        data[3 * 8 + 5] = 0.0;
        let h = Tensor::new([1, 1, 8, 8], data).unwrap();
        let mut tape = Tape::inference();
        let c = soft_argmax(&mut tape, &h, 1.0).unwrap();
        assert!((c.data()[0] - 5.0).abs() < 1e-12);
        assert!((c.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_map_decodes_to_center_of_mass() {
        let h = Tensor::full([1, 1, 4, 4], 0.25);
        let mut tape = Tape::inference();
        let c = soft_argmax(&mut tape, &h, 10.0).unwrap();
        assert!((c.data()[0] - 1.5).abs() < 1e-12);
        assert!((c.data()[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_beta() {
        let h = Tensor::zeros([1, 1, 2, 2]);
        let mut tape = Tape::inference();
        assert!(soft_argmax(&mut tape, &h, 0.0).is_err());
        assert!(soft_argmax(&mut tape, &h, -1.0).is_err());
    }

    #[test]
    fn output_stays_inside_map_bounds() {
        let mut rng = crate::rng::Rng::new(12);
        for _ in 0..50 {
            let h = Tensor::rand_uniform([1, 3, 5, 7], -3.0, 3.0, &mut rng);
            let mut tape = Tape::inference();
            let c = soft_argmax(&mut tape, &h, 10.0).unwrap();
            for k in 0..3 {
                let (x, y) = (c.data()[k * 2], c.data()[k * 2 + 1]);
                assert!((0.0..=6.0).contains(&x));
                assert!((0.0..=4.0).contains(&y));
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let report = grad_check(
            "soft_argmax",
            &[vec![1, 2, 4, 5]],
            &GradCheckConfig::default(),
            |tape, xs| soft_argmax(tape, &xs[0], 3.0),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
