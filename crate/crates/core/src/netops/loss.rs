//! Regression losses: binary cross-entropy on heatmap logits and mean
//! absolute error on decoded coordinates.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

struct BceRule {
    z: NodeId,
    z_data: Arc<Vec<f64>>,
    t_data: Arc<Vec<f64>>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Backward for BceRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let scale = g[0] / self.z_data.len() as f64;
        sink.accumulate_owned(
            self.z,
            self.z_data
                .iter()
                .zip(self.t_data.iter())
                .map(|(&z, &t)| scale * (sigmoid(z) - t))
                .collect(),
        );
    }
}

/// Mean binary cross-entropy between sigmoid(logits) and targets in [0, 1],
/// evaluated in logit space so large |logit| cannot overflow.
pub fn bce_heatmap_loss(tape: &mut Tape, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(Error::shapes(
            "bce_heatmap_loss",
            format!("{:?}", logits.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    if target.data().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::contract(
            "bce_heatmap_loss",
            "target values must lie in [0, 1]",
        ));
    }
    // per element: max(z, 0) - z*t + ln(1 + e^{-|z|})
    let n = logits.numel() as f64;
    let loss = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;

    let rule = (tape.is_recording() && logits.is_tracked()).then(|| {
        Box::new(BceRule {
            z: logits.node().unwrap(),
            z_data: logits.data_arc(),
            t_data: target.data_arc(),
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![], vec![loss], rule))
}

struct L1Rule {
    pred: NodeId,
    diff_sign: Vec<f64>,
}

impl Backward for L1Rule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let scale = g[0] / self.diff_sign.len() as f64;
        sink.accumulate_owned(self.pred, self.diff_sign.iter().map(|s| s * scale).collect());
    }
}

/// Mean absolute error between predicted and ground-truth coordinates
/// ([B, K, 2], heatmap pixel units).
pub fn l1_coord_loss(tape: &mut Tape, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes(
            "l1_coord_loss",
            format!("{:?}", pred.shape()),
            format!("{:?}", gt.shape()),
        ));
    }
    let n = pred.numel() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;

    let rule = (tape.is_recording() && pred.is_tracked()).then(|| {
        Box::new(L1Rule {
            pred: pred.node().unwrap(),
            diff_sign: pred
                .data()
                .iter()
                .zip(gt.data())
                .map(|(p, g)| (p - g).signum() * if p == g { 0.0 } else { 1.0 })
                .collect(),
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![], vec![loss], rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn bce_at_optimum_equals_target_entropy() {
        // logits = logit(t) exactly => loss = mean of -t ln t - (1-t) ln(1-t)
        let targets = [0.2, 0.5, 0.9, 0.7];
        let logits: Vec<f64> = targets.iter().map(|&t| logit(t)).collect();
        let t = Tensor::new([4], targets.to_vec()).unwrap();
        let z = Tensor::new([4], logits).unwrap();
        let mut tape = Tape::inference();
        let loss = bce_heatmap_loss(&mut tape, &z, &t).unwrap();
        let want: f64 = targets
            .iter()
            .map(|&t| -t * t.ln() - (1.0 - t) * (1.0 - t).ln())
            .sum::<f64>()
            / 4.0;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_negligible_loss() {
        let z = Tensor::full([2, 3], -20.0);
        let t = Tensor::zeros([2, 3]);
        let mut tape = Tape::inference();
        let loss = bce_heatmap_loss(&mut tape, &z, &t).unwrap();
        assert!(loss.item() <= 1e-8, "{}", loss.item());
        // and no overflow far beyond the naive formula's range
        let z = Tensor::full([2, 3], -500.0);
        let loss = bce_heatmap_loss(&mut tape, &z, &t).unwrap();
        assert!(loss.item().is_finite());
    }

    #[test]
    fn bce_matches_hand_summed_formula() {
        let mut rng = Rng::new(21);
        let z = Tensor::rand_uniform([2, 2], -3.0, 3.0, &mut rng);
        let t = Tensor::rand_uniform([2, 2], 0.0, 1.0, &mut rng);
        let mut tape = Tape::inference();
        let loss = bce_heatmap_loss(&mut tape, &z, &t).unwrap();
        let want: f64 = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -t * p.ln() - (1.0 - t) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_targets_outside_unit_interval() {
        let z = Tensor::zeros([2]);
        let t = Tensor::new([2], vec![0.5, 1.2]).unwrap();
        let mut tape = Tape::inference();
        assert!(bce_heatmap_loss(&mut tape, &z, &t).is_err());
    }

    #[test]
    fn l1_zero_at_equality_and_direct_formula_otherwise() {
        let p = Tensor::new([1, 1, 2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::inference();
        let zero = l1_coord_loss(&mut tape, &p, &p).unwrap();
        assert_eq!(zero.item(), 0.0);

        // single landmark off by (3, 4): mean(|3| + |4|) / 2 = 3.5
        let gt = Tensor::new([1, 1, 2], vec![0.0, 0.0]).unwrap();
        let loss = l1_coord_loss(&mut tape, &p, &gt).unwrap();
        assert!((loss.item() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_hand_summed_formula_on_random_batch() {
        let mut rng = Rng::new(22);
        let p = Tensor::rand_uniform([3, 4, 2], -5.0, 5.0, &mut rng);
        let g = Tensor::rand_uniform([3, 4, 2], -5.0, 5.0, &mut rng);
        let mut tape = Tape::inference();
        let loss = l1_coord_loss(&mut tape, &p, &g).unwrap();
        let want: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 24.0;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let p = Tensor::zeros([1, 2, 2]);
        let g = Tensor::zeros([1, 3, 2]);
        let mut tape = Tape::inference();
        assert!(l1_coord_loss(&mut tape, &p, &g).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let report = grad_check(
            "bce_heatmap_loss",
            &[vec![2, 6]],
            &GradCheckConfig::default(),
            |tape, xs| {
                let t = Tensor::new([2, 6], vec![0.1, 0.9, 0.4, 0.6, 0.0, 1.0, 0.2, 0.8, 0.5, 0.3, 0.7, 0.25])
                    .unwrap();
                bce_heatmap_loss(tape, &xs[0], &t)
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");

        let report = grad_check(
            "l1_coord_loss",
            &[vec![2, 3, 2]],
            &GradCheckConfig::default(),
            |tape, xs| {
                // a fixed gt away from the sampling window keeps |p - g| off the kink
                let g = Tensor::full([2, 3, 2], 2.0);
                l1_coord_loss(tape, &xs[0], &g)
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
