//! Landmark evaluation: normalized mean error under three normalizers,
//! failure rate, and the area under the cumulative error distribution.

use std::fmt::Write as _;

use crate::augment::SampleRecord;
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::synth::interocular;

/// Aggregated evaluation over one prediction set.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub nme_ic: Vec<f64>,
    pub nme_box: Vec<f64>,
    pub nme_diag: Vec<f64>,
    pub mean_nme_ic: f64,
    pub mean_nme_box: f64,
    pub mean_nme_diag: f64,
    /// Fraction of samples with NME_ic above 0.10.
    pub failure_rate_ic: f64,
    /// Area under the CED of NME_box up to the 0.07 cutoff.
    pub auc_box: f64,
    pub samples: usize,
}

pub const FR_THRESHOLD: f64 = 0.10;
pub const AUC_CUTOFF: f64 = 0.07;

/// Mean Euclidean landmark error divided by `normalizer`. Landmarks whose
/// ground truth is invisible are excluded from the mean.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, normalizer: f64) -> Result<f64> {
    if normalizer <= 0.0 {
        return Err(Error::contract(
            "nme",
            format!("normalizer must be positive, got {normalizer}"),
        ));
    }
    if pred.len() != gt.len() {
        return Err(Error::shapes(
            "nme",
            format!("{} landmarks", gt.len()),
            format!("{}", pred.len()),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, g) in gt.visible() {
        acc += pred.points[i].dist(&g);
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("nme", "no visible ground-truth landmarks"));
    }
    Ok(acc / count as f64 / normalizer)
}

/// Fraction of samples whose NME strictly exceeds `threshold`.
pub fn failure_rate(nmes: &[f64], threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::contract("failure_rate", "threshold must be positive"));
    }
    if nmes.is_empty() {
        return Err(Error::contract("failure_rate", "empty sample list"));
    }
    Ok(nmes.iter().filter(|v| **v > threshold).count() as f64 / nmes.len() as f64)
}

/// Exact area under the cumulative error distribution from 0 to `cutoff`,
/// normalized by the cutoff. The CED is piecewise constant, so the integral
/// reduces to sum(max(0, cutoff - nme_i)) / (n * cutoff).
pub fn auc(nmes: &[f64], cutoff: f64) -> Result<f64> {
    if cutoff <= 0.0 {
        return Err(Error::contract("auc", "cutoff must be positive"));
    }
    if nmes.is_empty() {
        return Err(Error::contract("auc", "empty sample list"));
    }
    let total: f64 = nmes.iter().map(|v| (cutoff - v).max(0.0)).sum();
    Ok(total / (cutoff * nmes.len() as f64))
}

/// Evaluate aligned predictions against a corpus slice: NME under the
/// interocular, box geometric-mean and box diagonal normalizers, failure
/// rate on NME_ic, AUC on NME_box.
pub fn evaluate(preds: &[LandmarkSet], samples: &[SampleRecord]) -> Result<EvalResult> {
    if preds.len() != samples.len() {
        return Err(Error::shapes(
            "evaluate",
            format!("{} samples", samples.len()),
            format!("{} predictions", preds.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::contract("evaluate", "empty evaluation set"));
    }
    let n = preds.len();
    let mut nme_ic = Vec::with_capacity(n);
    let mut nme_box = Vec::with_capacity(n);
    let mut nme_diag = Vec::with_capacity(n);
    for (i, (pred, rec)) in preds.iter().zip(samples).enumerate() {
        let with_index = |e: Error| Error::contract("evaluate", format!("sample {i}: {e}"));
        let ic = interocular(rec).map_err(with_index)?;
        nme_ic.push(nme(pred, &rec.landmarks, ic).map_err(with_index)?);
        nme_box.push(nme(pred, &rec.landmarks, rec.face_box.geometric_mean()).map_err(with_index)?);
        nme_diag.push(nme(pred, &rec.landmarks, rec.face_box.diag()).map_err(with_index)?);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(EvalResult {
        mean_nme_ic: mean(&nme_ic),
        mean_nme_box: mean(&nme_box),
        mean_nme_diag: mean(&nme_diag),
        failure_rate_ic: failure_rate(&nme_ic, FR_THRESHOLD)?,
        auc_box: auc(&nme_box, AUC_CUTOFF)?,
        samples: n,
        nme_ic,
        nme_box,
        nme_diag,
    })
}

impl EvalResult {
    /// CSV with one row per sample and a trailing summary row of means.
    /// Columns: index, nme_ic, nme_box, nme_diag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,nme_ic,nme_box,nme_diag\n");
        for i in 0..self.samples {
            let _ = writeln!(
                out,
                "{i},{:.17e},{:.17e},{:.17e}",
                self.nme_ic[i], self.nme_box[i], self.nme_diag[i]
            );
        }
        let _ = writeln!(
            out,
            "summary,{:.17e},{:.17e},{:.17e}",
            self.mean_nme_ic, self.mean_nme_box, self.mean_nme_diag
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Point;

    fn lms(pts: &[(f64, f64)]) -> LandmarkSet {
        LandmarkSet::all_visible(pts.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    #[test]
    fn nme_zero_on_exact_prediction() {
        let gt = lms(&[(3.0, 4.0), (10.0, 12.0)]);
        assert_eq!(nme(&gt, &gt, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn nme_is_mean_error_over_normalizer() {
        // two landmarks each off by (3, 4): mean 5 / 100 = 0.05
        let gt = lms(&[(0.0, 0.0), (10.0, 10.0)]);
        let pred = lms(&[(3.0, 4.0), (13.0, 14.0)]);
        assert!((nme(&pred, &gt, 100.0).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn nme_matches_hand_summed_formula_on_random_case() {
        let mut rng = crate::rng::Rng::new(55);
        let k = 7;
        let gt_pts: Vec<(f64, f64)> = (0..k).map(|_| (rng.range(0.0, 64.0), rng.range(0.0, 64.0))).collect();
        let pr_pts: Vec<(f64, f64)> = (0..k).map(|_| (rng.range(0.0, 64.0), rng.range(0.0, 64.0))).collect();
        let norm = 37.5;
        let got = nme(&lms(&pr_pts), &lms(&gt_pts), norm).unwrap();
        let want = gt_pts
            .iter()
            .zip(&pr_pts)
            .map(|(g, p)| ((g.0 - p.0).powi(2) + (g.1 - p.1).powi(2)).sqrt())
            .sum::<f64>()
            / k as f64
            / norm;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn nme_excludes_invisible_landmarks() {
        let gt = LandmarkSet::new(
            vec![Point::new(0.0, 0.0), Point::new(10.0, 10.0)],
            vec![true, false],
        )
        .unwrap();
        let pred = lms(&[(3.0, 4.0), (999.0, 999.0)]);
        assert!((nme(&pred, &gt, 10.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nme_rejects_bad_inputs() {
        let gt = lms(&[(0.0, 0.0)]);
        assert!(nme(&gt, &gt, 0.0).is_err());
        assert!(nme(&gt, &gt, -1.0).is_err());
        let longer = lms(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(nme(&longer, &gt, 1.0).is_err());
    }

    #[test]
    fn nme_scale_equivariance() {
        let mut rng = crate::rng::Rng::new(56);
        for _ in 0..20 {
            let gt_pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.range(0.0, 64.0), rng.range(0.0, 64.0))).collect();
            let pr_pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.range(0.0, 64.0), rng.range(0.0, 64.0))).collect();
            let c = rng.range(0.5, 7.0);
            let norm = rng.range(10.0, 40.0);
            let scale = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
                pts.iter().map(|&(x, y)| (c * x, c * y)).collect()
            };
            let a = nme(&lms(&pr_pts), &lms(&gt_pts), norm).unwrap();
            let b = nme(&lms(&scale(&pr_pts)), &lms(&scale(&gt_pts)), c * norm).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn failure_rate_counts_strictly_above_threshold() {
        let fr = failure_rate(&[0.05, 0.12, 0.08, 0.11], 0.10).unwrap();
        assert_eq!(fr, 0.5);
        assert_eq!(failure_rate(&[0.0, 0.0], 0.10).unwrap(), 0.0);
        // exactly at threshold is not a failure
        assert_eq!(failure_rate(&[0.10, 0.10], 0.10).unwrap(), 0.0);
        assert!(failure_rate(&[], 0.10).is_err());
    }

    #[test]
    fn failure_rate_non_increasing_in_threshold() {
        let nmes = [0.02, 0.08, 0.09, 0.1, 0.11, 0.2];
        let mut prev = 1.0;
        for t in [0.01, 0.05, 0.1, 0.15, 0.3] {
            let fr = failure_rate(&nmes, t).unwrap();
            assert!(fr <= prev);
            prev = fr;
        }
    }

    #[test]
    fn auc_matches_exact_step_integrals() {
        assert_eq!(auc(&[0.0], 0.07).unwrap(), 1.0);
        assert_eq!(auc(&[0.07], 0.07).unwrap(), 0.0);
        assert_eq!(auc(&[0.5], 0.07).unwrap(), 0.0);
        assert_eq!(auc(&[0.035], 0.07).unwrap(), 0.5);
        assert!(auc(&[], 0.07).is_err());
    }

    #[test]
    fn auc_invariant_to_order_and_monotone_in_errors() {
        let a = auc(&[0.01, 0.05, 0.03], 0.07).unwrap();
        let b = auc(&[0.05, 0.03, 0.01], 0.07).unwrap();
        assert_eq!(a, b);
        let worse = auc(&[0.01, 0.06, 0.03], 0.07).unwrap();
        assert!(worse < a);
    }
}
