//! Canonical-correlation consistency loss between the two Siamese views.
//!
//! The loss is the negated sum of the top canonical correlations, i.e. the
//! singular values of T = S11^{-1/2} S12 S22^{-1/2} built from ridge-
//! regularized covariances of batch-centered features. Gradients follow the
//! analytic form through the symmetric eigendecompositions; an independent
//! oracle solves classical CCA as a generalized eigenproblem on the same
//! centered data for cross-checking.

use std::sync::Once;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Backward, GradSink, NodeId, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DccaConfig {
    /// Ridge added to both covariance diagonals.
    pub reg_r: f64,
    /// Canonical directions summed into the loss; `None` means all d.
    pub num_components: Option<usize>,
    /// Eigenvalue floor; anything below it after the ridge is an error.
    pub eps_eig: f64,
}

impl Default for DccaConfig {
    fn default() -> Self {
        DccaConfig {
            reg_r: 1e-3,
            num_components: None,
            eps_eig: 1e-9,
        }
    }
}

/// The two views' pooled feature batches, both [B, d].
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    pub h1: Tensor,
    pub h2: Tensor,
}

static SMALL_BATCH_WARNING: Once = Once::new();

impl ViewFeatures {
    pub fn new(h1: Tensor, h2: Tensor) -> Result<Self> {
        let (b, d) = match (h1.shape(), h2.shape()) {
            (&[b1, d1], &[b2, d2]) if b1 == b2 && d1 == d2 => (b1, d1),
            _ => {
                return Err(Error::shapes(
                    "dcca",
                    "two equal [B, d] feature batches",
                    format!("{:?} and {:?}", h1.shape(), h2.shape()),
                ))
            }
        };
        if b < 2 {
            return Err(Error::DegenerateBatch);
        }
        if !h1.is_finite() || !h2.is_finite() {
            return Err(Error::NonFinite { op: "dcca(features)".into() });
        }
        if b <= d {
            SMALL_BATCH_WARNING.call_once(|| {
                eprintln!(
                    "dcca: batch size {b} <= feature width {d}; covariances rely on the ridge"
                );
            });
        }
        Ok(ViewFeatures { h1, h2 })
    }

    fn dims(&self) -> (usize, usize) {
        (self.h1.shape()[0], self.h1.shape()[1])
    }
}

fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let b = m.nrows();
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let mean = m.column(c).sum() / b as f64;
        for r in 0..b {
            out[(r, c)] -= mean;
        }
    }
    out
}

/// Inverse square root of a symmetric positive-definite matrix via its
/// eigendecomposition. Errors when any eigenvalue sits below the floor.
fn inv_sqrt_sym(s: &DMatrix<f64>, eps_eig: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(s.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < eps_eig {
        return Err(Error::IllConditioned { eig: min, floor: eps_eig });
    }
    let d = eig.eigenvalues.len();
    let mut lam = DMatrix::zeros(d, d);
    for i in 0..d {
        lam[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
    }
    Ok(&eig.eigenvectors * lam * eig.eigenvectors.transpose())
}

struct DccaInternals {
    loss: f64,
    /// d(loss)/dH1 and dH2, row-major [B, d].
    g1: Vec<f64>,
    g2: Vec<f64>,
}

/// Loss value and analytic gradients w.r.t. the raw (uncentered) features.
fn dcca_internals(v: &ViewFeatures, cfg: &DccaConfig) -> Result<DccaInternals> {
    let (b, d) = v.dims();
    let k = cfg.num_components.unwrap_or(d);
    if k == 0 || k > d {
        return Err(Error::contract(
            "dcca",
            format!("num_components {k} outside 1..={d}"),
        ));
    }
    if cfg.reg_r <= 0.0 {
        return Err(Error::contract("dcca", "reg_r must be positive"));
    }

    let x1 = center_columns(&DMatrix::from_row_slice(b, d, v.h1.data()));
    let x2 = center_columns(&DMatrix::from_row_slice(b, d, v.h2.data()));
    let denom = (b - 1) as f64;
    let ridge = DMatrix::identity(d, d) * cfg.reg_r;
    let s11 = x1.transpose() * &x1 / denom + &ridge;
    let s22 = x2.transpose() * &x2 / denom + &ridge;
    let s12 = x1.transpose() * &x2 / denom;

    let s11_ih = inv_sqrt_sym(&s11, cfg.eps_eig)?;
    let s22_ih = inv_sqrt_sym(&s22, cfg.eps_eig)?;
    let t = &s11_ih * &s12 * &s22_ih;

    let svd = t.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &bb| {
        svd.singular_values[bb]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite")
    });
    if k < d {
        let gap = svd.singular_values[order[k - 1]] - svd.singular_values[order[k]];
        if gap < cfg.eps_eig {
            return Err(Error::contract(
                "dcca",
                format!("singular value gap {gap:.3e} at the component cut is below eps_eig"),
            ));
        }
    }
    let corr: f64 = order.iter().take(k).map(|&i| svd.singular_values[i]).sum();

    // top-k factors
    let mut uk = DMatrix::zeros(d, k);
    let mut vk = DMatrix::zeros(d, k);
    let mut sk = DMatrix::zeros(k, k);
    for (col, &i) in order.iter().take(k).enumerate() {
        uk.set_column(col, &u.column(i));
        vk.set_column(col, &vt.row(i).transpose());
        sk[(col, col)] = svd.singular_values[i];
    }

    // d corr / d S12 and the diagonal terms
    let nabla12 = &s11_ih * &uk * vk.transpose() * &s22_ih;
    let nabla11 = -0.5 * (&s11_ih * &uk * &sk * uk.transpose() * &s11_ih);
    let nabla22 = -0.5 * (&s22_ih * &vk * &sk * vk.transpose() * &s22_ih);

    // d corr / d X (centered); centering is a projection, and the gradient of
    // a column-centered function is itself column-centered, so no extra term
    let dcorr_dx1 = (&x1 * 2.0 * nabla11 + &x2 * nabla12.transpose()) / denom;
    let dcorr_dx2 = (&x2 * 2.0 * nabla22 + &x1 * nabla12) / denom;

    let to_rows = |m: &DMatrix<f64>| -> Vec<f64> {
        let mut out = Vec::with_capacity(b * d);
        for r in 0..b {
            for c in 0..d {
                out.push(-m[(r, c)]); // loss = -corr
            }
        }
        out
    };
    Ok(DccaInternals {
        loss: -corr,
        g1: to_rows(&dcorr_dx1),
        g2: to_rows(&dcorr_dx2),
    })
}

/// Loss value and gradients without tape participation; the trainer uses this
/// to seed per-sample tapes with the batch-level cotangent.
pub fn dcca_value_and_grads(v: &ViewFeatures, cfg: &DccaConfig) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let out = dcca_internals(v, cfg)?;
    Ok((out.loss, out.g1, out.g2))
}

struct DccaRule {
    h1: Option<NodeId>,
    h2: Option<NodeId>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl Backward for DccaRule {
    fn backward(&self, g: &[f64], sink: &mut GradSink) {
        let s = g[0];
        if let Some(n) = self.h1 {
            sink.accumulate_owned(n, self.g1.iter().map(|v| v * s).collect());
        }
        if let Some(n) = self.h2 {
            sink.accumulate_owned(n, self.g2.iter().map(|v| v * s).collect());
        }
    }
}

/// Negated sum of the top canonical correlations between the two views,
/// registered on the tape with its analytic gradient.
pub fn dcca_loss(tape: &mut Tape, v: &ViewFeatures, cfg: &DccaConfig) -> Result<Tensor> {
    let out = dcca_internals(v, cfg)?;
    let tracked = tape.is_recording() && (v.h1.is_tracked() || v.h2.is_tracked());
    let rule = tracked.then(|| {
        Box::new(DccaRule {
            h1: v.h1.node(),
            h2: v.h2.node(),
            g1: out.g1,
            g2: out.g2,
        }) as Box<dyn Backward>
    });
    Ok(tape.emit(vec![], vec![out.loss], rule))
}

/// Classical CCA solved independently: eigenvalues of
/// S11^{-1} S12 S22^{-1} S21 on the same centered, ridge-regularized data.
/// Returns the canonical correlations in descending order.
pub fn cca_oracle(v: &ViewFeatures, cfg: &DccaConfig) -> Result<Vec<f64>> {
    let (b, d) = v.dims();
    if cfg.reg_r <= 0.0 {
        return Err(Error::contract("dcca", "reg_r must be positive"));
    }
    let x1 = center_columns(&DMatrix::from_row_slice(b, d, v.h1.data()));
    let x2 = center_columns(&DMatrix::from_row_slice(b, d, v.h2.data()));
    let denom = (b - 1) as f64;
    let ridge = DMatrix::identity(d, d) * cfg.reg_r;
    let s11 = x1.transpose() * &x1 / denom + &ridge;
    let s22 = x2.transpose() * &x2 / denom + &ridge;
    let s12 = x1.transpose() * &x2 / denom;
    let s21 = s12.transpose();

    let min_eig = |s: &DMatrix<f64>| -> f64 {
        SymmetricEigen::new(s.clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };
    for s in [&s11, &s22] {
        let min = min_eig(s);
        if min < cfg.eps_eig {
            return Err(Error::IllConditioned { eig: min, floor: cfg.eps_eig });
        }
    }

    let inv11 = s11.try_inverse().ok_or(Error::IllConditioned { eig: 0.0, floor: cfg.eps_eig })?;
    let inv22 = s22.try_inverse().ok_or(Error::IllConditioned { eig: 0.0, floor: cfg.eps_eig })?;
    let m = inv11 * s12 * inv22 * s21;
    let mut rho: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.max(0.0).sqrt())
        .collect();
    rho.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    Ok(rho)
}
