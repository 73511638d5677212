//! High-order ARX estimation by least squares.
//!
//! The regression is `y_t = phi_t' eta + e_t` with
//! `phi_t = [-y_{t-1} .. -y_{t-n}, u_{t-1} .. u_{t-n}]`, and the estimate is
//! returned together with the normalized Gram matrix `R`, which the later
//! reduction steps use as a weighting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::RationalFilter;
use crate::model::BjModel;
use crate::simulate::DataSet;

pub const DEFAULT_DELTA_REG: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArxEstimate {
    pub n: usize,
    /// `[a_1 .. a_n, b_1 .. b_n]`.
    pub eta: Vec<f64>,
    #[serde(skip)]
    pub r_matrix: DMatrix<f64>,
    #[serde(skip)]
    pub r_vec: DVector<f64>,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub regularized: bool,
}

impl ArxEstimate {
    pub fn eta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.eta)
    }

    /// Writes `R` as CSV (one matrix row per line), for debugging.
    pub fn write_r_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for i in 0..self.r_matrix.nrows() {
            w.write_record(self.r_matrix.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn regressor_matrix(data: &DataSet, n: usize, known_zero_ic: bool) -> (DMatrix<f64>, DVector<f64>) {
    let total = data.len();
    let first = if known_zero_ic { 0 } else { n };
    let rows = total.saturating_sub(first);
    let (y, u) = (&data.y, &data.u);
    let phi = DMatrix::from_fn(rows, 2 * n, |i, j| {
        let t = first + i;
        let lag = j % n + 1;
        if lag > t {
            0.0
        } else if j < n {
            -y[t - lag]
        } else {
            u[t - lag]
        }
    });
    let target = DVector::from_fn(rows, |i, _| y[first + i]);
    (phi, target)
}

/// `R = (1/N) sum phi phi'` and `r = (1/N) sum phi y_t`, summed from
/// `t = n + 1`, or from `t = 1` with zero-padded lags when the initial
/// conditions are known to be zero.
pub fn build_regressors(data: &DataSet, n: usize, known_zero_ic: bool) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let samples = data.len();
    if n == 0 || 2 * n >= samples {
        return Err(Error::OrderTooLarge { n, samples });
    }
    let (phi, target) = regressor_matrix(data, n, known_zero_ic);
    let scale = 1.0 / samples as f64;
    let mut r = phi.tr_mul(&phi) * scale;
    // Exact symmetry; gemm does not guarantee it bit-for-bit.
    r.fill_upper_triangle_with_lower_triangle();
    let rv = phi.tr_mul(&target) * scale;
    Ok((r, rv))
}

/// Largest eigenvalue of `R^{-1}` by inverse iteration on the Cholesky factor.
fn inverse_norm_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let dim = chol.l_dirty().nrows();
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 0.01 * (i as f64).sin());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = chol.solve(&v);
        let norm = w.norm();
        if !norm.is_finite() || norm == 0.0 {
            return f64::INFINITY;
        }
        let converged = (norm - lambda).abs() <= 1e-6 * norm;
        lambda = norm;
        v = w / norm;
        if converged {
            break;
        }
    }
    lambda
}

/// Least-squares ARX estimate of order `n`. When `||R^{-1}|| >= 2/delta_reg`
/// (or `R` is not positive definite) the normal equations are solved with
/// `R + (delta_reg/2) I` instead.
pub fn estimate_arx(data: &DataSet, n: usize, delta_reg: f64, known_zero_ic: bool) -> Result<ArxEstimate> {
    let (r, rv) = build_regressors(data, n, known_zero_ic)?;
    let plain = Cholesky::new(r.clone()).filter(|chol| {
        let diag_ok = chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite());
        diag_ok && (delta_reg == 0.0 || inverse_norm_estimate(chol) < 2.0 / delta_reg)
    });
    let (chol, r_used, regularized) = match plain {
        Some(chol) => (chol, r, false),
        None => {
            if delta_reg <= 0.0 {
                return Err(Error::SingularCovariance);
            }
            let r_reg = &r + DMatrix::identity(2 * n, 2 * n) * (delta_reg / 2.0);
            let chol = Cholesky::new(r_reg.clone()).ok_or(Error::SingularCovariance)?;
            (chol, r_reg, true)
        }
    };
    let eta = chol.solve(&rv);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    Ok(ArxEstimate {
        n,
        eta: eta.as_slice().to_vec(),
        r_matrix: r_used,
        r_vec: rv,
        n_samples: data.len(),
        regularized,
    })
}

/// `[a_1^o .. a_n^o, b_1^o .. b_n^o]`: the first `n` coefficients of
/// `1/H_o - 1` and `G_o/H_o`.
pub fn true_eta(system: &BjModel, n: usize) -> Result<DVector<f64>> {
    let c = system.c().stability()?;
    if !c.stable {
        return Err(Error::Unstable {
            what: "C (noise model inverse)",
            max_modulus: c.max_modulus,
        });
    }
    let a = RationalFilter::new(system.d().clone(), system.c().clone())?.impulse_response(n + 1);
    let b = RationalFilter::new(system.l().mul(system.d()), system.f().mul(system.c()))?.impulse_response(n + 1);
    let mut eta = Vec::with_capacity(2 * n);
    eta.extend_from_slice(&a[1..]);
    eta.extend_from_slice(&b[1..]);
    Ok(DVector::from_vec(eta))
}
