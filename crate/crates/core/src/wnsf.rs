//! Weighted null-space fitting: reduce a high-order ARX estimate to a
//! Box-Jenkins (or output-error) model by least squares, then re-estimate
//! with the weighting implied by the ARX covariance, iterating as requested.
//!
//! The reduction uses the linear relation `eta - Q(eta) theta = T(theta) (eta - eta_o)`
//! between high-order coefficients `eta = [a; b]` and `theta = [f; l; c; d]`.
//! `T(theta)` is lower triangular with Toeplitz blocks, so `T^{-1}` is applied
//! by filtering with `1/C` and `1/F` instead of a generic solve.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arx::{estimate_arx, ArxEstimate, DEFAULT_DELTA_REG};
use crate::error::{Error, Result};
use crate::lti::{toeplitz, Polynomial, RationalFilter, STABILITY_TOL};
use crate::model::{BjModel, ModelOrders};
use crate::simulate::DataSet;

/// Reciprocal condition number below which a least-squares problem is
/// treated as rank deficient.
pub const RCOND_LIMIT: f64 = 1e-10;

/// Largest root modulus allowed after reflecting an unstable root.
pub const REFLECTION_CLAMP: f64 = 0.999;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WnsfOptions {
    /// ARX orders to try; empty selects [`WnsfOptions::default_grid`].
    pub n_grid: Vec<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub estimate_noise_model: bool,
    pub delta_reg: f64,
    pub known_zero_ic: bool,
}

impl Default for WnsfOptions {
    fn default() -> Self {
        Self {
            n_grid: Vec::new(),
            max_iter: 100,
            tol: 1e-4,
            estimate_noise_model: true,
            delta_reg: DEFAULT_DELTA_REG,
            known_zero_ic: false,
        }
    }
}

impl WnsfOptions {
    /// Default grid `{50, 100, ..., 300}` restricted to orders with `2n < N`;
    /// falls back to `floor((N-1)/2)` when none qualify.
    pub fn default_grid(n_samples: usize) -> Vec<usize> {
        let cap = n_samples.saturating_sub(1) / 2;
        let grid: Vec<usize> = (1..=6).map(|k| 50 * k).filter(|&n| n <= cap).collect();
        if grid.is_empty() {
            vec![cap]
        } else {
            grid
        }
    }

    /// The grid actually searched for a data length of `n_samples`.
    pub fn grid(&self, n_samples: usize) -> Vec<usize> {
        if self.n_grid.is_empty() {
            Self::default_grid(n_samples)
        } else {
            self.n_grid.clone()
        }
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let grid = self.grid(n_samples);
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("n_grid must be strictly ascending".into()));
        }
        let max_n = *grid.last().expect("grid is never empty");
        if max_n == 0 || 2 * max_n >= n_samples {
            return Err(Error::OrderTooLarge { n: max_n, samples: n_samples });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        if !(self.delta_reg >= 0.0) {
            return Err(Error::InvalidArgument("delta_reg must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub n: usize,
    pub iter: usize,
    pub theta: Vec<f64>,
    pub pem_cost: f64,
    pub reflected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: Vec<f64>,
    pub orders: ModelOrders,
    pub n_used: usize,
    pub iterations: usize,
    pub pem_cost: f64,
    pub step2_theta: Vec<f64>,
    pub stable_plant: bool,
    pub stable_noise_model: bool,
    pub reflected: bool,
    pub trace: Vec<TraceEntry>,
}

impl ThetaEstimate {
    pub fn model(&self) -> Result<BjModel> {
        BjModel::from_theta(&self.theta, self.orders)
    }
}

fn check_order(n: usize, orders: ModelOrders) -> Result<()> {
    let required = orders.max_order().max(1);
    if n < required {
        return Err(Error::OrderTooSmall { n, required });
    }
    Ok(())
}

/// `Q(eta)` of size `2n x (m_f + m_l + m_c + m_d)` with block layout
/// `[0, 0, -Q^c, Q^d; -Q^f, Q^l, 0, 0]`.
pub fn build_q(eta: &[f64], orders: ModelOrders) -> Result<DMatrix<f64>> {
    if eta.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!("eta has odd length {}", eta.len())));
    }
    let n = eta.len() / 2;
    check_order(n, orders)?;
    let mut a_series = Vec::with_capacity(n);
    a_series.push(1.0);
    a_series.extend_from_slice(&eta[..n - 1]);
    let mut b_series = Vec::with_capacity(n);
    b_series.push(0.0);
    b_series.extend_from_slice(&eta[n..2 * n - 1]);

    let ModelOrders { m_f, m_l, m_c, m_d } = orders;
    let mut q = DMatrix::zeros(2 * n, orders.total());
    let (cf, cl, cc, cd) = (0, m_f, m_f + m_l, m_f + m_l + m_c);
    q.view_mut((n, cf), (n, m_f)).copy_from(&(-toeplitz(&b_series, n, m_f)));
    q.view_mut((n, cl), (n, m_l)).copy_from(&toeplitz(&a_series, n, m_l));
    q.view_mut((0, cc), (n, m_c)).copy_from(&(-toeplitz(&a_series, n, m_c)));
    for k in 0..m_d {
        q[(k, cd + k)] = 1.0;
    }
    Ok(q)
}

/// Dense `T(theta) = [T^c, 0; -T^l, T^f]`, each block `n x n`.
pub fn build_t(theta: &[f64], n: usize, orders: ModelOrders) -> Result<DMatrix<f64>> {
    let m = BjModel::from_theta(theta, orders)?;
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&toeplitz(m.c().coeffs(), n, n));
    t.view_mut((n, 0), (n, n)).copy_from(&(-toeplitz(m.l().coeffs(), n, n)));
    t.view_mut((n, n), (n, n)).copy_from(&toeplitz(m.f().coeffs(), n, n));
    Ok(t)
}

/// `[-T^l, T^f]` (`n x 2n`): the residual map when no noise model is estimated.
pub fn build_t_oe(theta: &[f64], n: usize, orders: ModelOrders) -> Result<DMatrix<f64>> {
    let m = BjModel::from_theta(theta, orders)?;
    let mut t = DMatrix::zeros(n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&(-toeplitz(m.l().coeffs(), n, n)));
    t.view_mut((0, n), (n, n)).copy_from(&toeplitz(m.f().coeffs(), n, n));
    Ok(t)
}

/// `T^{-1}` assembled from its block form
/// `[T_c^{-1}, 0; T_f^{-1} T_l T_c^{-1}, T_f^{-1}]`, where the inverse of a
/// lower-triangular Toeplitz matrix is the Toeplitz matrix of the inverse
/// power series.
pub fn t_inverse_blocks(theta: &[f64], n: usize, orders: ModelOrders) -> Result<DMatrix<f64>> {
    let m = BjModel::from_theta(theta, orders)?;
    let inv_c = toeplitz(&RationalFilter::new(Polynomial::one(), m.c().clone())?.impulse_response(n), n, n);
    let inv_f = toeplitz(&RationalFilter::new(Polynomial::one(), m.f().clone())?.impulse_response(n), n, n);
    let tl = toeplitz(m.l().coeffs(), n, n);
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&inv_c);
    out.view_mut((n, 0), (n, n)).copy_from(&(&inv_f * tl * &inv_c));
    out.view_mut((n, n), (n, n)).copy_from(&inv_f);
    Ok(out)
}

/// Filters used to apply `T(theta)^{-1}` to vectors of length `2n`.
struct TInverse {
    inv_c: RationalFilter,
    inv_f: RationalFilter,
    l: RationalFilter,
}

impl TInverse {
    fn new(model: &BjModel) -> Self {
        Self {
            inv_c: RationalFilter::new(Polynomial::one(), model.c().clone()).expect("monic"),
            inv_f: RationalFilter::new(Polynomial::one(), model.f().clone()).expect("monic"),
            l: RationalFilter::fir(model.l().clone()),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / 2;
        let top = self.inv_c.filter(&x[..n]);
        let coupled = self.l.filter(&top);
        let rhs: Vec<f64> = x[n..].iter().zip(&coupled).map(|(a, b)| a + b).collect();
        let mut out = top;
        out.extend(self.inv_f.filter(&rhs));
        out
    }

    fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (j, col) in m.column_iter().enumerate() {
            let v = self.apply(col.as_slice());
            out.column_mut(j).copy_from_slice(&v);
        }
        out
    }
}

/// `T(theta)^{-1} x` by forward filtering.
pub fn apply_t_inverse(theta: &[f64], orders: ModelOrders, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::InvalidArgument("vector length must be even".into()));
    }
    Ok(TInverse::new(&BjModel::from_theta(theta, orders)?).apply(x))
}

/// Least squares via Householder QR; fails when the reciprocal condition
/// number of `a` falls below [`RCOND_LIMIT`].
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let cols = a.ncols();
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond >= RCOND_LIMIT) {
        return Err(Error::RankDeficient { rcond });
    }
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let rhs = qtb.rows(0, cols).into_owned();
    r.solve_upper_triangular(&rhs).ok_or(Error::RankDeficient { rcond: 0.0 })
}

/// Step 2: `theta = argmin ||eta - Q(eta) theta||`.
pub fn step2_ls(arx: &ArxEstimate, orders: ModelOrders) -> Result<DVector<f64>> {
    let q = build_q(&arx.eta, orders)?;
    least_squares(&q, &arx.eta_vector())
}

fn require_stable(model: &BjModel) -> Result<()> {
    for (what, p) in [("F", model.f()), ("C", model.c())] {
        let s = p.stability()?;
        if !s.stable {
            return Err(Error::Unstable { what, max_modulus: s.max_modulus });
        }
    }
    Ok(())
}

/// Quantities reused across Step-3 iterations at a fixed ARX order.
struct Reduction {
    orders: ModelOrders,
    eta: DVector<f64>,
    q: DMatrix<f64>,
    weight: Weight,
}

enum Weight {
    /// Upper Cholesky factor `L'` of `R = L L'`, so `W = (L' T^{-1})' (L' T^{-1})`.
    Full(DMatrix<f64>),
    /// `R^{-1}`, for the output-error residual covariance `T R^{-1} T'`.
    OutputError(DMatrix<f64>),
}

impl Reduction {
    fn new(arx: &ArxEstimate, orders: ModelOrders) -> Result<Self> {
        let q = build_q(&arx.eta, orders)?;
        let chol = Cholesky::new(arx.r_matrix.clone()).ok_or(Error::SingularCovariance)?;
        let weight = if orders.is_output_error() {
            Weight::OutputError(chol.inverse())
        } else {
            Weight::Full(chol.l().transpose())
        };
        Ok(Self {
            orders,
            eta: arx.eta_vector(),
            q,
            weight,
        })
    }

    fn n(&self) -> usize {
        self.eta.len() / 2
    }

    fn step3(&self, theta_prev: &[f64]) -> Result<DVector<f64>> {
        let model = BjModel::from_theta(theta_prev, self.orders)?;
        require_stable(&model)?;
        match &self.weight {
            Weight::Full(lt) => {
                let t_inv = TInverse::new(&model);
                let z_mat = t_inv.apply_columns(&self.q);
                let z_vec = DVector::from_vec(t_inv.apply(self.eta.as_slice()));
                least_squares(&(lt * z_mat), &(lt * z_vec))
            }
            Weight::OutputError(r_inv) => {
                let n = self.n();
                let l = RationalFilter::fir(model.l().clone());
                let f = RationalFilter::fir(model.f().clone());
                // Rows of [-T^l, T^f] applied to every column of `m` (2n rows).
                let apply_t = |m: &DMatrix<f64>| {
                    let mut out = DMatrix::zeros(n, m.ncols());
                    for (j, col) in m.column_iter().enumerate() {
                        let s = col.as_slice();
                        let (la, fb) = (l.filter(&s[..n]), f.filter(&s[n..]));
                        for i in 0..n {
                            out[(i, j)] = fb[i] - la[i];
                        }
                    }
                    out
                };
                let t_rinv = apply_t(r_inv);
                let mut cov = apply_t(&t_rinv.transpose());
                cov.fill_upper_triangle_with_lower_triangle();
                let k = Cholesky::new(cov).ok_or(Error::SingularWeighting)?;
                let k_l = k.l();
                let q_low = self.q.view((n, 0), (n, self.orders.dynamic())).into_owned();
                let eta_b = self.eta.rows(n, n).into_owned();
                let a = k_l.solve_lower_triangular(&q_low).ok_or(Error::SingularWeighting)?;
                let b = k_l.solve_lower_triangular(&eta_b).ok_or(Error::SingularWeighting)?;
                least_squares(&a, &b)
            }
        }
    }
}

/// Step 3 with a noise model: `theta = (Q' W Q)^{-1} Q' W eta` where
/// `W = T^{-T}(theta_prev) R T^{-1}(theta_prev)`.
pub fn step3_wls(arx: &ArxEstimate, theta_prev: &[f64], orders: ModelOrders) -> Result<DVector<f64>> {
    if orders.is_output_error() {
        return step3_wls_oe(arx, theta_prev, orders);
    }
    Reduction::new(arx, orders)?.step3(theta_prev)
}

/// Step 3 without a noise model: only the `F B - L A = 0` equations, weighted
/// by `(T R^{-1} T')^{-1}` with `T = [-T^l, T^f]`.
pub fn step3_wls_oe(arx: &ArxEstimate, theta_prev: &[f64], orders: ModelOrders) -> Result<DVector<f64>> {
    if !orders.is_output_error() {
        return Err(Error::InvalidArgument("output-error step requires m_c = m_d = 0".into()));
    }
    Reduction::new(arx, orders)?.step3(theta_prev)
}

/// Mean squared prediction error `(1/N) sum eps_t^2` with
/// `eps = (D/C) (y - (L/F) u)` and zero initial conditions; `+inf` when the
/// predictor is unstable.
pub fn pem_cost(theta: &[f64], data: &DataSet, orders: ModelOrders) -> Result<f64> {
    let model = BjModel::from_theta(theta, orders)?;
    if require_stable(&model).is_err() {
        return Ok(f64::INFINITY);
    }
    let gu = model.plant().filter(&data.u);
    let v: Vec<f64> = data.y.iter().zip(&gu).map(|(y, g)| y - g).collect();
    let inv_h = RationalFilter::new(model.d().clone(), model.c().clone())?;
    let eps = inv_h.filter(&v);
    let cost = eps.iter().map(|e| e * e).sum::<f64>() / data.len() as f64;
    Ok(if cost.is_finite() { cost } else { f64::INFINITY })
}

/// Reflects roots on or outside the unit circle to `1/conj(z)`, clamping the
/// modulus to [`REFLECTION_CLAMP`]. Returns `None` when already stable.
pub fn reflect_unstable_roots(p: &Polynomial) -> Result<Option<Polynomial>> {
    let st = p.stability()?;
    if st.stable {
        return Ok(None);
    }
    let roots: Vec<Complex64> = st
        .roots
        .iter()
        .map(|&z| {
            let r = z.norm();
            if r < 1.0 - STABILITY_TOL {
                z
            } else {
                Complex64::from_polar((1.0 / r).min(REFLECTION_CLAMP), z.arg())
            }
        })
        .collect();
    let mut coeffs = Polynomial::from_roots(&roots).coeffs().to_vec();
    coeffs.resize(p.order() + 1, 0.0);
    Ok(Some(Polynomial::new(coeffs)?))
}

/// Stabilizes `F` and `C` of `theta` by root reflection; the flag reports
/// whether anything changed.
fn stabilize(theta: &[f64], orders: ModelOrders) -> Result<(Vec<f64>, bool)> {
    let m = BjModel::from_theta(theta, orders)?;
    let f = reflect_unstable_roots(m.f())?;
    let c = reflect_unstable_roots(m.c())?;
    if f.is_none() && c.is_none() {
        return Ok((theta.to_vec(), false));
    }
    let fixed = BjModel::new(
        m.l().clone(),
        f.unwrap_or_else(|| m.f().clone()),
        c.unwrap_or_else(|| m.c().clone()),
        m.d().clone(),
    )?;
    Ok((fixed.theta().as_slice().to_vec(), true))
}

struct OrderRun {
    n: usize,
    step2: Vec<f64>,
    trace: Vec<TraceEntry>,
}

fn run_order(data: &DataSet, orders: ModelOrders, options: &WnsfOptions, n: usize) -> Result<OrderRun> {
    check_order(n, orders)?;
    let arx = estimate_arx(data, n, options.delta_reg, options.known_zero_ic)?;
    let reduction = Reduction::new(&arx, orders)?;
    let step2 = least_squares(&reduction.q, &reduction.eta)?.as_slice().to_vec();
    let mut trace = Vec::new();
    let mut prev = step2.clone();
    for iter in 1..=options.max_iter {
        let (weight_theta, reflected) = stabilize(&prev, orders)?;
        let theta = match reduction.step3(&weight_theta) {
            Ok(t) => t.as_slice().to_vec(),
            Err(e) if trace.is_empty() => return Err(e),
            Err(e) => {
                log::debug!("n = {n}: iteration {iter} failed: {e}");
                break;
            }
        };
        let cost = pem_cost(&theta, data, orders)?;
        let change = theta.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let base = prev.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.push(TraceEntry {
            n,
            iter,
            theta: theta.clone(),
            pem_cost: cost,
            reflected,
        });
        prev = theta;
        if change / (base + 1e-12) < options.tol {
            break;
        }
    }
    Ok(OrderRun { n, step2, trace })
}

/// Full estimator: for every ARX order in the grid run Step 1, Step 2 and the
/// Step-3 iterations, then return the iterate with the smallest PEM cost
/// (ties go to smaller `n`, then fewer iterations). Iterates whose weighting
/// needed root reflection are only chosen when nothing else is feasible.
pub fn wnsf_identify(data: &DataSet, orders: ModelOrders, options: &WnsfOptions) -> Result<ThetaEstimate> {
    options.validate(data.len())?;
    let orders = if options.estimate_noise_model {
        orders
    } else {
        orders.without_noise_model()
    };
    let runs: Vec<(usize, Result<OrderRun>)> = options
        .grid(data.len())
        .into_par_iter()
        .map(|n| (n, run_order(data, orders, options, n)))
        .collect();

    let mut failures = Vec::new();
    let mut completed = Vec::new();
    for (n, run) in runs {
        match run {
            Ok(run) => completed.push(run),
            Err(e) => failures.push(format!("n = {n}: {e}")),
        }
    }
    let trace: Vec<TraceEntry> = completed.iter().flat_map(|r| r.trace.iter().cloned()).collect();
    let feasible = |allow_reflected: bool| {
        trace
            .iter()
            .filter(move |t| t.pem_cost.is_finite() && (allow_reflected || !t.reflected))
            .min_by(|a, b| {
                a.pem_cost
                    .total_cmp(&b.pem_cost)
                    .then(a.n.cmp(&b.n))
                    .then(a.iter.cmp(&b.iter))
            })
    };
    let best = match feasible(false).or_else(|| feasible(true)) {
        Some(best) => best.clone(),
        None => {
            for run in &completed {
                if !run.trace.is_empty() {
                    failures.push(format!("n = {}: every iterate has an unstable predictor", run.n));
                }
            }
            return Err(Error::NoFeasibleCandidate(failures));
        }
    };
    let step2 = completed
        .iter()
        .find(|r| r.n == best.n)
        .map(|r| r.step2.clone())
        .unwrap_or_default();
    let model = BjModel::from_theta(&best.theta, orders)?;
    Ok(ThetaEstimate {
        theta: best.theta,
        orders,
        n_used: best.n,
        iterations: best.iter,
        pem_cost: best.pem_cost,
        step2_theta: step2,
        stable_plant: model.f().is_stable()?,
        stable_noise_model: model.c().is_stable()? && model.d().is_stable()?,
        reflected: best.reflected,
        trace,
    })
}
