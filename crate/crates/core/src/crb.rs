//! Asymptotic covariance of PEM-type estimators: the Cramér-Rao bound
//! `sigma^2 M_CR^{-1}`, the closed-loop bound with an unconstrained noise
//! model, and the finite-order limit matrix of the weighted reduction.
//!
//! All integrals `(1/2pi) int_{-pi}^{pi} f(w) dw` of spectra of real signals
//! are evaluated on the periodic grid `w_k = 2 pi k / G`, folding the
//! conjugate-symmetric half onto `[0, pi]`.

use nalgebra::{Cholesky, DMatrix, Matrix2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arx::true_eta;
use crate::error::{Error, Result};
use crate::lti::{Polynomial, RationalFilter};
use crate::model::BjModel;
use crate::simulate::{LoopConfig, LoopKind};
use crate::wnsf::build_q;

pub const DEFAULT_GRID_SIZE: usize = 8192;

/// Everything needed to evaluate the spectrum of `[u, e]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub system: BjModel,
    pub controller: RationalFilter,
    pub reference_filter: RationalFilter,
    pub reference_gain: f64,
    pub noise_var: f64,
    pub loop_kind: LoopKind,
}

impl SpectrumModel {
    /// Spectral description of a simulation setup. With an SNR target the
    /// noise variance is the one giving that SNR in expectation.
    pub fn from_loop(cfg: &LoopConfig) -> Result<Self> {
        let mut sm = Self {
            system: cfg.system.clone(),
            controller: cfg.controller.clone(),
            reference_filter: cfg.reference_filter.clone(),
            reference_gain: cfg.reference_gain,
            noise_var: cfg.noise_std * cfg.noise_std,
            loop_kind: cfg.loop_kind,
        };
        if let Some(snr) = cfg.snr_target {
            let tf = sm.loop_config().transfers(sm.loop_kind)?;
            let h = sm.system.noise_model();
            let grid = DEFAULT_GRID_SIZE;
            let y_var = integrate_scalar(grid, |w| {
                Ok(tf.yr.freq_response(w)?.norm_sqr() * sm.reference_spectrum(w)?)
            })?;
            let h_var = integrate_scalar(grid, |w| Ok(h.freq_response(w)?.norm_sqr()))?;
            sm.noise_var = y_var / (snr * h_var);
        }
        Ok(sm)
    }

    fn loop_config(&self) -> LoopConfig {
        let mut cfg = LoopConfig::new(self.system.clone(), self.controller.clone(), self.loop_kind, 1, 0);
        cfg.reference_filter = self.reference_filter.clone();
        cfg.reference_gain = self.reference_gain;
        cfg
    }

    /// `Phi_r(w) = gain^2 |F_r|^2`.
    pub fn reference_spectrum(&self, omega: f64) -> Result<f64> {
        Ok(self.reference_gain.powi(2) * self.reference_filter.freq_response(omega)?.norm_sqr())
    }

    fn check(&self) -> Result<()> {
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be >= 0, got {}", self.noise_var)));
        }
        for (name, f) in [
            ("F", self.system.f()),
            ("C", self.system.c()),
            ("D", self.system.d()),
        ] {
            let s = f.stability()?;
            if !s.stable {
                return Err(Error::Unstable { what: name, max_modulus: s.max_modulus });
            }
        }
        if !self.reference_filter.is_stable()? {
            return Err(Error::Unstable {
                what: "reference filter",
                max_modulus: self.reference_filter.den().stability()?.max_modulus,
            });
        }
        Ok(())
    }
}

/// Input-side transfers: `u = s_r r + s_e e`.
struct InputPaths {
    s_r: RationalFilter,
    s_e: RationalFilter,
}

impl InputPaths {
    fn new(sm: &SpectrumModel) -> Result<Self> {
        let tf = sm.loop_config().transfers(sm.loop_kind)?;
        Ok(Self { s_r: tf.ur, s_e: tf.ue })
    }

    fn phi_z(&self, sm: &SpectrumModel, omega: f64) -> Result<Matrix2<Complex64>> {
        let sr = self.s_r.freq_response(omega)?;
        let se = self.s_e.freq_response(omega)?;
        let s2 = sm.noise_var;
        let phi_u = sr.norm_sqr() * sm.reference_spectrum(omega)? + se.norm_sqr() * s2;
        let cross = se * s2;
        Ok(Matrix2::new(
            Complex64::new(phi_u, 0.0),
            cross,
            cross.conj(),
            Complex64::new(s2, 0.0),
        ))
    }

    /// Spectrum of the reference-driven part of `u`.
    fn phi_u_r(&self, sm: &SpectrumModel, omega: f64) -> Result<f64> {
        Ok(self.s_r.freq_response(omega)?.norm_sqr() * sm.reference_spectrum(omega)?)
    }
}

/// Spectrum of `[u_t, e_t]` at `omega`.
pub fn phi_z(sm: &SpectrumModel, omega: f64) -> Result<Matrix2<Complex64>> {
    InputPaths::new(sm)?.phi_z(sm, omega)
}

/// `Gamma_m(e^{iw}) = [e^{-iw}, ..., e^{-imw}]`.
pub fn gamma(m: usize, omega: f64) -> Vec<Complex64> {
    (1..=m).map(|k| Complex64::from_polar(1.0, -(k as f64) * omega)).collect()
}

/// Gradient map `Omega(e^{iw})` with rows ordered as `theta = [f; l; c; d]`
/// and columns `[u, e]`.
pub fn build_omega_matrix(system: &BjModel, omega: f64) -> Result<DMatrix<Complex64>> {
    let orders = system.orders();
    let z = Complex64::from_polar(1.0, -omega);
    let at = |p: &Polynomial| -> Result<Complex64> {
        let v = p.eval(z);
        if v.norm() < 1e-14 {
            return Err(Error::PoleOnUnitCircle(omega));
        }
        Ok(v)
    };
    let (f, c, d) = (at(system.f())?, at(system.c())?, at(system.d())?);
    let l = system.l().eval(z);
    let h = c / d;
    let g = l / f;
    let mut out = DMatrix::zeros(orders.total(), 2);
    let mut row = 0;
    for (m, col, scale) in [
        (orders.m_f, 0, -g / (h * f)),
        (orders.m_l, 0, 1.0 / (h * f)),
        (orders.m_c, 1, 1.0 / c),
        (orders.m_d, 1, -1.0 / d),
    ] {
        for gk in gamma(m, omega) {
            out[(row, col)] = scale * gk;
            row += 1;
        }
    }
    Ok(out)
}

/// Weights of the folded periodic grid: `w_k = 2 pi k / G` for
/// `k = 0..=G/2`, each weighted by how many grid points it represents.
fn folded_grid(grid_size: usize) -> Vec<(f64, f64)> {
    let g = grid_size as f64;
    (0..=grid_size / 2)
        .map(|k| {
            let mirrored = k != 0 && 2 * k != grid_size;
            let w = if mirrored { 2.0 } else { 1.0 };
            (2.0 * std::f64::consts::PI * k as f64 / g, w / g)
        })
        .collect()
}

fn check_grid(grid_size: usize) -> Result<()> {
    if grid_size < 4 {
        return Err(Error::InvalidArgument(format!("grid_size must be >= 4, got {grid_size}")));
    }
    Ok(())
}

fn pairwise_sum(mut terms: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a + b,
                None => a,
            });
        }
        terms = next;
    }
    terms.pop().expect("non-empty grid")
}

/// `(1/2pi) int Re f(w) dw` for a Hermitian-symmetric matrix integrand.
/// Grid points are evaluated in parallel and summed pairwise in grid order.
fn integrate<F>(grid_size: usize, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(f64) -> Result<DMatrix<f64>> + Sync,
{
    check_grid(grid_size)?;
    let terms = folded_grid(grid_size)
        .into_par_iter()
        .map(|(w, weight)| f(w).map(|m| m * weight))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(terms))
}

fn integrate_scalar<F>(grid_size: usize, f: F) -> Result<f64>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    Ok(integrate(grid_size, |w| Ok(DMatrix::from_element(1, 1, f(w)?)))?[(0, 0)])
}

/// Real part of `a B a^*` for `a` of size `p x 2`.
fn quad_form(a: &DMatrix<Complex64>, b: &Matrix2<Complex64>) -> DMatrix<f64> {
    let b = DMatrix::from_fn(2, 2, |i, j| b[(i, j)]);
    (a * b * a.adjoint()).map(|z| z.re)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrbResult {
    #[serde(rename = "M", with = "matrix_json")]
    pub m: DMatrix<f64>,
    #[serde(rename = "M_inv", with = "matrix_json")]
    pub m_inv: DMatrix<f64>,
    /// Trace of the plant-parameter block of `sigma^2 M^{-1}`.
    pub dyn_block_trace: f64,
    pub noise_var: f64,
    pub grid_size: usize,
}

impl CrbResult {
    fn new(mut m: DMatrix<f64>, n_dyn: usize, noise_var: f64, grid_size: usize) -> Result<Self> {
        symmetrize(&mut m);
        let chol = Cholesky::new(m.clone()).ok_or_else(|| {
            Error::NonInformative(format!(
                "information matrix of size {} is not positive definite",
                m.nrows()
            ))
        })?;
        let m_inv = chol.inverse();
        let dyn_block_trace = noise_var * (0..n_dyn).map(|i| m_inv[(i, i)]).sum::<f64>();
        Ok(Self {
            m,
            m_inv,
            dyn_block_trace,
            noise_var,
            grid_size,
        })
    }

    /// `sigma^2 M^{-1}`: asymptotic covariance of `sqrt(N) (theta_hat - theta_o)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.m_inv * self.noise_var
    }
}

/// `M_CR = (1/2pi) int Omega Phi_z Omega^* dw`.
pub fn compute_mcr(sm: &SpectrumModel, grid_size: usize) -> Result<CrbResult> {
    sm.check()?;
    let paths = InputPaths::new(sm)?;
    let m = integrate(grid_size, |w| {
        Ok(quad_form(&build_omega_matrix(&sm.system, w)?, &paths.phi_z(sm, w)?))
    })?;
    CrbResult::new(m, sm.system.orders().dynamic(), sm.noise_var, grid_size)
}

/// `M_CL = (1/2pi) int Omega_bar Phi_u^r Omega_bar^* dw`, where `Omega_bar`
/// holds the plant rows of `Omega` and `Phi_u^r` is the reference-driven
/// input spectrum. Its inverse bounds the plant covariance when the noise
/// model is over-parametrized in closed loop.
pub fn compute_mcl(sm: &SpectrumModel, grid_size: usize) -> Result<CrbResult> {
    sm.check()?;
    let paths = InputPaths::new(sm)?;
    let n_dyn = sm.system.orders().dynamic();
    let m = integrate(grid_size, |w| {
        let omega = build_omega_matrix(&sm.system, w)?;
        let bar = omega.view((0, 0), (n_dyn, 1)).into_owned();
        let phi = paths.phi_u_r(sm, w)?;
        Ok((&bar * bar.adjoint()).map(|z| z.re * phi))
    })?;
    CrbResult::new(m, n_dyn, sm.noise_var, grid_size)
}

/// `R_bar^n = E[phi_t phi_t']` for the regressor `phi_t = [-y_{t-1..t-n}, u_{t-1..t-n}]`,
/// from the spectrum of `[u, e]`.
pub fn rbar(sm: &SpectrumModel, n: usize, grid_size: usize) -> Result<DMatrix<f64>> {
    sm.check()?;
    check_grid(grid_size)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let paths = InputPaths::new(sm)?;
    let g = sm.system.plant();
    let h = sm.system.noise_model();
    let grid = folded_grid(grid_size);
    // Cross spectra of the signal pairs (-y,-y), (-y,u), (u,-y), (u,u).
    let spectra = grid
        .par_iter()
        .map(|&(w, _)| {
            let phi = paths.phi_z(sm, w)?;
            let vy = [-g.freq_response(w)?, -h.freq_response(w)?];
            let vu = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
            let s = |a: &[Complex64; 2], b: &[Complex64; 2]| {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..2 {
                    for j in 0..2 {
                        acc += a[i] * phi[(i, j)] * b[j].conj();
                    }
                }
                acc
            };
            Ok([s(&vy, &vy), s(&vy, &vu), s(&vu, &vy), s(&vu, &vu)])
        })
        .collect::<Result<Vec<_>>>()?;
    // c_p(tau) = (1/2pi) int e^{-i w tau} s_p(w) dw for tau in (-n, n).
    let lags: Vec<i64> = (-(n as i64) + 1..n as i64).collect();
    let cov: Vec<[f64; 4]> = lags
        .par_iter()
        .map(|&tau| {
            let mut acc = [0.0; 4];
            for (&(w, weight), s) in grid.iter().zip(&spectra) {
                let rot = Complex64::from_polar(1.0, -(tau as f64) * w);
                for p in 0..4 {
                    acc[p] += weight * (rot * s[p]).re;
                }
            }
            acc
        })
        .collect();
    let lag = |j: usize, k: usize| (j as i64 - k as i64 + n as i64 - 1) as usize;
    let mut r = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..n {
        for k in 0..n {
            let c = &cov[lag(j, k)];
            r[(j, k)] = c[0];
            r[(j, n + k)] = c[1];
            r[(n + j, k)] = c[2];
            r[(n + j, n + k)] = c[3];
        }
    }
    symmetrize(&mut r);
    Ok(r)
}

/// `M_bar = Q'(eta_o) T^{-T}(theta_o) R_bar T^{-1}(theta_o) Q(eta_o)` at ARX
/// order `n`; tends to `M_CR` as `n` grows.
pub fn mbar_limit(sm: &SpectrumModel, n: usize, grid_size: usize) -> Result<DMatrix<f64>> {
    let system = &sm.system;
    let orders = system.orders();
    let eta = true_eta(system, n)?;
    let q = build_q(eta.as_slice(), orders)?;
    let theta = system.theta();
    let mut z = DMatrix::zeros(2 * n, orders.total());
    for (j, col) in q.column_iter().enumerate() {
        let v = crate::wnsf::apply_t_inverse(theta.as_slice(), orders, col.as_slice())?;
        z.column_mut(j).copy_from_slice(&v);
    }
    let r = rbar(sm, n, grid_size)?;
    let mut m = z.transpose() * r * z;
    symmetrize(&mut m);
    Ok(m)
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with `data` in
/// row-major order.
pub mod matrix_json {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {} x {}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}
