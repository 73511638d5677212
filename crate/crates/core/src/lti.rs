//! Polynomials in the backward shift operator and rational discrete-time
//! filters built from them.
//!
//! A [`Polynomial`] stores `[x_0, x_1, ..., x_m]` for `X(q) = sum x_k q^{-k}`.
//! Trailing zeros are kept as given, so the stored length carries the
//! structural order of a model polynomial.

use nalgebra::{linalg::balancing, DMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stability margin: a root counts as stable when `|z| < 1 - STABILITY_TOL`.
pub const STABILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Polynomial {
    type Error = Error;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        Polynomial::new(coeffs)
    }
}

impl From<Polynomial> for Vec<f64> {
    fn from(p: Polynomial) -> Self {
        p.coeffs
    }
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::EmptyPolynomial);
        }
        if let Some(index) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFiniteCoefficient { index });
        }
        Ok(Self { coeffs })
    }

    pub fn one() -> Self {
        Self { coeffs: vec![1.0] }
    }

    pub fn zero() -> Self {
        Self { coeffs: vec![0.0] }
    }

    /// `q^{-k}`.
    pub fn delay(k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[k] = 1.0;
        Self { coeffs }
    }

    /// Monic polynomial `1 + tail[0] q^{-1} + ... + tail[m-1] q^{-m}`.
    pub fn monic(tail: &[f64]) -> Result<Self> {
        let mut coeffs = Vec::with_capacity(tail.len() + 1);
        coeffs.push(1.0);
        coeffs.extend_from_slice(tail);
        Self::new(coeffs)
    }

    /// Strictly causal polynomial `tail[0] q^{-1} + ... + tail[m-1] q^{-m}`.
    pub fn delayed(tail: &[f64]) -> Result<Self> {
        let mut coeffs = Vec::with_capacity(tail.len() + 1);
        coeffs.push(0.0);
        coeffs.extend_from_slice(tail);
        Self::new(coeffs)
    }

    /// Builds the real monic polynomial `prod (1 - z_k q^{-1})` from roots
    /// given in the forward variable. Complex roots must come with their
    /// conjugates; the residual imaginary parts are dropped.
    pub fn from_roots(roots: &[Complex64]) -> Self {
        let mut acc = vec![Complex64::new(1.0, 0.0)];
        for &z in roots {
            let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
            for (k, &a) in acc.iter().enumerate() {
                next[k] += a;
                next[k + 1] -= a * z;
            }
            acc = next;
        }
        Self {
            coeffs: acc.into_iter().map(|c| c.re).collect(),
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `q^{-k}`, zero beyond the stored length.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    /// Structural order (stored length minus one).
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Coefficients after the leading one: `[x_1, ..., x_m]`.
    pub fn tail(&self) -> &[f64] {
        &self.coeffs[1..]
    }

    pub fn is_monic(&self) -> bool {
        self.coeffs[0] == 1.0
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut coeffs = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in other.coeffs.iter().enumerate() {
                coeffs[i + j] += a * b;
            }
        }
        Polynomial { coeffs }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let len = self.coeffs.len().max(other.coeffs.len());
        Polynomial {
            coeffs: (0..len).map(|k| self.coeff(k) + other.coeff(k)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Polynomial {
            coeffs: self.coeffs.iter().map(|x| x * c).collect(),
        }
    }

    /// Evaluates `X` with `q^{-1}` replaced by `z_inv`.
    pub fn eval(&self, z_inv: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z_inv + c)
    }

    /// Roots of the forward-variable polynomial `x_0 z^m + x_1 z^{m-1} + ... + x_m`,
    /// computed as eigenvalues of the balanced companion matrix.
    pub fn roots(&self) -> Result<Vec<Complex64>> {
        let lead = self.coeffs[0];
        if lead == 0.0 {
            return Err(Error::NotMonic(lead));
        }
        let m = self.order();
        if m == 0 {
            return Ok(Vec::new());
        }
        let mut companion = DMatrix::<f64>::zeros(m, m);
        for k in 0..m {
            companion[(0, k)] = -self.coeffs[k + 1] / lead;
        }
        for k in 1..m {
            companion[(k, k - 1)] = 1.0;
        }
        balancing::balance_parlett_reinsch(&mut companion);
        Ok(companion.complex_eigenvalues().iter().copied().collect())
    }

    /// Stability in the sense of all forward-variable roots strictly inside
    /// the unit circle (with margin [`STABILITY_TOL`]).
    pub fn stability(&self) -> Result<Stability> {
        if !self.is_monic() {
            return Err(Error::NotMonic(self.coeffs[0]));
        }
        let roots = self.roots()?;
        let max_modulus = roots.iter().map(|z| z.norm()).fold(0.0, f64::max);
        Ok(Stability {
            stable: max_modulus < 1.0 - STABILITY_TOL,
            max_modulus,
            roots,
        })
    }

    pub fn is_stable(&self) -> Result<bool> {
        Ok(self.stability()?.stable)
    }
}

#[derive(Debug, Clone)]
pub struct Stability {
    pub stable: bool,
    pub max_modulus: f64,
    pub roots: Vec<Complex64>,
}

/// `num(q) / den(q)` with a monic denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFilter")]
pub struct RationalFilter {
    num: Polynomial,
    den: Polynomial,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    num: Polynomial,
    den: Polynomial,
}

impl TryFrom<RawFilter> for RationalFilter {
    type Error = Error;

    fn try_from(raw: RawFilter) -> Result<Self> {
        RationalFilter::new(raw.num, raw.den)
    }
}

impl RationalFilter {
    pub fn new(num: Polynomial, den: Polynomial) -> Result<Self> {
        if !den.is_monic() {
            return Err(Error::NotMonic(den.coeffs[0]));
        }
        Ok(Self { num, den })
    }

    /// FIR filter `num / 1`.
    pub fn fir(num: Polynomial) -> Self {
        Self {
            num,
            den: Polynomial::one(),
        }
    }

    pub fn unit() -> Self {
        Self::fir(Polynomial::one())
    }

    pub fn gain(k: f64) -> Self {
        Self::fir(Polynomial::new(vec![k]).expect("finite gain"))
    }

    pub fn num(&self) -> &Polynomial {
        &self.num
    }

    pub fn den(&self) -> &Polynomial {
        &self.den
    }

    /// Series connection `self * other`.
    pub fn series(&self, other: &RationalFilter) -> RationalFilter {
        RationalFilter {
            num: self.num.mul(&other.num),
            den: self.den.mul(&other.den),
        }
    }

    pub fn is_stable(&self) -> Result<bool> {
        self.den.is_stable()
    }

    /// Runs `den(q) y = num(q) x` with zero initial conditions.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let num = self.num.coeffs();
        let den = &self.den.coeffs()[1..];
        let mut y = vec![0.0; x.len()];
        for t in 0..x.len() {
            let mut acc = 0.0;
            for (k, &b) in num.iter().enumerate().take(t + 1) {
                acc += b * x[t - k];
            }
            for (k, &a) in den.iter().enumerate().take(t) {
                acc -= a * y[t - 1 - k];
            }
            y[t] = acc;
        }
        y
    }

    /// First `len` power-series coefficients of `num / den`.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut impulse = vec![0.0; len];
        if len > 0 {
            impulse[0] = 1.0;
        }
        self.filter(&impulse)
    }

    /// Value at `q = e^{i omega}`, i.e. `num(e^{-i omega}) / den(e^{-i omega})`.
    pub fn freq_response(&self, omega: f64) -> Result<Complex64> {
        let z_inv = Complex64::from_polar(1.0, -omega);
        let d = self.den.eval(z_inv);
        if d.norm() < 1e-14 {
            return Err(Error::PoleOnUnitCircle(omega));
        }
        Ok(self.num.eval(z_inv) / d)
    }
}

/// `T_{n,m}(X)`: the `n x m` lower-triangular Toeplitz matrix with first
/// column `[x_0, ..., x_{n-1}]` (zero padded).
pub fn toeplitz(x: &[f64], n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, j| {
        if i >= j {
            x.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    })
}
