//! Box-Jenkins model structure `y = (L/F) u + (C/D) e` and its flat
//! parameter vector `theta = [f; l; c; d]`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{Polynomial, RationalFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOrders {
    pub m_f: usize,
    pub m_l: usize,
    pub m_c: usize,
    pub m_d: usize,
}

impl ModelOrders {
    pub fn new(m_f: usize, m_l: usize, m_c: usize, m_d: usize) -> Self {
        Self { m_f, m_l, m_c, m_d }
    }

    pub fn total(&self) -> usize {
        self.m_f + self.m_l + self.m_c + self.m_d
    }

    /// Number of parameters in `G = L/F`.
    pub fn dynamic(&self) -> usize {
        self.m_f + self.m_l
    }

    /// No parametric noise model.
    pub fn is_output_error(&self) -> bool {
        self.m_c == 0 && self.m_d == 0
    }

    pub fn max_order(&self) -> usize {
        self.m_f.max(self.m_l).max(self.m_c).max(self.m_d)
    }

    pub fn without_noise_model(&self) -> Self {
        Self::new(self.m_f, self.m_l, 0, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct BjModel {
    l: Polynomial,
    f: Polynomial,
    c: Polynomial,
    d: Polynomial,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "L")]
    l: Polynomial,
    #[serde(rename = "F")]
    f: Polynomial,
    #[serde(rename = "C", default = "Polynomial::one")]
    c: Polynomial,
    #[serde(rename = "D", default = "Polynomial::one")]
    d: Polynomial,
}

impl TryFrom<RawModel> for BjModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        BjModel::new(raw.l, raw.f, raw.c, raw.d)
    }
}

impl From<BjModel> for RawModel {
    fn from(m: BjModel) -> Self {
        RawModel {
            l: m.l,
            f: m.f,
            c: m.c,
            d: m.d,
        }
    }
}

impl BjModel {
    /// `l` must have a zero constant term; `f`, `c` and `d` must be monic.
    pub fn new(l: Polynomial, f: Polynomial, c: Polynomial, d: Polynomial) -> Result<Self> {
        if l.coeff(0) != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "L must have a zero constant term, got {}",
                l.coeff(0)
            )));
        }
        for p in [&f, &c, &d] {
            if !p.is_monic() {
                return Err(Error::NotMonic(p.coeff(0)));
            }
        }
        Ok(Self { l, f, c, d })
    }

    /// Output-error model (`C = D = 1`).
    pub fn output_error(l: Polynomial, f: Polynomial) -> Result<Self> {
        Self::new(l, f, Polynomial::one(), Polynomial::one())
    }

    /// Rebuilds a model from `theta = [f; l; c; d]`.
    pub fn from_theta(theta: &[f64], orders: ModelOrders) -> Result<Self> {
        if theta.len() != orders.total() {
            return Err(Error::LengthMismatch(theta.len(), orders.total()));
        }
        let (f, rest) = theta.split_at(orders.m_f);
        let (l, rest) = rest.split_at(orders.m_l);
        let (c, d) = rest.split_at(orders.m_c);
        Self::new(
            Polynomial::delayed(l)?,
            Polynomial::monic(f)?,
            Polynomial::monic(c)?,
            Polynomial::monic(d)?,
        )
    }

    pub fn orders(&self) -> ModelOrders {
        ModelOrders::new(self.f.order(), self.l.order(), self.c.order(), self.d.order())
    }

    pub fn theta(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.orders().total());
        v.extend_from_slice(self.f.tail());
        v.extend_from_slice(self.l.tail());
        v.extend_from_slice(self.c.tail());
        v.extend_from_slice(self.d.tail());
        DVector::from_vec(v)
    }

    pub fn l(&self) -> &Polynomial {
        &self.l
    }

    pub fn f(&self) -> &Polynomial {
        &self.f
    }

    pub fn c(&self) -> &Polynomial {
        &self.c
    }

    pub fn d(&self) -> &Polynomial {
        &self.d
    }

    /// Plant `G = L/F`.
    pub fn plant(&self) -> RationalFilter {
        RationalFilter::new(self.l.clone(), self.f.clone()).expect("F is monic")
    }

    /// Noise model `H = C/D`.
    pub fn noise_model(&self) -> RationalFilter {
        RationalFilter::new(self.c.clone(), self.d.clone()).expect("D is monic")
    }
}

/// Reference systems used throughout the tests and shipped configs.
pub mod systems {
    use super::*;

    /// Second-order Box-Jenkins benchmark:
    /// `G = (q^-1 + 0.1 q^-2) / (1 - 0.5 q^-1 + 0.75 q^-2)`,
    /// `H = (1 + 0.7 q^-1) / (1 - 0.9 q^-1)`.
    pub fn second_order_bj() -> BjModel {
        BjModel::new(
            Polynomial::delayed(&[1.0, 0.1]).unwrap(),
            Polynomial::monic(&[-0.5, 0.75]).unwrap(),
            Polynomial::monic(&[0.7]).unwrap(),
            Polynomial::monic(&[-0.9]).unwrap(),
        )
        .unwrap()
    }

    /// Slow third-order output-error plant:
    /// `G = (q^-1 - 1.2 q^-2) / (1 - 2.5 q^-1 + 2.4 q^-2 - 0.88 q^-3)`, `H = 1`.
    pub fn resonant_oe() -> BjModel {
        BjModel::output_error(
            Polynomial::delayed(&[1.0, -1.2]).unwrap(),
            Polynomial::monic(&[-2.5, 2.4, -0.88]).unwrap(),
        )
        .unwrap()
    }
}
