//! Open- and closed-loop data generation for a Box-Jenkins plant under
//! linear feedback `u = -K y + r`, and random resonant system sampling.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{Polynomial, RationalFilter};
use crate::model::BjModel;

const REFERENCE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    /// `u = S r`, `y = G u + H e`.
    Open,
    /// `u = S r - K S H e`, `y = G S r + S H e`.
    Closed,
    /// Reference enters through the controller: `u = K S r - K S H e`.
    ClosedRefThroughK,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopConfig {
    pub system: BjModel,
    pub controller: RationalFilter,
    pub reference_filter: RationalFilter,
    pub reference_gain: f64,
    pub noise_std: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub loop_kind: LoopKind,
    pub snr_target: Option<f64>,
}

impl LoopConfig {
    /// Unit-variance white reference, unit noise, given controller.
    pub fn new(system: BjModel, controller: RationalFilter, loop_kind: LoopKind, n_samples: usize, seed: u64) -> Self {
        Self {
            system,
            controller,
            reference_filter: RationalFilter::unit(),
            reference_gain: 1.0,
            noise_std: 1.0,
            n_samples,
            seed,
            loop_kind,
            snr_target: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if let Some(snr) = self.snr_target {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::InvalidArgument(format!("snr_target must be > 0, got {snr}")));
            }
        }
        Ok(())
    }

    /// Transfer functions from `r` and `e` to `u` and `y` for the given flow.
    pub fn transfers(&self, kind: LoopKind) -> Result<LoopTransfers> {
        let sys = &self.system;
        let (kn, kd) = (self.controller.num(), self.controller.den());
        // Characteristic polynomial of the loop: Kd F + Kn L (monic since L(0) = 0).
        let char_poly = kd.mul(sys.f()).add(&kn.mul(sys.l()));
        let stability = char_poly.stability()?;
        if !stability.stable {
            return Err(Error::UnstableLoop(stability.max_modulus));
        }
        let rf = |num: Polynomial, den: Polynomial| RationalFilter::new(num, den).expect("monic");
        let noise_den = char_poly.mul(sys.d());
        let ye = rf(kd.mul(sys.f()).mul(sys.c()), noise_den.clone());
        let ue = rf(kn.mul(sys.f()).mul(sys.c()).scale(-1.0), noise_den);
        let t = match kind {
            LoopKind::Open => LoopTransfers {
                ur: rf(kd.mul(sys.f()), char_poly.clone()),
                yr: rf(kd.mul(sys.l()), char_poly),
                ue: RationalFilter::fir(Polynomial::zero()),
                ye: sys.noise_model(),
            },
            LoopKind::Closed => LoopTransfers {
                ur: rf(kd.mul(sys.f()), char_poly.clone()),
                yr: rf(kd.mul(sys.l()), char_poly),
                ue,
                ye,
            },
            LoopKind::ClosedRefThroughK => LoopTransfers {
                ur: rf(kn.mul(sys.f()), char_poly.clone()),
                yr: rf(kn.mul(sys.l()), char_poly),
                ue,
                ye,
            },
        };
        Ok(t)
    }
}

/// `u = ur * r + ue * e`, `y = yr * r + ye * e`.
#[derive(Debug, Clone)]
pub struct LoopTransfers {
    pub ur: RationalFilter,
    pub yr: RationalFilter,
    pub ue: RationalFilter,
    pub ye: RationalFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    /// Realized innovation sequence, kept when known (simulation).
    pub e: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub loop_kind: Option<LoopKind>,
    pub system: Option<BjModel>,
}

impl DataSet {
    /// Input/output records without simulation metadata.
    pub fn from_signals(r: Vec<f64>, u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            r,
            u,
            y,
            e: None,
            seed: None,
            loop_kind: None,
            system: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        for len in [self.r.len(), self.u.len()].into_iter().chain(self.e.as_ref().map(Vec::len)) {
            if len != n {
                return Err(Error::LengthMismatch(len, n));
            }
        }
        let all = self.r.iter().chain(&self.u).chain(&self.y).chain(self.e.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(())
    }

    /// CSV with header `t,r,u,y` (plus `e` when requested and available).
    /// Values use the shortest representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, out: W, with_noise: bool) -> Result<()> {
        let noise = if with_noise { self.e.as_deref() } else { None };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t", "r", "u", "y"];
        if noise.is_some() {
            header.push("e");
        }
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![
                (t + 1).to_string(),
                format!("{:?}", self.r[t]),
                format!("{:?}", self.u[t]),
                format!("{:?}", self.y[t]),
            ];
            if let Some(e) = noise {
                rec.push(format!("{:?}", e[t]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, with_noise: bool) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), with_noise)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (ri, ui, yi) = match (col("r"), col("u"), col("y")) {
            (Some(r), Some(u), Some(y)) => (r, u, y),
            _ => return Err(Error::InvalidArgument("CSV header must contain r, u and y columns".into())),
        };
        let ei = col("e");
        let (mut r, mut u, mut y, mut e) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unparseable value in data row {}", row + 1)))
            };
            r.push(get(ri)?);
            u.push(get(ui)?);
            y.push(get(yi)?);
            if let Some(ei) = ei {
                e.push(get(ei)?);
            }
        }
        let mut ds = Self::from_signals(r, u, y)?;
        if ei.is_some() {
            ds.e = Some(e);
            ds.validate()?;
        }
        Ok(ds)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn white_noise(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Reference `r = gain * F_r(q) w` with `w` unit-variance white noise from
/// the reference sub-stream of `seed`.
pub fn draw_reference(cfg: &LoopConfig) -> Vec<f64> {
    let w = white_noise(&mut stream(cfg.seed, REFERENCE_STREAM), cfg.n_samples);
    cfg.reference_filter
        .filter(&w)
        .into_iter()
        .map(|v| v * cfg.reference_gain)
        .collect()
}

/// Unit-variance noise draw from the noise sub-stream of `seed`.
pub fn draw_unit_noise(cfg: &LoopConfig) -> Vec<f64> {
    white_noise(&mut stream(cfg.seed, NOISE_STREAM), cfg.n_samples)
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Noise standard deviation that makes `sum(y_ref^2) / sum((sigma * h_unit)^2)`
/// equal `snr`, where `h_unit` is the noise model applied to unit noise.
pub fn noise_std_for_snr(y_ref: &[f64], h_unit_noise: &[f64], snr: f64) -> Result<f64> {
    let noise_energy = energy(h_unit_noise);
    if noise_energy == 0.0 {
        return Err(Error::ZeroNoiseEnergy);
    }
    Ok((energy(y_ref) / (snr * noise_energy)).sqrt())
}

/// Noise level achieving `cfg.snr_target` on the sequences drawn from
/// `cfg.seed`; the SNR is measured between the reference-driven output and
/// `H_o e`.
pub fn scale_noise_to_snr(cfg: &LoopConfig) -> Result<f64> {
    let snr = cfg
        .snr_target
        .ok_or_else(|| Error::InvalidArgument("snr_target is not set".into()))?;
    let tf = cfg.transfers(cfg.loop_kind)?;
    let y_ref = tf.yr.filter(&draw_reference(cfg));
    let h_unit = cfg.system.noise_model().filter(&draw_unit_noise(cfg));
    noise_std_for_snr(&y_ref, &h_unit, snr)
}

/// SNR realized by a dataset (requires the stored noise sequence).
pub fn realized_snr(cfg: &LoopConfig, data: &DataSet) -> Result<f64> {
    let e = data
        .e
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no noise record".into()))?;
    let tf = cfg.transfers(cfg.loop_kind)?;
    Ok(energy(&tf.yr.filter(&data.r)) / energy(&cfg.system.noise_model().filter(e)))
}

/// Simulates according to `cfg.loop_kind`.
pub fn simulate(cfg: &LoopConfig) -> Result<DataSet> {
    generate(cfg, cfg.loop_kind, None)
}

pub fn generate_closed_loop(cfg: &LoopConfig) -> Result<DataSet> {
    generate(cfg, LoopKind::Closed, None)
}

pub fn generate_open_loop(cfg: &LoopConfig) -> Result<DataSet> {
    generate(cfg, LoopKind::Open, None)
}

pub fn generate_closed_loop_ref_through_k(cfg: &LoopConfig) -> Result<DataSet> {
    generate(cfg, LoopKind::ClosedRefThroughK, None)
}

/// Like [`simulate`] but with a caller-supplied reference sequence.
pub fn simulate_with_reference(cfg: &LoopConfig, r: &[f64]) -> Result<DataSet> {
    if r.len() != cfg.n_samples {
        return Err(Error::LengthMismatch(r.len(), cfg.n_samples));
    }
    generate(cfg, cfg.loop_kind, Some(r))
}

fn generate(cfg: &LoopConfig, kind: LoopKind, exogenous_r: Option<&[f64]>) -> Result<DataSet> {
    cfg.validate()?;
    let tf = cfg.transfers(kind)?;
    let r = match exogenous_r {
        Some(r) => r.to_vec(),
        None => draw_reference(cfg),
    };
    let sigma = match cfg.snr_target {
        Some(_) => scale_noise_to_snr(&LoopConfig { loop_kind: kind, ..cfg.clone() })?,
        None => cfg.noise_std,
    };
    let e: Vec<f64> = draw_unit_noise(cfg).into_iter().map(|v| v * sigma).collect();

    let add = |a: Vec<f64>, b: Vec<f64>| a.into_iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    let (u, y) = match kind {
        LoopKind::Open => {
            let u = tf.ur.filter(&r);
            let y = add(cfg.system.plant().filter(&u), tf.ye.filter(&e));
            (u, y)
        }
        LoopKind::Closed | LoopKind::ClosedRefThroughK => {
            (add(tf.ur.filter(&r), tf.ue.filter(&e)), add(tf.yr.filter(&r), tf.ye.filter(&e)))
        }
    };
    let ds = DataSet {
        r,
        u,
        y,
        e: Some(e),
        seed: Some(cfg.seed),
        loop_kind: Some(kind),
        system: Some(cfg.system.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Sampling ranges for random resonant Box-Jenkins systems. Phases are in
/// degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomSystemSpec {
    pub plant_pole_pairs: usize,
    pub plant_zero_pairs: usize,
    pub real_zero: bool,
    pub pole_radius: [f64; 2],
    pub pole_phase_deg: [f64; 2],
    pub real_zero_range: [f64; 2],
    pub noise_pairs: usize,
    pub noise_radius: [f64; 2],
    pub noise_phase_deg: [f64; 2],
}

impl Default for RandomSystemSpec {
    fn default() -> Self {
        Self {
            plant_pole_pairs: 3,
            plant_zero_pairs: 1,
            real_zero: true,
            pole_radius: [0.88, 0.98],
            pole_phase_deg: [0.0, 90.0],
            real_zero_range: [-1.2, 1.2],
            noise_pairs: 1,
            noise_radius: [0.0, 0.95],
            noise_phase_deg: [0.0, 180.0],
        }
    }
}

fn conjugate_pairs(rng: &mut impl Rng, count: usize, radius: [f64; 2], phase_deg: [f64; 2]) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(2 * count);
    for _ in 0..count {
        let r = rng.random_range(radius[0]..=radius[1]);
        let ph = rng.random_range(phase_deg[0]..=phase_deg[1]).to_radians();
        let z = Complex64::from_polar(r, ph);
        roots.push(z);
        roots.push(z.conj());
    }
    roots
}

/// Draws a random Box-Jenkins system: `L = q^-1 * (monic zero polynomial)`,
/// `F`, `C`, `D` monic with roots sampled in the configured annuli.
pub fn random_system(rng: &mut impl Rng, spec: &RandomSystemSpec) -> BjModel {
    let poles = conjugate_pairs(rng, spec.plant_pole_pairs, spec.pole_radius, spec.pole_phase_deg);
    let mut zeros = conjugate_pairs(rng, spec.plant_zero_pairs, spec.pole_radius, spec.pole_phase_deg);
    if spec.real_zero {
        zeros.push(Complex64::new(rng.random_range(spec.real_zero_range[0]..=spec.real_zero_range[1]), 0.0));
    }
    let c_roots = conjugate_pairs(rng, spec.noise_pairs, spec.noise_radius, spec.noise_phase_deg);
    let d_roots = conjugate_pairs(rng, spec.noise_pairs, spec.noise_radius, spec.noise_phase_deg);
    BjModel::new(
        Polynomial::delay(1).mul(&Polynomial::from_roots(&zeros)),
        Polynomial::from_roots(&poles),
        Polynomial::from_roots(&c_roots),
        Polynomial::from_roots(&d_roots),
    )
    .expect("constructed polynomials are monic")
}
