//! JSON experiment description shared by the command-line tool and the
//! Monte Carlo runner. Unknown keys are rejected everywhere.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::RationalFilter;
use crate::model::{BjModel, ModelOrders};
use crate::simulate::{random_system, LoopConfig, LoopKind, RandomSystemSpec};
use crate::wnsf::WnsfOptions;

/// Sub-stream used to draw the true system of a run.
const SYSTEM_STREAM: u64 = 2;

/// Grid used to bound `|G|` when sizing a small-gain controller.
const GAIN_GRID: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    /// Static gain `K = k`.
    Gain(f64),
    /// Rational controller.
    Filter(RationalFilter),
    /// `K = margin / max_w |G(e^{iw})|`; stabilizes any stable plant for
    /// `margin < 1` by the small-gain theorem.
    SmallGain { margin: f64 },
}

impl ControllerSpec {
    pub fn resolve(&self, system: &BjModel) -> Result<RationalFilter> {
        match self {
            ControllerSpec::Gain(k) => {
                if !k.is_finite() {
                    return Err(Error::InvalidArgument(format!("controller gain must be finite, got {k}")));
                }
                Ok(RationalFilter::gain(*k))
            }
            ControllerSpec::Filter(f) => Ok(f.clone()),
            ControllerSpec::SmallGain { margin } => {
                if !(*margin > 0.0 && *margin < 1.0) {
                    return Err(Error::InvalidArgument(format!("small-gain margin must be in (0, 1), got {margin}")));
                }
                let g = system.plant();
                let mut peak = 0.0f64;
                for k in 0..=GAIN_GRID / 2 {
                    let w = 2.0 * std::f64::consts::PI * k as f64 / GAIN_GRID as f64;
                    peak = peak.max(g.freq_response(w)?.norm());
                }
                if peak == 0.0 {
                    return Err(Error::InvalidArgument("plant has zero gain".into()));
                }
                Ok(RationalFilter::gain(margin / peak))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSpec {
    pub filter: RationalFilter,
    pub gain: f64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self {
            filter: RationalFilter::unit(),
            gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub std: f64,
    pub snr_target: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            std: 1.0,
            snr_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub loop_kind: LoopKind,
    /// Model orders to estimate; defaults to those of the true system.
    #[serde(default)]
    pub orders: Option<ModelOrders>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Restrict the parameter MSE to the plant parameters.
    #[serde(default = "default_true")]
    pub mse_dyn_only: bool,
}

fn default_runs() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub dataset: Option<String>,
}

/// A complete experiment: true system (fixed or random per run), feedback,
/// excitation, noise, data length, estimator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: Option<BjModel>,
    #[serde(default)]
    pub random_system: Option<RandomSystemSpec>,
    pub controller: ControllerSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub wnsf_options: WnsfOptions,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(reader)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.system, &self.random_system) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "exactly one of `system` and `random_system` must be given".into(),
                ))
            }
        }
        let e = &self.experiment;
        if e.n_samples == 0 {
            return Err(Error::InvalidArgument("experiment.n_samples must be >= 1".into()));
        }
        if e.runs == 0 {
            return Err(Error::InvalidArgument("experiment.runs must be >= 1".into()));
        }
        if self.orders().is_none() {
            return Err(Error::InvalidArgument(
                "experiment.orders is required with a random system".into(),
            ));
        }
        self.wnsf_options.validate(e.n_samples)
    }

    /// Orders to estimate.
    pub fn orders(&self) -> Option<ModelOrders> {
        self.experiment
            .orders
            .or_else(|| self.system.as_ref().map(BjModel::orders))
    }

    /// True system used with `seed`.
    pub fn system_for_seed(&self, seed: u64) -> Result<BjModel> {
        match (&self.system, &self.random_system) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(spec)) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(SYSTEM_STREAM);
                Ok(random_system(&mut rng, spec))
            }
            (None, None) => Err(Error::InvalidArgument("no system given".into())),
        }
    }

    /// Simulation setup for `seed`.
    pub fn loop_config(&self, seed: u64) -> Result<LoopConfig> {
        let system = self.system_for_seed(seed)?;
        let controller = self.controller.resolve(&system)?;
        let mut cfg = LoopConfig::new(system, controller, self.experiment.loop_kind, self.experiment.n_samples, seed);
        cfg.reference_filter = self.reference.filter.clone();
        cfg.reference_gain = self.reference.gain;
        cfg.noise_std = self.noise.std;
        cfg.snr_target = self.noise.snr_target;
        Ok(cfg)
    }
}
