//! Accuracy metrics and the seeded Monte Carlo runner.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lti::RationalFilter;
use crate::model::{BjModel, ModelOrders};
use crate::simulate::simulate;
use crate::wnsf::{wnsf_identify, ThetaEstimate};

pub const IMPULSE_BLOCK: usize = 64;
pub const IMPULSE_CAP: usize = 8192;
pub const TAIL_ENERGY_RATIO: f64 = 1e-12;

/// `100 (1 - ||g - g_hat|| / ||g - mean(g)||)`; the shorter sequence is
/// zero padded.
pub fn fit_metric(g_true: &[f64], g_est: &[f64]) -> Result<f64> {
    let len = g_true.len().max(g_est.len());
    if g_true.is_empty() {
        return Err(Error::ConstantResponse);
    }
    let at = |g: &[f64], k: usize| g.get(k).copied().unwrap_or(0.0);
    let mean = g_true.iter().sum::<f64>() / len as f64;
    let mut err = 0.0;
    let mut spread = 0.0;
    for k in 0..len {
        err += (at(g_true, k) - at(g_est, k)).powi(2);
        spread += (at(g_true, k) - mean).powi(2);
    }
    if spread == 0.0 {
        return Err(Error::ConstantResponse);
    }
    Ok(100.0 * (1.0 - (err / spread).sqrt()))
}

/// Impulse-response length, in blocks of 64, reached when the next block
/// carries less than `1e-12` of the energy so far; capped at 8192.
pub fn impulse_length(filter: &RationalFilter) -> usize {
    let g = filter.impulse_response(IMPULSE_CAP);
    let mut total = 0.0;
    for (b, block) in g.chunks(IMPULSE_BLOCK).enumerate() {
        let energy: f64 = block.iter().map(|v| v * v).sum();
        total += energy;
        if total > 0.0 && energy < TAIL_ENERGY_RATIO * total {
            return b * IMPULSE_BLOCK;
        }
    }
    IMPULSE_CAP
}

/// FIT between the plants of two models over impulse responses long enough
/// for both to have decayed.
pub fn model_fit(truth: &RationalFilter, estimate: &RationalFilter) -> Result<f64> {
    let len = impulse_length(truth).max(impulse_length(estimate));
    fit_metric(&truth.impulse_response(len), &estimate.impulse_response(len))
}

/// `||theta_hat - theta_o||^2`, over the plant parameters only when
/// `dyn_only` is set.
pub fn mse_metric(theta_hat: &[f64], theta_o: &[f64], orders: ModelOrders, dyn_only: bool) -> Result<f64> {
    if theta_hat.len() != theta_o.len() {
        return Err(Error::LengthMismatch(theta_hat.len(), theta_o.len()));
    }
    if theta_hat.len() != orders.total() {
        return Err(Error::LengthMismatch(theta_hat.len(), orders.total()));
    }
    let k = if dyn_only { orders.dynamic() } else { orders.total() };
    Ok(theta_hat[..k]
        .iter()
        .zip(&theta_o[..k])
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

/// Outcome of one successful run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub theta_hat: Vec<f64>,
    pub fit: f64,
    /// Absent when the estimated and true parameter vectors differ in size.
    pub mse: Option<f64>,
    pub n_used: usize,
    pub iterations: usize,
    pub pem_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: Option<RunOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// `None` for empty input.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config_fingerprint: String,
    pub base_seed: u64,
    /// How run seeds are derived; recorded for audit.
    pub seed_rule: String,
    pub runs: usize,
    pub failures: usize,
    pub fit: Option<Summary>,
    pub mse: Option<Summary>,
    pub records: Vec<RunRecord>,
}

impl McResult {
    pub fn fits(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.outcome.as_ref().map(|o| o.fit)).collect()
    }

    pub fn mses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| r.outcome.as_ref().and_then(|o| o.mse))
            .collect()
    }

    /// Per-run CSV `seed,n_used,iterations,pem_cost,fit,mse`; failed runs
    /// leave the metric fields empty.
    pub fn write_runs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "n_used", "iterations", "pem_cost", "fit", "mse"])?;
        for r in &self.records {
            let row = match &r.outcome {
                Some(o) => vec![
                    r.seed.to_string(),
                    o.n_used.to_string(),
                    o.iterations.to_string(),
                    format!("{:?}", o.pem_cost),
                    format!("{:?}", o.fit),
                    o.mse.map(|m| format!("{m:?}")).unwrap_or_default(),
                ],
                None => vec![r.seed.to_string(), String::new(), String::new(), String::new(), String::new(), String::new()],
            };
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One FIT per line under a `fit` header, in run order.
    pub fn write_fit_column<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "fit")?;
        for f in self.fits() {
            writeln!(out, "{f:?}")?;
        }
        Ok(())
    }

    /// Writes `runs.csv`, `fit.csv` and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_runs_csv(std::fs::File::create(dir.join("runs.csv"))?)?;
        self.write_fit_column(std::io::BufWriter::new(std::fs::File::create(dir.join("fit.csv"))?))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("summary.json"))?);
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}

/// SHA-256 of the compact JSON form of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Runs `run_one(seed)` for `seed = base_seed + k`, `k = 0..runs`, on at most
/// `parallelism` threads. Failures are kept per run; the result does not
/// depend on scheduling.
pub fn run_monte_carlo_with<F>(
    base_seed: u64,
    runs: usize,
    parallelism: usize,
    fingerprint: String,
    run_one: F,
) -> Result<McResult>
where
    F: Fn(u64) -> Result<RunOutcome> + Sync,
{
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        (0..runs)
            .into_par_iter()
            .map(|run| {
                let seed = base_seed.wrapping_add(run as u64);
                match run_one(seed) {
                    Ok(o) => RunRecord {
                        run,
                        seed,
                        outcome: Some(o),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("run {run} (seed {seed}) failed: {e}");
                        RunRecord {
                            run,
                            seed,
                            outcome: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    let failures = records.iter().filter(|r| r.outcome.is_none()).count();
    let mut result = McResult {
        config_fingerprint: fingerprint,
        base_seed,
        seed_rule: "seed = base_seed + run".into(),
        runs,
        failures,
        fit: None,
        mse: None,
        records,
    };
    result.fit = Summary::of(&result.fits());
    result.mse = Summary::of(&result.mses());
    Ok(result)
}

/// Scores an estimate against the true system.
pub fn score(estimate: &ThetaEstimate, truth: &BjModel, dyn_only: bool) -> Result<RunOutcome> {
    let model = estimate.model()?;
    let fit = model_fit(&truth.plant(), &model.plant())?;
    let theta_o = truth.theta();
    let (t, e) = (truth.orders(), estimate.orders);
    let mse = if dyn_only && (t.m_f, t.m_l) == (e.m_f, e.m_l) {
        let k = t.dynamic();
        Some(mse_metric(&estimate.theta[..k], &theta_o.as_slice()[..k], ModelOrders::new(t.m_f, t.m_l, 0, 0), true)?)
    } else if !dyn_only && t == e {
        Some(mse_metric(&estimate.theta, theta_o.as_slice(), t, false)?)
    } else {
        None
    };
    Ok(RunOutcome {
        theta_hat: estimate.theta.clone(),
        fit,
        mse,
        n_used: estimate.n_used,
        iterations: estimate.iterations,
        pem_cost: estimate.pem_cost,
    })
}

/// One run of an experiment: simulate with `seed`, identify, score.
pub fn run_once(cfg: &ExperimentConfig, seed: u64) -> Result<(ThetaEstimate, RunOutcome)> {
    let lc = cfg.loop_config(seed)?;
    let data = simulate(&lc)?;
    let orders = cfg
        .orders()
        .ok_or_else(|| Error::InvalidArgument("model orders are not set".into()))?;
    let est = wnsf_identify(&data, orders, &cfg.wnsf_options)?;
    let outcome = score(&est, &lc.system, cfg.experiment.mse_dyn_only)?;
    Ok((est, outcome))
}

/// Monte Carlo campaign over `runs` seeds starting at the configured seed.
pub fn run_monte_carlo(cfg: &ExperimentConfig, runs: usize, parallelism: usize) -> Result<McResult> {
    cfg.validate()?;
    run_monte_carlo_with(cfg.experiment.seed, runs, parallelism, fingerprint(cfg)?, |seed| {
        run_once(cfg, seed).map(|(_, o)| o)
    })
}
