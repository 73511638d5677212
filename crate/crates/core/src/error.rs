use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polynomial must have at least one coefficient")]
    EmptyPolynomial,

    #[error("polynomial coefficient {index} is not finite")]
    NonFiniteCoefficient { index: usize },

    #[error("polynomial is not monic (leading coefficient {0})")]
    NotMonic(f64),

    #[error("filter has a pole on the unit circle at omega = {0}")]
    PoleOnUnitCircle(f64),

    #[error("{what} is unstable (largest root modulus {max_modulus})")]
    Unstable { what: &'static str, max_modulus: f64 },

    #[error("closed loop is unstable (largest sensitivity pole modulus {0})")]
    UnstableLoop(f64),

    #[error("simulation produced non-finite samples")]
    NonFiniteOutput,

    #[error("noise path has zero energy; cannot scale to a target SNR")]
    ZeroNoiseEnergy,

    #[error("ARX order {n} is too large for {samples} samples (need 2n < N)")]
    OrderTooLarge { n: usize, samples: usize },

    #[error("ARX order {n} is below the model order requirement {required}")]
    OrderTooSmall { n: usize, required: usize },

    #[error("regressor covariance is singular and regularization is disabled")]
    SingularCovariance,

    #[error("reduction matrix is rank deficient (reciprocal condition {rcond:e}); orders may be over-parametrized or not coprime")]
    RankDeficient { rcond: f64 },

    #[error("weighted normal matrix is singular")]
    SingularWeighting,

    #[error("no feasible candidate; per-order failures: {}", .0.join("; "))]
    NoFeasibleCandidate(Vec<String>),

    #[error("non-informative experiment: {0}")]
    NonInformative(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("true impulse response is constant; FIT is undefined")]
    ConstantResponse,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
