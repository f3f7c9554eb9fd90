use thiserror::Error;

use crate::fock_optics::Mode;
use crate::predictions::Detector;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("crystal index {0} is outside 1..=3")]
    InvalidCrystalIndex(u8),

    #[error("source states do not share vacuum/pair amplitudes and pump strength")]
    MismatchedSources,

    #[error("source states must cover crystals X1, X2 and X3 exactly once")]
    IncompleteSources,

    #[error("state contains mode {0} where a crystal source mode was expected")]
    NonCrystalMode(Mode),

    #[error("state contains mode {0}, which is not a pre-splitter branch on its side")]
    NotOnBranchModes(Mode),

    #[error("mode {0} has no detector")]
    NoDetector(Mode),

    #[error("state has zero norm")]
    ZeroNorm,

    #[error("post-selection retained nothing")]
    EmptyPostselection,

    #[error("state is not normalized (norm^2 = {0})")]
    NotNormalized(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("detector {0} does not appear in the distribution")]
    UnknownDetector(Detector),

    #[error("cannot condition on {0}: it has zero probability")]
    ZeroProbabilityCondition(Detector),

    #[error("weights are not expressible on an integer grid: {0}")]
    NotOnGrid(String),

    #[error("grid draw {draw} outside 1..={size}")]
    DrawOutOfRange { draw: u32, size: u32 },

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("a batch needs at least one trial")]
    ZeroTrials,

    #[error("pairing by identity needs identity tags on every message and follower")]
    MissingIdentity,

    #[error("randomness domain too large to enumerate (more than {0} leaves)")]
    EnumerationTooLarge(usize),
}
