//! Scenario definitions and the Monte Carlo batch runner.
//!
//! Trial `i` of a batch draws from a ChaCha8 stream keyed by the batch seed
//! with stream number `i`, so results do not depend on how trials are spread
//! across worker threads. Aggregation only adds integer counters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_optics::DetectorConfig;
use crate::predictions::{enumerate_protocol_statistics, Detector, OutcomeDistribution, ProtocolExpectations, ZERO_THRESHOLD};
use crate::signal_protocol::{
    generate_pair, run_simultaneous, run_version1, run_version2, Chooser, Color, ConfigTables,
    EventKind, IdentityMode, LeaderRule, PairingRule, Party, RngChooser, Strategy, Transcript,
    Version,
};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 1729;
pub const DEFAULT_TRIALS: u64 = 100_000;

/// Width of the binomial acceptance band, in standard deviations.
pub const SIGMA_BAND: f64 = 3.0;

pub const ARRIVAL_TIE_BREAK: &str = "messages with equal event-times are ordered by \
(sender region, identity tag, emission order); followers by (region, identity tag, pair index)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SingleConfig,
    DoublePair,
    #[serde(rename = "clash_s7", alias = "identity_clash")]
    IdentityClash,
    #[serde(rename = "deadlock_v1")]
    DeadlockV1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub configs: Vec<DetectorConfig>,
    pub strategy: Strategy,
    pub trials: u64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn single_config(config: DetectorConfig, strategy: Strategy) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::SingleConfig,
            configs: vec![config],
            strategy,
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
        }
    }

    /// U+ and V+ in place, U- and V- removed, per-pair identities.
    pub fn identity_clash(leader_rule: LeaderRule) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::IdentityClash,
            configs: vec![DetectorConfig::E2],
            strategy: Strategy {
                version: Version::V2,
                leader_rule,
                identity_mode: IdentityMode::PerPair,
                pairing_rule: PairingRule::ByIdentity,
            },
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
        }
    }

    pub fn deadlock_v1(config: DetectorConfig) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::DeadlockV1,
            configs: vec![config],
            strategy: Strategy {
                version: Version::V1,
                ..Strategy::default()
            },
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
        }
    }

    /// Early pair through both splitters, later pair into the mobile
    /// detectors, measured at the same instant.
    pub fn double_pair(identity_mode: IdentityMode, pairing_rule: PairingRule) -> Self {
        ScenarioSpec {
            kind: ScenarioKind::DoublePair,
            configs: vec![DetectorConfig::E3, DetectorConfig::H],
            strategy: Strategy {
                version: Version::V2,
                leader_rule: LeaderRule::FixedYellow,
                identity_mode,
                pairing_rule,
            },
            trials: DEFAULT_TRIALS,
            seed: DEFAULT_SEED,
        }
    }

    pub fn with_trials(mut self, trials: u64) -> Self {
        self.trials = trials;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn expects_deadlock(&self) -> bool {
        self.kind == ScenarioKind::DeadlockV1
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::ZeroTrials);
        }
        self.strategy.validate()?;
        let bad = |msg: &str| Err(Error::InvalidScenario(msg.to_string()));
        match self.kind {
            ScenarioKind::DoublePair => {
                if self.configs != [DetectorConfig::E3, DetectorConfig::H] {
                    return bad("double_pair needs configs [e3, h]: early pair through both splitters, later pair intercepted");
                }
                if self.strategy.version != Version::V2 {
                    return bad("double_pair runs the Version 2 protocol");
                }
            }
            ScenarioKind::IdentityClash => {
                if self.configs.len() != 1 {
                    return bad("clash_s7 takes exactly one config");
                }
                if self.strategy.identity_mode == IdentityMode::None {
                    return bad("clash_s7 needs pair identities");
                }
            }
            ScenarioKind::DeadlockV1 => {
                if self.configs.len() != 1 {
                    return bad("deadlock_v1 takes exactly one config");
                }
                let c = self.configs[0];
                if self.strategy.version != Version::V1 || c.r_plus_intercepted != c.r_minus_intercepted {
                    return bad("deadlock_v1 runs Version 1 with both or neither side intercepted");
                }
            }
            ScenarioKind::SingleConfig => {
                if self.configs.len() != 1 {
                    return bad("single_config takes exactly one config");
                }
            }
        }
        Ok(())
    }
}

pub fn scenario_tables(spec: &ScenarioSpec) -> Result<Vec<ConfigTables>> {
    spec.validate()?;
    spec.configs.iter().map(|&c| ConfigTables::new(c)).collect()
}

/// One protocol trial of the scenario.
pub fn run_trial(spec: &ScenarioSpec, tables: &[ConfigTables], chooser: &mut dyn Chooser) -> Result<Transcript> {
    let mut counter = 1;
    let mode = spec.strategy.identity_mode;
    match spec.kind {
        ScenarioKind::DoublePair => {
            let early = generate_pair(0, mode, &mut counter, chooser);
            let later = generate_pair(1, mode, &mut counter, chooser);
            run_simultaneous(
                &[(&tables[0], early), (&tables[1], later)],
                Color::Yellow,
                spec.strategy.pairing_rule,
                chooser,
            )
        }
        _ => {
            let birth = generate_pair(0, mode, &mut counter, chooser);
            match spec.strategy.version {
                Version::V1 => Ok(run_version1(&tables[0], birth, chooser)),
                Version::V2 => run_version2(&tables[0], &spec.strategy, birth, chooser),
            }
        }
    }
}

/// What the harness reads off one transcript.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialSummary {
    /// Joint (red, yellow) outcome of each pair slot.
    pub outcomes: Vec<Option<(Detector, Detector)>>,
    /// A leader's choice was unavailable to the pair's identity.
    pub clash: bool,
    /// A follower's response was unavailable to the pair's identity.
    pub follower_clash: bool,
    pub ambiguity: bool,
    pub deadlock: bool,
    /// Some pair ended in a coincidence its own quantum table forbids.
    pub forbidden: bool,
}

impl TrialSummary {
    pub fn from_transcript(transcript: &Transcript, tables: &[ConfigTables]) -> Self {
        let mut sides: Vec<(Option<Detector>, Option<Detector>)> = vec![(None, None); tables.len()];
        let mut s = TrialSummary::default();
        for e in transcript.events() {
            match e.kind {
                EventKind::LeaderChoice { pair, detector, .. }
                | EventKind::FollowerChoice { pair, detector, .. } => {
                    let slot = &mut sides[pair];
                    match detector.side() {
                        Some(crate::fock_optics::Side::RPlus) => slot.0 = Some(detector),
                        _ => slot.1 = Some(detector),
                    }
                }
                EventKind::Clash { party: Party::Leader, .. } => s.clash = true,
                EventKind::Clash { party: Party::Follower, .. } => s.follower_clash = true,
                EventKind::Ambiguity { .. } => s.ambiguity = true,
                EventKind::Deadlock { .. } => s.deadlock = true,
                _ => {}
            }
        }
        s.outcomes = sides
            .into_iter()
            .map(|(r, y)| r.zip(y))
            .collect();
        s.forbidden = s
            .outcomes
            .iter()
            .zip(tables)
            .any(|(o, t)| o.is_some_and(|(r, y)| t.joint.probability(r, y) < ZERO_THRESHOLD));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BatchCounts {
    trials: u64,
    outcomes: Vec<BTreeMap<(Detector, Detector), u64>>,
    clash: u64,
    follower_clash: u64,
    ambiguity: u64,
    deadlock: u64,
    forbidden: u64,
}

impl BatchCounts {
    fn new(slots: usize) -> Self {
        BatchCounts {
            trials: 0,
            outcomes: vec![BTreeMap::new(); slots],
            clash: 0,
            follower_clash: 0,
            ambiguity: 0,
            deadlock: 0,
            forbidden: 0,
        }
    }

    fn add(mut self, s: &TrialSummary) -> Self {
        self.trials += 1;
        for (slot, o) in s.outcomes.iter().enumerate() {
            if let Some(key) = o {
                *self.outcomes[slot].entry(*key).or_insert(0) += 1;
            }
        }
        self.clash += u64::from(s.clash);
        self.follower_clash += u64::from(s.follower_clash);
        self.ambiguity += u64::from(s.ambiguity);
        self.deadlock += u64::from(s.deadlock);
        self.forbidden += u64::from(s.forbidden);
        self
    }

    fn merge(mut self, other: BatchCounts) -> Self {
        self.trials += other.trials;
        for (mine, theirs) in self.outcomes.iter_mut().zip(other.outcomes) {
            for (k, n) in theirs {
                *mine.entry(k).or_insert(0) += n;
            }
        }
        self.clash += other.clash;
        self.follower_clash += other.follower_clash;
        self.ambiguity += other.ambiguity;
        self.deadlock += other.deadlock;
        self.forbidden += other.forbidden;
        self
    }
}

/// Half the L1 distance, over the union of both supports.
pub fn total_variation_distance(p: &OutcomeDistribution, q: &OutcomeDistribution) -> f64 {
    let mut keys: Vec<(Detector, Detector)> = p.iter().map(|(k, _)| k).collect();
    keys.extend(q.iter().map(|(k, _)| k));
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|(r, y)| (p.probability(r, y) - q.probability(r, y)).abs())
        .sum::<f64>()
}

/// `SIGMA_BAND` binomial standard deviations of a rate `r` over `trials`.
pub fn binomial_bound(r: f64, trials: u64) -> f64 {
    SIGMA_BAND * (r * (1.0 - r) / trials as f64).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub red: Detector,
    pub yellow: Detector,
    pub count: u64,
    pub empirical: f64,
    pub quantum: f64,
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub config: DetectorConfig,
    pub outcomes: Vec<OutcomeRow>,
    pub tvd_vs_quantum: f64,
    pub oracle_tvd_vs_quantum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub name: String,
    pub empirical: f64,
    pub oracle: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub kind: ScenarioKind,
    pub strategy: Strategy,
    pub trials: u64,
    pub seed: u64,
    pub pairs: Vec<PairReport>,
    pub clash_rate: f64,
    pub follower_clash_rate: f64,
    pub ambiguity_rate: f64,
    pub deadlock_rate: f64,
    pub deadlock_flag: bool,
    pub forbidden_coincidence_rate: f64,
    /// Largest per-pair distance between empirical and quantum joints.
    pub tvd_vs_quantum: f64,
    pub oracle_expectations: Option<ProtocolExpectations>,
    pub rate_checks: Vec<RateCheck>,
    pub tie_break: Option<String>,
}

impl BatchResult {
    pub fn within_oracle_bounds(&self) -> bool {
        self.rate_checks.iter().all(|c| c.passed)
    }

    /// Rates in report order, as (name, value).
    pub fn rates(&self) -> [(&'static str, f64); 5] {
        [
            ("clash_rate", self.clash_rate),
            ("follower_clash_rate", self.follower_clash_rate),
            ("ambiguity_rate", self.ambiguity_rate),
            ("deadlock_rate", self.deadlock_rate),
            ("forbidden_coincidence_rate", self.forbidden_coincidence_rate),
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn run_counts(spec: &ScenarioSpec, tables: &[ConfigTables]) -> Result<BatchCounts> {
    (0..spec.trials)
        .into_par_iter()
        .try_fold(
            || BatchCounts::new(tables.len()),
            |acc, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(i);
                let transcript = run_trial(spec, tables, &mut RngChooser(rng))?;
                Ok(acc.add(&TrialSummary::from_transcript(&transcript, tables)))
            },
        )
        .try_reduce(|| BatchCounts::new(tables.len()), |a, b| Ok(a.merge(b)))
}

pub fn run_batch(spec: &ScenarioSpec) -> Result<BatchResult> {
    let tables = scenario_tables(spec)?;
    let counts = run_counts(spec, &tables)?;
    assemble(spec, &tables, counts)
}

/// Same as [`run_batch`], on a dedicated pool of `threads` workers.
pub fn run_batch_with_threads(spec: &ScenarioSpec, threads: usize) -> Result<BatchResult> {
    let tables = scenario_tables(spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    let counts = pool.install(|| run_counts(spec, &tables))?;
    assemble(spec, &tables, counts)
}

/// The double-pair scenario of simultaneous clicks from two pairs.
pub fn run_double_pair(spec: &ScenarioSpec) -> Result<BatchResult> {
    if spec.kind != ScenarioKind::DoublePair {
        return Err(Error::InvalidScenario("run_double_pair needs a double_pair spec".into()));
    }
    run_batch(spec)
}

fn assemble(spec: &ScenarioSpec, tables: &[ConfigTables], counts: BatchCounts) -> Result<BatchResult> {
    let oracle = match enumerate_protocol_statistics(spec) {
        Ok(o) => Some(o),
        Err(Error::EnumerationTooLarge(_)) => None,
        Err(e) => return Err(e),
    };
    let n = counts.trials as f64;

    let mut pairs = Vec::with_capacity(tables.len());
    let mut worst_tvd: f64 = 0.0;
    for (slot, (table, observed)) in tables.iter().zip(&counts.outcomes).enumerate() {
        let oracle_joint = oracle.as_ref().map(|o| &o.joint[slot]);
        let mut keys: Vec<(Detector, Detector)> = table.joint.iter().map(|(k, _)| k).collect();
        keys.extend(observed.keys().copied());
        if let Some(j) = oracle_joint {
            keys.extend(j.iter().map(|(k, _)| k));
        }
        keys.sort();
        keys.dedup();
        let outcomes = keys
            .into_iter()
            .map(|(red, yellow)| {
                let count = observed.get(&(red, yellow)).copied().unwrap_or(0);
                OutcomeRow {
                    red,
                    yellow,
                    count,
                    empirical: count as f64 / n,
                    quantum: table.joint.probability(red, yellow),
                    oracle: oracle_joint.map(|j| j.probability(red, yellow)),
                }
            })
            .collect();
        let empirical = OutcomeDistribution::from_counts(observed)?;
        let tvd = total_variation_distance(&table.joint, &empirical);
        worst_tvd = worst_tvd.max(tvd);
        pairs.push(PairReport {
            config: table.config,
            outcomes,
            tvd_vs_quantum: tvd,
            oracle_tvd_vs_quantum: oracle_joint.map(|j| total_variation_distance(&table.joint, j)),
        });
    }

    let mut result = BatchResult {
        kind: spec.kind,
        strategy: spec.strategy,
        trials: counts.trials,
        seed: spec.seed,
        pairs,
        clash_rate: counts.clash as f64 / n,
        follower_clash_rate: counts.follower_clash as f64 / n,
        ambiguity_rate: counts.ambiguity as f64 / n,
        deadlock_rate: counts.deadlock as f64 / n,
        deadlock_flag: counts.deadlock > 0,
        forbidden_coincidence_rate: counts.forbidden as f64 / n,
        tvd_vs_quantum: worst_tvd,
        oracle_expectations: None,
        rate_checks: Vec::new(),
        tie_break: (spec.strategy.pairing_rule == PairingRule::ArrivalOrder)
            .then(|| ARRIVAL_TIE_BREAK.to_string()),
    };
    if let Some(o) = &oracle {
        let expected = [
            o.clash_rate,
            o.follower_clash_rate,
            o.ambiguity_rate,
            o.deadlock_rate,
            o.forbidden_coincidence_rate,
        ];
        result.rate_checks = result
            .rates()
            .into_iter()
            .zip(expected)
            .map(|((name, empirical), oracle)| {
                let bound = binomial_bound(oracle, counts.trials);
                RateCheck {
                    name: name.to_string(),
                    empirical,
                    oracle,
                    bound,
                    passed: (empirical - oracle).abs() <= bound + ZERO_THRESHOLD,
                }
            })
            .collect();
    }
    result.oracle_expectations = oracle;
    Ok(result)
}
