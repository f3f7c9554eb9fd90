//! Pass/fail acceptance criteria. The `acceptance` test target and the
//! `verify` command both run these.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use crate::fock_optics::{
    apply_detector_config_with, born_distribution, hardy_state, BiphotonState, DetectorConfig,
    Mode, ModeLabel, SplitterConvention, Side,
};
use crate::harness::{binomial_bound, run_batch, run_batch_with_threads, ScenarioSpec};
use crate::predictions::{conditional, marginal, Detector};
use crate::signal_protocol::{IdentityMode, LeaderRule, PairingRule, Strategy};

/// Amplitude and probability equality tolerance.
pub const EXACT_TOL: f64 = 1e-12;
pub const STATE_RUNTIME_LIMIT: Duration = Duration::from_millis(1);
pub const FIDELITY_RUNTIME_LIMIT: Duration = Duration::from_secs(10);
pub const FIDELITY_TVD_LIMIT: f64 = 0.005;
pub const LARGE_BATCH: u64 = 1_000_000;
pub const DOUBLE_PAIR_BATCH: u64 = 100_000;
pub const DEADLOCK_BATCH: u64 = 10_000;
pub const DETERMINISM_BATCH: u64 = 100_000;
pub const DETERMINISM_THREADS: usize = 4;
/// Fixed seed shared by every Monte Carlo criterion.
pub const ACCEPTANCE_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        CriterionResult {
            id,
            name,
            passed,
            detail,
        }
    }

    fn failed(id: u8, name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(id, name, false, format!("error: {err}"))
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2}. {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn b(l: ModeLabel) -> Mode {
    Mode::Branch(l)
}

/// Published coefficient sets for the four final states.
pub fn reference_state(config: DetectorConfig) -> BiphotonState {
    use ModeLabel::*;
    let i = c(0.0, 1.0);
    let k3 = 1.0 / 3f64.sqrt();
    let i6 = c(0.0, 1.0 / 6f64.sqrt());
    let i12 = c(0.0, 1.0 / 12f64.sqrt());
    let terms = match (config.r_plus_intercepted, config.r_minus_intercepted) {
        (true, true) => vec![
            (b(VPlus), b(VMinus), c(k3, 0.0)),
            (b(UPlus), b(VMinus), c(0.0, k3)),
            (b(VPlus), b(UMinus), c(0.0, k3)),
        ],
        (false, true) => vec![
            (b(CPlus), b(VMinus), i6 * 2.0),
            (b(CPlus), b(UMinus), i6 * i),
            (b(DPlus), b(UMinus), i6),
        ],
        (true, false) => vec![
            (b(VPlus), b(CMinus), i6 * 2.0),
            (b(UPlus), b(CMinus), i6 * i),
            (b(UPlus), b(DMinus), i6),
        ],
        (false, false) => vec![
            (b(CPlus), b(DMinus), i12),
            (b(CPlus), b(CMinus), i12 * 3.0 * i),
            (b(DPlus), b(CMinus), i12),
            (b(DPlus), b(DMinus), i12 * i),
        ],
    };
    BiphotonState::from_terms(terms)
}

pub fn state_reproduction() -> CriterionResult {
    const NAME: &str = "state reproduction (|H> from the sources)";
    let mut timings = Vec::new();
    let mut last = None;
    for _ in 0..5 {
        let start = Instant::now();
        let out = hardy_state();
        timings.push(start.elapsed());
        last = Some(out);
    }
    timings.sort();
    let median = timings[timings.len() / 2];
    let (h, _) = match last.expect("ran") {
        Ok(v) => v,
        Err(e) => return CriterionResult::failed(1, NAME, e),
    };
    let err = h.max_error_up_to_phase(&reference_state(DetectorConfig::H));
    let ratios_ok = h.len() == 3;
    CriterionResult::new(
        1,
        NAME,
        ratios_ok && err < EXACT_TOL && median < STATE_RUNTIME_LIMIT,
        format!("max amplitude error {err:.3e}, {} terms, runtime {median:?}", h.len()),
    )
}

pub fn final_state_reproduction(convention: SplitterConvention) -> CriterionResult {
    const NAME: &str = "final states for the three splitter settings";
    let h = match hardy_state() {
        Ok((h, _)) => h,
        Err(e) => return CriterionResult::failed(2, NAME, e),
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for config in [DetectorConfig::E1, DetectorConfig::E2, DetectorConfig::E3] {
        let err = match apply_detector_config_with(&h, config, convention) {
            Ok(s) => s.max_error_up_to_phase(&reference_state(config)),
            Err(e) => return CriterionResult::failed(2, NAME, e),
        };
        worst = worst.max(err);
        parts.push(format!("{} {err:.3e}", config.selector()));
    }
    CriterionResult::new(2, NAME, worst < EXACT_TOL, parts.join(", "))
}

pub fn e3_marginal_and_conditionals() -> CriterionResult {
    const NAME: &str = "E3 marginal and conditionals";
    let run = || -> crate::Result<(bool, String)> {
        let (h, _) = hardy_state()?;
        let e3 = born_distribution(&apply_detector_config_with(
            &h,
            DetectorConfig::E3,
            SplitterConvention::Standard,
        )?)?;
        let red = marginal(&e3, Side::RPlus);
        let given_c = conditional(&e3, Detector::CPlus)?;
        let given_d = conditional(&e3, Detector::DPlus)?;
        let checks = [
            (red[&Detector::CPlus], 5.0 / 6.0),
            (red[&Detector::DPlus], 1.0 / 6.0),
            (given_c[&Detector::CMinus], 0.9),
            (given_c[&Detector::DMinus], 0.1),
            (given_d[&Detector::CMinus], 0.5),
            (given_d[&Detector::DMinus], 0.5),
        ];
        let worst = checks.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((
            worst < EXACT_TOL,
            format!(
                "P(C+)={:.12} P(C-|C+)={:.12} P(C-|D+)={:.12}, max error {worst:.3e}",
                red[&Detector::CPlus],
                given_c[&Detector::CMinus],
                given_d[&Detector::CMinus]
            ),
        ))
    };
    match run() {
        Ok((ok, detail)) => CriterionResult::new(3, NAME, ok, detail),
        Err(e) => CriterionResult::failed(3, NAME, e),
    }
}

pub fn certainty_correlations() -> CriterionResult {
    const NAME: &str = "certainty correlations";
    let run = || -> crate::Result<(f64, f64)> {
        let (h, _) = hardy_state()?;
        let dist = |config| {
            born_distribution(&apply_detector_config_with(&h, config, SplitterConvention::Standard)?)
        };
        Ok((
            dist(DetectorConfig::E1)?.probability(Detector::DPlus, Detector::VMinus),
            dist(DetectorConfig::E2)?.probability(Detector::VPlus, Detector::DMinus),
        ))
    };
    match run() {
        Ok((p1, p2)) => CriterionResult::new(
            4,
            NAME,
            p1 < EXACT_TOL && p2 < EXACT_TOL,
            format!("P(D+,V-) in E1 = {p1:.3e}, P(V+,D-) in E2 = {p2:.3e}"),
        ),
        Err(e) => CriterionResult::failed(4, NAME, e),
    }
}

pub fn postselection_probability() -> CriterionResult {
    const NAME: &str = "no-G post-selection probability";
    match hardy_state() {
        Ok((_, p)) => CriterionResult::new(
            5,
            NAME,
            (p - 0.25).abs() < EXACT_TOL,
            format!("{p:.15} (expected 1/4)"),
        ),
        Err(e) => CriterionResult::failed(5, NAME, e),
    }
}

pub fn protocol_fidelity() -> CriterionResult {
    const NAME: &str = "Version 2 fidelity without identities (E1)";
    let spec = ScenarioSpec::single_config(DetectorConfig::E1, Strategy::default())
        .with_trials(LARGE_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    let start = Instant::now();
    let r = match run_batch(&spec) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(6, NAME, e),
    };
    let elapsed = start.elapsed();
    CriterionResult::new(
        6,
        NAME,
        r.tvd_vs_quantum < FIDELITY_TVD_LIMIT && elapsed < FIDELITY_RUNTIME_LIMIT,
        format!(
            "TVD {:.6} over {} trials (limit {FIDELITY_TVD_LIMIT}), runtime {elapsed:.2?}",
            r.tvd_vs_quantum, r.trials
        ),
    )
}

pub fn clash_rate() -> CriterionResult {
    const NAME: &str = "identity clash rate, yellow leader";
    let spec = ScenarioSpec::identity_clash(LeaderRule::FixedYellow)
        .with_trials(LARGE_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    let r = match run_batch(&spec) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(7, NAME, e),
    };
    let target = 1.0 / 9.0;
    let bound = binomial_bound(target, r.trials);
    let oracle = r.oracle_expectations.as_ref().map_or(f64::NAN, |o| o.clash_rate);
    let deviation = (r.clash_rate - target).abs();
    CriterionResult::new(
        7,
        NAME,
        deviation <= bound && (oracle - target).abs() < EXACT_TOL,
        format!(
            "empirical {:.6}, oracle {oracle:.12}, target 1/9, |dev| {deviation:.2e} <= 3 sigma {bound:.2e}",
            r.clash_rate
        ),
    )
}

pub fn double_leader_deviation() -> CriterionResult {
    const NAME: &str = "Version 1 double-leader deviation on E3";
    let spec = ScenarioSpec::deadlock_v1(DetectorConfig::E3)
        .with_trials(LARGE_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    let r = match run_batch(&spec) {
        Ok(r) => r,
        Err(e) => return CriterionResult::failed(8, NAME, e),
    };
    let pair = &r.pairs[0];
    let oracle_tvd = pair.oracle_tvd_vs_quantum.unwrap_or(f64::NAN);
    let product: BTreeMap<(Detector, Detector), f64> = BTreeMap::from([
        ((Detector::CPlus, Detector::CMinus), 25.0 / 36.0),
        ((Detector::CPlus, Detector::DMinus), 5.0 / 36.0),
        ((Detector::DPlus, Detector::CMinus), 5.0 / 36.0),
        ((Detector::DPlus, Detector::DMinus), 1.0 / 36.0),
    ]);
    let mut cells_ok = true;
    let mut oracle_ok = true;
    for row in &pair.outcomes {
        let expected = product.get(&(row.red, row.yellow)).copied().unwrap_or(0.0);
        oracle_ok &= row.oracle.is_some_and(|o| (o - expected).abs() < EXACT_TOL);
        cells_ok &= (row.empirical - expected).abs() <= binomial_bound(expected, r.trials);
    }
    CriterionResult::new(
        8,
        NAME,
        (oracle_tvd - 1.0 / 9.0).abs() < EXACT_TOL && oracle_ok && cells_ok,
        format!(
            "enumerated TVD {oracle_tvd:.12} (1/9), empirical TVD {:.6}, product cells within 3 sigma: {cells_ok}",
            pair.tvd_vs_quantum
        ),
    )
}

pub fn deadlock_detection() -> CriterionResult {
    const NAME: &str = "Version 1 deadlock detection";
    let mut parts = Vec::new();
    let mut ok = true;
    for config in [DetectorConfig::E3, DetectorConfig::H] {
        let spec = ScenarioSpec::deadlock_v1(config)
            .with_trials(DEADLOCK_BATCH)
            .with_seed(ACCEPTANCE_SEED);
        match run_batch(&spec) {
            Ok(r) => {
                ok &= r.deadlock_rate == 1.0;
                parts.push(format!("{}: deadlock in {:.0}% of {} trials", config.selector(), 100.0 * r.deadlock_rate, r.trials));
            }
            Err(e) => return CriterionResult::failed(9, NAME, e),
        }
    }
    CriterionResult::new(9, NAME, ok, parts.join("; "))
}

pub fn double_pair() -> CriterionResult {
    const NAME: &str = "double-pair identity requirement";
    let tagged = ScenarioSpec::double_pair(IdentityMode::PerPair, PairingRule::ByIdentity)
        .with_trials(DOUBLE_PAIR_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    let untagged = ScenarioSpec::double_pair(IdentityMode::None, PairingRule::Random)
        .with_trials(DOUBLE_PAIR_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    let (t, u) = match (run_batch(&tagged), run_batch(&untagged)) {
        (Ok(t), Ok(u)) => (t, u),
        (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(10, NAME, e),
    };
    let oracle = u.oracle_expectations.as_ref().map_or(f64::NAN, |o| o.ambiguity_rate);
    let bound = binomial_bound(oracle, u.trials);
    let ok = t.forbidden_coincidence_rate == 0.0
        && u.ambiguity_rate > 0.0
        && oracle > 0.0
        && (u.ambiguity_rate - oracle).abs() <= bound;
    CriterionResult::new(
        10,
        NAME,
        ok,
        format!(
            "by_identity forbidden rate {}; random ambiguity {:.6} vs oracle {oracle:.6} (3 sigma {bound:.2e})",
            t.forbidden_coincidence_rate, u.ambiguity_rate
        ),
    )
}

/// Compares JSON reports of two specs run on 1 and `threads` workers.
pub fn determinism_between(a: &ScenarioSpec, b: &ScenarioSpec, threads: usize) -> CriterionResult {
    const NAME: &str = "determinism across thread counts";
    let (ra, rb) = match (run_batch_with_threads(a, 1), run_batch_with_threads(b, threads)) {
        (Ok(ra), Ok(rb)) => (ra, rb),
        (Err(e), _) | (_, Err(e)) => return CriterionResult::failed(11, NAME, e),
    };
    let (ja, jb) = (ra.to_json(), rb.to_json());
    CriterionResult::new(
        11,
        NAME,
        ja == jb,
        format!("1 vs {threads} threads: {} bytes, identical: {}", ja.len(), ja == jb),
    )
}

pub fn determinism() -> CriterionResult {
    let spec = ScenarioSpec::double_pair(IdentityMode::None, PairingRule::Random)
        .with_trials(DETERMINISM_BATCH)
        .with_seed(ACCEPTANCE_SEED);
    determinism_between(&spec, &spec, DETERMINISM_THREADS)
}

pub fn run_all() -> Vec<CriterionResult> {
    vec![
        state_reproduction(),
        final_state_reproduction(SplitterConvention::Standard),
        e3_marginal_and_conditionals(),
        certainty_correlations(),
        postselection_probability(),
        protocol_fidelity(),
        clash_rate(),
        double_leader_deviation(),
        deadlock_detection(),
        double_pair(),
        determinism(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictions::ZERO_THRESHOLD;

    #[test]
    fn reference_states_are_normalized() {
        for config in [DetectorConfig::E1, DetectorConfig::E2, DetectorConfig::E3, DetectorConfig::H] {
            let s = reference_state(config);
            assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
            let dist = born_distribution(&s).unwrap();
            assert!(dist.iter().all(|(_, p)| (0.0..=1.0 + ZERO_THRESHOLD).contains(&p)));
        }
    }

    #[test]
    fn wrong_splitter_wiring_fails_final_states() {
        assert!(!final_state_reproduction(SplitterConvention::Swapped).passed);
    }

    #[test]
    fn reseeded_run_fails_determinism() {
        let a = ScenarioSpec::double_pair(IdentityMode::None, PairingRule::Random).with_trials(2_000);
        let b = a.clone().with_seed(a.seed + 1);
        assert!(!determinism_between(&a, &b, 2).passed);
        assert!(determinism_between(&a, &a, 3).passed);
    }
}
