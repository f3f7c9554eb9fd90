use std::collections::BTreeMap;

use hardy_signal::fock_optics::{
    apply_detector_config_with, apply_g_network, BiphotonState, Crystal, DetectorConfig, Mode,
    ModeLabel, Side, SplitterConvention,
};
use hardy_signal::harness::{run_batch, ScenarioSpec};
use hardy_signal::predictions::{conditional, marginal, Detector, OutcomeDistribution};
use hardy_signal::signal_protocol::{
    generate_pair, run_version2, ConfigTables, Grid, IdentityMode, PairingRule, RngChooser, Strategy as ProtocolStrategy, Transcript,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn amplitudes(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
        .prop_filter("non-zero", |v: &Vec<Complex64>| v.iter().map(|a| a.norm_sqr()).sum::<f64>() > 1e-3)
}

fn config() -> impl Strategy<Value = DetectorConfig> {
    prop::sample::select(vec![DetectorConfig::E1, DetectorConfig::E2, DetectorConfig::E3, DetectorConfig::H])
}

fn convention() -> impl Strategy<Value = SplitterConvention> {
    prop::sample::select(vec![SplitterConvention::Standard, SplitterConvention::Swapped])
}

proptest! {
    #[test]
    fn g_network_preserves_norm(amps in amplitudes(9)) {
        let terms = Crystal::ALL
            .iter()
            .flat_map(|&a| Crystal::ALL.iter().map(move |&b| (a, b)))
            .zip(amps)
            .map(|((a, b), amp)| (Mode::Source(a), Mode::Source(b), amp));
        let input = BiphotonState::from_terms(terms);
        let output = apply_g_network(&input).unwrap();
        prop_assert!((output.norm_sqr() - input.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn detector_settings_preserve_norm(amps in amplitudes(4), config in config(), conv in convention()) {
        let red = [ModeLabel::UPlus, ModeLabel::VPlus];
        let yellow = [ModeLabel::UMinus, ModeLabel::VMinus];
        let terms = red
            .iter()
            .flat_map(|&r| yellow.iter().map(move |&y| (r, y)))
            .zip(amps)
            .map(|((r, y), a)| (Mode::Branch(r), Mode::Branch(y), a));
        let input = BiphotonState::from_terms(terms);
        let output = apply_detector_config_with(&input, config, conv).unwrap();
        prop_assert!((output.norm_sqr() - input.norm_sqr()).abs() < 1e-12);
    }

    #[test]
    fn conditional_times_marginal_rebuilds_joint(weights in prop::collection::vec(0u32..20, 4)) {
        prop_assume!(weights.iter().sum::<u32>() > 0);
        let cells = [
            (Detector::CPlus, Detector::CMinus),
            (Detector::CPlus, Detector::DMinus),
            (Detector::DPlus, Detector::CMinus),
            (Detector::DPlus, Detector::DMinus),
        ];
        let counts: BTreeMap<_, u64> = cells.iter().copied().zip(weights.iter().map(|&w| w as u64)).collect();
        let joint = OutcomeDistribution::from_counts(&counts).unwrap();
        let red = marginal(&joint, Side::RPlus);
        for (&r, &pr) in &red {
            if pr == 0.0 {
                continue;
            }
            let cond = conditional(&joint, r).unwrap();
            for (&y, &py) in &cond {
                prop_assert!((pr * py - joint.probability(r, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_counts_cells_exactly(weights in prop::collection::vec(1u32..30, 1..4)) {
        let total: u32 = weights.iter().sum();
        let detectors = [Detector::CPlus, Detector::DPlus, Detector::UPlus, Detector::VPlus];
        let map: BTreeMap<_, f64> = detectors.iter().copied().zip(weights.iter().map(|&w| w as f64 / total as f64)).collect();
        let grid = Grid::from_weights(&map).unwrap();
        let mut hits: BTreeMap<Detector, u32> = BTreeMap::new();
        for n in 1..=grid.size() {
            *hits.entry(grid.pick(n).unwrap()).or_default() += 1;
        }
        for (d, p) in &map {
            let exact = hits[d] as f64 / grid.size() as f64;
            prop_assert!((exact - p).abs() < 1e-12);
        }
        prop_assert!(grid.pick(0).is_err());
        prop_assert!(grid.pick(grid.size() + 1).is_err());
    }

    #[test]
    fn same_seed_same_report(seed in any::<u64>()) {
        let spec = ScenarioSpec::double_pair(IdentityMode::None, PairingRule::Random)
            .with_trials(300)
            .with_seed(seed);
        prop_assert_eq!(run_batch(&spec).unwrap().to_json(), run_batch(&spec).unwrap().to_json());
    }

    #[test]
    fn transcript_jsonl_round_trips(seed in any::<u64>(), config in config()) {
        let tables = ConfigTables::new(config).unwrap();
        let strategy = ProtocolStrategy { identity_mode: IdentityMode::PerPair, pairing_rule: PairingRule::ByIdentity, ..ProtocolStrategy::default() };
        let mut chooser = RngChooser(ChaCha8Rng::seed_from_u64(seed));
        let mut counter = 0;
        let birth = generate_pair(0, strategy.identity_mode, &mut counter, &mut chooser);
        let transcript = run_version2(&tables, &strategy, birth, &mut chooser).unwrap();
        prop_assert!(transcript.check_conformance().is_ok());
        let back = Transcript::from_jsonl(&transcript.to_jsonl()).unwrap();
        prop_assert_eq!(back, transcript);
    }
}
