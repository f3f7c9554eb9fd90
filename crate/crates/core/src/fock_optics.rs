//! Exact two-photon state engine for the three-crystal interferometer.
//!
//! States live in the one-pair sector: every term is a product of one red
//! photon mode and one yellow photon mode. The pipeline runs
//!
//! ```text
//! crystal sources -> |A> -> G-network -> post-selection (|H>) -> final splitters
//! ```
//!
//! All transforms are linear substitutions of single-photon modes, so they
//! act on red and yellow slots independently.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictions::{Detector, OutcomeDistribution};

/// Equality tolerance for amplitudes and norms.
pub const TOLERANCE: f64 = 1e-12;
/// Terms whose amplitude magnitude falls below this are dropped.
pub const PRUNE_THRESHOLD: f64 = 1e-15;

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Crystal {
    X1,
    X2,
    X3,
}

impl Crystal {
    pub const ALL: [Crystal; 3] = [Crystal::X1, Crystal::X2, Crystal::X3];

    pub fn from_index(n: u8) -> Result<Crystal> {
        match n {
            1 => Ok(Crystal::X1),
            2 => Ok(Crystal::X2),
            3 => Ok(Crystal::X3),
            other => Err(Error::InvalidCrystalIndex(other)),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Crystal::X1 => 1,
            Crystal::X2 => 2,
            Crystal::X3 => 3,
        }
    }
}

impl fmt::Display for Crystal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "X{}", self.index())
    }
}

/// Measurement region. Red photons end in R+, yellow photons in R-.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "R+")]
    RPlus,
    #[serde(rename = "R-")]
    RMinus,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::RPlus => Side::RMinus,
            Side::RMinus => Side::RPlus,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::RPlus => "R+",
            Side::RMinus => "R-",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    PreSplitter,
    GBranch,
    PostSplitter,
}

/// Named optical branches of the interferometer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModeLabel {
    VPlus,
    UPlus,
    VMinus,
    UMinus,
    G1,
    G2,
    G3,
    G4,
    CPlus,
    DPlus,
    CMinus,
    DMinus,
}

impl ModeLabel {
    pub const ALL: [ModeLabel; 12] = [
        ModeLabel::VPlus,
        ModeLabel::UPlus,
        ModeLabel::VMinus,
        ModeLabel::UMinus,
        ModeLabel::G1,
        ModeLabel::G2,
        ModeLabel::G3,
        ModeLabel::G4,
        ModeLabel::CPlus,
        ModeLabel::DPlus,
        ModeLabel::CMinus,
        ModeLabel::DMinus,
    ];

    /// Region of the branch. G-branches belong to neither region.
    pub fn side(self) -> Option<Side> {
        use ModeLabel::*;
        match self {
            VPlus | UPlus | CPlus | DPlus => Some(Side::RPlus),
            VMinus | UMinus | CMinus | DMinus => Some(Side::RMinus),
            G1 | G2 | G3 | G4 => None,
        }
    }

    pub fn stage(self) -> Stage {
        use ModeLabel::*;
        match self {
            VPlus | UPlus | VMinus | UMinus => Stage::PreSplitter,
            G1 | G2 | G3 | G4 => Stage::GBranch,
            CPlus | DPlus | CMinus | DMinus => Stage::PostSplitter,
        }
    }

    pub fn detector(self) -> Detector {
        use ModeLabel::*;
        match self {
            VPlus => Detector::VPlus,
            UPlus => Detector::UPlus,
            VMinus => Detector::VMinus,
            UMinus => Detector::UMinus,
            G1 => Detector::G1,
            G2 => Detector::G2,
            G3 => Detector::G3,
            G4 => Detector::G4,
            CPlus => Detector::CPlus,
            DPlus => Detector::DPlus,
            CMinus => Detector::CMinus,
            DMinus => Detector::DMinus,
        }
    }

    fn name(self) -> &'static str {
        use ModeLabel::*;
        match self {
            VPlus => "v+",
            UPlus => "u+",
            VMinus => "v-",
            UMinus => "u-",
            G1 => "g1",
            G2 => "g2",
            G3 => "g3",
            G4 => "g4",
            CPlus => "c+",
            DPlus => "d+",
            CMinus => "c-",
            DMinus => "d-",
        }
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single-photon mode: either the photon still sitting at its crystal, or
/// one of the named branches downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Source(Crystal),
    Branch(ModeLabel),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Source(c) => write!(f, "{c}"),
            Mode::Branch(l) => write!(f, "{l}"),
        }
    }
}

impl From<ModeLabel> for Mode {
    fn from(label: ModeLabel) -> Self {
        Mode::Branch(label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub vacuum_amplitude: Complex64,
    pub pair_amplitude: Complex64,
    pub eta: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            vacuum_amplitude: ONE,
            pair_amplitude: ONE,
            eta: 0.1,
        }
    }
}

impl SourceParams {
    fn approx_eq(&self, other: &SourceParams) -> bool {
        (self.vacuum_amplitude - other.vacuum_amplitude).norm() < TOLERANCE
            && (self.pair_amplitude - other.pair_amplitude).norm() < TOLERANCE
            && (self.eta - other.eta).abs() < TOLERANCE
    }
}

/// Output of one crystal: `M|0> + eta V |1,1>`, ordering (red, yellow).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceState {
    pub crystal: Crystal,
    pub params: SourceParams,
    pub vacuum: Complex64,
    pub pair: Complex64,
}

impl SourceState {
    /// Whether the pair branch is present at all.
    pub fn has_pair(&self) -> bool {
        self.pair.norm() >= PRUNE_THRESHOLD
    }

    pub fn has_vacuum(&self) -> bool {
        self.vacuum.norm() >= PRUNE_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub amplitude: Complex64,
    pub red_mode: Mode,
    pub yellow_mode: Mode,
}

/// Superposition of (red mode, yellow mode) product terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiphotonState {
    terms: BTreeMap<(Mode, Mode), Complex64>,
    is_normalized: bool,
}

impl BiphotonState {
    /// Builds a state, merging repeated keys and pruning negligible terms.
    pub fn from_terms<I>(terms: I) -> BiphotonState
    where
        I: IntoIterator<Item = (Mode, Mode, Complex64)>,
    {
        let mut merged: BTreeMap<(Mode, Mode), Complex64> = BTreeMap::new();
        for (red, yellow, amp) in terms {
            *merged.entry((red, yellow)).or_default() += amp;
        }
        merged.retain(|_, amp| amp.norm() >= PRUNE_THRESHOLD);
        let mut state = BiphotonState {
            terms: merged,
            is_normalized: false,
        };
        state.is_normalized = (state.norm_sqr() - 1.0).abs() < TOLERANCE;
        state
    }

    pub fn terms(&self) -> impl Iterator<Item = PairTerm> + '_ {
        self.terms.iter().map(|(&(red_mode, yellow_mode), &amplitude)| PairTerm {
            amplitude,
            red_mode,
            yellow_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.is_normalized
    }

    pub fn amplitude(&self, red: impl Into<Mode>, yellow: impl Into<Mode>) -> Complex64 {
        self.terms
            .get(&(red.into(), yellow.into()))
            .copied()
            .unwrap_or_default()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.terms.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(&self) -> Result<BiphotonState> {
        let norm = self.norm_sqr().sqrt();
        if norm < PRUNE_THRESHOLD {
            return Err(Error::ZeroNorm);
        }
        let mut out = BiphotonState::from_terms(
            self.terms
                .iter()
                .map(|(&(r, y), &a)| (r, y, a / norm)),
        );
        out.is_normalized = true;
        Ok(out)
    }

    /// The state multiplied by the unit phase that makes its first
    /// non-negligible amplitude (in key order) real and positive.
    pub fn phase_canonical(&self) -> BiphotonState {
        let lead = self
            .terms
            .values()
            .find(|a| a.norm() > TOLERANCE)
            .copied();
        let Some(lead) = lead else {
            return self.clone();
        };
        let rot = lead.conj() / lead.norm();
        BiphotonState {
            terms: self.terms.iter().map(|(&k, &a)| (k, a * rot)).collect(),
            is_normalized: self.is_normalized,
        }
    }

    /// Largest amplitude difference after quotienting out one global phase.
    pub fn max_error_up_to_phase(&self, other: &BiphotonState) -> f64 {
        let a = self.phase_canonical();
        let b = other.phase_canonical();
        let mut worst: f64 = 0.0;
        for key in a.terms.keys().chain(b.terms.keys()) {
            let x = a.terms.get(key).copied().unwrap_or_default();
            let y = b.terms.get(key).copied().unwrap_or_default();
            worst = worst.max((x - y).norm());
        }
        worst
    }

    pub fn approx_eq_up_to_phase(&self, other: &BiphotonState) -> bool {
        self.max_error_up_to_phase(other) < TOLERANCE
    }

    /// Applies independent single-photon substitutions to both slots.
    fn substitute<F, G>(&self, red_map: F, yellow_map: G) -> Result<BiphotonState>
    where
        F: Fn(Mode) -> Result<Vec<(Mode, Complex64)>>,
        G: Fn(Mode) -> Result<Vec<(Mode, Complex64)>>,
    {
        let mut out = Vec::new();
        for (&(red, yellow), &amp) in &self.terms {
            let reds = red_map(red)?;
            let yellows = yellow_map(yellow)?;
            for &(r, ra) in &reds {
                for &(y, ya) in &yellows {
                    out.push((r, y, amp * ra * ya));
                }
            }
        }
        Ok(BiphotonState::from_terms(out))
    }
}

impl fmt::Display for BiphotonState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for term in self.terms() {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            let a = term.amplitude;
            write!(
                f,
                "({:+.6}{:+.6}i)|{}>|{}>",
                a.re, a.im, term.red_mode, term.yellow_mode
            )?;
        }
        if first {
            f.write_str("0")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// U+ and V+ are in place.
    pub r_plus_intercepted: bool,
    /// U- and V- are in place.
    pub r_minus_intercepted: bool,
}

impl DetectorConfig {
    pub const E1: DetectorConfig = DetectorConfig::new(false, true);
    pub const E2: DetectorConfig = DetectorConfig::new(true, false);
    pub const E3: DetectorConfig = DetectorConfig::new(false, false);
    pub const H: DetectorConfig = DetectorConfig::new(true, true);

    pub const fn new(r_plus_intercepted: bool, r_minus_intercepted: bool) -> Self {
        DetectorConfig {
            r_plus_intercepted,
            r_minus_intercepted,
        }
    }

    pub fn intercepted(self, side: Side) -> bool {
        match side {
            Side::RPlus => self.r_plus_intercepted,
            Side::RMinus => self.r_minus_intercepted,
        }
    }

    pub fn from_selector(selector: &str) -> Option<DetectorConfig> {
        match selector.to_ascii_lowercase().as_str() {
            "e1" => Some(Self::E1),
            "e2" => Some(Self::E2),
            "e3" => Some(Self::E3),
            "h" => Some(Self::H),
            _ => None,
        }
    }

    pub fn selector(self) -> &'static str {
        match (self.r_plus_intercepted, self.r_minus_intercepted) {
            (false, true) => "e1",
            (true, false) => "e2",
            (false, false) => "e3",
            (true, true) => "h",
        }
    }
}

/// Port wiring of the final splitters BS+ and BS-.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitterConvention {
    /// u -> (c + i d)/sqrt2, v -> (d + i c)/sqrt2.
    #[default]
    Standard,
    /// u -> (d + i c)/sqrt2, v -> (c + i d)/sqrt2.
    Swapped,
}

pub fn crystal_state(n: u8, params: SourceParams) -> Result<SourceState> {
    let crystal = Crystal::from_index(n)?;
    Ok(SourceState {
        crystal,
        params,
        vacuum: params.vacuum_amplitude,
        pair: params.pair_amplitude * params.eta,
    })
}

/// Normalized one-pair sector `|A>` of the product of the three sources.
///
/// The sector's global prefactor `sqrt3 M^2 eta V` is factored out, so any
/// symmetric choice of source parameters yields the same state. Multi-pair
/// terms are dropped by construction.
pub fn first_order_component(sources: &[SourceState; 3]) -> Result<BiphotonState> {
    let params = sources[0].params;
    if sources.iter().any(|s| !s.params.approx_eq(&params)) {
        return Err(Error::MismatchedSources);
    }
    let mut seen = [false; 3];
    for s in sources {
        seen[(s.crystal.index() - 1) as usize] = true;
    }
    if seen.iter().any(|&x| !x) {
        return Err(Error::IncompleteSources);
    }
    // one crystal emits, the other two stay in vacuum
    if !sources[0].has_pair() || !sources[0].has_vacuum() {
        return Err(Error::ZeroNorm);
    }
    let amp = Complex64::new(1.0 / 3f64.sqrt(), 0.0);
    let mut state = BiphotonState::from_terms(
        [Crystal::X3, Crystal::X2, Crystal::X1]
            .into_iter()
            .map(|c| (Mode::Source(c), Mode::Source(c), amp)),
    );
    state.is_normalized = true;
    Ok(state)
}

/// Where the red photon of each crystal ends up after the four splitters
/// and mirrors in front of the final stage.
pub fn red_network_image(crystal: Crystal) -> [(ModeLabel, Complex64); 2] {
    let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
    match crystal {
        Crystal::X3 => [(ModeLabel::VPlus, h), (ModeLabel::G4, I * h)],
        Crystal::X2 => [(ModeLabel::UPlus, h), (ModeLabel::G2, I * h)],
        Crystal::X1 => [(ModeLabel::VPlus, I * h), (ModeLabel::G4, h)],
    }
}

pub fn yellow_network_image(crystal: Crystal) -> [(ModeLabel, Complex64); 2] {
    let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
    match crystal {
        Crystal::X3 => [(ModeLabel::VMinus, h), (ModeLabel::G3, I * h)],
        Crystal::X2 => [(ModeLabel::VMinus, I * h), (ModeLabel::G3, h)],
        Crystal::X1 => [(ModeLabel::UMinus, h), (ModeLabel::G1, I * h)],
    }
}

pub fn apply_g_network(state: &BiphotonState) -> Result<BiphotonState> {
    fn lift(image: [(ModeLabel, Complex64); 2]) -> Vec<(Mode, Complex64)> {
        image.into_iter().map(|(l, a)| (Mode::Branch(l), a)).collect()
    }
    state.substitute(
        |m| match m {
            Mode::Source(c) => Ok(lift(red_network_image(c))),
            other => Err(Error::NonCrystalMode(other)),
        },
        |m| match m {
            Mode::Source(c) => Ok(lift(yellow_network_image(c))),
            other => Err(Error::NonCrystalMode(other)),
        },
    )
}

fn is_pre_splitter(m: Mode) -> bool {
    matches!(m, Mode::Branch(l) if l.stage() == Stage::PreSplitter)
}

/// Conditions on no G-detector firing. Returns the renormalized survivor
/// and the probability of the retained sector.
pub fn postselect_no_g(state: &BiphotonState) -> Result<(BiphotonState, f64)> {
    let total = state.norm_sqr();
    if total < PRUNE_THRESHOLD * PRUNE_THRESHOLD {
        return Err(Error::ZeroNorm);
    }
    let kept = BiphotonState::from_terms(
        state
            .terms()
            .filter(|t| is_pre_splitter(t.red_mode) && is_pre_splitter(t.yellow_mode))
            .map(|t| (t.red_mode, t.yellow_mode, t.amplitude)),
    );
    if kept.is_empty() {
        return Err(Error::EmptyPostselection);
    }
    let probability = kept.norm_sqr() / total;
    Ok((kept.normalized()?, probability))
}

fn final_splitter(label: ModeLabel, convention: SplitterConvention) -> Option<[(ModeLabel, Complex64); 2]> {
    use ModeLabel::*;
    let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
    let (c, d, is_u) = match label {
        UPlus => (CPlus, DPlus, true),
        VPlus => (CPlus, DPlus, false),
        UMinus => (CMinus, DMinus, true),
        VMinus => (CMinus, DMinus, false),
        _ => return None,
    };
    let u_transmits_to_c = convention == SplitterConvention::Standard;
    if is_u == u_transmits_to_c {
        Some([(c, h), (d, I * h)])
    } else {
        Some([(d, h), (c, I * h)])
    }
}

pub fn apply_detector_config(h: &BiphotonState, config: DetectorConfig) -> Result<BiphotonState> {
    apply_detector_config_with(h, config, SplitterConvention::Standard)
}

/// Sends every non-intercepted side through its final splitter. Intercepted
/// sides keep their branch modes, which the U/V detectors then absorb.
pub fn apply_detector_config_with(
    h: &BiphotonState,
    config: DetectorConfig,
    convention: SplitterConvention,
) -> Result<BiphotonState> {
    let slot = |side: Side| {
        move |m: Mode| -> Result<Vec<(Mode, Complex64)>> {
            let label = match m {
                Mode::Branch(l) if l.stage() == Stage::PreSplitter && l.side() == Some(side) => l,
                other => return Err(Error::NotOnBranchModes(other)),
            };
            if config.intercepted(side) {
                return Ok(vec![(m, ONE)]);
            }
            let image = final_splitter(label, convention).expect("pre-splitter label");
            Ok(image.into_iter().map(|(l, a)| (Mode::Branch(l), a)).collect())
        }
    };
    h.substitute(slot(Side::RPlus), slot(Side::RMinus))
}

/// Squared-modulus rule over (red detector, yellow detector) coincidences.
///
/// The outcome universe on each side is every detector of the families that
/// appear in the state, so certainty constraints show up as explicit zeros.
pub fn born_distribution(state: &BiphotonState) -> Result<OutcomeDistribution> {
    let norm = state.norm_sqr();
    if (norm - 1.0).abs() >= TOLERANCE {
        return Err(Error::NotNormalized(norm));
    }
    let detector_of = |m: Mode| match m {
        Mode::Branch(l) => Ok(l.detector()),
        other => Err(Error::NoDetector(other)),
    };
    let mut entries = BTreeMap::new();
    let mut reds = Vec::new();
    let mut yellows = Vec::new();
    for term in state.terms() {
        let r = detector_of(term.red_mode)?;
        let y = detector_of(term.yellow_mode)?;
        reds.extend_from_slice(r.family());
        yellows.extend_from_slice(y.family());
        *entries.entry((r, y)).or_insert(0.0) += term.amplitude.norm_sqr();
    }
    for &r in &reds {
        for &y in &yellows {
            entries.entry((r, y)).or_insert(0.0);
        }
    }
    OutcomeDistribution::from_entries(entries)
}

/// `|H>` from default sources, with the post-selection probability.
pub fn hardy_state() -> Result<(BiphotonState, f64)> {
    let params = SourceParams::default();
    let sources = [
        crystal_state(1, params)?,
        crystal_state(2, params)?,
        crystal_state(3, params)?,
    ];
    let a = first_order_component(&sources)?;
    let network = apply_g_network(&a)?;
    postselect_no_g(&network)
}

/// Final state and exact outcome table for a detector configuration.
pub fn config_state(config: DetectorConfig) -> Result<BiphotonState> {
    let (h, _) = hardy_state()?;
    apply_detector_config(&h, config)
}

pub fn config_distribution(config: DetectorConfig) -> Result<OutcomeDistribution> {
    born_distribution(&config_state(config)?)
}
