//! Exact analytic quantities derived from the optics engine: marginals,
//! conditionals, forbidden coincidences, branch origins, and the brute-force
//! enumeration oracle for protocol statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_optics::{red_network_image, yellow_network_image, ModeLabel, Side, Stage, TOLERANCE};
use crate::harness::{self, ScenarioSpec, TrialSummary};
use crate::signal_protocol::Chooser;

pub use crate::fock_optics::Crystal;

/// Probabilities below this count as exact zeros.
pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Upper bound on the number of randomness paths the oracle will walk.
pub const ENUMERATION_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Detector {
    #[serde(rename = "C+")]
    CPlus,
    #[serde(rename = "D+")]
    DPlus,
    #[serde(rename = "U+")]
    UPlus,
    #[serde(rename = "V+")]
    VPlus,
    #[serde(rename = "C-")]
    CMinus,
    #[serde(rename = "D-")]
    DMinus,
    #[serde(rename = "U-")]
    UMinus,
    #[serde(rename = "V-")]
    VMinus,
    G1,
    G2,
    G3,
    G4,
}

impl Detector {
    pub const ALL: [Detector; 12] = [
        Detector::CPlus,
        Detector::DPlus,
        Detector::UPlus,
        Detector::VPlus,
        Detector::CMinus,
        Detector::DMinus,
        Detector::UMinus,
        Detector::VMinus,
        Detector::G1,
        Detector::G2,
        Detector::G3,
        Detector::G4,
    ];

    pub fn mode(self) -> ModeLabel {
        match self {
            Detector::CPlus => ModeLabel::CPlus,
            Detector::DPlus => ModeLabel::DPlus,
            Detector::UPlus => ModeLabel::UPlus,
            Detector::VPlus => ModeLabel::VPlus,
            Detector::CMinus => ModeLabel::CMinus,
            Detector::DMinus => ModeLabel::DMinus,
            Detector::UMinus => ModeLabel::UMinus,
            Detector::VMinus => ModeLabel::VMinus,
            Detector::G1 => ModeLabel::G1,
            Detector::G2 => ModeLabel::G2,
            Detector::G3 => ModeLabel::G3,
            Detector::G4 => ModeLabel::G4,
        }
    }

    pub fn side(self) -> Option<Side> {
        self.mode().side()
    }

    /// The detectors that share a measurement station with this one.
    pub fn family(self) -> &'static [Detector] {
        use Detector::*;
        match self {
            CPlus | DPlus => &[CPlus, DPlus],
            UPlus | VPlus => &[UPlus, VPlus],
            CMinus | DMinus => &[CMinus, DMinus],
            UMinus | VMinus => &[UMinus, VMinus],
            G1 => &[G1],
            G2 => &[G2],
            G3 => &[G3],
            G4 => &[G4],
        }
    }

    pub fn label(self) -> &'static str {
        use Detector::*;
        match self {
            CPlus => "C+",
            DPlus => "D+",
            UPlus => "U+",
            VPlus => "V+",
            CMinus => "C-",
            DMinus => "D-",
            UMinus => "U-",
            VMinus => "V-",
            G1 => "G1",
            G2 => "G2",
            G3 => "G3",
            G4 => "G4",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Detector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().replace('\u{2212}', "-").to_ascii_uppercase();
        Detector::ALL
            .into_iter()
            .find(|d| d.label() == norm)
            .ok_or_else(|| format!("unknown detector {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEntry {
    pub red: Detector,
    pub yellow: Detector,
    pub probability: f64,
}

/// Probability map over (red detector, yellow detector) coincidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<OutcomeEntry>", try_from = "Vec<OutcomeEntry>")]
pub struct OutcomeDistribution {
    entries: BTreeMap<(Detector, Detector), f64>,
}

impl OutcomeDistribution {
    pub fn from_entries(entries: BTreeMap<(Detector, Detector), f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        if let Some((k, p)) = entries.iter().find(|(_, &p)| !(0.0..=1.0 + TOLERANCE).contains(&p)) {
            return Err(Error::InvalidDistribution(format!(
                "({},{}) has probability {p}",
                k.0, k.1
            )));
        }
        let total: f64 = entries.values().sum();
        if (total - 1.0).abs() >= TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(OutcomeDistribution { entries })
    }

    /// Empirical distribution from integer counts.
    pub fn from_counts(counts: &BTreeMap<(Detector, Detector), u64>) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::InvalidDistribution("no observations".into()));
        }
        Self::from_entries(
            counts
                .iter()
                .map(|(&k, &n)| (k, n as f64 / total as f64))
                .collect(),
        )
    }

    /// Independent joint of two one-sided marginals.
    pub fn product(red: &BTreeMap<Detector, f64>, yellow: &BTreeMap<Detector, f64>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (&r, &pr) in red {
            for (&y, &py) in yellow {
                entries.insert((r, y), pr * py);
            }
        }
        Self::from_entries(entries)
    }

    pub fn probability(&self, red: Detector, yellow: Detector) -> f64 {
        self.entries.get(&(red, yellow)).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, red: Detector, yellow: Detector) -> bool {
        self.entries.contains_key(&(red, yellow))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((Detector, Detector), f64)> + '_ {
        self.entries.iter().map(|(&k, &p)| (k, p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn red_detectors(&self) -> BTreeSet<Detector> {
        self.entries.keys().map(|k| k.0).collect()
    }

    pub fn yellow_detectors(&self) -> BTreeSet<Detector> {
        self.entries.keys().map(|k| k.1).collect()
    }
}

impl From<OutcomeDistribution> for Vec<OutcomeEntry> {
    fn from(d: OutcomeDistribution) -> Self {
        d.entries
            .into_iter()
            .map(|((red, yellow), probability)| OutcomeEntry { red, yellow, probability })
            .collect()
    }
}

impl TryFrom<Vec<OutcomeEntry>> for OutcomeDistribution {
    type Error = Error;

    fn try_from(rows: Vec<OutcomeEntry>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for row in rows {
            if entries.insert((row.red, row.yellow), row.probability).is_some() {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate outcome ({},{})",
                    row.red, row.yellow
                )));
            }
        }
        OutcomeDistribution::from_entries(entries)
    }
}

/// One-sided marginal: R+ sums out the yellow photon, R- the red one.
pub fn marginal(dist: &OutcomeDistribution, side: Side) -> BTreeMap<Detector, f64> {
    let mut out = BTreeMap::new();
    for ((r, y), p) in dist.iter() {
        let key = match side {
            Side::RPlus => r,
            Side::RMinus => y,
        };
        *out.entry(key).or_insert(0.0) += p;
    }
    out
}

/// Distribution of the twin's detector given that `given` fired.
pub fn conditional(dist: &OutcomeDistribution, given: Detector) -> Result<BTreeMap<Detector, f64>> {
    let side = if dist.red_detectors().contains(&given) {
        Side::RPlus
    } else if dist.yellow_detectors().contains(&given) {
        Side::RMinus
    } else {
        return Err(Error::UnknownDetector(given));
    };
    let weight = marginal(dist, side)[&given];
    if weight < ZERO_THRESHOLD {
        return Err(Error::ZeroProbabilityCondition(given));
    }
    Ok(dist
        .iter()
        .filter_map(|((r, y), p)| match side {
            Side::RPlus if r == given => Some((y, p / weight)),
            Side::RMinus if y == given => Some((r, p / weight)),
            _ => None,
        })
        .collect())
}

/// Coincidences the distribution rules out.
pub fn forbidden_set(dist: &OutcomeDistribution) -> BTreeSet<(Detector, Detector)> {
    dist.iter()
        .filter(|&(_, p)| p < ZERO_THRESHOLD)
        .map(|(k, _)| k)
        .collect()
}

/// Crystals each pre-splitter branch can carry a photon from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchOriginMap {
    origins: BTreeMap<ModeLabel, BTreeSet<Crystal>>,
}

impl BranchOriginMap {
    /// Reads origins off the G-network substitutions.
    pub fn from_network() -> Self {
        let mut origins: BTreeMap<ModeLabel, BTreeSet<Crystal>> = BTreeMap::new();
        for crystal in Crystal::ALL {
            let images = red_network_image(crystal)
                .into_iter()
                .chain(yellow_network_image(crystal));
            for (label, _) in images {
                if label.stage() == Stage::PreSplitter {
                    origins.entry(label).or_default().insert(crystal);
                }
            }
        }
        BranchOriginMap { origins }
    }

    pub fn origins(&self, label: ModeLabel) -> Option<&BTreeSet<Crystal>> {
        self.origins.get(&label)
    }
}

impl Default for BranchOriginMap {
    fn default() -> Self {
        Self::from_network()
    }
}

pub fn origin_allows(map: &BranchOriginMap, detector: Detector, origin: Crystal) -> bool {
    map.origins(detector.mode())
        .is_none_or(|set| set.contains(&origin))
}

/// Exact expected statistics of a scenario, by weighted enumeration over
/// every discrete random choice a trial makes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolExpectations {
    /// Joint outcome distribution of each pair slot.
    pub joint: Vec<OutcomeDistribution>,
    pub clash_rate: f64,
    pub follower_clash_rate: f64,
    pub ambiguity_rate: f64,
    pub deadlock_rate: f64,
    pub forbidden_coincidence_rate: f64,
    /// Number of randomness paths walked.
    pub paths: usize,
}

/// Replays a fixed prefix of choices, then takes the first branch of every
/// new choice while recording its arity.
struct ReplayChooser<'a> {
    prefix: &'a [(u32, u32)],
    taken: Vec<(u32, u32)>,
}

impl Chooser for ReplayChooser<'_> {
    fn choose(&mut self, n: u32) -> u32 {
        assert!(n > 0, "choice over an empty range");
        let pos = self.taken.len();
        let pick = match self.prefix.get(pos) {
            Some(&(pick, arity)) => {
                assert_eq!(arity, n, "trial is not deterministic given its choices");
                pick
            }
            None => 0,
        };
        self.taken.push((pick, n));
        pick
    }
}

/// Neumaier-compensated running sum; the enumeration adds up to millions of
/// small path weights.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    total: f64,
    carry: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.carry += (self.total - t) + x;
        } else {
            self.carry += (x - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.carry
    }
}

/// Probability of one path, 1 / (product of arities), rounded once.
fn path_weight(path: &[(u32, u32)]) -> f64 {
    path.iter()
        .try_fold(1u128, |acc, &(_, n)| acc.checked_mul(u128::from(n)))
        .map_or_else(
            || path.iter().map(|&(_, n)| 1.0 / f64::from(n)).product(),
            |den| 1.0 / den as f64,
        )
}

pub fn enumerate_protocol_statistics(spec: &ScenarioSpec) -> Result<ProtocolExpectations> {
    let tables = harness::scenario_tables(spec)?;
    let slots = tables.len();
    let mut joint: Vec<BTreeMap<(Detector, Detector), Sum>> = vec![BTreeMap::new(); slots];
    let [mut clash, mut follower_clash, mut ambiguity, mut deadlock, mut forbidden] = [Sum::default(); 5];

    let mut path: Vec<(u32, u32)> = Vec::new();
    let mut paths = 0usize;
    loop {
        paths += 1;
        if paths > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge(ENUMERATION_LIMIT));
        }
        let mut chooser = ReplayChooser {
            prefix: &path,
            taken: Vec::with_capacity(path.len() + 4),
        };
        let transcript = harness::run_trial(spec, &tables, &mut chooser)?;
        path = chooser.taken;
        let weight = path_weight(&path);

        let summary = TrialSummary::from_transcript(&transcript, &tables);
        for (slot, outcome) in summary.outcomes.iter().enumerate() {
            if let Some(key) = outcome {
                joint[slot].entry(*key).or_default().add(weight);
            }
        }
        for (hit, sum) in [
            (summary.clash, &mut clash),
            (summary.follower_clash, &mut follower_clash),
            (summary.ambiguity, &mut ambiguity),
            (summary.deadlock, &mut deadlock),
            (summary.forbidden, &mut forbidden),
        ] {
            if hit {
                sum.add(weight);
            }
        }

        // odometer step over the choice tree
        while let Some(&(pick, arity)) = path.last() {
            if pick + 1 < arity {
                path.last_mut().unwrap().0 += 1;
                break;
            }
            path.pop();
        }
        if path.is_empty() {
            break;
        }
    }

    let joint = joint
        .into_iter()
        .zip(&tables)
        .map(|(sums, table)| {
            let mut seen: BTreeMap<_, f64> = sums.into_iter().map(|(k, s)| (k, s.value())).collect();
            for ((r, y), _) in table.joint.iter() {
                seen.entry((r, y)).or_insert(0.0);
            }
            OutcomeDistribution::from_entries(seen)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ProtocolExpectations {
        joint,
        clash_rate: clash.value(),
        follower_clash_rate: follower_clash.value(),
        ambiguity_rate: ambiguity.value(),
        deadlock_rate: deadlock.value(),
        forbidden_coincidence_rate: forbidden.value(),
        paths,
    })
}
