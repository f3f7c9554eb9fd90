//! The hypothesized inter-particle protocol as a deterministic state machine.
//!
//! A trial is driven entirely by a [`Chooser`], which hands out uniform
//! integer draws. Every source of protocol randomness (birth crystal,
//! election bits, the leader's 1..N draw, the follower's draw, votes,
//! message permutations, ambiguity fallbacks) goes through it, so a trial is
//! a pure function of its choice sequence. The Monte Carlo harness feeds it
//! a seeded RNG; the enumeration oracle walks every choice sequence.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock_optics::{config_distribution, DetectorConfig, Side};
use crate::predictions::{
    conditional, marginal, origin_allows, BranchOriginMap, Crystal, Detector, OutcomeDistribution,
    ZERO_THRESHOLD,
};
use crate::rational;

/// Event-time of pair generation and leader election.
pub const GENERATION_TIME: u64 = 0;
/// Event-time of every measurement. Broadcasts arrive instantly.
pub const MEASUREMENT_TIME: u64 = 1;

/// Largest denominator accepted for a single grid weight.
const GRID_MAX_DENOMINATOR: u64 = 1000;
const GRID_MAX_SIZE: u64 = 1_000_000;

/// Source of uniform integer draws.
pub trait Chooser {
    /// Uniform draw from `0..n`. `n` is never zero.
    fn choose(&mut self, n: u32) -> u32;
}

pub struct RngChooser<R>(pub R);

impl<R: Rng> Chooser for RngChooser<R> {
    fn choose(&mut self, n: u32) -> u32 {
        self.0.gen_range(0..n)
    }
}

/// Replays a fixed list of draws; panics when it runs out.
#[derive(Debug, Clone)]
pub struct ScriptedChooser {
    draws: Vec<u32>,
    pos: usize,
}

impl ScriptedChooser {
    pub fn new(draws: impl Into<Vec<u32>>) -> Self {
        ScriptedChooser {
            draws: draws.into(),
            pos: 0,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.pos == self.draws.len()
    }
}

impl Chooser for ScriptedChooser {
    fn choose(&mut self, n: u32) -> u32 {
        let d = *self
            .draws
            .get(self.pos)
            .unwrap_or_else(|| panic!("script exhausted at draw {}", self.pos));
        assert!(d < n, "scripted draw {d} outside 0..{n}");
        self.pos += 1;
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Yellow,
}

impl Color {
    pub fn region(self) -> Side {
        match self {
            Color::Red => Side::RPlus,
            Color::Yellow => Side::RMinus,
        }
    }

    pub fn twin(self) -> Color {
        match self {
            Color::Red => Color::Yellow,
            Color::Yellow => Color::Red,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leader,
    Follower,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairIdentity {
    pub tag: u32,
    pub origin: Crystal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotonAgent {
    pub color: Color,
    pub region: Side,
    pub identity: Option<PairIdentity>,
    pub role: Role,
}

impl PhotonAgent {
    pub fn new(color: Color, identity: Option<PairIdentity>) -> Self {
        PhotonAgent {
            color,
            region: color.region(),
            identity,
            role: Role::Undecided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub sender_region: Side,
    pub reported_detector: Detector,
    pub identity_tag: Option<u32>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Version {
    V1,
    V2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderRule {
    FixedRed,
    FixedYellow,
    /// Two fresh bits decide: equal bits elect node 1, unequal node 2.
    #[serde(rename = "appendix_a_election", alias = "coin_election")]
    CoinElection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    None,
    PerPair,
    TripleVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingRule {
    ByIdentity,
    ArrivalOrder,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub version: Version,
    pub leader_rule: LeaderRule,
    pub identity_mode: IdentityMode,
    pub pairing_rule: PairingRule,
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy {
            version: Version::V2,
            leader_rule: LeaderRule::CoinElection,
            identity_mode: IdentityMode::None,
            pairing_rule: PairingRule::ArrivalOrder,
        }
    }
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        if self.pairing_rule == PairingRule::ByIdentity && self.identity_mode == IdentityMode::None {
            return Err(Error::InvalidStrategy(
                "pairing by identity requires an identity mode".into(),
            ));
        }
        Ok(())
    }
}

/// Two-node election: equal bits elect node 1, differing bits node 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    One,
    Two,
}

impl Node {
    /// Node 1 is the red photon, node 2 the yellow one.
    pub fn color(self) -> Color {
        match self {
            Node::One => Color::Red,
            Node::Two => Color::Yellow,
        }
    }
}

pub fn elect_leader(bit_1: u8, bit_2: u8) -> Node {
    if bit_1 == bit_2 {
        Node::One
    } else {
        Node::Two
    }
}

/// A discrete distribution laid out on the integer range `1..=size`, with
/// consecutive cells assigned to detectors in table order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    cells: Vec<(Detector, u32)>,
    size: u32,
}

impl Grid {
    /// Lays weights out on the least common denominator of their rational
    /// values. Zero weights get no cells.
    pub fn from_weights(weights: &BTreeMap<Detector, f64>) -> Result<Grid> {
        let mut fractions = Vec::new();
        let mut size: u64 = 1;
        for (&d, &p) in weights {
            if p < ZERO_THRESHOLD {
                continue;
            }
            let (_, den) = rational::approximate(p, GRID_MAX_DENOMINATOR, 1e-9)
                .ok_or_else(|| Error::NotOnGrid(format!("{d} has weight {p}")))?;
            size = rational::lcm(size, den);
            if size > GRID_MAX_SIZE {
                return Err(Error::NotOnGrid(format!("grid exceeds {GRID_MAX_SIZE} cells")));
            }
            fractions.push((d, p));
        }
        let cells: Vec<(Detector, u32)> = fractions
            .into_iter()
            .map(|(d, p)| (d, (p * size as f64).round() as u32))
            .collect();
        let total: u64 = cells.iter().map(|&(_, n)| u64::from(n)).sum();
        if total != size || cells.is_empty() {
            return Err(Error::NotOnGrid(format!(
                "cells sum to {total}, expected {size}"
            )));
        }
        Ok(Grid {
            cells,
            size: size as u32,
        })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn cells(&self) -> &[(Detector, u32)] {
        &self.cells
    }

    /// Detector owning grid value `n` in `1..=size`.
    pub fn pick(&self, n: u32) -> Result<Detector> {
        if n == 0 || n > self.size {
            return Err(Error::DrawOutOfRange {
                draw: n,
                size: self.size,
            });
        }
        let mut upper = 0;
        for &(d, count) in &self.cells {
            upper += count;
            if n <= upper {
                return Ok(d);
            }
        }
        unreachable!("cells cover 1..=size")
    }

    fn draw(&self, chooser: &mut dyn Chooser) -> (Detector, u32) {
        let n = chooser.choose(self.size) + 1;
        (self.pick(n).expect("draw within grid"), n)
    }
}

/// Answer for grid value `n`: the integer range is split proportionally to
/// the marginal, so a uniform `n` reproduces it exactly.
pub fn sample_on_grid(marginal: &BTreeMap<Detector, f64>, n: u32) -> Result<Detector> {
    Grid::from_weights(marginal)?.pick(n)
}

/// Quantum tables for one detector configuration, pre-laid on grids.
#[derive(Debug, Clone)]
pub struct ConfigTables {
    pub config: DetectorConfig,
    pub joint: OutcomeDistribution,
    red_marginal: Grid,
    yellow_marginal: Grid,
    conditionals: BTreeMap<Detector, Grid>,
    red_detectors: Vec<Detector>,
    yellow_detectors: Vec<Detector>,
}

impl ConfigTables {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        Self::from_distribution(config, config_distribution(config)?)
    }

    pub fn from_distribution(config: DetectorConfig, joint: OutcomeDistribution) -> Result<Self> {
        let red = marginal(&joint, Side::RPlus);
        let yellow = marginal(&joint, Side::RMinus);
        let mut conditionals = BTreeMap::new();
        for (&d, &p) in red.iter().chain(yellow.iter()) {
            if p >= ZERO_THRESHOLD {
                conditionals.insert(d, Grid::from_weights(&conditional(&joint, d)?)?);
            }
        }
        Ok(ConfigTables {
            config,
            red_marginal: Grid::from_weights(&red)?,
            yellow_marginal: Grid::from_weights(&yellow)?,
            conditionals,
            red_detectors: red.keys().copied().collect(),
            yellow_detectors: yellow.keys().copied().collect(),
            joint,
        })
    }

    pub fn marginal_grid(&self, side: Side) -> &Grid {
        match side {
            Side::RPlus => &self.red_marginal,
            Side::RMinus => &self.yellow_marginal,
        }
    }

    /// Grid of the twin's response given `reported`, if `reported` is a
    /// detector of this table with nonzero probability.
    pub fn conditional_grid(&self, reported: Detector) -> Option<&Grid> {
        self.conditionals.get(&reported)
    }

    pub fn detectors(&self, side: Side) -> &[Detector] {
        match side {
            Side::RPlus => &self.red_detectors,
            Side::RMinus => &self.yellow_detectors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub candidates: [PairIdentity; 3],
    /// Candidate index chosen by each of the three voters.
    pub votes: [u8; 3],
    pub elected: u8,
}

/// Identity for a newly generated pair. `counter` holds the next free tag.
///
/// `TripleVote` mints one candidate per crystal and keeps the majority
/// choice of three uniform votes; a three-way split goes to the first vote.
pub fn assign_identity(
    mode: IdentityMode,
    origin: Crystal,
    counter: &mut u32,
    chooser: &mut dyn Chooser,
) -> Option<(PairIdentity, Option<VoteRecord>)> {
    match mode {
        IdentityMode::None => None,
        IdentityMode::PerPair => {
            let id = PairIdentity {
                tag: *counter,
                origin,
            };
            *counter += 1;
            Some((id, None))
        }
        IdentityMode::TripleVote => {
            let base = *counter;
            *counter += 3;
            let candidates = [0u32, 1, 2].map(|k| PairIdentity {
                tag: base + k,
                origin: Crystal::ALL[k as usize],
            });
            let votes = [0; 3].map(|_: u8| chooser.choose(3) as u8);
            let elected = if votes[1] == votes[2] { votes[1] } else { votes[0] };
            Some((
                candidates[elected as usize],
                Some(VoteRecord {
                    candidates,
                    votes,
                    elected,
                }),
            ))
        }
    }
}

/// Birth record of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairBirth {
    pub pair: usize,
    pub origin: Crystal,
    pub identity: Option<PairIdentity>,
    pub vote: Option<VoteRecord>,
}

/// Draws a uniform birth crystal and assigns the pair its identity.
pub fn generate_pair(
    pair: usize,
    mode: IdentityMode,
    counter: &mut u32,
    chooser: &mut dyn Chooser,
) -> PairBirth {
    let origin = Crystal::ALL[chooser.choose(3) as usize];
    let assigned = assign_identity(mode, origin, counter, chooser);
    PairBirth {
        pair,
        origin,
        identity: assigned.map(|a| a.0),
        vote: assigned.and_then(|a| a.1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Leader,
    Follower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Generation {
        pair: usize,
        origin: Crystal,
        identity: Option<PairIdentity>,
        vote: Option<VoteRecord>,
    },
    Election {
        pair: usize,
        bits: [u8; 2],
        leader: Color,
    },
    LeaderChoice {
        pair: usize,
        region: Side,
        detector: Detector,
        draw: u32,
        grid: u32,
    },
    Broadcast {
        pair: usize,
        message: Message,
    },
    Delivery {
        message: usize,
        to_pair: usize,
        region: Side,
    },
    FollowerChoice {
        pair: usize,
        region: Side,
        detector: Detector,
        message: Option<usize>,
    },
    Clash {
        pair: usize,
        party: Party,
        detector: Detector,
        origin: Crystal,
    },
    Ambiguity {
        pair: usize,
        region: Side,
        reported: Option<Detector>,
    },
    Deadlock {
        pair: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    events: Vec<Event>,
    broadcasts: usize,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn push(&mut self, time: u64, kind: EventKind) {
        if matches!(kind, EventKind::Broadcast { .. }) {
            self.broadcasts += 1;
        }
        self.events.push(Event { time, kind });
    }

    /// Index the next broadcast will get.
    fn next_message_index(&self) -> usize {
        self.broadcasts
    }

    pub fn has_deadlock(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Deadlock { .. }))
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Transcript, serde_json::Error> {
        let mut t = Transcript::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: Event = serde_json::from_str(line)?;
            t.push(e.time, e.kind);
        }
        Ok(t)
    }

    /// Structural checks every transcript must pass: non-decreasing time,
    /// each leader choice immediately broadcast at the same time and
    /// reporting the chosen detector, and messages carrying only detectors
    /// of their sender's region.
    pub fn check_conformance(&self) -> std::result::Result<(), String> {
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.time < last {
                return Err(format!("event {i} goes back in time"));
            }
            last = e.time;
            match &e.kind {
                EventKind::LeaderChoice { pair, detector, .. } => match self.events.get(i + 1) {
                    Some(Event {
                        time,
                        kind: EventKind::Broadcast { pair: bp, message },
                    }) if *time == e.time
                        && bp == pair
                        && message.reported_detector == *detector
                        && message.timestamp == e.time => {}
                    _ => return Err(format!("leader choice {i} is not followed by its broadcast")),
                },
                EventKind::Broadcast { message, .. } => {
                    if message.reported_detector.side() != Some(message.sender_region) {
                        return Err(format!("broadcast {i} carries non-local information"));
                    }
                    if !matches!(
                        i.checked_sub(1).map(|j| &self.events[j].kind),
                        Some(EventKind::LeaderChoice { .. })
                    ) {
                        return Err(format!("broadcast {i} has no leader choice"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn origin_map() -> &'static BranchOriginMap {
    static MAP: OnceLock<BranchOriginMap> = OnceLock::new();
    MAP.get_or_init(BranchOriginMap::from_network)
}

/// The only detector of `side` an origin-bound photon may fire, when the
/// side's detectors discriminate branches.
fn bound_detector(tables: &ConfigTables, side: Side, origin: Crystal) -> Option<Detector> {
    let mut allowed = tables
        .detectors(side)
        .iter()
        .copied()
        .filter(|&d| origin_allows(origin_map(), d, origin));
    match (allowed.next(), allowed.next()) {
        (Some(d), None) => Some(d),
        _ => None,
    }
}

/// Per-pair state shared by the leader and follower steps.
struct PairRun<'a> {
    tables: &'a ConfigTables,
    birth: PairBirth,
}

impl PairRun<'_> {
    fn triple_vote(&self) -> bool {
        self.birth.vote.is_some()
    }

    fn record_birth(&self, transcript: &mut Transcript) {
        transcript.push(
            GENERATION_TIME,
            EventKind::Generation {
                pair: self.birth.pair,
                origin: self.birth.origin,
                identity: self.birth.identity,
                vote: self.birth.vote,
            },
        );
    }

    /// Checks `detector` against the pair identity. Returns the detector the
    /// photon ends up firing: the sample itself, or under triple-vote
    /// identities the branch its elected crystal binds it to.
    fn enforce_identity(
        &self,
        party: Party,
        side: Side,
        detector: Detector,
        transcript: &mut Transcript,
    ) -> Detector {
        let Some(id) = self.birth.identity else {
            return detector;
        };
        if origin_allows(origin_map(), detector, id.origin) {
            return detector;
        }
        transcript.push(
            MEASUREMENT_TIME,
            EventKind::Clash {
                pair: self.birth.pair,
                party,
                detector,
                origin: id.origin,
            },
        );
        if self.triple_vote() {
            bound_detector(self.tables, side, id.origin).unwrap_or(detector)
        } else {
            detector
        }
    }

    /// Leader draws from its marginal and broadcasts the result.
    fn lead(&self, color: Color, chooser: &mut dyn Chooser, transcript: &mut Transcript) -> (usize, Message) {
        let side = color.region();
        let grid = self.tables.marginal_grid(side);
        let (sampled, draw) = grid.draw(chooser);
        let detector = self.enforce_identity(Party::Leader, side, sampled, transcript);
        if detector == sampled {
            self.check_forced_response(detector, transcript);
        }
        transcript.push(
            MEASUREMENT_TIME,
            EventKind::LeaderChoice {
                pair: self.birth.pair,
                region: side,
                detector,
                draw,
                grid: grid.size(),
            },
        );
        let message = Message {
            sender_region: side,
            reported_detector: detector,
            identity_tag: self.birth.identity.map(|id| id.tag),
            timestamp: MEASUREMENT_TIME,
        };
        let index = transcript.next_message_index();
        transcript.push(
            MEASUREMENT_TIME,
            EventKind::Broadcast {
                pair: self.birth.pair,
                message,
            },
        );
        (index, message)
    }

    /// A leader choice is also unavailable when every response the twin
    /// could give to it is excluded by the pair's origin.
    fn check_forced_response(&self, detector: Detector, transcript: &mut Transcript) {
        let (Some(id), Some(grid)) = (self.birth.identity, self.tables.conditional_grid(detector)) else {
            return;
        };
        let cells = grid.cells();
        let blocked = cells
            .iter()
            .all(|&(d, _)| !origin_allows(origin_map(), d, id.origin));
        if let (true, Some(&(forced, _))) = (blocked, cells.first()) {
            transcript.push(
                MEASUREMENT_TIME,
                EventKind::Clash {
                    pair: self.birth.pair,
                    party: Party::Leader,
                    detector: forced,
                    origin: id.origin,
                },
            );
        }
    }

    /// Follower answers the matched message with the quantum conditional,
    /// or uniformly at random when the message does not apply to it.
    fn follow(
        &self,
        color: Color,
        matched: Option<(usize, &Message)>,
        chooser: &mut dyn Chooser,
        transcript: &mut Transcript,
    ) -> Detector {
        let side = color.region();
        let grid = matched
            .filter(|(_, m)| m.sender_region != side)
            .and_then(|(_, m)| self.tables.conditional_grid(m.reported_detector));
        let sampled = match grid {
            Some(grid) => grid.draw(chooser).0,
            None => {
                let local = self.tables.detectors(side);
                local[chooser.choose(local.len() as u32) as usize]
            }
        };
        let detector = self.enforce_identity(Party::Follower, side, sampled, transcript);
        transcript.push(
            MEASUREMENT_TIME,
            EventKind::FollowerChoice {
                pair: self.birth.pair,
                region: side,
                detector,
                message: matched.map(|(i, _)| i),
            },
        );
        detector
    }

    fn deliver(&self, index: usize, to: Color, transcript: &mut Transcript) {
        transcript.push(
            MEASUREMENT_TIME,
            EventKind::Delivery {
                message: index,
                to_pair: self.birth.pair,
                region: to.region(),
            },
        );
    }
}

/// Version 1: roles follow detector placement. With exactly one side
/// intercepted, the photon whose own mobile detectors are absent leads.
/// Otherwise there is no leader: a deadlock is recorded, then the
/// both-leaders reading is played out with each photon drawing its marginal
/// independently and broadcasting.
pub fn run_version1(tables: &ConfigTables, birth: PairBirth, chooser: &mut dyn Chooser) -> Transcript {
    let mut transcript = Transcript::new();
    let run = PairRun { tables, birth };
    run.record_birth(&mut transcript);
    let config = tables.config;
    let leader = match (config.r_plus_intercepted, config.r_minus_intercepted) {
        (false, true) => Some(Color::Red),
        (true, false) => Some(Color::Yellow),
        _ => None,
    };
    match leader {
        Some(color) => {
            let (index, message) = run.lead(color, chooser, &mut transcript);
            run.deliver(index, color.twin(), &mut transcript);
            run.follow(color.twin(), Some((index, &message)), chooser, &mut transcript);
        }
        None => {
            transcript.push(MEASUREMENT_TIME, EventKind::Deadlock { pair: birth.pair });
            let (red_index, _) = run.lead(Color::Red, chooser, &mut transcript);
            let (yellow_index, _) = run.lead(Color::Yellow, chooser, &mut transcript);
            run.deliver(red_index, Color::Yellow, &mut transcript);
            run.deliver(yellow_index, Color::Red, &mut transcript);
        }
    }
    transcript
}

/// Resolves the leader for a Version 2 run, recording an election if one
/// takes place.
fn choose_leader(
    rule: LeaderRule,
    pair: usize,
    chooser: &mut dyn Chooser,
    transcript: &mut Transcript,
) -> Color {
    match rule {
        LeaderRule::FixedRed => Color::Red,
        LeaderRule::FixedYellow => Color::Yellow,
        LeaderRule::CoinElection => {
            let bits = [chooser.choose(2) as u8, chooser.choose(2) as u8];
            let leader = elect_leader(bits[0], bits[1]).color();
            transcript.push(GENERATION_TIME, EventKind::Election { pair, bits, leader });
            leader
        }
    }
}

/// Version 2: elect a leader, let it answer from its marginal on the
/// 1..N grid, broadcast, and let the twin answer with the conditional.
pub fn run_version2(
    tables: &ConfigTables,
    strategy: &Strategy,
    birth: PairBirth,
    chooser: &mut dyn Chooser,
) -> Result<Transcript> {
    strategy.validate()?;
    let mut transcript = Transcript::new();
    let run = PairRun { tables, birth };
    run.record_birth(&mut transcript);
    let leader = choose_leader(strategy.leader_rule, birth.pair, chooser, &mut transcript);
    let (index, message) = run.lead(leader, chooser, &mut transcript);
    let follower = PhotonAgent::new(leader.twin(), birth.identity);
    let slot = FollowerSlot {
        agent: follower,
        pair: birth.pair,
        tables,
    };
    let pairing = deliver_and_pair(&[message], &[slot], strategy.pairing_rule, chooser)?;
    let offset = index;
    pairing.record(offset, &mut transcript);
    let matched = pairing.assignment[0].map(|m| (m + offset, &message));
    run.follow(leader.twin(), matched, chooser, &mut transcript);
    Ok(transcript)
}

/// A follower awaiting a message, with the tables of its own pair.
#[derive(Debug, Clone, Copy)]
pub struct FollowerSlot<'a> {
    pub agent: PhotonAgent,
    pub pair: usize,
    pub tables: &'a ConfigTables,
}

/// Message assignment for a set of followers.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    /// Index into the message list for each follower, in follower order.
    pub assignment: Vec<Option<usize>>,
    /// Delivery events (every message reaches every follower) followed by
    /// ambiguity events. Message indices are local to the call.
    pub events: Vec<EventKind>,
}

impl Pairing {
    fn record(&self, message_offset: usize, transcript: &mut Transcript) {
        for kind in &self.events {
            let kind = match *kind {
                EventKind::Delivery {
                    message,
                    to_pair,
                    region,
                } => EventKind::Delivery {
                    message: message + message_offset,
                    to_pair,
                    region,
                },
                ref other => other.clone(),
            };
            transcript.push(MEASUREMENT_TIME, kind);
        }
    }
}

/// Broadcast delivery plus the rule that decides which message each
/// follower acts on.
///
/// `ArrivalOrder` sorts messages by (timestamp, sender region, identity tag,
/// emission order) and followers by (region, identity tag, pair index), then
/// pairs them off in order. `Random` applies a uniform permutation to the
/// messages. A follower whose matched message names a detector outside its
/// own conditional table gets an ambiguity event.
pub fn deliver_and_pair(
    messages: &[Message],
    followers: &[FollowerSlot<'_>],
    rule: PairingRule,
    chooser: &mut dyn Chooser,
) -> Result<Pairing> {
    let mut events = Vec::new();
    for (m, _) in messages.iter().enumerate() {
        for f in followers {
            events.push(EventKind::Delivery {
                message: m,
                to_pair: f.pair,
                region: f.agent.region,
            });
        }
    }

    let assignment: Vec<Option<usize>> = match rule {
        PairingRule::ByIdentity => {
            if messages.iter().any(|m| m.identity_tag.is_none())
                || followers.iter().any(|f| f.agent.identity.is_none())
            {
                return Err(Error::MissingIdentity);
            }
            followers
                .iter()
                .map(|f| {
                    let tag = f.agent.identity.map(|id| id.tag);
                    messages.iter().position(|m| m.identity_tag == tag)
                })
                .collect()
        }
        PairingRule::ArrivalOrder => {
            let mut msg_order: Vec<usize> = (0..messages.len()).collect();
            msg_order.sort_by_key(|&i| {
                let m = &messages[i];
                (m.timestamp, m.sender_region, m.identity_tag, i)
            });
            let mut fol_order: Vec<usize> = (0..followers.len()).collect();
            fol_order.sort_by_key(|&i| {
                let f = &followers[i];
                (f.agent.region, f.agent.identity.map(|id| id.tag), f.pair, i)
            });
            let mut assignment = vec![None; followers.len()];
            for (&f, &m) in fol_order.iter().zip(&msg_order) {
                assignment[f] = Some(m);
            }
            assignment
        }
        PairingRule::Random => {
            let mut perm: Vec<usize> = (0..messages.len()).collect();
            for i in (1..perm.len()).rev() {
                let j = chooser.choose(i as u32 + 1) as usize;
                perm.swap(i, j);
            }
            (0..followers.len()).map(|f| perm.get(f).copied()).collect()
        }
    };

    for (f, slot) in followers.iter().enumerate() {
        let reported = assignment[f].map(|m| messages[m].reported_detector);
        let applicable = assignment[f].is_some_and(|m| {
            let msg = &messages[m];
            msg.sender_region != slot.agent.region
                && slot.tables.conditional_grid(msg.reported_detector).is_some()
        });
        if !applicable {
            events.push(EventKind::Ambiguity {
                pair: slot.pair,
                region: slot.agent.region,
                reported,
            });
        }
    }
    Ok(Pairing { assignment, events })
}

/// Several pairs measured at the same instant, every
/// leader broadcasting to every follower, one pairing decision for all.
pub fn run_simultaneous(
    pairs: &[(&ConfigTables, PairBirth)],
    leader: Color,
    rule: PairingRule,
    chooser: &mut dyn Chooser,
) -> Result<Transcript> {
    let mut transcript = Transcript::new();
    let runs: Vec<PairRun<'_>> = pairs
        .iter()
        .map(|&(tables, birth)| PairRun { tables, birth })
        .collect();
    for run in &runs {
        run.record_birth(&mut transcript);
    }
    let mut messages = Vec::with_capacity(runs.len());
    let offset = transcript.next_message_index();
    for run in &runs {
        let (_, message) = run.lead(leader, chooser, &mut transcript);
        messages.push(message);
    }
    let slots: Vec<FollowerSlot<'_>> = runs
        .iter()
        .map(|run| FollowerSlot {
            agent: PhotonAgent::new(leader.twin(), run.birth.identity),
            pair: run.birth.pair,
            tables: run.tables,
        })
        .collect();
    let pairing = deliver_and_pair(&messages, &slots, rule, chooser)?;
    pairing.record(offset, &mut transcript);
    for (run, assigned) in runs.iter().zip(&pairing.assignment) {
        let matched = assigned.map(|m| (m + offset, &messages[m]));
        run.follow(leader.twin(), matched, chooser, &mut transcript);
    }
    Ok(transcript)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Detector::*;

    fn e3_red() -> BTreeMap<Detector, f64> {
        BTreeMap::from([(CPlus, 5.0 / 6.0), (DPlus, 1.0 / 6.0)])
    }

    fn birth(origin: Crystal, tag: Option<u32>) -> PairBirth {
        PairBirth {
            pair: 0,
            origin,
            identity: tag.map(|tag| PairIdentity { tag, origin }),
            vote: None,
        }
    }

    fn choices(t: &Transcript) -> Vec<(Side, Detector)> {
        t.events()
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::LeaderChoice { region, detector, .. }
                | EventKind::FollowerChoice { region, detector, .. } => Some((region, detector)),
                _ => None,
            })
            .collect()
    }

    fn clashes(t: &Transcript) -> Vec<(Party, Detector, Crystal)> {
        t.events()
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Clash {
                    party,
                    detector,
                    origin,
                    ..
                } => Some((party, detector, origin)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn election_convention() {
        assert_eq!(elect_leader(0, 0), Node::One);
        assert_eq!(elect_leader(0, 1), Node::Two);
        assert_eq!(elect_leader(1, 0), Node::Two);
        assert_eq!(elect_leader(1, 1), Node::One);
        let ones = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .into_iter()
            .filter(|&(a, b)| elect_leader(a, b) == Node::One)
            .count();
        assert_eq!(ones, 2);
    }

    #[test]
    fn grid_rule() {
        assert_eq!(sample_on_grid(&e3_red(), 3), Ok(CPlus));
        assert_eq!(sample_on_grid(&e3_red(), 5), Ok(CPlus));
        assert_eq!(sample_on_grid(&e3_red(), 6), Ok(DPlus));
        let c_count = (1..=6)
            .filter(|&n| sample_on_grid(&e3_red(), n) == Ok(CPlus))
            .count();
        assert_eq!(c_count, 5);
        assert_eq!(
            sample_on_grid(&e3_red(), 7),
            Err(Error::DrawOutOfRange { draw: 7, size: 6 })
        );
    }

    #[test]
    fn grid_uses_least_common_denominator() {
        let g = Grid::from_weights(&BTreeMap::from([(CMinus, 0.9), (DMinus, 0.1)])).unwrap();
        assert_eq!(g.size(), 10);
        let g = Grid::from_weights(&BTreeMap::from([
            (CMinus, 0.5),
            (DMinus, 1.0 / 3.0),
            (UMinus, 1.0 / 6.0),
            (VMinus, 0.0),
        ]))
        .unwrap();
        assert_eq!(g.size(), 6);
        assert_eq!(g.cells(), &[(CMinus, 3), (DMinus, 2), (UMinus, 1)]);
        assert!(Grid::from_weights(&BTreeMap::from([
            (CMinus, 1.0 / std::f64::consts::PI),
            (DMinus, 1.0 - 1.0 / std::f64::consts::PI)
        ]))
        .is_err());
    }

    #[test]
    fn identity_assignment() {
        let mut counter = 1;
        let mut ch = ScriptedChooser::new([]);
        let (id, vote) = assign_identity(IdentityMode::PerPair, Crystal::X1, &mut counter, &mut ch).unwrap();
        assert_eq!(id, PairIdentity { tag: 1, origin: Crystal::X1 });
        assert!(vote.is_none());
        assert_eq!(counter, 2);

        let mut ch = ScriptedChooser::new([1, 1, 1]);
        let (id, vote) =
            assign_identity(IdentityMode::TripleVote, Crystal::X3, &mut counter, &mut ch).unwrap();
        assert_eq!(id.origin, Crystal::X2);
        assert_eq!(vote.unwrap().votes, [1, 1, 1]);
        assert_eq!(counter, 5);

        // split vote: first voter decides; two-to-one: majority
        let mut ch = ScriptedChooser::new([2, 0, 1]);
        let (id, _) = assign_identity(IdentityMode::TripleVote, Crystal::X1, &mut counter, &mut ch).unwrap();
        assert_eq!(id.origin, Crystal::X3);
        let mut ch = ScriptedChooser::new([2, 0, 0]);
        let (id, _) = assign_identity(IdentityMode::TripleVote, Crystal::X1, &mut counter, &mut ch).unwrap();
        assert_eq!(id.origin, Crystal::X1);

        assert!(assign_identity(IdentityMode::None, Crystal::X1, &mut counter, &mut ch).is_none());
    }

    #[test]
    fn version1_roles_follow_detector_placement() {
        let e1 = ConfigTables::new(DetectorConfig::E1).unwrap();
        // draw 1 of 6 -> C+, then follower grid given C+ is {V-: 4/5, U-: 1/5}
        let mut ch = ScriptedChooser::new([0, 0]);
        let t = run_version1(&e1, birth(Crystal::X1, None), &mut ch);
        assert!(ch.exhausted());
        assert_eq!(choices(&t), vec![(Side::RPlus, CPlus), (Side::RMinus, UMinus)]);
        let broadcast = t
            .events()
            .iter()
            .find_map(|e| match e.kind {
                EventKind::Broadcast { message, .. } => Some(message),
                _ => None,
            })
            .unwrap();
        assert_eq!(broadcast.sender_region, Side::RPlus);
        assert!(!t.has_deadlock());
        t.check_conformance().unwrap();

        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        let mut ch = ScriptedChooser::new([5, 0]);
        let t = run_version1(&e2, birth(Crystal::X1, None), &mut ch);
        assert_eq!(choices(&t)[0].0, Side::RMinus);
    }

    #[test]
    fn version1_deadlocks_without_exactly_one_intercepted_side() {
        for config in [DetectorConfig::E3, DetectorConfig::H] {
            let tables = ConfigTables::new(config).unwrap();
            let grid = tables.marginal_grid(Side::RPlus).size();
            let mut ch = ScriptedChooser::new([0, grid - 1]);
            let t = run_version1(&tables, birth(Crystal::X2, None), &mut ch);
            assert!(t.has_deadlock());
            let leaders = t
                .events()
                .iter()
                .filter(|e| matches!(e.kind, EventKind::LeaderChoice { .. }))
                .count();
            assert_eq!(leaders, 2);
            t.check_conformance().unwrap();
        }
    }

    #[test]
    fn yellow_leader_d_minus_clashes_for_x1_pair() {
        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        let strategy = Strategy {
            version: Version::V2,
            leader_rule: LeaderRule::FixedYellow,
            identity_mode: IdentityMode::PerPair,
            pairing_rule: PairingRule::ByIdentity,
        };
        // yellow grid is {C-: 5, D-: 1}; draw 6 -> D-; follower grid {U+: 1}
        let mut ch = ScriptedChooser::new([5, 0]);
        let t = run_version2(&e2, &strategy, birth(Crystal::X1, Some(1)), &mut ch).unwrap();
        assert_eq!(choices(&t), vec![(Side::RMinus, DMinus), (Side::RPlus, UPlus)]);
        assert_eq!(
            clashes(&t),
            vec![
                (Party::Leader, UPlus, Crystal::X1),
                (Party::Follower, UPlus, Crystal::X1)
            ]
        );
        t.check_conformance().unwrap();
    }

    #[test]
    fn red_leader_u_plus_clashes_on_itself() {
        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        let strategy = Strategy {
            version: Version::V2,
            leader_rule: LeaderRule::FixedRed,
            identity_mode: IdentityMode::PerPair,
            pairing_rule: PairingRule::ByIdentity,
        };
        // red marginal of E2: {U+: 1/3, V+: 2/3} -> cells U+ 1, V+ 2
        assert_eq!(e2.marginal_grid(Side::RPlus).cells(), &[(UPlus, 1), (VPlus, 2)]);
        let mut ch = ScriptedChooser::new([0, 0]);
        let t = run_version2(&e2, &strategy, birth(Crystal::X1, Some(1)), &mut ch).unwrap();
        assert_eq!(choices(&t)[0], (Side::RPlus, UPlus));
        assert_eq!(clashes(&t)[0], (Party::Leader, UPlus, Crystal::X1));
    }

    #[test]
    fn no_identity_means_no_clash() {
        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        let strategy = Strategy {
            leader_rule: LeaderRule::FixedYellow,
            ..Strategy::default()
        };
        let mut ch = ScriptedChooser::new([5, 0]);
        let t = run_version2(&e2, &strategy, birth(Crystal::X1, None), &mut ch).unwrap();
        assert!(clashes(&t).is_empty());
    }

    #[test]
    fn triple_vote_binds_follower_to_elected_branch() {
        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        let strategy = Strategy {
            version: Version::V2,
            leader_rule: LeaderRule::FixedYellow,
            identity_mode: IdentityMode::TripleVote,
            pairing_rule: PairingRule::ByIdentity,
        };
        let mut counter = 1;
        // origin X2, votes all for candidate X1, leader D-, follower forced U+
        let mut ch = ScriptedChooser::new([1, 0, 0, 0, 5, 0]);
        let b = generate_pair(0, IdentityMode::TripleVote, &mut counter, &mut ch);
        assert_eq!(b.identity.unwrap().origin, Crystal::X1);
        let t = run_version2(&e2, &strategy, b, &mut ch).unwrap();
        assert!(ch.exhausted());
        // U+ is not reachable from X1, so the bound photon fires V+
        assert_eq!(choices(&t), vec![(Side::RMinus, DMinus), (Side::RPlus, VPlus)]);
        assert!(e2.joint.probability(VPlus, DMinus) < ZERO_THRESHOLD);
    }

    #[test]
    fn by_identity_requires_tags() {
        let e3 = ConfigTables::new(DetectorConfig::E3).unwrap();
        let msg = Message {
            sender_region: Side::RMinus,
            reported_detector: CMinus,
            identity_tag: None,
            timestamp: MEASUREMENT_TIME,
        };
        let slot = FollowerSlot {
            agent: PhotonAgent::new(Color::Red, None),
            pair: 0,
            tables: &e3,
        };
        let mut ch = ScriptedChooser::new([]);
        assert_eq!(
            deliver_and_pair(&[msg], &[slot], PairingRule::ByIdentity, &mut ch),
            Err(Error::MissingIdentity)
        );
        let bad = Strategy {
            pairing_rule: PairingRule::ByIdentity,
            identity_mode: IdentityMode::None,
            ..Strategy::default()
        };
        assert!(bad.validate().is_err());
    }

    fn double_pair_inputs(tags: bool) -> (ConfigTables, ConfigTables, [Message; 2]) {
        let early = ConfigTables::new(DetectorConfig::E3).unwrap();
        let later = ConfigTables::new(DetectorConfig::H).unwrap();
        let msgs = [
            Message {
                sender_region: Side::RMinus,
                reported_detector: DMinus,
                identity_tag: tags.then_some(1),
                timestamp: MEASUREMENT_TIME,
            },
            Message {
                sender_region: Side::RMinus,
                reported_detector: UMinus,
                identity_tag: tags.then_some(2),
                timestamp: MEASUREMENT_TIME,
            },
        ];
        (early, later, msgs)
    }

    #[test]
    fn tagged_messages_match_exactly() {
        let (early, later, msgs) = double_pair_inputs(true);
        let slots = [
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, Some(PairIdentity { tag: 2, origin: Crystal::X1 })),
                pair: 1,
                tables: &later,
            },
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, Some(PairIdentity { tag: 1, origin: Crystal::X3 })),
                pair: 0,
                tables: &early,
            },
        ];
        let mut ch = ScriptedChooser::new([]);
        let p = deliver_and_pair(&msgs, &slots, PairingRule::ByIdentity, &mut ch).unwrap();
        assert_eq!(p.assignment, vec![Some(1), Some(0)]);
        assert!(!p.events.iter().any(|e| matches!(e, EventKind::Ambiguity { .. })));
        let deliveries = p
            .events
            .iter()
            .filter(|e| matches!(e, EventKind::Delivery { .. }))
            .count();
        assert_eq!(deliveries, 4);
    }

    #[test]
    fn random_pairing_cross_matches_half_the_time() {
        let (early, later, msgs) = double_pair_inputs(false);
        let slots = [
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, None),
                pair: 0,
                tables: &early,
            },
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, None),
                pair: 1,
                tables: &later,
            },
        ];
        let mut crossed = 0;
        for draw in 0..2 {
            let mut ch = ScriptedChooser::new([draw]);
            let p = deliver_and_pair(&msgs, &slots, PairingRule::Random, &mut ch).unwrap();
            if p.assignment == vec![Some(1), Some(0)] {
                crossed += 1;
                let ambiguous = p
                    .events
                    .iter()
                    .filter(|e| matches!(e, EventKind::Ambiguity { .. }))
                    .count();
                assert_eq!(ambiguous, 2);
            }
        }
        assert_eq!(crossed, 1);
    }

    #[test]
    fn cross_matched_reports_demand_different_answers() {
        // the later pair's red photon sits at U+/V+ (H tables)
        let later = ConfigTables::new(DetectorConfig::H).unwrap();
        let from_own_twin = later.conditional_grid(UMinus).unwrap();
        assert_eq!(from_own_twin.cells(), &[(VPlus, 1)]);
        // "D-" has a quantum answer only under E3 tables, and in E2 it forces U+
        assert!(later.conditional_grid(DMinus).is_none());
        let e2 = ConfigTables::new(DetectorConfig::E2).unwrap();
        assert_eq!(e2.conditional_grid(DMinus).unwrap().cells(), &[(UPlus, 1)]);
    }

    #[test]
    fn arrival_order_breaks_ties_by_identity() {
        let (early, later, msgs) = double_pair_inputs(true);
        let swapped = [msgs[1], msgs[0]];
        let slots = [
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, Some(PairIdentity { tag: 1, origin: Crystal::X1 })),
                pair: 0,
                tables: &early,
            },
            FollowerSlot {
                agent: PhotonAgent::new(Color::Red, Some(PairIdentity { tag: 2, origin: Crystal::X1 })),
                pair: 1,
                tables: &later,
            },
        ];
        let mut ch = ScriptedChooser::new([]);
        let p = deliver_and_pair(&swapped, &slots, PairingRule::ArrivalOrder, &mut ch).unwrap();
        assert_eq!(p.assignment, vec![Some(1), Some(0)]);
    }

    #[test]
    fn transcript_jsonl_round_trip() {
        let e3 = ConfigTables::new(DetectorConfig::E3).unwrap();
        let strategy = Strategy {
            identity_mode: IdentityMode::TripleVote,
            ..Strategy::default()
        };
        let mut counter = 1;
        let mut ch = RngChooser(<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7));
        let b = generate_pair(0, strategy.identity_mode, &mut counter, &mut ch);
        let t = run_version2(&e3, &strategy, b, &mut ch).unwrap();
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), t.events().len());
        assert_eq!(Transcript::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn conformance_catches_non_local_message() {
        let mut t = Transcript::new();
        t.push(
            MEASUREMENT_TIME,
            EventKind::LeaderChoice {
                pair: 0,
                region: Side::RPlus,
                detector: CPlus,
                draw: 1,
                grid: 6,
            },
        );
        t.push(
            MEASUREMENT_TIME,
            EventKind::Broadcast {
                pair: 0,
                message: Message {
                    sender_region: Side::RPlus,
                    reported_detector: CMinus,
                    identity_tag: None,
                    timestamp: MEASUREMENT_TIME,
                },
            },
        );
        assert!(t.check_conformance().is_err());
    }
}
