//! Discrete-event ground-truth generator.
//!
//! Trains run on a jittered headway; passengers walk to the platform, queue
//! FIFO, and board the first departing train with spare room. Every train a
//! waiting passenger cannot board counts one left-behind event. The emitted
//! fare-gate and train-event files carry no trace of the assignment, which
//! goes to a separate ground-truth file.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AfcRecord, LineKey, NetworkTopology, Stop, TrainRun};
use crate::time::Timestamp;

const DEFAULT_SCENARIO: &str = include_str!("../data/default_scenario.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub mean: f64,
    pub sd: f64,
    /// Draws below this many seconds are redrawn.
    pub min: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkTable {
    pub default: WalkSpec,
    #[serde(default)]
    pub by_station: BTreeMap<String, WalkSpec>,
}

impl WalkTable {
    pub fn at(&self, station: &str) -> &WalkSpec {
        self.by_station.get(station).unwrap_or(&self.default)
    }

    fn specs(&self) -> impl Iterator<Item = &WalkSpec> {
        std::iter::once(&self.default).chain(self.by_station.values())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkShape {
    #[default]
    Normal,
    Lognormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineService {
    pub line: String,
    pub direction: String,
    #[serde(with = "crate::time::iso")]
    pub first_departure: Timestamp,
    pub headway_s: i64,
    pub runs: usize,
    /// Running seconds of each link, first station onwards.
    pub link_run_s: Vec<i64>,
    #[serde(default)]
    pub dwell_s: i64,
    /// Dispatch offsets are uniform in `[-j, j]`.
    #[serde(default)]
    pub headway_jitter_s: i64,
    /// Passengers per train; `None` is unlimited.
    #[serde(default)]
    pub capacity: Option<u32>,
}

impl LineService {
    pub fn key(&self) -> LineKey {
        LineKey::new(&self.line, &self.direction)
    }

    pub fn train_id(&self, run: usize) -> String {
        format!("{}-{}-{:03}", self.line, self.direction, run + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandWindow {
    #[serde(with = "crate::time::iso")]
    pub start: Timestamp,
    #[serde(with = "crate::time::iso")]
    pub end: Timestamp,
    pub passengers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdDemand {
    pub origin: String,
    pub destination: String,
    pub windows: Vec<DemandWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub topology: NetworkTopology,
    pub services: Vec<LineService>,
    /// Per-train capacity, keyed by train id; zero is allowed here.
    #[serde(default)]
    pub capacity_overrides: BTreeMap<String, u32>,
    pub access_walk: WalkTable,
    pub transfer_walk: WalkTable,
    pub egress_walk: WalkTable,
    #[serde(default)]
    pub walk_shape: WalkShape,
    pub demand: Vec<OdDemand>,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// Two lines, ten stations, 2 h of demand on one transfer and one
    /// single-line OD.
    pub fn default_scenario() -> Self {
        serde_json::from_str(DEFAULT_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        for s in &self.services {
            let Some(seq) = self.topology.line(&s.key()) else {
                return bad(format!("service {} is not a topology line", s.key()));
            };
            if s.headway_s <= 0 || s.runs == 0 {
                return bad(format!("service {}: headway and run count must be positive", s.key()));
            }
            if s.link_run_s.len() + 1 != seq.stations.len() || s.link_run_s.iter().any(|&r| r <= 0) {
                return bad(format!("service {}: need one positive running time per link", s.key()));
            }
            if s.dwell_s < 0 || s.headway_jitter_s < 0 || 2 * s.headway_jitter_s >= s.headway_s {
                return bad(format!("service {}: dwell/jitter out of range", s.key()));
            }
            if s.capacity == Some(0) {
                return bad(format!("service {}: capacity must be positive", s.key()));
            }
        }
        for w in [&self.access_walk, &self.transfer_walk, &self.egress_walk] {
            if w.specs().any(|s| !(s.mean > 0.0) || !(s.sd >= 0.0) || s.min < 0 || (s.min as f64) > s.mean + 4.0 * s.sd) {
                return bad("walk distributions need mean > 0, sd >= 0 and a floor below the bulk".into());
            }
        }
        for d in &self.demand {
            let Some(route) = self.topology.route(&d.origin, &d.destination) else {
                return bad(format!("no route for {}->{}", d.origin, d.destination));
            };
            for leg in &route.legs {
                if !self.services.iter().any(|s| s.key() == leg.line_key()) {
                    return bad(format!("no service runs {}", leg.line_key()));
                }
            }
            if d.windows.iter().any(|w| w.end <= w.start) {
                return bad(format!("empty demand window for {}->{}", d.origin, d.destination));
            }
        }
        Ok(())
    }

    pub fn total_passengers(&self) -> usize {
        self.demand.iter().flat_map(|d| &d.windows).map(|w| w.passengers).sum()
    }
}

/// True assignment of one passenger on one segment. Record-level times are
/// repeated on every segment row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthSegment {
    pub passenger_id: String,
    pub segment: usize,
    pub train_id: String,
    #[serde(with = "crate::time::iso")]
    pub platform_arrival: Timestamp,
    #[serde(with = "crate::time::iso")]
    pub board_time: Timestamp,
    #[serde(with = "crate::time::iso")]
    pub alight_time: Timestamp,
    /// Gate entry to first boarding.
    pub access_s: i64,
    /// Alighting here to boarding the next segment; empty on the last.
    pub transfer_s: Option<i64>,
    /// Last alighting to gate exit.
    pub egress_s: i64,
    pub left_behind: usize,
}

pub fn write_truth<W: Write>(writer: W, truth: &[TruthSegment]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in truth {
        w.serialize(t)?;
    }
    w.flush()
}

pub fn read_truth<R: Read>(reader: R) -> std::result::Result<Vec<TruthSegment>, String> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| e.to_string())
}

/// Onboard count as a train leaves a stop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadEvent {
    pub train_id: String,
    pub station: String,
    pub onboard: usize,
    pub capacity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub afc: Vec<AfcRecord>,
    pub runs: Vec<TrainRun>,
    pub truth: Vec<TruthSegment>,
    pub loads: Vec<LoadEvent>,
    /// Passengers still waiting when the last train left.
    pub dropped: usize,
}

impl SimOutput {
    /// Share of delivered passengers left behind at least once.
    pub fn left_behind_incidence(&self) -> f64 {
        let mut by_pax: BTreeMap<&str, bool> = BTreeMap::new();
        for t in &self.truth {
            *by_pax.entry(&t.passenger_id).or_default() |= t.left_behind > 0;
        }
        if by_pax.is_empty() {
            return 0.0;
        }
        by_pax.values().filter(|&&b| b).count() as f64 / by_pax.len() as f64
    }
}

fn draw_walk(rng: &mut ChaCha8Rng, spec: &WalkSpec, shape: WalkShape) -> i64 {
    let floor = spec.min as f64;
    for _ in 0..10_000 {
        let x = match shape {
            WalkShape::Normal => Normal::new(spec.mean, spec.sd).map(|d| d.sample(rng)).unwrap_or(spec.mean),
            WalkShape::Lognormal => {
                let s2 = (1.0 + (spec.sd / spec.mean).powi(2)).ln();
                LogNormal::new(spec.mean.ln() - s2 / 2.0, s2.sqrt())
                    .map(|d| d.sample(rng))
                    .unwrap_or(spec.mean)
            }
        };
        if x >= floor {
            return (x.round() as i64).max(spec.min);
        }
    }
    spec.min
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Arrive { run: usize, stop: usize },
    Platform { pax: usize },
    Depart { run: usize, stop: usize },
}

impl Kind {
    // alight first, then newly arrived passengers join the queue, then board
    fn priority(&self) -> u8 {
        match self {
            Kind::Arrive { .. } => 0,
            Kind::Platform { .. } => 1,
            Kind::Depart { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Timestamp,
    priority: u8,
    seq: u64,
    kind: Kind,
}

struct Leg {
    service: usize,
    board: usize,
    alight: usize,
}

struct Passenger {
    origin: String,
    destination: String,
    entry: Timestamp,
    access: i64,
    transfers: Vec<i64>,
    egress: i64,
    legs: Vec<Leg>,
    current: usize,
    platform: Vec<Timestamp>,
    boarded: Vec<(usize, Timestamp)>,
    alighted: Vec<Timestamp>,
    left_behind: Vec<usize>,
    exit: Option<Timestamp>,
}

struct Sim {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl Sim {
    fn push(&mut self, time: Timestamp, kind: Kind) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            priority: kind.priority(),
            seq: self.seq,
            kind,
        }));
    }
}

/// Runs the scenario. Output depends only on `cfg` (seed included).
pub fn generate(cfg: &ScenarioConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topo = &cfg.topology;

    // timetable
    let mut runs: Vec<TrainRun> = Vec::new();
    let mut run_service: Vec<usize> = Vec::new();
    let mut capacity: Vec<Option<u32>> = Vec::new();
    for (si, s) in cfg.services.iter().enumerate() {
        let stations = &topo.line(&s.key()).expect("validated").stations;
        for r in 0..s.runs {
            let jitter = if s.headway_jitter_s > 0 {
                rng.gen_range(-s.headway_jitter_s..=s.headway_jitter_s)
            } else {
                0
            };
            let mut t = s.first_departure + r as i64 * s.headway_s + jitter;
            let mut stops = Vec::with_capacity(stations.len());
            for (k, st) in stations.iter().enumerate() {
                if k > 0 {
                    t += s.link_run_s[k - 1];
                }
                stops.push(Stop {
                    station: st.clone(),
                    arrival: t,
                    departure: t + s.dwell_s,
                });
                t += s.dwell_s;
            }
            let id = s.train_id(r);
            capacity.push(cfg.capacity_overrides.get(&id).copied().or(s.capacity));
            runs.push(TrainRun {
                train_id: id,
                line: s.key(),
                stops,
            });
            run_service.push(si);
        }
    }

    // passengers, drawn in demand order then sorted by entry time
    let mut pax: Vec<Passenger> = Vec::with_capacity(cfg.total_passengers());
    for d in &cfg.demand {
        let route = topo.route(&d.origin, &d.destination).expect("validated");
        for w in &d.windows {
            for _ in 0..w.passengers {
                let entry = rng.gen_range(w.start..w.end);
                let access = draw_walk(&mut rng, cfg.access_walk.at(&d.origin), cfg.walk_shape);
                let transfers: Vec<i64> = route.legs[1..]
                    .iter()
                    .map(|l| draw_walk(&mut rng, cfg.transfer_walk.at(&l.board), cfg.walk_shape))
                    .collect();
                let egress = draw_walk(&mut rng, cfg.egress_walk.at(&d.destination), cfg.walk_shape);
                let legs = route
                    .legs
                    .iter()
                    .map(|l| {
                        let service = cfg.services.iter().position(|s| s.key() == l.line_key()).expect("validated");
                        let seq = &topo.line(&l.line_key()).expect("validated").stations;
                        let pos = |st: &str| seq.iter().position(|x| x == st).expect("validated");
                        Leg {
                            service,
                            board: pos(&l.board),
                            alight: pos(&l.alight),
                        }
                    })
                    .collect::<Vec<_>>();
                let n = legs.len();
                pax.push(Passenger {
                    origin: d.origin.clone(),
                    destination: d.destination.clone(),
                    entry,
                    access,
                    transfers,
                    egress,
                    legs,
                    current: 0,
                    platform: Vec::with_capacity(n),
                    boarded: Vec::with_capacity(n),
                    alighted: Vec::with_capacity(n),
                    left_behind: vec![0; n],
                    exit: None,
                });
            }
        }
    }
    pax.sort_by_key(|p| p.entry);

    let mut sim = Sim {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    for (ri, run) in runs.iter().enumerate() {
        for (k, st) in run.stops.iter().enumerate() {
            sim.push(st.arrival, Kind::Arrive { run: ri, stop: k });
            sim.push(st.departure, Kind::Depart { run: ri, stop: k });
        }
    }
    for (i, p) in pax.iter().enumerate() {
        sim.push(p.entry + p.access, Kind::Platform { pax: i });
    }

    let mut queues: Vec<Vec<VecDeque<usize>>> = cfg
        .services
        .iter()
        .map(|s| vec![VecDeque::new(); topo.line(&s.key()).expect("validated").stations.len()])
        .collect();
    let mut onboard: Vec<Vec<usize>> = vec![Vec::new(); runs.len()];
    let mut loads = Vec::new();

    while let Some(Reverse(ev)) = sim.heap.pop() {
        match ev.kind {
            Kind::Arrive { run, stop } => {
                let (off, stay): (Vec<usize>, Vec<usize>) = onboard[run]
                    .drain(..)
                    .partition(|&i| pax[i].legs[pax[i].current].alight == stop);
                onboard[run] = stay;
                for i in off {
                    let p = &mut pax[i];
                    p.alighted.push(ev.time);
                    if p.current + 1 < p.legs.len() {
                        let walk = p.transfers[p.current];
                        p.current += 1;
                        sim.push(ev.time + walk, Kind::Platform { pax: i });
                    } else {
                        p.exit = Some(ev.time + p.egress);
                    }
                }
            }
            Kind::Platform { pax: i } => {
                let p = &mut pax[i];
                p.platform.push(ev.time);
                let leg = &p.legs[p.current];
                queues[leg.service][leg.board].push_back(i);
            }
            Kind::Depart { run, stop } => {
                let queue = &mut queues[run_service[run]][stop];
                let room = match capacity[run] {
                    Some(c) => (c as usize).saturating_sub(onboard[run].len()),
                    None => usize::MAX,
                };
                let take = room.min(queue.len());
                for i in queue.drain(..take) {
                    pax[i].boarded.push((run, ev.time));
                    onboard[run].push(i);
                }
                for &i in queue.iter() {
                    let p = &mut pax[i];
                    p.left_behind[p.current] += 1;
                }
                loads.push(LoadEvent {
                    train_id: runs[run].train_id.clone(),
                    station: runs[run].stops[stop].station.clone(),
                    onboard: onboard[run].len(),
                    capacity: capacity[run],
                });
            }
        }
    }

    let mut afc = Vec::new();
    let mut truth = Vec::new();
    let mut dropped = 0;
    let mut next_id = 0;
    for p in &pax {
        let Some(exit) = p.exit else {
            dropped += 1;
            continue;
        };
        next_id += 1;
        let id = format!("p{next_id:06}");
        afc.push(AfcRecord {
            passenger_id: id.clone(),
            entry_station: p.origin.clone(),
            entry_time: p.entry,
            exit_station: p.destination.clone(),
            exit_time: exit,
        });
        let n = p.legs.len();
        for m in 0..n {
            let (run, dt) = p.boarded[m];
            truth.push(TruthSegment {
                passenger_id: id.clone(),
                segment: m + 1,
                train_id: runs[run].train_id.clone(),
                platform_arrival: p.platform[m],
                board_time: dt,
                alight_time: p.alighted[m],
                access_s: p.boarded[0].1 - p.entry,
                transfer_s: (m + 1 < n).then(|| p.boarded[m + 1].1 - p.alighted[m]),
                egress_s: exit - p.alighted[n - 1],
                left_behind: p.left_behind[m],
            });
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} passengers stranded after the last train");
    }
    Ok(SimOutput {
        afc,
        runs,
        truth,
        loads,
        dropped,
    })
}
