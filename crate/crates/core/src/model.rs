//! Core domain types: stations, network topology, fare-gate records, train
//! runs and the per-segment decomposition of a journey.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub transfer: bool,
}

/// A line together with its running direction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineKey {
    pub line: String,
    pub direction: String,
}

impl LineKey {
    pub fn new(line: impl Into<String>, direction: impl Into<String>) -> Self {
        Self {
            line: line.into(),
            direction: direction.into(),
        }
    }
}

impl fmt::Display for LineKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.line, self.direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSequence {
    pub line: String,
    pub direction: String,
    pub stations: Vec<String>,
}

impl LineSequence {
    pub fn key(&self) -> LineKey {
        LineKey::new(&self.line, &self.direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLink {
    pub station: String,
    pub line_a: String,
    pub line_b: String,
    pub min_transfer_seconds: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteLeg {
    pub line: String,
    pub direction: String,
    pub board: String,
    pub alight: String,
}

impl RouteLeg {
    pub fn line_key(&self) -> LineKey {
        LineKey::new(&self.line, &self.direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub origin: String,
    pub destination: String,
    pub legs: Vec<RouteLeg>,
}

/// On-disk shape of the topology file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub stations: Vec<Station>,
    pub lines: Vec<LineSequence>,
    #[serde(default)]
    pub transfer_links: Vec<TransferLink>,
    #[serde(default)]
    pub routes: Vec<Route>,
}

/// Validated network topology. Deserializing one runs every structural check.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc", into = "TopologyDoc")]
pub struct NetworkTopology {
    doc: TopologyDoc,
    station_index: HashMap<String, usize>,
    route_index: HashMap<(String, String), usize>,
}

impl PartialEq for NetworkTopology {
    fn eq(&self, other: &Self) -> bool {
        self.doc.stations == other.doc.stations
            && self.doc.lines == other.doc.lines
            && self.doc.transfer_links == other.doc.transfer_links
            && self.doc.routes == other.doc.routes
    }
}

impl From<NetworkTopology> for TopologyDoc {
    fn from(t: NetworkTopology) -> Self {
        t.doc
    }
}

impl TryFrom<TopologyDoc> for NetworkTopology {
    type Error = Error;

    fn try_from(doc: TopologyDoc) -> Result<Self> {
        NetworkTopology::new(doc)
    }
}

impl NetworkTopology {
    pub fn new(doc: TopologyDoc) -> Result<Self> {
        let mut station_index = HashMap::new();
        for (i, s) in doc.stations.iter().enumerate() {
            if station_index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Topology(format!("duplicate station id {:?}", s.id)));
            }
        }

        let mut seen_lines = HashSet::new();
        for l in &doc.lines {
            if !seen_lines.insert(l.key()) {
                return Err(Error::Topology(format!("line {} declared twice", l.key())));
            }
            if l.stations.len() < 2 {
                return Err(Error::Topology(format!("line {} has fewer than two stations", l.key())));
            }
            let mut on_line = HashSet::new();
            for s in &l.stations {
                if !station_index.contains_key(s) {
                    return Err(Error::Topology(format!("line {} references unknown station {s:?}", l.key())));
                }
                if !on_line.insert(s) {
                    return Err(Error::Topology(format!("line {} visits {s:?} twice", l.key())));
                }
            }
        }

        for t in &doc.transfer_links {
            if !station_index.contains_key(&t.station) {
                return Err(Error::Topology(format!("transfer link at unknown station {:?}", t.station)));
            }
            if t.min_transfer_seconds < 0 {
                return Err(Error::Topology(format!("negative transfer time at {:?}", t.station)));
            }
        }

        let mut topo = NetworkTopology {
            doc,
            station_index,
            route_index: HashMap::new(),
        };

        let mut route_index = HashMap::new();
        for (i, r) in topo.doc.routes.iter().enumerate() {
            topo.check_route(r)?;
            if route_index
                .insert((r.origin.clone(), r.destination.clone()), i)
                .is_some()
            {
                return Err(Error::Topology(format!(
                    "more than one route for OD {} -> {}",
                    r.origin, r.destination
                )));
            }
        }
        topo.route_index = route_index;
        Ok(topo)
    }

    fn check_route(&self, r: &Route) -> Result<()> {
        let od = format!("{} -> {}", r.origin, r.destination);
        if r.origin == r.destination {
            return Err(Error::Topology(format!("route {od} has identical endpoints")));
        }
        let (first, last) = match (r.legs.first(), r.legs.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Topology(format!("route {od} has no legs"))),
        };
        if first.board != r.origin || last.alight != r.destination {
            return Err(Error::Topology(format!("route {od} legs do not start/end at the OD stations")));
        }
        for leg in &r.legs {
            let seq = self
                .line(&leg.line_key())
                .ok_or_else(|| Error::Topology(format!("route {od} uses unknown line {}", leg.line_key())))?;
            let b = seq.stations.iter().position(|s| *s == leg.board);
            let a = seq.stations.iter().position(|s| *s == leg.alight);
            match (b, a) {
                (Some(b), Some(a)) if b < a => {}
                _ => {
                    return Err(Error::Topology(format!(
                        "route {od}: {} -> {} is not a forward run of line {}",
                        leg.board,
                        leg.alight,
                        leg.line_key()
                    )))
                }
            }
        }
        for pair in r.legs.windows(2) {
            if pair[0].alight != pair[1].board {
                return Err(Error::Topology(format!(
                    "route {od}: leg ending at {} is followed by a leg starting at {}",
                    pair[0].alight, pair[1].board
                )));
            }
            if self
                .min_transfer(&pair[0].alight, &pair[0].line, &pair[1].line)
                .is_none()
            {
                return Err(Error::Topology(format!(
                    "route {od}: no transfer link at {} between {} and {}",
                    pair[0].alight, pair[0].line, pair[1].line
                )));
            }
        }
        Ok(())
    }

    pub fn doc(&self) -> &TopologyDoc {
        &self.doc
    }

    pub fn stations(&self) -> &[Station] {
        &self.doc.stations
    }

    pub fn lines(&self) -> &[LineSequence] {
        &self.doc.lines
    }

    pub fn routes(&self) -> &[Route] {
        &self.doc.routes
    }

    pub fn transfer_links(&self) -> &[TransferLink] {
        &self.doc.transfer_links
    }

    pub fn has_station(&self, id: &str) -> bool {
        self.station_index.contains_key(id)
    }

    pub fn line(&self, key: &LineKey) -> Option<&LineSequence> {
        self.doc
            .lines
            .iter()
            .find(|l| l.line == key.line && l.direction == key.direction)
    }

    pub fn route(&self, origin: &str, destination: &str) -> Option<&Route> {
        self.route_index
            .get(&(origin.to_string(), destination.to_string()))
            .map(|&i| &self.doc.routes[i])
    }

    /// Minimum walk between two lines at a station; links are undirected.
    pub fn min_transfer(&self, station: &str, line_a: &str, line_b: &str) -> Option<i64> {
        self.doc
            .transfer_links
            .iter()
            .find(|t| {
                t.station == station
                    && ((t.line_a == line_a && t.line_b == line_b)
                        || (t.line_a == line_b && t.line_b == line_a))
            })
            .map(|t| t.min_transfer_seconds)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfcRecord {
    pub passenger_id: String,
    pub entry_station: String,
    pub entry_time: Timestamp,
    pub exit_station: String,
    pub exit_time: Timestamp,
}

impl AfcRecord {
    pub fn journey_span(&self) -> i64 {
        self.exit_time - self.entry_time
    }

    pub fn od_key(&self) -> String {
        od_key(&self.entry_station, &self.exit_station)
    }
}

pub fn od_key(origin: &str, destination: &str) -> String {
    format!("{origin}->{destination}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stop {
    pub station: String,
    pub arrival: Timestamp,
    pub departure: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRun {
    pub train_id: String,
    pub line: LineKey,
    pub stops: Vec<Stop>,
}

impl TrainRun {
    /// Checks dwell (DT >= AT) and strict forward progress between stops.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.stops.is_empty() {
            return Err("train has no stops".into());
        }
        for s in &self.stops {
            if s.departure < s.arrival {
                return Err(format!("departure before arrival at {}", s.station));
            }
        }
        for w in self.stops.windows(2) {
            if w[1].arrival <= w[0].departure {
                return Err(format!(
                    "non-increasing times between {} and {}",
                    w[0].station, w[1].station
                ));
            }
        }
        Ok(())
    }

    /// (departure at `board`, arrival at `alight`) if the run serves both in that order.
    pub fn leg_times(&self, board: &str, alight: &str) -> Option<(Timestamp, Timestamp)> {
        let b = self.stops.iter().position(|s| s.station == board)?;
        let a = self.stops[b + 1..].iter().position(|s| s.station == alight)? + b + 1;
        Some((self.stops[b].departure, self.stops[a].arrival))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripSegment {
    /// 1-based position within the journey.
    pub index: usize,
    pub board_station: String,
    pub alight_station: String,
    pub line: LineKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TravelRecord {
    pub afc: AfcRecord,
    pub segments: Vec<TripSegment>,
}

impl TravelRecord {
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn is_transfer(&self) -> bool {
        self.segments.len() > 1
    }

    pub fn route_key(&self) -> String {
        self.afc.od_key()
    }

    /// Spatial chaining: first board = entry, last alight = exit, and
    /// consecutive segments meet at the same station.
    pub fn is_chained(&self) -> bool {
        let (Some(first), Some(last)) = (self.segments.first(), self.segments.last()) else {
            return false;
        };
        first.board_station == self.afc.entry_station
            && last.alight_station == self.afc.exit_station
            && self
                .segments
                .windows(2)
                .all(|w| w[0].alight_station == w[1].board_station)
            && self.segments.iter().all(|s| s.board_station != s.alight_station)
            && self.segments.iter().enumerate().all(|(i, s)| s.index == i + 1)
    }
}

/// Cuts a fare-gate record at the transfer stations of its OD route.
pub fn segment_record(afc: &AfcRecord, topo: &NetworkTopology) -> Result<TravelRecord> {
    let route = topo
        .route(&afc.entry_station, &afc.exit_station)
        .ok_or_else(|| Error::UnroutableOd {
            origin: afc.entry_station.clone(),
            destination: afc.exit_station.clone(),
        })?;
    let segments = route
        .legs
        .iter()
        .enumerate()
        .map(|(i, leg)| TripSegment {
            index: i + 1,
            board_station: leg.board.clone(),
            alight_station: leg.alight.clone(),
            line: leg.line_key(),
        })
        .collect();
    Ok(TravelRecord {
        afc: afc.clone(),
        segments,
    })
}

/// Minimum transfer seconds at each segment boundary of a record.
pub fn boundary_transfers(rec: &TravelRecord, topo: &NetworkTopology) -> Vec<i64> {
    rec.segments
        .windows(2)
        .map(|w| {
            topo.min_transfer(&w[0].alight_station, &w[0].line.line, &w[1].line.line)
                .unwrap_or(0)
        })
        .collect()
}

/// Train runs indexed by line, each list sorted by first departure.
pub fn index_runs(runs: &[TrainRun]) -> BTreeMap<LineKey, Vec<&TrainRun>> {
    let mut by_line: BTreeMap<LineKey, Vec<&TrainRun>> = BTreeMap::new();
    for r in runs {
        by_line.entry(r.line.clone()).or_default().push(r);
    }
    for list in by_line.values_mut() {
        list.sort_by(|a, b| {
            a.stops[0]
                .departure
                .cmp(&b.stops[0].departure)
                .then_with(|| a.train_id.cmp(&b.train_id))
        });
    }
    by_line
}
