//! Train alternative sets per trip segment, and the observable/unknown split.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{boundary_transfers, LineKey, NetworkTopology, TrainRun, TravelRecord, TripSegment};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTrain {
    pub train_id: String,
    /// Departure from the segment's board station.
    pub dt: Timestamp,
    /// Arrival at the segment's alight station.
    pub at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// 1-based segment index.
    pub segment: usize,
    /// Ordered by departure time.
    pub trains: Vec<CandidateTrain>,
}

impl CandidateSet {
    /// `K = len - 1`, the largest possible left-behind count.
    pub fn capacity_index(&self) -> usize {
        self.trains.len().saturating_sub(1)
    }

    pub fn is_unique(&self) -> bool {
        self.trains.len() == 1
    }

    pub fn position(&self, train_id: &str) -> Option<usize> {
        self.trains.iter().position(|t| t.train_id == train_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ConstraintConfig {
    pub min_access_seconds: i64,
    pub min_egress_seconds: i64,
    /// Per-station overrides of the access minimum (keyed by entry station).
    pub access_min_by_station: BTreeMap<String, i64>,
    /// Per-station overrides of the egress minimum (keyed by exit station).
    pub egress_min_by_station: BTreeMap<String, i64>,
    /// Replaces every topology transfer minimum when set.
    pub min_transfer_seconds: Option<i64>,
    /// Upper bound on access and egress time; `None` disables it.
    pub max_journey_slack_seconds: Option<i64>,
}


impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        let neg = self.min_access_seconds < 0
            || self.min_egress_seconds < 0
            || self.access_min_by_station.values().any(|&v| v < 0)
            || self.egress_min_by_station.values().any(|&v| v < 0)
            || self.min_transfer_seconds.is_some_and(|v| v < 0)
            || self.max_journey_slack_seconds.is_some_and(|v| v < 0);
        if neg {
            return Err(Error::Config("constraint values must be non-negative".into()));
        }
        Ok(())
    }

    pub fn access_min(&self, station: &str) -> i64 {
        self.access_min_by_station
            .get(station)
            .copied()
            .unwrap_or(self.min_access_seconds)
    }

    pub fn egress_min(&self, station: &str) -> i64 {
        self.egress_min_by_station
            .get(station)
            .copied()
            .unwrap_or(self.min_egress_seconds)
    }

    /// Transfer minimum at every segment boundary of `rec`.
    pub fn transfer_mins(&self, rec: &TravelRecord, topo: &NetworkTopology) -> Vec<i64> {
        match self.min_transfer_seconds {
            Some(v) => vec![v; rec.segments.len().saturating_sub(1)],
            None => boundary_transfers(rec, topo),
        }
    }
}

type LegKey = (LineKey, String, String);

/// Every run's (DT, AT) for each (line, board, alight) leg, sorted by DT so a
/// record's time window is found by binary search.
#[derive(Debug, Clone, Default)]
pub struct CandidateIndex {
    legs: HashMap<LegKey, Vec<CandidateTrain>>,
}

impl CandidateIndex {
    /// Indexes all legs used by the topology's routes.
    pub fn new(runs: &[TrainRun], topo: &NetworkTopology) -> Self {
        let mut idx = Self::default();
        for route in topo.routes() {
            for leg in &route.legs {
                idx.add_leg(runs, &leg.line_key(), &leg.board, &leg.alight);
            }
        }
        idx
    }

    /// Indexes only the legs of one record.
    pub fn for_record(runs: &[TrainRun], rec: &TravelRecord) -> Self {
        let mut idx = Self::default();
        for s in &rec.segments {
            idx.add_leg(runs, &s.line, &s.board_station, &s.alight_station);
        }
        idx
    }

    fn add_leg(&mut self, runs: &[TrainRun], line: &LineKey, board: &str, alight: &str) {
        let key = (line.clone(), board.to_string(), alight.to_string());
        if self.legs.contains_key(&key) {
            return;
        }
        let mut trains: Vec<CandidateTrain> = runs
            .iter()
            .filter(|r| r.line == *line)
            .filter_map(|r| {
                r.leg_times(board, alight).map(|(dt, at)| CandidateTrain {
                    train_id: r.train_id.clone(),
                    dt,
                    at,
                })
            })
            .collect();
        trains.sort_by(|a, b| a.dt.cmp(&b.dt).then_with(|| a.train_id.cmp(&b.train_id)));
        self.legs.insert(key, trains);
    }

    fn leg(&self, seg: &TripSegment) -> &[CandidateTrain] {
        self.legs
            .get(&(seg.line.clone(), seg.board_station.clone(), seg.alight_station.clone()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Builds one candidate set per segment of `rec` under the spatial and
/// temporal constraints. Transfer feasibility is enforced in both directions
/// along the chain: a train survives only if some train on each neighbouring
/// segment can connect with it.
pub fn build_candidates(
    rec: &TravelRecord,
    index: &CandidateIndex,
    cfg: &ConstraintConfig,
    transfer_mins: &[i64],
) -> Result<Vec<CandidateSet>> {
    let m_count = rec.segments.len();
    let t_in = rec.afc.entry_time;
    let t_out = rec.afc.exit_time;
    let lo = t_in + cfg.access_min(&rec.afc.entry_station);
    let hi = t_out - cfg.egress_min(&rec.afc.exit_station);

    let mut sets: Vec<Vec<CandidateTrain>> = Vec::with_capacity(m_count);
    for (m, seg) in rec.segments.iter().enumerate() {
        let leg = index.leg(seg);
        let start = leg.partition_point(|t| t.dt < lo);
        let end = leg.partition_point(|t| t.dt <= hi);
        let mut trains: Vec<CandidateTrain> = leg[start..end.max(start)]
            .iter()
            .filter(|t| t.at <= hi)
            .filter(|t| match cfg.max_journey_slack_seconds {
                Some(slack) => {
                    (m != 0 || t.dt - t_in <= slack) && (m + 1 != m_count || t_out - t.at <= slack)
                }
                None => true,
            })
            .cloned()
            .collect();
        if m > 0 {
            let gap = transfer_mins.get(m - 1).copied().unwrap_or(0);
            let earliest = sets[m - 1].iter().map(|t| t.at).min();
            trains.retain(|t| earliest.is_some_and(|a| a + gap <= t.dt));
        }
        sets.push(trains);
    }
    for m in (0..m_count.saturating_sub(1)).rev() {
        let gap = transfer_mins.get(m).copied().unwrap_or(0);
        let latest = sets[m + 1].iter().map(|t| t.dt).max();
        sets[m].retain(|t| latest.is_some_and(|d| t.at + gap <= d));
    }

    sets.into_iter()
        .enumerate()
        .map(|(m, trains)| {
            if trains.is_empty() {
                Err(Error::EmptyCandidateSet { segment: m + 1 })
            } else {
                Ok(CandidateSet {
                    segment: m + 1,
                    trains,
                })
            }
        })
        .collect()
}

/// Record indices split into the observable set (every segment has exactly
/// one feasible train), the unknown set, and the unassignable remainder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSlices {
    pub observable: Vec<usize>,
    pub unknown: Vec<usize>,
    pub unassignable: Vec<usize>,
}

pub fn slice_datasets<E>(built: &[std::result::Result<Vec<CandidateSet>, E>]) -> DatasetSlices {
    let mut out = DatasetSlices::default();
    for (i, b) in built.iter().enumerate() {
        match b {
            Ok(sets) if sets.iter().all(CandidateSet::is_unique) => out.observable.push(i),
            Ok(_) => out.unknown.push(i),
            Err(_) => out.unassignable.push(i),
        }
    }
    out
}
