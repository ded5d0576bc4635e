//! Final per-passenger trajectories and their CSV / JSON-lines forms.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::inference::TrainPosterior;
use crate::klem::TrainCombination;
use crate::model::TravelRecord;
use crate::time::{format_timestamp, parse_timestamp, Timestamp};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub converged: bool,
    pub fallback: bool,
}

impl Flags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.converged {
            parts.push("converged");
        }
        if self.fallback {
            parts.push("fallback");
        }
        parts.join("|")
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut f = Flags::default();
        for p in s.split('|').filter(|p| !p.is_empty()) {
            match p {
                "converged" => f.converged = true,
                "fallback" => f.fallback = true,
                _ => return None,
            }
        }
        Some(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItineraryLeg {
    pub segment: usize,
    pub train_id: String,
    pub board_station: String,
    pub board_time: Timestamp,
    pub alight_station: String,
    pub alight_time: Timestamp,
    pub running_s: i64,
    pub left_behind: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Itinerary {
    pub passenger_id: String,
    pub entry_time: Timestamp,
    pub exit_time: Timestamp,
    pub legs: Vec<ItineraryLeg>,
    pub access_s: i64,
    pub egress_s: i64,
    /// Alight-to-board interval at each transfer, platform wait included.
    pub transfer_s: Vec<i64>,
    /// Posterior probability of the chosen combination.
    pub confidence: f64,
    pub flags: Flags,
}

impl Itinerary {
    pub fn decomposition_total(&self) -> i64 {
        self.access_s
            + self.legs.iter().map(|l| l.running_s).sum::<i64>()
            + self.transfer_s.iter().sum::<i64>()
            + self.egress_s
    }

    pub fn holds_identity(&self) -> bool {
        self.decomposition_total() == self.exit_time - self.entry_time
    }
}

/// Rank of `train_id` among the trains of `set` still catchable after
/// `earliest`, i.e. how many catchable trains departed before it.
pub fn left_behind_rank(set: &CandidateSet, earliest: Option<Timestamp>, train_id: &str) -> Option<usize> {
    let mut k = 0;
    for t in &set.trains {
        if earliest.is_some_and(|e| t.dt < e) {
            continue;
        }
        if t.train_id == train_id {
            return Some(k);
        }
        k += 1;
    }
    None
}

pub fn build_itinerary(
    rec: &TravelRecord,
    sets: &[CandidateSet],
    gaps: &[i64],
    chosen: &TrainCombination,
    posteriors: &[TrainPosterior],
    flags: Flags,
) -> Result<Itinerary> {
    let pid = &rec.afc.passenger_id;
    let fail = |what: String| Error::Internal(format!("{pid}: {what}"));
    if chosen.trains.len() != rec.segments.len() || sets.len() != rec.segments.len() {
        return Err(fail("segment count mismatch".into()));
    }
    if !chosen.feasible {
        return Err(fail("infeasible train combination".into()));
    }

    let mut legs = Vec::with_capacity(rec.segments.len());
    for (m, (seg, train)) in rec.segments.iter().zip(&chosen.trains).enumerate() {
        let earliest = (m > 0).then(|| chosen.trains[m - 1].at + gaps.get(m - 1).copied().unwrap_or(0));
        let k = left_behind_rank(&sets[m], earliest, &train.train_id)
            .ok_or_else(|| fail(format!("train {} not a candidate of segment {}", train.train_id, m + 1)))?;
        legs.push(ItineraryLeg {
            segment: seg.index,
            train_id: train.train_id.clone(),
            board_station: seg.board_station.clone(),
            board_time: train.dt,
            alight_station: seg.alight_station.clone(),
            alight_time: train.at,
            running_s: train.at - train.dt,
            left_behind: k,
        });
    }
    let first = &chosen.trains[0];
    let last = &chosen.trains[chosen.trains.len() - 1];
    let confidence = chosen
        .trains
        .iter()
        .zip(posteriors)
        .map(|(t, p)| p.probability_of(&t.train_id).unwrap_or(0.0))
        .product::<f64>();
    let it = Itinerary {
        passenger_id: pid.clone(),
        entry_time: rec.afc.entry_time,
        exit_time: rec.afc.exit_time,
        access_s: first.dt - rec.afc.entry_time,
        egress_s: rec.afc.exit_time - last.at,
        transfer_s: chosen.transfer_intervals.clone(),
        legs,
        confidence: if posteriors.len() == chosen.trains.len() { confidence } else { 0.0 },
        flags,
    };
    let negative = it.access_s < 0
        || it.egress_s < 0
        || it.transfer_s.iter().any(|&t| t < 0)
        || it.legs.iter().any(|l| l.running_s < 0);
    if negative {
        return Err(fail("negative timing component".into()));
    }
    if !it.holds_identity() {
        return Err(fail("timing decomposition does not sum to the gate span".into()));
    }
    Ok(it)
}

/// One row per segment; record-level fields repeat on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItineraryRow {
    pub passenger_id: String,
    pub segment: usize,
    pub train_id: String,
    pub board_station: String,
    pub board_time: String,
    pub alight_station: String,
    pub alight_time: String,
    pub access_s: i64,
    pub egress_s: i64,
    /// Transfer after this segment; empty on the last one.
    pub transfer_s: Option<i64>,
    pub left_behind: usize,
    pub confidence: f64,
    pub flags: String,
}

pub fn to_rows(it: &Itinerary) -> Vec<ItineraryRow> {
    it.legs
        .iter()
        .enumerate()
        .map(|(m, l)| ItineraryRow {
            passenger_id: it.passenger_id.clone(),
            segment: l.segment,
            train_id: l.train_id.clone(),
            board_station: l.board_station.clone(),
            board_time: format_timestamp(l.board_time),
            alight_station: l.alight_station.clone(),
            alight_time: format_timestamp(l.alight_time),
            access_s: it.access_s,
            egress_s: it.egress_s,
            transfer_s: it.transfer_s.get(m).copied(),
            left_behind: l.left_behind,
            confidence: it.confidence,
            flags: it.flags.label(),
        })
        .collect()
}

pub fn from_rows(rows: &[ItineraryRow]) -> std::result::Result<Itinerary, String> {
    let first = rows.first().ok_or("no rows")?;
    let mut legs = Vec::with_capacity(rows.len());
    let mut transfer_s = Vec::new();
    for (m, r) in rows.iter().enumerate() {
        if r.passenger_id != first.passenger_id || r.segment != m + 1 {
            return Err(format!("row {} out of sequence for {}", m + 1, first.passenger_id));
        }
        let board = parse_timestamp(&r.board_time).ok_or("malformed board_time")?;
        let alight = parse_timestamp(&r.alight_time).ok_or("malformed alight_time")?;
        legs.push(ItineraryLeg {
            segment: r.segment,
            train_id: r.train_id.clone(),
            board_station: r.board_station.clone(),
            board_time: board,
            alight_station: r.alight_station.clone(),
            alight_time: alight,
            running_s: alight - board,
            left_behind: r.left_behind,
        });
        match (r.transfer_s, m + 1 == rows.len()) {
            (Some(t), false) => transfer_s.push(t),
            (None, true) => {}
            _ => return Err(format!("transfer_s misplaced on segment {}", r.segment)),
        }
    }
    let flags = Flags::parse(&first.flags).ok_or("unknown flag")?;
    Ok(Itinerary {
        passenger_id: first.passenger_id.clone(),
        entry_time: legs[0].board_time - first.access_s,
        exit_time: legs[legs.len() - 1].alight_time + first.egress_s,
        legs,
        access_s: first.access_s,
        egress_s: first.egress_s,
        transfer_s,
        confidence: first.confidence,
        flags,
    })
}

pub fn write_csv<W: Write>(writer: W, itineraries: &[Itinerary]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for it in itineraries {
        for row in to_rows(it) {
            w.serialize(row)?;
        }
    }
    w.flush()
}

pub fn write_jsonl<W: Write>(mut writer: W, itineraries: &[Itinerary]) -> std::io::Result<()> {
    for it in itineraries {
        for row in to_rows(it) {
            serde_json::to_writer(&mut writer, &row)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn group_rows(rows: Vec<ItineraryRow>) -> std::result::Result<Vec<Itinerary>, String> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=rows.len() {
        if i == rows.len() || rows[i].segment == 1 {
            out.push(from_rows(&rows[start..i])?);
            start = i;
        }
    }
    Ok(out)
}

pub fn read_csv<R: Read>(reader: R) -> std::result::Result<Vec<Itinerary>, String> {
    let rows: std::result::Result<Vec<ItineraryRow>, _> = csv::Reader::from_reader(reader).deserialize().collect();
    group_rows(rows.map_err(|e| e.to_string())?)
}

pub fn read_jsonl(text: &str) -> std::result::Result<Vec<Itinerary>, String> {
    let rows: std::result::Result<Vec<ItineraryRow>, _> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect();
    group_rows(rows.map_err(|e| e.to_string())?)
}

/// A record kept out of the main output, with its reason code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub passenger_id: String,
    pub reason: String,
}

pub fn write_rejects<W: Write>(writer: W, rejects: &[Reject]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["passenger_id", "reason"])?;
    for r in rejects {
        w.write_record([&r.passenger_id, &r.reason])?;
    }
    w.flush()
}
