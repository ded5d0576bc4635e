//! Scoring of inferred itineraries against ground truth, and the
//! nearest-train (SSMT) baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSet, CandidateTrain};
use crate::error::{Error, Result};
use crate::itinerary::Itinerary;
use crate::klem::TrainCombination;
use crate::model::TravelRecord;
use crate::synth::TruthSegment;

/// Counts indexed by (actual, inferred) over the union of labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ConfusionMatrix {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let labels: BTreeSet<&str> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let labels: Vec<String> = labels.into_iter().map(str::to_string).collect();
        let pos: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
        for (a, b) in pairs {
            counts[pos[a]][pos[b]] += 1;
        }
        Self { labels, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }

    /// Pooled counts. With one actual and one inferred label per sample,
    /// pooled FP and FN both equal the off-diagonal mass.
    pub fn micro(&self) -> Prf {
        let tp = self.trace();
        let fp: u64 = (0..self.labels.len()).map(|j| self.col_sum(j) - self.counts[j][j]).sum();
        let fn_: u64 = (0..self.labels.len()).map(|i| self.row_sum(i) - self.counts[i][i]).sum();
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        Prf { precision: p, recall: r, f1: ratio(2 * tp, 2 * tp + fp + fn_) }
    }

    /// Unweighted mean over labels that occur as actual values.
    pub fn macro_avg(&self) -> Prf {
        let mut sum = Prf::default();
        let mut n = 0usize;
        for i in 0..self.labels.len() {
            let actual = self.row_sum(i);
            if actual == 0 {
                continue;
            }
            let p = ratio(self.counts[i][i], self.col_sum(i));
            let r = ratio(self.counts[i][i], actual);
            sum.precision += p;
            sum.recall += r;
            sum.f1 += f1(p, r);
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Prf {
            precision: sum.precision / n,
            recall: sum.recall / n,
            f1: sum.f1 / n,
        }
    }

    /// Grid with actual labels down the side and inferred across the top.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual\\inferred");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    /// `segment:board->alight`
    pub key: String,
    pub samples: u64,
    pub accuracy: f64,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeftBehindFidelity {
    /// Correctly matched segments, and how many of those got k right.
    pub segments_matched: u64,
    pub segments_equal: u64,
    /// Passengers with every segment matched, and how many got every k right.
    pub passengers_matched: u64,
    pub passengers_equal: u64,
    /// Share of true left-behind counts that are positive, over matched segments.
    pub true_positive_share: f64,
}

impl LeftBehindFidelity {
    pub fn passenger_rate(&self) -> f64 {
        ratio(self.passengers_equal, self.passengers_matched)
    }

    pub fn segment_rate(&self) -> f64 {
        ratio(self.segments_equal, self.segments_matched)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: u64,
    pub accuracy: f64,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub per_segment: Vec<SegmentMetrics>,
    pub journeys: u64,
    pub journey_accuracy: f64,
    pub left_behind: LeftBehindFidelity,
    /// Ground-truth segments with no inferred counterpart.
    pub unmatched_truth: u64,
}

/// Joins on (passenger, segment) and scores pooled and per-segment matrices.
/// Returns the report and the pooled confusion matrix.
pub fn score(inferred: &[Itinerary], truth: &[TruthSegment]) -> Result<(MetricReport, BTreeMap<String, ConfusionMatrix>)> {
    let truth_by: BTreeMap<(&str, usize), &TruthSegment> =
        truth.iter().map(|t| ((t.passenger_id.as_str(), t.segment), t)).collect();

    let mut pooled: Vec<(&str, &str)> = Vec::new();
    let mut per_seg: BTreeMap<String, Vec<(&str, &str)>> = BTreeMap::new();
    let mut lb = LeftBehindFidelity::default();
    let mut lb_positive = 0u64;
    let mut journeys = 0u64;
    let mut journeys_ok = 0u64;
    let mut joined = 0u64;

    for it in inferred {
        let mut all_there = true;
        let mut all_ok = true;
        let mut all_k = true;
        for leg in &it.legs {
            let Some(t) = truth_by.get(&(it.passenger_id.as_str(), leg.segment)) else {
                all_there = false;
                continue;
            };
            joined += 1;
            pooled.push((&t.train_id, &leg.train_id));
            per_seg
                .entry(format!("{}:{}->{}", leg.segment, leg.board_station, leg.alight_station))
                .or_default()
                .push((&t.train_id, &leg.train_id));
            if t.train_id == leg.train_id {
                lb.segments_matched += 1;
                lb_positive += u64::from(t.left_behind > 0);
                if t.left_behind == leg.left_behind {
                    lb.segments_equal += 1;
                } else {
                    all_k = false;
                }
            } else {
                all_ok = false;
            }
        }
        if all_there {
            journeys += 1;
            if all_ok {
                journeys_ok += 1;
                lb.passengers_matched += 1;
                lb.passengers_equal += u64::from(all_k);
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    lb.true_positive_share = ratio(lb_positive, lb.segments_matched);

    let cm = ConfusionMatrix::from_pairs(pooled.iter().copied());
    let mut matrices = BTreeMap::new();
    let per_segment = per_seg
        .into_iter()
        .map(|(key, pairs)| {
            let m = ConfusionMatrix::from_pairs(pairs);
            let out = SegmentMetrics {
                key: key.clone(),
                samples: m.total(),
                accuracy: m.accuracy(),
                micro: m.micro(),
                macro_avg: m.macro_avg(),
            };
            matrices.insert(key, m);
            out
        })
        .collect();
    let report = MetricReport {
        samples: cm.total(),
        accuracy: cm.accuracy(),
        micro: cm.micro(),
        macro_avg: cm.macro_avg(),
        per_segment,
        journeys,
        journey_accuracy: ratio(journeys_ok, journeys),
        left_behind: lb,
        unmatched_truth: truth.len() as u64 - joined,
    };
    matrices.insert("all".into(), cm);
    Ok((report, matrices))
}

/// Nearest-train baseline: the last segment takes the latest arrival before
/// the exit gate; earlier segments take the latest train that still connects.
pub fn ssmt_baseline(rec: &TravelRecord, sets: &[CandidateSet], gaps: &[i64]) -> Result<TrainCombination> {
    let mut picked: Vec<CandidateTrain> = Vec::with_capacity(sets.len());
    let mut limit = rec.afc.exit_time;
    for (m, set) in sets.iter().enumerate().rev() {
        let gap = if m + 1 < sets.len() { gaps.get(m).copied().unwrap_or(0) } else { 0 };
        let best = set
            .trains
            .iter()
            .filter(|t| t.at + gap <= limit)
            .max_by_key(|t| (t.at, t.dt))
            .ok_or(Error::EmptyCandidateSet { segment: set.segment })?;
        limit = best.dt;
        picked.push(best.clone());
    }
    picked.reverse();
    Ok(TrainCombination::new(picked, gaps))
}
