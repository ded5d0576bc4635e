//! Train-combination inference for transfer journeys: per-segment EM, a
//! KL-divergence consistency check across adjacent segments, and
//! re-iteration until the KL-minimal combination agrees with EM.
//!
//! Everything here runs over a population of records sharing one OD route.
//! A single record carries one sample per segment, which is not enough to
//! fit a distribution, so combinations are compared by *rank*: the rank
//! combination `(r_1, …, r_M)` picks, for every record, its `r_m`-th most
//! probable train on segment `m`.

use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSet, CandidateTrain};
use crate::error::{Error, Result};
use crate::inference::{em_fit, EmConfig, EmTrace, SegmentView, TrainPosterior};
use crate::model::TravelRecord;
use crate::prob::{kl_normal, NormalParams};

/// What each rank combination's fitted egress distributions are compared against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlCriterion {
    /// Segment `m` against segment `m+1`.
    Adjacent,
    /// Each segment against its own EM estimate.
    #[default]
    SegmentModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlemConfig {
    pub topk: usize,
    pub criterion: KlCriterion,
    pub max_rounds: usize,
    /// Per-segment EM sweeps per round, stopping early once no choice moves.
    pub max_sweeps: usize,
}

impl Default for KlemConfig {
    fn default() -> Self {
        Self {
            topk: 3,
            criterion: KlCriterion::default(),
            max_rounds: 10,
            max_sweeps: 5,
        }
    }
}

impl KlemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.max_rounds == 0 || self.max_sweeps == 0 {
            return Err(Error::Config("klem.topk, klem.max_rounds and klem.max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One train per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCombination {
    pub trains: Vec<CandidateTrain>,
    pub feasible: bool,
    /// `DT_{m+1} - AT_m` for each adjacent pair.
    pub transfer_intervals: Vec<i64>,
}

impl TrainCombination {
    pub fn new(trains: Vec<CandidateTrain>, gaps: &[i64]) -> Self {
        let transfer_intervals: Vec<i64> = trains.windows(2).map(|w| w[1].dt - w[0].at).collect();
        let feasible = transfer_intervals
            .iter()
            .enumerate()
            .all(|(m, &iv)| iv >= gaps.get(m).copied().unwrap_or(0));
        Self {
            trains,
            feasible,
            transfer_intervals,
        }
    }

    pub fn train_ids(&self) -> Vec<&str> {
        self.trains.iter().map(|t| t.train_id.as_str()).collect()
    }
}

/// Transfer seconds at every adjacent pair of a combination.
pub fn transfer_time(comb: &TrainCombination) -> Vec<i64> {
    comb.trains.windows(2).map(|w| w[1].dt - w[0].at).collect()
}

/// Feasible combinations from the Cartesian product of each segment's top-`k`
/// trains. `ranked[m]` lists segment `m`'s trains most-probable first; output
/// is in lexicographic rank order, so the argmax combination comes first
/// whenever it is feasible.
pub fn enumerate_combinations(ranked: &[Vec<CandidateTrain>], topk: usize, gaps: &[i64]) -> Vec<TrainCombination> {
    let lists: Vec<&[CandidateTrain]> = ranked.iter().map(|r| &r[..r.len().min(topk)]).collect();
    if lists.is_empty() || lists.iter().any(|l| l.is_empty()) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; lists.len()];
    loop {
        let trains: Vec<CandidateTrain> = idx.iter().zip(&lists).map(|(&i, l)| l[i].clone()).collect();
        let comb = TrainCombination::new(trains, gaps);
        if comb.feasible {
            out.push(comb);
        }
        // odometer increment, last segment fastest
        let mut pos = lists.len();
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < lists[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Earliest-feasible repair: keeps segment 1 and advances each later segment
/// to the first train that connects. Requires chain-consistent candidate sets.
pub fn repair_combination(sets: &[CandidateSet], start: &[CandidateTrain], gaps: &[i64]) -> Option<TrainCombination> {
    let mut trains: Vec<CandidateTrain> = Vec::with_capacity(sets.len());
    for (m, set) in sets.iter().enumerate() {
        let want = &start[m];
        let chosen = match trains.last() {
            None => want.clone(),
            Some(prev) => {
                let floor = prev.at + gaps.get(m - 1).copied().unwrap_or(0);
                if want.dt >= floor {
                    want.clone()
                } else {
                    set.trains.iter().find(|t| t.dt >= floor)?.clone()
                }
            }
        };
        trains.push(chosen);
    }
    Some(TrainCombination::new(trains, gaps))
}

/// A transfer record with its candidate sets and per-boundary transfer minimums.
#[derive(Debug, Clone, Copy)]
pub struct KlemInput<'a> {
    pub record: &'a TravelRecord,
    pub sets: &'a [CandidateSet],
    pub gaps: &'a [i64],
}

/// Access prior for the first boarding and initial gate-egress parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlemModels {
    pub access: NormalParams,
    pub egress: NormalParams,
}

/// Divergences of one rank combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub ranks: Vec<usize>,
    /// Fitted egress distribution of each segment under this combination.
    pub fitted: Vec<NormalParams>,
    /// `KL(f_m ‖ f_{m+1})` per adjacent pair, or `KL(f_m ‖ θ_m)` per segment.
    pub divergences: Vec<f64>,
    pub total: f64,
    /// Records for which this rank combination exists and is feasible.
    pub support: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KlMatrix {
    pub rows: Vec<KlRow>,
}

impl KlMatrix {
    /// Row with the smallest total; earliest in rank order on ties.
    pub fn argmin(&self) -> Option<&KlRow> {
        let mut best: Option<&KlRow> = None;
        for r in &self.rows {
            if best.is_none_or(|b| r.total < b.total) {
                best = Some(r);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlemRoundRow {
    pub round: usize,
    pub combination: String,
    pub total_kl: f64,
    pub consistent: bool,
}

pub fn rounds_csv(rows: &[KlemRoundRow]) -> String {
    let mut s = String::from("round,combination,total_kl,consistent\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.round, r.combination, r.total_kl, r.consistent));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlemResult {
    /// Chosen combination per input record.
    pub chosen: Vec<TrainCombination>,
    /// Per record, per segment posteriors from the last EM sweep.
    pub posteriors: Vec<Vec<TrainPosterior>>,
    /// Per record: the combination came from feasibility repair.
    pub fallback: Vec<bool>,
    /// Egress-side model of each segment (inner segments: alight-to-next-boarding).
    pub segment_models: Vec<NormalParams>,
    /// EM trace of each segment from the last round.
    pub traces: Vec<EmTrace>,
    pub rounds: usize,
    /// KL-minimal combination agreed with EM on the final round.
    pub converged: bool,
    pub diagnostics: Vec<KlemRoundRow>,
    pub kl_matrix: KlMatrix,
}

fn rank_label(ranks: &[usize]) -> String {
    ranks.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Egress sample of segment `m` under a full combination.
fn egress_of(rec: &TravelRecord, trains: &[CandidateTrain], m: usize) -> f64 {
    let next = if m + 1 < trains.len() {
        trains[m + 1].dt
    } else {
        rec.afc.exit_time
    };
    (next - trains[m].at) as f64
}

/// Builds the KL matrix over all rank combinations in `[0, topk)^M`.
/// With `reference`, each segment is compared against it instead of its
/// successor.
pub fn kl_matrix(
    inputs: &[KlemInput<'_>],
    posteriors: &[Vec<TrainPosterior>],
    topk: usize,
    segments: usize,
    reference: Option<&[NormalParams]>,
    sigma2_floor: f64,
) -> KlMatrix {
    let ranked: Vec<Vec<Vec<(CandidateTrain, f64)>>> = posteriors
        .iter()
        .map(|per_seg| {
            per_seg
                .iter()
                .map(|p| {
                    p.ranked()
                        .into_iter()
                        .take(topk)
                        .map(|i| {
                            let e = &p.entries[i];
                            (
                                CandidateTrain {
                                    train_id: e.train_id.clone(),
                                    dt: e.dt,
                                    at: e.at,
                                },
                                e.probability,
                            )
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut ranks = vec![0usize; segments];
    loop {
        let mut samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); segments];
        let mut support = 0;
        for (inp, per_seg) in inputs.iter().zip(&ranked) {
            let picked: Option<Vec<(CandidateTrain, f64)>> =
                ranks.iter().zip(per_seg).map(|(&r, list)| list.get(r).cloned()).collect();
            let Some(picked) = picked else { continue };
            let weight: f64 = picked.iter().map(|(_, p)| p).product();
            let trains: Vec<CandidateTrain> = picked.into_iter().map(|(t, _)| t).collect();
            if !TrainCombination::new(trains.clone(), inp.gaps).feasible || !(weight > 0.0) {
                continue;
            }
            support += 1;
            for (m, s) in samples.iter_mut().enumerate() {
                s.push((egress_of(inp.record, &trains, m), weight));
            }
        }
        let fitted: Option<Vec<NormalParams>> = samples
            .iter()
            .map(|s| NormalParams::fit_weighted(s, sigma2_floor))
            .collect();
        if let Some(fitted) = fitted {
            let divergences: Vec<f64> = match reference {
                Some(r) => fitted.iter().zip(r).map(|(f, q)| kl_normal(f, q)).collect(),
                None => fitted.windows(2).map(|w| kl_normal(&w[0], &w[1])).collect(),
            };
            rows.push(KlRow {
                ranks: ranks.clone(),
                total: divergences.iter().sum(),
                fitted,
                divergences,
                support,
            });
        }

        let mut pos = segments;
        loop {
            if pos == 0 {
                return KlMatrix { rows };
            }
            pos -= 1;
            ranks[pos] += 1;
            if ranks[pos] < topk {
                break;
            }
            ranks[pos] = 0;
        }
    }
}

struct SweepState {
    comb: Vec<Vec<CandidateTrain>>,
    posteriors: Vec<Vec<TrainPosterior>>,
    models: Vec<NormalParams>,
    traces: Vec<EmTrace>,
}

/// One pass of per-segment EM; each segment is conditioned on the current
/// choices of its neighbours and updates its own choice in place.
fn sweep(
    inputs: &[KlemInput<'_>],
    state: &mut SweepState,
    access: &NormalParams,
    em: &EmConfig,
    sigma2_floor: f64,
) -> usize {
    let segments = state.models.len();
    let mut moved = 0;
    for m in 0..segments {
        let views: Vec<SegmentView> = inputs
            .iter()
            .enumerate()
            .map(|(i, inp)| {
                let c = &state.comb[i];
                SegmentView::conditioned(
                    i,
                    inp.record,
                    inp.sets,
                    m,
                    if m > 0 { Some(&c[m - 1]) } else { None },
                    c.get(m + 1),
                    inp.gaps,
                )
            })
            .collect();
        let access_side = if m == 0 { *access } else { state.models[m - 1] };
        let out = em_fit(&views, state.models[m], &access_side, em, sigma2_floor);
        state.models[m] = out.params;
        state.traces[m] = out.trace;
        for (i, post) in out.posteriors.into_iter().enumerate() {
            let pick = post.chosen_train();
            if pick != state.comb[i][m] {
                moved += 1;
            }
            state.comb[i][m] = pick;
            state.posteriors[i][m] = post;
        }
    }
    moved
}

/// Initial choice per record: first segment by the access prior alone, last
/// segment by the egress model alone, inner segments earliest, then repaired.
fn initial_combinations(inputs: &[KlemInput<'_>], models: &KlemModels) -> Result<Vec<Vec<CandidateTrain>>> {
    inputs
        .iter()
        .map(|inp| {
            let last = inp.sets.len() - 1;
            let start: Vec<CandidateTrain> = inp
                .sets
                .iter()
                .enumerate()
                .map(|(m, set)| {
                    let score = |t: &CandidateTrain| {
                        let mut s = 0.0;
                        if m == 0 {
                            s += models.access.ln_pdf((t.dt - inp.record.afc.entry_time) as f64);
                        }
                        if m == last {
                            s += models.egress.ln_pdf((inp.record.afc.exit_time - t.at) as f64);
                        }
                        s
                    };
                    let mut best = &set.trains[0];
                    for t in &set.trains[1..] {
                        if score(t) > score(best) {
                            best = t;
                        }
                    }
                    best.clone()
                })
                .collect();
            repair_combination(inp.sets, &start, inp.gaps)
                .map(|c| c.trains)
                .ok_or_else(|| {
                    Error::Internal(format!(
                        "candidate sets of {} are not chain-consistent",
                        inp.record.afc.passenger_id
                    ))
                })
        })
        .collect()
}

/// Runs the combination inference over records that share one OD route
/// (so the same number of segments).
pub fn klem_infer(
    inputs: &[KlemInput<'_>],
    models: &KlemModels,
    em: &EmConfig,
    cfg: &KlemConfig,
    sigma2_floor: f64,
) -> Result<KlemResult> {
    let Some(first) = inputs.first() else {
        return Err(Error::Internal("combination inference over an empty group".into()));
    };
    let segments = first.sets.len();
    if inputs.iter().any(|i| i.sets.len() != segments || i.record.segments.len() != segments) {
        return Err(Error::Internal("records in one group differ in segment count".into()));
    }

    let comb = initial_combinations(inputs, models)?;

    // inner segments start from the alight-to-next-boarding spread of the initial choice
    let mut init_models = Vec::with_capacity(segments);
    for m in 0..segments {
        if m + 1 == segments {
            init_models.push(models.egress);
        } else {
            let xs: Vec<f64> = inputs
                .iter()
                .zip(&comb)
                .map(|(inp, c)| egress_of(inp.record, c, m))
                .collect();
            init_models.push(NormalParams::fit(&xs, sigma2_floor).unwrap_or(models.egress));
        }
    }

    let placeholder = TrainPosterior {
        segment: 0,
        entries: Vec::new(),
        chosen: 0,
    };
    let mut state = SweepState {
        comb,
        posteriors: vec![vec![placeholder; segments]; inputs.len()],
        models: init_models,
        traces: vec![EmTrace::default(); segments],
    };

    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    let mut matrix = KlMatrix::default();
    let mut kl_min: Vec<usize> = vec![0; segments];

    for round in 1..=cfg.max_rounds {
        rounds = round;
        for _ in 0..cfg.max_sweeps {
            if sweep(inputs, &mut state, &models.access, em, sigma2_floor) == 0 {
                break;
            }
        }

        let reference = match cfg.criterion {
            KlCriterion::Adjacent => None,
            KlCriterion::SegmentModel => Some(state.models.clone()),
        };
        matrix = kl_matrix(inputs, &state.posteriors, cfg.topk, segments, reference.as_deref(), sigma2_floor);
        let Some(best) = matrix.argmin() else {
            // no rank combination is fittable; EM's choice stands
            converged = true;
            break;
        };
        kl_min = best.ranks.clone();
        let consistent = kl_min.iter().all(|&r| r == 0);
        for row in &matrix.rows {
            diagnostics.push(KlemRoundRow {
                round,
                combination: rank_label(&row.ranks),
                total_kl: row.total,
                consistent: consistent && row.ranks == kl_min,
            });
        }
        if consistent {
            converged = true;
            break;
        }

        // restart EM from the KL-minimal combination
        state.models = best.fitted.clone();
        for (i, inp) in inputs.iter().enumerate() {
            if let Some(trains) = pick_ranks(&state.posteriors[i], &kl_min) {
                if TrainCombination::new(trains.clone(), inp.gaps).feasible {
                    state.comb[i] = trains;
                }
            }
        }
    }

    let mut chosen = Vec::with_capacity(inputs.len());
    let mut fallback = Vec::with_capacity(inputs.len());
    for (i, inp) in inputs.iter().enumerate() {
        let pick = if converged {
            Some(state.comb[i].clone())
        } else {
            pick_ranks(&state.posteriors[i], &kl_min)
        };
        let comb = pick
            .map(|t| TrainCombination::new(t, inp.gaps))
            .filter(|c| c.feasible);
        match comb {
            Some(c) => {
                chosen.push(c);
                fallback.push(false);
            }
            None => {
                let c = repair_combination(inp.sets, &state.comb[i], inp.gaps)
                    .filter(|c| c.feasible)
                    .ok_or_else(|| Error::Internal("feasibility repair failed".into()))?;
                chosen.push(c);
                fallback.push(true);
            }
        }
    }

    Ok(KlemResult {
        chosen,
        posteriors: state.posteriors,
        fallback,
        segment_models: state.models,
        traces: state.traces,
        rounds,
        converged,
        diagnostics,
        kl_matrix: matrix,
    })
}

fn pick_ranks(posteriors: &[TrainPosterior], ranks: &[usize]) -> Option<Vec<CandidateTrain>> {
    posteriors
        .iter()
        .zip(ranks)
        .map(|(p, &r)| {
            let i = *p.ranked().get(r)?;
            let e = &p.entries[i];
            Some(CandidateTrain {
                train_id: e.train_id.clone(),
                dt: e.dt,
                at: e.at,
            })
        })
        .collect()
}
