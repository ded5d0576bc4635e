//! Bayesian train posteriors per segment and EM estimation of the egress-time
//! distribution.
//!
//! A segment is scored through a [`SegmentView`]: the candidate trains plus
//! the two anchor events bracketing the ride. For a single-segment journey
//! the anchors are the gate times, so the weight of train `j` is
//!
//! ```text
//! w_j = f_e(t_out - AT_j) · f_a(DT_j - t_in)
//! ```
//!
//! normalized over the segment's candidates. For a transfer journey the
//! anchors of an inner boundary are the neighbouring segment's chosen
//! alighting/boarding times, so the "egress" of a non-final segment is the
//! alight-to-next-boarding interval.
//!
//! All products are computed in log space with max-subtraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSet, CandidateTrain};
use crate::error::{Error, Result};
use crate::model::TravelRecord;
use crate::prob::NormalParams;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    /// Caller's record index, carried through for bookkeeping.
    pub record: usize,
    /// 1-based segment index.
    pub segment: usize,
    pub entry_anchor: Timestamp,
    pub exit_anchor: Timestamp,
    /// Feasible trains given the anchors, ordered by departure.
    pub trains: Vec<CandidateTrain>,
}

impl SegmentView {
    /// Anchored on the fare-gate times with every candidate of the set.
    pub fn gate_anchored(record: usize, rec: &TravelRecord, set: &CandidateSet) -> Self {
        Self {
            record,
            segment: set.segment,
            entry_anchor: rec.afc.entry_time,
            exit_anchor: rec.afc.exit_time,
            trains: set.trains.clone(),
        }
    }

    /// Segment `m` (0-based) given the trains chosen on its neighbours.
    /// `gaps[k]` is the minimum transfer between segments `k` and `k+1`.
    pub fn conditioned(
        record: usize,
        rec: &TravelRecord,
        sets: &[CandidateSet],
        m: usize,
        prev: Option<&CandidateTrain>,
        next: Option<&CandidateTrain>,
        gaps: &[i64],
    ) -> Self {
        let gap = |k: usize| gaps.get(k).copied().unwrap_or(0);
        let trains = sets[m]
            .trains
            .iter()
            .filter(|t| prev.is_none_or(|p| t.dt >= p.at + gap(m - 1)))
            .filter(|t| next.is_none_or(|n| t.at + gap(m) <= n.dt))
            .cloned()
            .collect();
        Self {
            record,
            segment: sets[m].segment,
            entry_anchor: prev.map_or(rec.afc.entry_time, |p| p.at),
            exit_anchor: next.map_or(rec.afc.exit_time, |n| n.dt),
            trains,
        }
    }

    pub fn egress_sample(&self, t: &CandidateTrain) -> f64 {
        (self.exit_anchor - t.at) as f64
    }

    pub fn access_sample(&self, t: &CandidateTrain) -> f64 {
        (t.dt - self.entry_anchor) as f64
    }

    pub fn position(&self, train_id: &str) -> Option<usize> {
        self.trains.iter().position(|t| t.train_id == train_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub train_id: String,
    pub dt: Timestamp,
    pub at: Timestamp,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPosterior {
    pub segment: usize,
    /// In departure order, matching the view.
    pub entries: Vec<PosteriorEntry>,
    /// Index of the most probable train; ties go to the earliest departure.
    pub chosen: usize,
}

impl TrainPosterior {
    pub fn chosen_entry(&self) -> &PosteriorEntry {
        &self.entries[self.chosen]
    }

    pub fn chosen_train(&self) -> CandidateTrain {
        let e = self.chosen_entry();
        CandidateTrain {
            train_id: e.train_id.clone(),
            dt: e.dt,
            at: e.at,
        }
    }

    /// Entry indices by descending probability, departure order on ties.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| {
            self.entries[b]
                .probability
                .total_cmp(&self.entries[a].probability)
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn probability_of(&self, train_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.train_id == train_id)
            .map(|e| e.probability)
    }
}

/// `ln f_e(egress) + ln f_a(access)` for each train in the view.
pub fn log_weights(view: &SegmentView, egress: &NormalParams, access: &NormalParams) -> Vec<f64> {
    view.trains
        .iter()
        .map(|t| egress.ln_pdf(view.egress_sample(t)) + access.ln_pdf(view.access_sample(t)))
        .collect()
}

/// Normalizes log weights; returns probabilities and `ln Σ w`.
fn normalize(lw: &[f64]) -> (Vec<f64>, f64) {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = w.iter().sum();
    (w.into_iter().map(|x| x / s).collect(), max + s.ln())
}

fn posterior_with_loglik(view: &SegmentView, egress: &NormalParams, access: &NormalParams) -> (TrainPosterior, f64) {
    assert!(!view.trains.is_empty(), "posterior over an empty candidate set");
    let (probs, ll) = normalize(&log_weights(view, egress, access));
    let mut chosen = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[chosen] {
            chosen = i;
        }
    }
    let entries = view
        .trains
        .iter()
        .zip(probs)
        .map(|(t, p)| PosteriorEntry {
            train_id: t.train_id.clone(),
            dt: t.dt,
            at: t.at,
            probability: p,
        })
        .collect();
    (
        TrainPosterior {
            segment: view.segment,
            entries,
            chosen,
        },
        ll,
    )
}

/// Posterior over the view's trains under the current egress and access models.
pub fn posterior(view: &SegmentView, egress: &NormalParams, access: &NormalParams) -> TrainPosterior {
    posterior_with_loglik(view, egress, access).0
}

/// `P(k)` for `k = 0..=K`: the probability of boarding the `(k+1)`-th train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeftBehindDist {
    pub probabilities: Vec<f64>,
}

impl LeftBehindDist {
    pub fn max_k(&self) -> usize {
        self.probabilities.len().saturating_sub(1)
    }

    pub fn most_likely(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = k;
            }
        }
        best
    }
}

pub fn left_behind(post: &TrainPosterior) -> LeftBehindDist {
    LeftBehindDist {
        probabilities: post.entries.iter().map(|e| e.probability).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iter: 200,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("em.epsilon must be positive and em.max_iter at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// Observed-data log-likelihood `Σ_i ln Σ_j w_ij` at the row's parameters.
    pub loglik: f64,
    pub mu: f64,
    pub sigma2: f64,
    /// `max(|Δμ|, |Δσ|)` of the update that produced this row.
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub rows: Vec<EmIteration>,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn last(&self) -> Option<&EmIteration> {
        self.rows.last()
    }

    /// True when the log-likelihood never drops by more than `slack`.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].loglik >= w[0].loglik - slack)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loglik,mu,sigma2,delta\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.iteration, r.loglik, r.mu, r.sigma2, r.delta));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOutcome {
    pub params: NormalParams,
    pub trace: EmTrace,
    pub converged: bool,
    /// Posteriors under the final parameters, one per view.
    pub posteriors: Vec<TrainPosterior>,
}

struct EStep {
    posteriors: Vec<TrainPosterior>,
    loglik: f64,
}

fn e_step(views: &[SegmentView], egress: &NormalParams, access: &NormalParams) -> EStep {
    let parts: Vec<(TrainPosterior, f64)> = views
        .par_iter()
        .map(|v| posterior_with_loglik(v, egress, access))
        .collect();
    // fixed-order reduction keeps results bitwise reproducible
    let mut loglik = 0.0;
    let mut posteriors = Vec::with_capacity(parts.len());
    for (p, ll) in parts {
        loglik += ll;
        posteriors.push(p);
    }
    EStep { posteriors, loglik }
}

fn m_step(views: &[SegmentView], posteriors: &[TrainPosterior], sigma2_floor: f64) -> Option<NormalParams> {
    let samples: Vec<(f64, f64)> = views
        .iter()
        .zip(posteriors)
        .flat_map(|(v, p)| {
            v.trains
                .iter()
                .zip(&p.entries)
                .map(|(t, e)| (v.egress_sample(t), e.probability))
        })
        .collect();
    NormalParams::fit_weighted(&samples, sigma2_floor).map(|mut p| {
        p.count = views.len();
        p
    })
}

/// Runs EM for the egress parameters over `views`, holding `access` fixed.
///
/// Row 0 of the trace holds the initial parameters; row `t` holds the
/// parameters after `t` M-steps and the log-likelihood evaluated at them.
/// Stops once both `|Δμ|` and `|Δσ|` fall below `cfg.epsilon`.
pub fn em_fit(
    views: &[SegmentView],
    init: NormalParams,
    access: &NormalParams,
    cfg: &EmConfig,
    sigma2_floor: f64,
) -> EmOutcome {
    let mut theta = NormalParams {
        sigma2: init.sigma2.max(sigma2_floor),
        ..init
    };
    let mut e = e_step(views, &theta, access);
    let mut trace = EmTrace {
        rows: vec![EmIteration {
            iteration: 0,
            loglik: e.loglik,
            mu: theta.mu,
            sigma2: theta.sigma2,
            delta: 0.0,
        }],
    };
    if views.is_empty() {
        return EmOutcome {
            params: theta,
            trace,
            converged: true,
            posteriors: Vec::new(),
        };
    }

    let mut converged = false;
    for it in 1..=cfg.max_iter {
        let Some(next) = m_step(views, &e.posteriors, sigma2_floor) else {
            break;
        };
        let d_mu = (next.mu - theta.mu).abs();
        let d_sigma = (next.sigma() - theta.sigma()).abs();
        theta = next;
        e = e_step(views, &theta, access);
        trace.rows.push(EmIteration {
            iteration: it,
            loglik: e.loglik,
            mu: theta.mu,
            sigma2: theta.sigma2,
            delta: d_mu.max(d_sigma),
        });
        if d_mu < cfg.epsilon && d_sigma < cfg.epsilon {
            converged = true;
            break;
        }
    }
    EmOutcome {
        params: theta,
        trace,
        converged,
        posteriors: e.posteriors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AfcRecord, LineKey, TripSegment};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn train(id: &str, dt: i64, at: i64) -> CandidateTrain {
        CandidateTrain { train_id: id.into(), dt, at }
    }

    fn view(t_in: i64, t_out: i64, trains: Vec<CandidateTrain>) -> SegmentView {
        SegmentView {
            record: 0,
            segment: 1,
            entry_anchor: t_in,
            exit_anchor: t_out,
            trains,
        }
    }

    // direct linear-space evaluation of the normalized density product
    fn direct(t_in: i64, t_out: i64, trains: &[CandidateTrain], e: (f64, f64), a: (f64, f64)) -> Vec<f64> {
        let pdf = |x: f64, mu: f64, s2: f64| (-(x - mu).powi(2) / (2.0 * s2)).exp() / (2.0 * PI * s2).sqrt();
        let w: Vec<f64> = trains
            .iter()
            .map(|t| pdf((t_out - t.at) as f64, e.0, e.1) * pdf((t.dt - t_in) as f64, a.0, a.1))
            .collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    #[test]
    fn single_candidate_is_certain() {
        let v = view(0, 600, vec![train("a", 60, 450)]);
        let p = posterior(&v, &NormalParams::new(120.0, 900.0), &NormalParams::new(60.0, 900.0));
        assert_eq!(p.entries[0].probability, 1.0);
        assert_eq!(p.chosen_entry().train_id, "a");
        assert_eq!(left_behind(&p).probabilities, vec![1.0]);
    }

    #[test]
    fn two_candidate_example() {
        let trains = vec![train("A", 60, 450), train("B", 180, 510)];
        let v = view(0, 600, trains.clone());
        let egress = NormalParams::new(120.0, 900.0);
        let access = NormalParams::new(60.0, 900.0);
        let p = posterior(&v, &egress, &access);
        // oracle: ln w_A = -0.5, ln w_B = -0.5 - 8 (both up to a common constant)
        let expected_a = 1.0 / (1.0 + (-8.0f64).exp());
        assert!((expected_a - 0.999_664_649_869_533_9).abs() < 1e-15);
        let oracle = direct(0, 600, &trains, (120.0, 900.0), (60.0, 900.0));
        assert!((p.entries[0].probability - expected_a).abs() < 1e-12);
        assert!((p.entries[0].probability - oracle[0]).abs() < 1e-12);
        assert_eq!(p.chosen_entry().train_id, "A");
        let lb = left_behind(&p);
        assert_eq!(lb.probabilities, vec![p.entries[0].probability, p.entries[1].probability]);
        assert_eq!(lb.most_likely(), 0);
    }

    #[test]
    fn symmetric_candidates_tie_to_earliest() {
        // egress deviations -30/+30 swap with access deviations +30/-30
        let trains = vec![train("early", 90, 450), train("late", 150, 510)];
        let v = view(0, 600, trains);
        let p = posterior(&v, &NormalParams::new(120.0, 900.0), &NormalParams::new(120.0, 900.0));
        assert_eq!(p.entries[0].probability, 0.5);
        assert_eq!(p.entries[1].probability, 0.5);
        assert_eq!(p.chosen, 0);
    }

    #[test]
    fn far_tails_do_not_underflow() {
        let v = view(0, 20_000, vec![train("a", 60, 100), train("b", 180, 220)]);
        let p = posterior(&v, &NormalParams::new(120.0, 100.0), &NormalParams::new(60.0, 100.0));
        let s: f64 = p.entries.iter().map(|e| e.probability).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.entries.iter().all(|e| e.probability.is_finite()));
    }

    #[test]
    fn conditioned_view_uses_neighbour_anchors() {
        let rec = TravelRecord {
            afc: AfcRecord {
                passenger_id: "p".into(),
                entry_station: "CY".into(),
                entry_time: 0,
                exit_station: "BXQ".into(),
                exit_time: 2000,
            },
            segments: vec![
                TripSegment { index: 1, board_station: "CY".into(), alight_station: "DS".into(), line: LineKey::new("L1", "up") },
                TripSegment { index: 2, board_station: "DS".into(), alight_station: "BXQ".into(), line: LineKey::new("L2", "up") },
            ],
        };
        let sets = vec![
            CandidateSet { segment: 1, trains: vec![train("a0", 60, 600), train("a1", 180, 720)] },
            CandidateSet { segment: 2, trains: vec![train("b0", 650, 900), train("b1", 760, 1010), train("b2", 880, 1130)] },
        ];
        let a1 = sets[0].trains[1].clone();
        let v2 = SegmentView::conditioned(3, &rec, &sets, 1, Some(&a1), None, &[30]);
        assert_eq!(v2.entry_anchor, 720);
        assert_eq!(v2.exit_anchor, 2000);
        assert_eq!(v2.trains.iter().map(|t| t.train_id.as_str()).collect::<Vec<_>>(), ["b1", "b2"]);
        let b0 = sets[1].trains[0].clone();
        let v1 = SegmentView::conditioned(3, &rec, &sets, 0, None, Some(&b0), &[30]);
        assert_eq!((v1.entry_anchor, v1.exit_anchor), (0, 650));
        assert_eq!(v1.trains.len(), 1);
        assert_eq!(v1.egress_sample(&v1.trains[0]), 50.0);
    }

    fn synthetic_views(n: usize, seed: u64) -> Vec<SegmentView> {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let walk = Normal::<f64>::new(90.0, 15.0).unwrap();
        let egress = Normal::<f64>::new(120.0, 30.0).unwrap();
        (0..n)
            .map(|i| {
                let t_in = rng.gen_range(0..100_000i64);
                let phase = rng.gen_range(0..120i64);
                let plat = t_in + walk.sample(&mut rng).max(30.0) as i64;
                let first = plat + (phase - (plat % 120)).rem_euclid(120);
                let dt = first;
                let at = dt + 900;
                let t_out = at + egress.sample(&mut rng).max(10.0) as i64;
                let trains = (-3..4)
                    .map(|k| train(&format!("t{k}"), dt + 120 * k, at + 120 * k))
                    .filter(|t| t.dt >= t_in && t.at <= t_out)
                    .collect();
                SegmentView { record: i, segment: 1, entry_anchor: t_in, exit_anchor: t_out, trains }
            })
            .collect()
    }

    #[test]
    fn em_is_monotone_and_converges() {
        let views = synthetic_views(800, 5);
        let access = NormalParams::new(150.0, 40.0 * 40.0);
        let out = em_fit(&views, NormalParams::new(80.0, 400.0), &access, &EmConfig::default(), 1.0);
        assert!(out.converged);
        assert!(out.trace.is_monotone(1e-9));
        assert!(out.trace.last().unwrap().delta < 1e-3);
        assert!((out.params.mu - 120.0).abs() < 10.0, "{:?}", out.params);
        assert_eq!(out.posteriors.len(), views.len());
    }

    #[test]
    fn em_with_unique_candidates_is_plain_fit() {
        let views: Vec<SegmentView> = [100i64, 130, 95, 160, 121]
            .iter()
            .enumerate()
            .map(|(i, &e)| view(0, 1000 + e, vec![train(&format!("t{i}"), 50, 1000)]))
            .collect();
        let out = em_fit(&views, NormalParams::new(10.0, 50.0), &NormalParams::new(50.0, 100.0), &EmConfig::default(), 1.0);
        let xs: Vec<(f64, f64)> = [100.0, 130.0, 95.0, 160.0, 121.0].iter().map(|&x| (x, 1.0)).collect();
        let plain = NormalParams::fit_weighted(&xs, 1.0).unwrap();
        let first = out.trace.rows[1];
        assert!((first.mu - plain.mu).abs() < 1e-12);
        assert!((first.sigma2 - plain.sigma2).abs() < 1e-9);
        assert!((out.params.mu - plain.mu).abs() < 1e-12);
        assert!(out.converged);
        assert_eq!(out.trace.iterations(), 2);
    }

    #[test]
    fn em_trace_csv_header() {
        let out = em_fit(&[], NormalParams::new(1.0, 1.0), &NormalParams::new(1.0, 1.0), &EmConfig::default(), 1.0);
        assert!(out.trace.to_csv().starts_with("iteration,loglik,mu,sigma2,delta\n0,"));
    }

    proptest! {
        #[test]
        fn posterior_matches_direct_evaluation(
            t_in in 0i64..1000,
            offs in prop::collection::vec((0i64..600, 200i64..1500), 1..=6),
            tail in 30i64..400,
            mu_e in 30f64..300.0, sd_e in 5f64..90.0,
            mu_a in 10f64..300.0, sd_a in 5f64..120.0,
        ) {
            let mut trains: Vec<CandidateTrain> = offs
                .iter()
                .enumerate()
                .map(|(i, &(d, r))| train(&format!("t{i}"), t_in + d, t_in + d + r))
                .collect();
            trains.sort_by_key(|t| t.dt);
            let t_out = trains.iter().map(|t| t.at).max().unwrap() + tail;
            let v = view(t_in, t_out, trains.clone());
            let p = posterior(&v, &NormalParams::new(mu_e, sd_e * sd_e), &NormalParams::new(mu_a, sd_a * sd_a));
            let sum: f64 = p.entries.iter().map(|e| e.probability).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let oracle = direct(t_in, t_out, &trains, (mu_e, sd_e * sd_e), (mu_a, sd_a * sd_a));
            if oracle.iter().all(|x| x.is_finite()) {
                for (e, o) in p.entries.iter().zip(&oracle) {
                    prop_assert!((e.probability - o).abs() < 1e-12);
                }
            }
            let best = p.entries[p.chosen].probability;
            prop_assert!(p.entries.iter().all(|e| e.probability <= best));
        }

        #[test]
        fn scaling_weights_leaves_posterior_unchanged(shift in -50f64..50.0) {
            let trains = vec![train("a", 60, 450), train("b", 180, 570), train("c", 300, 690)];
            let v = view(0, 800, trains);
            let e = NormalParams::new(150.0, 900.0);
            let a = NormalParams::new(120.0, 1600.0);
            let base = normalize(&log_weights(&v, &e, &a)).0;
            let shifted: Vec<f64> = log_weights(&v, &e, &a).iter().map(|x| x + shift).collect();
            let moved = normalize(&shifted).0;
            for (x, y) in base.iter().zip(&moved) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
