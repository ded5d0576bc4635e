use std::collections::BTreeMap;

use railtrace::config::PipelineConfig;
use railtrace::model::AfcRecord;
use railtrace::pipeline::{run_inference, InferenceConfig};
use railtrace::synth::{generate, ScenarioConfig, TruthSegment};

fn truth_by_passenger(truth: &[TruthSegment]) -> BTreeMap<&str, Vec<&TruthSegment>> {
    let mut m: BTreeMap<&str, Vec<&TruthSegment>> = BTreeMap::new();
    for t in truth {
        m.entry(t.passenger_id.as_str()).or_default().push(t);
    }
    m
}

#[test]
fn transfer_population_matches_and_transfer_times_track_truth() {
    let sc = ScenarioConfig::default_scenario();
    let sim = generate(&sc).unwrap();
    let out = run_inference(&sc.topology, &sim.afc, &sim.runs, &InferenceConfig::from(&PipelineConfig::default())).unwrap();
    let truth = truth_by_passenger(&sim.truth);
    let headway = sc.services.iter().map(|s| s.headway_s).max().unwrap();

    let (mut journeys, mut matched, mut within) = (0, 0, 0);
    for it in out.itineraries.iter().filter(|it| it.legs.len() == 2) {
        journeys += 1;
        let t = &truth[it.passenger_id.as_str()];
        if it.legs.iter().zip(t).all(|(l, s)| l.train_id == s.train_id) {
            matched += 1;
            let true_transfer = t.iter().find_map(|s| s.transfer_s).unwrap();
            if (it.transfer_s[0] - true_transfer).abs() <= headway {
                within += 1;
            }
        }
    }
    assert!(journeys >= 1900, "{journeys} transfer journeys");
    let acc = matched as f64 / journeys as f64;
    assert!(acc >= 0.90, "combination accuracy {acc}");
    assert!(within as f64 >= 0.90 * matched as f64, "{within}/{matched}");
}

#[test]
fn every_passenger_is_accounted_for() {
    let sc = ScenarioConfig::default_scenario();
    let sim = generate(&sc).unwrap();
    let mut afc = sim.afc.clone();
    afc.push(AfcRecord {
        passenger_id: "stray".into(),
        entry_station: "S4".into(),
        entry_time: afc[0].entry_time,
        exit_station: "CY".into(),
        exit_time: afc[0].exit_time,
    });
    let out = run_inference(&sc.topology, &afc, &sim.runs, &InferenceConfig::from(&PipelineConfig::default())).unwrap();
    assert_eq!(out.itineraries.len() + out.rejects.len(), afc.len());
    let stray = out.rejects.iter().find(|r| r.passenger_id == "stray").unwrap();
    assert_eq!(stray.reason, "unroutable_od");
    assert!(out.itineraries.iter().all(|it| it.holds_identity()));
    assert_eq!(out.baseline.len(), sim.afc.len());
}

#[test]
fn impossible_exit_is_rejected_with_segment() {
    let sc = ScenarioConfig::default_scenario();
    let sim = generate(&sc).unwrap();
    let mut afc = sim.afc.clone();
    let first = afc[0].clone();
    afc.push(AfcRecord {
        passenger_id: "too_fast".into(),
        exit_time: first.entry_time + 60,
        ..first
    });
    let out = run_inference(&sc.topology, &afc, &sim.runs, &InferenceConfig::from(&PipelineConfig::default())).unwrap();
    let r = out.rejects.iter().find(|r| r.passenger_id == "too_fast").unwrap();
    assert!(r.reason.starts_with("empty_candidate_set:segment="), "{}", r.reason);
}
