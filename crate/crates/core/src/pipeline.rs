//! End-to-end orchestration: load, segment, build candidates, fit priors,
//! infer trains, and write every artifact with a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::candidates::{build_candidates, slice_datasets, CandidateIndex, CandidateSet, ConstraintConfig};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{score, ssmt_baseline, ConfusionMatrix, MetricReport};
use crate::inference::{em_fit, EmConfig, EmTrace, SegmentView};
use crate::itinerary::{build_itinerary, write_csv, write_jsonl, write_rejects, Flags, Itinerary, Reject};
use crate::klem::{klem_infer, rounds_csv, KlemConfig, KlemInput, KlemModels, KlemRoundRow, TrainCombination};
use crate::load::{load_afc, load_avl, load_topology, topology_json, write_afc, write_avl};
use crate::model::{segment_record, AfcRecord, NetworkTopology, TrainRun, TravelRecord};
use crate::prob::{fit_access, init_egress, AccessModel, EgressModel, Grouping, NormalParams, ObservedTrip, ProbConfig};
use crate::synth::{generate, read_truth, write_truth, ScenarioConfig, TruthSegment};

/// Settings the inference core needs, without any file paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceConfig {
    pub constraints: ConstraintConfig,
    pub em: EmConfig,
    pub klem: KlemConfig,
    pub prob: ProbConfig,
}

impl From<&PipelineConfig> for InferenceConfig {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            constraints: c.constraints.clone(),
            em: c.em.clone(),
            klem: c.klem.clone(),
            prob: c.prob.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel {
    pub segments: usize,
    pub records: usize,
    /// Egress-side model of each segment; inner segments measure
    /// alight-to-next-boarding.
    pub segment_models: Vec<NormalParams>,
    pub initial_egress: NormalParams,
    pub access: NormalParams,
    pub converged: bool,
    pub em_iterations: Vec<usize>,
    pub klem_rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsDoc {
    pub observable: usize,
    pub unknown: usize,
    pub unassignable: usize,
    pub access: AccessModel,
    pub egress_init: EgressModel,
    pub groups: BTreeMap<String, GroupModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupDiagnostics {
    pub traces: Vec<EmTrace>,
    pub klem_rounds: Vec<KlemRoundRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub itineraries: Vec<Itinerary>,
    pub rejects: Vec<Reject>,
    pub baseline: Vec<Itinerary>,
    pub models: ModelsDoc,
    pub diagnostics: BTreeMap<String, GroupDiagnostics>,
    /// Records with candidate sets, in input order, for downstream checks.
    pub prepared: Vec<Prepared>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub record: TravelRecord,
    pub sets: Vec<CandidateSet>,
    pub gaps: Vec<i64>,
}

fn observed_trip(p: &Prepared, grouping: Grouping) -> ObservedTrip {
    let afc = &p.record.afc;
    let first = &p.sets[0].trains[0];
    let last = &p.sets[p.sets.len() - 1].trains[0];
    let (ag, eg) = match grouping {
        Grouping::Od => (afc.od_key(), afc.od_key()),
        Grouping::Station => (afc.entry_station.clone(), afc.exit_station.clone()),
    };
    ObservedTrip {
        access_group: ag,
        egress_group: eg,
        access: (first.dt - afc.entry_time) as f64,
        egress: (afc.exit_time - last.at) as f64,
    }
}

fn group_keys(afc: &AfcRecord, grouping: Grouping) -> (String, String) {
    match grouping {
        Grouping::Od => (afc.od_key(), afc.od_key()),
        Grouping::Station => (afc.entry_station.clone(), afc.exit_station.clone()),
    }
}

struct GroupResult {
    key: String,
    model: GroupModel,
    diagnostics: GroupDiagnostics,
    itineraries: Vec<(usize, std::result::Result<Itinerary, Reject>)>,
}

fn infer_group(
    key: &str,
    members: &[usize],
    prepared: &[Prepared],
    access: &NormalParams,
    egress: &NormalParams,
    cfg: &InferenceConfig,
) -> Result<GroupResult> {
    let floor = cfg.prob.sigma2_floor;
    let segments = prepared[members[0]].sets.len();
    let mut itineraries = Vec::with_capacity(members.len());

    let reject = |i: usize, e: Error| -> (usize, std::result::Result<Itinerary, Reject>) {
        (
            i,
            Err(Reject {
                passenger_id: prepared[i].record.afc.passenger_id.clone(),
                reason: format!("internal:{e}"),
            }),
        )
    };

    if segments == 1 {
        let views: Vec<SegmentView> = members
            .iter()
            .map(|&i| SegmentView::gate_anchored(i, &prepared[i].record, &prepared[i].sets[0]))
            .collect();
        let out = em_fit(&views, *egress, access, &cfg.em, floor);
        let flags = Flags {
            converged: out.converged,
            fallback: false,
        };
        for (&i, post) in members.iter().zip(&out.posteriors) {
            let p = &prepared[i];
            let comb = TrainCombination::new(vec![post.chosen_train()], &p.gaps);
            itineraries.push(
                match build_itinerary(&p.record, &p.sets, &p.gaps, &comb, std::slice::from_ref(post), flags) {
                    Ok(it) => (i, Ok(it)),
                    Err(e) => reject(i, e),
                },
            );
        }
        return Ok(GroupResult {
            key: key.to_string(),
            model: GroupModel {
                segments,
                records: members.len(),
                segment_models: vec![out.params],
                initial_egress: *egress,
                access: *access,
                converged: out.converged,
                em_iterations: vec![out.trace.iterations()],
                klem_rounds: None,
            },
            diagnostics: GroupDiagnostics {
                traces: vec![out.trace],
                klem_rounds: Vec::new(),
            },
            itineraries,
        });
    }

    let inputs: Vec<KlemInput> = members
        .iter()
        .map(|&i| KlemInput {
            record: &prepared[i].record,
            sets: &prepared[i].sets,
            gaps: &prepared[i].gaps,
        })
        .collect();
    let models = KlemModels {
        access: *access,
        egress: *egress,
    };
    let res = klem_infer(&inputs, &models, &cfg.em, &cfg.klem, floor)?;
    for (n, &i) in members.iter().enumerate() {
        let p = &prepared[i];
        if res.fallback[n] {
            itineraries.push((
                i,
                Err(Reject {
                    passenger_id: p.record.afc.passenger_id.clone(),
                    reason: "fallback".into(),
                }),
            ));
            continue;
        }
        let flags = Flags {
            converged: res.converged,
            fallback: false,
        };
        itineraries.push(
            match build_itinerary(&p.record, &p.sets, &p.gaps, &res.chosen[n], &res.posteriors[n], flags) {
                Ok(it) => (i, Ok(it)),
                Err(e) => reject(i, e),
            },
        );
    }
    Ok(GroupResult {
        key: key.to_string(),
        model: GroupModel {
            segments,
            records: members.len(),
            segment_models: res.segment_models.clone(),
            initial_egress: *egress,
            access: *access,
            converged: res.converged,
            em_iterations: res.traces.iter().map(EmTrace::iterations).collect(),
            klem_rounds: Some(res.rounds),
        },
        diagnostics: GroupDiagnostics {
            traces: res.traces,
            klem_rounds: res.diagnostics,
        },
        itineraries,
    })
}

/// Segments records and builds candidate sets; unusable records become rejects.
pub fn prepare(
    topo: &NetworkTopology,
    afc: &[AfcRecord],
    runs: &[TrainRun],
    constraints: &ConstraintConfig,
) -> (Vec<Prepared>, Vec<Reject>) {
    let index = CandidateIndex::new(runs, topo);
    let built: Vec<std::result::Result<Prepared, Reject>> = afc
        .par_iter()
        .map(|a| {
            let rej = |reason: String| Reject {
                passenger_id: a.passenger_id.clone(),
                reason,
            };
            let record = segment_record(a, topo).map_err(|_| rej("unroutable_od".into()))?;
            let gaps = constraints.transfer_mins(&record, topo);
            let sets = build_candidates(&record, &index, constraints, &gaps).map_err(|e| match e {
                Error::EmptyCandidateSet { segment } => rej(format!("empty_candidate_set:segment={segment}")),
                other => rej(format!("internal:{other}")),
            })?;
            Ok(Prepared { record, sets, gaps })
        })
        .collect();
    let mut prepared = Vec::new();
    let mut rejects = Vec::new();
    for b in built {
        match b {
            Ok(p) => prepared.push(p),
            Err(r) => rejects.push(r),
        }
    }
    (prepared, rejects)
}

/// The whole inference over in-memory inputs.
pub fn run_inference(
    topo: &NetworkTopology,
    afc: &[AfcRecord],
    runs: &[TrainRun],
    cfg: &InferenceConfig,
) -> Result<InferenceOutput> {
    let (prepared, mut rejects) = prepare(topo, afc, runs, &cfg.constraints);
    let sliced = slice_datasets(&prepared.iter().map(|p| Ok::<_, ()>(p.sets.clone())).collect::<Vec<_>>());

    let observed: Vec<ObservedTrip> = sliced
        .observable
        .iter()
        .map(|&i| observed_trip(&prepared[i], cfg.prob.grouping))
        .collect();
    let access = fit_access(&observed, &cfg.prob)?;
    let egress = init_egress(&observed, &cfg.prob)?;

    // inference groups share one OD route
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in prepared.iter().enumerate() {
        groups.entry(p.record.route_key()).or_default().push(i);
    }

    let results: Vec<Result<GroupResult>> = groups
        .par_iter()
        .map(|(key, members)| {
            let (ag, eg) = group_keys(&prepared[members[0]].record.afc, cfg.prob.grouping);
            infer_group(key, members, &prepared, access.params(&ag), egress.params(&eg), cfg)
        })
        .collect();

    let mut by_record: Vec<Option<std::result::Result<Itinerary, Reject>>> = vec![None; prepared.len()];
    let mut model_groups = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    for r in results {
        let r = r?;
        for (i, it) in r.itineraries {
            by_record[i] = Some(it);
        }
        model_groups.insert(r.key.clone(), r.model);
        diagnostics.insert(r.key, r.diagnostics);
    }
    let mut itineraries = Vec::with_capacity(prepared.len());
    for r in by_record.into_iter().flatten() {
        match r {
            Ok(it) => itineraries.push(it),
            Err(rej) => rejects.push(rej),
        }
    }

    let baseline: Vec<Itinerary> = prepared
        .par_iter()
        .filter_map(|p| {
            let comb = ssmt_baseline(&p.record, &p.sets, &p.gaps).ok()?;
            build_itinerary(&p.record, &p.sets, &p.gaps, &comb, &[], Flags::default()).ok()
        })
        .collect();

    let models = ModelsDoc {
        observable: sliced.observable.len(),
        unknown: sliced.unknown.len(),
        unassignable: afc.len() - prepared.len(),
        access,
        egress_init: egress,
        groups: model_groups,
    };
    Ok(InferenceOutput {
        itineraries,
        rejects,
        baseline,
        models,
        diagnostics,
        prepared,
    })
}

// ---------------------------------------------------------------- commands

/// Content hashes of the files a command read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn manifest(&mut self, command: &str, cfg: &PipelineConfig, seed: Option<u64>, inputs: &[PathBuf]) -> Result<()> {
        let mut hashed = BTreeMap::new();
        for p in inputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            hashed.insert(p.display().to_string(), sha256_hex(&bytes));
        }
        let m = Manifest {
            tool: "railtrace".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: sha256_hex(cfg.canonical_json().as_bytes()),
            seed,
            inputs: hashed,
            outputs: self.written.clone(),
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn file_stem(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Scenario from the config (or the bundled default) with the seed override applied.
pub fn scenario_for(cfg: &PipelineConfig) -> Result<ScenarioConfig> {
    let mut sc = match &cfg.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ScenarioConfig::from_json(&text)?
        }
        None => ScenarioConfig::default_scenario(),
    };
    if let Some(s) = cfg.seed {
        sc.seed = s;
    }
    Ok(sc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulateSummary {
    pub passengers: usize,
    pub dropped: usize,
    pub afc: PathBuf,
    pub avl: PathBuf,
    pub topology: PathBuf,
    pub ground_truth: PathBuf,
}

pub fn cmd_simulate(cfg: &PipelineConfig) -> Result<SimulateSummary> {
    cfg.validate()?;
    let sc = scenario_for(cfg)?;
    let out = generate(&sc)?;
    let mut w = Writer::new(&cfg.output_dir)?;
    let afc = w.put("afc.csv", &to_bytes(|b| write_afc(b, &out.afc)))?;
    let avl = w.put("avl.csv", &to_bytes(|b| write_avl(b, &out.runs)))?;
    let truth = w.put("ground_truth.csv", &to_bytes(|b| write_truth(b, &out.truth)))?;
    let topo = w.put("topology.json", (topology_json(&sc.topology) + "\n").as_bytes())?;
    let sc_json = serde_json::to_string_pretty(&sc).expect("scenario serializes") + "\n";
    w.put("scenario.json", sc_json.as_bytes())?;
    let inputs: Vec<PathBuf> = cfg.scenario.iter().cloned().collect();
    w.manifest("simulate", cfg, Some(sc.seed), &inputs)?;
    log::info!(
        "simulated {} passengers ({} dropped), left-behind incidence {:.3}",
        out.afc.len(),
        out.dropped,
        out.left_behind_incidence()
    );
    Ok(SimulateSummary {
        passengers: out.afc.len(),
        dropped: out.dropped,
        afc,
        avl,
        topology: topo,
        ground_truth: truth,
    })
}

/// Input files for inference; simulates into the output directory when the
/// config names none.
fn resolve_inputs(cfg: &PipelineConfig) -> Result<(PathBuf, PathBuf, PathBuf, Option<PathBuf>)> {
    match (&cfg.inputs.afc, &cfg.inputs.avl, &cfg.inputs.topology) {
        (Some(a), Some(v), Some(t)) => Ok((a.clone(), v.clone(), t.clone(), cfg.inputs.ground_truth.clone())),
        _ => {
            let s = cmd_simulate(cfg)?;
            Ok((s.afc, s.avl, s.topology, cfg.inputs.ground_truth.clone().or(Some(s.ground_truth))))
        }
    }
}

pub struct InferRun {
    pub output: InferenceOutput,
    pub ground_truth: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    writer: Writer,
}

fn infer_files(cfg: &PipelineConfig) -> Result<InferRun> {
    cfg.validate()?;
    let (afc_p, avl_p, topo_p, truth_p) = resolve_inputs(cfg)?;
    let topo = load_topology(&topo_p)?;
    let afc = load_afc(&afc_p, &topo)?;
    let avl = load_avl(&avl_p, &topo)?;
    for r in &afc.rejected {
        log::warn!("{}:{}: {}", afc_p.display(), r.line, r.reason);
    }
    for r in &avl.rejected {
        log::warn!("{}:{}: {}", avl_p.display(), r.line, r.reason);
    }
    let output = run_inference(&topo, &afc.records, &avl.records, &InferenceConfig::from(cfg))?;

    let mut w = Writer::new(&cfg.output_dir)?;
    w.put("itineraries.csv", &to_bytes(|b| write_csv(b, &output.itineraries)))?;
    w.put("itineraries.jsonl", &to_bytes(|b| write_jsonl(b, &output.itineraries)))?;
    w.put("rejects.csv", &to_bytes(|b| write_rejects(b, &output.rejects)))?;
    let models = serde_json::to_string_pretty(&output.models).expect("models serialize") + "\n";
    w.put("models.json", models.as_bytes())?;
    for (key, d) in &output.diagnostics {
        for (m, t) in d.traces.iter().enumerate() {
            w.put(&format!("em_trace_{}_seg{}.csv", file_stem(key), m + 1), t.to_csv().as_bytes())?;
        }
        if !d.klem_rounds.is_empty() {
            w.put(&format!("klem_rounds_{}.csv", file_stem(key)), rounds_csv(&d.klem_rounds).as_bytes())?;
        }
    }
    let mut inputs = vec![afc_p, avl_p, topo_p];
    inputs.extend(cfg.scenario.iter().cloned());
    Ok(InferRun {
        output,
        ground_truth: truth_p,
        inputs,
        writer: w,
    })
}

pub fn cmd_infer(cfg: &PipelineConfig) -> Result<InferenceOutput> {
    let mut run = infer_files(cfg)?;
    run.writer.manifest("infer", cfg, cfg.seed, &run.inputs)?;
    Ok(run.output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationDoc {
    pub inferred: MetricReport,
    pub baseline: MetricReport,
}

pub struct Evaluation {
    pub doc: EvaluationDoc,
    pub output: InferenceOutput,
    pub truth: Vec<TruthSegment>,
    pub matrices: BTreeMap<String, ConfusionMatrix>,
}

fn evaluate_run(cfg: &PipelineConfig) -> Result<(Evaluation, InferRun)> {
    let mut run = infer_files(cfg)?;
    let truth_p = run
        .ground_truth
        .clone()
        .ok_or_else(|| Error::Config("evaluation needs inputs.ground_truth".into()))?;
    let file = fs::File::open(&truth_p).map_err(|e| Error::io(&truth_p, e))?;
    let truth = read_truth(file).map_err(|m| Error::format(&truth_p, m))?;
    let (inferred, matrices) = score(&run.output.itineraries, &truth)?;
    let (baseline, _) = score(&run.output.baseline, &truth)?;
    let doc = EvaluationDoc { inferred, baseline };
    let w = &mut run.writer;
    let metrics = serde_json::to_string_pretty(&doc).expect("metrics serialize") + "\n";
    w.put("metrics.json", metrics.as_bytes())?;
    for (key, m) in &matrices {
        w.put(&format!("confusion_{}.csv", file_stem(key)), m.to_csv().as_bytes())?;
    }
    run.inputs.push(truth_p);
    let output = run.output.clone();
    Ok((
        Evaluation {
            doc,
            output,
            truth,
            matrices,
        },
        run,
    ))
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Evaluation> {
    let (ev, mut run) = evaluate_run(cfg)?;
    run.writer.manifest("evaluate", cfg, cfg.seed, &run.inputs)?;
    Ok(ev)
}

/// Histogram bin width for transfer-time plot data, seconds.
const TRANSFER_BIN: i64 = 30;

/// Plot data: EM trace, transfer-time histogram, and left-behind comparison.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<Evaluation> {
    let (ev, mut run) = evaluate_run(cfg)?;

    let mut hist: BTreeMap<i64, (u64, u64)> = BTreeMap::new();
    for it in &ev.output.itineraries {
        for &t in &it.transfer_s {
            hist.entry(t.div_euclid(TRANSFER_BIN) * TRANSFER_BIN).or_default().0 += 1;
        }
    }
    for t in ev.truth.iter().filter_map(|t| t.transfer_s) {
        hist.entry(t.div_euclid(TRANSFER_BIN) * TRANSFER_BIN).or_default().1 += 1;
    }
    let mut s = String::from("bin_start_s,inferred,truth\n");
    for (b, (i, t)) in &hist {
        s.push_str(&format!("{b},{i},{t}\n"));
    }
    run.writer.put("report_transfer_hist.csv", s.as_bytes())?;

    let mut lb: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for it in &ev.output.itineraries {
        for l in &it.legs {
            lb.entry(l.left_behind).or_default().0 += 1;
        }
    }
    for t in &ev.truth {
        lb.entry(t.left_behind).or_default().1 += 1;
    }
    let mut s = String::from("left_behind,inferred,truth\n");
    for (k, (i, t)) in &lb {
        s.push_str(&format!("{k},{i},{t}\n"));
    }
    run.writer.put("report_left_behind.csv", s.as_bytes())?;

    let mut s = String::from("group,segment,iteration,loglik,mu,sigma2,delta\n");
    for (key, d) in &ev.output.diagnostics {
        for (m, t) in d.traces.iter().enumerate() {
            for r in &t.rows {
                s.push_str(&format!("{key},{},{},{},{},{},{}\n", m + 1, r.iteration, r.loglik, r.mu, r.sigma2, r.delta));
            }
        }
    }
    run.writer.put("report_em_trace.csv", s.as_bytes())?;
    run.writer.manifest("report", cfg, cfg.seed, &run.inputs)?;
    Ok(ev)
}

/// Configures the global rayon pool once; later calls are ignored.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialised");
        }
    }
}
