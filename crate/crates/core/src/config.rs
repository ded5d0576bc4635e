//! Pipeline configuration: one JSON document, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::candidates::ConstraintConfig;
use crate::error::{Error, Result};
use crate::inference::EmConfig;
use crate::klem::KlemConfig;
use crate::prob::ProbConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub afc: Option<PathBuf>,
    pub avl: Option<PathBuf>,
    pub topology: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

impl Inputs {
    pub fn is_empty(&self) -> bool {
        self.afc.is_none() && self.avl.is_none() && self.topology.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Observed files. When all are absent the scenario is simulated first.
    pub inputs: Inputs,
    /// Scenario JSON; the bundled default when absent.
    pub scenario: Option<PathBuf>,
    pub constraints: ConstraintConfig,
    pub em: EmConfig,
    pub klem: KlemConfig,
    pub prob: ProbConfig,
    pub output_dir: PathBuf,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Inputs::default(),
            scenario: None,
            constraints: ConstraintConfig {
                min_access_seconds: 25,
                min_egress_seconds: 30,
                ..ConstraintConfig::default()
            },
            em: EmConfig::default(),
            klem: KlemConfig::default(),
            prob: ProbConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: None,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.inputs.afc);
        fix(&mut self.inputs.avl);
        fix(&mut self.inputs.topology);
        fix(&mut self.inputs.ground_truth);
        fix(&mut self.scenario);
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(p) = &o.out {
            self.output_dir = p.clone();
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.constraints.validate()?;
        self.em.validate()?;
        self.klem.validate()?;
        self.prob.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let given = [&self.inputs.afc, &self.inputs.avl, &self.inputs.topology];
        if !self.inputs.is_empty() && given.iter().any(|p| p.is_none()) {
            return Err(Error::Config("inputs.afc, inputs.avl and inputs.topology must be given together".into()));
        }
        for p in given.into_iter().chain([&self.inputs.ground_truth, &self.scenario]).flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("input path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Canonical JSON used for the manifest hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
