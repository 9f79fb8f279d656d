//! Persisted run configuration. Every command writes the resolved config
//! next to its outputs, and `--config <that file>` repeats the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use venomguard::dataio::{SynthFaceSpec, ATTRIBUTE_NAMES};
use venomguard::models::ArchName;
use venomguard::training::{TargetSpec, TrainConfig};
use venomguard::{Error, Result, Task};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub fractions: (f64, f64, f64),
    pub resolution: usize,
    pub attributes: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 512,
            fractions: (0.45, 0.45, 0.1),
            resolution: 32,
            attributes: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub epsilons: Vec<f64>,
    /// L2 threshold for editing.
    pub threshold: f64,
    /// L1 threshold for reenactment.
    pub reenactment_threshold: f64,
    /// Target architectures trained for the transfer sweep.
    pub target_archs: Vec<ArchName>,
    /// Attributes left out of the "different domains" target editors.
    pub dd_drop: Vec<String>,
    pub domains_per_image: usize,
    /// Rows in each LBP side-by-side panel.
    pub lbp_examples: usize,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.01, 0.02, 0.03, 0.05],
            threshold: 0.05,
            reenactment_threshold: 0.05,
            target_archs: vec![ArchName::Res6, ArchName::CNet],
            dd_drop: vec!["glasses".into()],
            domains_per_image: 3,
            lbp_examples: 4,
            noise_seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub target: TargetSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::AttributeEditing,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            target: TargetSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flags shared by every command. Set flags beat file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epsilon: Option<f64>,
    pub task: Option<Task>,
    pub arch: Option<ArchName>,
}

/// Mixes the run seed into per-model seeds so the target never shares
/// initial weights with the surrogate.
const TARGET_SEED_SALT: u64 = 0x7A46_E7C1_0B3D_5F29;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))
            }
            None => Ok(Self::default()),
        }
    }

    /// Apply flags, then push the run-level task and seed into the nested
    /// configs so the file on disk is self-consistent.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(t) = o.task {
            self.task = t;
        }
        if let Some(e) = o.epsilon {
            if !(e.is_finite() && (0.0..=1.0).contains(&e)) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
            self.train.epsilon = e;
        }
        if let Some(a) = o.arch {
            self.train.surrogate_arch = a;
            self.target.arch = a;
        }
        self.train.task = self.task;
        self.train.seed = self.seed;
        self.target.task = self.task;
        self.target.seed = self.seed ^ TARGET_SEED_SALT;
        if self.eval.epsilons.is_empty() {
            return Err(Error::Config("the epsilon grid is empty".into()));
        }
        Ok(self)
    }

    pub fn synth_spec(&self) -> SynthFaceSpec {
        SynthFaceSpec {
            seed: self.seed,
            resolution: self.dataset.resolution,
            attributes: self.dataset.attributes.clone(),
            ..SynthFaceSpec::default()
        }
    }

    pub fn threshold(&self) -> f64 {
        match self.task {
            Task::AttributeEditing => self.eval.threshold,
            Task::Reenactment => self.eval.reenactment_threshold,
        }
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
