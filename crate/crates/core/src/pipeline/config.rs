use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dist::{GaussianMixture, ToyTask};
use crate::error::{Error, Result};
use crate::meanflow::MeanFlowTrainConfig;
use crate::model::NetSpec;
use crate::rectflow::{FlowTrainConfig, Solver};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Which transport problem to train on.
// Empty struct variants rather than unit variants: serde only rejects
// unknown keys next to the tag for the former.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TaskConfig {
    ImbalancedToy {},
    ImbalancedToyConditional {},
    SingleGaussian {
        mu: Vec<f64>,
        sigma: f64,
    },
    Custom {
        source: GaussianMixture,
        target: GaussianMixture,
        prior_is_source: bool,
        #[serde(default)]
        class_labels: Option<Vec<usize>>,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::ImbalancedToy {}
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<ToyTask> {
        match self {
            TaskConfig::ImbalancedToy {} => Ok(ToyTask::imbalanced_toy()),
            TaskConfig::ImbalancedToyConditional {} => Ok(ToyTask::imbalanced_toy_conditional()),
            TaskConfig::SingleGaussian { mu, sigma } => ToyTask::single_gaussian(mu.clone(), *sigma),
            TaskConfig::Custom { source, target, prior_is_source, class_labels } => {
                ToyTask::new(source.clone(), target.clone(), *prior_is_source, class_labels.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReflowConfig {
    pub n_pairs: usize,
    pub steps: usize,
    pub solver: Solver,
    /// Percentage of the longest couplings to drop, in `[0, 100)`.
    pub truncate_k: f64,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        ReflowConfig { n_pairs: 100_000, steps: 100, solver: Solver::Euler, truncate_k: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ReMeanflow,
    TwoRectified,
    MeanflowScratch,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ReMeanflow, Method::TwoRectified, Method::MeanflowScratch];

    pub fn name(self) -> &'static str {
        match self {
            Method::ReMeanflow => "re_meanflow",
            Method::TwoRectified => "two_rectified",
            Method::MeanflowScratch => "meanflow_scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    /// Master seeds; empty means the top-level `seed` alone.
    pub seeds: Vec<u64>,
    /// Mean-flow-from-scratch steps; defaults to `flow.iters + meanflow.iters`.
    pub scratch_iters: Option<u64>,
    /// Second-stage flow steps of the 2-rectified baseline; defaults to `meanflow.iters`.
    pub two_rect_iters: Option<u64>,
    /// Also train Re-MeanFlow on untruncated couplings (`re_meanflow_k0`).
    pub truncation_ablation: bool,
    /// Training steps between points of the budget-vs-quality curve; 0 disables it.
    pub curve_every: u64,
    pub curve_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            methods: Method::ALL.to_vec(),
            seeds: Vec::new(),
            scratch_iters: None,
            two_rect_iters: None,
            truncation_ablation: false,
            curve_every: 2000,
            curve_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Samples below the log-density of this many sigmas count as outliers.
    pub outlier_sigma: f64,
    /// Subsample cap for the energy distance; `None` uses every sample.
    pub energy_max_points: Option<usize>,
    /// Noise draws for angular error and straightness.
    pub geometry_samples: usize,
    /// Euler steps of the reference flow ODE.
    pub reference_steps: usize,
    pub straightness_steps: usize,
    pub lipschitz_pairs: usize,
    pub heatmap_grid: usize,
    pub heatmap_samples: usize,
    pub hist_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 10_000,
            outlier_sigma: 4.0,
            energy_max_points: None,
            geometry_samples: 1000,
            reference_steps: 100,
            straightness_steps: 50,
            lipschitz_pairs: 10_000,
            heatmap_grid: 20,
            heatmap_samples: 100_000,
            hist_bins: 20,
        }
    }
}

/// Everything a run needs; loaded from TOML, unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Threads for reflow coupling generation; results do not depend on it.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub flow: FlowTrainConfig,
    #[serde(default)]
    pub reflow: ReflowConfig,
    #[serde(default)]
    pub meanflow: MeanFlowTrainConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/toy")
}

fn default_workers() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out: default_out(),
            workers: default_workers(),
            task: TaskConfig::default(),
            net: NetSpec::default(),
            flow: FlowTrainConfig::default(),
            reflow: ReflowConfig::default(),
            meanflow: MeanFlowTrainConfig::default(),
            compare: CompareConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(0.0..100.0).contains(&self.reflow.truncate_k) {
            return Err(Error::Config(format!("truncate_k {} outside [0, 100)", self.reflow.truncate_k)));
        }
        if self.reflow.n_pairs == 0 || self.reflow.steps == 0 {
            return Err(Error::Config("reflow needs n_pairs > 0 and steps > 0".into()));
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(Error::Config("net.hidden must list positive widths".into()));
        }
        if self.compare.methods.is_empty() {
            return Err(Error::Config("compare.methods is empty".into()));
        }
        self.meanflow.time.validate()?;
        self.task.build()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.compare.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.compare.seeds.clone()
        }
    }

    pub fn scratch_iters(&self) -> u64 {
        self.compare.scratch_iters.unwrap_or(self.flow.iters + self.meanflow.iters)
    }

    pub fn two_rect_iters(&self) -> u64 {
        self.compare.two_rect_iters.unwrap_or(self.meanflow.iters)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory and
    /// worker count (neither changes any numeric artifact).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        canon.workers = 0;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
