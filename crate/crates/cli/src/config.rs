//! Run-configuration schema: one JSON document per command.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use flowguide::control::{GuidanceConfig, Lookahead, Method};
use flowguide::data::{sample_discs16, sample_hexagon};
use flowguide::inverse::ForwardOperator;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub dataset: String,
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Hidden layer widths; defaults per dataset when omitted.
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

impl TrainSpec {
    pub fn hidden_widths(&self) -> Result<Vec<usize>, CliError> {
        if let Some(h) = &self.hidden {
            return Ok(h.clone());
        }
        match self.dataset.as_str() {
            "hexagon" => Ok(vec![64, 64]),
            "discs16" => Ok(vec![512, 512]),
            other => Err(CliError::Config(format!("unknown dataset tag {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.iterations < 1 {
            return Err(CliError::Config("train.iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(CliError::Config("train.batch_size must be >= 1".into()));
        }
        self.hidden_widths().map(|_| ())
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub checkpoint: PathBuf,
    pub count: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// How many individual trajectory CSVs to dump.
    #[serde(default = "default_traj_dumps")]
    pub trajectory_dumps: usize,
}

fn default_steps() -> usize {
    100
}

fn default_traj_dumps() -> usize {
    4
}

impl SampleSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.count < 1 || self.steps < 1 {
            return Err(CliError::Config("sample.count and sample.steps must be >= 1".into()));
        }
        require_file(&self.checkpoint)
    }
}

/// Forward-operator block, e.g. `{"op": "mask", "keep_fraction": 0.3, "seed": 7}`.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OpSpec {
    Identity,
    Mask { keep_fraction: f64, seed: u64 },
    BoxMask { box_size: usize },
    GaussianBlur { sigma_b: f64 },
    Downsample2,
    Radon { angles: usize },
    NonlinearBlur { sigma_b: f64, gamma: f64 },
}

impl OpSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            OpSpec::Identity => "identity",
            OpSpec::Mask { .. } => "mask",
            OpSpec::BoxMask { .. } => "box-mask",
            OpSpec::GaussianBlur { .. } => "gaussian-blur",
            OpSpec::Downsample2 => "downsample2",
            OpSpec::Radon { .. } => "radon",
            OpSpec::NonlinearBlur { .. } => "nonlinear-blur",
        }
    }

    /// Builds the operator for a model of dimension `dim`; image-structured
    /// operators require `dim` to be a perfect square.
    pub fn build(&self, dim: usize) -> Result<ForwardOperator, CliError> {
        let side = || -> Result<usize, CliError> {
            let s = (dim as f64).sqrt().round() as usize;
            if s * s == dim {
                Ok(s)
            } else {
                Err(CliError::Config(format!(
                    "operator {:?} needs a square image dimension, model dim is {dim}",
                    self.tag()
                )))
            }
        };
        Ok(match self {
            OpSpec::Identity => ForwardOperator::identity(dim),
            OpSpec::Mask { keep_fraction, seed } => {
                if !(0.0..=1.0).contains(keep_fraction) {
                    return Err(CliError::Config("mask.keep_fraction must be in [0,1]".into()));
                }
                let s = side()?;
                ForwardOperator::random_mask(s, s, *keep_fraction, *seed)
            }
            OpSpec::BoxMask { box_size } => {
                let s = side()?;
                ForwardOperator::box_mask(s, s, *box_size)
            }
            OpSpec::GaussianBlur { sigma_b } => {
                let s = side()?;
                ForwardOperator::gaussian_blur(s, s, *sigma_b)
            }
            OpSpec::Downsample2 => {
                let s = side()?;
                ForwardOperator::downsample2(s, s)
            }
            OpSpec::Radon { angles } => {
                let s = side()?;
                ForwardOperator::radon(s, s, *angles)
            }
            OpSpec::NonlinearBlur { sigma_b, gamma } => {
                let s = side()?;
                ForwardOperator::nonlinear_blur(s, s, *sigma_b, *gamma)
            }
        })
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskSpec {
    /// Steer the endpoint toward a fixed point in state space.
    Corner { target: Vec<f64> },
    /// Recover a synthetic ground truth from a simulated measurement.
    Inverse {
        op: OpSpec,
        sigma: f64,
        #[serde(default = "default_truth_dataset")]
        truth_dataset: String,
        #[serde(default = "default_truth_seed")]
        truth_seed: u64,
        #[serde(default)]
        truth_index: usize,
        /// Disable the `1/(2 sigma^2)` likelihood prefactor on the loss.
        #[serde(default)]
        unscaled_loss: bool,
    },
}

fn default_truth_dataset() -> String {
    "discs16".into()
}

fn default_truth_seed() -> u64 {
    999
}

impl TaskSpec {
    pub fn tag(&self) -> String {
        match self {
            TaskSpec::Corner { .. } => "corner".into(),
            TaskSpec::Inverse { op, .. } => op.tag().into(),
        }
    }

    /// Ground-truth state for job `index_offset` within a repeat loop.
    pub fn ground_truth(&self, dim: usize, index_offset: usize) -> Result<Vec<f64>, CliError> {
        match self {
            TaskSpec::Corner { .. } => {
                Err(CliError::Config("corner task has no ground truth".into()))
            }
            TaskSpec::Inverse { truth_dataset, truth_seed, truth_index, .. } => {
                let idx = truth_index + index_offset;
                match truth_dataset.as_str() {
                    "discs16" => {
                        if dim != 256 {
                            return Err(CliError::Config(format!(
                                "discs16 ground truth needs a 256-dim model, got {dim}"
                            )));
                        }
                        Ok(sample_discs16(idx + 1, *truth_seed).swap_remove(idx))
                    }
                    "hexagon" => {
                        if dim != 2 {
                            return Err(CliError::Config(format!(
                                "hexagon ground truth needs a 2-dim model, got {dim}"
                            )));
                        }
                        Ok(sample_hexagon(idx + 1, *truth_seed).swap_remove(idx))
                    }
                    other => Err(CliError::Config(format!("unknown truth dataset {other:?}"))),
                }
            }
        }
    }

    pub fn operator(&self, dim: usize) -> Result<Option<Arc<ForwardOperator>>, CliError> {
        match self {
            TaskSpec::Corner { .. } => Ok(None),
            TaskSpec::Inverse { op, .. } => Ok(Some(Arc::new(op.build(dim)?))),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideSpec {
    pub checkpoint: PathBuf,
    pub task: TaskSpec,
    pub method: String,
    pub lambda: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    pub k: Option<usize>,
    #[serde(default = "default_n_ctrl")]
    pub n_ctrl: usize,
    #[serde(default = "default_guide_lr")]
    pub lr: f64,
    #[serde(default)]
    pub rescale_lambda: bool,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub single_step_full_jump: bool,
    #[serde(default)]
    pub seed: u64,
    /// Number of (seed, image) jobs to run; metrics get a final aggregate row.
    #[serde(default = "default_repeat")]
    pub repeat: usize,
}

fn default_n() -> usize {
    20
}

fn default_n_ctrl() -> usize {
    20
}

fn default_guide_lr() -> f64 {
    0.1
}

fn default_repeat() -> usize {
    1
}

impl GuideSpec {
    pub fn method(&self) -> Result<Method, CliError> {
        match self.method.as_str() {
            "global" => Ok(Method::Global),
            "rhc" => Ok(Method::RecedingHorizon),
            "rhc1" => Ok(Method::SingleStep),
            "deltat" => Ok(Method::DeltaT),
            other => Err(CliError::Config(format!(
                "unknown method {other:?} (expected global | rhc | rhc1 | deltat)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        require_file(&self.checkpoint)?;
        let method = self.method()?;
        match method {
            Method::RecedingHorizon => {
                if self.k.is_none() {
                    return Err(CliError::Config("method \"rhc\" requires \"k\"".into()));
                }
            }
            _ => {
                if self.k.is_some() {
                    return Err(CliError::Config(format!(
                        "\"k\" is only valid for method \"rhc\", not {:?}",
                        self.method
                    )));
                }
            }
        }
        if self.lambda < 0.0 {
            return Err(CliError::Config("lambda must be >= 0".into()));
        }
        if self.n < 1 || self.n_ctrl < 1 {
            return Err(CliError::Config("n and n_ctrl must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(CliError::Config("lr must be positive".into()));
        }
        if self.repeat < 1 {
            return Err(CliError::Config("repeat must be >= 1".into()));
        }
        if let TaskSpec::Inverse { sigma, .. } = &self.task {
            if *sigma < 0.0 {
                return Err(CliError::Config("task.sigma must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn guidance_config(&self, seed: u64) -> Result<GuidanceConfig, CliError> {
        let mut config = GuidanceConfig::new(self.lambda, self.n);
        config.inner_iters = self.n_ctrl;
        config.inner_lr = self.lr;
        config.rescale_lambda = self.rescale_lambda;
        config.warm_start = self.warm_start;
        config.single_step_full_jump = self.single_step_full_jump;
        config.seed = seed;
        if let Some(k) = self.k {
            if k < 1 {
                return Err(CliError::Config("k must be >= 1".into()));
            }
            config.lookahead = Lookahead::Fixed(k);
        }
        Ok(config)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub checkpoint: PathBuf,
    pub task: TaskSpec,
    pub lambda: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Swept parameter: "k" (default), "lambda", or "n".
    #[serde(default = "default_sweep_param")]
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "default_n_ctrl")]
    pub n_ctrl: usize,
    #[serde(default = "default_guide_lr")]
    pub lr: f64,
    /// Inner budget for the global reference solve.
    pub global_n_ctrl: Option<usize>,
    pub global_lr: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sweep_param() -> String {
    "k".into()
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        require_file(&self.checkpoint)?;
        if self.values.is_empty() {
            return Err(CliError::Config("sweep.values must be nonempty".into()));
        }
        match self.param.as_str() {
            "k" | "n" => {
                if self.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
                    return Err(CliError::Config(format!(
                        "sweep over {:?} needs positive integer values",
                        self.param
                    )));
                }
            }
            "lambda" => {
                if self.values.iter().any(|v| *v < 0.0) {
                    return Err(CliError::Config("lambda values must be >= 0".into()));
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown sweep param {other:?} (expected k | lambda | n)"
                )))
            }
        }
        if self.lambda < 0.0 {
            return Err(CliError::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("referenced path {} does not exist", path.display())))
    }
}

pub fn load_spec<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}
