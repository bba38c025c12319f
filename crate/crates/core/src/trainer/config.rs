use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule of the weight optimizer, stepped once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` at each listed epoch.
    Piecewise { milestones: Vec<usize>, factor: f64 },
    /// Cosine decay to zero over the whole run.
    Cosine,
    /// Cosine decay to zero, restarted from the base rate at each listed epoch.
    CosineRestarts { restarts: Vec<usize> },
}

impl LrSchedule {
    /// Rate for zero-based `epoch` of `epochs`.
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        let cosine = |pos: usize, len: usize| 0.5 * base * (1.0 + (std::f64::consts::PI * pos as f64 / len.max(1) as f64).cos());
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Piecewise { milestones, factor } => {
                base * factor.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
            LrSchedule::Cosine => cosine(epoch, epochs),
            LrSchedule::CosineRestarts { restarts } => {
                let start = restarts.iter().copied().filter(|&r| r <= epoch).max().unwrap_or(0);
                let end = restarts.iter().copied().filter(|&r| r > epoch).min().unwrap_or(epochs);
                cosine(epoch - start, end - start)
            }
        }
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_w_lr() -> f64 {
    0.1
}

fn default_cosine() -> LrSchedule {
    LrSchedule::Cosine
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WOptimizer {
    #[serde(default = "default_w_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_cosine")]
    pub schedule: LrSchedule,
}

impl Default for WOptimizer {
    fn default() -> Self {
        WOptimizer {
            lr: default_w_lr(),
            momentum: default_momentum(),
            schedule: default_cosine(),
        }
    }
}

fn default_theta_lr() -> f64 {
    2e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

/// Adaptive-moment optimizer for the gate parameters (constant rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaOptimizer {
    #[serde(default = "default_theta_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for ThetaOptimizer {
    fn default() -> Self {
        ThetaOptimizer {
            lr: default_theta_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

fn default_lambda() -> f64 {
    6e-4
}

fn default_theta_tol() -> f64 {
    0.1
}

fn default_batch() -> usize {
    128
}

fn default_theta_init() -> f64 {
    0.75
}

fn default_beta() -> f64 {
    0.5
}

fn default_eval_limit() -> usize {
    10_000
}

/// Training hyperparameters. Defaults follow the CIFAR-10 column of the reference setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Overall complexity weight ν.
    pub nu: f64,
    /// Layer-count weight α.
    #[serde(default)]
    pub alpha: f64,
    /// FLOPS-versus-parameters trade-off β.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Weight decay λ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_theta_tol")]
    pub theta_tol: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_theta_init")]
    pub theta_init: f64,
    /// Zero-based epoch at whose start Θ is rounded and frozen. Absent: the last epoch; 0: never.
    #[serde(default)]
    pub finalize_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Fixed number of gradient shards per batch; 0 picks one from the batch size.
    #[serde(default)]
    pub shards: usize,
    /// Training rows used for the per-epoch accuracy estimate.
    #[serde(default = "default_eval_limit")]
    pub eval_train_limit: usize,
    #[serde(default)]
    pub w_optimizer: WOptimizer,
    #[serde(default)]
    pub theta_optimizer: ThetaOptimizer,
}

impl Hyperparams {
    /// Hyperparameters with defaults for everything but the regularizer weights and epochs.
    pub fn new(nu: f64, alpha: f64, beta: f64, epochs: usize) -> Self {
        Hyperparams {
            nu,
            alpha,
            beta,
            lambda: default_lambda(),
            theta_tol: default_theta_tol(),
            batch_size: default_batch(),
            epochs,
            theta_init: default_theta_init(),
            finalize_epoch: None,
            seed: 0,
            shards: 0,
            eval_train_limit: default_eval_limit(),
            w_optimizer: WOptimizer::default(),
            theta_optimizer: ThetaOptimizer::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return bad(format!("nu must be non-negative, got {}", self.nu));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.theta_tol > 0.0 && self.theta_tol < 0.5) {
            return bad(format!("theta_tol must lie in (0, 0.5), got {}", self.theta_tol));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(self.theta_init > 0.0 && self.theta_init <= 1.0) {
            return bad(format!("theta_init must lie in (0, 1], got {}", self.theta_init));
        }
        let w = &self.w_optimizer;
        if !(w.lr > 0.0 && w.lr.is_finite()) || !(0.0..1.0).contains(&w.momentum) {
            return bad(format!("weight optimizer needs lr > 0 and momentum in [0, 1), got {} / {}", w.lr, w.momentum));
        }
        if let LrSchedule::Piecewise { factor, .. } = w.schedule {
            if !(factor > 0.0) {
                return bad(format!("piecewise factor must be positive, got {factor}"));
            }
        }
        let t = &self.theta_optimizer;
        if !(t.lr > 0.0 && t.lr.is_finite())
            || !(0.0..1.0).contains(&t.beta1)
            || !(0.0..1.0).contains(&t.beta2)
            || !(t.eps > 0.0)
        {
            return bad("theta optimizer needs lr > 0, decay rates in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// Zero-based epoch at which Θ is rounded, if any.
    pub fn finalize_at(&self) -> Option<usize> {
        match self.finalize_epoch {
            None => Some(self.epochs - 1),
            Some(0) => None,
            Some(e) => Some(e),
        }
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let h: Hyperparams = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| crate::model::line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        h.validate()?;
        Ok(h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}
