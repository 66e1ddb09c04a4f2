//! Experiment configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use covertmark_core::cmdp::{CmdpConfig, Optimizer};
use covertmark_core::polar::DecodeRule;
use covertmark_core::source::{CoverSource, FileSource, PairSource};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
#[allow(non_snake_case)]
pub enum SourceSpec {
    /// Every unordered token pair is a per-token state.
    Pair { V: usize, L: usize, B: usize },
    /// Pair states lumped into cross and same-side classes.
    PairClasses {
        V: usize,
        L: usize,
        B: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cross_mass: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        second_prob: Option<f64>,
    },
    /// Block-law file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointKind {
    /// `U_t = [x_t ≥ ⌊V/2⌋]` per position.
    #[default]
    Partition,
    /// Per-block laws from primal-dual training.
    Cmdp,
}

/// Training options; anything omitted takes the library default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdpSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_block_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: SourceSpec,
    #[serde(default)]
    pub joint: JointKind,
    #[serde(default)]
    pub cmdp: CmdpSection,
    #[serde(default = "default_threshold")]
    pub t_delta: f64,
    #[serde(default = "default_threshold")]
    pub t_eps: f64,
    /// `(T_δ, T_ε)` points for `run-ber`; defaults to the single pair above.
    #[serde(default)]
    pub thresholds: Vec<(f64, f64)>,
    /// Key-bit counts for `run-tv`.
    #[serde(default = "default_key_bits")]
    pub key_bits: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub decode_rule: DecodeRule,
    /// Random restarts for `capacity`.
    #[serde(default)]
    pub restarts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_threshold() -> f64 {
    0.25
}

fn default_key_bits() -> Vec<usize> {
    (0..=6).collect()
}

fn default_trials() -> usize {
    2000
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let in_unit = |t: f64| t > 0.0 && t < 1.0;
        if !in_unit(self.t_delta) || !in_unit(self.t_eps) || !self.thresholds.iter().all(|&(a, b)| in_unit(a) && in_unit(b)) {
            return Err(ConfigError("thresholds must lie in (0, 1)".into()));
        }
        if self.trials == 0 {
            return Err(ConfigError("trials must be at least 1".into()));
        }
        match self.source {
            SourceSpec::Pair { V, L, B } | SourceSpec::PairClasses { V, L, B, .. } => {
                if V < 2 || L == 0 || B == 0 {
                    return Err(ConfigError(format!("pair source needs V ≥ 2, L ≥ 1, B ≥ 1 (got {V}, {L}, {B})")));
                }
            }
            SourceSpec::File { .. } => {}
        }
        Ok(())
    }

    /// Threshold points for a BER sweep.
    pub fn ber_points(&self) -> Vec<(f64, f64)> {
        if self.thresholds.is_empty() {
            vec![(self.t_delta, self.t_eps)]
        } else {
            self.thresholds.clone()
        }
    }

    /// Resolved training options: `U` block size `2^L` for pair sources and
    /// 2 for loaded sources unless set.
    pub fn cmdp_config(&self, block_len: usize) -> CmdpConfig {
        let d = CmdpConfig::default();
        let c = &self.cmdp;
        let u_default = match self.source {
            SourceSpec::File { .. } => 2,
            _ => 1usize.checked_shl(block_len as u32).unwrap_or(usize::MAX),
        };
        CmdpConfig {
            gamma: c.gamma.unwrap_or(d.gamma),
            epsilon: c.epsilon.unwrap_or(d.epsilon),
            eta_phi: c.eta_phi.unwrap_or(d.eta_phi),
            eta_beta: c.eta_beta.unwrap_or(d.eta_beta),
            iterations: c.iterations.unwrap_or(d.iterations),
            u_block_size: c.u_block_size.unwrap_or(u_default),
            fd_step: c.fd_step.unwrap_or(d.fd_step),
            init_scale: c.init_scale.unwrap_or(d.init_scale),
            optimizer: c.optimizer.unwrap_or(d.optimizer),
        }
    }

    /// Source path resolved against the configuration file's directory.
    pub fn source_path(&self, base: &Path) -> Option<PathBuf> {
        match &self.source {
            SourceSpec::File { path } if path.is_relative() => Some(base.join(path)),
            SourceSpec::File { path } => Some(path.clone()),
            _ => None,
        }
    }
}

/// Instantiates the configured source; file sources also return their bytes.
pub fn build_source(cfg: &ExperimentConfig, base: &Path) -> anyhow::Result<(Arc<dyn CoverSource>, Option<Vec<u8>>)> {
    Ok(match &cfg.source {
        SourceSpec::Pair { V, L, B } => (Arc::new(PairSource::new(*V, *L, *B)?), None),
        SourceSpec::PairClasses {
            V,
            L,
            B,
            cross_mass,
            second_prob,
        } => {
            let mut src = PairSource::classes(*V, *L, *B, *cross_mass)?;
            if let Some(theta) = second_prob {
                src = src.with_second_prob(*theta)?;
            }
            (Arc::new(src), None)
        }
        SourceSpec::File { .. } => {
            let path = cfg.source_path(base).expect("file source");
            let bytes = std::fs::read(&path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            let text = String::from_utf8(bytes.clone())?;
            (Arc::new(FileSource::from_json(&text)?), Some(bytes))
        }
    })
}
