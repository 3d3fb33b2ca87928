//! Run configuration files.
//!
//! A config is a plain-text file of `key = value` lines grouped under
//! `[gen]`, `[train]`, `[eval]` and `[output]` headers (TOML syntax).
//! Unknown sections or keys are rejected. Relative paths are resolved
//! against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use dilab::{GenConfig, LogRatioConfig, LossSpec, OptimConfig, Optimizer, RewardSpec, Schedule};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const OUT_DIR_ENV: &str = "DILAB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "dilab-out";

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub gen: Option<GenSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum RewardName {
    Gaussian,
    LinearTokenSum,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub reward_spec: RewardName,
    /// Standard deviation for `gaussian`, per-token weight for `linear-token-sum`.
    #[serde(default = "one")]
    pub reward_scale: f64,
    pub num_prompts: Option<usize>,
    pub responses_per_prompt: Option<usize>,
    pub vocab_size: Option<u32>,
    pub prompt_length: Option<usize>,
    pub response_length: Option<usize>,
    pub ref_concentration: Option<f64>,
    pub pairs_per_prompt: Option<usize>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    #[default]
    Tabular,
    TinySeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    #[default]
    Constant,
    CosineWarmup,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: Option<String>,
    /// DPO temperature.
    pub beta: Option<f64>,
    #[serde(default)]
    pub policy: PolicyName,
    pub embed_dim: Option<usize>,
    pub window: Option<usize>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerName,
    pub lr: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleName,
    pub warmup_fraction: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub grad_clip: Option<f64>,
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub length_normalize: bool,
    /// Bound on `|f|`; `0` disables clamping.
    pub clamp: Option<f64>,
    /// Directory produced by `dilab gen`.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Compute KL and true-reward metrics against the domain file.
    #[serde(default = "yes")]
    pub oracle: bool,
    /// Domain file; defaults to the one next to the dataset.
    pub domain: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { oracle: true, domain: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Model settings recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySettings {
    pub policy: PolicyName,
    pub embed_dim: usize,
    pub window: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub file: RunConfigFile,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let file = parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { file, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// `[output] dir`, then `$DILAB_OUT_DIR`, then `./dilab-out`.
    pub fn out_root(&self) -> PathBuf {
        if let Some(dir) = &self.file.output.dir {
            return self.resolve(dir);
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(DEFAULT_OUT_DIR),
        }
    }

    pub fn data_dir(&self, cli: Option<&Path>) -> PathBuf {
        match (cli, &self.file.train.data) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => self.out_root().join("data"),
        }
    }

    pub fn gen_config(&self, seed: Option<u64>) -> Result<GenConfig, Failure> {
        let g = self
            .file
            .gen
            .as_ref()
            .ok_or_else(|| Failure::config("config has no [gen] section (required key: reward_spec)"))?;
        let d = GenConfig::default();
        let cfg = GenConfig {
            num_prompts: g.num_prompts.unwrap_or(d.num_prompts),
            responses_per_prompt: g.responses_per_prompt.unwrap_or(d.responses_per_prompt),
            vocab_size: g.vocab_size.unwrap_or(d.vocab_size),
            prompt_length: g.prompt_length.unwrap_or(d.prompt_length),
            response_length: g.response_length.unwrap_or(d.response_length),
            reward: match g.reward_spec {
                RewardName::Gaussian => RewardSpec::Gaussian { scale: g.reward_scale },
                RewardName::LinearTokenSum => RewardSpec::LinearTokenSum { weight: g.reward_scale },
            },
            ref_concentration: g.ref_concentration.unwrap_or(d.ref_concentration),
            pairs_per_prompt: g.pairs_per_prompt.unwrap_or(d.pairs_per_prompt),
            seed: seed.or(g.seed).unwrap_or(d.seed),
            beta: g.beta.unwrap_or(d.beta),
        };
        cfg.validate().map_err(|e| Failure::config(format!("[gen]: {e}")))?;
        Ok(cfg)
    }

    pub fn loss_spec(&self, name: Option<&str>) -> Result<LossSpec, Failure> {
        let t = &self.file.train;
        let name = name
            .or(t.loss.as_deref())
            .ok_or_else(|| Failure::config("no loss given: pass --loss or set `loss` under [train]"))?;
        let ratio = LogRatioConfig {
            length_normalize: t.length_normalize,
            clamp: t.clamp.map_or(LogRatioConfig::default().clamp, |c| (c != 0.0).then_some(c)),
        };
        LossSpec::from_name(name, t.beta, ratio).map_err(|e| Failure::config(e.to_string()))
    }

    pub fn optim_config(&self) -> Result<OptimConfig, Failure> {
        let t = &self.file.train;
        let d = OptimConfig::default();
        let cfg = OptimConfig {
            optimizer: match t.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::adam(),
            },
            lr: t.lr.unwrap_or(d.lr),
            schedule: match t.schedule {
                ScheduleName::Constant => Schedule::Constant,
                ScheduleName::CosineWarmup => Schedule::CosineWarmup {
                    warmup_fraction: t.warmup_fraction.unwrap_or(dilab::trainer::DEFAULT_WARMUP_FRACTION),
                },
            },
            steps: t.steps.unwrap_or(d.steps),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seed: t.seed.unwrap_or(d.seed),
            grad_clip: t.grad_clip,
            eval_every: t.eval_every.unwrap_or(d.eval_every),
        };
        cfg.validate().map_err(|e| Failure::config(format!("[train]: {e}")))?;
        Ok(cfg)
    }

    pub fn policy_settings(&self) -> PolicySettings {
        let t = &self.file.train;
        PolicySettings {
            policy: t.policy,
            embed_dim: t.embed_dim.unwrap_or(dilab::policy::DEFAULT_EMBED_DIM),
            window: t.window.unwrap_or(dilab::policy::DEFAULT_WINDOW),
            init_seed: t.init_seed,
        }
    }
}

pub fn parse(text: &str) -> Result<RunConfigFile, String> {
    toml::from_str(text).map_err(|e| e.message().to_string())
}
