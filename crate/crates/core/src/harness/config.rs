//! Experiment configuration.
//!
//! One TOML document describes an experiment. Unknown keys anywhere are
//! rejected. The resolved configuration is hashed into a fingerprint that
//! is written next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfm::CfmConfig;
use crate::diffnet::{Activation, NetSpec};
use crate::grpo::GrpoConfig;
use crate::offline::DpoConfig;
use crate::rewards::{region_scorer, QaReward, RewardFn, RingEmbedding, SimilarityReward};
use crate::tasks::{AngularInterval, GaussianCondition, GaussianTask, RingTask, Task};
use crate::{Error, Result};

/// Pipeline stage, one per CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Grpo,
    Dpo,
    Sft,
    Sample,
    Eval,
    Calibrate,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Grpo => "grpo",
            Stage::Dpo => "dpo",
            Stage::Sft => "sft",
            Stage::Sample => "sample",
            Stage::Eval => "eval",
            Stage::Calibrate => "calibrate",
            Stage::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConditionConfig {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    /// Explicit conditions, or the built-in four-blob task when omitted.
    Gaussian {
        #[serde(default)]
        conditions: Vec<GaussianConditionConfig>,
    },
    /// Ring task; omitted fields take the built-in defaults.
    Ring {
        num_modes: Option<usize>,
        radius: Option<f64>,
        mode_std: Option<f64>,
        label_noise: Option<f64>,
        arcs: Option<Vec<AngularInterval>>,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Ring {
            num_modes: None,
            radius: None,
            mode_std: None,
            label_noise: None,
            arcs: None,
        }
    }
}

impl TaskConfig {
    pub fn build(&self) -> Result<Task> {
        match self {
            TaskConfig::Gaussian { conditions } if conditions.is_empty() => {
                Ok(Task::Gaussian(GaussianTask::four_blobs()))
            }
            TaskConfig::Gaussian { conditions } => {
                let conds = conditions
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        GaussianCondition::new(c.mean.clone(), c.cov.clone())
                            .map_err(|e| Error::Config(format!("task.conditions[{i}]: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Task::Gaussian(GaussianTask::new(conds)?))
            }
            TaskConfig::Ring {
                num_modes,
                radius,
                mode_std,
                label_noise,
                arcs,
            } => {
                let d = RingTask::default_ring();
                let ring = RingTask {
                    num_modes: num_modes.unwrap_or(d.num_modes),
                    radius: radius.unwrap_or(d.radius),
                    mode_std: mode_std.unwrap_or(d.mode_std),
                    label_noise: label_noise.unwrap_or(d.label_noise),
                    arcs: arcs.clone().unwrap_or(d.arcs),
                };
                ring.validate().map_err(|e| Error::Config(format!("task: {e}")))?;
                Ok(Task::Ring(ring))
            }
        }
    }
}

/// Network architecture; sample dimension and condition count come from the
/// task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_widths: vec![64, 64],
            time_embed_dim: 16,
            cond_embed_dim: 8,
            activation: Activation::Silu,
        }
    }
}

impl NetConfig {
    pub fn spec_for(&self, task: &Task) -> NetSpec {
        NetSpec {
            input_dim: task.dim(),
            hidden_widths: self.hidden_widths.clone(),
            time_embed_dim: self.time_embed_dim,
            num_conditions: task.num_conditions(),
            cond_embed_dim: self.cond_embed_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    /// Binary-question softmax over the ring region scorer.
    Qa,
    /// Cosine similarity in the ring embedding space.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub kind: RewardKind,
    /// Logit per unit of region margin for the QA reward.
    pub steepness: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::Qa,
            steepness: 10.0,
        }
    }
}

/// Builds the training reward and the full set of evaluation rewards for a
/// task. Gaussian tasks have no rewards.
pub fn build_rewards(task: &Task, config: &RewardConfig) -> Result<(Option<Box<dyn RewardFn>>, Vec<Box<dyn RewardFn>>)> {
    let Some(ring) = task.as_ring() else {
        return Ok((None, Vec::new()));
    };
    let qa = || -> Result<Box<dyn RewardFn>> {
        Ok(Box::new(QaReward {
            scorer: region_scorer(ring, config.steepness)?,
        }))
    };
    let sim = || -> Box<dyn RewardFn> {
        Box::new(SimilarityReward {
            embedding: RingEmbedding { task: ring.clone() },
        })
    };
    let train = match config.kind {
        RewardKind::Qa => qa()?,
        RewardKind::Similarity => sim(),
    };
    Ok((Some(train), vec![qa()?, sim()]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftSource {
    /// Fresh draws from the task's data distribution.
    Task,
    /// Top-quartile-reward ODE samples of the reference policy, per condition.
    TopQuartile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub source: SftSource,
    /// Candidate samples generated (or drawn) per condition.
    pub samples_per_condition: usize,
    pub sampler_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            source: SftSource::TopQuartile,
            samples_per_condition: 512,
            sampler_steps: 25,
            steps: 2000,
            batch_size: 128,
            lr: 5e-4,
            log_every: 50,
        }
    }
}

impl SftConfig {
    pub fn cfm(&self) -> CfmConfig {
        CfmConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ode,
    Sde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub sampler: SamplerKind,
    pub noise_level: f64,
    pub sampler_steps: usize,
    pub per_condition: usize,
    /// Number of trajectories (per condition) exported transition by transition.
    pub export_trajectories: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            sampler: SamplerKind::Ode,
            noise_level: 0.7,
            sampler_steps: 25,
            per_condition: 500,
            export_trajectories: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub per_condition: usize,
    pub sampler_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            per_condition: 1000,
            sampler_steps: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// Two-column CSV with header `model_score,reference_score`.
    pub csv: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxisKind {
    NoiseLevel,
    GroupSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxisKind,
    pub values: Vec<f64>,
}

/// The whole experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// If present, must name the subcommand being run.
    pub stage: Option<Stage>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Input checkpoint for every stage except `pretrain` and `calibrate`.
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub pretrain: CfmConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub calibrate: Option<CalibrateConfig>,
    pub sweep: Option<SweepConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks everything the given stage will use; every problem is listed
    /// with its key.
    pub fn validate_for(&self, stage: Stage) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |key: &str, r: Result<()>| {
            if let Err(e) = r {
                let msg = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                problems.push(format!("{key}: {msg}"));
            }
        };
        if let Some(s) = self.stage {
            if s != stage {
                check(
                    "stage",
                    Err(Error::Config(format!(
                        "config is for '{}' but subcommand is '{}'",
                        s.name(),
                        stage.name()
                    ))),
                );
            }
        }
        let task = self.task.build();
        if stage != Stage::Calibrate {
            match &task {
                Ok(task) => check("net", self.net.spec_for(task).validate()),
                Err(e) => check("task", Err(Error::Config(e.to_string()))),
            }
            if let Ok(task) = &task {
                check("reward", build_rewards(task, &self.reward).map(|_| ()));
            }
        }
        let needs_reward = matches!(stage, Stage::Grpo | Stage::Dpo | Stage::Sweep)
            || (stage == Stage::Sft && self.sft.source == SftSource::TopQuartile);
        if needs_reward && matches!(&task, Ok(Task::Gaussian(_))) {
            check(
                "task.kind",
                Err(Error::Config(format!("stage '{}' needs a reward; use the ring task", stage.name()))),
            );
        }
        let needs_checkpoint = !matches!(stage, Stage::Pretrain | Stage::Calibrate);
        if needs_checkpoint && self.checkpoint.is_none() {
            check("checkpoint", Err(Error::Config("required for this stage".into())));
        }
        match stage {
            Stage::Pretrain => check("pretrain", self.pretrain.validate()),
            Stage::Grpo => check("grpo", self.grpo.validate()),
            Stage::Dpo => check("dpo", self.dpo.validate()),
            Stage::Sft => {
                check("sft", self.sft.cfm().validate());
                if self.sft.samples_per_condition < 4 || self.sft.sampler_steps == 0 {
                    check(
                        "sft",
                        Err(Error::Config("samples_per_condition must be >= 4 and sampler_steps >= 1".into())),
                    );
                }
            }
            Stage::Sample => {
                let s = &self.sample;
                if s.per_condition == 0 || s.sampler_steps == 0 || !(s.noise_level >= 0.0) {
                    check(
                        "sample",
                        Err(Error::Config("per_condition and sampler_steps must be >= 1, noise_level >= 0".into())),
                    );
                }
            }
            Stage::Eval => {
                if self.eval.per_condition < 2 || self.eval.sampler_steps == 0 {
                    check(
                        "eval",
                        Err(Error::Config("per_condition must be >= 2 and sampler_steps >= 1".into())),
                    );
                }
            }
            Stage::Calibrate => {
                if self.calibrate.is_none() {
                    check("calibrate.csv", Err(Error::Config("required for calibrate".into())));
                }
            }
            Stage::Sweep => {
                check("grpo", self.grpo.validate_ignoring_noise());
                match &self.sweep {
                    None => check("sweep", Err(Error::Config("section required for sweep".into()))),
                    Some(s) if s.values.is_empty() => {
                        check("sweep.values", Err(Error::Config("must be non-empty".into())))
                    }
                    Some(s) if s.axis == SweepAxisKind::GroupSize
                        && s.values.iter().any(|v| v.fract() != 0.0 || *v < 2.0) =>
                    {
                        check("sweep.values", Err(Error::Config("group sizes must be integers >= 2".into())))
                    }
                    Some(s) if s.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                        check("sweep.values", Err(Error::Config("values must be finite and >= 0".into())))
                    }
                    Some(_) => {}
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid configuration:\n  {}", problems.join("\n  "))))
        }
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("configuration serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl GrpoConfig {
    pub(crate) fn validate_ignoring_noise(&self) -> Result<()> {
        GrpoConfig {
            noise_level: 0.5,
            ..self.clone()
        }
        .validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.grpo.group_size, 24);
        assert_eq!(cfg.grpo.noise_level, 0.7);
        assert_eq!(cfg.grpo.kl_coeff, 0.04);
        assert_eq!(cfg.dpo.beta, 100.0);
        cfg.validate_for(Stage::Pretrain).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        for text in ["bogus = 1\n", "[grpo]\ngroup_sise = 4\n", "[task]\nkind = \"ring\"\nradius = 1.0\nextra = 2\n"] {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config(msg)) => assert!(
                    msg.contains("bogus") || msg.contains("group_sise") || msg.contains("extra"),
                    "{msg}"
                ),
                other => panic!("expected rejection, got {other:?}"),
            }
        }
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let cfg = ExperimentConfig::from_toml_str(
            "stage = \"grpo\"\n[grpo]\ngroup_size = 1\nlr = -1.0\n[net]\nhidden_widths = []\n",
        )
        .unwrap();
        let Err(Error::Config(msg)) = cfg.validate_for(Stage::Grpo) else {
            panic!("expected validation failure");
        };
        for key in ["grpo:", "net:", "checkpoint:", "group_size", "lr"] {
            assert!(msg.contains(key), "missing {key} in {msg}");
        }
        let Err(Error::Config(msg)) = cfg.validate_for(Stage::Pretrain) else {
            panic!("stage mismatch must fail");
        };
        assert!(msg.contains("stage"));
    }

    #[test]
    fn gaussian_task_rejects_reward_stages() {
        let cfg = ExperimentConfig::from_toml_str(
            "checkpoint = \"x.json\"\n[task]\nkind = \"gaussian\"\n",
        )
        .unwrap();
        cfg.validate_for(Stage::Eval).unwrap();
        assert!(cfg.validate_for(Stage::Grpo).is_err());
    }

    #[test]
    fn explicit_gaussian_conditions() {
        let cfg = ExperimentConfig::from_toml_str(
            "[task]\nkind = \"gaussian\"\nconditions = [{ mean = [1.0], cov = [[0.5]] }, { mean = [-1.0], cov = [[0.2]] }]\n",
        )
        .unwrap();
        let task = cfg.task.build().unwrap();
        assert_eq!(task.dim(), 1);
        assert_eq!(task.num_conditions(), 2);
        assert_eq!(cfg.net.spec_for(&task).input_dim, 1);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::from_toml_str("seed = 1\n").unwrap();
        let b = ExperimentConfig::from_toml_str("seed = 1\n").unwrap();
        let c = ExperimentConfig::from_toml_str("seed = 2\n").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
