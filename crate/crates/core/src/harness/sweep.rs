//! One-axis hyperparameter sweeps over GRPO runs.

use std::io::Write;

use log::warn;
use serde::Serialize;

use super::evaluate::evaluate;
use crate::cfm::Reduction;
use crate::diffnet::ParamVector;
use crate::grpo::{grpo_train, GrpoConfig};
use crate::rewards::RewardFn;
use crate::samplers::{csv_err, Schedule};
use crate::tasks::Task;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    NoiseLevel(Vec<f64>),
    GroupSize(Vec<usize>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::NoiseLevel(_) => "noise_level",
            SweepAxis::GroupSize(_) => "group_size",
        }
    }

    fn points(&self, base: &GrpoConfig) -> Vec<(String, GrpoConfig)> {
        match self {
            SweepAxis::NoiseLevel(values) => values
                .iter()
                .map(|&a| {
                    (
                        a.to_string(),
                        GrpoConfig {
                            noise_level: a,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            SweepAxis::GroupSize(values) => values
                .iter()
                .map(|&g| {
                    (
                        g.to_string(),
                        GrpoConfig {
                            group_size: g,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub final_mean_reward: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

/// How each sweep point's final policy is scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEval {
    pub per_condition: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

/// Runs GRPO once per axis value from the same reference and seed, then
/// scores each final policy with ODE samples.
///
/// A run that fails does not abort the sweep. Its row is marked failed and
/// reports the reward of the reference policy, which is what the run leaves
/// in place.
pub fn sweep(
    reference: &ParamVector,
    task: &Task,
    reward_fn: &dyn RewardFn,
    base: &GrpoConfig,
    axis: &SweepAxis,
    eval: &SweepEval,
    seed: u64,
    reduction: Reduction,
) -> Result<Vec<SweepRow>> {
    let score = |params: &ParamVector| -> Result<f64> {
        let report = evaluate(params, task, &[reward_fn], eval.per_condition, &eval.schedule, eval.seed)?;
        Ok(report.mean_reward(reward_fn.name()).unwrap_or(f64::NAN))
    };
    let mut reference_reward = None;
    let mut rows = Vec::new();
    for (value, config) in axis.points(base) {
        let row = match grpo_train(reference, task, reward_fn, &config, seed, reduction) {
            Ok(run) => SweepRow {
                axis: axis.name().into(),
                value,
                final_mean_reward: score(&run.checkpoint.params)?,
                status: "ok".into(),
            },
            Err(e) => {
                warn!("sweep {}={value} failed: {e}", axis.name());
                let r = match reference_reward {
                    Some(r) => r,
                    None => *reference_reward.insert(score(reference)?),
                };
                SweepRow {
                    axis: axis.name().into(),
                    value,
                    final_mean_reward: r,
                    status: format!("failed: {e}"),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows under the header `axis,value,final_mean_reward,status`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["axis", "value", "final_mean_reward", "status"]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
