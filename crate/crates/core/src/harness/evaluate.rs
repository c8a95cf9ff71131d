//! Policy evaluation: ODE samples per condition, reward means, and for
//! Gaussian tasks the gap between sample moments and the true moments.

use rayon::prelude::*;
use serde::Serialize;

use crate::rewards::RewardFn;
use crate::samplers::{child_seed, ode_sample, Schedule};
use crate::tasks::Task;
use crate::util::{mean, rng_from_seed};
use crate::{Error, Point, Result, VelocityField};

/// Largest absolute deviations of the sample moments from the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentGap {
    pub max_mean_error: f64,
    pub max_cov_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: usize,
    pub samples: usize,
    /// `(reward name, mean reward)` in the order the rewards were given.
    pub reward_means: Vec<(String, f64)>,
    pub sample_mean: Vec<f64>,
    pub sample_cov: Vec<Vec<f64>>,
    pub moment_gap: Option<MomentGap>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub conditions: Vec<ConditionReport>,
}

impl EvalReport {
    /// Mean of a named reward over all conditions (equal weight per condition).
    pub fn mean_reward(&self, name: &str) -> Option<f64> {
        let per: Vec<f64> = self
            .conditions
            .iter()
            .filter_map(|c| c.reward_means.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
            .collect();
        (per.len() == self.conditions.len() && !per.is_empty()).then(|| mean(&per))
    }

    /// Worst moment gap over conditions, if the task has true moments.
    pub fn worst_moment_gap(&self) -> Option<MomentGap> {
        self.conditions.iter().try_fold(
            MomentGap {
                max_mean_error: 0.0,
                max_cov_error: 0.0,
            },
            |acc, c| {
                c.moment_gap.map(|g| MomentGap {
                    max_mean_error: acc.max_mean_error.max(g.max_mean_error),
                    max_cov_error: acc.max_cov_error.max(g.max_cov_error),
                })
            },
        )
    }
}

/// Sample mean and unbiased covariance.
pub fn sample_moments(points: &[Point]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if points.len() < 2 {
        return Err(Error::Input("need at least two samples for a covariance".into()));
    }
    let d = points[0].len();
    let n = points.len() as f64;
    let mut m = vec![0.0; d];
    for p in points {
        for (acc, v) in m.iter_mut().zip(p) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - m[i]) * (p[j] - m[j]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|v| *v /= n - 1.0);
    Ok((m, cov))
}

/// Draws `per_condition` ODE samples for every condition and scores them.
/// Pure given `seed`.
pub fn evaluate<F: VelocityField + ?Sized>(
    field: &F,
    task: &Task,
    reward_fns: &[&dyn RewardFn],
    per_condition: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<EvalReport> {
    if field.dim() != task.dim() || field.num_conditions() != task.num_conditions() {
        return Err(Error::Compatibility(format!(
            "policy (D={}, conditions={}) does not match task (D={}, conditions={})",
            field.dim(),
            field.num_conditions(),
            task.dim(),
            task.num_conditions()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut conditions = Vec::with_capacity(task.num_conditions());
    for c in 0..task.num_conditions() {
        let seeds: Vec<u64> = (0..per_condition).map(|_| child_seed(&mut rng)).collect();
        let points = seeds
            .par_iter()
            .map(|&s| ode_sample(field, c, schedule, s).map(|t| t.final_sample))
            .collect::<Result<Vec<_>>>()?;
        let reward_means = reward_fns
            .iter()
            .map(|f| {
                let rewards = points
                    .iter()
                    .map(|p| f.reward(p, c))
                    .collect::<Result<Vec<_>>>()?;
                Ok((f.name().to_string(), mean(&rewards)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (sample_mean, sample_cov) = sample_moments(&points)?;
        let moment_gap = match task.as_gaussian() {
            Some(g) => {
                let truth = g.condition(c)?;
                let max_mean_error = sample_mean
                    .iter()
                    .zip(truth.mean())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let max_cov_error = sample_cov
                    .iter()
                    .flatten()
                    .zip(truth.cov().iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Some(MomentGap {
                    max_mean_error,
                    max_cov_error,
                })
            }
            None => None,
        };
        conditions.push(ConditionReport {
            condition: c,
            samples: per_condition,
            reward_means,
            sample_mean,
            sample_cov,
            moment_gap,
        });
    }
    Ok(EvalReport { conditions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{region_scorer, QaReward};
    use crate::tasks::{GaussianTask, OracleField, RingTask};

    #[test]
    fn moments_of_a_known_set() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 4.0]];
        let (m, cov) = sample_moments(&pts).unwrap();
        assert_eq!(m, vec![2.0, 2.0]);
        // Deviations (-2,-1), (0,-1), (2,2); divide by n-1 = 2.
        assert_eq!(cov, vec![vec![4.0, 3.0], vec![3.0, 3.0]]);
    }

    #[test]
    fn oracle_field_reproduces_gaussian_moments() {
        let g = GaussianTask::four_blobs();
        let task = Task::Gaussian(g.clone());
        let report = evaluate(&OracleField(&g), &task, &[], 4000, &Schedule::uniform(100).unwrap(), 5).unwrap();
        let gap = report.worst_moment_gap().unwrap();
        assert!(gap.max_mean_error < 0.1, "{gap:?}");
        assert!(gap.max_cov_error < 0.2, "{gap:?}");
    }

    #[test]
    fn evaluation_is_pure_and_reports_reward_means() {
        let ring = RingTask::default_ring();
        let task = Task::Ring(ring.clone());
        let params = crate::diffnet::init_params(&crate::diffnet::NetSpec::new(2, vec![8], 4), 1).unwrap();
        let reward = QaReward {
            scorer: region_scorer(&ring, 10.0).unwrap(),
        };
        let schedule = Schedule::uniform(10).unwrap();
        let a = evaluate(&params, &task, &[&reward], 50, &schedule, 9).unwrap();
        let b = evaluate(&params, &task, &[&reward], 50, &schedule, 9).unwrap();
        assert_eq!(a, b);
        let overall = a.mean_reward("qa").unwrap();
        assert!((0.0..=1.0).contains(&overall));
        assert!(a.mean_reward("missing").is_none());
        assert!(a.worst_moment_gap().is_none());
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let params = crate::diffnet::init_params(&crate::diffnet::NetSpec::new(2, vec![8], 3), 1).unwrap();
        let task = Task::Ring(RingTask::default_ring());
        let err = evaluate(&params, &task, &[], 5, &Schedule::uniform(4).unwrap(), 0).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)));
    }
}
