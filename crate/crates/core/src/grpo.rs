//! Group-relative policy optimization for flow policies.
//!
//! Denoising is treated as an MDP whose action at each step is the next
//! latent; the SDE sampler makes every action a Gaussian draw, so each step
//! has a tractable likelihood. For a prompt `c` the rollout policy draws `G`
//! trajectories, their terminal rewards are standardized within the group,
//! and the standardized advantage is applied to every step of its
//! trajectory:
//!
//! ```text
//! J(θ) = 1/G Σ_i 1/T Σ_t [ min(r Â_i, clip(r, 1-ε, 1+ε) Â_i) - β KL_t ]
//! r    = p_θ(x_{t-1} | x_t, c) / p_old(x_{t-1} | x_t, c)
//! ```
//!
//! `KL_t` is the closed-form divergence between the current and reference
//! transition Gaussians, which share the standard deviation `σ_t √|Δt|`.
//! Training minimizes `-J`.

use std::time::Instant;

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::Reduction;
use crate::diffnet::{AdamState, Gradients, ParamVector};
use crate::harness::checkpoint::{Checkpoint, StageTag};
use crate::rewards::RewardFn;
use crate::samplers::{child_seed, sde_sample, transition_logpdf, transition_mean, Schedule, Trajectory};
use crate::tasks::Task;
use crate::util::{mean, rng_from_seed, squared_distance};
use crate::{Error, Result, VelocityField};

/// Reward standard deviations below this make a group degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// Noise level `a` of the SDE sampler.
    pub noise_level: f64,
    /// KL coefficient `β`.
    pub kl_coeff: f64,
    /// Ratio clipping range `ε`.
    pub clip_eps: f64,
    /// Outer optimization steps.
    pub steps: usize,
    /// Groups (prompts) collected per outer step.
    pub prompts_per_step: usize,
    /// Gradient steps taken on each collected batch of groups.
    pub inner_updates: usize,
    /// Sampler steps `T`.
    pub sampler_steps: usize,
    pub lr: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 24,
            noise_level: 0.7,
            kl_coeff: 0.04,
            clip_eps: 0.2,
            steps: 1000,
            prompts_per_step: 8,
            inner_updates: 1,
            sampler_steps: 25,
            lr: 3e-4,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.group_size < 2 {
            problems.push("group_size must be >= 2");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            problems.push("noise_level must be >= 0");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            problems.push("kl_coeff must be >= 0");
        }
        if !(self.clip_eps > 0.0) {
            problems.push("clip_eps must be > 0");
        }
        if self.steps == 0 {
            problems.push("steps must be >= 1");
        }
        if self.prompts_per_step == 0 {
            problems.push("prompts_per_step must be >= 1");
        }
        if self.inner_updates == 0 {
            problems.push("inner_updates must be >= 1");
        }
        if self.sampler_steps == 0 {
            problems.push("sampler_steps must be >= 1");
        }
        if !(self.lr > 0.0) {
            problems.push("lr must be > 0");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::uniform(self.sampler_steps)
    }
}

/// `G` trajectories for one condition with rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub condition: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

/// Current, rollout-time, and reference parameters.
#[derive(Debug, Clone, Copy)]
pub struct PolicyTriple<'a> {
    pub current: &'a ParamVector,
    pub old: &'a ParamVector,
    pub reference: &'a ParamVector,
}

/// Standardizes rewards with the population standard deviation. Groups with
/// (near) constant rewards get all-zero advantages.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let m = mean(rewards);
    let var = rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / rewards.len() as f64;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - m) / std).collect()
}

/// KL divergence between `N(mean_theta, s²I)` and `N(mean_ref, s²I)` with
/// `s² = σ² |dt|`.
pub fn step_kl(mean_theta: &[f64], mean_ref: &[f64], sigma: f64, dt: f64) -> Result<f64> {
    if !(sigma > 0.0) || dt == 0.0 {
        return Err(Error::Degenerate(format!(
            "KL undefined for zero transition variance (sigma={sigma}, dt={dt})"
        )));
    }
    Ok(squared_distance(mean_theta, mean_ref) / (2.0 * sigma * sigma * dt.abs()))
}

/// Value of the clipped objective for one step and whether it flows a
/// gradient through the ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedTerm {
    pub value: f64,
    /// The clipped branch is strictly smaller than the unclipped one.
    pub clipped: bool,
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> ClippedTerm {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        ClippedTerm {
            value: clipped,
            clipped: true,
        }
    } else {
        ClippedTerm {
            value: unclipped,
            clipped: false,
        }
    }
}

/// Draws `G` SDE trajectories for condition `c`, scores their final samples,
/// and normalizes the rewards.
pub fn collect_group<F: VelocityField + ?Sized>(
    old: &F,
    c: usize,
    config: &GrpoConfig,
    reward_fn: &dyn RewardFn,
    seed: u64,
) -> Result<RolloutGroup> {
    config.validate()?;
    let schedule = config.schedule()?;
    let mut rng = rng_from_seed(seed);
    let seeds: Vec<u64> = (0..config.group_size).map(|_| child_seed(&mut rng)).collect();
    let trajectories = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut traj = sde_sample(old, c, &schedule, config.noise_level, s)?;
            let r = reward_fn.reward(&traj.final_sample, c).map_err(|e| {
                Error::Input(format!("reward evaluation failed for trajectory {i}: {e}"))
            })?;
            traj.reward = Some(r);
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
    let advantages = advantages(&rewards);
    Ok(RolloutGroup {
        condition: c,
        trajectories,
        rewards,
        advantages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SurrogateDiagnostics {
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Largest `|r - 1|` over all transitions.
    pub max_ratio_deviation: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub diagnostics: SurrogateDiagnostics,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    loss: f64,
    kl: f64,
    ratio: f64,
    max_dev: f64,
    clipped: usize,
    transitions: usize,
}

impl Sums {
    fn merge(self, o: Sums) -> Sums {
        Sums {
            loss: self.loss + o.loss,
            kl: self.kl + o.kl,
            ratio: self.ratio + o.ratio,
            max_dev: self.max_dev.max(o.max_dev),
            clipped: self.clipped + o.clipped,
            transitions: self.transitions + o.transitions,
        }
    }
}

/// Loss contributions and gradient of one trajectory, each step weighted by
/// `weight = 1 / (G T)`.
fn trajectory_terms(
    triple: PolicyTriple<'_>,
    traj: &Trajectory,
    traj_index: usize,
    advantage: f64,
    weight: f64,
    config: &GrpoConfig,
    delta: f64,
    grads: &mut [f64],
) -> Result<Sums> {
    let c = traj.condition;
    let a = config.noise_level;
    let beta = config.kl_coeff;
    let mut sums = Sums::default();
    for (k, tr) in traj.transitions.iter().enumerate() {
        let locate = |e: Error| match e {
            Error::Degenerate(m) | Error::Numeric(m) => {
                Error::Numeric(format!("trajectory {traj_index}, step {k}: {m}"))
            }
            other => other,
        };
        if !(tr.sigma > 0.0) {
            return Err(Error::Degenerate(format!(
                "trajectory {traj_index}, step {k} has zero transition noise"
            )));
        }
        let v_old = triple.old.forward_velocity(&tr.x_t, tr.t, c)?;
        let old = transition_mean(&tr.x_t, &v_old, tr.t, tr.dt, a, delta);
        let log_old = transition_logpdf(&tr.x_next, &old.mean, tr.sigma, tr.dt).map_err(locate)?;
        let v_ref = triple.reference.forward_velocity(&tr.x_t, tr.t, c)?;
        let reference = transition_mean(&tr.x_t, &v_ref, tr.t, tr.dt, a, delta);
        let variance = tr.sigma * tr.sigma * tr.dt.abs();

        let mut step = Sums::default();
        triple.current.forward_backward(&tr.x_t, tr.t, c, grads, |v_cur| {
            let cur = transition_mean(&tr.x_t, v_cur, tr.t, tr.dt, a, delta);
            let log_cur = transition_logpdf(&tr.x_next, &cur.mean, tr.sigma, tr.dt).map_err(locate)?;
            let ratio = (log_cur - log_old).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!(
                    "trajectory {traj_index}, step {k}: probability ratio is not finite"
                )));
            }
            let kl = step_kl(&cur.mean, &reference.mean, tr.sigma, tr.dt).map_err(locate)?;
            let term = clipped_term(ratio, advantage, config.clip_eps);
            step = Sums {
                loss: -weight * (term.value - beta * kl),
                kl,
                ratio,
                max_dev: (ratio - 1.0).abs(),
                clipped: usize::from(term.clipped),
                transitions: 1,
            };
            // d(term)/d(mean) for the active branch, then chain through the mean.
            let ratio_coeff = if term.clipped { 0.0 } else { advantage * ratio };
            Ok(cur
                .mean
                .iter()
                .zip(&tr.x_next)
                .zip(&reference.mean)
                .map(|((m, x), m_ref)| {
                    let d_term = (ratio_coeff * (x - m) - beta * (m - m_ref)) / variance;
                    -weight * d_term * cur.mean_velocity_gain
                })
                .collect())
        })?;
        sums = sums.merge(step);
    }
    Ok(sums)
}

fn surrogate_over(
    triple: PolicyTriple<'_>,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    schedule: &Schedule,
    reduction: Reduction,
) -> Result<SurrogateOutput> {
    config.validate()?;
    let len = triple.current.len();
    if triple.old.len() != len || triple.reference.len() != len {
        return Err(Error::Input("policy triple layouts differ".into()));
    }
    let delta = schedule.clamp_delta();
    let mut jobs = Vec::new();
    for group in groups {
        let g = group.trajectories.len();
        if g == 0 || group.advantages.len() != g {
            return Err(Error::Input("rollout group is empty or inconsistent".into()));
        }
        for (i, traj) in group.trajectories.iter().enumerate() {
            let t = traj.transitions.len();
            if t == 0 {
                return Err(Error::Input(format!("trajectory {i} has no transitions")));
            }
            let weight = 1.0 / (groups.len() as f64 * g as f64 * t as f64);
            jobs.push((i, traj, group.advantages[i], weight));
        }
    }
    let run = |grads: &mut Gradients, &(i, traj, adv, w): &(usize, &Trajectory, f64, f64)| {
        trajectory_terms(triple, traj, i, adv, w, config, delta, &mut grads.values)
    };
    let (sums, grads) = match reduction {
        Reduction::Serial => {
            let mut grads = Gradients::zeros(len);
            let mut sums = Sums::default();
            for job in &jobs {
                sums = sums.merge(run(&mut grads, job)?);
            }
            (sums, grads)
        }
        Reduction::Parallel => jobs
            .par_iter()
            .try_fold(
                || (Sums::default(), Gradients::zeros(len)),
                |(s, mut g), job| {
                    let step = run(&mut g, job)?;
                    Ok::<_, Error>((s.merge(step), g))
                },
            )
            .try_reduce(
                || (Sums::default(), Gradients::zeros(len)),
                |(sa, mut ga), (sb, gb)| {
                    ga.add_assign(&gb);
                    Ok((sa.merge(sb), ga))
                },
            )?,
    };
    let n = sums.transitions.max(1) as f64;
    Ok(SurrogateOutput {
        loss: sums.loss,
        grads,
        diagnostics: SurrogateDiagnostics {
            mean_kl: sums.kl / n,
            clip_fraction: sums.clipped as f64 / n,
            mean_ratio: sums.ratio / n,
            max_ratio_deviation: sums.max_dev,
            transitions: sums.transitions,
        },
    })
}

/// Negated clipped surrogate for one group, its gradient with respect to
/// the current parameters, and diagnostics.
pub fn surrogate_loss(
    triple: PolicyTriple<'_>,
    group: &RolloutGroup,
    config: &GrpoConfig,
) -> Result<SurrogateOutput> {
    surrogate_over(triple, std::slice::from_ref(group), config, &config.schedule()?, Reduction::Serial)
}

/// Like [`surrogate_loss`] but averaged over several groups.
pub fn surrogate_loss_groups(
    triple: PolicyTriple<'_>,
    groups: &[RolloutGroup],
    config: &GrpoConfig,
    reduction: Reduction,
) -> Result<SurrogateOutput> {
    if groups.is_empty() {
        return Err(Error::Input("no rollout groups".into()));
    }
    surrogate_over(triple, groups, config, &config.schedule()?, reduction)
}

/// Per-outer-step training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrpoMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub surrogate_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct GrpoRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<GrpoMetrics>,
}

/// Runs the outer loop: snapshot, collect groups over random prompts, then
/// take `inner_updates` Adam steps on the surrogate.
pub fn grpo_train(
    reference: &ParamVector,
    task: &Task,
    reward_fn: &dyn RewardFn,
    config: &GrpoConfig,
    seed: u64,
    reduction: Reduction,
) -> Result<GrpoRun> {
    config.validate()?;
    if reference.spec().input_dim != task.dim() || reference.spec().num_conditions != task.num_conditions() {
        return Err(Error::Compatibility(format!(
            "reference network (D={}, conditions={}) does not match task (D={}, conditions={})",
            reference.spec().input_dim,
            reference.spec().num_conditions,
            task.dim(),
            task.num_conditions()
        )));
    }
    if config.noise_level == 0.0 {
        return Err(Error::Degenerate(
            "noise level 0 makes every transition deterministic; likelihood ratios are undefined".into(),
        ));
    }
    let schedule = config.schedule()?;
    let mut rng = rng_from_seed(seed);
    let mut current = reference.clone();
    let mut adam = AdamState::new(current.len(), config.lr);
    let mut metrics = Vec::with_capacity(config.steps);
    let started = Instant::now();

    for step in 0..config.steps {
        let old = current.clone();
        let prompts: Vec<(usize, u64)> = (0..config.prompts_per_step)
            .map(|_| (rng.gen_range(0..task.num_conditions()), child_seed(&mut rng)))
            .collect();
        let groups = prompts
            .iter()
            .map(|&(c, s)| collect_group(&old, c, config, reward_fn, s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_step(step))?;
        let degenerate = groups.iter().filter(|g| g.is_degenerate()).count();
        if degenerate > 0 {
            debug!("step {step}: {degenerate} degenerate group(s)");
        }
        let mean_reward = mean(&groups.iter().flat_map(|g| g.rewards.iter().copied()).collect::<Vec<_>>());

        let (mut loss_sum, mut kl_sum, mut clip_sum) = (0.0, 0.0, 0.0);
        for _ in 0..config.inner_updates {
            let triple = PolicyTriple {
                current: &current,
                old: &old,
                reference,
            };
            let out = surrogate_over(triple, &groups, config, &schedule, reduction)
                .map_err(|e| e.at_step(step))?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric("surrogate loss is not finite".into()).at_step(step));
            }
            adam.update(current.values_mut(), &out.grads.values)
                .map_err(|e| e.at_step(step))?;
            loss_sum += out.loss;
            kl_sum += out.diagnostics.mean_kl;
            clip_sum += out.diagnostics.clip_fraction;
        }
        let inner = config.inner_updates as f64;
        metrics.push(GrpoMetrics {
            step,
            mean_reward,
            surrogate_loss: loss_sum / inner,
            mean_kl: kl_sum / inner,
            clip_fraction: clip_sum / inner,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(GrpoRun {
        checkpoint: Checkpoint::new(current, Some(adam), StageTag::Grpo),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_params, Activation, NetSpec};
    use crate::rewards::{region_scorer, QaReward};
    use crate::tasks::RingTask;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec() -> NetSpec {
        NetSpec {
            input_dim: 2,
            hidden_widths: vec![6],
            time_embed_dim: 4,
            num_conditions: 4,
            cond_embed_dim: 2,
            activation: Activation::Tanh,
        }
    }

    fn ring_reward() -> QaReward<crate::rewards::RegionScorer> {
        QaReward {
            scorer: region_scorer(&RingTask::default_ring(), 4.0).unwrap(),
        }
    }

    fn small_config() -> GrpoConfig {
        GrpoConfig {
            group_size: 4,
            sampler_steps: 5,
            prompts_per_step: 2,
            steps: 3,
            ..GrpoConfig::default()
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(advantages(&[0.4, 0.4, 0.4]), vec![0.0; 3]);
        let a = advantages(&[0.2, 0.5, 0.8]);
        let expected = 0.3 / (0.06f64).sqrt();
        assert!((a[0] + expected).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - expected).abs() < 1e-12);
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(0.0..1.0f64, 2..40)) {
            let a = advantages(&rewards);
            let m = mean(&a);
            let std = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            if a.iter().all(|&v| v == 0.0) {
                let rm = mean(&rewards);
                let rstd = (rewards.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / rewards.len() as f64).sqrt();
                prop_assert!(rstd < DEGENERATE_STD);
            } else {
                prop_assert!(m.abs() <= 1e-9);
                prop_assert!((std - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(step_kl(&[0.3, 0.1], &[0.3, 0.1], 0.5, -0.04).unwrap(), 0.0);
        let kl = step_kl(&[0.3, 0.4], &[0.0, 0.0], 0.5, -0.04).unwrap();
        assert!((kl - 12.5).abs() < 1e-12);
        // ‖Δ‖² = 2σ²|dt|
        let s: f64 = 0.7;
        let dt: f64 = 0.1;
        let d = (2.0 * s * s * dt).sqrt();
        assert!((step_kl(&[d], &[0.0], s, -dt).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(step_kl(&[1.0], &[0.0], 0.0, -0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn clip_examples() {
        let eps = 0.2;
        let t = clipped_term(1.0 + 2.0 * eps, 1.0, eps);
        assert_eq!(t.value, 1.0 + eps);
        assert!(t.clipped);
        let t = clipped_term(0.5, -1.0, eps);
        assert_eq!(t.value, -0.8);
        assert!(t.clipped);
        let t = clipped_term(1.0, 1.0, eps);
        assert_eq!(t.value, 1.0);
        assert!(!t.clipped);
        // A ratio below the band with positive advantage keeps the gradient.
        assert!(!clipped_term(0.5, 1.0, eps).clipped);
    }

    #[test]
    fn collect_group_structure() {
        let params = init_params(&spec(), 1).unwrap();
        let config = small_config();
        let reward = ring_reward();
        let g = collect_group(&params, 2, &config, &reward, 11).unwrap();
        assert_eq!(g.trajectories.len(), 4);
        assert!(g.trajectories.iter().all(|t| t.transitions.len() == 5 && t.is_chained()));
        assert!(g.rewards.iter().all(|&r| r > 0.0 && r < 1.0));
        assert_eq!(g, collect_group(&params, 2, &config, &reward, 11).unwrap());
    }

    #[test]
    fn identical_policies_give_zero_loss_and_unit_ratios() {
        let params = init_params(&spec(), 2).unwrap();
        let config = small_config();
        let g = collect_group(&params, 1, &config, &ring_reward(), 5).unwrap();
        assert!(!g.is_degenerate());
        let triple = PolicyTriple {
            current: &params,
            old: &params,
            reference: &params,
        };
        let out = surrogate_loss(triple, &g, &config).unwrap();
        assert!(out.loss.abs() < 1e-15);
        assert_eq!(out.diagnostics.clip_fraction, 0.0);
        assert_eq!(out.diagnostics.mean_kl, 0.0);
        assert_eq!(out.diagnostics.mean_ratio, 1.0);
        assert_eq!(out.diagnostics.max_ratio_deviation, 0.0);
    }

    #[test]
    fn zero_advantage_and_zero_beta_gives_zero_gradient() {
        let params = init_params(&spec(), 2).unwrap();
        let mut reference = params.clone();
        reference.values_mut()[5] += 0.3;
        let config = GrpoConfig {
            kl_coeff: 0.0,
            ..small_config()
        };
        let mut g = collect_group(&params, 0, &config, &ring_reward(), 5).unwrap();
        g.rewards = vec![0.3; g.rewards.len()];
        g.advantages = advantages(&g.rewards);
        let triple = PolicyTriple {
            current: &params,
            old: &params,
            reference: &reference,
        };
        let out = surrogate_loss(triple, &g, &config).unwrap();
        assert!(out.grads.values.iter().all(|&v| v == 0.0));
    }

    fn frozen_case() -> (ParamVector, ParamVector, ParamVector, RolloutGroup, GrpoConfig) {
        let old = init_params(&spec(), 4).unwrap();
        let config = GrpoConfig {
            group_size: 2,
            sampler_steps: 4,
            clip_eps: 0.2,
            kl_coeff: 0.5,
            ..GrpoConfig::default()
        };
        let group = collect_group(&old, 3, &config, &ring_reward(), 8).unwrap();
        let mut rng = rng_from_seed(99);
        let mut current = old.clone();
        for v in current.values_mut() {
            *v += 0.01 * rng.gen_range(-1.0..1.0);
        }
        let mut reference = old.clone();
        for v in reference.values_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
        (current, old, reference, group, config)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (current, old, reference, group, config) = frozen_case();
        let triple = PolicyTriple {
            current: &current,
            old: &old,
            reference: &reference,
        };
        let out = surrogate_loss(triple, &group, &config).unwrap();
        assert_eq!(out.diagnostics.clip_fraction, 0.0, "keep the check away from clip kinks");
        let h = 1e-5;
        for i in 0..current.len() {
            let eval = |d: f64| {
                let mut p = current.clone();
                p.values_mut()[i] += d;
                let triple = PolicyTriple {
                    current: &p,
                    old: &old,
                    reference: &reference,
                };
                surrogate_loss(triple, &group, &config).unwrap().loss
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = out.grads.values[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn clipped_transitions_drop_ratio_gradient() {
        let (current, old, _, group, config) = frozen_case();
        let config = GrpoConfig {
            clip_eps: 1e-9,
            kl_coeff: 0.0,
            ..config
        };
        let triple = PolicyTriple {
            current: &current,
            old: &old,
            reference: &old,
        };
        let out = surrogate_loss(triple, &group, &config).unwrap();
        assert!(out.diagnostics.clip_fraction > 0.0 && out.diagnostics.clip_fraction <= 1.0);
    }

    #[test]
    fn zero_noise_is_degenerate() {
        let params = init_params(&spec(), 1).unwrap();
        let config = GrpoConfig {
            noise_level: 0.0,
            ..small_config()
        };
        let g = collect_group(&params, 0, &config, &ring_reward(), 1).unwrap();
        let triple = PolicyTriple {
            current: &params,
            old: &params,
            reference: &params,
        };
        assert!(matches!(surrogate_loss(triple, &g, &config), Err(Error::Degenerate(_))));
        let task = Task::Ring(RingTask::default_ring());
        assert!(matches!(
            grpo_train(&params, &task, &ring_reward(), &config, 0, Reduction::Serial),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let params = init_params(&spec(), 1).unwrap();
        let task = Task::Ring(RingTask::default_ring());
        let config = small_config();
        let a = grpo_train(&params, &task, &ring_reward(), &config, 3, Reduction::Serial).unwrap();
        let b = grpo_train(&params, &task, &ring_reward(), &config, 3, Reduction::Serial).unwrap();
        let strip = |m: &[GrpoMetrics]| m.iter().map(|m| GrpoMetrics { wall_ms: 0, ..*m }).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.iter().all(|m| m.clip_fraction == 0.0));
    }
}
