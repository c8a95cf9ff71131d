//! Offline baselines: supervised fine-tuning and preference optimization.
//!
//! DPO is carried over to flow matching by replacing log-likelihoods with
//! per-sample flow-matching errors `e(θ, x) = ‖v_θ(x_t, t, c) - (ε - x)‖²`.
//! With the double difference
//!
//! ```text
//! Δ = [e(θ, x_w) - e(ref, x_w)] - [e(θ, x_l) - e(ref, x_l)]
//! ```
//!
//! the loss is `-log σ(-β Δ) = softplus(β Δ)`: the current policy is pushed
//! to denoise the winner better than the reference does, relative to the
//! loser.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{self, interpolate, CfmBatch, CfmConfig, Reduction};
use crate::diffnet::{AdamState, Gradients, ParamVector};
use crate::harness::checkpoint::{Checkpoint, StageTag};
use crate::rewards::{logistic, RewardFn};
use crate::samplers::{child_seed, ode_sample, Schedule};
use crate::tasks::Task;
use crate::util::{rng_from_seed, squared_distance, standard_normal_vec};
use crate::{Error, Point, Result};

/// A winner/loser pair of final samples for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub condition: usize,
    pub winner: Point,
    pub loser: Point,
    pub winner_reward: f64,
    pub loser_reward: f64,
}

/// Samples `candidates_per_prompt` finals per prompt with the ODE sampler
/// and pairs the best against the worst. Prompts whose candidates all tie
/// are skipped.
pub fn curate_pairs(
    reference: &ParamVector,
    task: &Task,
    reward_fn: &dyn RewardFn,
    num_prompts: usize,
    candidates_per_prompt: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if candidates_per_prompt < 2 {
        return Err(Error::Config("candidates_per_prompt must be >= 2".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut pairs = Vec::with_capacity(num_prompts);
    for prompt in 0..num_prompts {
        let c = rng.gen_range(0..task.num_conditions());
        let mut scored = Vec::with_capacity(candidates_per_prompt);
        for _ in 0..candidates_per_prompt {
            let traj = ode_sample(reference, c, schedule, child_seed(&mut rng))?;
            let r = reward_fn.reward(&traj.final_sample, c)?;
            scored.push((r, traj.final_sample));
        }
        let best = scored.iter().enumerate().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap().0;
        let worst = scored.iter().enumerate().min_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap().0;
        if scored[best].0 <= scored[worst].0 {
            info!("prompt {prompt}: all {candidates_per_prompt} candidates tie, no pair");
            continue;
        }
        pairs.push(PreferencePair {
            condition: c,
            winner: scored[best].1.clone(),
            loser: scored[worst].1.clone(),
            winner_reward: scored[best].0,
            loser_reward: scored[worst].0,
        });
    }
    Ok(pairs)
}

/// Loss and `dL/dΔ` from the four errors
/// `[e(θ, w), e(ref, w), e(θ, l), e(ref, l)]`.
pub fn dpo_objective(errors: [f64; 4], beta: f64) -> (f64, f64) {
    let margin = (errors[0] - errors[1]) - (errors[2] - errors[3]);
    let z = beta * margin;
    // softplus(z) = -log σ(-z)
    let loss = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    (loss, beta * logistic(z))
}

/// Flow-matching DPO loss for one pair at time `t` with noises for the
/// winner and loser. Gradients are with respect to `current` only.
pub fn dpo_loss(
    current: &ParamVector,
    reference: &ParamVector,
    pair: &PreferencePair,
    t: f64,
    noise: (&[f64], &[f64]),
    beta: f64,
) -> Result<(f64, Gradients)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Input(format!("DPO time must lie in (0, 1), got {t}")));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("DPO beta must be > 0, got {beta}")));
    }
    let c = pair.condition;
    let (xw, target_w) = interpolate(&pair.winner, noise.0, t)?;
    let (xl, target_l) = interpolate(&pair.loser, noise.1, t)?;
    let error = |p: &ParamVector, x: &[f64], target: &[f64]| -> Result<f64> {
        Ok(squared_distance(&p.forward_velocity(x, t, c)?, target))
    };
    let errors = [
        error(current, &xw, &target_w)?,
        error(reference, &xw, &target_w)?,
        error(current, &xl, &target_l)?,
        error(reference, &xl, &target_l)?,
    ];
    let (loss, dmargin) = dpo_objective(errors, beta);
    if !loss.is_finite() {
        return Err(Error::Numeric("DPO loss is not finite".into()));
    }
    let mut grads = Gradients::zeros(current.len());
    for (x, target, sign) in [(&xw, &target_w, 1.0), (&xl, &target_l, -1.0)] {
        current.forward_backward(x, t, c, &mut grads.values, |v| {
            Ok(v.iter().zip(target.iter()).map(|(a, b)| sign * dmargin * 2.0 * (a - b)).collect())
        })?;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub steps: usize,
    /// Pairs per gradient step.
    pub batch_pairs: usize,
    pub lr: f64,
    pub num_prompts: usize,
    pub candidates_per_prompt: usize,
    pub sampler_steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 100.0,
            steps: 300,
            batch_pairs: 32,
            lr: 1e-4,
            num_prompts: 256,
            candidates_per_prompt: 4,
            sampler_steps: 25,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.beta > 0.0) {
            problems.push("beta must be > 0");
        }
        if self.steps == 0 {
            problems.push("steps must be >= 1");
        }
        if self.batch_pairs == 0 {
            problems.push("batch_pairs must be >= 1");
        }
        if !(self.lr > 0.0) {
            problems.push("lr must be > 0");
        }
        if self.candidates_per_prompt < 2 {
            problems.push("candidates_per_prompt must be >= 2");
        }
        if self.sampler_steps == 0 {
            problems.push("sampler_steps must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpoRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DpoRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<DpoRecord>,
}

/// Optimizes the DPO loss from the reference over a fixed pair set. Each
/// pair draws one `t ~ U(0, 1)` and one `ε` shared by winner and loser.
pub fn dpo_train(reference: &ParamVector, pairs: &[PreferencePair], config: &DpoConfig, seed: u64) -> Result<DpoRun> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("no preference pairs to train on".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut current = reference.clone();
    let mut adam = AdamState::new(current.len(), config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let dim = reference.spec().input_dim;
    for step in 0..config.steps {
        let mut grads = Gradients::zeros(current.len());
        let mut loss = 0.0;
        for _ in 0..config.batch_pairs {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            let t = loop {
                let t: f64 = rng.gen();
                if t > 0.0 {
                    break t;
                }
            };
            let eps = standard_normal_vec(&mut rng, dim);
            let (l, g) = dpo_loss(&current, reference, pair, t, (&eps, &eps), config.beta)
                .map_err(|e| e.at_step(step))?;
            loss += l;
            grads.add_assign(&g);
        }
        let scale = 1.0 / config.batch_pairs as f64;
        grads.scale(scale);
        adam.update(current.values_mut(), &grads.values)
            .map_err(|e| e.at_step(step))?;
        losses.push(DpoRecord {
            step,
            loss: loss * scale,
        });
    }
    Ok(DpoRun {
        checkpoint: Checkpoint::new(current, Some(adam), StageTag::Dpo),
        losses,
    })
}

/// Generates `per_condition` ODE samples from `reference` for every
/// condition and keeps the top quarter by reward within each condition.
pub fn top_quartile_dataset(
    reference: &ParamVector,
    task: &Task,
    reward_fn: &dyn RewardFn,
    per_condition: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<(Point, usize)>> {
    if per_condition < 4 {
        return Err(Error::Config("per_condition must be >= 4 to keep a top quartile".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut dataset = Vec::new();
    for c in 0..task.num_conditions() {
        let mut scored = Vec::with_capacity(per_condition);
        for _ in 0..per_condition {
            let x = ode_sample(reference, c, schedule, child_seed(&mut rng))?.final_sample;
            scored.push((reward_fn.reward(&x, c)?, x));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        dataset.extend(scored.into_iter().take(per_condition / 4).map(|(_, x)| (x, c)));
    }
    Ok(dataset)
}

/// Continues flow-matching training from `reference` on a fixed dataset of
/// `(sample, condition)` pairs drawn uniformly with replacement.
pub fn sft_finetune(
    reference: &ParamVector,
    dataset: &[(Point, usize)],
    config: &CfmConfig,
    seed: u64,
    reduction: Reduction,
) -> Result<cfm::CfmRun> {
    if dataset.is_empty() {
        return Err(Error::Input("SFT dataset is empty".into()));
    }
    let spec = reference.spec();
    if let Some((i, _)) = dataset
        .iter()
        .enumerate()
        .find(|(_, (x, c))| x.len() != spec.input_dim || *c >= spec.num_conditions)
    {
        return Err(Error::Input(format!("SFT example {i} does not fit the network")));
    }
    let dim = spec.input_dim;
    let (params, adam, losses) = cfm::train_loop(reference.clone(), config, seed, reduction, |rng| {
        CfmBatch::draw(config.batch_size, 1, dim, rng, |_, rng| {
            Ok(dataset[rng.gen_range(0..dataset.len())].clone())
        })
    })?;
    Ok(cfm::CfmRun {
        checkpoint: Checkpoint::new(params, Some(adam), StageTag::Sft),
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_params, NetSpec};
    use crate::rewards::{region_scorer, QaReward};
    use crate::tasks::RingTask;
    use proptest::prelude::*;
    use rand::Rng;

    fn softplus(z: f64) -> f64 {
        (1.0 + z.exp()).ln()
    }

    #[test]
    fn objective_examples() {
        let (loss, _) = dpo_objective([0.7, 0.7, 0.2, 0.2], 100.0);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let (loss, _) = dpo_objective([1.0, 0.5, 0.8, 0.8], 1.0);
        assert!((loss - softplus(0.5)).abs() < 1e-15);
        // Better than the reference on the winner, unchanged on the loser.
        let (loss, _) = dpo_objective([0.4, 0.5, 0.8, 0.8], 1.0);
        assert!(loss < 2f64.ln());
    }

    proptest! {
        #[test]
        fn objective_depends_only_on_double_difference(
            e in prop::array::uniform4(0.0..5.0f64), shift in -3.0..3.0f64, beta in 0.1..50.0f64
        ) {
            let (a, _) = dpo_objective(e, beta);
            let (b, _) = dpo_objective([e[0] + shift, e[1] + shift, e[2] + shift, e[3] + shift], beta);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn objective_decreases_as_winner_improves(
            e in prop::array::uniform4(0.0..5.0f64), gain in 0.01..1.0f64, beta in 0.1..10.0f64
        ) {
            let (a, _) = dpo_objective(e, beta);
            let (b, _) = dpo_objective([e[0] - gain, e[1], e[2], e[3]], beta);
            prop_assert!(b < a);
        }
    }

    fn pair() -> PreferencePair {
        PreferencePair {
            condition: 1,
            winner: vec![0.0, 2.0],
            loser: vec![-1.5, -1.0],
            winner_reward: 0.9,
            loser_reward: 0.1,
        }
    }

    #[test]
    fn equal_policies_give_ln2() {
        let p = init_params(&NetSpec::new(2, vec![8], 4), 2).unwrap();
        let (loss, _) = dpo_loss(&p, &p, &pair(), 0.4, (&[0.3, -0.2], &[0.3, -0.2]), 100.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let spec = NetSpec::new(2, vec![6], 4);
        let reference = init_params(&spec, 2).unwrap();
        let mut current = reference.clone();
        let mut rng = rng_from_seed(3);
        for v in current.values_mut() {
            *v += 0.01 * rng.gen_range(-1.0..1.0);
        }
        let noise = [0.5, -0.7];
        let (_, grads) = dpo_loss(&current, &reference, &pair(), 0.35, (&noise, &noise), 2.0).unwrap();
        let h = 1e-5;
        for i in 0..current.len() {
            let eval = |d: f64| {
                let mut p = current.clone();
                p.values_mut()[i] += d;
                dpo_loss(&p, &reference, &pair(), 0.35, (&noise, &noise), 2.0).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.values[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn curation_contract() {
        let ring = RingTask::default_ring();
        let task = Task::Ring(ring.clone());
        let reward = QaReward {
            scorer: region_scorer(&ring, 4.0).unwrap(),
        };
        let reference = init_params(&NetSpec::new(2, vec![8], 4), 2).unwrap();
        let schedule = Schedule::uniform(5).unwrap();
        let pairs = curate_pairs(&reference, &task, &reward, 12, 2, &schedule, 4).unwrap();
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|p| p.winner_reward > p.loser_reward));
        assert_eq!(pairs, curate_pairs(&reference, &task, &reward, 12, 2, &schedule, 4).unwrap());
        let more = curate_pairs(&reference, &task, &reward, 7, 5, &schedule, 4).unwrap();
        assert!(more.len() <= 7);
        assert!(curate_pairs(&reference, &task, &reward, 3, 1, &schedule, 4).is_err());
    }

    #[test]
    fn constant_reward_yields_no_pairs() {
        struct Flat;
        impl RewardFn for Flat {
            fn name(&self) -> &str {
                "flat"
            }
            fn reward(&self, _: &[f64], _: usize) -> Result<f64> {
                Ok(0.5)
            }
        }
        let task = Task::Ring(RingTask::default_ring());
        let reference = init_params(&NetSpec::new(2, vec![8], 4), 2).unwrap();
        let schedule = Schedule::uniform(3).unwrap();
        assert!(curate_pairs(&reference, &task, &Flat, 5, 3, &schedule, 0).unwrap().is_empty());
    }

    #[test]
    fn sft_is_deterministic_and_validates() {
        let reference = init_params(&NetSpec::new(2, vec![8], 4), 2).unwrap();
        let data = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 3)];
        let config = CfmConfig {
            steps: 20,
            batch_size: 8,
            lr: 1e-3,
            log_every: 5,
        };
        let a = sft_finetune(&reference, &data, &config, 1, Reduction::Serial).unwrap();
        let b = sft_finetune(&reference, &data, &config, 1, Reduction::Serial).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.checkpoint.stage, StageTag::Sft);
        assert!(sft_finetune(&reference, &[], &config, 1, Reduction::Serial).is_err());
        assert!(sft_finetune(&reference, &[(vec![0.0, 0.0], 9)], &config, 1, Reduction::Serial).is_err());
    }
}
