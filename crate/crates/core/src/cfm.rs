//! Conditional flow-matching pretraining.
//!
//! A training pair `(x, c)` is noised along `x_t = (1 - t) x + t ε` and the
//! network regresses the constant path velocity `ε - x`. Minimizing the mean
//! squared residual over uniform `t` and fresh `ε` recovers the conditional
//! expectation `E[ε - x | x_t, c]`.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnet::{init_params, AdamState, Gradients, NetSpec, ParamVector};
use crate::harness::checkpoint::{Checkpoint, StageTag};
use crate::tasks::Task;
use crate::util::{rng_from_seed, squared_distance, standard_normal_vec};
use crate::{Error, Point, Result, VelocityField};

/// Returns `(x_t, v_target)` for the linear noising path.
pub fn interpolate(x: &[f64], eps: &[f64], t: f64) -> Result<(Point, Point)> {
    if x.len() != eps.len() {
        return Err(Error::Input(format!(
            "data has dimension {}, noise has {}",
            x.len(),
            eps.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("t={t} outside [0, 1]")));
    }
    let x_t = x.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    let target = x.iter().zip(eps).map(|(a, e)| e - a).collect();
    Ok((x_t, target))
}

/// A minibatch of data points, their conditions, noise draws, and times.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmBatch {
    pub samples: Vec<Point>,
    pub conditions: Vec<usize>,
    pub noises: Vec<Point>,
    pub times: Vec<f64>,
}

impl CfmBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::Input("CFM batch is empty".into()));
        }
        if self.conditions.len() != n || self.noises.len() != n || self.times.len() != n {
            return Err(Error::Input("CFM batch lists differ in length".into()));
        }
        Ok(())
    }

    /// Draws a batch: conditions uniformly, data from the sampler closure,
    /// noise from `N(0, I)`, and `t ~ U[0, 1]`.
    pub fn draw<R, S>(size: usize, num_conditions: usize, dim: usize, rng: &mut R, mut sample: S) -> Result<Self>
    where
        R: Rng + ?Sized,
        S: FnMut(usize, &mut R) -> Result<(Point, usize)>,
    {
        let mut batch = CfmBatch {
            samples: Vec::with_capacity(size),
            conditions: Vec::with_capacity(size),
            noises: Vec::with_capacity(size),
            times: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let c = rng.gen_range(0..num_conditions);
            let (x, c) = sample(c, rng)?;
            batch.samples.push(x);
            batch.conditions.push(c);
            batch.noises.push(standard_normal_vec(rng, dim));
            batch.times.push(rng.gen::<f64>());
        }
        Ok(batch)
    }
}

/// Order in which per-example gradients are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Fixed left-to-right order; reproducible bit for bit.
    #[default]
    Serial,
    /// Work-stealing parallel reduction; summation order may vary.
    Parallel,
}

impl Reduction {
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            Reduction::Serial
        } else {
            Reduction::Parallel
        }
    }
}

fn example_loss(params: &ParamVector, batch: &CfmBatch, i: usize, scale: f64, grads: &mut [f64]) -> Result<f64> {
    let (x_t, target) = interpolate(&batch.samples[i], &batch.noises[i], batch.times[i])?;
    let mut residual_sq = 0.0;
    params.forward_backward(&x_t, batch.times[i], batch.conditions[i], grads, |v| {
        residual_sq = squared_distance(v, &target);
        Ok(v.iter().zip(&target).map(|(a, b)| 2.0 * scale * (a - b)).collect())
    })?;
    Ok(residual_sq * scale)
}

/// Mean squared velocity residual over the batch and its gradient.
pub fn cfm_loss(params: &ParamVector, batch: &CfmBatch, reduction: Reduction) -> Result<(f64, Gradients)> {
    batch.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let len = params.len();
    let (loss, grads) = match reduction {
        Reduction::Serial => {
            let mut grads = Gradients::zeros(len);
            let mut loss = 0.0;
            for i in 0..batch.len() {
                loss += example_loss(params, batch, i, scale, &mut grads.values)?;
            }
            (loss, grads)
        }
        Reduction::Parallel => (0..batch.len())
            .into_par_iter()
            .try_fold(
                || (0.0, Gradients::zeros(len)),
                |(loss, mut grads), i| {
                    let l = example_loss(params, batch, i, scale, &mut grads.values)?;
                    Ok::<_, Error>((loss + l, grads))
                },
            )
            .try_reduce(
                || (0.0, Gradients::zeros(len)),
                |(la, mut ga), (lb, gb)| {
                    ga.add_assign(&gb);
                    Ok((la + lb, ga))
                },
            )?,
    };
    if !loss.is_finite() {
        return Err(Error::Numeric("CFM loss is not finite".into()));
    }
    Ok((loss, grads))
}

/// Batch risk of an arbitrary velocity field (no gradient).
pub fn cfm_risk<F: VelocityField + ?Sized>(field: &F, batch: &CfmBatch) -> Result<f64> {
    batch.validate()?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (x_t, target) = interpolate(&batch.samples[i], &batch.noises[i], batch.times[i])?;
        let v = field.velocity(&x_t, batch.times[i], batch.conditions[i])?;
        total += squared_distance(&v, &target);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Record the loss every `log_every` steps.
    pub log_every: usize,
}

impl Default for CfmConfig {
    fn default() -> Self {
        CfmConfig {
            steps: 20_000,
            batch_size: 256,
            lr: 1e-3,
            log_every: 50,
        }
    }
}

impl CfmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be >= 1");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1");
        }
        if !(self.lr > 0.0) {
            problems.push("lr must be > 0");
        }
        if self.log_every == 0 {
            problems.push("log_every must be >= 1");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Outcome of a flow-matching training run.
#[derive(Debug, Clone)]
pub struct CfmRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRecord>,
}

/// Shared Adam loop over batches drawn by `draw_batch`.
pub(crate) fn train_loop<D>(
    mut params: ParamVector,
    config: &CfmConfig,
    seed: u64,
    reduction: Reduction,
    mut draw_batch: D,
) -> Result<(ParamVector, AdamState, Vec<LossRecord>)>
where
    D: FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<CfmBatch>,
{
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut adam = AdamState::new(params.len(), config.lr);
    let mut losses = Vec::new();
    let started = Instant::now();
    for step in 0..config.steps {
        let batch = draw_batch(&mut rng).map_err(|e| e.at_step(step))?;
        let (loss, grads) = cfm_loss(&params, &batch, reduction).map_err(|e| e.at_step(step))?;
        adam.update(params.values_mut(), &grads.values)
            .map_err(|e| e.at_step(step))?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            losses.push(LossRecord {
                step,
                loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    Ok((params, adam, losses))
}

/// Trains a fresh network on `task` and tags the result as the reference
/// policy.
pub fn pretrain(task: &Task, spec: &NetSpec, config: &CfmConfig, seed: u64, reduction: Reduction) -> Result<CfmRun> {
    spec.validate()?;
    if spec.input_dim != task.dim() || spec.num_conditions != task.num_conditions() {
        return Err(Error::Config(format!(
            "network (D={}, conditions={}) does not match task (D={}, conditions={})",
            spec.input_dim,
            spec.num_conditions,
            task.dim(),
            task.num_conditions()
        )));
    }
    let params = init_params(spec, seed)?;
    let (dim, conditions) = (task.dim(), task.num_conditions());
    let (params, adam, losses) = train_loop(params, config, seed.wrapping_add(1), reduction, |rng| {
        CfmBatch::draw(config.batch_size, conditions, dim, rng, |c, rng| Ok((task.draw(c, rng)?, c)))
    })?;
    Ok(CfmRun {
        checkpoint: Checkpoint::new(params, Some(adam), StageTag::Reference),
        losses,
    })
}
