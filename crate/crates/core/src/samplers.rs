//! Euler ODE sampling and the marginal-preserving SDE sampler.
//!
//! Time runs from `t = 1` (pure noise) down to `t = 0` (data), so every step
//! has a negative `dt`. The stochastic transition is
//!
//! ```text
//! mean   = x + [v + σ²/(2t) (x + (1 - t) v)] dt
//! x_next = mean + σ √|dt| ε,        σ = a √(t / (1 - t))
//! ```
//!
//! where `t` is clamped to `1 - δ` inside `σ` and the drift correction so the
//! first grid point at `t = 1` stays finite. Each transition is Gaussian with
//! standard deviation `σ √|dt|`, which gives the per-step likelihoods that
//! policy optimization needs.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{ensure_finite, rng_from_seed, squared_distance, standard_normal_vec};
use crate::{Error, Point, Result, VelocityField};

/// Decreasing time grid `1 = t_0 > t_1 > … > t_T = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    grid: Vec<f64>,
    clamp_delta: f64,
}

impl Schedule {
    /// Uniform grid with `δ` set to half the step size.
    pub fn uniform(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let n = num_steps as f64;
        let mut grid: Vec<f64> = (0..=num_steps).map(|k| 1.0 - k as f64 / n).collect();
        grid[num_steps] = 0.0;
        Self::from_grid(grid, 0.5 / n)
    }

    pub fn from_grid(grid: Vec<f64>, clamp_delta: f64) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::Config("schedule grid needs at least two points".into()));
        }
        if grid[0] != 1.0 || *grid.last().unwrap() != 0.0 {
            return Err(Error::Config("schedule grid must run from 1 to 0".into()));
        }
        if grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("schedule grid must be strictly decreasing".into()));
        }
        let first_step = grid[0] - grid[1];
        if !(clamp_delta > 0.0 && clamp_delta < 0.5 && clamp_delta < first_step) {
            return Err(Error::Config(format!(
                "clamp delta {clamp_delta} must lie in (0, 0.5) and below the first step {first_step}"
            )));
        }
        Ok(Schedule { grid, clamp_delta })
    }

    pub fn num_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn clamp_delta(&self) -> f64 {
        self.clamp_delta
    }

    /// `(t, dt)` for each step, with `dt < 0`.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

/// One recorded sampler step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub x_t: Point,
    pub mean: Point,
    pub sigma: f64,
    pub dt: f64,
    pub x_next: Point,
}

/// A full rollout from noise to a final sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: usize,
    pub initial_noise: Point,
    pub transitions: Vec<Transition>,
    pub final_sample: Point,
    pub reward: Option<f64>,
}

impl Trajectory {
    /// Checks that each step starts where the previous one ended.
    pub fn is_chained(&self) -> bool {
        let Some(first) = self.transitions.first() else {
            return self.initial_noise == self.final_sample;
        };
        first.x_t == self.initial_noise
            && self.transitions.windows(2).all(|w| w[0].x_next == w[1].x_t)
            && self.transitions.last().unwrap().x_next == self.final_sample
    }
}

/// Noise scale `σ = a √(t' / (1 - t'))` with `t' = min(t, 1 - δ)`.
pub fn sigma(a: f64, t: f64, delta: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let t = t.min(1.0 - delta);
    a * (t / (1.0 - t)).sqrt()
}

/// Mean of the stochastic transition together with `σ` and the scalar
/// `∂mean/∂v`, which is the same for every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMean {
    pub mean: Point,
    pub sigma: f64,
    pub mean_velocity_gain: f64,
}

/// Evaluates the transition mean for a given velocity `v` at `(x_t, t)`.
pub fn transition_mean(x_t: &[f64], v: &[f64], t: f64, dt: f64, a: f64, delta: f64) -> TransitionMean {
    let sigma = sigma(a, t, delta);
    if sigma == 0.0 {
        return TransitionMean {
            mean: x_t.iter().zip(v).map(|(x, v)| x + v * dt).collect(),
            sigma,
            mean_velocity_gain: dt,
        };
    }
    let tc = t.min(1.0 - delta);
    let correction = sigma * sigma / (2.0 * tc);
    let mean = x_t
        .iter()
        .zip(v)
        .map(|(x, v)| x + (v + correction * (x + (1.0 - tc) * v)) * dt)
        .collect();
    TransitionMean {
        mean,
        sigma,
        mean_velocity_gain: dt * (1.0 + correction * (1.0 - tc)),
    }
}

fn check_step(t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Input(format!("SDE step requires t in (0, 1], got {t}")));
    }
    if !(dt < 0.0) || t + dt < -1e-12 {
        return Err(Error::Input(format!("SDE step requires dt < 0 and t + dt >= 0, got dt={dt}")));
    }
    Ok(())
}

/// One stochastic transition from `x_t` with the supplied standard-normal
/// `noise`.
pub fn sde_step<F: VelocityField + ?Sized>(
    field: &F,
    x_t: &[f64],
    t: f64,
    c: usize,
    dt: f64,
    a: f64,
    noise: &[f64],
    delta: f64,
) -> Result<Transition> {
    check_step(t, dt)?;
    if noise.len() != x_t.len() {
        return Err(Error::Input("noise and state dimensions differ".into()));
    }
    let v = field.velocity(x_t, t, c)?;
    let TransitionMean { mean, sigma, .. } = transition_mean(x_t, &v, t, dt, a, delta);
    let x_next = if sigma == 0.0 {
        mean.clone()
    } else {
        let scale = sigma * dt.abs().sqrt();
        mean.iter().zip(noise).map(|(m, e)| m + scale * e).collect()
    };
    Ok(Transition {
        t,
        x_t: x_t.to_vec(),
        mean,
        sigma,
        dt,
        x_next,
    })
}

fn check_condition<F: VelocityField + ?Sized>(field: &F, c: usize) -> Result<()> {
    if c >= field.num_conditions() {
        return Err(Error::Input(format!(
            "condition id {c} out of range ({} conditions)",
            field.num_conditions()
        )));
    }
    Ok(())
}

/// Deterministic Euler integration from a seeded standard-normal start.
pub fn ode_sample<F: VelocityField + ?Sized>(
    field: &F,
    c: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<Trajectory> {
    check_condition(field, c)?;
    let mut rng = rng_from_seed(seed);
    let initial_noise = standard_normal_vec(&mut rng, field.dim());
    let mut x = initial_noise.clone();
    let mut transitions = Vec::with_capacity(schedule.num_steps());
    for (k, (t, dt)) in schedule.steps().enumerate() {
        let v = field.velocity(&x, t, c).map_err(|e| e.at_step(k))?;
        let x_next: Point = x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
        ensure_finite(&x_next, "ODE state").map_err(|e| Error::Numeric(e.to_string()).at_step(k))?;
        transitions.push(Transition {
            t,
            x_t: std::mem::replace(&mut x, x_next.clone()),
            mean: x_next,
            sigma: 0.0,
            dt,
            x_next: x.clone(),
        });
    }
    Ok(Trajectory {
        condition: c,
        initial_noise,
        transitions,
        final_sample: x,
        reward: None,
    })
}

/// Stochastic sampling at noise level `a`. The RNG stream draws the initial
/// state first, exactly as [`ode_sample`] does, so `a = 0` reproduces the
/// ODE trajectory bit for bit.
pub fn sde_sample<F: VelocityField + ?Sized>(
    field: &F,
    c: usize,
    schedule: &Schedule,
    a: f64,
    seed: u64,
) -> Result<Trajectory> {
    check_condition(field, c)?;
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::Input(format!("noise level must be finite and >= 0, got {a}")));
    }
    let mut rng = rng_from_seed(seed);
    let dim = field.dim();
    let initial_noise = standard_normal_vec(&mut rng, dim);
    let mut x = initial_noise.clone();
    let mut transitions = Vec::with_capacity(schedule.num_steps());
    for (k, (t, dt)) in schedule.steps().enumerate() {
        let noise = standard_normal_vec(&mut rng, dim);
        let tr = sde_step(field, &x, t, c, dt, a, &noise, schedule.clamp_delta())
            .map_err(|e| e.at_step(k))?;
        ensure_finite(&tr.x_next, "SDE state")
            .map_err(|e| Error::Numeric(e.to_string()).at_step(k))?;
        x = tr.x_next.clone();
        transitions.push(tr);
    }
    Ok(Trajectory {
        condition: c,
        initial_noise,
        transitions,
        final_sample: x,
        reward: None,
    })
}

/// Log-density of `x_next` under `N(mean, σ² |dt| I)`.
pub fn transition_logpdf(x_next: &[f64], mean: &[f64], sigma: f64, dt: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Degenerate(format!(
            "transition standard deviation is zero (sigma={sigma})"
        )));
    }
    if dt == 0.0 {
        return Err(Error::Degenerate("transition has zero time step".into()));
    }
    if x_next.len() != mean.len() {
        return Err(Error::Input("x_next and mean dimensions differ".into()));
    }
    let var = sigma * sigma * dt.abs();
    let d = x_next.len() as f64;
    Ok(-0.5 * d * (2.0 * PI * var).ln() - squared_distance(x_next, mean) / (2.0 * var))
}

/// Writes one transition per row:
/// `step,t,dt,sigma,x_t_0..,mean_0..,x_next_0..`.
pub fn write_trajectory_csv<W: Write>(out: W, traj: &Trajectory) -> Result<()> {
    let dim = traj.initial_noise.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "t".into(), "dt".into(), "sigma".into()];
    for prefix in ["x_t", "mean", "x_next"] {
        header.extend((0..dim).map(|k| format!("{prefix}_{k}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (k, tr) in traj.transitions.iter().enumerate() {
        let mut row = vec![k.to_string(), tr.t.to_string(), tr.dt.to_string(), tr.sigma.to_string()];
        for v in tr.x_t.iter().chain(&tr.mean).chain(&tr.x_next) {
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a sample cloud as `x_0,..,x_{D-1},condition`.
pub fn write_samples_csv<W: Write>(out: W, samples: &[(Point, usize)]) -> Result<()> {
    let dim = samples.first().map_or(0, |(p, _)| p.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|k| format!("x_{k}")).collect();
    header.push("condition".into());
    w.write_record(&header).map_err(csv_err)?;
    for (p, c) in samples {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        row.push(c.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Draws a fresh seed from `rng`; used to give each rollout its own stream.
pub(crate) fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.gen()
}
