//! Synthetic conditional data distributions.
//!
//! [`GaussianTask`] gives one Gaussian per condition. Under the linear
//! interpolant `x_t = (1 - t) x + t ε` every marginal stays Gaussian, so the
//! optimal velocity field and the marginals have closed forms that the
//! samplers and the pretraining loop are checked against.
//!
//! [`RingTask`] places isotropic modes on a circle and assigns each condition
//! an angular arc. A fraction of the training pairs is mislabeled, so a
//! policy fit by maximum likelihood leaves room for reward-driven
//! improvement.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{rng_from_seed, standard_normal_vec};
use crate::{Error, Point, Result, VelocityField};

/// One Gaussian component `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianCondition {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    cov_cholesky: DMatrix<f64>,
}

impl GaussianCondition {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Config("Gaussian mean must be non-empty".into()));
        }
        if cov.len() != d || cov.iter().any(|row| row.len() != d) {
            return Err(Error::Config(format!("covariance must be {d}x{d}")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        if (0..d).any(|i| (0..d).any(|j| (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12)) {
            return Err(Error::Config("covariance must be symmetric".into()));
        }
        let cov_cholesky = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Config("covariance must be positive-definite".into()))?
            .l();
        Ok(GaussianCondition {
            mean: DVector::from_vec(mean),
            cov,
            cov_cholesky,
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    pub fn cov(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.cov)
    }
}

/// Conditional Gaussian data with analytic flow-matching oracles.
#[derive(Debug, Clone)]
pub struct GaussianTask {
    conditions: Vec<GaussianCondition>,
}

impl GaussianTask {
    pub fn new(conditions: Vec<GaussianCondition>) -> Result<Self> {
        let Some(first) = conditions.first() else {
            return Err(Error::Config("Gaussian task needs at least one condition".into()));
        };
        let d = first.mean.len();
        if conditions.iter().any(|c| c.mean.len() != d) {
            return Err(Error::Config("all Gaussian conditions must share a dimension".into()));
        }
        Ok(GaussianTask { conditions })
    }

    /// Four well-separated 2-D Gaussians with distinct covariances.
    pub fn four_blobs() -> Self {
        let spec = [
            ([2.0, 0.0], [[0.30, 0.10], [0.10, 0.20]]),
            ([0.0, 2.0], [[0.20, -0.05], [-0.05, 0.35]]),
            ([-2.0, 0.0], [[0.25, 0.0], [0.0, 0.25]]),
            ([0.0, -2.0], [[0.40, 0.15], [0.15, 0.30]]),
        ];
        let conditions = spec
            .iter()
            .map(|(m, c)| {
                GaussianCondition::new(m.to_vec(), c.iter().map(|r| r.to_vec()).collect())
                    .expect("built-in covariance is positive-definite")
            })
            .collect();
        GaussianTask { conditions }
    }

    pub fn dim(&self) -> usize {
        self.conditions[0].mean.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn condition(&self, c: usize) -> Result<&GaussianCondition> {
        self.conditions.get(c).ok_or_else(|| {
            Error::Input(format!(
                "condition id {c} out of range (task has {} conditions)",
                self.conditions.len()
            ))
        })
    }

    fn draw<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<Point> {
        let cond = self.condition(c)?;
        let z = DVector::from_vec(standard_normal_vec(rng, self.dim()));
        Ok((&cond.mean + &cond.cov_cholesky * z).iter().copied().collect())
    }

    /// Mean and covariance of `x_t = (1 - t) x + t ε` given condition `c`.
    pub fn oracle_marginal(&self, t: f64, c: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_time(t)?;
        let (mean, cov) = self.marginal_matrices(t, c)?;
        Ok((mean.iter().copied().collect(), matrix_rows(&cov)))
    }

    fn marginal_matrices(&self, t: f64, c: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let cond = self.condition(c)?;
        let d = self.dim();
        let s = 1.0 - t;
        let mean = &cond.mean * s;
        let cov = &cond.cov * (s * s) + DMatrix::identity(d, d) * (t * t);
        Ok((mean, cov))
    }

    /// The mean-square-optimal velocity `E[ε - x | x_t]`:
    /// `-μ + (t I - (1 - t) Σ) C_t⁻¹ (x_t - (1 - t) μ)` with
    /// `C_t = (1 - t)² Σ + t² I`.
    pub fn oracle_velocity(&self, x_t: &[f64], t: f64, c: usize) -> Result<Point> {
        check_time(t)?;
        let d = self.dim();
        if x_t.len() != d {
            return Err(Error::Input(format!("x_t has dimension {}, task has {d}", x_t.len())));
        }
        let cond = self.condition(c)?;
        let (m_t, c_t) = self.marginal_matrices(t, c)?;
        let chol = c_t
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("marginal covariance at t={t} is singular")))?;
        let residual = DVector::from_column_slice(x_t) - m_t;
        let whitened = chol.solve(&residual);
        let gain = DMatrix::identity(d, d) * t - &cond.cov * (1.0 - t);
        let v = -&cond.mean + gain * whitened;
        Ok(v.iter().copied().collect())
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Input(format!("t={t} outside [0, 1]")))
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// The analytic optimal velocity of a [`GaussianTask`] as a [`VelocityField`].
#[derive(Debug, Clone, Copy)]
pub struct OracleField<'a>(pub &'a GaussianTask);

impl VelocityField for OracleField<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn num_conditions(&self) -> usize {
        self.0.num_conditions()
    }

    fn velocity(&self, x: &[f64], t: f64, c: usize) -> Result<Point> {
        self.0.oracle_velocity(x, t, c)
    }
}

/// Angular interval `[start, start + width]`, measured counter-clockwise and
/// allowed to wrap past `2π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularInterval {
    pub start: f64,
    pub width: f64,
}

impl AngularInterval {
    pub fn center(&self) -> f64 {
        (self.start + 0.5 * self.width).rem_euclid(TAU)
    }

    /// Signed angular distance to the nearest edge, positive inside.
    pub fn signed_margin(&self, angle: f64) -> f64 {
        let offset = (angle - self.start).rem_euclid(TAU);
        if offset <= self.width {
            offset.min(self.width - offset)
        } else {
            -(offset - self.width).min(TAU - offset)
        }
    }
}

/// Modes on a circle with condition-specific arcs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingTask {
    pub num_modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    /// Probability that a training pair's sample is drawn from a uniformly
    /// random mode instead of a mode inside the condition's arc.
    #[serde(default)]
    pub label_noise: f64,
    /// Arc assigned to each condition id.
    pub arcs: Vec<AngularInterval>,
}

impl RingTask {
    /// Eight modes of radius 2; condition `c` owns modes `2c` and `2c + 1`.
    pub fn default_ring() -> Self {
        let step = TAU / 8.0;
        RingTask {
            num_modes: 8,
            radius: 2.0,
            mode_std: 0.15,
            label_noise: 0.5,
            arcs: (0..4)
                .map(|c| AngularInterval {
                    start: (2 * c) as f64 * step - 0.5 * step,
                    width: 2.0 * step,
                })
                .map(|a| AngularInterval {
                    start: a.start.rem_euclid(TAU),
                    width: a.width,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_modes < 2 {
            problems.push("num_modes must be >= 2".to_string());
        }
        if !(self.radius > 0.0) {
            problems.push("radius must be > 0".to_string());
        }
        if !(self.mode_std > 0.0) {
            problems.push("mode_std must be > 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            problems.push("label_noise must lie in [0, 1]".to_string());
        }
        if self.arcs.is_empty() {
            problems.push("arcs must be non-empty".to_string());
        }
        for (c, arc) in self.arcs.iter().enumerate() {
            if !(0.0..TAU).contains(&arc.start) || !(arc.width > 0.0 && arc.width < TAU) {
                problems.push(format!("arc {c} must have start in [0, 2π) and width in (0, 2π)"));
            } else if self.modes_in_arc(c).is_empty() {
                problems.push(format!("arc {c} contains no mode"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.arcs.len()
    }

    pub fn mode_angle(&self, k: usize) -> f64 {
        TAU * k as f64 / self.num_modes as f64
    }

    pub fn mode_center(&self, k: usize) -> Point {
        let a = self.mode_angle(k);
        vec![self.radius * a.cos(), self.radius * a.sin()]
    }

    /// Half-width of the radial band around the circle counted as on-target.
    pub fn radial_tolerance(&self) -> f64 {
        3.0 * self.mode_std
    }

    pub fn arc(&self, c: usize) -> Result<&AngularInterval> {
        self.arcs.get(c).ok_or_else(|| {
            Error::Input(format!(
                "condition id {c} out of range (task has {} conditions)",
                self.arcs.len()
            ))
        })
    }

    pub fn modes_in_arc(&self, c: usize) -> Vec<usize> {
        let Some(arc) = self.arcs.get(c) else {
            return Vec::new();
        };
        (0..self.num_modes)
            .filter(|&k| arc.signed_margin(self.mode_angle(k)) > 0.0)
            .collect()
    }

    /// Signed distance-like margin of `x` to the condition's region: the
    /// smaller of the arc-length margin and the radial band margin.
    pub fn region_margin(&self, x: &[f64], c: usize) -> Result<f64> {
        let arc = self.arc(c)?;
        if x.len() != 2 {
            return Err(Error::Input(format!("ring samples are 2-D, got {}", x.len())));
        }
        let r = x[0].hypot(x[1]);
        let angular = arc.signed_margin(x[1].atan2(x[0])) * self.radius;
        let radial = self.radial_tolerance() - (r - self.radius).abs();
        Ok(angular.min(radial))
    }

    fn draw<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<Point> {
        self.arc(c)?;
        let mode = if rng.gen::<f64>() < self.label_noise {
            rng.gen_range(0..self.num_modes)
        } else {
            let inside = self.modes_in_arc(c);
            inside[rng.gen_range(0..inside.len())]
        };
        let center = self.mode_center(mode);
        let z = standard_normal_vec(rng, 2);
        Ok(center
            .iter()
            .zip(&z)
            .map(|(m, e)| m + self.mode_std * e)
            .collect())
    }
}

/// A synthetic conditional data distribution.
#[derive(Debug, Clone)]
pub enum Task {
    Gaussian(GaussianTask),
    Ring(RingTask),
}

impl Task {
    pub fn dim(&self) -> usize {
        match self {
            Task::Gaussian(g) => g.dim(),
            Task::Ring(_) => 2,
        }
    }

    pub fn num_conditions(&self) -> usize {
        match self {
            Task::Gaussian(g) => g.num_conditions(),
            Task::Ring(r) => r.num_conditions(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianTask> {
        match self {
            Task::Gaussian(g) => Some(g),
            Task::Ring(_) => None,
        }
    }

    pub fn as_ring(&self) -> Option<&RingTask> {
        match self {
            Task::Ring(r) => Some(r),
            Task::Gaussian(_) => None,
        }
    }

    /// One draw from the conditional distribution using a caller-owned RNG.
    pub fn draw<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<Point> {
        match self {
            Task::Gaussian(g) => g.draw(c, rng),
            Task::Ring(r) => r.draw(c, rng),
        }
    }
}

/// `n` i.i.d. draws from the task's distribution for condition `c`.
pub fn sample_data(task: &Task, c: usize, n: usize, seed: u64) -> Result<Vec<Point>> {
    if c >= task.num_conditions() {
        return Err(Error::Input(format!(
            "condition id {c} out of range (task has {} conditions)",
            task.num_conditions()
        )));
    }
    if n == 0 {
        return Err(Error::Input("sample count must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| task.draw(c, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shifted_unit() -> GaussianTask {
        GaussianTask::new(vec![GaussianCondition::new(
            vec![2.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap()])
        .unwrap()
    }

    fn standard() -> GaussianTask {
        GaussianTask::new(vec![GaussianCondition::new(
            vec![0.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn sample_mean_converges() {
        let task = Task::Gaussian(shifted_unit());
        let pts = sample_data(&task, 0, 10_000, 9).unwrap();
        for k in 0..2 {
            let m = pts.iter().map(|p| p[k]).sum::<f64>() / pts.len() as f64;
            let target = [2.0, 0.0][k];
            assert!((m - target).abs() < 0.06, "coord {k}: {m}");
        }
    }

    #[test]
    fn sample_covariance_converges() {
        let task = Task::Gaussian(GaussianTask::four_blobs());
        let n = 40_000;
        let pts = sample_data(&task, 3, n, 1).unwrap();
        let g = task.as_gaussian().unwrap();
        let mean = g.condition(3).unwrap().mean();
        let cov = g.condition(3).unwrap().cov();
        for i in 0..2 {
            for j in 0..2 {
                let c = pts
                    .iter()
                    .map(|p| (p[i] - mean[i]) * (p[j] - mean[j]))
                    .sum::<f64>()
                    / n as f64;
                assert!((c - cov[i][j]).abs() < 0.02, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_guarded() {
        let task = Task::Ring(RingTask::default_ring());
        assert_eq!(
            sample_data(&task, 1, 50, 3).unwrap(),
            sample_data(&task, 1, 50, 3).unwrap()
        );
        assert!(matches!(sample_data(&task, 4, 5, 3), Err(Error::Input(_))));
        assert!(matches!(sample_data(&task, 0, 0, 3), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_covariance_is_rejected() {
        let err = GaussianCondition::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = GaussianCondition::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn marginal_endpoints_and_midpoint() {
        let g = shifted_unit();
        let (m, c) = g.oracle_marginal(1.0, 0).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(c, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (m, c) = g.oracle_marginal(0.0, 0).unwrap();
        assert_eq!(m, vec![2.0, 0.0]);
        assert_eq!(c, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (m, c) = g.oracle_marginal(0.5, 0).unwrap();
        assert_eq!(m, vec![1.0, 0.0]);
        assert_eq!(c, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
    }

    #[test]
    fn oracle_velocity_vanishes_at_half_for_standard_normal() {
        let g = standard();
        for x in [[0.3, -1.2], [5.0, 2.0], [0.0, 0.0]] {
            let v = g.oracle_velocity(&x, 0.5, 0).unwrap();
            assert!(v.iter().all(|c| c.abs() < 1e-15), "{v:?}");
        }
    }

    #[test]
    fn oracle_velocity_at_three_quarters() {
        let g = standard();
        let v = g.oracle_velocity(&[1.0, 0.0], 0.75, 0).unwrap();
        let coef = (2.0 * 0.75 - 1.0) / (0.25f64.powi(2) + 0.75f64.powi(2));
        assert!((v[0] - coef).abs() < 1e-14 && v[1].abs() < 1e-15);
    }

    #[test]
    fn oracle_velocity_at_data_endpoint_is_minus_x() {
        let g = GaussianTask::four_blobs();
        let x = [0.7, -0.4];
        let v = g.oracle_velocity(&x, 0.0, 1).unwrap();
        assert!((v[0] + 0.7).abs() < 1e-12 && (v[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_bad_time() {
        let g = standard();
        assert!(g.oracle_velocity(&[0.0, 0.0], 1.5, 0).is_err());
        assert!(g.oracle_marginal(-0.1, 0).is_err());
    }

    #[test]
    fn ring_geometry() {
        let ring = RingTask::default_ring();
        ring.validate().unwrap();
        for c in 0..4 {
            assert_eq!(ring.modes_in_arc(c), vec![2 * c, 2 * c + 1]);
        }
        let inside = ring.mode_center(0);
        assert!(ring.region_margin(&inside, 0).unwrap() > 0.0);
        assert!(ring.region_margin(&inside, 2).unwrap() < 0.0);
    }

    #[test]
    fn ring_label_noise_controls_adherence() {
        let mut ring = RingTask::default_ring();
        ring.label_noise = 0.0;
        let task = Task::Ring(ring.clone());
        let pts = sample_data(&task, 2, 2000, 5).unwrap();
        let inside = pts
            .iter()
            .filter(|p| ring.arc(2).unwrap().signed_margin(p[1].atan2(p[0])) > 0.0)
            .count();
        assert!(inside as f64 / 2000.0 > 0.99);
    }

    #[test]
    fn angular_margin_wraps() {
        let arc = AngularInterval {
            start: 5.5,
            width: 1.5,
        };
        assert!(arc.signed_margin(0.1) > 0.0);
        assert!(arc.signed_margin(3.0) < 0.0);
        assert!((arc.center() - (6.25f64).rem_euclid(TAU)).abs() < 1e-12);
    }
}
