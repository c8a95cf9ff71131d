//! Terminal rewards.
//!
//! The main reward asks a binary question of a scorer and normalizes the
//! affirmative answer: `R = exp(s_yes) / (exp(s_yes) + exp(s_no))`. Any
//! judge that exposes two log-scores plugs in through [`BinaryScorer`]; the
//! ring task ships a geometric one, [`RegionScorer`]. A cosine-similarity
//! reward in a shared embedding space serves as the contrastive baseline.

mod correlation;

pub use correlation::{calibrate, kendall_tau_b, pearson, spearman, CalibrationReport};

use crate::tasks::RingTask;
use crate::{Error, Result};

/// Log-scores of an affirmative and a negative answer for `(sample, c)`.
pub trait BinaryScorer: Sync {
    fn scores(&self, sample: &[f64], c: usize) -> Result<(f64, f64)>;
}

/// Maps a terminal sample and its condition to a scalar.
pub trait RewardFn: Sync {
    fn name(&self) -> &str;
    fn reward(&self, sample: &[f64], c: usize) -> Result<f64>;
}

/// Numerically stable logistic function.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax of the scorer's answers, i.e. `logistic(s_yes - s_no)`.
pub fn qa_reward<S: BinaryScorer + ?Sized>(scorer: &S, sample: &[f64], c: usize) -> Result<f64> {
    let (yes, no) = scorer.scores(sample, c)?;
    if !yes.is_finite() || !no.is_finite() {
        return Err(Error::Scorer(format!(
            "scorer returned non-finite scores (yes={yes}, no={no})"
        )));
    }
    Ok(logistic(yes - no))
}

/// [`qa_reward`] packaged as a [`RewardFn`].
#[derive(Debug, Clone)]
pub struct QaReward<S> {
    pub scorer: S,
}

impl<S: BinaryScorer> RewardFn for QaReward<S> {
    fn name(&self) -> &str {
        "qa"
    }

    fn reward(&self, sample: &[f64], c: usize) -> Result<f64> {
        qa_reward(&self.scorer, sample, c)
    }
}

/// Answers "is the sample inside the condition's region?" with
/// `s_yes - s_no = steepness · margin`.
#[derive(Debug, Clone)]
pub struct RegionScorer {
    task: RingTask,
    steepness: f64,
}

/// Builds a [`RegionScorer`] for a ring task.
pub fn region_scorer(task: &RingTask, steepness: f64) -> Result<RegionScorer> {
    if !(steepness > 0.0 && steepness.is_finite()) {
        return Err(Error::Config(format!("steepness must be > 0, got {steepness}")));
    }
    task.validate()?;
    Ok(RegionScorer {
        task: task.clone(),
        steepness,
    })
}

impl BinaryScorer for RegionScorer {
    fn scores(&self, sample: &[f64], c: usize) -> Result<(f64, f64)> {
        let margin = self.task.region_margin(sample, c)?;
        Ok((self.steepness * margin, 0.0))
    }
}

/// `(1 + cos(a, b)) / 2`.
pub fn similarity_reward(sample_embedding: &[f64], condition_embedding: &[f64]) -> Result<f64> {
    if sample_embedding.len() != condition_embedding.len() {
        return Err(Error::Input("embedding dimensions differ".into()));
    }
    let na = sample_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = condition_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Input("zero-norm embedding".into()));
    }
    let dot: f64 = sample_embedding
        .iter()
        .zip(condition_embedding)
        .map(|(a, b)| a * b)
        .sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(0.5 * (1.0 + cos))
}

/// Shared embedding space for samples and conditions.
pub trait Embedding: Sync {
    fn embed_sample(&self, sample: &[f64]) -> Result<Vec<f64>>;
    fn embed_condition(&self, c: usize) -> Result<Vec<f64>>;
}

/// Samples project onto the unit circle; a condition embeds as the unit
/// vector at its arc's center angle.
#[derive(Debug, Clone)]
pub struct RingEmbedding {
    pub task: RingTask,
}

impl Embedding for RingEmbedding {
    fn embed_sample(&self, sample: &[f64]) -> Result<Vec<f64>> {
        if sample.len() != 2 {
            return Err(Error::Input(format!("ring samples are 2-D, got {}", sample.len())));
        }
        let r = sample[0].hypot(sample[1]);
        if !(r > 0.0) {
            return Err(Error::Input("zero-norm embedding".into()));
        }
        Ok(vec![sample[0] / r, sample[1] / r])
    }

    fn embed_condition(&self, c: usize) -> Result<Vec<f64>> {
        let angle = self.task.arc(c)?.center();
        Ok(vec![angle.cos(), angle.sin()])
    }
}

/// [`similarity_reward`] over an [`Embedding`].
#[derive(Debug, Clone)]
pub struct SimilarityReward<E> {
    pub embedding: E,
}

impl<E: Embedding> RewardFn for SimilarityReward<E> {
    fn name(&self) -> &str {
        "similarity"
    }

    fn reward(&self, sample: &[f64], c: usize) -> Result<f64> {
        similarity_reward(
            &self.embedding.embed_sample(sample)?,
            &self.embedding.embed_condition(c)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::AngularInterval;
    use proptest::prelude::*;

    struct Fixed(f64, f64);

    impl BinaryScorer for Fixed {
        fn scores(&self, _: &[f64], _: usize) -> Result<(f64, f64)> {
            Ok((self.0, self.1))
        }
    }

    #[test]
    fn qa_identities() {
        assert_eq!(qa_reward(&Fixed(0.3, 0.3), &[], 0).unwrap(), 0.5);
        let r = qa_reward(&Fixed(3f64.ln(), 0.0), &[], 0).unwrap();
        assert!((r - 0.75).abs() < 1e-15);
        let r = qa_reward(&Fixed(1000.0, 0.0), &[], 0).unwrap();
        assert_eq!(r, 1.0);
        let r = qa_reward(&Fixed(0.0, 1000.0), &[], 0).unwrap();
        assert!(r >= 0.0 && r < 1e-300);
        assert!(matches!(qa_reward(&Fixed(f64::NAN, 0.0), &[], 0), Err(Error::Scorer(_))));
    }

    proptest! {
        #[test]
        fn qa_shift_invariant_and_monotone(yes in -30.0..30.0f64, no in -30.0..30.0f64,
                                            shift in -100.0..100.0f64, bump in 0.01..5.0f64) {
            let base = qa_reward(&Fixed(yes, no), &[], 0).unwrap();
            let shifted = qa_reward(&Fixed(yes + shift, no + shift), &[], 0).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
            let higher = qa_reward(&Fixed(yes + bump, no), &[], 0).unwrap();
            prop_assert!(higher >= base);
            // Strict unless the logistic has already rounded to 1.
            if base < 1.0 - 1e-9 {
                prop_assert!(higher > base);
            }
        }
    }

    #[test]
    fn region_scorer_limits() {
        let ring = RingTask::default_ring();
        let center = ring.mode_center(2);
        let antipode = ring.mode_center(6);
        let mut last = 0.0;
        for steepness in [1.0, 10.0, 100.0] {
            let scorer = region_scorer(&ring, steepness).unwrap();
            let inside = qa_reward(&scorer, &center, 1).unwrap();
            assert!(inside > last);
            last = inside;
            let outside = qa_reward(&scorer, &antipode, 1).unwrap();
            assert!(outside < 0.5);
        }
        assert!(last > 1.0 - 1e-12);
        let scorer = region_scorer(&ring, 100.0).unwrap();
        assert!(qa_reward(&scorer, &antipode, 1).unwrap() < 1e-12);
    }

    #[test]
    fn region_boundary_scores_half() {
        let ring = RingTask::default_ring();
        let scorer = region_scorer(&ring, 25.0).unwrap();
        // Radial boundary at the center angle of arc 0.
        let angle = ring.arcs[0].center();
        let r = ring.radius + ring.radial_tolerance();
        let x = [r * angle.cos(), r * angle.sin()];
        assert!((qa_reward(&scorer, &x, 0).unwrap() - 0.5).abs() < 1e-12);
        // Angular boundary on the circle.
        let edge = ring.arcs[0].start;
        let x = [ring.radius * edge.cos(), ring.radius * edge.sin()];
        assert!((qa_reward(&scorer, &x, 0).unwrap() - 0.5).abs() < 1e-9);
        assert!(matches!(scorer.scores(&x, 9), Err(Error::Input(_))));
        assert!(region_scorer(&ring, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn region_reward_is_rotation_equivariant(angle in 0.0..6.28f64, rot in 0.0..6.28f64,
                                                  r in 0.5..3.5f64) {
            let ring = RingTask::default_ring();
            let mut rotated = ring.clone();
            rotated.arcs = ring.arcs.iter().map(|a| AngularInterval {
                start: (a.start + rot).rem_euclid(std::f64::consts::TAU),
                width: a.width,
            }).collect();
            let s1 = region_scorer(&ring, 8.0).unwrap();
            let s2 = region_scorer(&rotated, 8.0).unwrap();
            let x = [r * angle.cos(), r * angle.sin()];
            let y = [r * (angle + rot).cos(), r * (angle + rot).sin()];
            let a = qa_reward(&s1, &x, 1).unwrap();
            let b = qa_reward(&s2, &y, 1).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn region_reflection_about_arc_center() {
        let ring = RingTask::default_ring();
        let scorer = region_scorer(&ring, 8.0).unwrap();
        let center = ring.arcs[3].center();
        for (off, r) in [(0.2, 1.9), (0.5, 2.2), (1.3, 2.0)] {
            let a = [r * (center + off).cos(), r * (center + off).sin()];
            let b = [r * (center - off).cos(), r * (center - off).sin()];
            let ra = qa_reward(&scorer, &a, 3).unwrap();
            let rb = qa_reward(&scorer, &b, 3).unwrap();
            assert!((ra - rb).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_identities() {
        assert!((similarity_reward(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-15);
        assert!((similarity_reward(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(similarity_reward(&[1.0, 0.0], &[-1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!(matches!(similarity_reward(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn ring_similarity_reward() {
        let ring = RingTask::default_ring();
        let reward = SimilarityReward {
            embedding: RingEmbedding { task: ring.clone() },
        };
        let c = 2;
        let angle = ring.arcs[c].center();
        let x = [3.0 * angle.cos(), 3.0 * angle.sin()];
        assert!((reward.reward(&x, c).unwrap() - 1.0).abs() < 1e-12);
        assert!(reward.reward(&[-x[0], -x[1]], c).unwrap() < 1e-12);
        assert!(reward.reward(&[0.0, 0.0], c).is_err());
    }
}
