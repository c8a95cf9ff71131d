//! End-to-end training behaviour on the synthetic tasks.

use std::sync::OnceLock;

use flowrl::cfm::{pretrain, CfmConfig, Reduction};
use flowrl::diffnet::{NetSpec, ParamVector};
use flowrl::grpo::{grpo_train, GrpoConfig};
use flowrl::harness::evaluate::evaluate;
use flowrl::harness::sweep::{sweep, SweepAxis, SweepEval};
use flowrl::offline::{sft_finetune, top_quartile_dataset};
use flowrl::rewards::{region_scorer, QaReward, RegionScorer};
use flowrl::samplers::Schedule;
use flowrl::tasks::{sample_data, GaussianTask, RingTask, Task};
use flowrl::VelocityField;

fn ring() -> RingTask {
    RingTask::default_ring()
}

fn reward() -> QaReward<RegionScorer> {
    QaReward {
        scorer: region_scorer(&ring(), 10.0).unwrap(),
    }
}

fn ring_reference(seed: u64) -> ParamVector {
    let config = CfmConfig {
        steps: 3000,
        batch_size: 256,
        lr: 1e-3,
        log_every: 500,
    };
    pretrain(&Task::Ring(ring()), &NetSpec::new(2, vec![64, 64], 4), &config, seed, Reduction::Serial)
        .unwrap()
        .checkpoint
        .params
}

fn shared_reference() -> &'static ParamVector {
    static REFERENCE: OnceLock<ParamVector> = OnceLock::new();
    REFERENCE.get_or_init(|| ring_reference(1))
}

fn qa_score(params: &ParamVector) -> f64 {
    evaluate(params, &Task::Ring(ring()), &[&reward()], 500, &Schedule::uniform(25).unwrap(), 77)
        .unwrap()
        .mean_reward("qa")
        .unwrap()
}

/// Mean squared velocity difference over a probe grid of states.
fn probe_mse(a: &dyn VelocityField, b: &dyn VelocityField, extent: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for c in 0..a.num_conditions() {
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            for i in 0..7 {
                for j in 0..7 {
                    let x = [extent * (i as f64 / 3.0 - 1.0), extent * (j as f64 / 3.0 - 1.0)];
                    let (va, vb) = (a.velocity(&x, t, c).unwrap(), b.velocity(&x, t, c).unwrap());
                    total += va.iter().zip(&vb).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                    n += 1.0;
                }
            }
        }
    }
    total / n
}

#[test]
fn pretraining_loss_trends_down() {
    let config = CfmConfig {
        steps: 5000,
        batch_size: 64,
        lr: 1e-3,
        log_every: 1,
    };
    let task = Task::Gaussian(GaussianTask::four_blobs());
    let run = pretrain(&task, &NetSpec::new(2, vec![32, 32], 4), &config, 3, Reduction::Serial).unwrap();
    let window = |end: usize| run.losses[end - 50..end].iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!(window(5000) < window(100), "{} vs {}", window(5000), window(100));
}

#[test]
fn grpo_gains_within_two_hundred_steps() {
    let reference = shared_reference();
    let config = GrpoConfig {
        steps: 200,
        lr: 1e-3,
        ..GrpoConfig::default()
    };
    let run = grpo_train(reference, &Task::Ring(ring()), &reward(), &config, 4, Reduction::Serial).unwrap();
    let (pt, grpo) = (qa_score(reference), qa_score(&run.checkpoint.params));
    assert!(grpo - pt >= 0.15, "PT {pt} GRPO {grpo}");
}

#[test]
fn strong_kl_anchor_keeps_policy_near_reference() {
    let reference = shared_reference();
    let task = Task::Ring(ring());
    let drift = |kl_coeff: f64| {
        let config = GrpoConfig {
            steps: 60,
            lr: 1e-3,
            kl_coeff,
            ..GrpoConfig::default()
        };
        let run = grpo_train(reference, &task, &reward(), &config, 9, Reduction::Serial).unwrap();
        probe_mse(&run.checkpoint.params, reference, 2.5)
    };
    let (anchored, loose) = (drift(10.0), drift(0.04));
    assert!(anchored < loose, "beta=10 drift {anchored} vs beta=0.04 drift {loose}");
}

#[test]
fn sft_on_fresh_task_draws_keeps_the_oracle_fit() {
    let g = GaussianTask::four_blobs();
    let task = Task::Gaussian(g.clone());
    let spec = NetSpec::new(2, vec![64, 64], 4);
    let config = CfmConfig {
        steps: 6000,
        batch_size: 256,
        lr: 1e-3,
        log_every: 1000,
    };
    let reference = pretrain(&task, &spec, &config, 2, Reduction::Serial).unwrap().checkpoint.params;
    let dataset: Vec<_> = (0..4)
        .flat_map(|c| sample_data(&task, c, 5000, 100 + c as u64).unwrap().into_iter().map(move |x| (x, c)))
        .collect();
    let sft_config = CfmConfig {
        steps: 2000,
        lr: 5e-4,
        ..config
    };
    let tuned = sft_finetune(&reference, &dataset, &sft_config, 5, Reduction::Serial)
        .unwrap()
        .checkpoint
        .params;
    let oracle = flowrl::tasks::OracleField(&g);
    let (before, after) = (probe_mse(&reference, &oracle, 3.0), probe_mse(&tuned, &oracle, 3.0));
    assert!(after <= 1.5 * before, "oracle MSE {before} -> {after}");
}

#[test]
fn sft_on_top_quartile_rollouts_raises_reward() {
    let reference = shared_reference();
    let dataset =
        top_quartile_dataset(reference, &Task::Ring(ring()), &reward(), 512, &Schedule::uniform(25).unwrap(), 13)
            .unwrap();
    assert_eq!(dataset.len(), 4 * 128);
    let config = CfmConfig {
        steps: 2000,
        batch_size: 128,
        lr: 5e-4,
        log_every: 500,
    };
    let tuned = sft_finetune(reference, &dataset, &config, 14, Reduction::Serial).unwrap().checkpoint.params;
    let (pt, sft) = (qa_score(reference), qa_score(&tuned));
    assert!(sft > pt, "PT {pt} SFT {sft}");
}

#[test]
fn noise_sweep_records_zero_noise_failure() {
    let reference = shared_reference();
    let task = Task::Ring(ring());
    let base = GrpoConfig {
        steps: 30,
        lr: 1e-3,
        ..GrpoConfig::default()
    };
    let eval = SweepEval {
        per_condition: 200,
        schedule: Schedule::uniform(25).unwrap(),
        seed: 3,
    };
    let rows = sweep(reference, &task, &reward(), &base, &SweepAxis::NoiseLevel(vec![0.0, 0.3, 0.7]), &eval, 8, Reduction::Serial)
        .unwrap();
    let pt = evaluate(reference, &task, &[&reward()], 200, &eval.schedule, 3).unwrap().mean_reward("qa").unwrap();
    assert!(rows[0].status.starts_with("failed"));
    assert_eq!(rows[0].final_mean_reward, pt);
    assert!(rows[1..].iter().all(|r| r.status == "ok" && r.final_mean_reward > pt), "{rows:?}");
}

#[test]
fn larger_groups_win_the_group_size_sweep() {
    let task = Task::Ring(ring());
    let base = GrpoConfig {
        steps: 40,
        lr: 1e-3,
        ..GrpoConfig::default()
    };
    let eval = SweepEval {
        per_condition: 300,
        schedule: Schedule::uniform(25).unwrap(),
        seed: 5,
    };
    let mut wins = 0;
    let mut seen = Vec::new();
    for seed in 1..=3u64 {
        let reference = if seed == 1 { shared_reference().clone() } else { ring_reference(seed) };
        let rows =
            sweep(&reference, &task, &reward(), &base, &SweepAxis::GroupSize(vec![4, 24]), &eval, seed, Reduction::Serial)
                .unwrap();
        if rows[1].final_mean_reward >= rows[0].final_mean_reward {
            wins += 1;
        }
        seen.push((rows[0].final_mean_reward, rows[1].final_mean_reward));
    }
    assert!(wins >= 2, "G=4 vs G=24 final rewards: {seen:?}");
}
