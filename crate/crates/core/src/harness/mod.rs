//! Config-driven experiment runner.
//!
//! Each subcommand reads one TOML configuration, writes its artifacts into
//! the output directory, and prints a one-line summary. Exit status is 0 on
//! success, 2 for usage or configuration errors, and 1 for failures while
//! running.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod sweep;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::Rng;
use serde::Serialize;

use crate::cfm::{pretrain, Reduction};
use crate::grpo::grpo_train;
use crate::offline::{curate_pairs, dpo_train, sft_finetune, top_quartile_dataset};
use crate::rewards::calibrate;
use crate::samplers::{csv_err, ode_sample, sde_sample, write_samples_csv, write_trajectory_csv, Schedule};
use crate::tasks::{sample_data, Task};
use crate::util::rng_from_seed;
use crate::{Error, Result};

use checkpoint::{load_checkpoint_for, save_checkpoint, Checkpoint, StageTag};
use config::{build_rewards, ExperimentConfig, SamplerKind, SftSource, Stage, SweepAxisKind};
use evaluate::evaluate;
use sweep::{sweep, write_sweep_csv, SweepAxis, SweepEval};

#[derive(Debug, Parser)]
#[command(name = "flowrl", version, about = "Flow-matching policies trained with group-relative policy optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference policy by conditional flow matching.
    Pretrain(RunArgs),
    /// Fine-tune a reference policy with online GRPO.
    Grpo(RunArgs),
    /// Curate preference pairs and fine-tune with flow-adapted DPO.
    Dpo(RunArgs),
    /// Supervised flow-matching fine-tuning.
    Sft(RunArgs),
    /// Draw samples (and optionally full trajectories) from a checkpoint.
    Sample(RunArgs),
    /// Score a checkpoint.
    Eval(RunArgs),
    /// Correlate model scores with reference scores from a CSV file.
    Calibrate(RunArgs),
    /// Sweep one GRPO hyperparameter.
    Sweep(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Serial reductions and zeroed wall-clock columns, for byte-identical output.
    #[arg(long)]
    pub deterministic: bool,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn split(&self) -> (Stage, &RunArgs) {
        match self {
            Command::Pretrain(a) => (Stage::Pretrain, a),
            Command::Grpo(a) => (Stage::Grpo, a),
            Command::Dpo(a) => (Stage::Dpo, a),
            Command::Sft(a) => (Stage::Sft, a),
            Command::Sample(a) => (Stage::Sample, a),
            Command::Eval(a) => (Stage::Eval, a),
            Command::Calibrate(a) => (Stage::Calibrate, a),
            Command::Sweep(a) => (Stage::Sweep, a),
        }
    }
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (stage, args) = cli.command.split();
    let config = match resolve_config(stage, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run_stage(stage, &config) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Loads the configuration, applies command-line overrides, and validates
/// it for `stage`.
pub fn resolve_config(stage: Stage, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.deterministic {
        config.deterministic = true;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate_for(stage)?;
    Ok(config)
}

/// Runs one validated stage and returns its summary line.
pub fn run_stage(stage: Stage, config: &ExperimentConfig) -> Result<String> {
    let out = config.out_dir.as_path();
    fs::create_dir_all(out)?;
    let fingerprint = config.fingerprint();
    fs::write(out.join("fingerprint.txt"), format!("{fingerprint}\n"))?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(config).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    let ctx = Context {
        config,
        out,
        fingerprint,
        reduction: Reduction::from_deterministic(config.deterministic),
    };
    match stage {
        Stage::Pretrain => ctx.pretrain(),
        Stage::Grpo => ctx.grpo(),
        Stage::Dpo => ctx.dpo(),
        Stage::Sft => ctx.sft(),
        Stage::Sample => ctx.sample(),
        Stage::Eval => ctx.eval(),
        Stage::Calibrate => ctx.calibrate(),
        Stage::Sweep => ctx.sweep(),
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    fingerprint: String,
    reduction: Reduction,
}

impl Context<'_> {
    fn task(&self) -> Result<Task> {
        self.config.task.build()
    }

    fn load_input(&self, task: &Task) -> Result<Checkpoint> {
        let path = self
            .config
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("checkpoint: required for this stage".into()))?;
        let checkpoint = load_checkpoint_for(path, &self.config.net.spec_for(task))?;
        Ok(checkpoint)
    }

    fn save(&self, checkpoint: Checkpoint) -> Result<PathBuf> {
        let path = self.out.join("checkpoint.json");
        save_checkpoint(&path, &checkpoint.with_fingerprint(self.fingerprint.clone()))?;
        Ok(path)
    }

    fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let path = self.out.join(name);
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
        for row in rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    /// Wall-clock columns are zeroed in deterministic mode so the CSV files
    /// are byte-identical across runs.
    fn wall(&self, ms: u64) -> u64 {
        if self.config.deterministic {
            0
        } else {
            ms
        }
    }

    /// Independent seeds for the sub-steps of one stage.
    fn seeds<const N: usize>(&self) -> [u64; N] {
        let mut rng = rng_from_seed(self.config.seed);
        std::array::from_fn(|_| rng.gen())
    }

    fn pretrain(&self) -> Result<String> {
        let task = self.task()?;
        let spec = self.config.net.spec_for(&task);
        let mut run = pretrain(&task, &spec, &self.config.pretrain, self.config.seed, self.reduction)?;
        run.losses.iter_mut().for_each(|r| r.wall_ms = self.wall(r.wall_ms));
        self.write_csv("metrics.csv", &run.losses)?;
        let path = self.save(run.checkpoint)?;
        let last = run.losses.last().map_or(f64::NAN, |r| r.loss);
        Ok(format!(
            "pretrain: {} steps, final loss {last:.5}, checkpoint {}",
            self.config.pretrain.steps,
            path.display()
        ))
    }

    fn grpo(&self) -> Result<String> {
        let task = self.task()?;
        let reference = self.load_input(&task)?;
        if reference.stage != StageTag::Reference {
            warn!("KL anchor checkpoint is tagged {:?}, not reference", reference.stage);
        }
        let (reward, _) = build_rewards(&task, &self.config.reward)?;
        let reward = reward.ok_or_else(|| Error::Config("task has no reward".into()))?;
        let mut run = grpo_train(
            &reference.params,
            &task,
            reward.as_ref(),
            &self.config.grpo,
            self.config.seed,
            self.reduction,
        )?;
        run.metrics.iter_mut().for_each(|m| m.wall_ms = self.wall(m.wall_ms));
        self.write_csv("metrics.csv", &run.metrics)?;
        let path = self.save(run.checkpoint)?;
        let last = run.metrics.last().map_or(f64::NAN, |m| m.mean_reward);
        Ok(format!(
            "grpo: {} steps, final rollout reward {last:.4}, checkpoint {}",
            self.config.grpo.steps,
            path.display()
        ))
    }

    fn dpo(&self) -> Result<String> {
        let task = self.task()?;
        let reference = self.load_input(&task)?;
        let (reward, _) = build_rewards(&task, &self.config.reward)?;
        let reward = reward.ok_or_else(|| Error::Config("task has no reward".into()))?;
        let cfg = &self.config.dpo;
        let [curate_seed, train_seed] = self.seeds();
        let pairs = curate_pairs(
            &reference.params,
            &task,
            reward.as_ref(),
            cfg.num_prompts,
            cfg.candidates_per_prompt,
            &Schedule::uniform(cfg.sampler_steps)?,
            curate_seed,
        )?;
        info!("curated {} preference pairs", pairs.len());
        self.write_json("pairs.json", &pairs)?;
        let run = dpo_train(&reference.params, &pairs, cfg, train_seed)?;
        self.write_csv("metrics.csv", &run.losses)?;
        let path = self.save(run.checkpoint)?;
        let last = run.losses.last().map_or(f64::NAN, |r| r.loss);
        Ok(format!(
            "dpo: {} pairs, {} steps, final loss {last:.5}, checkpoint {}",
            pairs.len(),
            cfg.steps,
            path.display()
        ))
    }

    fn sft(&self) -> Result<String> {
        let task = self.task()?;
        let reference = self.load_input(&task)?;
        let cfg = &self.config.sft;
        let [data_seed, train_seed] = self.seeds();
        let dataset = match cfg.source {
            SftSource::Task => {
                let mut rng = rng_from_seed(data_seed);
                let mut data = Vec::new();
                for c in 0..task.num_conditions() {
                    let points = sample_data(&task, c, cfg.samples_per_condition, rng.gen())?;
                    data.extend(points.into_iter().map(|x| (x, c)));
                }
                data
            }
            SftSource::TopQuartile => {
                let (reward, _) = build_rewards(&task, &self.config.reward)?;
                let reward = reward.ok_or_else(|| Error::Config("task has no reward".into()))?;
                top_quartile_dataset(
                    &reference.params,
                    &task,
                    reward.as_ref(),
                    cfg.samples_per_condition,
                    &Schedule::uniform(cfg.sampler_steps)?,
                    data_seed,
                )?
            }
        };
        write_samples_csv(BufWriter::new(File::create(self.out.join("sft_dataset.csv"))?), &dataset)?;
        let mut run = sft_finetune(&reference.params, &dataset, &cfg.cfm(), train_seed, self.reduction)?;
        run.losses.iter_mut().for_each(|r| r.wall_ms = self.wall(r.wall_ms));
        self.write_csv("metrics.csv", &run.losses)?;
        let path = self.save(run.checkpoint)?;
        Ok(format!(
            "sft: {} examples, {} steps, checkpoint {}",
            dataset.len(),
            cfg.steps,
            path.display()
        ))
    }

    fn sample(&self) -> Result<String> {
        let task = self.task()?;
        let policy = self.load_input(&task)?.params;
        let cfg = &self.config.sample;
        let schedule = Schedule::uniform(cfg.sampler_steps)?;
        let mut rng = rng_from_seed(self.config.seed);
        let traj_dir = self.out.join("trajectories");
        if cfg.export_trajectories > 0 {
            fs::create_dir_all(&traj_dir)?;
        }
        let mut samples = Vec::new();
        let mut summary = Vec::new();
        for c in 0..task.num_conditions() {
            let mut sums = vec![0.0; task.dim()];
            for k in 0..cfg.per_condition {
                let seed = rng.gen();
                let traj = match cfg.sampler {
                    SamplerKind::Ode => ode_sample(&policy, c, &schedule, seed)?,
                    SamplerKind::Sde => sde_sample(&policy, c, &schedule, cfg.noise_level, seed)?,
                };
                if k < cfg.export_trajectories {
                    let file = File::create(traj_dir.join(format!("condition{c}_{k}.csv")))?;
                    write_trajectory_csv(BufWriter::new(file), &traj)?;
                }
                sums.iter_mut().zip(&traj.final_sample).for_each(|(s, v)| *s += v);
                samples.push((traj.final_sample, c));
            }
            let mut row = vec![c.to_string(), cfg.per_condition.to_string()];
            row.extend(sums.iter().map(|s| (s / cfg.per_condition as f64).to_string()));
            summary.push(row);
        }
        write_samples_csv(BufWriter::new(File::create(self.out.join("samples.csv"))?), &samples)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(self.out.join("metrics.csv"))?));
        let mut header = vec!["condition".to_string(), "samples".into()];
        header.extend((0..task.dim()).map(|k| format!("mean_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for row in &summary {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(format!(
            "sample: {} samples over {} conditions written to {}",
            samples.len(),
            task.num_conditions(),
            self.out.join("samples.csv").display()
        ))
    }

    fn eval(&self) -> Result<String> {
        let task = self.task()?;
        let policy = self.load_input(&task)?.params;
        let (_, rewards) = build_rewards(&task, &self.config.reward)?;
        let refs: Vec<_> = rewards.iter().map(|r| r.as_ref()).collect();
        let cfg = &self.config.eval;
        let report = evaluate(
            &policy,
            &task,
            &refs,
            cfg.per_condition,
            &Schedule::uniform(cfg.sampler_steps)?,
            self.config.seed,
        )?;
        self.write_json("report.json", &report)?;

        #[derive(Serialize)]
        struct Row {
            condition: String,
            metric: String,
            value: f64,
        }
        let mut rows = Vec::new();
        for c in &report.conditions {
            for (name, v) in &c.reward_means {
                rows.push(Row {
                    condition: c.condition.to_string(),
                    metric: format!("reward_{name}"),
                    value: *v,
                });
            }
            if let Some(gap) = c.moment_gap {
                for (metric, value) in [("max_mean_error", gap.max_mean_error), ("max_cov_error", gap.max_cov_error)] {
                    rows.push(Row {
                        condition: c.condition.to_string(),
                        metric: metric.into(),
                        value,
                    });
                }
            }
        }
        let mut parts = Vec::new();
        for r in &refs {
            if let Some(v) = report.mean_reward(r.name()) {
                rows.push(Row {
                    condition: "all".into(),
                    metric: format!("reward_{}", r.name()),
                    value: v,
                });
                parts.push(format!("{} reward {v:.4}", r.name()));
            }
        }
        if let Some(gap) = report.worst_moment_gap() {
            parts.push(format!(
                "max mean error {:.4}, max cov error {:.4}",
                gap.max_mean_error, gap.max_cov_error
            ));
        }
        self.write_csv("metrics.csv", &rows)?;
        Ok(format!("eval: {}", parts.join(", ")))
    }

    fn calibrate(&self) -> Result<String> {
        let path = &self
            .config
            .calibrate
            .as_ref()
            .ok_or_else(|| Error::Config("calibrate.csv: required".into()))?
            .csv;
        let (model, reference) = read_score_pairs(path)?;
        let report = calibrate(&model, &reference)?;
        self.write_json("report.json", &report)?;

        #[derive(Serialize)]
        struct Row {
            metric: &'static str,
            value: f64,
        }
        self.write_csv(
            "metrics.csv",
            &[
                Row { metric: "lcc", value: report.lcc },
                Row { metric: "srcc", value: report.srcc },
                Row { metric: "ktau", value: report.ktau },
                Row { metric: "n", value: report.n as f64 },
            ],
        )?;
        Ok(format!(
            "calibrate: n={} lcc={:.4} srcc={:.4} ktau={:.4}",
            report.n, report.lcc, report.srcc, report.ktau
        ))
    }

    fn sweep(&self) -> Result<String> {
        let task = self.task()?;
        let reference = self.load_input(&task)?;
        let (reward, _) = build_rewards(&task, &self.config.reward)?;
        let reward = reward.ok_or_else(|| Error::Config("task has no reward".into()))?;
        let spec = self
            .config
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("sweep: section required".into()))?;
        let axis = match spec.axis {
            SweepAxisKind::NoiseLevel => SweepAxis::NoiseLevel(spec.values.clone()),
            SweepAxisKind::GroupSize => SweepAxis::GroupSize(spec.values.iter().map(|v| *v as usize).collect()),
        };
        let [eval_seed] = self.seeds();
        let eval = SweepEval {
            per_condition: self.config.eval.per_condition,
            schedule: Schedule::uniform(self.config.eval.sampler_steps)?,
            seed: eval_seed,
        };
        let rows = sweep(
            &reference.params,
            &task,
            reward.as_ref(),
            &self.config.grpo,
            &axis,
            &eval,
            self.config.seed,
            self.reduction,
        )?;
        let path = self.out.join("sweep.csv");
        write_sweep_csv(BufWriter::new(File::create(&path)?), &rows)?;
        let failed = rows.iter().filter(|r| r.status != "ok").count();
        Ok(format!(
            "sweep: {} points on {}, {failed} failed, results in {}",
            rows.len(),
            axis.name(),
            path.display()
        ))
    }
}

/// Reads a two-column CSV of `model_score,reference_score` with a header row.
pub fn read_score_pairs(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let (mut model, mut reference) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(Error::Parse(format!(
                "{} row {}: expected 2 columns, found {}",
                path.display(),
                i + 2,
                record.len()
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Parse(format!("{} row {}: {s:?} is not a number", path.display(), i + 2))
            })
        };
        model.push(parse(&record[0])?);
        reference.push(parse(&record[1])?);
    }
    Ok((model, reference))
}
