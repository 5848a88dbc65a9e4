//! Experiment orchestration: owns the output directory, the line-delimited
//! metrics stream, checkpoints, and the run manifest.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::harness::config::RunConfig;
use crate::metrics::{annotate, eval_accuracy, mean_rationale_length, Decode};
use crate::tasks::{all_instances, sample_instance};
use crate::trainer::{derived_rng, Trainer, TrainingReport};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "ITRO_LAB_OUTPUT_DIR";

pub fn resolve_output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var(OUTPUT_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output_dir),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    format_version: u32,
    code_version: &'static str,
    seed: u64,
    config: &'a RunConfig,
}

/// Execute a training run: manifest, per-step metrics lines (flushed one at a
/// time so interrupted files stay parseable), periodic and final checkpoints.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<TrainingReport> {
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest {
        format_version: 1,
        code_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
    };
    fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    let settings = cfg.settings()?;
    let task = settings.task.clone();
    let arch = settings.arch;
    let window = settings.window;
    let eval_every = settings.eval_every;
    let mut trainer = Trainer::new(settings)?;
    let mut metrics = File::create(out_dir.join("metrics.jsonl"))?;

    while trainer.current_step() < cfg.steps {
        let record = trainer.step()?;
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        metrics.write_all(line.as_bytes())?;
        metrics.flush()?;
        if record.step % eval_every == 0 {
            let path = out_dir.join(format!("checkpoint_{}.txt", record.step));
            save_checkpoint(&trainer.policy, &task, arch, window, &path)?;
        }
    }
    save_checkpoint(
        &trainer.policy,
        &task,
        arch,
        window,
        &out_dir.join("checkpoint_final.txt"),
    )?;
    Ok(TrainingReport {
        steps_run: trainer.current_step(),
        skipped_steps: trainer.skipped_steps(),
        final_accuracy: trainer.greedy_accuracy()?,
    })
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_length: f64,
    pub n_instances: usize,
    pub decode_mode: String,
}

/// Evaluate a checkpoint under both greedy and sampled decoding; one summary
/// record per mode.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Vec<EvalSummary>> {
    let Checkpoint { policy, task, .. } = load_checkpoint(checkpoint_path, None)?;
    let vocab = task.vocab();
    let instances = all_instances(&task);
    let mut rng = derived_rng(cfg.seed, 0xe7a1, 0);

    let greedy = eval_accuracy(
        &policy, &instances, &vocab, Decode::Greedy, task.t_max, &mut rng,
    )?;
    let sampled = eval_accuracy(
        &policy,
        &instances,
        &vocab,
        Decode::Sample {
            temperature: cfg.eval_temperature,
            k: cfg.eval_k,
        },
        task.t_max,
        &mut rng,
    )?;
    let mean_length = mean_rationale_length(
        &policy,
        &instances,
        &vocab,
        cfg.eval_k,
        cfg.eval_temperature,
        task.t_max,
        &mut rng,
    )?;
    Ok(vec![
        EvalSummary {
            accuracy: greedy,
            mean_length,
            n_instances: instances.len(),
            decode_mode: "greedy".into(),
        },
        EvalSummary {
            accuracy: sampled,
            mean_length,
            n_instances: instances.len(),
            decode_mode: format!("sample(t={},k={})", cfg.eval_temperature, cfg.eval_k),
        },
    ])
}

#[derive(Debug, Serialize)]
pub struct InspectHeader {
    pub x: Vec<usize>,
    pub y: usize,
    pub rationale: Vec<usize>,
    pub query_seed: u64,
}

/// Annotate the greedy rationale of a seeded query; returns the header line
/// and one line per token annotation, already serialized.
pub fn run_inspect(cfg: &RunConfig, checkpoint_path: &Path, query_seed: u64) -> Result<Vec<String>> {
    let Checkpoint { policy, task, .. } = load_checkpoint(checkpoint_path, None)?;
    let vocab = task.vocab();
    let mut rng = derived_rng(query_seed, 0, 0);
    let instance = sample_instance(&task, &mut rng);
    let z = policy.greedy_sequence(
        &crate::policy::Context::query(&instance.x),
        task.t_max,
        vocab.eos(),
    )?;
    let annotations = annotate(&policy, &instance, &vocab, &z, cfg.itro_clip_max)?;
    let mut lines = vec![serde_json::to_string(&InspectHeader {
        x: instance.x.clone(),
        y: instance.y,
        rationale: z.clone(),
        query_seed,
    })?];
    for a in &annotations {
        lines.push(serde_json::to_string(a)?);
    }
    Ok(lines)
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub n: usize,
    pub final_accuracy: f64,
    pub skipped_steps: usize,
}

/// Train once per grid value of the candidate count n, everything else fixed.
pub fn run_sweep(cfg: &RunConfig, grid: &[usize], out_dir: &Path) -> Result<Vec<SweepPoint>> {
    fs::create_dir_all(out_dir)?;
    let mut points = Vec::with_capacity(grid.len());
    let mut summary = File::create(out_dir.join("sweep_summary.jsonl"))?;
    for &n in grid {
        let mut point_cfg = cfg.clone();
        point_cfg.itro_n = n;
        let sub = out_dir.join(format!("n_{n}"));
        let report = run_training(&point_cfg, &sub)?;
        let point = SweepPoint {
            n,
            final_accuracy: report.final_accuracy,
            skipped_steps: report.skipped_steps,
        };
        let mut line = serde_json::to_string(&point)?;
        line.push('\n');
        summary.write_all(line.as_bytes())?;
        summary.flush()?;
        points.push(point);
    }
    Ok(points)
}
