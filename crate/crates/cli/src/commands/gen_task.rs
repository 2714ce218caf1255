//! `sqnt gen-task`: generate the synthetic dataset, splits, and the
//! calibration batch.

use crate::args::{guard_overwrite, merge_config, resolve_out};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::io::{write_calib, write_jsonl};
use sqnt_core::synth::{generate_task, Task, TaskConfig};
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct GenTaskArgs {
    /// TOML config file; flags win over file values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub n_vision: Option<usize>,
    #[arg(long)]
    pub n_question: Option<usize>,
    /// Calibration sequences taken from the train split.
    #[arg(long)]
    pub calib_size: Option<usize>,
    /// Output directory for the task files.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing task files.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

pub fn run(args: GenTaskArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "gen-task")?;
    let defaults = TaskConfig::default();
    let cfg = TaskConfig {
        seed: args.seed.unwrap_or(defaults.seed),
        n_samples: args.n_samples.unwrap_or(defaults.n_samples),
        noise_rate: args.noise_rate.unwrap_or(defaults.noise_rate),
        vocab_size: args.vocab_size.unwrap_or(defaults.vocab_size),
        n_vision: args.n_vision.unwrap_or(defaults.n_vision),
        n_question: args.n_question.unwrap_or(defaults.n_question),
    };
    let calib_size = args.calib_size.unwrap_or(128);

    let out_dir = resolve_out(&args.out);
    std::fs::create_dir_all(&out_dir)?;
    let task_json = out_dir.join("task.json");
    guard_overwrite(&task_json, args.force)?;

    let manifest = RunManifest::new("gen-task")
        .ctx("seed", cfg.seed)
        .ctx("n_samples", cfg.n_samples as u64)
        .ctx("noise_rate", cfg.noise_rate)
        .ctx("vocab_size", cfg.vocab_size as u64)
        .ctx("n_vision", cfg.n_vision as u64)
        .ctx("n_question", cfg.n_question as u64)
        .ctx("calib_size", calib_size as u64);
    let hash = manifest.hash();
    manifest.write(&out_dir.join("manifest.json"))?;

    let task = generate_task(&cfg).map_err(CliError::from)?;
    let task_meta = serde_json::json!({
        "manifest_hash": hash,
        "config": cfg,
        "splits": {
            "train": task.train.len(),
            "dev": task.dev.len(),
            "test": task.test.len(),
            "ood_a": task.ood_a.len(),
            "ood_b": task.ood_b.len(),
        },
    });
    std::fs::write(&task_json, serde_json::to_string_pretty(&task_meta)? + "\n")?;
    for name in Task::SPLIT_NAMES {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), task.split(name).unwrap())?;
    }
    let calib = task.calibration_batch(calib_size)?;
    write_calib(&out_dir.join("calib.jsonl"), &calib)?;

    println!(
        "gen-task: wrote {} samples ({} train / {} dev / {} test, {} ood each) and {} calibration sequences to {}",
        cfg.n_samples,
        task.train.len(),
        task.dev.len(),
        task.test.len(),
        task.ood_a.len(),
        calib.size(),
        out_dir.display()
    );
    Ok(())
}

/// Loads a generated task directory back into memory.
pub fn load_task(dir: &std::path::Path) -> CliResult<(Task, String)> {
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("task.json")).map_err(|e| {
            CliError::validation(format!("{}: {e} (run gen-task first?)", dir.display()))
        })?)?;
    let hash = meta["manifest_hash"]
        .as_str()
        .ok_or_else(|| CliError::validation("task.json: missing manifest_hash"))?
        .to_string();
    let config: TaskConfig = serde_json::from_value(meta["config"].clone())?;
    let mut task = Task {
        config,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        ood_a: Vec::new(),
        ood_b: Vec::new(),
    };
    for name in Task::SPLIT_NAMES {
        let samples = sqnt_core::io::read_jsonl(&dir.join(format!("{name}.jsonl")))?;
        match name {
            "train" => task.train = samples,
            "dev" => task.dev = samples,
            "test" => task.test = samples,
            "ood_a" => task.ood_a = samples,
            "ood_b" => task.ood_b = samples,
            _ => unreachable!(),
        }
    }
    Ok((task, hash))
}
