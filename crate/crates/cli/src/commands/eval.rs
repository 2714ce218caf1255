//! `sqnt eval`: greedy-decode one task split under a model checkpoint and
//! write prediction records (answer, MaxProb confidence, features,
//! soft-accuracy target).

use crate::args::{ensure_parent_dir, file_name_of, guard_overwrite, merge_config, resolve_out};
use crate::commands::gen_task::load_task;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, TOOL_VERSION};
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::confidence::maxprob;
use sqnt_core::io::{load_model_checkpoint, write_records, RecordsHeader};
use sqnt_core::metrics::{soft_accuracy, PredictionRecord};
use sqnt_core::synth::render_answer;
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model checkpoint (.sqnt).
    #[arg(long)]
    pub model: PathBuf,
    /// Task directory produced by gen-task.
    #[arg(long)]
    pub task: PathBuf,
    /// Split to evaluate: train, dev, test, ood_a, or ood_b.
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Output records file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "eval")?;
    let (model, meta) = load_model_checkpoint(&args.model)?;
    let (task, task_hash) = load_task(&args.task)?;
    let samples = task
        .split(&args.split)
        .ok_or_else(|| {
            CliError::validation(format!(
                "unknown split '{}'; expected one of train/dev/test/ood_a/ood_b",
                args.split
            ))
        })?;
    let max_new = args.max_new.unwrap_or(4);

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    // The split is informational: all splits evaluated under one model and
    // task share a records hash, so report/mix accept them together.
    let manifest = RunManifest::new("eval")
        .ctx("model_hash", meta.manifest_hash.clone().unwrap_or_default())
        .ctx("task_hash", task_hash)
        .ctx("label", meta.label.clone())
        .ctx("max_new", max_new as u64)
        .note("split", args.split.clone())
        .note("model", file_name_of(&args.model))
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let generation = model.greedy_decode(&sample.input(), max_new)?;
        let answer = render_answer(&generation.answer_tokens);
        let confidence = maxprob(&generation)?;
        records.push(PredictionRecord {
            id: sample.id.clone(),
            confidence,
            soft_acc: soft_accuracy(&answer, &sample.refs)?,
            split: sample.split,
            source: sample.source,
            features: Some(generation.features),
            answer: Some(answer),
            refs: Some(sample.refs.clone()),
        });
    }

    let header = RecordsHeader {
        manifest_hash: hash,
        label: meta.label.clone(),
        tool_version: TOOL_VERSION.to_string(),
    };
    write_records(&out, Some(&header), &records)?;

    let acc = records.iter().map(|r| r.soft_acc).sum::<f64>() / records.len().max(1) as f64;
    println!(
        "eval[{}/{}]: {} records, mean soft accuracy {:.4} -> {}",
        meta.label,
        args.split,
        records.len(),
        acc,
        out.display()
    );
    Ok(())
}
