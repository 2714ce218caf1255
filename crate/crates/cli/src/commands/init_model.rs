//! `sqnt init-model`: build the seeded decoder, fit it to a task's train
//! split, and write the full-precision checkpoint the quantize/eval
//! commands consume.

use crate::args::{ensure_parent_dir, file_name_of, guard_overwrite, merge_config, resolve_out};
use crate::commands::gen_task::load_task;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::io::{model_to_fp32_tensors, save_model_checkpoint, ModelMeta};
use sqnt_core::model::{init_model, train_model, Model, ModelConfig, TrainOptions};
use sqnt_core::synth::{rule_answer, training_item, TaskSample};
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct InitModelArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Task directory produced by gen-task.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Defaults to prompt length + 8.
    #[arg(long)]
    pub max_seq: Option<usize>,
    #[arg(long)]
    pub train_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Output checkpoint path (.sqnt).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

/// Fraction of probe samples whose greedy first token matches the rule.
pub fn rule_accuracy(model: &Model, samples: &[TaskSample], limit: usize) -> CliResult<f64> {
    let n = samples.len().min(limit).max(1);
    let mut hit = 0usize;
    for s in samples.iter().take(n) {
        let gen = model.greedy_decode(&s.input(), 2)?;
        let expected = rule_answer(&s.vision, &s.question)?;
        if gen.answer_tokens.first() == Some(&expected) {
            hit += 1;
        }
    }
    Ok(hit as f64 / n as f64)
}

pub fn run(args: InitModelArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "init-model")?;
    let (task, task_hash) = load_task(&args.task)?;
    let prompt_len = task.config.prompt_len();

    let cfg = ModelConfig {
        d_model: args.d_model.unwrap_or(64),
        n_layers: args.n_layers.unwrap_or(2),
        n_heads: args.n_heads.unwrap_or(4),
        vocab_size: task.config.vocab_size,
        max_seq: args.max_seq.unwrap_or(prompt_len + 8),
        seed: args.seed.unwrap_or(0),
    };
    let default_opts = TrainOptions::default();
    let opts = TrainOptions {
        steps: args.train_steps.unwrap_or(default_opts.steps),
        batch_size: args.batch_size.unwrap_or(default_opts.batch_size),
        learning_rate: args.learning_rate.unwrap_or(default_opts.learning_rate),
        seed: cfg.seed,
    };
    if cfg.max_seq < prompt_len + 2 {
        return Err(CliError::validation(format!(
            "max_seq {} cannot fit the prompt ({prompt_len}) plus the answer span",
            cfg.max_seq
        )));
    }

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let manifest = RunManifest::new("init-model")
        .ctx("task_hash", task_hash)
        .ctx("seed", cfg.seed)
        .ctx("d_model", cfg.d_model as u64)
        .ctx("n_layers", cfg.n_layers as u64)
        .ctx("n_heads", cfg.n_heads as u64)
        .ctx("max_seq", cfg.max_seq as u64)
        .ctx("train_steps", opts.steps as u64)
        .ctx("batch_size", opts.batch_size as u64)
        .ctx("learning_rate", opts.learning_rate)
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    let manifest_path = out.with_extension("manifest.json");
    manifest.write(&manifest_path)?;

    let mut model = init_model(&cfg)?;
    let items: Vec<_> = task.train.iter().map(training_item).collect();
    let stats = train_model(&mut model, &items, &opts)?;
    let train_acc = rule_accuracy(&model, &task.train, 256)?;
    let dev_acc = rule_accuracy(&model, &task.dev, 256)?;

    let meta = ModelMeta {
        config: cfg,
        label: "bf16".to_string(),
        manifest_hash: Some(hash),
    };
    save_model_checkpoint(&out, &model_to_fp32_tensors(&model), &meta)?;

    println!(
        "init-model: trained {} steps (final loss {:.4}); rule accuracy train {:.3} dev {:.3}; wrote {}",
        stats.steps,
        stats.final_loss,
        train_acc,
        dev_acc,
        out.display()
    );
    Ok(())
}
