//! `sqnt train-selector`: fit the two-layer confidence estimator on a
//! deterministic fraction of a records file.

use crate::args::{ensure_parent_dir, file_name_of, guard_overwrite, merge_config, resolve_out};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::confidence::{selector_train_report, SelectorTrainConfig};
use sqnt_core::io::{read_records, write_selector};
use sqnt_core::metrics::PredictionRecord;
use sqnt_core::rng::Rng;
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct TrainSelectorArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Records file with features (from eval).
    #[arg(long)]
    pub records: PathBuf,
    /// Fraction of the records used for training (seeded shuffle, prefix).
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output selector file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

/// Deterministic training subset: order by id, shuffle by seed, take the
/// first `ceil(fraction * n)`.
pub fn training_fraction(
    records: &[PredictionRecord],
    fraction: f64,
    seed: u64,
) -> Vec<PredictionRecord> {
    let mut refs: Vec<&PredictionRecord> = records.iter().collect();
    refs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut refs);
    let n = ((fraction * records.len() as f64).ceil() as usize).min(records.len());
    refs.into_iter().take(n).cloned().collect()
}

pub fn run(args: TrainSelectorArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "train-selector")?;
    let fraction = args.fraction.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::validation("fraction must lie in [0, 1]"));
    }
    let defaults = SelectorTrainConfig::default();
    let cfg = SelectorTrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        seed: args.seed.unwrap_or(defaults.seed),
        hidden: args.hidden.unwrap_or(defaults.hidden),
        weight_decay: args.weight_decay.unwrap_or(defaults.weight_decay),
    };

    let (header, records) = read_records(&args.records)?;
    let records_hash = header.as_ref().map(|h| h.manifest_hash.clone());
    let train_records = training_fraction(&records, fraction, cfg.seed);
    if train_records.len() < 2 {
        return Err(CliError::validation(format!(
            "training fraction selects {} records; need at least 2",
            train_records.len()
        )));
    }

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let manifest = RunManifest::new("train-selector")
        .ctx("records_hash", records_hash.unwrap_or_default())
        .ctx("fraction", fraction)
        .ctx("epochs", cfg.epochs as u64)
        .ctx("learning_rate", cfg.learning_rate)
        .ctx("batch_size", cfg.batch_size as u64)
        .ctx("hidden", cfg.hidden as u64)
        .ctx("weight_decay", cfg.weight_decay)
        .ctx("seed", cfg.seed)
        .note("records", file_name_of(&args.records))
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    let (selector, report) = selector_train_report(&train_records, &cfg)?;
    write_selector(&out, &selector, Some(&hash))?;

    println!(
        "train-selector: {} training records, best epoch {} (held-out MSE {:.6}, init {:.6}) -> {}",
        train_records.len(),
        report.best_epoch,
        report.best_heldout_mse,
        report.initial_heldout_mse,
        out.display()
    );
    for w in &report.warnings {
        println!("  warning: {w}");
    }
    Ok(())
}
