//! `sqnt rescore`: replace MaxProb confidences with selector predictions,
//! preserving ids, targets, and features.

use crate::args::{ensure_parent_dir, file_name_of, guard_overwrite, merge_config, resolve_out};
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, TOOL_VERSION};
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::confidence::selector_predict;
use sqnt_core::io::{read_records, read_selector, write_records, RecordsHeader};
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct RescoreArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Records file with features (from eval).
    #[arg(long)]
    pub records: PathBuf,
    /// Selector file (from train-selector).
    #[arg(long)]
    pub selector: PathBuf,
    /// Output records file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

pub fn run(args: RescoreArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "rescore")?;
    let (header, mut records) = read_records(&args.records)?;
    let (selector, selector_hash) = read_selector(&args.selector)?;

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let in_label = header
        .as_ref()
        .map(|h| h.label.clone())
        .unwrap_or_else(|| "unknown".to_string());
    let manifest = RunManifest::new("rescore")
        .ctx(
            "records_hash",
            header.as_ref().map(|h| h.manifest_hash.clone()).unwrap_or_default(),
        )
        .ctx("selector_hash", selector_hash.unwrap_or_default())
        .ctx("label", in_label.clone())
        .note("records", file_name_of(&args.records))
        .note("selector", file_name_of(&args.selector))
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    for record in &mut records {
        let features = record.features.as_ref().ok_or_else(|| {
            CliError::validation(format!(
                "record {} has no features; rescoring needs eval records with features",
                record.id
            ))
        })?;
        record.confidence = selector_predict(&selector, &features.flatten())?;
    }

    let out_header = RecordsHeader {
        manifest_hash: hash,
        label: in_label,
        tool_version: TOOL_VERSION.to_string(),
    };
    write_records(&out, Some(&out_header), &records)?;
    println!(
        "rescore: {} records rescored with the selector -> {}",
        records.len(),
        out.display()
    );
    Ok(())
}
