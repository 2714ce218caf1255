//! `sqnt report`: the full reliability report (accuracy, ECE, C@R,
//! RC-AUC, Φ at dev-selected thresholds) plus the risk-coverage curve CSV.

use crate::args::{ensure_parent_dir, file_name_of, guard_overwrite, merge_config, resolve_out};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::io::read_records;
use sqnt_core::metrics::{reliability_report, risk_coverage_curve, DEFAULT_ECE_BINS};
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Test records file.
    #[arg(long)]
    pub records: PathBuf,
    /// Dev records file (threshold selection for Φ).
    #[arg(long)]
    pub dev: PathBuf,
    /// ECE bin count.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Quantization label for the report; defaults to the records header.
    #[arg(long)]
    pub label: Option<String>,
    /// Output report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional risk-coverage curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Accept records and dev files from different runs.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub allow_mixed: bool,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

pub fn run(args: ReportArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "report")?;
    let bins = args.bins.unwrap_or(DEFAULT_ECE_BINS);
    let (test_header, test_records) = read_records(&args.records)?;
    let (dev_header, dev_records) = read_records(&args.dev)?;

    let test_hash = test_header.as_ref().map(|h| h.manifest_hash.clone());
    let dev_hash = dev_header.as_ref().map(|h| h.manifest_hash.clone());
    if !args.allow_mixed && test_hash != dev_hash {
        return Err(CliError::validation(format!(
            "records manifest {} does not match dev manifest {} (pass --allow-mixed to override)",
            test_hash.unwrap_or_else(|| "<none>".into()),
            dev_hash.unwrap_or_else(|| "<none>".into()),
        )));
    }

    let label = args
        .label
        .clone()
        .or_else(|| test_header.as_ref().map(|h| h.label.clone()))
        .unwrap_or_else(|| "unknown".to_string());

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let manifest = RunManifest::new("report")
        .ctx("records_hash", test_hash.unwrap_or_default())
        .ctx("dev_hash", dev_hash.unwrap_or_default())
        .ctx("bins", bins as u64)
        .ctx("label", label.clone())
        .ctx("allow_mixed", args.allow_mixed)
        .note("records", file_name_of(&args.records))
        .note("dev", file_name_of(&args.dev))
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    let report = reliability_report(&test_records, &dev_records, bins, &label)?;
    let mut value = serde_json::to_value(&report)?;
    value["manifest_hash"] = serde_json::Value::String(hash.clone());
    std::fs::write(&out, serde_json::to_string_pretty(&value)? + "\n")?;

    if let Some(curve_path) = &args.curve {
        let curve_path = resolve_out(curve_path);
        ensure_parent_dir(&curve_path)?;
        guard_overwrite(&curve_path, args.force)?;
        let curve = risk_coverage_curve(&test_records)?;
        let file = std::fs::File::create(&curve_path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "# manifest {hash}")?;
        writeln!(w, "coverage,risk,threshold")?;
        for p in &curve.points {
            writeln!(w, "{},{},{}", p.coverage, p.risk, p.threshold)?;
        }
        w.flush()?;
    }

    println!(
        "report[{label}]: n {} acc {:.4} ece {:.4} c@0.5 {:.4} c@1 {:.4} c@5 {:.4} auc {:.4} phi10 {:.2} phi100 {:.2} -> {}",
        report.n,
        report.acc,
        report.ece,
        report.c_at_half,
        report.c_at_1,
        report.c_at_5,
        report.auc,
        report.phi_10,
        report.phi_100,
        out.display()
    );
    Ok(())
}
