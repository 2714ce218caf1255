//! `sqnt mix`: ID/OOD mixture sweep — accuracy, coverage, and Φ over a
//! grid of OOD fractions at a fixed threshold.

use crate::args::{
    ensure_parent_dir, file_name_of, guard_overwrite, merge_config, parse_float_list, resolve_out,
};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::io::read_records;
use sqnt_core::metrics::eval_mixture;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct MixArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// In-distribution records file.
    #[arg(long)]
    pub id: PathBuf,
    /// Out-of-distribution records file.
    #[arg(long)]
    pub ood: PathBuf,
    /// Comma-separated OOD fractions in [0, 1].
    #[arg(long)]
    pub fractions: Option<String>,
    /// Answering threshold γ.
    #[arg(long)]
    pub gamma: f64,
    /// Wrong-answer cost c for Φ.
    #[arg(long)]
    pub cost: Option<f64>,
    /// Seed of the deterministic subset rule.
    #[arg(long)]
    pub subset_seed: Option<u64>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Accept ID and OOD files from different runs.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub allow_mixed: bool,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

pub fn run(args: MixArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "mix")?;
    let fractions = match &args.fractions {
        Some(text) => parse_float_list(text, "fractions")?,
        None => vec![0.0, 0.25, 0.5, 0.75, 1.0],
    };
    let cost = args.cost.unwrap_or(10.0);
    let subset_seed = args.subset_seed.unwrap_or(0);

    let (id_header, id_records) = read_records(&args.id)?;
    let (ood_header, ood_records) = read_records(&args.ood)?;
    let id_hash = id_header.as_ref().map(|h| h.manifest_hash.clone());
    let ood_hash = ood_header.as_ref().map(|h| h.manifest_hash.clone());
    if !args.allow_mixed && id_hash != ood_hash {
        return Err(CliError::validation(format!(
            "ID manifest {} does not match OOD manifest {} (pass --allow-mixed to override)",
            id_hash.unwrap_or_else(|| "<none>".into()),
            ood_hash.unwrap_or_else(|| "<none>".into()),
        )));
    }

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let manifest = RunManifest::new("mix")
        .ctx("id_hash", id_hash.unwrap_or_default())
        .ctx("ood_hash", ood_hash.unwrap_or_default())
        .ctx(
            "fractions",
            serde_json::to_value(&fractions).expect("floats serialize"),
        )
        .ctx("gamma", args.gamma)
        .ctx("cost", cost)
        .ctx("subset_seed", subset_seed)
        .note("id", file_name_of(&args.id))
        .note("ood", file_name_of(&args.ood))
        .note("out", file_name_of(&out));
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    let points = eval_mixture(
        &id_records,
        &ood_records,
        &fractions,
        args.gamma,
        cost,
        subset_seed,
    )?;

    let file = std::fs::File::create(&out)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# manifest {hash}")?;
    writeln!(w, "fraction,n_id,n_ood,accuracy,coverage,phi")?;
    for p in &points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.fraction, p.n_id, p.n_ood, p.accuracy, p.coverage, p.phi
        )?;
    }
    w.flush()?;

    println!(
        "mix: {} fractions at gamma {} cost {} -> {}",
        points.len(),
        args.gamma,
        cost,
        out.display()
    );
    Ok(())
}
