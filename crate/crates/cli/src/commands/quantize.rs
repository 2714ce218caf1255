//! `sqnt quantize`: write a quantized (or bf16 passthrough) checkpoint
//! from a full-precision model checkpoint, with size accounting.

use crate::args::{
    ensure_parent_dir, file_name_of, guard_overwrite, merge_config, parse_float_list,
    resolve_out, QuantLabel,
};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sqnt_core::io::{
    load_model_checkpoint, model_to_fp32_tensors, model_to_quantized_tensors, read_calib,
    save_model_checkpoint, ModelMeta, NamedTensor, TensorPayload,
};
use sqnt_core::linalg::Matrix;
use sqnt_core::mbq::{
    default_exponent_grid, modality_weights, search_equalization, CalibBatch, EqualizationPlan,
    Modality,
};
use sqnt_core::model::{capture_linear_inputs, Model};
use sqnt_core::quant::{QuantMethod, QuantSpec};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Parser, Serialize, Deserialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input full-precision checkpoint (.sqnt).
    #[arg(long)]
    pub model: PathBuf,
    /// Quantization label: bf16 or <bits>_<METHOD>, e.g. int4_HQQ.
    #[arg(long)]
    pub label: String,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub lp_norm: Option<f64>,
    #[arg(long)]
    pub hqq_iters: Option<u32>,
    /// Calibration batch (JSONL); required for MBQ.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Comma-separated equalization exponent grid for MBQ.
    #[arg(long)]
    pub exponent_grid: Option<String>,
    /// Output checkpoint path (.sqnt).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    pub force: bool,
}

/// Per-tensor equalization plans for every linear weight, searched on the
/// calibration batch.
pub fn mbq_plans(
    model: &Model,
    batch: &CalibBatch,
    spec: &QuantSpec,
    grid: &[f64],
) -> CliResult<BTreeMap<String, EqualizationPlan>> {
    let mw = modality_weights(model, batch)?;

    // Gather per-tensor activation rows, split by token modality.
    #[derive(Default)]
    struct Acts {
        v_data: Vec<f64>,
        v_rows: usize,
        t_data: Vec<f64>,
        t_rows: usize,
    }
    let names = model.linear_names();
    let mut gathered: Vec<Acts> = names.iter().map(|_| Acts::default()).collect();
    for seq in &batch.samples {
        let captured = capture_linear_inputs(model, &seq.tokens)?;
        for (ni, name) in names.iter().enumerate() {
            let acts = &captured[name.as_str()];
            let g = &mut gathered[ni];
            for (pos, tag) in seq.modality.iter().enumerate() {
                match tag {
                    Modality::Vision => {
                        g.v_data.extend_from_slice(acts.row(pos));
                        g.v_rows += 1;
                    }
                    Modality::Text => {
                        g.t_data.extend_from_slice(acts.row(pos));
                        g.t_rows += 1;
                    }
                }
            }
        }
    }

    let mut plans = BTreeMap::new();
    for (ni, name) in names.iter().enumerate() {
        let w = model.linear_weight(name).expect("linear name");
        let g = std::mem::take(&mut gathered[ni]);
        let x_v = Matrix::from_vec(g.v_rows, w.cols(), g.v_data)?;
        let x_t = Matrix::from_vec(g.t_rows, w.cols(), g.t_data)?;
        let plan = search_equalization(w, &x_v, &x_t, &mw, spec, grid)?;
        plans.insert(name.clone(), plan);
    }
    Ok(plans)
}

/// Size accounting over a tensor list: quantized weight payload versus its
/// 16-bit and stored-fp32 baselines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub quantized_params: usize,
    pub quantized_bytes: usize,
    pub fp32_params: usize,
    pub fp32_bytes: usize,
    pub fp16_equivalent_bytes: usize,
    pub fp32_equivalent_bytes: usize,
}

pub fn size_report(tensors: &[NamedTensor]) -> SizeReport {
    let mut report = SizeReport {
        quantized_params: 0,
        quantized_bytes: 0,
        fp32_params: 0,
        fp32_bytes: 0,
        fp16_equivalent_bytes: 0,
        fp32_equivalent_bytes: 0,
    };
    for t in tensors {
        match &t.payload {
            TensorPayload::Fp32(m) => {
                report.fp32_params += m.len();
                report.fp32_bytes += 4 * m.len();
            }
            TensorPayload::Quantized { qt, .. } => {
                report.quantized_params += qt.n_elements();
                report.quantized_bytes += t.payload_bytes();
                report.fp16_equivalent_bytes += 2 * qt.n_elements();
                report.fp32_equivalent_bytes += 4 * qt.n_elements();
            }
        }
    }
    report
}

pub fn run(args: QuantizeArgs) -> CliResult<()> {
    let config_path = args.config.clone();
    let args = merge_config(args, config_path.as_deref(), "quantize")?;
    let label = QuantLabel::parse(&args.label)?;
    let group_size = args.group_size.unwrap_or(64);
    let lp_norm = args.lp_norm.unwrap_or(0.7);
    let hqq_iters = args.hqq_iters.unwrap_or(20);
    let grid = match &args.exponent_grid {
        Some(text) => parse_float_list(text, "exponent grid")?,
        None => default_exponent_grid(),
    };

    let (model, in_meta) = load_model_checkpoint(&args.model)?;
    let spec = label.spec(group_size, lp_norm, hqq_iters);
    if matches!(
        spec,
        Some(QuantSpec {
            method: QuantMethod::Mbq,
            ..
        })
    ) && args.calib.is_none()
    {
        return Err(CliError::validation(
            "MBQ is data-aware: pass --calib <calib.jsonl> (gen-task writes one)",
        ));
    }

    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    guard_overwrite(&out, args.force)?;

    let mut manifest = RunManifest::new("quantize")
        .ctx(
            "model_hash",
            in_meta.manifest_hash.clone().unwrap_or_default(),
        )
        .ctx("label", args.label.clone())
        .note("model", file_name_of(&args.model))
        .note("out", file_name_of(&out));
    if let Some(spec) = &spec {
        manifest = manifest
            .ctx("bits", spec.bits as u64)
            .ctx("method", spec.method.to_string())
            .ctx("group_size", spec.group_size as u64)
            .ctx("lp_norm", spec.lp_norm)
            .ctx("hqq_iters", spec.hqq_iters as u64);
        if spec.method == QuantMethod::Mbq {
            manifest = manifest.ctx(
                "exponent_grid",
                serde_json::to_value(&grid).expect("floats serialize"),
            );
        }
    }
    let hash = manifest.hash();
    manifest.write(&out.with_extension("manifest.json"))?;

    let tensors = match &spec {
        None => model_to_fp32_tensors(&model),
        Some(spec) => {
            let plans = if spec.method == QuantMethod::Mbq {
                let calib_path = args.calib.as_ref().expect("checked above");
                let batch = read_calib(calib_path)?;
                Some(mbq_plans(&model, &batch, spec, &grid)?)
            } else {
                None
            };
            model_to_quantized_tensors(&model, spec, plans.as_ref())?
        }
    };

    let meta = ModelMeta {
        config: model.cfg,
        label: args.label.clone(),
        manifest_hash: Some(hash),
    };
    save_model_checkpoint(&out, &tensors, &meta)?;

    let report = size_report(&tensors);
    let file_bytes = std::fs::metadata(&out)?.len();
    println!(
        "quantize[{}]: wrote {} ({} bytes)",
        args.label,
        out.display(),
        file_bytes
    );
    if report.quantized_params > 0 {
        println!(
            "  quantized weights: {} params in {} bytes | 16-bit baseline {} bytes (ratio {:.4}) | fp32 baseline {} bytes (ratio {:.4})",
            report.quantized_params,
            report.quantized_bytes,
            report.fp16_equivalent_bytes,
            report.quantized_bytes as f64 / report.fp16_equivalent_bytes as f64,
            report.fp32_equivalent_bytes,
            report.quantized_bytes as f64 / report.fp32_equivalent_bytes as f64,
        );
        println!(
            "  full-precision tensors kept: {} params in {} bytes",
            report.fp32_params, report.fp32_bytes
        );
    } else {
        println!(
            "  passthrough: {} params stored as fp32 ({} bytes)",
            report.fp32_params, report.fp32_bytes
        );
    }
    Ok(())
}
