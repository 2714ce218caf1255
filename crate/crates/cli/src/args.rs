//! Shared argument plumbing: quant labels, config-file merging, output
//! path resolution, and overwrite guards.

use crate::error::{CliError, CliResult};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sqnt_core::quant::{QuantMethod, QuantSpec};
use std::path::{Path, PathBuf};

/// Environment variable naming the default output root for relative paths.
pub const OUT_ROOT_ENV: &str = "SQNT_OUT";

/// Parsed quantization label: `bf16` or `<bits>_<METHOD>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantLabel {
    Bf16,
    Quant { bits: u8, method: QuantMethod },
}

impl QuantLabel {
    pub fn parse(label: &str) -> CliResult<Self> {
        if label == "bf16" {
            return Ok(QuantLabel::Bf16);
        }
        let (bits_part, method_part) = label.split_once('_').ok_or_else(|| {
            CliError::validation(format!(
                "bad quant label '{label}': expected bf16 or <bits>_<METHOD> (e.g. int4_HQQ)"
            ))
        })?;
        let bits = match bits_part {
            "int8" => 8,
            "int4" => 4,
            "int3" => 3,
            other => {
                return Err(CliError::validation(format!(
                    "bad quant label '{label}': unknown bit width '{other}'"
                )))
            }
        };
        let method = match method_part {
            "RTN" => QuantMethod::Rtn,
            "HQQ" => QuantMethod::Hqq,
            "MBQ" => QuantMethod::Mbq,
            other => {
                return Err(CliError::validation(format!(
                    "bad quant label '{label}': unknown method '{other}'"
                )))
            }
        };
        Ok(QuantLabel::Quant { bits, method })
    }

    pub fn to_string_label(self) -> String {
        match self {
            QuantLabel::Bf16 => "bf16".to_string(),
            QuantLabel::Quant { bits, method } => format!("int{bits}_{method}"),
        }
    }

    pub fn spec(self, group_size: usize, lp_norm: f64, hqq_iters: u32) -> Option<QuantSpec> {
        match self {
            QuantLabel::Bf16 => None,
            QuantLabel::Quant { bits, method } => Some(QuantSpec {
                bits,
                group_size,
                method,
                lp_norm,
                hqq_iters,
            }),
        }
    }
}

/// Fills `None` fields of `args` from a TOML config file. The file may be
/// flat or carry a `[<section>]` table; flags always win because only
/// missing fields are filled. Unknown keys are rejected.
pub fn merge_config<T: Serialize + DeserializeOwned>(
    args: T,
    config: Option<&Path>,
    section: &str,
) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let file_value: toml::Value = toml::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let section_value = match file_value.get(section) {
        Some(v) => v.clone(),
        None => file_value,
    };
    let mut args_json = serde_json::to_value(&args)?;
    let file_json = serde_json::to_value(&section_value)?;
    let (Some(args_obj), Some(file_obj)) = (args_json.as_object_mut(), file_json.as_object())
    else {
        return Err(CliError::validation("config file must be a table"));
    };
    for (key, value) in file_obj {
        match args_obj.get(key) {
            None => {
                // Tolerate other sections in a shared config file.
                if value.is_object() {
                    continue;
                }
                return Err(CliError::validation(format!(
                    "config key '{key}' is not a parameter of {section}"
                )));
            }
            Some(serde_json::Value::Null) => {
                args_obj.insert(key.clone(), value.clone());
            }
            Some(_) => {} // flag already set; flags win
        }
    }
    Ok(serde_json::from_value(args_json)?)
}

/// Resolves an output path against `SQNT_OUT` when it is relative and the
/// variable is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Overwrite guard shared by all commands that create files.
pub fn guard_overwrite(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::validation(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

pub fn ensure_parent_dir(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// File name (not full path) for manifest context entries.
pub fn file_name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Parses a comma-separated list of floats (e.g. exponent grids, fractions).
pub fn parse_float_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<f64>().map_err(|e| {
            CliError::validation(format!("bad {what} entry '{part}': {e}"))
        })?);
    }
    if out.is_empty() {
        return Err(CliError::validation(format!("{what} list is empty")));
    }
    Ok(out)
}
