//! On-disk formats: the SQNT checkpoint container, JSONL record and
//! calibration files, and the selector JSON file.
//!
//! SQNT layout (all integers little-endian):
//!
//! ```text
//! magic "SQNT" | version u16 | tensor_count u32
//! per tensor:
//!   name_len u16, name utf-8
//!   rows u32, cols u32
//!   bits u8 (3/4/8 = quantized codes, 16 = fp32 payload)
//!   flags u8 (bit 0: per-channel equalization scales present)
//!   group_size u32 (0 for fp32 tensors)
//!   payload:
//!     fp32:      rows*cols f32
//!     quantized: n_groups bf16 scales, n_groups bf16 zero-points,
//!                [cols f32 equalization scales,]
//!                packed codes over n_groups*group_size elements
//!   zero padding to the next 8-byte boundary
//! ```
//!
//! Scale/zero overhead is 32 bits per group (two bfloat16 values); the
//! bfloat16 exponent range covers the scale floor exactly. Equalized
//! tensors store the codes of the channel-scaled weights, and the loader
//! folds the inverse scaling back into the reconstruction.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mbq::{CalibBatch, CalibSequence, EqualizationPlan};
use crate::metrics::PredictionRecord;
use crate::model::{Model, ModelConfig};
use crate::quant::{dequantize, pack, quantize, QuantMethod, QuantSpec, QuantizedTensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const SQNT_MAGIC: &[u8; 4] = b"SQNT";
pub const SQNT_VERSION: u16 = 1;

/// Sentinel `bits` value tagging a full-precision fp32 tensor.
pub const FP32_BITS_TAG: u8 = 16;

// ---------------------------------------------------------------------------
// bfloat16 helpers
// ---------------------------------------------------------------------------

/// Round-to-nearest-even conversion through f32.
pub fn f64_to_bf16_bits(v: f64) -> u16 {
    let bits = (v as f32).to_bits() as u64;
    let rounding_bias = 0x7FFF + ((bits >> 16) & 1);
    ((bits + rounding_bias) >> 16) as u16
}

pub fn bf16_bits_to_f64(b: u16) -> f64 {
    f32::from_bits((b as u32) << 16) as f64
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Fp32(Matrix),
    Quantized {
        qt: QuantizedTensor,
        eq_scales: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub payload: TensorPayload,
}

impl NamedTensor {
    /// Bytes this tensor's payload occupies in the file (header and
    /// alignment padding excluded).
    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            TensorPayload::Fp32(m) => 4 * m.len(),
            TensorPayload::Quantized { qt, eq_scales } => {
                qt.storage_bytes() + eq_scales.as_ref().map_or(0, |s| 4 * s.len())
            }
        }
    }

    pub fn n_elements(&self) -> usize {
        match &self.payload {
            TensorPayload::Fp32(m) => m.len(),
            TensorPayload::Quantized { qt, .. } => qt.n_elements(),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn align8(&mut self) {
        while self.buf.len() % 8 != 0 {
            self.buf.push(0);
        }
    }
}

/// Serializes tensors into the SQNT byte layout.
pub fn encode_checkpoint(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(SQNT_MAGIC);
    w.u16(SQNT_VERSION);
    w.u32(tensors.len() as u32);
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("tensor name too long: {}", t.name)));
        }
        w.u16(name.len() as u16);
        w.bytes(name);
        match &t.payload {
            TensorPayload::Fp32(m) => {
                w.u32(m.rows() as u32);
                w.u32(m.cols() as u32);
                w.u8(FP32_BITS_TAG);
                w.u8(0);
                w.u32(0);
                for &v in m.data() {
                    w.f32(v as f32);
                }
            }
            TensorPayload::Quantized { qt, eq_scales } => {
                qt.validate()?;
                if let Some(eq) = eq_scales {
                    if eq.len() != qt.cols {
                        return Err(Error::ShapeMismatch(format!(
                            "tensor {}: {} equalization scales for {} columns",
                            t.name,
                            eq.len(),
                            qt.cols
                        )));
                    }
                }
                w.u32(qt.rows as u32);
                w.u32(qt.cols as u32);
                w.u8(qt.spec.bits);
                w.u8(u8::from(eq_scales.is_some()));
                w.u32(qt.spec.group_size as u32);
                for &s in &qt.scales {
                    w.u16(f64_to_bf16_bits(s));
                }
                for &z in &qt.zero_points {
                    w.u16(f64_to_bf16_bits(z));
                }
                if let Some(eq) = eq_scales {
                    for &s in eq {
                        w.f32(s as f32);
                    }
                }
                w.bytes(&qt.packed);
            }
        }
        w.align8();
    }
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("checkpoint truncated".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn align8(&mut self) -> Result<()> {
        while self.pos % 8 != 0 {
            if self.u8()? != 0 {
                return Err(Error::Corrupt("nonzero alignment padding".to_string()));
            }
        }
        Ok(())
    }
}

/// Parses the SQNT byte layout.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != SQNT_MAGIC {
        return Err(Error::Corrupt("bad magic bytes".to_string()));
    }
    let version = r.u16()?;
    if version != SQNT_VERSION {
        return Err(Error::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".to_string()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bits = r.u8()?;
        let flags = r.u8()?;
        let group_size = r.u32()? as usize;
        let payload = if bits == FP32_BITS_TAG {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f32()? as f64);
            }
            TensorPayload::Fp32(Matrix::from_vec(rows, cols, data)?)
        } else {
            if group_size == 0 {
                return Err(Error::Corrupt(format!(
                    "tensor {name}: zero group size on a quantized tensor"
                )));
            }
            let n_groups = (rows * cols).div_ceil(group_size);
            let mut scales = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                scales.push(bf16_bits_to_f64(r.u16()?));
            }
            let mut zero_points = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                zero_points.push(bf16_bits_to_f64(r.u16()?));
            }
            let eq_scales = if flags & 1 != 0 {
                let mut eq = Vec::with_capacity(cols);
                for _ in 0..cols {
                    eq.push(r.f32()? as f64);
                }
                Some(eq)
            } else {
                None
            };
            let packed_len = pack::packed_len(n_groups * group_size, bits);
            let packed = r.take(packed_len)?.to_vec();
            let qt = QuantizedTensor {
                rows,
                cols,
                packed,
                scales,
                zero_points,
                spec: QuantSpec::new(bits, group_size, QuantMethod::Rtn),
            };
            qt.validate()?;
            TensorPayload::Quantized { qt, eq_scales }
        };
        r.align8()?;
        tensors.push(NamedTensor { name, payload });
    }
    if r.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes after last tensor".to_string()));
    }
    Ok(tensors)
}

pub fn write_checkpoint(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(tensors)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

/// Sidecar metadata written next to every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

fn vector_tensor(name: &str, data: &[f64]) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        payload: TensorPayload::Fp32(
            Matrix::from_vec(1, data.len(), data.to_vec()).expect("length matches"),
        ),
    }
}

/// Every model tensor as fp32, in canonical order.
pub fn model_to_fp32_tensors(model: &Model) -> Vec<NamedTensor> {
    let mut out = vec![
        NamedTensor {
            name: "tok_emb".into(),
            payload: TensorPayload::Fp32(model.tok_emb.clone()),
        },
        NamedTensor {
            name: "pos_emb".into(),
            payload: TensorPayload::Fp32(model.pos_emb.clone()),
        },
    ];
    for (i, l) in model.layers.iter().enumerate() {
        out.push(vector_tensor(&format!("layers.{i}.ln1.gamma"), &l.ln1.gamma));
        out.push(vector_tensor(&format!("layers.{i}.ln1.beta"), &l.ln1.beta));
        for (part, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
            out.push(NamedTensor {
                name: format!("layers.{i}.attn.{part}"),
                payload: TensorPayload::Fp32(m.clone()),
            });
        }
        out.push(vector_tensor(&format!("layers.{i}.ln2.gamma"), &l.ln2.gamma));
        out.push(vector_tensor(&format!("layers.{i}.ln2.beta"), &l.ln2.beta));
        out.push(NamedTensor {
            name: format!("layers.{i}.ff.fc1"),
            payload: TensorPayload::Fp32(l.fc1.clone()),
        });
        out.push(NamedTensor {
            name: format!("layers.{i}.ff.fc2"),
            payload: TensorPayload::Fp32(l.fc2.clone()),
        });
    }
    out.push(vector_tensor("final_norm.gamma", &model.final_norm.gamma));
    out.push(vector_tensor("final_norm.beta", &model.final_norm.beta));
    out.push(NamedTensor {
        name: "out_proj".into(),
        payload: TensorPayload::Fp32(model.out_proj.clone()),
    });
    out
}

/// Model tensors with every linear weight quantized under `spec`
/// (channel-scaled first when a plan is supplied); embeddings and norms
/// stay fp32.
pub fn model_to_quantized_tensors(
    model: &Model,
    spec: &QuantSpec,
    plans: Option<&BTreeMap<String, EqualizationPlan>>,
) -> Result<Vec<NamedTensor>> {
    spec.validate()?;
    let linear: std::collections::BTreeSet<String> =
        model.linear_names().into_iter().collect();
    let mut out = Vec::new();
    for t in model_to_fp32_tensors(model) {
        if !linear.contains(&t.name) {
            out.push(t);
            continue;
        }
        let TensorPayload::Fp32(w) = &t.payload else {
            unreachable!("fp32 source tensors")
        };
        let plan = plans.and_then(|p| p.get(&t.name));
        let (to_quantize, eq_scales) = match plan {
            None => (w.clone(), None),
            Some(plan) => (
                crate::mbq::apply_equalization(w, plan)?,
                Some(plan.per_channel_scales.clone()),
            ),
        };
        let qt = quantize(&to_quantize, spec)?;
        out.push(NamedTensor {
            name: t.name,
            payload: TensorPayload::Quantized { qt, eq_scales },
        });
    }
    Ok(out)
}

fn expect_matrix(
    map: &mut BTreeMap<String, TensorPayload>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix> {
    let payload = map
        .remove(name)
        .ok_or_else(|| Error::Corrupt(format!("checkpoint is missing tensor {name}")))?;
    let m = match payload {
        TensorPayload::Fp32(m) => m,
        TensorPayload::Quantized { qt, eq_scales } => {
            let mut m = dequantize(&qt)?;
            if let Some(eq) = eq_scales {
                if eq.len() != m.cols() {
                    return Err(Error::Corrupt(format!(
                        "tensor {name}: equalization scale count mismatch"
                    )));
                }
                for (c, &s) in eq.iter().enumerate() {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Corrupt(format!(
                            "tensor {name}: bad equalization scale at channel {c}"
                        )));
                    }
                    m.scale_col(c, 1.0 / s);
                }
            }
            m
        }
    };
    if m.shape() != (rows, cols) {
        return Err(Error::Corrupt(format!(
            "tensor {name}: shape {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(m)
}

fn expect_vector(
    map: &mut BTreeMap<String, TensorPayload>,
    name: &str,
    len: usize,
) -> Result<Vec<f64>> {
    let m = expect_matrix(map, name, 1, len)?;
    Ok(m.data().to_vec())
}

/// Rebuilds a model from container tensors, dequantizing (and folding
/// equalization) where needed.
pub fn model_from_tensors(cfg: &ModelConfig, tensors: Vec<NamedTensor>) -> Result<Model> {
    cfg.validate()?;
    let mut map: BTreeMap<String, TensorPayload> = tensors
        .into_iter()
        .map(|t| (t.name, t.payload))
        .collect();
    let d = cfg.d_model;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(crate::model::Layer {
            ln1: crate::model::LayerNormParams {
                gamma: expect_vector(&mut map, &format!("layers.{i}.ln1.gamma"), d)?,
                beta: expect_vector(&mut map, &format!("layers.{i}.ln1.beta"), d)?,
            },
            wq: expect_matrix(&mut map, &format!("layers.{i}.attn.wq"), d, d)?,
            wk: expect_matrix(&mut map, &format!("layers.{i}.attn.wk"), d, d)?,
            wv: expect_matrix(&mut map, &format!("layers.{i}.attn.wv"), d, d)?,
            wo: expect_matrix(&mut map, &format!("layers.{i}.attn.wo"), d, d)?,
            ln2: crate::model::LayerNormParams {
                gamma: expect_vector(&mut map, &format!("layers.{i}.ln2.gamma"), d)?,
                beta: expect_vector(&mut map, &format!("layers.{i}.ln2.beta"), d)?,
            },
            fc1: expect_matrix(&mut map, &format!("layers.{i}.ff.fc1"), cfg.d_ff(), d)?,
            fc2: expect_matrix(&mut map, &format!("layers.{i}.ff.fc2"), d, cfg.d_ff())?,
        });
    }
    let model = Model {
        cfg: *cfg,
        tok_emb: expect_matrix(&mut map, "tok_emb", cfg.vocab_size, d)?,
        pos_emb: expect_matrix(&mut map, "pos_emb", cfg.max_seq, d)?,
        layers,
        final_norm: crate::model::LayerNormParams {
            gamma: expect_vector(&mut map, "final_norm.gamma", d)?,
            beta: expect_vector(&mut map, "final_norm.beta", d)?,
        },
        out_proj: expect_matrix(&mut map, "out_proj", cfg.vocab_size, d)?,
    };
    if let Some(name) = map.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {name}")));
    }
    Ok(model)
}

fn meta_path(ckpt: &Path) -> std::path::PathBuf {
    let mut s = ckpt.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Writes the checkpoint plus its `.meta.json` sidecar; returns the
/// serialized tensor list for size accounting.
pub fn save_model_checkpoint(
    path: &Path,
    tensors: &[NamedTensor],
    meta: &ModelMeta,
) -> Result<()> {
    write_checkpoint(path, tensors)?;
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(meta_path(path), text + "\n")?;
    Ok(())
}

/// Loads a model checkpoint together with its sidecar metadata.
pub fn load_model_checkpoint(path: &Path) -> Result<(Model, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
    let tensors = read_checkpoint(path)?;
    let model = model_from_tensors(&meta.config, tensors)?;
    Ok((model, meta))
}

// ---------------------------------------------------------------------------
// JSONL files
// ---------------------------------------------------------------------------

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

/// Header line carried at the top of records files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordsHeader {
    pub manifest_hash: String,
    pub label: String,
    pub tool_version: String,
}

/// Writes a records file: optional header line, then one record per line.
pub fn write_records(
    path: &Path,
    header: Option<&RecordsHeader>,
    records: &[PredictionRecord],
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a records file, accepting it with or without a header line.
pub fn read_records(path: &Path) -> Result<(Option<RecordsHeader>, Vec<PredictionRecord>)> {
    let file = fs::File::open(path)?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<RecordsHeader>(&line) {
                header = Some(h);
                continue;
            }
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}

pub fn write_calib(path: &Path, batch: &CalibBatch) -> Result<()> {
    write_jsonl(path, &batch.samples)
}

pub fn read_calib(path: &Path) -> Result<CalibBatch> {
    let samples: Vec<CalibSequence> = read_jsonl(path)?;
    CalibBatch::new(samples)
}

// ---------------------------------------------------------------------------
// Selector files
// ---------------------------------------------------------------------------

pub fn write_selector(
    path: &Path,
    model: &crate::confidence::SelectorModel,
    manifest_hash: Option<&str>,
) -> Result<()> {
    let mut value = model.to_json_value();
    if let Some(h) = manifest_hash {
        value["manifest_hash"] = serde_json::Value::String(h.to_string());
    }
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

pub fn read_selector(
    path: &Path,
) -> Result<(crate::confidence::SelectorModel, Option<String>)> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let model = crate::confidence::SelectorModel::from_json_value(&value)?;
    let hash = value["manifest_hash"].as_str().map(|s| s.to_string());
    Ok((model, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Source, Split};
    use crate::model::init_model;
    use crate::rng::Rng;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("sqnt-io-{name}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn bf16_roundtrip_exact_for_representable_values() {
        for v in [1.0, -2.5, 0.5, crate::quant::SCALE_FLOOR, 256.0, -0.125] {
            assert_eq!(bf16_bits_to_f64(f64_to_bf16_bits(v)), v, "{v}");
        }
        // Idempotent on already-rounded values.
        let rounded = bf16_bits_to_f64(f64_to_bf16_bits(0.1234567));
        assert_eq!(bf16_bits_to_f64(f64_to_bf16_bits(rounded)), rounded);
    }

    #[test]
    fn container_roundtrip_mixed_tensors() {
        let mut rng = Rng::new(3);
        let fp = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let w = Matrix::from_fn(8, 16, |_, _| rng.normal());
        let spec = QuantSpec::new(4, 32, QuantMethod::Hqq);
        let qt = quantize(&w, &spec).unwrap();
        let tensors = vec![
            NamedTensor {
                name: "plain".into(),
                payload: TensorPayload::Fp32(fp.clone()),
            },
            NamedTensor {
                name: "packed".into(),
                payload: TensorPayload::Quantized {
                    qt: qt.clone(),
                    eq_scales: Some((0..16).map(|i| 1.0 + i as f64 * 0.1).collect()),
                },
            },
        ];
        let bytes = encode_checkpoint(&tensors).unwrap();
        assert_eq!(&bytes[0..4], SQNT_MAGIC);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        // fp32 payload round-trips through f32 precision
        match &back[0].payload {
            TensorPayload::Fp32(m) => {
                for (a, b) in fp.data().iter().zip(m.data().iter()) {
                    assert_eq!(*a as f32, *b as f32);
                }
            }
            _ => panic!("expected fp32"),
        }
        // codes round-trip exactly; scales through bf16
        match &back[1].payload {
            TensorPayload::Quantized { qt: q2, eq_scales } => {
                assert_eq!(q2.packed, qt.packed);
                for (a, b) in qt.scales.iter().zip(q2.scales.iter()) {
                    assert_eq!(bf16_bits_to_f64(f64_to_bf16_bits(*a)), *b);
                }
                let eq = eq_scales.as_ref().unwrap();
                assert_eq!(eq.len(), 16);
            }
            _ => panic!("expected quantized"),
        }
        // encoding is stable once the lossy rounding has happened
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn decode_rejects_corruption() {
        let tensors = vec![NamedTensor {
            name: "t".into(),
            payload: TensorPayload::Fp32(Matrix::zeros(2, 2)),
        }];
        let bytes = encode_checkpoint(&tensors).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        assert!(decode_checkpoint(&truncated).is_err());
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(decode_checkpoint(&versioned).is_err());
    }

    #[test]
    fn model_checkpoint_roundtrip_fp32() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 10,
            seed: 5,
        };
        let model = init_model(&cfg).unwrap();
        let dir = tmpdir("fp32");
        let path = dir.join("model.sqnt");
        let meta = ModelMeta {
            config: cfg,
            label: "bf16".into(),
            manifest_hash: Some("abc".into()),
        };
        save_model_checkpoint(&path, &model_to_fp32_tensors(&model), &meta).unwrap();
        let (loaded, meta2) = load_model_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        // f32 storage: compare through f32.
        for (a, b) in model
            .out_proj
            .data()
            .iter()
            .zip(loaded.out_proj.data().iter())
        {
            assert_eq!(*a as f32, *b as f32);
        }
        let tokens = vec![1, 2, 3];
        assert_eq!(
            loaded.forward(&tokens).unwrap().rows(),
            model.forward(&tokens).unwrap().rows()
        );
    }

    #[test]
    fn quantized_model_checkpoint_loads_and_runs() {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 10,
            seed: 7,
        };
        let model = init_model(&cfg).unwrap();
        let spec = QuantSpec::new(4, 16, QuantMethod::Hqq);
        let tensors = model_to_quantized_tensors(&model, &spec, None).unwrap();
        let dir = tmpdir("quant");
        let path = dir.join("model-int4.sqnt");
        let meta = ModelMeta {
            config: cfg,
            label: "int4_HQQ".into(),
            manifest_hash: None,
        };
        save_model_checkpoint(&path, &tensors, &meta).unwrap();
        let (loaded, _) = load_model_checkpoint(&path).unwrap();
        // Embeddings untouched (up to f32 storage), weights close to original.
        for (a, b) in model
            .tok_emb
            .data()
            .iter()
            .zip(loaded.tok_emb.data().iter())
        {
            assert_eq!(*a as f32, *b as f32);
        }
        let w0 = &model.layers[0].wq;
        let l0 = &loaded.layers[0].wq;
        let mut max_err = 0.0f64;
        for (a, b) in w0.data().iter().zip(l0.data().iter()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err > 0.0 && max_err < 0.2, "max_err = {max_err}");
        loaded.forward(&[1, 2, 3, 4]).unwrap();
    }

    #[test]
    fn records_roundtrip_with_header() {
        let dir = tmpdir("records");
        let path = dir.join("recs.jsonl");
        let header = RecordsHeader {
            manifest_hash: "deadbeef".into(),
            label: "bf16".into(),
            tool_version: "0.1.0".into(),
        };
        let records = vec![PredictionRecord {
            id: "a".into(),
            confidence: 0.75,
            soft_acc: 1.0,
            split: Split::Test,
            source: Source::Id,
            features: None,
            answer: Some("tok5".into()),
            refs: Some(vec!["tok5".into(); 10]),
        }];
        write_records(&path, Some(&header), &records).unwrap();
        let (h, r) = read_records(&path).unwrap();
        assert_eq!(h.unwrap(), header);
        assert_eq!(r, records);
    }

    #[test]
    fn calib_file_format_matches_spec_shape() {
        let dir = tmpdir("calib");
        let path = dir.join("calib.jsonl");
        let batch = CalibBatch::new(vec![CalibSequence {
            tokens: vec![4, 5, 6],
            modality: vec![
                crate::mbq::Modality::Vision,
                crate::mbq::Modality::Text,
                crate::mbq::Modality::Text,
            ],
        }])
        .unwrap();
        write_calib(&path, &batch).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            r#"{"tokens":[4,5,6],"modality":["v","t","t"]}"#
        );
        assert_eq!(read_calib(&path).unwrap(), batch);
    }

    #[test]
    fn selector_file_roundtrip_with_hash() {
        let dir = tmpdir("selector");
        let path = dir.join("selector.json");
        let model = crate::confidence::SelectorModel::init(4, 3, 9).unwrap();
        write_selector(&path, &model, Some("cafe")).unwrap();
        let (back, hash) = read_selector(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(hash.as_deref(), Some("cafe"));
    }
}
