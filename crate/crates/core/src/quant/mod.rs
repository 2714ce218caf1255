//! Group-wise weight quantization at 3/4/8 bits.
//!
//! Weights are flattened row-major and cut into groups of `group_size`
//! elements (the last group is zero-padded; pad elements never enter error
//! norms). Each group stores one scale and one zero-point for the affine map
//! `w ≈ s * (q - z)` with codes `q` in `[0, 2^bits - 1]`.
//!
//! Two quantizers are provided: plain round-to-nearest from the group
//! min/max ([`rtn_quantize`]), and a half-quadratic refinement that treats
//! reconstruction errors as heavy-tailed and alternates generalized
//! soft-thresholding of the residual with a closed-form zero-point update
//! ([`hqq_optimize`]). Scales stay fixed at their RTN values; only the
//! zero-points move.
//!
//! All rounding is half-away-from-zero (`f64::round`), so runs are
//! bit-reproducible.

pub mod pack;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Smallest representable scale. A power of two at least 1e-8, so that
/// constant groups (scale hits the floor, zero-point kept real-valued)
/// dequantize to the original constant bit-exactly.
pub const SCALE_FLOOR: f64 = 1.4901161193847656e-8; // 2^-26

/// Divergence tolerance for the half-quadratic solver: an iteration that
/// raises the group error by more than this stops the group early.
pub const HQQ_DIVERGENCE_TOL: f64 = 1e-9;

const HQQ_BETA0: f64 = 10.0;
const HQQ_KAPPA: f64 = 1.01;

/// Quantization method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMethod {
    /// Round-to-nearest with min-max affine scaling.
    Rtn,
    /// Half-quadratic zero-point refinement on top of RTN (data-free).
    Hqq,
    /// Channel equalization from calibration data, then the HQQ solver on
    /// the equalized weights (data-aware). The equalization itself lives in
    /// [`crate::mbq`]; per-tensor quantization is identical to `Hqq`.
    Mbq,
}

impl std::fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantMethod::Rtn => write!(f, "RTN"),
            QuantMethod::Hqq => write!(f, "HQQ"),
            QuantMethod::Mbq => write!(f, "MBQ"),
        }
    }
}

/// Full quantization configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    /// Code width: 3, 4, or 8 bits.
    pub bits: u8,
    /// Weights per quantization group along the flattened row-major axis.
    pub group_size: usize,
    pub method: QuantMethod,
    /// Shape parameter `p` of the heavy-tailed error model, in (0, 1].
    pub lp_norm: f64,
    /// Half-quadratic iterations (0 means the RTN initializer is returned).
    pub hqq_iters: u32,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize, method: QuantMethod) -> Self {
        QuantSpec {
            bits,
            group_size,
            method,
            lp_norm: 0.7,
            hqq_iters: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 3 | 4 | 8) {
            return Err(Error::invalid(format!(
                "bits must be 3, 4, or 8 (got {})",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be >= 1"));
        }
        if !(self.lp_norm > 0.0 && self.lp_norm <= 1.0) {
            return Err(Error::invalid(format!(
                "lp_norm must lie in (0, 1] (got {})",
                self.lp_norm
            )));
        }
        Ok(())
    }

    /// Largest code value, `2^bits - 1`.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// A group-quantized, bit-packed weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    /// Packed codes covering `n_groups * group_size` elements (pads included).
    pub packed: Vec<u8>,
    /// One scale per group, strictly positive.
    pub scales: Vec<f64>,
    /// One zero-point per group. Integer-valued after RTN, real after HQQ.
    pub zero_points: Vec<f64>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_groups(&self) -> usize {
        self.n_elements().div_ceil(self.spec.group_size)
    }

    /// Padded element count (a whole number of groups).
    pub fn padded_len(&self) -> usize {
        self.n_groups() * self.spec.group_size
    }

    /// Unpacks all codes, pads included.
    pub fn codes(&self) -> Result<Vec<u32>> {
        pack::unpack_codes(&self.packed, self.spec.bits, self.padded_len())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.scales.len() != self.n_groups() || self.zero_points.len() != self.n_groups() {
            return Err(Error::Corrupt(format!(
                "expected {} scale/zero pairs, got {}/{}",
                self.n_groups(),
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if let Some(i) = self.scales.iter().position(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Corrupt(format!(
                "scale at group {i} is not strictly positive and finite"
            )));
        }
        ensure_finite(&self.zero_points, "zero_points").map_err(|_| {
            Error::Corrupt("non-finite zero-point".to_string())
        })?;
        // Also validates pad bits and code range.
        self.codes()?;
        Ok(())
    }

    /// Storage footprint as held in a checkpoint: packed codes plus 32 bits
    /// of scale/zero overhead per group (two bfloat16 values).
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + 4 * self.n_groups()
    }

    /// Bytes the same tensor occupies at 16 bits per weight.
    pub fn fp16_equivalent_bytes(&self) -> usize {
        2 * self.n_elements()
    }
}

/// Log of one `hqq_optimize` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SolverLog {
    /// Groups whose final error is strictly below the RTN initializer's.
    pub groups_improved: usize,
    /// Groups stopped before `hqq_iters` because an iteration raised the
    /// error beyond [`HQQ_DIVERGENCE_TOL`]; the best iterate was kept.
    pub groups_early_stopped: usize,
}

fn check_weights(weights: &Matrix) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    ensure_finite(weights.data(), "weights")
}

/// Flattens row-major and zero-pads to a whole number of groups.
fn padded_weights(weights: &Matrix, group_size: usize) -> Vec<f64> {
    let n = weights.len();
    let padded = n.div_ceil(group_size) * group_size;
    let mut flat = Vec::with_capacity(padded);
    flat.extend_from_slice(weights.data());
    flat.resize(padded, 0.0);
    flat
}

/// Per-group RTN parameters and codes.
struct GroupState {
    scale: f64,
    zero: f64,
    codes: Vec<u32>,
}

fn rtn_group(group: &[f64], max_code: u32) -> GroupState {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &w in group {
        lo = lo.min(w);
        hi = hi.max(w);
    }
    if hi == lo {
        // Constant group: floor the scale and keep the zero-point
        // real-valued so the constant is exactly representable. All codes
        // collapse to 0 and SCALE_FLOOR is a power of two, so the dequant
        // s * (0 - z) = s * (lo / s) reproduces lo bit-exactly.
        let scale = SCALE_FLOOR;
        let mut zero = -(lo / scale);
        if zero == 0.0 {
            zero = 0.0; // canonicalize -0.0
        }
        return GroupState {
            scale,
            zero,
            codes: vec![0; group.len()],
        };
    }

    let mut scale = (hi - lo) / max_code as f64;
    if scale < SCALE_FLOOR {
        scale = SCALE_FLOOR;
    }
    let mut zero = (-(lo / scale)).round();
    if zero == 0.0 {
        zero = 0.0;
    }
    let codes = group
        .iter()
        .map(|&w| (w / scale + zero).round().clamp(0.0, max_code as f64) as u32)
        .collect();
    GroupState { scale, zero, codes }
}

fn finish_tensor(
    rows: usize,
    cols: usize,
    spec: &QuantSpec,
    groups: Vec<GroupState>,
) -> Result<QuantizedTensor> {
    let mut codes = Vec::with_capacity(groups.len() * spec.group_size);
    let mut scales = Vec::with_capacity(groups.len());
    let mut zeros = Vec::with_capacity(groups.len());
    for g in groups {
        codes.extend_from_slice(&g.codes);
        scales.push(g.scale);
        zeros.push(g.zero);
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        packed: pack::pack_codes(&codes, spec.bits)?,
        scales,
        zero_points: zeros,
        spec: spec.clone(),
    })
}

/// Round-to-nearest quantization from per-group min/max.
pub fn rtn_quantize(weights: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    check_weights(weights)?;
    let flat = padded_weights(weights, spec.group_size);
    let max_code = spec.max_code();
    let groups: Vec<GroupState> = flat
        .chunks_exact(spec.group_size)
        .map(|g| rtn_group(g, max_code))
        .collect();
    finish_tensor(weights.rows(), weights.cols(), spec, groups)
}

/// Generalized soft-threshold for the l_p penalty. For p = 1 this is the
/// ordinary soft-threshold with threshold 1/beta.
fn shrink_lp(x: f64, beta: f64, p: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ax = x.abs();
    let threshold = if p == 1.0 {
        1.0 / beta
    } else {
        ax.powf(p - 1.0) / beta
    };
    x.signum() * (ax - threshold).max(0.0)
}

fn group_lp_error(real: &[f64], scale: f64, zero: f64, codes: &[u32], p: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &w) in real.iter().enumerate() {
        let deq = scale * (codes[i] as f64 - zero);
        acc += (w - deq).abs().powf(p);
    }
    acc
}

/// Half-quadratic refinement of the RTN initializer, returning the tensor
/// together with a solver log.
///
/// Each group runs up to `spec.hqq_iters` rounds of: (a) shrink the
/// reconstruction residual under the l_p penalty, (b) reset the zero-point
/// to the group mean of `q - (w - e)/s`, (c) re-quantize. The best iterate
/// (by l_p error over the real, non-pad elements) is kept, so the result is
/// never worse than RTN.
pub fn hqq_optimize_logged(
    weights: &Matrix,
    spec: &QuantSpec,
) -> Result<(QuantizedTensor, SolverLog)> {
    spec.validate()?;
    check_weights(weights)?;
    let flat = padded_weights(weights, spec.group_size);
    let n_real = weights.len();
    let max_code = spec.max_code();
    let p = spec.lp_norm;
    let gs = spec.group_size;

    let mut log = SolverLog::default();
    let mut groups = Vec::with_capacity(flat.len() / gs);
    for (gi, group) in flat.chunks_exact(gs).enumerate() {
        let init = rtn_group(group, max_code);
        // Pad elements are artifacts of the layout; the solver only sees
        // the real weights of this group.
        let real_len = gs.min(n_real.saturating_sub(gi * gs));
        let real = &group[..real_len];
        if real.is_empty() || spec.hqq_iters == 0 {
            groups.push(init);
            continue;
        }

        let scale = init.scale;
        let mut zero = init.zero;
        let mut codes: Vec<u32> = init.codes[..real_len].to_vec();
        let init_err = group_lp_error(real, scale, zero, &codes, p);

        let mut best_zero = zero;
        let mut best_codes = codes.clone();
        let mut best_err = init_err;
        let mut prev_err = init_err;
        let mut beta = HQQ_BETA0;

        for _ in 0..spec.hqq_iters {
            // (a) shrink the residual under the l_p penalty
            let mut zero_acc = 0.0;
            let shrunk: Vec<f64> = real
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let deq = scale * (codes[i] as f64 - zero);
                    shrink_lp(w - deq, beta, p)
                })
                .collect();
            // (b) closed-form zero-point update
            for (i, &w) in real.iter().enumerate() {
                zero_acc += codes[i] as f64 - (w - shrunk[i]) / scale;
            }
            zero = zero_acc / real_len as f64;
            // (c) re-quantize
            for (i, &w) in real.iter().enumerate() {
                codes[i] = (w / scale + zero).round().clamp(0.0, max_code as f64) as u32;
            }

            let err = group_lp_error(real, scale, zero, &codes, p);
            if err < best_err {
                best_err = err;
                best_zero = zero;
                best_codes.copy_from_slice(&codes);
            }
            if err > prev_err + HQQ_DIVERGENCE_TOL {
                log.groups_early_stopped += 1;
                break;
            }
            prev_err = err;
            beta *= HQQ_KAPPA;
        }

        if best_err < init_err {
            log.groups_improved += 1;
        }

        // Re-derive pad codes under the chosen zero-point so the packed
        // stream stays well-formed.
        let mut final_codes = best_codes;
        for _ in real_len..gs {
            let q = (0.0 / scale + best_zero)
                .round()
                .clamp(0.0, max_code as f64) as u32;
            final_codes.push(q);
        }
        groups.push(GroupState {
            scale,
            zero: best_zero,
            codes: final_codes,
        });
    }

    let qt = finish_tensor(weights.rows(), weights.cols(), spec, groups)?;
    Ok((qt, log))
}

/// Half-quadratic refinement of the RTN initializer.
pub fn hqq_optimize(weights: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    hqq_optimize_logged(weights, spec).map(|(qt, _)| qt)
}

/// Quantizes with the solver selected by `spec.method`. `Mbq` uses the same
/// per-tensor solver as `Hqq`; its equalization step happens upstream.
pub fn quantize(weights: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    match spec.method {
        QuantMethod::Rtn => rtn_quantize(weights, spec),
        QuantMethod::Hqq | QuantMethod::Mbq => hqq_optimize(weights, spec),
    }
}

/// Reconstructs the real-valued tensor `s * (q - z)`, dropping pad elements.
pub fn dequantize(qt: &QuantizedTensor) -> Result<Matrix> {
    qt.validate()?;
    let codes = qt.codes()?;
    let gs = qt.spec.group_size;
    let n = qt.n_elements();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let g = i / gs;
        data.push(qt.scales[g] * (codes[i] as f64 - qt.zero_points[g]));
    }
    Matrix::from_vec(qt.rows, qt.cols, data)
}

/// Error norm for [`quant_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorNorm {
    /// Sum of squared differences.
    L2,
    /// Sum of |difference|^p.
    Lp(f64),
}

/// Σ |w - w̃|^p between the original weights and the reconstruction.
/// Pad elements never participate (the reconstruction has none).
pub fn quant_error(weights: &Matrix, qt: &QuantizedTensor, norm: ErrorNorm) -> Result<f64> {
    if weights.shape() != (qt.rows, qt.cols) {
        return Err(Error::ShapeMismatch(format!(
            "weights are {:?}, tensor is {:?}",
            weights.shape(),
            (qt.rows, qt.cols)
        )));
    }
    let deq = dequantize(qt)?;
    let mut acc = 0.0;
    match norm {
        ErrorNorm::L2 => {
            for (w, d) in weights.data().iter().zip(deq.data().iter()) {
                let e = w - d;
                acc += e * e;
            }
        }
        ErrorNorm::Lp(p) => {
            for (w, d) in weights.data().iter().zip(deq.data().iter()) {
                acc += (w - d).abs().powf(p);
            }
        }
    }
    Ok(acc)
}
