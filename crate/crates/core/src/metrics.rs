//! Selective-prediction reliability metrics.
//!
//! Everything operates on [`PredictionRecord`]s: a confidence in [0, 1], a
//! soft-accuracy target in [0, 1], and bookkeeping tags. Ordering is made
//! deterministic everywhere by breaking confidence ties on the record id,
//! so reports are byte-reproducible.
//!
//! Threshold semantics throughout: a record is answered iff
//! `confidence >= gamma`.

use crate::error::{Error, Result};
use crate::model::FeatureVector;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Distribution the record was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD_A")]
    OodA,
    #[serde(rename = "OOD_B")]
    OodB,
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub confidence: f64,
    pub soft_acc: f64,
    pub split: Split,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refs: Option<Vec<String>>,
}

/// Validates ranges and id uniqueness of a record set.
pub fn validate_records(records: &[PredictionRecord]) -> Result<()> {
    let mut ids: Vec<&str> = Vec::with_capacity(records.len());
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) || !r.confidence.is_finite() {
            return Err(Error::invalid(format!(
                "record {}: confidence {} outside [0, 1]",
                r.id, r.confidence
            )));
        }
        if !(0.0..=1.0).contains(&r.soft_acc) || !r.soft_acc.is_finite() {
            return Err(Error::invalid(format!(
                "record {}: soft_acc {} outside [0, 1]",
                r.id, r.soft_acc
            )));
        }
        ids.push(&r.id);
    }
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate record id {}", w[0])));
    }
    Ok(())
}

fn require_nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("empty record set"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Soft accuracy
// ---------------------------------------------------------------------------

/// Lowercases, strips punctuation, and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// VQA-style soft accuracy: `min(#normalized matches / 3, 1)`.
/// An empty (or all-punctuation) answer scores 0; empty refs are an error.
pub fn soft_accuracy(answer: &str, refs: &[String]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::invalid("refs must be non-empty"));
    }
    let norm = normalize_answer(answer);
    if norm.is_empty() {
        return Ok(0.0);
    }
    let matches = refs
        .iter()
        .filter(|r| normalize_answer(r) == norm)
        .count();
    Ok((matches as f64 / 3.0).min(1.0))
}

// ---------------------------------------------------------------------------
// Expected calibration error
// ---------------------------------------------------------------------------

/// Bin index for a confidence under right-closed equal-width edges:
/// bin b covers ((b)/n, (b+1)/n], with 0 landing in bin 0.
fn ece_bin(confidence: f64, n_bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let idx = (confidence * n_bins as f64).ceil() as usize;
    idx.saturating_sub(1).min(n_bins - 1)
}

/// Expected Calibration Error over equal-width confidence bins.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    require_nonempty(records)?;
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be >= 1"));
    }
    let mut sum_conf = vec![0.0; n_bins];
    let mut sum_acc = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for r in records {
        let b = ece_bin(r.confidence, n_bins);
        sum_conf[b] += r.confidence;
        sum_acc[b] += r.soft_acc;
        count[b] += 1;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        total += (c / n) * ((sum_conf[b] / c) - (sum_acc[b] / c)).abs();
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Risk-coverage curve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub coverage: f64,
    pub risk: f64,
    /// Confidence of the last record inside this prefix.
    pub threshold: f64,
}

/// Risk over coverage, one point per prefix of the confidence-ranked list.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskCoverageCurve {
    pub points: Vec<CurvePoint>,
}

/// Indices sorted by confidence descending, ties broken by id ascending.
fn ranked_indices(records: &[PredictionRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| {
        records[b]
            .confidence
            .partial_cmp(&records[a].confidence)
            .expect("confidences validated finite")
            .then_with(|| records[a].id.cmp(&records[b].id))
    });
    idx
}

/// Builds the risk-coverage curve: point k is
/// `(k/N, 1 - mean soft_acc of the top-k records)`.
pub fn risk_coverage_curve(records: &[PredictionRecord]) -> Result<RiskCoverageCurve> {
    require_nonempty(records)?;
    validate_records(records)?;
    let order = ranked_indices(records);
    let n = records.len() as f64;
    let mut cum = 0.0;
    let mut points = Vec::with_capacity(records.len());
    for (k, &i) in order.iter().enumerate() {
        cum += records[i].soft_acc;
        points.push(CurvePoint {
            coverage: (k + 1) as f64 / n,
            risk: 1.0 - cum / (k + 1) as f64,
            threshold: records[i].confidence,
        });
    }
    Ok(RiskCoverageCurve { points })
}

/// Maximum coverage over all ranked prefixes whose risk is at most `r`
/// (all prefixes are scanned: empirical risk is not monotone in coverage).
/// Returns 0 when no prefix qualifies.
pub fn coverage_at_risk(curve: &RiskCoverageCurve, r: f64) -> f64 {
    let mut best = 0.0f64;
    for p in &curve.points {
        if p.risk <= r {
            best = best.max(p.coverage);
        }
    }
    best
}

/// Trapezoidal area under the risk-coverage curve on [0, 1], with the risk
/// at coverage 0 defined as the first point's risk.
pub fn rc_auc(curve: &RiskCoverageCurve) -> f64 {
    let mut area = 0.0;
    let mut prev_cov = 0.0;
    let mut prev_risk = curve.points.first().map_or(0.0, |p| p.risk);
    for p in &curve.points {
        area += (p.coverage - prev_cov) * (p.risk + prev_risk) / 2.0;
        prev_cov = p.coverage;
        prev_risk = p.risk;
    }
    area
}

// ---------------------------------------------------------------------------
// Effective reliability
// ---------------------------------------------------------------------------

/// Φ_c on a percentage scale: an answered record scores `soft_acc` when
/// `soft_acc > 0` and `-c` otherwise; abstentions score 0.
pub fn effective_reliability(records: &[PredictionRecord], gamma: f64, c: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in records {
        if r.confidence >= gamma {
            total += if r.soft_acc > 0.0 { r.soft_acc } else { -c };
        }
    }
    100.0 * total / records.len() as f64
}

/// Sentinel threshold above every valid confidence (abstain on everything).
pub const GAMMA_ABSTAIN_ALL: f64 = 1.0 + 1e-9;

/// Threshold maximizing Φ_c on the dev records, searched over 0, every
/// midpoint between consecutive distinct confidences, and a sentinel above
/// 1. Ties break to the largest γ (abstain more).
pub fn select_threshold(dev_records: &[PredictionRecord], c: f64) -> Result<f64> {
    require_nonempty(dev_records)?;
    let mut confs: Vec<f64> = dev_records.iter().map(|r| r.confidence).collect();
    confs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    confs.dedup();
    let mut candidates = vec![0.0];
    for w in confs.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(GAMMA_ABSTAIN_ALL);

    let mut best_gamma = candidates[0];
    let mut best_phi = f64::NEG_INFINITY;
    for &gamma in &candidates {
        let phi = effective_reliability(dev_records, gamma, c);
        if phi >= best_phi {
            // >= and ascending candidates: the largest optimal γ wins
            best_phi = phi;
            best_gamma = gamma;
        }
    }
    Ok(best_gamma)
}

// ---------------------------------------------------------------------------
// ID/OOD mixture sweep
// ---------------------------------------------------------------------------

/// Deterministic subset rule shared by [`eval_mixture`] and its tests:
/// records are ordered by id, shuffled once by `seed`, and the first `n`
/// are taken.
pub fn mixture_subset<'a>(
    records: &'a [PredictionRecord],
    n: usize,
    seed: u64,
) -> Vec<&'a PredictionRecord> {
    let mut refs: Vec<&PredictionRecord> = records.iter().collect();
    refs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut refs);
    refs.truncate(n);
    refs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixturePoint {
    pub fraction: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub accuracy: f64,
    pub coverage: f64,
    pub phi: f64,
}

/// Evaluates accuracy, coverage at `gamma`, and Φ_c on mixtures combining a
/// `ceil((1-f)*N)`-subset of ID with a `ceil(f*M)`-subset of OOD records.
/// OOD subsets use `seed + 1` so the two draws are independent.
pub fn eval_mixture(
    id_records: &[PredictionRecord],
    ood_records: &[PredictionRecord],
    fractions: &[f64],
    gamma: f64,
    c: f64,
    seed: u64,
) -> Result<Vec<MixturePoint>> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::invalid(format!("fraction {f} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let n_id = ((1.0 - f) * id_records.len() as f64).ceil() as usize;
        let n_ood = (f * ood_records.len() as f64).ceil() as usize;
        if n_id + n_ood == 0 {
            return Err(Error::invalid(format!(
                "mixture at fraction {f} selects no records"
            )));
        }
        let mut chosen: Vec<&PredictionRecord> = mixture_subset(id_records, n_id, seed);
        chosen.extend(mixture_subset(ood_records, n_ood, seed.wrapping_add(1)));

        let n = chosen.len() as f64;
        let accuracy = chosen.iter().map(|r| r.soft_acc).sum::<f64>() / n;
        let covered = chosen.iter().filter(|r| r.confidence >= gamma).count();
        let mut phi_total = 0.0;
        for r in &chosen {
            if r.confidence >= gamma {
                phi_total += if r.soft_acc > 0.0 { r.soft_acc } else { -c };
            }
        }
        out.push(MixturePoint {
            fraction: f,
            n_id,
            n_ood,
            accuracy,
            coverage: covered as f64 / n,
            phi: 100.0 * phi_total / n,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reliability report
// ---------------------------------------------------------------------------

/// Default number of ECE bins.
pub const DEFAULT_ECE_BINS: usize = 15;

/// The metric bundle reported for one (model, quantization, confidence)
/// configuration. Field names follow the serialized report exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub label: String,
    pub n: usize,
    pub acc: f64,
    pub ece: f64,
    #[serde(rename = "c@0.5")]
    pub c_at_half: f64,
    #[serde(rename = "c@1")]
    pub c_at_1: f64,
    #[serde(rename = "c@5")]
    pub c_at_5: f64,
    pub auc: f64,
    pub phi_10: f64,
    pub phi_100: f64,
    pub gamma_10: f64,
    pub gamma_100: f64,
    /// ECE bin count used (report parameter, recorded for reproducibility).
    pub ece_bins: usize,
}

/// Builds the full report: accuracy, ECE, C@{0.5,1,5}%, RC-AUC, and Φ_10 /
/// Φ_100 at thresholds selected on the dev records.
pub fn reliability_report(
    test_records: &[PredictionRecord],
    dev_records: &[PredictionRecord],
    ece_bins: usize,
    label: &str,
) -> Result<ReliabilityReport> {
    require_nonempty(test_records)?;
    validate_records(test_records)?;
    validate_records(dev_records)?;
    let n = test_records.len();
    let acc = test_records.iter().map(|r| r.soft_acc).sum::<f64>() / n as f64;
    let curve = risk_coverage_curve(test_records)?;
    let gamma_10 = select_threshold(dev_records, 10.0)?;
    let gamma_100 = select_threshold(dev_records, 100.0)?;
    Ok(ReliabilityReport {
        label: label.to_string(),
        n,
        acc,
        ece: ece(test_records, ece_bins)?,
        c_at_half: coverage_at_risk(&curve, 0.005),
        c_at_1: coverage_at_risk(&curve, 0.01),
        c_at_5: coverage_at_risk(&curve, 0.05),
        auc: rc_auc(&curve),
        phi_10: effective_reliability(test_records, gamma_10, 10.0),
        phi_100: effective_reliability(test_records, gamma_100, 100.0),
        gamma_10,
        gamma_100,
        ece_bins,
    })
}
