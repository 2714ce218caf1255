//! Property tests and small brute-force oracles for the metric suite.
//! (The acceptance suite runs the full 500-set oracle sweep; these keep the
//! invariants honest at development time.)

use proptest::prelude::*;
use sqnt_core::metrics::{
    coverage_at_risk, ece, effective_reliability, eval_mixture, rc_auc, risk_coverage_curve,
    select_threshold, PredictionRecord, Source, Split,
};

fn rec(id: String, confidence: f64, soft_acc: f64) -> PredictionRecord {
    PredictionRecord {
        id,
        confidence,
        soft_acc,
        split: Split::Test,
        source: Source::Id,
        features: None,
        answer: None,
        refs: None,
    }
}

fn records_strategy(max_n: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..max_n).prop_map(|pairs| {
        pairs
            .into_iter()
            .enumerate()
            .map(|(i, (c, a))| rec(format!("r{i:04}"), (c * 16.0).round() / 16.0, a))
            .collect()
    })
}

// Independent oracle: risk of the top-k prefix by re-sorting and re-summing
// from scratch.
fn oracle_prefix_risks(records: &[PredictionRecord]) -> Vec<f64> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.id.cmp(&b.id))
    });
    (1..=sorted.len())
        .map(|k| {
            let mut s = 0.0;
            for r in &sorted[..k] {
                s += r.soft_acc;
            }
            1.0 - s / k as f64
        })
        .collect()
}

proptest! {
    #[test]
    fn curve_matches_prefix_oracle(records in records_strategy(60)) {
        let curve = risk_coverage_curve(&records).unwrap();
        let oracle = oracle_prefix_risks(&records);
        prop_assert_eq!(curve.points.len(), oracle.len());
        for (p, r) in curve.points.iter().zip(oracle.iter()) {
            prop_assert!((p.risk - r).abs() < 1e-12);
        }
        // Coverage strictly increasing, risk in [0, 1].
        for w in curve.points.windows(2) {
            prop_assert!(w[1].coverage > w[0].coverage);
        }
        for p in &curve.points {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p.risk));
        }
    }

    #[test]
    fn coverage_at_risk_monotone(records in records_strategy(50), r1 in 0.0f64..1.0, r2 in 0.0f64..1.0) {
        let curve = risk_coverage_curve(&records).unwrap();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(coverage_at_risk(&curve, lo) <= coverage_at_risk(&curve, hi));
    }

    #[test]
    fn rank_invariance_under_cubing(records in records_strategy(50)) {
        let transformed: Vec<PredictionRecord> = records
            .iter()
            .map(|r| {
                let mut t = r.clone();
                t.confidence = r.confidence.powi(3);
                t
            })
            .collect();
        let c1 = risk_coverage_curve(&records).unwrap();
        let c2 = risk_coverage_curve(&transformed).unwrap();
        prop_assert!((rc_auc(&c1) - rc_auc(&c2)).abs() < 1e-12);
        for r in [0.005, 0.01, 0.05, 0.2] {
            prop_assert_eq!(coverage_at_risk(&c1, r), coverage_at_risk(&c2, r));
        }
        let g1 = select_threshold(&records, 10.0).unwrap();
        let g2 = select_threshold(&transformed, 10.0).unwrap();
        let p1 = effective_reliability(&records, g1, 10.0);
        let p2 = effective_reliability(&transformed, g2, 10.0);
        prop_assert!((p1 - p2).abs() < 1e-9, "{} vs {}", p1, p2);
    }

    #[test]
    fn threshold_matches_exhaustive_oracle(records in records_strategy(40), c in 0.0f64..50.0) {
        let gamma = select_threshold(&records, c).unwrap();
        let phi = effective_reliability(&records, gamma, c);
        // Oracle: evaluate Φ at every candidate cut (0, midpoints, above max).
        let mut confs: Vec<f64> = records.iter().map(|r| r.confidence).collect();
        confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        confs.dedup();
        let mut candidates = vec![0.0, 1.0 + 1e-9];
        for w in confs.windows(2) {
            candidates.push((w[0] + w[1]) / 2.0);
        }
        let best = candidates
            .iter()
            .map(|&g| effective_reliability(&records, g, c))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((phi - best).abs() < 1e-12, "phi {} vs best {}", phi, best);
    }

    #[test]
    fn ece_bounded_and_zero_when_exact(records in records_strategy(50), bins in 1usize..25) {
        let e = ece(&records, bins).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        let exact: Vec<PredictionRecord> = records
            .iter()
            .map(|r| {
                let mut t = r.clone();
                t.soft_acc = t.confidence;
                t
            })
            .collect();
        prop_assert!(ece(&exact, bins).unwrap() < 1e-12);
    }

    #[test]
    fn mixture_endpoints_exact(records in records_strategy(30), seed in 0u64..1000) {
        let ood: Vec<PredictionRecord> = records
            .iter()
            .map(|r| {
                let mut t = r.clone();
                t.id = format!("ood-{}", t.id);
                t.source = Source::OodA;
                t
            })
            .collect();
        let points = eval_mixture(&records, &ood, &[0.0, 1.0], 0.5, 10.0, seed).unwrap();
        let acc = records.iter().map(|r| r.soft_acc).sum::<f64>() / records.len() as f64;
        prop_assert!((points[0].accuracy - acc).abs() < 1e-12);
        prop_assert_eq!(points[0].n_ood, 0);
        prop_assert!((points[1].accuracy - acc).abs() < 1e-12); // same soft accs
        prop_assert_eq!(points[1].n_id, 0);
    }
}

/// The perfect-ranking assignment minimizes RC-AUC over all assignments of
/// a fixed confidence set to a fixed soft-accuracy multiset (exhaustive for
/// n <= 6).
#[test]
fn perfect_ranking_minimizes_auc_exhaustively() {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let smaller = permutations(n - 1);
        let mut out = Vec::new();
        for p in smaller {
            for insert_at in 0..=p.len() {
                let mut q: Vec<usize> = p.iter().map(|&x| x + 1).collect();
                q.insert(insert_at, 0);
                out.push(q);
            }
        }
        out
    }

    let soft_sets: Vec<Vec<f64>> = vec![
        vec![1.0, 1.0, 0.0, 1.0, 0.0],
        vec![0.5, 1.0, 0.0, 1.0 / 3.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ];
    for softs in soft_sets {
        let n = softs.len();
        let confs: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let mut best = f64::INFINITY;
        let mut perfect = f64::INFINITY;
        for perm in permutations(n) {
            let records: Vec<PredictionRecord> = perm
                .iter()
                .enumerate()
                .map(|(rank, &which)| rec(format!("p{rank}"), confs[rank], softs[which]))
                .collect();
            let auc = rc_auc(&risk_coverage_curve(&records).unwrap());
            best = best.min(auc);
            // The identity-on-sorted permutation = soft descending by rank.
            let mut sorted_desc = softs.clone();
            sorted_desc.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let ranked: Vec<f64> = perm.iter().map(|&w| softs[w]).collect();
            if ranked == sorted_desc {
                perfect = perfect.min(auc);
            }
        }
        assert!(
            (perfect - best).abs() < 1e-12,
            "perfect {perfect} vs best {best} for {softs:?}"
        );
    }
}
