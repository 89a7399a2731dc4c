mod common;

use caltrain::diffcore::{Matrix, Tape};
use caltrain::losses::{
    avuc_loss, mmce_loss, paired_confidence_loss, probability_loss, soft_ece_loss, BatchView, LossSpec, Strategy as LossStrategy,
};
use caltrain::metrics::{aece, bin_adaptive, brier, ece, mce, mcnemar, oe};
use caltrain::model::kl_loss;
use caltrain::uncertainty::{UncertaintyEstimate, UncertaintyKind};
use caltrain::Record64;
use common::*;
use proptest::prelude::*;

fn prob() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..=15).prop_map(|k| k as f64 / 15.0),
        Just(0.5),
        0.0..=1.0f64,
    ]
}

fn records(max: usize) -> impl Strategy<Value = Vec<Record64>> {
    prop::collection::vec((prob(), 0u8..2), 1..max)
        .prop_map(|v| v.into_iter().map(|(p, g)| Record64::from_positive(p, g)).collect())
}

fn batch_probs(max: usize) -> impl Strategy<Value = Vec<(f64, u8)>> {
    prop::collection::vec((0.01..0.99f64, 0u8..2), 2..max)
}

fn view(rows: &[(f64, u8)]) -> (Tape<f64>, BatchView<f64>) {
    let mut t = Tape::new();
    let m = Matrix::from_fn(rows.len(), 2, |i, k| if k == 1 { rows[i].0 } else { 1.0 - rows[i].0 });
    let p = t.leaf(m);
    let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
    let b = BatchView::new(&mut t, p, &labels).unwrap();
    (t, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_match_reference(recs in records(300), m in 1usize..20) {
        let eq = oracle_equal_bins(&recs, m);
        let ad = oracle_adaptive_bins(&recs, m);
        prop_assert!((ece(&recs, m).unwrap() - oracle_ece_from(&recs, &eq)).abs() < 1e-10);
        prop_assert!((aece(&recs, m).unwrap() - oracle_ece_from(&recs, &ad)).abs() < 1e-10);
        prop_assert!((oe(&recs, m).unwrap() - oracle_oe(&recs, m)).abs() < 1e-10);
        prop_assert!((mce(&recs, m).unwrap() - oracle_mce(&recs, m)).abs() < 1e-10);
        prop_assert!((brier(&recs).unwrap() - oracle_brier(&recs)).abs() < 1e-10);
    }

    #[test]
    fn metric_orderings(recs in records(300)) {
        let e = ece(&recs, 15).unwrap();
        prop_assert!(oe(&recs, 15).unwrap() <= e + 1e-15);
        prop_assert!(e <= mce(&recs, 15).unwrap() + 1e-15);
        prop_assert!((0.0..=1.0).contains(&e));
        let b = brier(&recs).unwrap();
        prop_assert!((0.0..=2.0).contains(&b));
    }

    #[test]
    fn adaptive_bins_are_equal_mass(recs in records(400), m in 1usize..20) {
        let t = bin_adaptive(&recs, m).unwrap();
        let sizes: Vec<usize> = t.bins.iter().map(|b| b.count()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), recs.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn mcnemar_matches_reference_and_is_symmetric(pairs in prop::collection::vec((prob(), prob(), 0u8..2), 1..300)) {
        let a: Vec<Record64> = pairs.iter().map(|&(p, _, g)| Record64::from_positive(p, g)).collect();
        let b: Vec<Record64> = pairs.iter().map(|&(_, q, g)| Record64::from_positive(q, g)).collect();
        let t = mcnemar(&a, &b).unwrap();
        let (stat, p) = oracle_mcnemar(&a, &b);
        prop_assert!((t.statistic - stat).abs() < 1e-10);
        prop_assert!((t.p_value - p).abs() < 1e-10);
        let u = mcnemar(&b, &a).unwrap();
        prop_assert_eq!(t.statistic, u.statistic);
        prop_assert_eq!((t.a_only, t.b_only), (u.b_only, u.a_only));
    }

    #[test]
    fn extra_terms_are_non_negative(rows in batch_probs(40)) {
        let (mut t, b) = view(&rows);
        let vals = [
            paired_confidence_loss(&mut t, &b, 0.6).unwrap(),
            probability_loss(&mut t, &b).unwrap(),
            avuc_loss(&mut t, &b, 0.5).unwrap(),
            soft_ece_loss(&mut t, &b, 15, 0.1, 2.0).unwrap(),
            mmce_loss(&mut t, &b, 0.4).unwrap(),
        ];
        for v in vals {
            let x = t.scalar_value(v);
            prop_assert!(x.is_finite() && x >= 0.0, "{}", x);
        }
    }

    #[test]
    fn mmce_is_permutation_symmetric(rows in batch_probs(40), rot in 0usize..40) {
        let (mut t, b) = view(&rows);
        let v = mmce_loss(&mut t, &b, 0.4).unwrap();
        let mut shuffled = rows.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (mut t2, b2) = view(&shuffled);
        let v2 = mmce_loss(&mut t2, &b2, 0.4).unwrap();
        prop_assert!((t.scalar_value(v) - t2.scalar_value(v2)).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative(vals in prop::collection::vec((-3.0..3.0f64, -10.0..10.0f64), 1..30)) {
        let mut t = Tape::new();
        let mu = t.leaf(Matrix::from_vec(vals.len(), 1, vals.iter().map(|v| v.0).collect()));
        let lv = t.leaf(Matrix::from_vec(vals.len(), 1, vals.iter().map(|v| v.1).collect()));
        let kl = kl_loss(&mut t, mu, lv).unwrap();
        prop_assert!(t.scalar_value(kl) >= -1e-12);
    }

    #[test]
    fn vote_fraction_ignores_order(votes in prop::collection::vec(0u8..2, 1..50)) {
        let a = UncertaintyEstimate { kind: UncertaintyKind::Epistemic, predictions: votes.clone() };
        let mut rev = votes.clone();
        rev.reverse();
        let b = UncertaintyEstimate { kind: UncertaintyKind::Epistemic, predictions: rev };
        prop_assert_eq!(a.c_positive(), b.c_positive());
        prop_assert!((0.0..=1.0).contains(&a.c_positive()));
    }

    #[test]
    fn spec_json_roundtrip(idx in 0usize..7, lam in 0.0..5.0f64) {
        let spec = LossSpec::new(LossStrategy::ALL[idx]).with("lambda_n", lam).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let back: LossSpec = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(spec, back);
    }
}

#[test]
fn sharp_soft_ece_recovers_hard_ece() {
    let mut r = rng(11);
    for _ in 0..50 {
        use rand::Rng;
        let n = r.random_range(5..60);
        // Confidences kept at least 0.005 from every bin edge.
        let rows: Vec<(f64, u8)> = (0..n)
            .map(|_| {
                let m = r.random_range(8..15) as f64;
                let off = r.random_range(0.1..0.9);
                let c = (m + off) / 15.0;
                let p = if r.random_bool(0.5) { c } else { 1.0 - c };
                (p, r.random_range(0..2u8))
            })
            .collect();
        let recs: Vec<Record64> = rows.iter().map(|&(p, g)| Record64::from_positive(p, g)).collect();
        let (mut t, b) = view(&rows);
        let s = soft_ece_loss(&mut t, &b, 15, 1e-6, 1.0).unwrap();
        let hard = ece(&recs, 15).unwrap();
        assert!((t.scalar_value(s) - hard).abs() < 1e-6, "{} vs {hard}", t.scalar_value(s));
    }
}
