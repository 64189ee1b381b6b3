use proptest::prelude::*;

use comer::data::Vocab;
use comer::metrics::{predictions_tsv, token_edit_distance, EvalReport, Prediction};

#[test]
fn edit_distance_examples() {
    assert_eq!(token_edit_distance(&[4, 5, 6], &[4, 5, 6]), 0);
    assert_eq!(token_edit_distance(&[4, 5, 6], &[4, 6]), 1);
    assert_eq!(token_edit_distance(&[], &[4, 5, 6, 7]), 4);
    assert_eq!(token_edit_distance(&[4, 5], &[]), 2);
    assert_eq!(token_edit_distance(&[4, 5, 6], &[6, 5, 4]), 2);
}

#[test]
fn hand_counted_report() {
    let r = EvalReport::from_distances(&[(3, 0), (12, 1), (20, 2), (31, 5)]).unwrap();
    assert_eq!(r.exprate, 0.25);
    assert_eq!(r.err_le_1, 0.5);
    assert_eq!(r.err_le_2, 0.75);
    assert_eq!(r.err_le_3, 0.75);
    let counts: Vec<_> = r.buckets.iter().map(|b| (b.bucket.as_str(), b.count, b.exprate)).collect();
    assert_eq!(counts, vec![("1-9", 1, 1.0), ("10-19", 1, 0.0), ("20-29", 1, 0.0), ("30+", 1, 0.0)]);
    assert_eq!(r.long_count, 2);
    assert_eq!(r.long_exprate, 0.0);
    assert!(r.is_monotone());
}

#[test]
fn perfect_predictions() {
    let r = EvalReport::from_distances(&[(1, 0), (15, 0), (29, 0)]).unwrap();
    assert_eq!((r.exprate, r.err_le_1, r.err_le_2, r.err_le_3), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(r.long_exprate, 1.0);
}

#[test]
fn empty_set_is_rejected() {
    assert!(EvalReport::from_distances(&[]).is_err());
}

#[test]
fn json_carries_the_metric_keys() {
    let r = EvalReport::from_distances(&[(4, 0), (9, 3)]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for k in ["exprate", "err_le_1", "err_le_2", "err_le_3", "buckets", "long_exprate"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert!(r.table().contains("10-19"));
}

#[test]
fn predictions_as_tsv() {
    let v = Vocab::default();
    let preds = [Prediction { id: 3, distance: 1, tokens: v.tokenize("x + 1").unwrap() }, Prediction { id: 4, distance: 0, tokens: vec![] }];
    let tsv = predictions_tsv(&preds, &v).unwrap();
    let lines: Vec<_> = tsv.lines().collect();
    assert!(lines.contains(&"0003\t1\tx + 1"), "{tsv}");
    assert!(lines.iter().any(|l| l.starts_with("0004\t0")));
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(4usize..8, 0..10), b in prop::collection::vec(4usize..8, 0..10), c in prop::collection::vec(4usize..8, 0..10)) {
        let ab = token_edit_distance(&a, &b);
        prop_assert_eq!(ab, token_edit_distance(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(token_edit_distance(&a, &c) <= ab + token_edit_distance(&b, &c));
    }

    #[test]
    fn report_matches_naive_recount(items in prop::collection::vec((1usize..35, 0usize..6), 1..60)) {
        let r = EvalReport::from_distances(&items).unwrap();
        let n = items.len() as f64;
        prop_assert_eq!(r.exprate, items.iter().filter(|i| i.1 == 0).count() as f64 / n);
        prop_assert_eq!(r.err_le_2, items.iter().filter(|i| i.1 <= 2).count() as f64 / n);
        prop_assert!(r.is_monotone());
        prop_assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), items.len());
    }
}
