use proptest::prelude::*;
use shalrt::metrics::{intent_accuracy, overall_accuracy, slot_f1, uncoordinated_analysis};

const LABELS: [&str; 5] = ["O", "B-a", "I-a", "B-b", "I-b"];

fn pair() -> impl Strategy<Value = (Vec<String>, Vec<String>, usize, usize)> {
    (1usize..10).prop_flat_map(|n| {
        (
            proptest::collection::vec(0..LABELS.len(), n),
            proptest::collection::vec(0..LABELS.len(), n),
            0usize..3,
            0usize..3,
        )
            .prop_map(|(g, p, gi, pi)| {
                let name = |v: Vec<usize>| v.into_iter().map(|i| LABELS[i].to_string()).collect();
                (name(g), name(p), gi, pi)
            })
    })
}

proptest! {
    #[test]
    fn unc_is_bi_plus_ib(corpus in proptest::collection::vec(pair(), 1..20)) {
        let gold: Vec<_> = corpus.iter().map(|c| c.0.clone()).collect();
        let pred: Vec<_> = corpus.iter().map(|c| c.1.clone()).collect();
        let t = uncoordinated_analysis(&gold, &pred).unwrap();
        prop_assert_eq!(t.unc, t.bi + t.ib);
        prop_assert!(t.unc <= t.slot_errors);
    }

    #[test]
    fn overall_never_exceeds_its_parts(corpus in proptest::collection::vec(pair(), 1..20)) {
        let gold: Vec<_> = corpus.iter().map(|c| c.0.clone()).collect();
        let pred: Vec<_> = corpus.iter().map(|c| c.1.clone()).collect();
        let gi: Vec<_> = corpus.iter().map(|c| c.2).collect();
        let pi: Vec<_> = corpus.iter().map(|c| c.3).collect();
        let overall = overall_accuracy(&gi, &pi, &gold, &pred).unwrap();
        let intent = intent_accuracy(&gi, &pi).unwrap();
        let all_slots = gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64;
        prop_assert!(overall <= intent.min(all_slots) + 1e-12);
    }

    #[test]
    fn f1_is_one_on_identity_and_symmetric_in_counts(corpus in proptest::collection::vec(pair(), 1..20)) {
        let gold: Vec<_> = corpus.iter().map(|c| c.0.clone()).collect();
        let pred: Vec<_> = corpus.iter().map(|c| c.1.clone()).collect();
        let same = slot_f1(&gold, &gold).unwrap();
        prop_assert!(same.gold == 0 || same.f1 == 1.0);
        let a = slot_f1(&gold, &pred).unwrap();
        let b = slot_f1(&pred, &gold).unwrap();
        prop_assert_eq!(a.correct, b.correct);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
    }
}
