mod common;

use miaudit::error_features::{error_block, levenshtein, FEATURES_PER_HYPOTHESIS};
use miaudit::losses::TokenSeq;
use miaudit::model::Hypothesis;
use proptest::prelude::*;

fn seq(v: &[u32]) -> TokenSeq {
    TokenSeq::new(v.iter().map(|t| t + 1).collect()).unwrap()
}

#[test]
fn matches_exhaustive_search_on_all_short_pairs() {
    let all = common::all_sequences(3, 5);
    assert_eq!(all.len(), 364);
    for r in &all {
        for h in &all {
            let e = levenshtein(&seq(r), &seq(h));
            assert_eq!(e.edits(), common::exhaustive_edits(r, h), "{r:?} vs {h:?}");
        }
    }
}

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..4, 0..9)
}

proptest! {
    #[test]
    fn symmetric_with_insertions_and_deletions_swapped(r in tokens(), h in tokens()) {
        let a = levenshtein(&seq(&r), &seq(&h));
        let b = levenshtein(&seq(&h), &seq(&r));
        prop_assert_eq!(a.edits(), b.edits());
        prop_assert_eq!(a.edits() - a.substitutions, b.edits() - b.substitutions);
        prop_assert_eq!(a.insertions as i64 - a.deletions as i64, h.len() as i64 - r.len() as i64);
        prop_assert_eq!(b.insertions as i64 - b.deletions as i64, r.len() as i64 - h.len() as i64);
    }

    #[test]
    fn block_length_is_seven_per_hypothesis(
        r in tokens(),
        hyps in prop::collection::vec((tokens(), -20.0f64..0.0), 1..6),
        k in 1usize..7,
    ) {
        let hyps: Vec<Hypothesis> = hyps.iter().map(|(t, s)| Hypothesis::new(seq(t), *s)).collect();
        let block = error_block(&seq(&r), &hyps, k).unwrap();
        prop_assert_eq!(block.len(), FEATURES_PER_HYPOTHESIS * k);
        prop_assert!(block.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
