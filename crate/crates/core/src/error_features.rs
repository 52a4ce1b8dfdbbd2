//! Transcription-error features: token-level edit counts against the
//! reference for each of the top-K hypotheses, plus length ratio and
//! confidence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TokenSeq;
use crate::model::Hypothesis;

/// Values recorded per hypothesis.
pub const FEATURES_PER_HYPOTHESIS: usize = 7;

/// Column names of one hypothesis block, in order.
pub const BLOCK_NAMES: [&str; FEATURES_PER_HYPOTHESIS] = [
    "wer",
    "edits_norm",
    "subs_norm",
    "ins_norm",
    "del_norm",
    "len_ratio",
    "confidence",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost minimum edit alignment of `hyp` against `reference`.
///
/// Among equal-cost alignments one with the most substitutions is chosen,
/// then the backtrace prefers a deletion over an insertion. Because the
/// substitution count is maximised over all optimal alignments, swapping
/// the arguments keeps it and swaps insertions with deletions.
pub fn levenshtein(reference: &TokenSeq, hyp: &TokenSeq) -> EditCounts {
    let (r, h) = (reference.tokens(), hyp.tokens());
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    // (edits, -substitutions), compared lexicographically.
    let mut d = vec![(0usize, 0isize); (n + 1) * w];
    for i in 0..=n {
        d[i * w] = (i, 0);
    }
    for j in 0..=m {
        d[j] = (j, 0);
    }
    let step = |c: (usize, isize), sub: bool| {
        if sub {
            (c.0 + 1, c.1 - 1)
        } else {
            c
        }
    };
    let gap = |c: (usize, isize)| (c.0 + 1, c.1);
    for i in 1..=n {
        for j in 1..=m {
            let diag = step(d[(i - 1) * w + j - 1], r[i - 1] != h[j - 1]);
            let del = gap(d[(i - 1) * w + j]);
            let ins = gap(d[i * w + j - 1]);
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let sub = r[i - 1] != h[j - 1];
            if step(d[(i - 1) * w + j - 1], sub) == here {
                counts.substitutions += usize::from(sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && gap(d[(i - 1) * w + j]) == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// The seven error features of one hypothesis.
pub fn hypothesis_features(reference: &TokenSeq, hyp: &Hypothesis) -> [f64; FEATURES_PER_HYPOTHESIS] {
    let e = levenshtein(reference, &hyp.tokens);
    let denom = reference.len().max(1) as f64;
    [
        e.edits() as f64 / denom,
        e.edits() as f64 / denom,
        e.substitutions as f64 / denom,
        e.insertions as f64 / denom,
        e.deletions as f64 / denom,
        hyp.tokens.len() as f64 / denom,
        hyp.confidence,
    ]
}

/// Concatenated features of the first `k` hypotheses in rank order. When
/// fewer than `k` are available the last block is repeated.
pub fn error_block(reference: &TokenSeq, hyps: &[Hypothesis], k: usize) -> Result<Vec<f64>> {
    if hyps.is_empty() {
        return Err(Error::invalid("error features need at least one hypothesis"));
    }
    if k == 0 {
        return Err(Error::invalid("number of hypotheses per block must be positive"));
    }
    let mut out = Vec::with_capacity(FEATURES_PER_HYPOTHESIS * k);
    let mut last = [0.0; FEATURES_PER_HYPOTHESIS];
    for rank in 0..k {
        if let Some(h) = hyps.get(rank) {
            last = hypothesis_features(reference, h);
        }
        out.extend_from_slice(&last);
    }
    Ok(out)
}
