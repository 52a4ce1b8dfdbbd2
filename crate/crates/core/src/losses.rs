//! CTC and attention losses, both recorded on a [`Tape`] so their gradients
//! come from the same reverse sweep as the rest of the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Reserved CTC blank id.
pub const BLANK: u32 = 0;

/// A transcription as token ids. Never contains [`BLANK`]; may be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.contains(&BLANK) {
            return Err(Error::invalid("token sequence contains the blank id"));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn empty() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks every token lies in `[1, vocab_size - 1]`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "token {t} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    /// Fewest frames any CTC alignment of this sequence needs: one per label
    /// plus a separating blank between equal neighbours.
    pub fn ctc_min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        TokenSeq::new(v)
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(t: TokenSeq) -> Self {
        t.0
    }
}

/// The clean loss feature pair, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPair {
    pub attention_kl: f64,
    pub ctc: f64,
}

/// Ceiling applied to non-finite or overflowing losses before they become
/// classifier features.
pub const LOSS_CEILING: f64 = 1e4;

impl LossPair {
    pub fn clamped(self) -> [f64; 2] {
        [clamp_loss(self.attention_kl), clamp_loss(self.ctc)]
    }
}

pub fn clamp_loss(v: f64) -> f64 {
    if v.is_nan() || v > LOSS_CEILING {
        LOSS_CEILING
    } else {
        v
    }
}

/// CTC loss node plus the infeasibility flag.
#[derive(Clone, Copy, Debug)]
pub struct CtcLoss {
    pub loss: Var,
    pub infeasible: bool,
}

/// Negative log-likelihood of `target` under per-frame log-distributions
/// `logprobs` (`T×V`, blank id 0), via the log-domain forward recursion over
/// the blank-extended label sequence.
///
/// A target that cannot fit in `T` frames yields `+inf` with
/// `infeasible = true`.
pub fn ctc_loss(tape: &mut Tape, logprobs: Var, target: &TokenSeq) -> Result<CtcLoss> {
    let shape = tape.shape(logprobs).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::invalid(format!(
            "ctc_loss expects nonempty T×V log-probabilities, got {shape:?}"
        )));
    }
    let (frames, vocab) = (shape[0], shape[1]);
    target.check_vocab(vocab)?;
    if target.ctc_min_frames() > frames {
        let loss = tape.constant(Tensor::scalar(f64::INFINITY));
        return Ok(CtcLoss {
            loss,
            infeasible: true,
        });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK as usize);
    for &tok in target.tokens() {
        ext.push(tok as usize);
        ext.push(BLANK as usize);
    }
    let s_len = ext.len();

    // Skip transitions s-2 -> s are allowed onto a label that differs from
    // the label two positions back.
    let skip_ok: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK as usize && ext[s] != ext[s - 2])
        .collect();
    let step: Vec<Option<usize>> = (0..s_len).map(|s| s.checked_sub(1)).collect();
    let skip: Vec<Option<usize>> = (0..s_len)
        .map(|s| skip_ok[s].then(|| s - 2))
        .collect();

    let emit = |tape: &mut Tape, t: usize| -> Result<Var> {
        let index = ext.iter().map(|&l| Some(t * vocab + l)).collect();
        tape.gather(logprobs, index, &[s_len], 0.0)
    };

    let init_index = (0..s_len)
        .map(|s| (s < 2).then(|| ext[s]))
        .collect();
    let mut alpha = tape.gather(logprobs, init_index, &[s_len], f64::NEG_INFINITY)?;

    for t in 1..frames {
        let a_step = tape.gather(alpha, step.clone(), &[s_len], f64::NEG_INFINITY)?;
        let a_skip = tape.gather(alpha, skip.clone(), &[s_len], f64::NEG_INFINITY)?;
        let stacked = tape.stack(&[alpha, a_step, a_skip])?;
        let merged = tape.logsumexp(stacked, 0)?;
        let e = emit(tape, t)?;
        alpha = tape.add(merged, e)?;
    }

    let tail = if s_len >= 2 {
        vec![Some(s_len - 1), Some(s_len - 2)]
    } else {
        vec![Some(0)]
    };
    let n = tail.len();
    let ends = tape.gather(alpha, tail, &[n], f64::NEG_INFINITY)?;
    let total = tape.logsumexp(ends, 0)?;
    let loss = tape.neg(total);
    let infeasible = tape.value(loss).item() == f64::INFINITY;
    Ok(CtcLoss { loss, infeasible })
}

/// Convenience wrapper evaluating [`ctc_loss`] on a plain tensor.
pub fn ctc_loss_value(logprobs: &Tensor, target: &TokenSeq) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(logprobs.clone());
    let out = ctc_loss(&mut tape, lp, target)?;
    Ok(tape.value(out.loss).item())
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Maximum frames accepted by [`ctc_brute_force`].
pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
/// Maximum vocabulary accepted by [`ctc_brute_force`].
pub const BRUTE_FORCE_MAX_VOCAB: usize = 4;

/// Reference CTC loss by enumerating all `V^T` frame paths.
pub fn ctc_brute_force(logprobs: &Tensor, target: &TokenSeq) -> Result<f64> {
    let shape = logprobs.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("ctc_brute_force expects a T×V matrix"));
    }
    let (frames, vocab) = (shape[0], shape[1]);
    if frames > BRUTE_FORCE_MAX_FRAMES || vocab > BRUTE_FORCE_MAX_VOCAB || frames == 0 {
        return Err(Error::invalid(format!(
            "enumeration bound exceeded: T={frames} (max {BRUTE_FORCE_MAX_FRAMES}), \
             V={vocab} (max {BRUTE_FORCE_MAX_VOCAB})"
        )));
    }
    let mut path = vec![0u32; frames];
    let mut total = 0.0f64;
    let n_paths = vocab.pow(frames as u32);
    for code in 0..n_paths {
        let mut c = code;
        for p in path.iter_mut() {
            *p = (c % vocab) as u32;
            c /= vocab;
        }
        if collapse_path(&path) == target.tokens() {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &v)| logprobs.at(t, v as usize))
                .sum();
            total += lp.exp();
        }
    }
    Ok(-total.ln())
}

/// Label-smoothed target distribution for one decoder position.
fn smoothed_row(target: usize, width: usize, smoothing: f64) -> Vec<f64> {
    let off = if width > 1 {
        smoothing / (width - 1) as f64
    } else {
        0.0
    };
    let mut row = vec![off; width];
    row[target] = 1.0 - smoothing;
    row
}

/// Mean over decoder positions of `KL(q_u || p_u)`, where `q_u` is the
/// label-smoothed one-hot of the target token (end symbol at the final
/// position, id `V' - 1`) and `p_u = exp(dec_logprobs[u])`.
pub fn attention_kl_loss(
    tape: &mut Tape,
    dec_logprobs: Var,
    target: &TokenSeq,
    smoothing: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!(
            "label smoothing {smoothing} outside [0, 1)"
        )));
    }
    let shape = tape.shape(dec_logprobs).to_vec();
    let expected_rows = target.len() + 1;
    if shape.len() != 2 || shape[0] != expected_rows {
        return Err(Error::ShapeMismatch {
            op: "attention_kl_loss",
            left: shape,
            right: vec![expected_rows],
        });
    }
    let width = shape[1];
    let eos = width - 1;
    target.check_vocab(eos)?;

    let mut q = Vec::with_capacity(expected_rows * width);
    let mut entropy_term = 0.0;
    for u in 0..expected_rows {
        let tok = target.tokens().get(u).map_or(eos, |&t| t as usize);
        let row = smoothed_row(tok, width, smoothing);
        entropy_term += row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        q.extend(row);
    }
    let q = tape.constant(Tensor::new(shape, q)?);
    let weighted = tape.mul(q, dec_logprobs)?;
    let cross = tape.sum(weighted);
    let neg_cross = tape.neg(cross);
    let bias = tape.constant(Tensor::scalar(entropy_term));
    let total = tape.add(neg_cross, bias)?;
    Ok(tape.scale(total, 1.0 / expected_rows as f64))
}

/// `att_weight * att + (1 - att_weight) * ctc`, recorded on the tape.
pub fn combined_loss(tape: &mut Tape, att: Var, ctc: Var, att_weight: f64) -> Result<Var> {
    let a = tape.scale(att, att_weight);
    let c = tape.scale(ctc, 1.0 - att_weight);
    tape.add(a, c)
}

/// Scalar form of [`combined_loss`].
pub fn combine(att: f64, ctc: f64, att_weight: f64) -> f64 {
    att_weight * att + (1.0 - att_weight) * ctc
}
