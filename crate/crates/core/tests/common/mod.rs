#![allow(dead_code)]

use miaudit::losses::{attention_kl_loss, combined_loss, ctc_loss, TokenSeq};
use miaudit::metrics::ScoredSet;
use miaudit::tensor::{Tape, Tensor, Var};
use miaudit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Row-normalised log-probabilities.
pub fn rand_logprobs(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
        data.extend(raw.iter().map(|x| x - lse));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Scalar objective: the output itself if scalar, else its dot product with
/// fixed pseudo-random weights.
fn objective(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7 % 11) as f64) / 10.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let obj = objective(&mut tape, out).unwrap();
    tape.value(obj).item()
}

/// Analytic gradients of the scalar objective for every input.
pub fn analytic(inputs: &[Tensor], f: &Build) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let obj = objective(&mut tape, out).unwrap();
    let g = tape.backward(obj).unwrap();
    vars.iter().map(|&v| g.wrt(v)).collect()
}

pub const FD_STEP: f64 = 1e-4;

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over every
/// input element, using central differences.
pub fn max_grad_error(inputs: &[Tensor], f: &Build) -> f64 {
    let grads = analytic(inputs, f);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
            let a = grads[i].data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Every differentiable op and both losses on seeded small inputs.
pub fn gradient_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = rng(seed);
    let m23 = |r: &mut ChaCha8Rng| rand_tensor(r, &[2, 3], -1.5, 1.5);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    cases.push(("add", vec![m23(&mut r), m23(&mut r)], Box::new(|t, v| t.add(v[0], v[1]))));
    cases.push(("sub", vec![m23(&mut r), m23(&mut r)], Box::new(|t, v| t.sub(v[0], v[1]))));
    cases.push(("mul", vec![m23(&mut r), m23(&mut r)], Box::new(|t, v| t.mul(v[0], v[1]))));
    cases.push((
        "mul_scalar_broadcast",
        vec![m23(&mut r), Tensor::scalar(0.7)],
        Box::new(|t, v| t.mul(v[0], v[1])),
    ));
    cases.push(("neg", vec![m23(&mut r)], Box::new(|t, v| Ok(t.neg(v[0])))));
    cases.push(("scale", vec![m23(&mut r)], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))));
    cases.push(("tanh", vec![m23(&mut r)], Box::new(|t, v| Ok(t.tanh(v[0])))));
    cases.push((
        "relu",
        vec![rand_away_from_zero(&mut r, &[2, 3])],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    ));
    cases.push(("exp", vec![m23(&mut r)], Box::new(|t, v| Ok(t.exp(v[0])))));
    cases.push((
        "log",
        vec![rand_tensor(&mut r, &[2, 3], 0.3, 2.0)],
        Box::new(|t, v| Ok(t.log(v[0]))),
    ));
    cases.push((
        "matmul",
        vec![m23(&mut r), rand_tensor(&mut r, &[3, 4], -1.0, 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    ));
    cases.push((
        "add_bias",
        vec![m23(&mut r), rand_tensor(&mut r, &[3], -1.0, 1.0)],
        Box::new(|t, v| t.add_bias(v[0], v[1])),
    ));
    cases.push(("sum", vec![m23(&mut r)], Box::new(|t, v| Ok(t.sum(v[0])))));
    cases.push(("mean", vec![m23(&mut r)], Box::new(|t, v| Ok(t.mean(v[0])))));
    cases.push(("transpose", vec![m23(&mut r)], Box::new(|t, v| t.transpose(v[0]))));
    cases.push(("reshape", vec![m23(&mut r)], Box::new(|t, v| t.reshape(v[0], &[3, 2]))));
    cases.push(("log_softmax", vec![m23(&mut r)], Box::new(|t, v| t.log_softmax(v[0]))));
    cases.push(("logsumexp_axis0", vec![m23(&mut r)], Box::new(|t, v| t.logsumexp(v[0], 0))));
    cases.push(("logsumexp_axis1", vec![m23(&mut r)], Box::new(|t, v| t.logsumexp(v[0], 1))));
    cases.push((
        "gather",
        vec![m23(&mut r)],
        Box::new(|t, v| t.gather(v[0], vec![Some(5), None, Some(0), Some(5)], &[2, 2], 0.0)),
    ));
    cases.push(("row", vec![m23(&mut r)], Box::new(|t, v| t.row(v[0], 1))));
    cases.push(("stack", vec![m23(&mut r), m23(&mut r)], Box::new(|t, v| t.stack(v))));
    cases.push((
        "concat_cols",
        vec![m23(&mut r), rand_tensor(&mut r, &[2, 1], -1.0, 1.0)],
        Box::new(|t, v| t.concat_cols(v)),
    ));
    cases.push((
        "ctc_loss",
        vec![rand_tensor(&mut r, &[5, 3], -2.0, 2.0)],
        Box::new(|t, v| {
            let lp = t.log_softmax(v[0])?;
            Ok(ctc_loss(t, lp, &TokenSeq::new(vec![1, 2, 2]).unwrap())?.loss)
        }),
    ));
    cases.push((
        "attention_kl_loss",
        vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0)],
        Box::new(|t, v| {
            let lp = t.log_softmax(v[0])?;
            attention_kl_loss(t, lp, &TokenSeq::new(vec![2, 1]).unwrap(), 0.1)
        }),
    ));
    cases.push((
        "combined_loss",
        vec![
            rand_tensor(&mut r, &[4, 3], -2.0, 2.0),
            rand_tensor(&mut r, &[2, 4], -2.0, 2.0),
        ],
        Box::new(|t, v| {
            let y = TokenSeq::new(vec![2]).unwrap();
            let c = t.log_softmax(v[0])?;
            let ctc = ctc_loss(t, c, &y)?.loss;
            let d = t.log_softmax(v[1])?;
            let att = attention_kl_loss(t, d, &y, 0.2)?;
            combined_loss(t, att, ctc, 0.7)
        }),
    ));
    cases
}

/// Minimum unit-cost edits by exhaustive branch-and-bound search over
/// alignments. A leading match is always taken since it is never worse.
pub fn exhaustive_edits(r: &[u32], h: &[u32]) -> usize {
    fn go(r: &[u32], h: &[u32], cost: usize, best: &mut usize) {
        if cost >= *best {
            return;
        }
        match (r.split_first(), h.split_first()) {
            (None, None) => *best = cost,
            (Some(_), None) => *best = (*best).min(cost + r.len()),
            (None, Some(_)) => *best = (*best).min(cost + h.len()),
            (Some((a, rt)), Some((b, ht))) => {
                if a == b {
                    go(rt, ht, cost, best);
                    return;
                }
                go(rt, ht, cost + 1, best);
                go(rt, h, cost + 1, best);
                go(r, ht, cost + 1, best);
            }
        }
    }
    let mut best = usize::MAX;
    go(r, h, 0, &mut best);
    best
}

/// Every sequence over `0..alphabet` of length at most `max_len`.
pub fn all_sequences(alphabet: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for a in 0..alphabet {
                let mut t: Vec<u32> = s.clone();
                t.push(a);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Best TPR with FPR at most `target`, trying every score (and +inf) as a
/// threshold and counting directly.
pub fn exhaustive_tpr(set: &ScoredSet, target: f64) -> f64 {
    let s = set.scores();
    let l = set.labels();
    let (p, n) = (set.n_pos() as f64, set.n_neg() as f64);
    let mut best = 0.0f64;
    for &t in s.iter().chain(std::iter::once(&f64::INFINITY)) {
        let tp = s.iter().zip(l).filter(|(x, y)| **x >= t && **y == 1).count() as f64;
        let fp = s.iter().zip(l).filter(|(x, y)| **x >= t && **y == 0).count() as f64;
        if fp / n <= target {
            best = best.max(tp / p);
        }
    }
    best
}

/// Seeded score set with both classes, possibly with ties.
pub fn random_scored_set(rng: &mut impl Rng, max_n: usize) -> ScoredSet {
    let n = rng.random_range(2..=max_n);
    let coarse = rng.random_bool(0.3);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = labels
        .iter()
        .map(|&y| {
            let v: f64 = rng.random_range(0.0..1.0) + 0.3 * f64::from(y);
            if coarse {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        })
        .collect();
    ScoredSet::new(scores, labels).unwrap()
}
