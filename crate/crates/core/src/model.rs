//! A small encoder-decoder recogniser with a CTC head and an attention
//! decoder, its Adam training loop, beam search, and checkpoint I/O.
//!
//! Token ids: 0 is the CTC blank, `1..V` are real tokens. The decoder emits
//! `V + 1` classes where id `V` is the end symbol; the same id doubles as the
//! start symbol fed at the first decoding step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_features::levenshtein;
use crate::losses::{attention_kl_loss, combined_loss, ctc_loss, LossPair, TokenSeq};
use crate::synth::{corpus_fingerprint, Utterance};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::rng_for;

/// Shifts of the previous attention vector fed to the location term.
const LOC_SHIFTS: [isize; 8] = [-1, 0, 1, 2, 3, 4, 5, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Stacked tanh RNN encoder.
    Recurrent,
    /// Stacked width-3 convolution encoder with ReLU.
    Convolutional,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Recurrent => "recurrent",
            Architecture::Convolutional => "convolutional",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Architecture::Recurrent),
            "convolutional" => Ok(Architecture::Convolutional),
            other => Err(Error::invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    /// CTC vocabulary size including the blank.
    pub vocab_size: usize,
    /// Weight of the attention loss in the combined objective.
    pub attention_weight: f64,
    pub label_smoothing: f64,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 8,
            hidden_dim: 64,
            num_encoder_layers: 1,
            vocab_size: 12,
            attention_weight: 0.7,
            label_smoothing: 0.45,
            architecture: Architecture::Recurrent,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid(format!("vocab_size {} < 2", self.vocab_size)));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::invalid("hidden_dim and input_dim must be positive"));
        }
        if !(1..=2).contains(&self.num_encoder_layers) {
            return Err(Error::invalid(format!(
                "num_encoder_layers must be 1 or 2, got {}",
                self.num_encoder_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.attention_weight) {
            return Err(Error::invalid("attention_weight outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing outside [0, 1)"));
        }
        Ok(())
    }

    /// Decoder output width: every CTC class plus the end symbol.
    pub fn decoder_width(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn end_id(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Parameter names, shapes and initialisation fan-ins, in binding order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (h, v, w) = (self.hidden_dim, self.vocab_size, self.decoder_width());
        let mut specs = Vec::new();
        let mut width = self.input_dim;
        for l in 0..self.num_encoder_layers {
            match self.architecture {
                Architecture::Recurrent => {
                    specs.push((format!("enc.{l}.w_ih"), vec![width, h], width));
                    specs.push((format!("enc.{l}.w_hh"), vec![h, h], h));
                    specs.push((format!("enc.{l}.b"), vec![h], width));
                }
                Architecture::Convolutional => {
                    specs.push((format!("enc.{l}.w"), vec![3 * width, h], 3 * width));
                    specs.push((format!("enc.{l}.b"), vec![h], 3 * width));
                }
            }
            width = h;
        }
        specs.push(("ctc.w".into(), vec![h, v], h));
        specs.push(("ctc.b".into(), vec![v], h));
        specs.push(("dec.end".into(), vec![1, h], h));
        specs.push(("dec.embed".into(), vec![w, h], 1));
        specs.push(("dec.w_e".into(), vec![h, h], h));
        specs.push(("dec.w_c".into(), vec![h, h], h));
        specs.push(("dec.w_s".into(), vec![h, h], h));
        specs.push(("dec.b".into(), vec![h], h));
        specs.push(("dec.loc".into(), vec![1, LOC_SHIFTS.len()], LOC_SHIFTS.len()));
        specs.push(("dec.w_o".into(), vec![2 * h, w], 2 * h));
        specs.push(("dec.b_o".into(), vec![w], 2 * h));
        specs
    }
}

/// Metadata recorded by [`train`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    /// Mean combined loss of each epoch, measured during the pass.
    pub loss_history: Vec<f64>,
    pub final_attention_kl: Option<f64>,
    pub final_ctc: Option<f64>,
    /// Greedy-decoding token accuracy on the training set.
    pub greedy_token_accuracy: Option<f64>,
    /// Fraction of training utterances whose greedy transcript is exact.
    pub greedy_exact_match: Option<f64>,
    pub dataset_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub training: TrainingMeta,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Rounds to f32, stepping one ulp toward zero if rounding left `[-s, s]`.
fn f32_within(x: f64, s: f64) -> f64 {
    let r = x as f32;
    if (r as f64).abs() <= s {
        r as f64
    } else {
        f32::from_bits(r.to_bits() - 1) as f64
    }
}

/// Draws every parameter from `U(-s, s)` with `s = 1/sqrt(fan_in)`, rounded to
/// f32 so checkpoints round-trip exactly.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut params = BTreeMap::new();
    for (i, (name, shape, fan_in)) in config.param_specs().into_iter().enumerate() {
        let s = 1.0 / (fan_in as f64).sqrt();
        let mut rng = rng_for(config.seed, "init", &[i as u64]);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| f32_within(rng.random_range(-s..=s), s))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        training: TrainingMeta::default(),
    })
}

impl Checkpoint {
    /// Checks the parameter set matches the architecture and is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, architecture needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    left: t.shape().to_vec(),
                    right: shape,
                });
            }
            if !t.all_finite() {
                return Err(Error::Numerical(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

enum EncLayer {
    Rnn { w_ih: Var, w_hh: Var, b: Var },
    Conv { w: Var, b: Var },
}

/// Parameters bound to tape leaves.
pub struct Net {
    names: Vec<(String, Var)>,
    enc: Vec<EncLayer>,
    ctc_w: Var,
    ctc_b: Var,
    end: Var,
    embed: Var,
    w_e: Var,
    w_c: Var,
    w_s: Var,
    b_s: Var,
    loc: Var,
    w_o: Var,
    b_o: Var,
    hidden: usize,
    width: usize,
}

impl Net {
    /// Leaves in binding order, for reading parameter gradients.
    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.names
    }
}

pub fn bind(tape: &mut Tape, ckpt: &Checkpoint, trainable: bool) -> Result<Net> {
    let cfg = &ckpt.config;
    let mut names = Vec::new();
    let mut get = |tape: &mut Tape, name: &str| -> Result<Var> {
        let t = ckpt
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        let v = tape.leaf(t.clone(), trainable);
        names.push((name.to_string(), v));
        Ok(v)
    };
    let mut enc = Vec::new();
    for l in 0..cfg.num_encoder_layers {
        enc.push(match cfg.architecture {
            Architecture::Recurrent => EncLayer::Rnn {
                w_ih: get(tape, &format!("enc.{l}.w_ih"))?,
                w_hh: get(tape, &format!("enc.{l}.w_hh"))?,
                b: get(tape, &format!("enc.{l}.b"))?,
            },
            Architecture::Convolutional => EncLayer::Conv {
                w: get(tape, &format!("enc.{l}.w"))?,
                b: get(tape, &format!("enc.{l}.b"))?,
            },
        });
    }
    let ctc_w = get(tape, "ctc.w")?;
    let ctc_b = get(tape, "ctc.b")?;
    let end = get(tape, "dec.end")?;
    let embed = get(tape, "dec.embed")?;
    let w_e = get(tape, "dec.w_e")?;
    let w_c = get(tape, "dec.w_c")?;
    let w_s = get(tape, "dec.w_s")?;
    let b_s = get(tape, "dec.b")?;
    let loc = get(tape, "dec.loc")?;
    let w_o = get(tape, "dec.w_o")?;
    let b_o = get(tape, "dec.b_o")?;
    Ok(Net {
        names,
        enc,
        ctc_w,
        ctc_b,
        end,
        embed,
        w_e,
        w_c,
        w_s,
        b_s,
        loc,
        w_o,
        b_o,
        hidden: cfg.hidden_dim,
        width: cfg.decoder_width(),
    })
}

/// Encoder states `T×H`.
pub fn encode(tape: &mut Tape, net: &Net, frames: Var) -> Result<Var> {
    let mut x = frames;
    for layer in &net.enc {
        let shape = tape.shape(x).to_vec();
        let (t, f) = (shape[0], shape[1]);
        x = match *layer {
            EncLayer::Rnn { w_ih, w_hh, b } => {
                let proj = tape.matmul(x, w_ih)?;
                let proj = tape.add_bias(proj, b)?;
                let mut h: Option<Var> = None;
                let mut rows = Vec::with_capacity(t);
                for i in 0..t {
                    let xi = tape.row(proj, i)?;
                    let pre = match h {
                        Some(prev) => {
                            let rec = tape.matmul(prev, w_hh)?;
                            tape.add(xi, rec)?
                        }
                        None => xi,
                    };
                    let hi = tape.tanh(pre);
                    rows.push(hi);
                    h = Some(hi);
                }
                let stacked = tape.stack(&rows)?;
                tape.reshape(stacked, &[t, net.hidden])?
            }
            EncLayer::Conv { w, b } => {
                let mut index = Vec::with_capacity(t * 3 * f);
                for i in 0..t {
                    for k in 0..3 {
                        let src = i as isize + k as isize - 1;
                        for j in 0..f {
                            index.push(
                                (src >= 0 && (src as usize) < t).then(|| src as usize * f + j),
                            );
                        }
                    }
                }
                let cols = tape.gather(x, index, &[t, 3 * f], 0.0)?;
                let pre = tape.matmul(cols, w)?;
                let pre = tape.add_bias(pre, b)?;
                tape.relu(pre)
            }
        };
    }
    Ok(x)
}

/// Per-frame CTC log-distributions `T×V` from encoder states.
pub fn ctc_head(tape: &mut Tape, net: &Net, enc: Var) -> Result<Var> {
    let logits = tape.matmul(enc, net.ctc_w)?;
    let logits = tape.add_bias(logits, net.ctc_b)?;
    tape.log_softmax(logits)
}

/// Recurrent decoder state carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct DecState {
    s: Var,
    ctx: Var,
    attn: Var,
}

/// Encoder states prepared for attention, with a learned end-of-input row
/// appended so the decoder can attend past the last frame.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    enc: Var,
    enc_t: Var,
    frames: usize,
}

pub fn memory(tape: &mut Tape, net: &Net, enc: Var) -> Result<Memory> {
    let frames = tape.shape(enc)[0] + 1;
    let body = tape.transpose(enc)?;
    let end = tape.transpose(net.end)?;
    let enc_t = tape.concat_cols(&[body, end])?;
    let enc = tape.transpose(enc_t)?;
    Ok(Memory { enc, enc_t, frames })
}

pub fn initial_state(tape: &mut Tape, net: &Net, mem: &Memory) -> DecState {
    let s = tape.constant(Tensor::zeros(&[1, net.hidden]));
    let ctx = tape.constant(Tensor::zeros(&[1, net.hidden]));
    let mut a = Tensor::zeros(&[1, mem.frames]);
    a.data_mut()[0] = 1.0;
    let attn = tape.constant(a);
    DecState { s, ctx, attn }
}

/// One decoder step: consumes the previous token and returns the `1×(V+1)`
/// output log-distribution together with the next state.
pub fn decoder_step(
    tape: &mut Tape,
    net: &Net,
    mem: &Memory,
    state: DecState,
    prev_token: u32,
) -> Result<(Var, DecState)> {
    let h = net.hidden;
    let tok = prev_token as usize;
    if tok >= net.width {
        return Err(Error::invalid(format!("decoder token {tok} out of range")));
    }
    let e = tape.gather(net.embed, (tok * h..(tok + 1) * h).map(Some).collect(), &[1, h], 0.0)?;
    let a = tape.matmul(e, net.w_e)?;
    let b = tape.matmul(state.ctx, net.w_c)?;
    let c = tape.matmul(state.s, net.w_s)?;
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    let pre = tape.add_bias(abc, net.b_s)?;
    let s = tape.tanh(pre);

    let t = mem.frames;
    let raw = tape.matmul(s, mem.enc_t)?;
    let content = tape.scale(raw, 1.0 / (h as f64).sqrt());
    let mut index = Vec::with_capacity(LOC_SHIFTS.len() * t);
    for &shift in &LOC_SHIFTS {
        for i in 0..t {
            let src = i as isize - shift;
            index.push((src >= 0 && (src as usize) < t).then_some(src as usize));
        }
    }
    let shifted = tape.gather(state.attn, index, &[LOC_SHIFTS.len(), t], 0.0)?;
    let location = tape.matmul(net.loc, shifted)?;
    let scores = tape.add(content, location)?;
    let log_attn = tape.log_softmax(scores)?;
    let attn = tape.exp(log_attn);
    let ctx = tape.matmul(attn, mem.enc)?;

    let joined = tape.concat_cols(&[s, ctx])?;
    let logits = tape.matmul(joined, net.w_o)?;
    let logits = tape.add_bias(logits, net.b_o)?;
    let out = tape.log_softmax(logits)?;
    Ok((out, DecState { s, ctx, attn }))
}

/// Teacher-forced decoder log-distributions `(|target|+1)×(V+1)`.
pub fn decode_teacher_forced(
    tape: &mut Tape,
    net: &Net,
    mem: &Memory,
    target: &TokenSeq,
) -> Result<Var> {
    let start = (net.width - 1) as u32;
    let mut state = initial_state(tape, net, mem);
    let mut prev = start;
    let mut rows = Vec::with_capacity(target.len() + 1);
    for u in 0..=target.len() {
        let (out, next) = decoder_step(tape, net, mem, state, prev)?;
        rows.push(out);
        state = next;
        if let Some(&tok) = target.tokens().get(u) {
            prev = tok;
        }
    }
    let stacked = tape.stack(&rows)?;
    tape.reshape(stacked, &[rows.len(), net.width])
}

pub struct ForwardOut {
    pub ctc_logprobs: Var,
    pub dec_logprobs: Option<Var>,
}

fn check_frames(cfg: &ModelConfig, frames: &Tensor) -> Result<()> {
    let s = frames.shape();
    if s.len() != 2 || s[0] == 0 || s[1] != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: s.to_vec(),
            right: vec![0, cfg.input_dim],
        });
    }
    Ok(())
}

/// Full forward pass. The decoder runs only when a target is given.
pub fn forward(
    tape: &mut Tape,
    net: &Net,
    cfg: &ModelConfig,
    frames: Var,
    target: Option<&TokenSeq>,
) -> Result<ForwardOut> {
    check_frames(cfg, tape.value(frames))?;
    let enc = encode(tape, net, frames)?;
    let ctc_logprobs = ctc_head(tape, net, enc)?;
    let dec_logprobs = match target {
        Some(y) => {
            y.check_vocab(cfg.vocab_size)?;
            let mem = memory(tape, net, enc)?;
            Some(decode_teacher_forced(tape, net, &mem, y)?)
        }
        None => None,
    };
    Ok(ForwardOut {
        ctc_logprobs,
        dec_logprobs,
    })
}

/// Records both losses and the combined objective. An infeasible CTC term is
/// left out of the objective so its gradient stays finite.
pub struct LossNodes {
    pub attention_kl: Var,
    pub ctc: Var,
    pub combined: Var,
}

pub fn loss_nodes(
    tape: &mut Tape,
    net: &Net,
    cfg: &ModelConfig,
    frames: Var,
    target: &TokenSeq,
) -> Result<LossNodes> {
    let out = forward(tape, net, cfg, frames, Some(target))?;
    let dec = out.dec_logprobs.expect("decoder output with target");
    let att = attention_kl_loss(tape, dec, target, cfg.label_smoothing)?;
    let ctc = ctc_loss(tape, out.ctc_logprobs, target)?;
    let combined = if ctc.infeasible {
        tape.scale(att, cfg.attention_weight)
    } else {
        combined_loss(tape, att, ctc.loss, cfg.attention_weight)?
    };
    Ok(LossNodes {
        attention_kl: att,
        ctc: ctc.loss,
        combined,
    })
}

/// Clean loss pair, without gradient tracking.
pub fn loss_pair(ckpt: &Checkpoint, frames: &Tensor, target: &TokenSeq) -> Result<LossPair> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.constant(frames.clone());
    let n = loss_nodes(&mut tape, &net, &ckpt.config, x, target)?;
    Ok(LossPair {
        attention_kl: tape.value(n.attention_kl).item(),
        ctc: tape.value(n.ctc).item(),
    })
}

/// Combined loss and its gradient with respect to the input frames.
pub fn frame_gradient(
    ckpt: &Checkpoint,
    frames: &Tensor,
    target: &TokenSeq,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.variable(frames.clone());
    let n = loss_nodes(&mut tape, &net, &ckpt.config, x, target)?;
    let grads = tape.backward(n.combined)?;
    Ok((tape.value(n.combined).item(), grads.wrt(x)))
}

/// CTC log-probabilities `T×V` for export.
pub fn ctc_logprobs(ckpt: &Checkpoint, frames: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.constant(frames.clone());
    let out = forward(&mut tape, &net, &ckpt.config, x, None)?;
    Ok(tape.value(out.ctc_logprobs).clone())
}

/// Teacher-forced decoder log-probabilities `(|target|+1)×(V+1)` for export.
pub fn decoder_logprobs(ckpt: &Checkpoint, frames: &Tensor, target: &TokenSeq) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.constant(frames.clone());
    let out = forward(&mut tape, &net, &ckpt.config, x, Some(target))?;
    Ok(tape.value(out.dec_logprobs.expect("target given")).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    /// Global gradient-norm ceiling per batch; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 0.005,
            batch_size: 4,
            lr_decay: 0.95,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Adam on the combined loss. Example order per epoch is a seeded shuffle of
/// the id-sorted data, so the result does not depend on input order.
pub fn train(init: &Checkpoint, data: &[&Utterance], cfg: &TrainConfig) -> Result<Checkpoint> {
    init.validate()?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::invalid("batch_size and lr must be positive, lr_decay in (0, 1]"));
    }
    let mut ckpt = init.clone();
    if cfg.epochs == 0 {
        return Ok(ckpt);
    }
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut sorted: Vec<&Utterance> = data.to_vec();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    for u in &sorted {
        check_frames(&ckpt.config, &u.frames)?;
        u.target.check_vocab(ckpt.config.vocab_size)?;
    }

    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut v: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, t) in &ckpt.params {
        m.insert(name.clone(), vec![0.0; t.numel()]);
        v.insert(name.clone(), vec![0.0; t.numel()]);
    }
    let mut step = 0i32;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..sorted.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "epoch-order", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let u = sorted[i];
                let mut tape = Tape::new();
                let net = bind(&mut tape, &ckpt, true)?;
                let x = tape.constant(u.frames.clone());
                let n = loss_nodes(&mut tape, &net, &ckpt.config, x, &u.target)?;
                let loss = tape.value(n.combined).item();
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "training loss became {loss} at epoch {epoch} on `{}`",
                        u.utterance_id
                    )));
                }
                epoch_loss += loss;
                let mut grads = tape.backward(n.combined)?;
                for (name, var) in net.param_vars() {
                    let g = grads.take(*var);
                    match acc.get_mut(name) {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
                        None => {
                            acc.insert(name.clone(), g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let norm = acc
                .values()
                .flat_map(|g| g.iter())
                .map(|g| (g * scale).powi(2))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "gradient norm became {norm} at epoch {epoch}"
                )));
            }
            let clip = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            step += 1;
            let bc1 = 1.0 - beta1.powi(step);
            let bc2 = 1.0 - beta2.powi(step);
            for (name, g) in &acc {
                let p = ckpt.params.get_mut(name).expect("bound parameter");
                let (mv, vv) = (m.get_mut(name).unwrap(), v.get_mut(name).unwrap());
                for (k, w) in p.data_mut().iter_mut().enumerate() {
                    let gk = g[k] * scale * clip;
                    mv[k] = beta1 * mv[k] + (1.0 - beta1) * gk;
                    vv[k] = beta2 * vv[k] + (1.0 - beta2) * gk * gk;
                    let update = lr * (mv[k] / bc1) / ((vv[k] / bc2).sqrt() + eps);
                    *w = round_f32(*w - update);
                }
            }
        }
        history.push(epoch_loss / sorted.len() as f64);
    }

    let mut att_sum = 0.0;
    let mut ctc_sum = 0.0;
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    let mut exact = 0usize;
    for u in &sorted {
        let lp = loss_pair(&ckpt, &u.frames, &u.target)?;
        att_sum += lp.attention_kl;
        ctc_sum += lp.ctc;
        let hyp = greedy_decode(&ckpt, &u.frames)?;
        let e = levenshtein(&u.target, &hyp.tokens);
        edits += e.edits();
        ref_len += u.target.len();
        exact += usize::from(hyp.tokens == u.target);
    }
    let n = sorted.len() as f64;
    ckpt.training = TrainingMeta {
        epochs: init.training.epochs + cfg.epochs,
        loss_history: init
            .training
            .loss_history
            .iter()
            .copied()
            .chain(history)
            .collect(),
        final_attention_kl: Some(att_sum / n),
        final_ctc: Some(ctc_sum / n),
        greedy_token_accuracy: Some(1.0 - edits as f64 / ref_len.max(1) as f64),
        greedy_exact_match: Some(exact as f64 / n),
        dataset_fingerprint: Some(corpus_fingerprint(
            &sorted.iter().map(|u| (*u).clone()).collect::<Vec<_>>(),
        )?),
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// A decoded transcript with its total log-probability (end symbol included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSeq,
    pub log_score: f64,
    pub confidence: f64,
}

impl Hypothesis {
    pub fn new(tokens: TokenSeq, log_score: f64) -> Self {
        let norm = (tokens.len() + 1) as f64;
        Hypothesis {
            confidence: (log_score / norm).exp(),
            tokens,
            log_score,
        }
    }
}

/// Sort order for beam candidates: higher score first, then lexicographic.
fn rank(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

struct Live {
    tokens: Vec<u32>,
    score: f64,
    state: DecState,
}

/// Attention-decoder beam search. Each step expands every live hypothesis by
/// all real tokens and the end symbol, keeps the best `beam_size` candidates,
/// and moves ended ones to the finished list. Decoding stops once `k`
/// finished hypotheses all score at least the best live one, or after `T`
/// tokens, when the end symbol is forced.
pub fn beam_decode(
    ckpt: &Checkpoint,
    frames: &Tensor,
    beam_size: usize,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    if k == 0 || beam_size < k {
        return Err(Error::invalid(format!(
            "beam search needs beam_size >= k >= 1, got beam {beam_size}, k {k}"
        )));
    }
    check_frames(&ckpt.config, frames)?;
    let cfg = &ckpt.config;
    let end = cfg.end_id();
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.constant(frames.clone());
    let enc = encode(&mut tape, &net, x)?;
    let mem = memory(&mut tape, &net, enc)?;
    let max_len = frames.shape()[0];

    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state: initial_state(&mut tape, &net, &mem),
    }];
    let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<(f64, Vec<u32>, Option<DecState>)> = Vec::new();
        for hyp in &live {
            let prev = hyp.tokens.last().copied().unwrap_or(end);
            let (out, next) = decoder_step(&mut tape, &net, &mem, hyp.state, prev)?;
            let lp = tape.value(out).data().to_vec();
            cands.push((hyp.score + lp[end as usize], hyp.tokens.clone(), None));
            if hyp.tokens.len() < max_len {
                for tok in 1..end {
                    let mut toks = hyp.tokens.clone();
                    toks.push(tok);
                    cands.push((hyp.score + lp[tok as usize], toks, Some(next)));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let mut next_live = Vec::new();
        for (score, tokens, state) in cands.into_iter().take(beam_size) {
            match state {
                None => finished.push((score, tokens)),
                Some(state) => next_live.push(Live {
                    tokens,
                    score,
                    state,
                }),
            }
        }
        live = next_live;
        finished.sort_by(rank);
        if finished.len() >= k {
            let kth = finished[k - 1].0;
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if kth >= best_live {
                break;
            }
        }
    }
    finished.sort_by(rank);
    finished.dedup_by(|a, b| a.1 == b.1);
    finished
        .into_iter()
        .take(k)
        .map(|(score, toks)| Ok(Hypothesis::new(TokenSeq::new(toks)?, score)))
        .collect()
}

/// Step-wise argmax decoding; ties go to the end symbol, then the lowest id.
pub fn greedy_decode(ckpt: &Checkpoint, frames: &Tensor) -> Result<Hypothesis> {
    check_frames(&ckpt.config, frames)?;
    let end = ckpt.config.end_id();
    let mut tape = Tape::new();
    let net = bind(&mut tape, ckpt, false)?;
    let x = tape.constant(frames.clone());
    let enc = encode(&mut tape, &net, x)?;
    let mem = memory(&mut tape, &net, enc)?;
    let mut state = initial_state(&mut tape, &net, &mem);
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = end;
    loop {
        let (out, next) = decoder_step(&mut tape, &net, &mem, state, prev)?;
        let lp = tape.value(out).data();
        let mut best = end;
        if tokens.len() < frames.shape()[0] {
            for tok in 1..end {
                if lp[tok as usize] > lp[best as usize] {
                    best = tok;
                }
            }
        }
        score += lp[best as usize];
        if best == end {
            break;
        }
        tokens.push(best);
        prev = best;
        state = next;
    }
    Ok(Hypothesis::new(TokenSeq::new(tokens)?, score))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MIAC";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    training: TrainingMeta,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&CheckpointHeader {
        config: ckpt.config.clone(),
        training: ckpt.training.clone(),
    })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Little-endian reader that reports the byte offset of any short read.
pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = c.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("header length")? as usize;
    let at = c.pos;
    let header: CheckpointHeader = serde_json::from_slice(c.take(len, "header")?)
        .map_err(|e| Error::format(at as u64, format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;
    let count = c.u32("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::format(at as u64, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 4 {
            return Err(Error::format(c.pos as u64, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        if n * 4 > bytes.len() - c.pos {
            return Err(Error::format(c.pos as u64, "truncated parameter values"));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(c.f32("value")? as f64);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !c.at_end() {
        return Err(Error::format(c.pos as u64, "trailing bytes after parameters"));
    }
    let ckpt = Checkpoint {
        config: header.config,
        params,
        training: header.training,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_corpus, CorpusConfig};

    fn cfg(arch: Architecture) -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            architecture: arch,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn frames(t: usize) -> Tensor {
        let data = (0..t * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        Tensor::new(vec![t, 8], data).unwrap()
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_model(&cfg(Architecture::Recurrent)).unwrap();
        let b = init_model(&cfg(Architecture::Recurrent)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(Architecture::Recurrent);
        other.seed = 6;
        assert_ne!(a.params, init_model(&other).unwrap().params);
        let conv = init_model(&ModelConfig {
            hidden_dim: 16,
            ..cfg(Architecture::Convolutional)
        })
        .unwrap();
        // ctc.w has fan-in 16.
        assert!(conv.params["ctc.w"].data().iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn ctc_rows_are_normalised() {
        for arch in [Architecture::Recurrent, Architecture::Convolutional] {
            let m = init_model(&cfg(arch)).unwrap();
            let lp = ctc_logprobs(&m, &frames(7)).unwrap();
            for t in 0..7 {
                let lse = lp.row(t).iter().map(|x| x.exp()).sum::<f64>().ln();
                assert!(lse.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_parameters_give_uniform_outputs() {
        let mut m = init_model(&cfg(Architecture::Recurrent)).unwrap();
        for t in m.params.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let lp = ctc_logprobs(&m, &frames(4)).unwrap();
        assert!(lp.data().iter().all(|x| (x + 12f64.ln()).abs() < 1e-12));
        let y = TokenSeq::new(vec![1, 2]).unwrap();
        let dec = decoder_logprobs(&m, &frames(4), &y).unwrap();
        assert_eq!(dec.shape(), &[3, 13]);
        assert!(dec.data().iter().all(|x| (x + 13f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn wrong_input_width_rejected() {
        let m = init_model(&cfg(Architecture::Recurrent)).unwrap();
        let bad = Tensor::zeros(&[4, 5]);
        assert!(ctc_logprobs(&m, &bad).is_err());
    }

    #[test]
    fn forward_is_pure_and_frame_gradient_has_frame_shape() {
        let m = init_model(&cfg(Architecture::Convolutional)).unwrap();
        let y = TokenSeq::new(vec![3, 4]).unwrap();
        let a = loss_pair(&m, &frames(6), &y).unwrap();
        let b = loss_pair(&m, &frames(6), &y).unwrap();
        assert_eq!(a, b);
        let (_, g) = frame_gradient(&m, &frames(6), &y).unwrap();
        assert_eq!(g.shape(), &[6, 8]);
        assert!(g.squared_norm() > 0.0);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = init_model(&cfg(Architecture::Recurrent)).unwrap();
        let corpus = gen_corpus(&CorpusConfig {
            n_speakers: 4,
            utt_per_speaker: 2,
            ..CorpusConfig::default()
        })
        .unwrap();
        let data: Vec<&Utterance> = corpus.utterances.iter().collect();
        let out = train(
            &m,
            &data,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn beam_one_matches_greedy() {
        for arch in [Architecture::Recurrent, Architecture::Convolutional] {
            let m = init_model(&cfg(arch)).unwrap();
            let x = frames(5);
            let g = greedy_decode(&m, &x).unwrap();
            let b = beam_decode(&m, &x, 1, 1).unwrap();
            assert_eq!(b, vec![g]);
        }
    }

    #[test]
    fn beam_results_sorted_and_distinct() {
        let m = init_model(&cfg(Architecture::Recurrent)).unwrap();
        let hyps = beam_decode(&m, &frames(5), 8, 4).unwrap();
        assert!(!hyps.is_empty() && hyps.len() <= 4);
        for w in hyps.windows(2) {
            assert!(w[0].log_score >= w[1].log_score);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
        for h in &hyps {
            assert!(h.confidence > 0.0 && h.confidence <= 1.0);
        }
        assert!(beam_decode(&m, &frames(5), 2, 3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = init_model(&cfg(Architecture::Convolutional)).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                checkpoint_from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn zero_layer_checkpoint_rejected() {
        let m = init_model(&cfg(Architecture::Recurrent)).unwrap();
        let mut bytes = checkpoint_bytes(&m).unwrap();
        let needle = b"\"num_encoder_layers\":1";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        bytes[pos + needle.len() - 1] = b'0';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }
}
