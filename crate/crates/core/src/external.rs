//! Grey-box audits from exported model outputs.
//!
//! Each utterance has a `<id>.milg` file holding little-endian log-probabilities:
//!
//! ```text
//! "MILG" | u16 version | u32 T | u32 V | T·V f32      CTC head
//!        [ u32 U | u32 V' | U·V' f32 ]                teacher-forced decoder
//! ```
//!
//! The decoder block is optional but the attention loss cannot be computed
//! without it. An optional `<id>.nbest.jsonl` sidecar lists hypotheses as
//! `{"tokens": [...], "log_score": x}` lines and enables error features.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::MIExample;
use crate::error::{Error, Result};
use crate::error_features::error_block;
use crate::losses::{attention_kl_loss, ctc_loss_value, LossPair, TokenSeq};
use crate::model::{beam_decode, ctc_logprobs, decoder_logprobs, Checkpoint, Cursor, Hypothesis};
use crate::pipeline::{
    assemble, evaluate, same_layout, train_forests, AuditReport, ExperimentConfig, ExtractConfig,
    Families, FeatureSet,
};
use crate::synth::{gen_corpus, select, SplitManifest, Utterance};
use crate::tensor::{Tape, Tensor};

pub const MILG_MAGIC: &[u8; 4] = b"MILG";
pub const MILG_VERSION: u16 = 1;

/// Output log-probabilities of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalLogits {
    /// `T×V`, blank in column 0.
    pub ctc: Tensor,
    /// `U×V'` under teacher forcing, end symbol in the last column.
    pub decoder: Option<Tensor>,
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(format!("expected a matrix, got shape {:?}", t.shape()))),
    }
}

fn push_block(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let (rows, cols) = dims2(t)?;
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(())
}

pub fn milg_bytes(logits: &ExternalLogits) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(18 + 4 * logits.ctc.numel());
    out.extend_from_slice(MILG_MAGIC);
    out.extend_from_slice(&MILG_VERSION.to_le_bytes());
    push_block(&mut out, &logits.ctc)?;
    if let Some(d) = &logits.decoder {
        push_block(&mut out, d)?;
    }
    Ok(out)
}

fn read_block(c: &mut Cursor<'_>, what: &str, min_cols: usize) -> Result<Tensor> {
    let at = c.pos as u64;
    let rows = c.u32(&format!("{what} row count"))? as usize;
    let cols = c.u32(&format!("{what} column count"))? as usize;
    if rows == 0 || cols < min_cols {
        return Err(Error::format(
            at,
            format!("{what} block has shape {rows}x{cols}, need at least 1x{min_cols}"),
        ));
    }
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= c.bytes.len() - c.pos))
        .ok_or_else(|| {
            Error::format(c.pos as u64, format!("truncated {what} block of {rows}x{cols}"))
        })?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let off = c.pos as u64;
        let v = c.f32(what)?;
        if v.is_nan() || v > 0.0 {
            return Err(Error::format(off, format!("{what} value {v} is not a log-probability")));
        }
        data.push(f64::from(v));
    }
    Tensor::new(vec![rows, cols], data)
}

pub fn milg_from_bytes(bytes: &[u8]) -> Result<ExternalLogits> {
    let mut c = Cursor::new(bytes);
    if c.take(4, "magic")? != MILG_MAGIC {
        return Err(Error::format(0, "bad magic, expected MILG"));
    }
    let version = c.u16("version")?;
    if version != MILG_VERSION {
        return Err(Error::format(4, format!("unsupported MILG version {version}")));
    }
    let ctc = read_block(&mut c, "ctc", 2)?;
    let decoder = if c.at_end() {
        None
    } else {
        Some(read_block(&mut c, "decoder", 2)?)
    };
    if !c.at_end() {
        return Err(Error::format(c.pos as u64, "trailing bytes after the decoder block"));
    }
    Ok(ExternalLogits { ctc, decoder })
}

pub fn save_milg(path: &Path, logits: &ExternalLogits) -> Result<()> {
    std::fs::write(path, milg_bytes(logits)?)?;
    Ok(())
}

pub fn load_milg(path: &Path) -> Result<ExternalLogits> {
    milg_from_bytes(&std::fs::read(path)?)
}

/// One line of an n-best sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: Vec<u32>,
    pub log_score: f64,
}

pub fn logits_path(dir: &Path, utterance_id: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.milg"))
}

pub fn nbest_path(dir: &Path, utterance_id: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.nbest.jsonl"))
}

pub fn save_nbest(path: &Path, hyps: &[Hypothesis]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for h in hyps {
        let e = NBestEntry {
            tokens: h.tokens.tokens().to_vec(),
            log_score: h.log_score,
        };
        serde_json::to_writer(&mut w, &e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Hypotheses in descending score order.
pub fn load_nbest(path: &Path) -> Result<Vec<Hypothesis>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let e: NBestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::format(offset + err.column() as u64, err.to_string()))?;
            if !e.log_score.is_finite() || e.log_score > 0.0 {
                return Err(Error::format(offset, format!("log_score {} out of range", e.log_score)));
            }
            out.push(Hypothesis::new(TokenSeq::new(e.tokens)?, e.log_score));
        }
        offset += len;
    }
    if out.is_empty() {
        return Err(Error::format(0, format!("{} has no hypotheses", path.display())));
    }
    out.sort_by(|a, b| {
        b.log_score
            .total_cmp(&a.log_score)
            .then_with(|| a.tokens.tokens().cmp(b.tokens.tokens()))
    });
    Ok(out)
}

/// Writes logits (with the teacher-forced decoder block) for every utterance,
/// plus n-best sidecars when `nbest` is given. Returns the number of files.
pub fn export_logits(
    model: &Checkpoint,
    utterances: &[&Utterance],
    dir: &Path,
    nbest: Option<&ExtractConfig>,
) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    utterances.par_iter().try_for_each(|u| -> Result<()> {
        let logits = ExternalLogits {
            ctc: ctc_logprobs(model, &u.frames)?,
            decoder: Some(decoder_logprobs(model, &u.frames, &u.target)?),
        };
        save_milg(&logits_path(dir, &u.utterance_id), &logits)?;
        if let Some(cfg) = nbest {
            let hyps = beam_decode(model, &u.frames, cfg.beam_size, cfg.n_best)?;
            save_nbest(&nbest_path(dir, &u.utterance_id), &hyps)?;
        }
        Ok(())
    })?;
    Ok(utterances.len() * if nbest.is_some() { 2 } else { 1 })
}

/// Loss pair from supplied log-probabilities.
pub fn external_losses(logits: &ExternalLogits, target: &TokenSeq, smoothing: f64) -> Result<LossPair> {
    let dec = logits.decoder.as_ref().ok_or_else(|| {
        Error::format(
            (14 + 4 * logits.ctc.numel()) as u64,
            "no decoder block, so the attention loss is unavailable",
        )
    })?;
    let mut tape = Tape::new();
    let d = tape.constant(dec.clone());
    let att = attention_kl_loss(&mut tape, d, target, smoothing)?;
    Ok(LossPair {
        attention_kl: tape.value(att).item(),
        ctc: ctc_loss_value(&logits.ctc, target)?,
    })
}

/// Rejects feature sets that need more than output log-probabilities.
pub fn check_grey_box(sets: &[FeatureSet]) -> Result<()> {
    for &s in sets {
        let access = s.required_access();
        if access > crate::pipeline::Access::GreyBox {
            return Err(Error::AccessLevel {
                feature_set: s.tag().to_string(),
                required: access.describe(),
            });
        }
    }
    Ok(())
}

fn external_families(
    dir: &Path,
    utt: &Utterance,
    sets: &[FeatureSet],
    cfg: &ExperimentConfig,
) -> Result<Families> {
    let mut f = Families::default();
    if sets.contains(&FeatureSet::Losses) {
        let logits = load_milg(&logits_path(dir, &utt.utterance_id))?;
        let vocab = cfg.target_model.vocab_size;
        let (_, v) = dims2(&logits.ctc)?;
        if v != vocab {
            return Err(Error::Layout(format!(
                "{}: CTC width {v}, expected {vocab}",
                utt.utterance_id
            )));
        }
        if let Some(d) = &logits.decoder {
            let (_, w) = dims2(d)?;
            if w != vocab + 1 {
                return Err(Error::Layout(format!(
                    "{}: decoder width {w}, expected {}",
                    utt.utterance_id,
                    vocab + 1
                )));
            }
        }
        let pair = external_losses(&logits, &utt.target, cfg.target_model.label_smoothing)?;
        f.losses = Some(pair.clamped());
    }
    if sets.contains(&FeatureSet::Errors) {
        let path = nbest_path(dir, &utt.utterance_id);
        if !path.exists() {
            return Err(Error::invalid(format!(
                "error features need an n-best sidecar, {} is missing",
                path.display()
            )));
        }
        let hyps = load_nbest(&path)?;
        f.errors = Some(error_block(&utt.target, &hyps, cfg.features.n_best)?);
    }
    Ok(f)
}

fn external_examples(
    dir: &Path,
    labelled: &[(&Utterance, u8)],
    cfg: &ExperimentConfig,
) -> Result<Vec<(FeatureSet, Vec<MIExample>)>> {
    let mut items = labelled.to_vec();
    items.sort_by(|a, b| a.0.utterance_id.cmp(&b.0.utterance_id));
    let fams: Vec<Families> = items
        .par_iter()
        .map(|(u, _)| external_families(dir, u, &cfg.feature_sets, cfg))
        .collect::<Result<_>>()?;
    cfg.feature_sets
        .iter()
        .map(|&set| {
            let ex = items
                .iter()
                .zip(&fams)
                .map(|((u, label), f)| {
                    Ok(MIExample {
                        utterance_id: u.utterance_id.clone(),
                        speaker_id: u.speaker_id.clone(),
                        label: *label,
                        feature_set: set.tag().to_string(),
                        features: assemble(set, f)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok((set, ex))
        })
        .collect()
}

fn labelled<'a>(corpus: &'a [Utterance], pos: &[String], neg: &[String]) -> Result<Vec<(&'a Utterance, u8)>> {
    let mut out: Vec<_> = select(corpus, pos)?.into_iter().map(|u| (u, 1)).collect();
    out.extend(select(corpus, neg)?.into_iter().map(|u| (u, 0)));
    Ok(out)
}

/// Audits a model known only through exported outputs. The forest is trained
/// on the manifest's classifier-training lists and scored on its test lists,
/// with reference transcripts taken from the configured corpus.
pub fn audit_external(
    logits_dir: &Path,
    manifest: &SplitManifest,
    cfg: &ExperimentConfig,
) -> Result<AuditReport> {
    cfg.validate()?;
    check_grey_box(&cfg.feature_sets)?;
    let corpus = gen_corpus(&cfg.corpus)?.utterances;
    manifest.validate(&corpus)?;
    let train = external_examples(
        logits_dir,
        &labelled(&corpus, &manifest.mi_train_pos, &manifest.mi_train_neg)?,
        cfg,
    )?;
    let test = external_examples(
        logits_dir,
        &labelled(&corpus, &manifest.mi_test_pos, &manifest.mi_test_neg)?,
        cfg,
    )?;
    let mut results = Vec::new();
    let mut scores = Vec::new();
    for ((set, tr), (_, te)) in train.iter().zip(&test) {
        same_layout(tr, te)?;
        let forests = train_forests(tr, &cfg.rf, &cfg.seeds)?;
        let (res, rows) = evaluate(
            manifest.level,
            *set,
            &cfg.layout(*set),
            &forests,
            &cfg.seeds,
            te,
            &cfg.fpr_targets,
        )?;
        results.push(res);
        scores.extend(rows);
    }
    let mut echo = cfg.clone();
    echo.levels = vec![manifest.level];
    Ok(AuditReport::new(echo, Vec::new(), results, scores))
}
