//! Deterministic synthetic corpus with speaker identity baked into the frames,
//! plus the shadow-model split protocol at sample and speaker level.
//!
//! Every frame is `token_mean + speaker_offset + jitter`, where the jitter is
//! Gaussian with standard deviation `jitter_std * token_scale`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TokenSeq;
use crate::tensor::Tensor;
use crate::util::{rng_for, sha256_hex};

/// Smallest allowed distance between two speakers' offsets.
pub const MIN_OFFSET_DISTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utt_per_speaker: usize,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Standard deviation of each coordinate of a token mean.
    pub token_mean_std: f64,
    /// Standard deviation of each coordinate of a speaker offset.
    pub speaker_offset_std: f64,
    pub jitter_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 40,
            utt_per_speaker: 30,
            vocab_size: 12,
            input_dim: 8,
            seed: 0,
            token_mean_std: 1.25,
            speaker_offset_std: 0.5,
            jitter_std: 0.3,
            min_tokens: 3,
            max_tokens: 8,
            min_frames_per_token: 3,
            max_frames_per_token: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Indexed by token id; row 0 (blank) is unused and all zeros.
    pub token_means: Vec<Vec<f64>>,
    pub token_scales: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub target: TokenSeq,
    /// `T×F` frame matrix.
    pub frames: Tensor,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    utterance_id: String,
    speaker_id: String,
    target: TokenSeq,
    frames: Vec<Vec<f64>>,
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        let rows = u.frames.shape()[0];
        UtteranceRecord {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            target: u.target.clone(),
            frames: (0..rows).map(|i| u.frames.row(i).to_vec()).collect(),
        }
    }
}

impl TryFrom<UtteranceRecord> for Utterance {
    type Error = Error;

    fn try_from(r: UtteranceRecord) -> Result<Self> {
        Ok(Utterance {
            utterance_id: r.utterance_id,
            speaker_id: r.speaker_id,
            target: r.target,
            frames: Tensor::from_rows(&r.frames)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub profiles: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

fn speaker_id(s: usize) -> String {
    format!("spk{s:03}")
}

/// Generates the corpus. Deterministic in `config` (including its seed).
pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let c = config;
    if c.n_speakers < 4 || c.vocab_size < 4 {
        return Err(Error::invalid(format!(
            "corpus needs n_speakers >= 4 and vocab_size >= 4, got {} and {}",
            c.n_speakers, c.vocab_size
        )));
    }
    if c.input_dim == 0
        || c.min_tokens == 0
        || c.min_tokens > c.max_tokens
        || c.min_frames_per_token == 0
        || c.min_frames_per_token > c.max_frames_per_token
        || c.jitter_std < 0.0
    {
        return Err(Error::invalid("inconsistent corpus length or noise parameters"));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut rng = rng_for(c.seed, "token-templates", &[]);
    let mut token_means = vec![vec![0.0; c.input_dim]];
    let mut token_scales = vec![1.0];
    for _ in 1..c.vocab_size {
        token_means.push(
            (0..c.input_dim)
                .map(|_| c.token_mean_std * std_normal.sample(&mut rng))
                .collect(),
        );
        token_scales.push(rng.random_range(0.8..1.2));
    }

    let mut rng = rng_for(c.seed, "speaker-offsets", &[]);
    let mut offsets: Vec<Vec<f64>> = Vec::with_capacity(c.n_speakers);
    let mut attempts = 0usize;
    while offsets.len() < c.n_speakers {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "could not place {} speaker offsets at pairwise distance >= {MIN_OFFSET_DISTANCE}",
                c.n_speakers
            )));
        }
        let cand: Vec<f64> = (0..c.input_dim)
            .map(|_| c.speaker_offset_std * std_normal.sample(&mut rng))
            .collect();
        if offsets.iter().all(|o| distance(o, &cand) >= MIN_OFFSET_DISTANCE) {
            offsets.push(cand);
        }
    }

    let profiles: Vec<SpeakerProfile> = offsets
        .into_iter()
        .enumerate()
        .map(|(s, offset)| SpeakerProfile {
            speaker_id: speaker_id(s),
            token_means: token_means.clone(),
            token_scales: token_scales.clone(),
            offset,
        })
        .collect();

    let mut utterances = Vec::with_capacity(c.n_speakers * c.utt_per_speaker);
    for (s, prof) in profiles.iter().enumerate() {
        for u in 0..c.utt_per_speaker {
            let mut rng = rng_for(c.seed, "utterance", &[s as u64, u as u64]);
            let len = rng.random_range(c.min_tokens..=c.max_tokens);
            let tokens: Vec<u32> = (0..len)
                .map(|_| rng.random_range(1..c.vocab_size as u32))
                .collect();
            let mut rows = Vec::new();
            for &tok in &tokens {
                let n = rng.random_range(c.min_frames_per_token..=c.max_frames_per_token);
                let sigma = c.jitter_std * prof.token_scales[tok as usize];
                for _ in 0..n {
                    rows.push(
                        (0..c.input_dim)
                            .map(|d| {
                                prof.token_means[tok as usize][d]
                                    + prof.offset[d]
                                    + sigma * std_normal.sample(&mut rng)
                            })
                            .collect::<Vec<f64>>(),
                    );
                }
            }
            utterances.push(Utterance {
                utterance_id: format!("{}-utt{u:03}", prof.speaker_id),
                speaker_id: prof.speaker_id.clone(),
                target: TokenSeq::new(tokens)?,
                frames: Tensor::from_rows(&rows)?,
            });
        }
    }
    Ok(Corpus {
        config: config.clone(),
        profiles,
        utterances,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// SHA-256 over the canonical (id-sorted, compact JSON lines) serialization.
pub fn corpus_fingerprint(utterances: &[Utterance]) -> Result<String> {
    Ok(sha256_hex(canonical_lines(utterances)?.as_bytes()))
}

fn canonical_lines(utterances: &[Utterance]) -> Result<String> {
    let mut sorted: Vec<&Utterance> = utterances.iter().collect();
    sorted.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    let mut out = String::new();
    for u in sorted {
        out.push_str(&serde_json::to_string(&UtteranceRecord::from(u))?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    count: usize,
    fingerprint: String,
}

const CORPUS_FORMAT: &str = "miaudit-corpus";

/// Writes a JSON-lines corpus: a header line with count and fingerprint, then
/// one record per utterance in id order.
pub fn save_corpus(path: &Path, utterances: &[Utterance]) -> Result<String> {
    let body = canonical_lines(utterances)?;
    let fingerprint = sha256_hex(body.as_bytes());
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: 1,
        count: utterances.len(),
        fingerprint: fingerprint.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(fingerprint)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let mut offset = 0u64;
    let header_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::format(0, "empty corpus manifest"))?;
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(0, format!("bad corpus header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != 1 {
        return Err(Error::format(
            0,
            format!("unsupported corpus format {} v{}", header.format, header.version),
        ));
    }
    offset += header_line.len() as u64 + 1;
    let mut utterances = Vec::with_capacity(header.count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            offset += line.len() as u64 + 1;
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(offset, format!("bad utterance record: {e}")))?;
        utterances.push(Utterance::try_from(rec)?);
        offset += line.len() as u64 + 1;
    }
    if utterances.len() != header.count {
        return Err(Error::format(
            offset,
            format!("header promises {} records, found {}", header.count, utterances.len()),
        ));
    }
    let computed = corpus_fingerprint(&utterances)?;
    if computed != header.fingerprint {
        return Err(Error::Fingerprint {
            expected: header.fingerprint,
            computed,
        });
    }
    Ok(utterances)
}

/// Splits every speaker's utterances into two disjoint halves, giving
/// disjoint shadow and target sub-corpora drawn from the same distribution.
pub fn partition_corpus(utterances: &[Utterance], seed: u64) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utterances {
        by_speaker.entry(&u.speaker_id).or_default().push(u);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (spk, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let mut rng = rng_for(seed, "partition", &[string_key(spk)]);
        utts.shuffle(&mut rng);
        let half = utts.len() / 2;
        first.extend(utts[..half].iter().map(|u| (*u).clone()));
        second.extend(utts[half..].iter().map(|u| (*u).clone()));
    }
    (first, second)
}

fn string_key(s: &str) -> u64 {
    crate::util::derive_seed(0, s, &[])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sample,
    Speaker,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Sample => "sample",
            Level::Speaker => "speaker",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Level::Sample),
            "speaker" => Ok(Level::Speaker),
            other => Err(Error::invalid(format!("unknown level `{other}`"))),
        }
    }
}

/// Requested split sizes. Counts for the classifier sets are per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub asr_train_per_speaker: usize,
    pub mi_train_per_class: usize,
    pub mi_test_per_class: usize,
    /// Speaker level only: number of speakers whose data trains the ASR model.
    pub seen_speakers: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            asr_train_per_speaker: 16,
            mi_train_per_class: 150,
            mi_test_per_class: 100,
            seen_speakers: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub level: Level,
    pub asr_train: Vec<String>,
    pub mi_train_pos: Vec<String>,
    pub mi_train_neg: Vec<String>,
    pub mi_test_pos: Vec<String>,
    pub mi_test_neg: Vec<String>,
    pub fingerprint: String,
}

#[derive(Serialize)]
struct CanonicalSplit<'a> {
    level: Level,
    asr_train: &'a [String],
    mi_train_pos: &'a [String],
    mi_train_neg: &'a [String],
    mi_test_pos: &'a [String],
    mi_test_neg: &'a [String],
}

impl SplitManifest {
    fn compute_fingerprint(&self) -> Result<String> {
        let canon = CanonicalSplit {
            level: self.level,
            asr_train: &self.asr_train,
            mi_train_pos: &self.mi_train_pos,
            mi_train_neg: &self.mi_train_neg,
            mi_test_pos: &self.mi_test_pos,
            mi_test_neg: &self.mi_test_neg,
        };
        Ok(sha256_hex(&serde_json::to_vec(&canon)?))
    }

    /// Checks the protocol invariants for this manifest's level against the
    /// speaker assignment in `corpus`.
    pub fn validate(&self, corpus: &[Utterance]) -> Result<()> {
        let speaker_of: BTreeMap<&str, &str> = corpus
            .iter()
            .map(|u| (u.utterance_id.as_str(), u.speaker_id.as_str()))
            .collect();
        let ids = |v: &[String]| -> BTreeSet<String> { v.iter().cloned().collect() };
        let speakers = |v: &[String]| -> Result<BTreeSet<String>> {
            v.iter()
                .map(|id| {
                    speaker_of
                        .get(id.as_str())
                        .map(|s| s.to_string())
                        .ok_or_else(|| Error::Split {
                            constraint: "known_utterances",
                            detail: format!("utterance `{id}` not in corpus"),
                        })
                })
                .collect()
        };
        let fail = |constraint: &'static str, detail: String| Err(Error::Split { constraint, detail });

        let train = ids(&self.asr_train);
        let pos: Vec<&[String]> = vec![&self.mi_train_pos, &self.mi_test_pos];
        let neg: Vec<&[String]> = vec![&self.mi_train_neg, &self.mi_test_neg];
        let train_speakers = speakers(&self.asr_train)?;

        if self.mi_train_pos.len() != self.mi_train_neg.len()
            || self.mi_test_pos.len() != self.mi_test_neg.len()
        {
            return fail("balanced", "positive and negative counts differ".into());
        }
        let mi_train: BTreeSet<String> = ids(&self.mi_train_pos)
            .union(&ids(&self.mi_train_neg))
            .cloned()
            .collect();
        let mi_test: BTreeSet<String> = ids(&self.mi_test_pos)
            .union(&ids(&self.mi_test_neg))
            .cloned()
            .collect();
        if let Some(id) = mi_train.intersection(&mi_test).next() {
            return fail("mi_train_test_disjoint", format!("`{id}` in both"));
        }
        for set in neg.iter() {
            if let Some(id) = set.iter().find(|id| train.contains(*id)) {
                return fail("negatives_not_trained", format!("`{id}` is in asr_train"));
            }
        }

        match self.level {
            Level::Sample => {
                for set in pos.iter() {
                    if let Some(id) = set.iter().find(|id| !train.contains(*id)) {
                        return fail("positives_trained", format!("`{id}` not in asr_train"));
                    }
                }
                for set in neg.iter() {
                    let spk = speakers(set)?;
                    if let Some(s) = spk.difference(&train_speakers).next() {
                        return fail(
                            "negative_speakers_seen",
                            format!("speaker `{s}` has no training utterances"),
                        );
                    }
                }
            }
            Level::Speaker => {
                for set in pos.iter() {
                    if let Some(id) = set.iter().find(|id| train.contains(*id)) {
                        return fail("positives_held_out", format!("`{id}` is in asr_train"));
                    }
                    let spk = speakers(set)?;
                    if let Some(s) = spk.difference(&train_speakers).next() {
                        return fail("positive_speakers_seen", format!("speaker `{s}` unseen"));
                    }
                }
                for set in neg.iter() {
                    let spk = speakers(set)?;
                    if let Some(s) = spk.intersection(&train_speakers).next() {
                        return fail("negative_speakers_unseen", format!("speaker `{s}` is seen"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Err(Error::format(0, "empty split manifest"));
        }
        let m: SplitManifest = serde_json::from_slice(&bytes)?;
        let computed = m.compute_fingerprint()?;
        if computed != m.fingerprint {
            return Err(Error::Fingerprint {
                expected: m.fingerprint,
                computed,
            });
        }
        Ok(m)
    }
}

fn shuffled_ids(mut ids: Vec<String>, seed: u64, label: &str, key: u64) -> Vec<String> {
    ids.sort();
    let mut rng = rng_for(seed, label, &[key]);
    ids.shuffle(&mut rng);
    ids
}

/// Builds and validates a split manifest. The result depends only on the set
/// of utterances, not their order.
pub fn build_splits(
    corpus: &[Utterance],
    level: Level,
    sizes: &SplitSizes,
    seed: u64,
) -> Result<SplitManifest> {
    let mut by_speaker: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for u in corpus {
        by_speaker
            .entry(u.speaker_id.clone())
            .or_default()
            .push(u.utterance_id.clone());
    }
    if sizes.asr_train_per_speaker == 0 {
        return Err(Error::Split {
            constraint: "asr_train_nonempty",
            detail: "asr_train_per_speaker must be positive".into(),
        });
    }
    let per_speaker = |spk: &str, ids: &[String]| {
        shuffled_ids(ids.to_vec(), seed, "split-speaker", string_key(spk))
    };

    let trained_speakers: Vec<String> = match level {
        Level::Sample => by_speaker.keys().cloned().collect(),
        Level::Speaker => {
            let all: Vec<String> = by_speaker.keys().cloned().collect();
            if sizes.seen_speakers == 0 || sizes.seen_speakers >= all.len() {
                return Err(Error::Split {
                    constraint: "seen_speakers",
                    detail: format!(
                        "need 0 < seen_speakers < {} (got {})",
                        all.len(),
                        sizes.seen_speakers
                    ),
                });
            }
            let mut s = shuffled_ids(all, seed, "split-seen", 0);
            s.truncate(sizes.seen_speakers);
            s.sort();
            s
        }
    };

    let mut asr_train = Vec::new();
    let mut pos_pool = Vec::new();
    let mut neg_pool = Vec::new();
    for (spk, ids) in &by_speaker {
        let ids = per_speaker(spk, ids);
        let seen = trained_speakers.binary_search(spk).is_ok();
        if !seen {
            neg_pool.extend(ids);
            continue;
        }
        if ids.len() <= sizes.asr_train_per_speaker {
            return Err(Error::Split {
                constraint: "asr_train_per_speaker",
                detail: format!(
                    "speaker {spk} has {} utterances, needs more than {}",
                    ids.len(),
                    sizes.asr_train_per_speaker
                ),
            });
        }
        let (train, rest) = ids.split_at(sizes.asr_train_per_speaker);
        asr_train.extend_from_slice(train);
        match level {
            Level::Sample => {
                pos_pool.extend_from_slice(train);
                neg_pool.extend_from_slice(rest);
            }
            Level::Speaker => pos_pool.extend_from_slice(rest),
        }
    }

    let need = sizes.mi_train_per_class + sizes.mi_test_per_class;
    if pos_pool.len() < need {
        return Err(Error::Split {
            constraint: "enough_positives",
            detail: format!("need {need} positive candidates, have {}", pos_pool.len()),
        });
    }
    if neg_pool.len() < need {
        return Err(Error::Split {
            constraint: "enough_negatives",
            detail: format!("need {need} negative candidates, have {}", neg_pool.len()),
        });
    }
    let pos = shuffled_ids(pos_pool, seed, "split-pos", 0);
    let neg = shuffled_ids(neg_pool, seed, "split-neg", 0);
    let take = |v: &[String], from: usize, n: usize| {
        let mut s = v[from..from + n].to_vec();
        s.sort();
        s
    };
    asr_train.sort();
    let mut manifest = SplitManifest {
        level,
        asr_train,
        mi_train_pos: take(&pos, 0, sizes.mi_train_per_class),
        mi_test_pos: take(&pos, sizes.mi_train_per_class, sizes.mi_test_per_class),
        mi_train_neg: take(&neg, 0, sizes.mi_train_per_class),
        mi_test_neg: take(&neg, sizes.mi_train_per_class, sizes.mi_test_per_class),
        fingerprint: String::new(),
    };
    manifest.fingerprint = manifest.compute_fingerprint()?;
    manifest.validate(corpus)?;
    Ok(manifest)
}

/// Looks up utterances by id, preserving the order of `ids`.
pub fn select<'a>(corpus: &'a [Utterance], ids: &[String]) -> Result<Vec<&'a Utterance>> {
    let index: BTreeMap<&str, &Utterance> =
        corpus.iter().map(|u| (u.utterance_id.as_str(), u)).collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("utterance `{id}` not in corpus")))
        })
        .collect()
}
