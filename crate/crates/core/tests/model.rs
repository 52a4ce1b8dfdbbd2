mod common;

use std::sync::OnceLock;

use miaudit::losses::{combine, TokenSeq};
use miaudit::model::{
    beam_decode, ctc_logprobs, decoder_logprobs, frame_gradient, init_model, loss_pair, train,
    Architecture, Checkpoint, ModelConfig, TrainConfig,
};
use miaudit::synth::{build_splits, gen_corpus, select, CorpusConfig, Level, SplitSizes, Utterance};
use proptest::prelude::*;

fn corpus() -> &'static [Utterance] {
    static C: OnceLock<Vec<Utterance>> = OnceLock::new();
    C.get_or_init(|| gen_corpus(&CorpusConfig::default()).unwrap().utterances)
}

/// The default sample-level recogniser with its split.
fn desk() -> &'static (Checkpoint, miaudit::synth::SplitManifest) {
    static M: OnceLock<(Checkpoint, miaudit::synth::SplitManifest)> = OnceLock::new();
    M.get_or_init(|| {
        let m = build_splits(corpus(), Level::Sample, &SplitSizes::default(), 0).unwrap();
        let data = select(corpus(), &m.asr_train).unwrap();
        let ckpt = train(&init_model(&ModelConfig::default()).unwrap(), &data, &TrainConfig::default()).unwrap();
        (ckpt, m)
    })
}

fn config(arch: bool, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        num_encoder_layers: layers,
        architecture: if arch { Architecture::Convolutional } else { Architecture::Recurrent },
        seed,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_pure_and_input_gradient_matches_frames(
        conv in any::<bool>(),
        layers in 1usize..=2,
        seed in any::<u64>(),
        t in 2usize..9,
    ) {
        let m = init_model(&config(conv, layers, seed)).unwrap();
        let x = common::rand_tensor(&mut common::rng(seed), &[t, 8], -2.0, 2.0);
        let y = TokenSeq::new(vec![1, 4]).unwrap();
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(
            bits(ctc_logprobs(&m, &x).unwrap().data()),
            bits(ctc_logprobs(&m, &x).unwrap().data())
        );
        prop_assert_eq!(
            bits(decoder_logprobs(&m, &x, &y).unwrap().data()),
            bits(decoder_logprobs(&m, &x, &y).unwrap().data())
        );
        let (loss, g) = frame_gradient(&m, &x, &y).unwrap();
        prop_assert_eq!(g.shape(), x.shape());
        prop_assert!(g.all_finite() && loss.is_finite());
    }
}

#[test]
fn training_loss_falls_and_fits_the_training_set_in_thirty_epochs() {
    let (_, m) = desk();
    let data = select(corpus(), &m.asr_train).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let ckpt = train(&init_model(&ModelConfig::default()).unwrap(), &data, &cfg).unwrap();
    let h = &ckpt.training.loss_history;
    assert!(h[0] > h[1] && h[1] > h[2], "{:?}", &h[..3]);
    let acc = ckpt.training.greedy_token_accuracy.unwrap();
    assert!(acc >= 0.95, "greedy token accuracy {acc}");
}

#[test]
fn members_have_lower_loss_than_non_members() {
    let (ckpt, m) = desk();
    let mean_loss = |ids: &[String]| {
        let utts = select(corpus(), ids).unwrap();
        let total: f64 = utts
            .iter()
            .map(|u| {
                let p = loss_pair(ckpt, &u.frames, &u.target).unwrap();
                combine(p.attention_kl, p.ctc, ckpt.config.attention_weight)
            })
            .sum();
        total / utts.len() as f64
    };
    let (pos, neg) = (mean_loss(&m.mi_test_pos), mean_loss(&m.mi_test_neg));
    assert!(pos < neg, "members {pos} vs non-members {neg}");
}

#[test]
fn wider_beams_never_lower_the_top_score() {
    let (ckpt, m) = desk();
    for u in select(corpus(), &m.mi_test_neg).unwrap().iter().take(60) {
        let mut prev = f64::NEG_INFINITY;
        for b in [1, 2, 4, 8, 16] {
            let top = beam_decode(ckpt, &u.frames, b, 1).unwrap()[0].log_score;
            assert!(top >= prev, "{}: beam {b} scored {top} < {prev}", u.utterance_id);
            prev = top;
        }
    }
}
