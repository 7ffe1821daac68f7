//! End-to-end training behaviour on the toy corpus. Slow in debug builds;
//! the test profile is optimized.

use std::sync::OnceLock;

use germ_core::data::corpus::{gen_corpus, gen_motif_task};

use germ_core::training::finetune::{encode_task, finetune_classifier, FinetuneConfig, FinetuneMode};
use germ_core::training::{encode_corpus, pretrain, TrainConfig};
use germ_core::{AttentionVariant, CorpusSpec, Model, ModelConfig, Vocab};

struct Fixture {
    vocab: Vocab,
    model: Model,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = gen_corpus(&CorpusSpec::default()).unwrap();
        let vocab = Vocab::train(&corpus, 64).unwrap();
        let mcfg = ModelConfig::toy(AttentionVariant::Softmax1);
        let ids = encode_corpus(&vocab, &corpus, mcfg.max_seq_len).unwrap();
        let out = pretrain(&TrainConfig::default(), &ids, &mcfg).unwrap();
        Fixture { vocab, model: out.model }
    })
}

fn task(seed: u64) -> Vec<(u8, Vec<usize>)> {
    let f = fixture();
    let rows = gen_motif_task("TATAAA", 500, 24, 40, seed).unwrap();
    encode_task(&f.vocab, &rows, f.model.config.max_seq_len).unwrap()
}

fn run(mode: FinetuneMode, seed: u64) -> f64 {
    let cfg = FinetuneConfig { mode, seed, ..FinetuneConfig::default() };
    finetune_classifier(&fixture().model, &task(seed), &cfg).unwrap().report.mcc
}

#[test]
fn full_finetune_separates_the_motif_task() {
    let mcc = run(FinetuneMode::Full, 0);
    assert!(mcc >= 0.9, "full fine-tune MCC {mcc}");
}

#[test]
fn frozen_encoder_stays_near_chance() {
    let mut m: Vec<f64> = (0..5).map(|s| run(FinetuneMode::Frozen, s).abs()).collect();
    m.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("frozen |MCC| {m:?}");
    assert!(m[2] < 0.3, "median frozen |MCC| {}", m[2]);
}

#[test]
fn lora_tracks_full_finetuning() {
    let (full, lora) = (run(FinetuneMode::Full, 1), run(FinetuneMode::Lora, 1));
    println!("full {full:.3} lora {lora:.3}");
    assert!(lora > 0.5 && lora >= full - 0.25, "lora {lora} vs full {full}");
}

#[test]
fn both_variants_reduce_mlm_loss() {
    let corpus = gen_corpus(&CorpusSpec { num_sequences: 400, ..Default::default() }).unwrap();
    let vocab = Vocab::train(&corpus, 64).unwrap();
    for v in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
        let mcfg = ModelConfig::toy(v);
        let ids = encode_corpus(&vocab, &corpus, mcfg.max_seq_len).unwrap();
        let cfg = TrainConfig { steps: 300, warmup_steps: 30, ..TrainConfig::default() };
        let out = pretrain(&cfg, &ids, &mcfg).unwrap();
        let (a, b) = (out.smoothed_initial_loss(20), out.smoothed_final_loss(20));
        assert!(b < a - 0.2, "{v:?}: {a} -> {b}");
    }
}
