//! Fine-tuning loop behavior on a tiny model and corpus.

use spoofqa_core::corpus::{gen_synthetic_corpus, ArtifactFamily, Split, SynthConfig};
use spoofqa_core::lora::{attach_lora, LoraConfig};
use spoofqa_core::model::checkpoint::{load_adapters, load_model, save_model};
use spoofqa_core::model::{ModelConfig, MultimodalModel};
use spoofqa_core::promptkit::TemplateId;
use spoofqa_core::train::{
    finetune, predict_prepared, prepare_utterances, pretrain_format, AdamState, PretrainConfig, TrainConfig,
};

fn tiny() -> MultimodalModel {
    let cfg = ModelConfig {
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_ff: 32,
        adapter_stride: 8,
        max_seq: 512,
        ..ModelConfig::default()
    };
    MultimodalModel::init(cfg, 1).unwrap()
}

fn corpus(dir: &std::path::Path) -> spoofqa_core::corpus::Manifest {
    let cfg = SynthConfig {
        n_bonafide: 6,
        n_spoof: 6,
        duration_s: 0.5,
        artifact_families: vec![ArtifactFamily::Glitch, ArtifactFamily::Robotic],
        seed: 3,
        split: Split::Train,
    };
    gen_synthetic_corpus(&cfg, dir).unwrap()
}

fn lora_model() -> MultimodalModel {
    attach_lora(tiny(), LoraConfig { rank: 4, ..LoraConfig::default() }, 2).unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 4,
        prompt_mode: TemplateId::P1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let a = finetune(lora_model(), &m, Some(&m), &cfg(5), None).unwrap();
    let b = finetune(lora_model(), &m, Some(&m), &cfg(5), None).unwrap();
    assert_eq!(a.history.trajectory(), b.history.trajectory());
    assert_eq!(a.model, b.model);
    let c = finetune(lora_model(), &m, Some(&m), &cfg(6), None).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn lora_finetune_touches_only_adapters_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(&dir.path().join("corpus"));
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    let start = lora_model();
    let res = finetune(start.clone(), &m, None, &cfg(1), Some(&out)).unwrap();
    assert_eq!(res.model.encoder, start.encoder);
    assert_eq!(res.model.adapter, start.adapter);
    assert_eq!(res.model.decoder, start.decoder);
    assert_ne!(res.model.lora, start.lora);

    let ckpt = res.checkpoint.clone().unwrap();
    assert!(ckpt.ends_with("epoch_02.ckpt"), "{ckpt:?}");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    AdamState::load(&out.join("optimizer.state")).unwrap();

    // the adapter checkpoint restores the trained model on top of the base
    let base_path = dir.path().join("base.ckpt");
    save_model(&tiny(), &base_path).unwrap();
    let restored = load_adapters(load_model(&base_path).unwrap(), &ckpt).unwrap();
    assert_eq!(restored, res.model);
}

#[test]
fn empty_training_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let empty = m.filter_split(Split::Eval);
    assert!(finetune(lora_model(), &empty, None, &cfg(1), None).is_err());
}

#[test]
fn format_pretraining_yields_answers_independent_of_audio() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path());
    let pcfg = PretrainConfig {
        steps: 120,
        lr: 3e-3,
        seed: 4,
        ..PretrainConfig::default()
    };
    let (base, losses) = pretrain_format(tiny(), &m, &pcfg).unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());
    let utts = prepare_utterances(&base, &m, true).unwrap();
    let preds = predict_prepared(&base, &utts, TemplateId::P1, true).unwrap();
    let answers: Vec<_> = preds.iter().map(|p| p.predicted()).collect();
    assert!(answers[0].is_some(), "{:?}", preds[0]);
    assert!(answers.iter().all(|a| *a == answers[0]), "{answers:?}");

    let bad = PretrainConfig { answer_bias: 1.5, ..pcfg };
    assert!(pretrain_format(tiny(), &m, &bad).is_err());
}
