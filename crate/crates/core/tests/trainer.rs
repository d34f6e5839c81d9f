use std::path::Path;
use std::time::Instant;

use xmodal::dataset::{
    build_splits, generate_synthetic, load_pairs, DatasetManifest, IngestConfig, PairedSample,
    SplitAssignment, SplitSpec, SynthConfig,
};
use xmodal::losses::LossWeights;
use xmodal::networks::{DiscriminatorConfig, EmbeddingArch, EmbeddingNetwork, GeneratorConfig};
use xmodal::trainer::{
    latest_checkpoint, load_generator, read_log, save_generator, train, ModelConfig, TrainConfig,
    TrainData, TrainState,
};
use xmodal::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            depth: 4,
            base_channels: 4,
            ..GeneratorConfig::desk_scale()
        },
        discriminator: DiscriminatorConfig {
            n_layers: 2,
            base_channels: 4,
            image_channels: 3,
        },
    }
}

fn tiny_data(dir: &Path) -> (DatasetManifest, SplitAssignment) {
    let manifest = generate_synthetic(
        &SynthConfig {
            n_subjects: 6,
            pairs_per_subject: 3,
            image_size: 16,
            ..SynthConfig::default()
        },
        dir,
    )
    .unwrap();
    let splits = build_splits(
        &manifest,
        &SplitSpec {
            sid_subject_count: 2,
            sd2_subject_count: 2,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    (manifest, splits)
}

fn ingest() -> IngestConfig {
    IngestConfig {
        target_size: 16,
        ..IngestConfig::default()
    }
}

fn psi() -> EmbeddingNetwork {
    EmbeddingNetwork::seeded(EmbeddingArch::builtin(16), 7).unwrap()
}

fn batch(manifest: &DatasetManifest, splits: &SplitAssignment, n: usize) -> Vec<PairedSample> {
    load_pairs(manifest, splits.train.iter().take(n), &ingest()).unwrap()
}

fn bits(state: &TrainState) -> Vec<u64> {
    state
        .generator
        .params()
        .into_iter()
        .chain(state.discriminator.params())
        .flat_map(|p| p.weight.iter().chain(&p.bias))
        .map(|v| v.to_bits())
        .collect()
}

fn gen_bits(state: &TrainState) -> Vec<u64> {
    state
        .generator
        .params()
        .into_iter()
        .flat_map(|p| p.weight.iter().chain(&p.bias))
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn train_step_leaves_embedding_network_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(dir.path());
    let psi = psi();
    let before = psi.param_hash();
    let mut state = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
    let b = batch(&m, &s, 2);
    for _ in 0..3 {
        let loss = state.train_step(&b, &psi).unwrap();
        assert!(loss.total_g.is_finite() && loss.adversarial_d.is_finite());
    }
    assert_eq!(state.step(), 3);
    assert_eq!(psi.param_hash(), before);
}

#[test]
fn zero_learning_rate_keeps_weights_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(dir.path());
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(tiny_model(), cfg).unwrap();
    let before = bits(&state);
    state.train_step(&batch(&m, &s, 2), &psi()).unwrap();
    assert_eq!(bits(&state), before);
}

#[test]
fn training_steps_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(dir.path());
    let b = batch(&m, &s, 2);
    let run = || {
        let mut state = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
        let losses: Vec<_> = (0..3)
            .map(|_| state.train_step(&b, &psi()).unwrap().total_g.to_bits())
            .collect();
        (losses, bits(&state))
    };
    assert_eq!(run(), run());
}

#[test]
fn discriminator_step_does_not_touch_generator() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(dir.path());
    let b = batch(&m, &s, 1);
    let ears =
        xmodal::image::ImageTensor::batch(&[&b[0].ear], xmodal::image::ValueRange::Symmetric)
            .unwrap();
    let faces =
        xmodal::image::ImageTensor::batch(&[&b[0].face], xmodal::image::ValueRange::Symmetric)
            .unwrap();
    let mut state = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
    let g_before = gen_bits(&state);
    let d_before = state.discriminator.clone();
    let fake = faces.map(|v| v * 0.5);
    state.discriminator_step(&ears, &faces, &fake).unwrap();
    assert_eq!(gen_bits(&state), g_before);
    assert_ne!(state.discriminator, d_before);
}

#[test]
fn non_finite_input_is_reported_by_component() {
    let mut state = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
    let ears = xmodal_nn_tensor(f64::NAN);
    let faces = xmodal_nn_tensor(0.0);
    let err = state.discriminator_step(&ears, &faces, &faces).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref component } if component.contains("logits")));
}

fn xmodal_nn_tensor(v: f64) -> xmodal_nn::Tensor {
    xmodal_nn::Tensor::full(xmodal_nn::Shape::new(1, 3, 16, 16), v)
}

#[test]
fn empty_batch_is_rejected() {
    let mut state = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
    assert!(matches!(
        state.train_step(&[], &psi()),
        Err(Error::Empty(_))
    ));
}

#[test]
fn invalid_weights_are_rejected() {
    let cfg = TrainConfig {
        weights: LossWeights {
            lambda: -1.0,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    assert!(TrainState::new(tiny_model(), cfg).is_err());
}

#[test]
fn state_checkpoint_round_trip_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(&dir.path().join("data"));
    let b = batch(&m, &s, 2);
    let psi = psi();
    let mut a = TrainState::new(tiny_model(), TrainConfig::default()).unwrap();
    a.train_step(&b, &psi).unwrap();
    let p = dir.path().join("s.ckpt");
    a.save(&p).unwrap();
    let mut restored = TrainState::load(&p).unwrap();
    assert_eq!(bits(&restored), bits(&a));
    assert_eq!(restored.step(), 1);
    let la = a.train_step(&b, &psi).unwrap();
    let lb = restored.train_step(&b, &psi).unwrap();
    assert_eq!(la.total_g.to_bits(), lb.total_g.to_bits());
    assert_eq!(bits(&restored), bits(&a));

    let g = dir.path().join("g.ckpt");
    save_generator(&a.generator, &g).unwrap();
    assert_eq!(load_generator(&g).unwrap(), a.generator);
    assert_eq!(load_generator(&p).unwrap().config(), a.generator.config());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(&dir.path().join("data"));
    let psi = psi();
    let data = TrainData {
        manifest: &m,
        splits: &s,
        ingest: ingest(),
        psi: &psi,
    };
    let model = tiny_model();
    let full_cfg = TrainConfig {
        epochs: 3,
        max_steps: Some(7),
        batch_size: 2,
        checkpoint_every: 3,
        ..TrainConfig::default()
    };
    let full_dir = dir.path().join("full");
    let full = train(&model, &full_cfg, &data, &full_dir, None).unwrap();
    assert_eq!(full.steps, 7);
    assert_eq!(read_log(&full.log_path).unwrap().len(), 7);
    assert_eq!(latest_checkpoint(&full_dir).unwrap(), full.final_checkpoint);

    let part_dir = dir.path().join("part");
    let part_cfg = TrainConfig {
        max_steps: Some(3),
        ..full_cfg.clone()
    };
    let part = train(&model, &part_cfg, &data, &part_dir, None).unwrap();
    assert_eq!(part.steps, 3);
    let resumed = train(
        &model,
        &full_cfg,
        &data,
        &part_dir,
        Some(&part.final_checkpoint),
    )
    .unwrap();
    assert_eq!(resumed.steps, 7);
    let a = TrainState::load(&full.final_checkpoint).unwrap();
    let b = TrainState::load(&resumed.final_checkpoint).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(
        std::fs::read_to_string(&full.log_path).unwrap(),
        std::fs::read_to_string(&resumed.log_path).unwrap()
    );
}

#[test]
fn resume_with_different_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, s) = tiny_data(&dir.path().join("data"));
    let psi = psi();
    let data = TrainData {
        manifest: &m,
        splits: &s,
        ingest: ingest(),
        psi: &psi,
    };
    let cfg = TrainConfig {
        max_steps: Some(1),
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let first = train(&tiny_model(), &cfg, &data, &out, None).unwrap();
    let other = TrainConfig { seed: 9, ..cfg };
    assert!(matches!(
        train(
            &tiny_model(),
            &other,
            &data,
            &out,
            Some(&first.final_checkpoint)
        ),
        Err(Error::Config(_))
    ));
}

/// Wall-clock of one desk-scale step; run with `--ignored --nocapture`.
#[test]
#[ignore]
fn desk_scale_step_timing() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SynthConfig::default(), dir.path()).unwrap();
    let s = build_splits(
        &m,
        &SplitSpec {
            sid_subject_count: 5,
            sd2_subject_count: 5,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    let b = load_pairs(&m, s.train.iter().take(1), &IngestConfig::default()).unwrap();
    let psi = EmbeddingNetwork::seeded(EmbeddingArch::builtin(128), 0).unwrap();
    let mut state = TrainState::new(ModelConfig::desk_scale(), TrainConfig::default()).unwrap();
    state.train_step(&b, &psi).unwrap();
    let t = Instant::now();
    for _ in 0..10 {
        state.train_step(&b, &psi).unwrap();
    }
    println!("desk step: {:?}", t.elapsed() / 10);
}
