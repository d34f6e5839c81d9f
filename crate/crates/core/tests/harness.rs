use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal::dataset::{load_pair, SplitAssignment, SplitName};
use xmodal::embedding_plugin::{load_embedder, save_embedder, EmbedderKind, EmbedderSpec};
use xmodal::harness::{
    cmd_cross_eval, cmd_evaluate, cmd_grid, cmd_identify, cmd_prepare, cmd_train, reconstruct_pair,
    Experiment, Overrides, ARTIFACTS, CONFIG_ECHO, LOCK, RESOLVED_CONFIG, RUN_INFO,
};
use xmodal::image::ImageTensor;
use xmodal::metrics::MetricsReport;
use xmodal::networks::{EmbeddingArch, EmbeddingNetwork};
use xmodal::trainer::load_generator;
use xmodal::Error;

const TINY: &str = r#"
seed = 3

[dataset.synthetic]
n_subjects = 6
pairs_per_subject = 5
image_size = 32

[ingest]
target_size = 32

[split]
sid_subject_count = 1
sd2_subject_count = 1
train_fraction = 0.8

[model.generator]
depth = 4
base_channels = 4

[model.discriminator]
n_layers = 2
base_channels = 4

[train]
max_steps = 6
checkpoint_every = 3

[embedder]
embedding_dim = 16

[identification]
ks = [1, 2]
dump_similarity = true
"#;

fn tiny(out: &Path) -> Experiment {
    Experiment::from_text(
        TINY.to_string(),
        &Overrides {
            seed: None,
            out_dir: Some(out.to_path_buf()),
        },
    )
    .unwrap()
}

#[test]
fn prepare_writes_manifest_and_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny(dir.path());
    let p = cmd_prepare(&exp).unwrap();
    assert_eq!(p.manifest.entries.len(), 30);
    assert!(p.manifest_path.exists());
    // 5 training subjects keep floor(0.8 * 5) = 4 pairs each
    assert_eq!(p.splits.train.len(), 20);
    assert_eq!(p.splits.sd_test_1.len(), 5);
    assert_eq!(p.splits.sd_test_2.len(), 1);
    assert_eq!(p.splits.sid_test.len(), 5);
    assert!(p.splits.train.is_disjoint(&p.splits.sd_test_1));
    assert_eq!(SplitAssignment::load(&p.splits_path).unwrap(), p.splits);
    for f in [ARTIFACTS, CONFIG_ECHO, RESOLVED_CONFIG] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert_eq!(
        std::fs::read_to_string(dir.path().join(CONFIG_ECHO)).unwrap(),
        TINY
    );
    assert!(!dir.path().join(LOCK).exists());
}

#[test]
fn prepare_twice_gives_identical_splits() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = cmd_prepare(&tiny(a.path())).unwrap();
    let pb = cmd_prepare(&tiny(b.path())).unwrap();
    assert_eq!(
        std::fs::read(&pa.splits_path).unwrap(),
        std::fs::read(&pb.splits_path).unwrap()
    );
}

#[test]
fn seed_override_changes_the_split() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = cmd_prepare(&tiny(a.path())).unwrap();
    let other = Experiment::from_text(
        TINY.to_string(),
        &Overrides {
            seed: Some(4),
            out_dir: Some(b.path().to_path_buf()),
        },
    )
    .unwrap();
    assert_eq!(other.config.split.seed, 4);
    assert_eq!(other.config.train.seed, 4);
    let pb = cmd_prepare(&other).unwrap();
    assert_ne!(pa.splits, pb.splits);
}

#[test]
fn training_before_prepare_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&tiny(dir.path()), None).unwrap_err();
    assert!(
        matches!(err, Error::Config(ref m) if m.contains("prepare")),
        "{err}"
    );
}

#[test]
fn held_lock_blocks_a_second_command() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(LOCK), "").unwrap();
    assert!(cmd_prepare(&tiny(dir.path())).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = TINY.replace("[train]", "[train]\nlearning_rat = 0.1");
    assert!(matches!(
        Experiment::from_text(text, &Overrides::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn target_size_must_fit_the_generator_depth() {
    let text = TINY.replace("target_size = 32", "target_size = 24");
    assert!(Experiment::from_text(text, &Overrides::default()).is_err());
}

#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny(dir.path());
    cmd_prepare(&exp).unwrap();
    let trained = cmd_train(&exp, None).unwrap();
    assert_eq!(trained.steps, 6);
    assert_eq!(trained.checkpoints.len(), 2);
    let info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_INFO)).unwrap()).unwrap();
    assert_eq!(info["dataset_name"], "synthetic_a");
    assert_eq!(info["seed"], 3);

    let splits = [SplitName::SdTest1, SplitName::SdTest2, SplitName::SidTest];
    let reports = cmd_evaluate(&exp, None, &splits).unwrap();
    assert_eq!(
        reports.iter().map(|r| r.n_pairs).collect::<Vec<_>>(),
        vec![5, 1, 5]
    );
    // sd_test_2 rows are the sd_test_1 rows of its subject
    for row in &reports[1].pairs {
        assert!(reports[0].pairs.contains(row));
    }
    for (split, report) in ["sd_test_1", "sd_test_2", "sid_test"].iter().zip(&reports) {
        let json = dir.path().join("eval").join(format!("{split}.json"));
        assert_eq!(&MetricsReport::read_json(&json).unwrap(), report);
        let csv =
            std::fs::read_to_string(dir.path().join("eval").join(format!("{split}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "pair_id,pixel_diff,feature_diff,style_diff,psnr_db,ssim"
        );
        assert_eq!(lines.len(), report.n_pairs + 1);
    }

    let cmc = cmd_identify(&exp, None, SplitName::SdTest1).unwrap();
    assert_eq!(cmc.ranks, vec![1, 2]);
    assert!(cmc.accuracies[0] <= cmc.accuracies[1]);
    assert!(dir.path().join("identify/sd_test_1.json").exists());
    assert!(dir
        .path()
        .join("identify/sd_test_1_similarity.csv")
        .exists());

    // cross evaluation on the training dataset reproduces evaluate
    let cross =
        cmd_cross_eval(&exp, &trained.final_checkpoint, None, &[SplitName::SdTest1]).unwrap();
    assert_eq!(cross[0].pairs, reports[0].pairs);
    assert_eq!(cross[0].label.model, "synthetic_a");
    assert!(dir
        .path()
        .join("cross_eval/synthetic_a__synthetic_a/sd_test_1.json")
        .exists());

    // grid: columns are pairs in the order given; the middle row is the
    // evaluation reconstruction
    let (manifest, assignment) = exp.load_prepared().unwrap();
    let ids: Vec<String> = assignment.sd_test_1.iter().rev().take(2).cloned().collect();
    let path = cmd_grid(&exp, None, &ids, None).unwrap();
    let grid = image::open(&path).unwrap().to_rgb8();
    assert_eq!(grid.dimensions(), (64, 96));
    let generator = load_generator(&trained.final_checkpoint).unwrap();
    for (col, id) in ids.iter().enumerate() {
        let pair = load_pair(&manifest, manifest.entry(id).unwrap(), &exp.config.ingest).unwrap();
        let fake = reconstruct_pair(&generator, &pair, exp.config.seed)
            .unwrap()
            .to_rgb8();
        let ear = pair.ear.to_rgb8();
        for y in 0..32 {
            for x in 0..32 {
                let gx = col as u32 * 32 + x;
                assert_eq!(grid.get_pixel(gx, y), ear.get_pixel(x, y));
                assert_eq!(grid.get_pixel(gx, 32 + y), fake.get_pixel(x, y));
            }
        }
    }
    assert!(!dir.path().join(LOCK).exists());
}

fn random_batch(seed: u64) -> ImageTensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(3, 32, 32, data, xmodal::image::ValueRange::Unit).unwrap()
}

#[test]
fn builtin_embedder_is_deterministic_per_seed() {
    let spec = EmbedderSpec::default();
    let img = random_batch(1);
    let a = load_embedder(&spec).unwrap().embed_images(&[&img]).unwrap();
    let b = load_embedder(&spec).unwrap().embed_images(&[&img]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 128);
    let other = load_embedder(&EmbedderSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.embed_images(&[&img]).unwrap(), a);
}

#[test]
fn large_embedding_dimension() {
    let spec = EmbedderSpec {
        embedding_dim: 2048,
        ..EmbedderSpec::default()
    };
    let f = load_embedder(&spec)
        .unwrap()
        .embed_images(&[&random_batch(2)])
        .unwrap();
    assert_eq!(f[0].len(), 2048);
}

#[test]
fn external_embedder_round_trips_and_checks_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("psi.bin");
    let net = EmbeddingNetwork::seeded(EmbeddingArch::builtin(24), 77).unwrap();
    save_embedder(&net, &path).unwrap();
    let spec = EmbedderSpec {
        kind: EmbedderKind::External,
        weight_path: Some(path.clone()),
        embedding_dim: 24,
        ..EmbedderSpec::default()
    };
    let img = random_batch(3);
    let loaded = load_embedder(&spec).unwrap();
    assert_eq!(
        loaded.embed_images(&[&img]).unwrap(),
        net.embed_images(&[&img]).unwrap()
    );
    let err = load_embedder(&EmbedderSpec {
        embedding_dim: 32,
        ..spec.clone()
    })
    .unwrap_err();
    assert!(matches!(
        err,
        Error::DimensionMismatch {
            expected: 32,
            found: 24
        }
    ));
    let missing = load_embedder(&EmbedderSpec {
        weight_path: Some(dir.path().join("nope.bin")),
        ..spec
    });
    assert!(missing.is_err());
}
