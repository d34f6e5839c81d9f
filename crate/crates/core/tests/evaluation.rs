use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::dataset::PairedSample;
use xmodal::identification::{cmc, identify, similarity_matrix, SimilarityMatrix};
use xmodal::image::{ImageTensor, ValueRange};
use xmodal::losses::FeatureVector;
use xmodal::metrics::{
    evaluate_set, neumaier_sum, psnr, ssim, MetricsReport, Reconstructor, ReportLabel, SsimConfig,
};
use xmodal::networks::{EmbeddingArch, EmbeddingNetwork};
use xmodal::{Error, Result};

struct GroundTruth;

impl Reconstructor for GroundTruth {
    fn reconstruct(&self, pair: &PairedSample, _rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        Ok(pair.face.clone())
    }
}

/// Returns the ground-truth face with every value replaced by its
/// complement, which puts every pixel of a binary face maximally wrong.
struct Inverted;

impl Reconstructor for Inverted {
    fn reconstruct(&self, pair: &PairedSample, _rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let f = pair.face.to_range(ValueRange::Unit);
        let (c, h, w) = f.dims();
        ImageTensor::new(
            c,
            h,
            w,
            f.data().iter().map(|v| 1.0 - v).collect(),
            ValueRange::Unit,
        )
    }
}

struct Constant(ImageTensor);

impl Reconstructor for Constant {
    fn reconstruct(&self, _pair: &PairedSample, _rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        Ok(self.0.clone())
    }
}

fn image(rng: &mut ChaCha8Rng, c: usize, s: usize) -> ImageTensor {
    let data = (0..c * s * s).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(c, s, s, data, ValueRange::Unit).unwrap()
}

fn binary_image(rng: &mut ChaCha8Rng, s: usize) -> ImageTensor {
    let data = (0..3 * s * s)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    ImageTensor::new(3, s, s, data, ValueRange::Unit).unwrap()
}

fn pairs(n_subjects: usize, per_subject: usize, seed: u64) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in 0..n_subjects {
        for p in 0..per_subject {
            out.push(PairedSample {
                ear: image(&mut rng, 3, 16),
                face: binary_image(&mut rng, 16),
                subject_id: format!("s{s}"),
                pair_id: format!("s{s}_p{p}"),
            });
        }
    }
    out
}

fn psi() -> EmbeddingNetwork {
    EmbeddingNetwork::seeded(EmbeddingArch::builtin(32), 5).unwrap()
}

fn label() -> ReportLabel {
    ReportLabel {
        model: "m".into(),
        data: "d".into(),
        split: "s".into(),
    }
}

#[test]
fn ground_truth_reconstruction_is_perfect() {
    let set = pairs(3, 2, 1);
    let r = evaluate_set(
        &GroundTruth,
        &psi(),
        &set,
        &SsimConfig::default(),
        0,
        label(),
    )
    .unwrap();
    assert_eq!(r.n_pairs, 6);
    assert_eq!(r.pixel_diff, 0.0);
    assert_eq!(r.feature_diff, 0.0);
    assert_eq!(r.style_diff, 0.0);
    assert!((r.ssim - 1.0).abs() < 1e-12);
    assert_eq!(r.psnr_db, f64::INFINITY);
    assert_eq!(r.psnr_excluded, 6);
}

#[test]
fn inverted_binary_faces_have_unit_pixel_difference() {
    let set = pairs(2, 2, 2);
    let r = evaluate_set(&Inverted, &psi(), &set, &SsimConfig::default(), 0, label()).unwrap();
    assert!((r.pixel_diff - 1.0).abs() < 1e-12);
    assert!(r.psnr_db.abs() < 1e-12);
    assert_eq!(r.psnr_excluded, 0);
}

#[test]
fn report_means_match_per_pair_rows() {
    let set = pairs(4, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stub = Constant(image(&mut rng, 3, 16));
    let r = evaluate_set(&stub, &psi(), &set, &SsimConfig::default(), 0, label()).unwrap();
    let n = r.pairs.len() as f64;
    let mean = |f: fn(&xmodal::metrics::PairMetrics) -> f64| r.pairs.iter().map(f).sum::<f64>() / n;
    assert!((r.pixel_diff - mean(|p| p.pixel_diff)).abs() < 1e-12);
    assert!((r.feature_diff - mean(|p| p.feature_diff)).abs() < 1e-12);
    assert!((r.style_diff - mean(|p| p.style_diff)).abs() < 1e-12);
    assert!((r.psnr_db - mean(|p| p.psnr_db)).abs() < 1e-9);
    assert!((r.ssim - mean(|p| p.ssim)).abs() < 1e-12);
    for (row, pair) in r.pairs.iter().zip(&set) {
        assert_eq!(row.pair_id, pair.pair_id);
        assert_eq!(row.subject_id, pair.subject_id);
    }
}

#[test]
fn psnr_mean_skips_exact_pairs() {
    let set = pairs(1, 4, 4);
    let good = evaluate_set(
        &GroundTruth,
        &psi(),
        &set[..2],
        &SsimConfig::default(),
        0,
        label(),
    )
    .unwrap();
    let bad = evaluate_set(
        &Inverted,
        &psi(),
        &set[2..],
        &SsimConfig::default(),
        0,
        label(),
    )
    .unwrap();
    let rows = good.pairs.into_iter().chain(bad.pairs).collect();
    let r = MetricsReport::from_pairs(label(), rows).unwrap();
    assert_eq!(r.psnr_excluded, 2);
    assert!(r.psnr_db.is_finite());
    assert!((r.pixel_diff - 0.5).abs() < 1e-12);
}

#[test]
fn report_json_round_trips_with_infinite_psnr() {
    let set = pairs(2, 1, 5);
    let r = evaluate_set(
        &GroundTruth,
        &psi(),
        &set,
        &SsimConfig::default(),
        0,
        label(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    r.write_json(&path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().contains("\"inf\""));
    assert_eq!(MetricsReport::read_json(&path).unwrap(), r);
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let err = evaluate_set(
        &GroundTruth,
        &psi(),
        &[],
        &SsimConfig::default(),
        0,
        label(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}

#[test]
fn metrics_are_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = SsimConfig::default();
    for _ in 0..10 {
        let a = image(&mut rng, 3, 24);
        let b = image(&mut rng, 3, 24);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ssim_falls_as_noise_grows() {
    let cfg = SsimConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let clean = image(&mut rng, 1, 32);
        let noise: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for level in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let data = clean
                .data()
                .iter()
                .zip(&noise)
                .map(|(x, n)| (x + level * n).clamp(0.0, 1.0))
                .collect();
            let noisy = ImageTensor::new(1, 32, 32, data, ValueRange::Unit).unwrap();
            let s = ssim(&clean, &noisy, &cfg).unwrap();
            assert!(
                s < last,
                "seed {seed}: SSIM {s} at noise {level} not below {last}"
            );
            last = s;
        }
    }
}

#[test]
fn neumaier_sum_recovers_cancelled_terms() {
    assert_eq!(neumaier_sum([1.0, 1e100, 1.0, -1e100]), 2.0);
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn random_similarity(seed: u64) -> SimilarityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (np, ng) = (12, 15);
    let values = (0..np * ng).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probes = (0..np)
        .map(|_| format!("id{}", rng.random_range(0..6)))
        .collect();
    let gallery = (0..ng).map(|j| format!("id{}", j % 6)).collect();
    SimilarityMatrix::new(values, probes, gallery).unwrap()
}

#[test]
fn cmc_is_invariant_to_strictly_increasing_maps() {
    let ks = [1, 2, 3, 5, 10, 15];
    for seed in 0..10 {
        let sim = random_similarity(seed);
        let base = cmc(&sim, &ks).unwrap();
        for f in [
            |x: f64| 0.5 * x - 0.25,
            |x: f64| x.tanh(),
            |x: f64| x * x * x,
        ] {
            assert_eq!(cmc(&sim.map(f).unwrap(), &ks).unwrap(), base);
        }
    }
}

#[test]
fn similarity_ignores_feature_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats: Vec<FeatureVector> = (0..6)
        .map(|_| {
            FeatureVector::pooled((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    let scaled: Vec<FeatureVector> = feats
        .iter()
        .map(|f| FeatureVector::pooled(f.values().iter().map(|v| 7.5 * v).collect()).unwrap())
        .collect();
    let pid = ids(&["a", "b", "c"]);
    let gid = ids(&["a", "b", "c"]);
    let s1 = similarity_matrix(&feats[..3], &feats[3..], pid.clone(), gid.clone()).unwrap();
    let s2 = similarity_matrix(&scaled[..3], &feats[3..], pid, gid).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((s1.get(i, j) - s2.get(i, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_matches_cosine_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mk = |rng: &mut ChaCha8Rng| {
        (0..10)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    let p: Vec<Vec<f64>> = (0..4).map(|_| mk(&mut rng)).collect();
    let g: Vec<Vec<f64>> = (0..5).map(|_| mk(&mut rng)).collect();
    let fv = |v: &Vec<Vec<f64>>| {
        v.iter()
            .map(|x| FeatureVector::pooled(x.clone()).unwrap())
            .collect::<Vec<_>>()
    };
    let sim = similarity_matrix(
        &fv(&p),
        &fv(&g),
        ids(&["a", "b", "c", "d"]),
        ids(&["a", "b", "c", "d", "e"]),
    )
    .unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..10 {
                dot += p[i][k] * g[j][k];
                na += p[i][k] * p[i][k];
                nb += g[j][k] * g[j][k];
            }
            assert!((sim.get(i, j) - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_feature_vector_is_reported() {
    let zero = FeatureVector::pooled(vec![0.0; 4]).unwrap();
    let one = FeatureVector::pooled(vec![1.0; 4]).unwrap();
    let err = similarity_matrix(&[zero], &[one], ids(&["a"]), ids(&["a"])).unwrap_err();
    assert!(matches!(err, Error::ZeroNorm(_)));
}

fn gallery_of(set: &[PairedSample]) -> Vec<(ImageTensor, String)> {
    set.iter()
        .map(|p| (p.face.clone(), p.subject_id.clone()))
        .collect()
}

#[test]
fn perfect_reconstruction_identifies_every_probe() {
    let set = pairs(5, 1, 10);
    let id = identify(&GroundTruth, &psi(), &set, &gallery_of(&set), &[1, 5], 0).unwrap();
    assert_eq!(id.curve.accuracies, vec![1.0, 1.0]);
}

#[test]
fn constant_reconstruction_ranks_by_gallery_order() {
    // every probe sees the same similarity row; with one image per subject
    // the probe of the subject at gallery position j ties-breaks to rank
    // (#strictly better) + (#equal before j) + 1
    let set = pairs(6, 1, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let stub = Constant(image(&mut rng, 3, 16));
    let gallery = vec![(set[0].face.clone(), "s0".to_string()); 6]
        .into_iter()
        .enumerate()
        .map(|(j, (img, _))| (img, format!("s{j}")))
        .collect::<Vec<_>>();
    let id = identify(&stub, &psi(), &set, &gallery, &[1, 2, 3, 6], 0).unwrap();
    // all gallery images identical: probe of subject j is at rank j + 1
    assert_eq!(
        id.curve.accuracies,
        vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 1.0]
    );
}

#[test]
fn probes_absent_from_gallery_are_excluded() {
    let set = pairs(4, 1, 13);
    let id = identify(&GroundTruth, &psi(), &set, &gallery_of(&set[..3]), &[1], 0).unwrap();
    assert_eq!(id.curve.excluded_probes, 1);
    assert_eq!(id.curve.accuracies, vec![1.0]);
    let err = identify(
        &GroundTruth,
        &psi(),
        &set[3..],
        &gallery_of(&set[..3]),
        &[1],
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}
