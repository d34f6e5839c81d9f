//! Reconstruction quality metrics on `[0, 1]` images and per-set
//! aggregation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::losses::{feature_loss, pixel_loss, style_loss};
use crate::networks::{EmbeddingNetwork, Generator, Mode};

/// Compensated (Neumaier) sum.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean(values: &[f64]) -> f64 {
    neumaier_sum(values.iter().copied()) / values.len() as f64
}

fn same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} and {:?} images",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference of the `[0, 1]` versions of both images.
pub fn pixel_difference(fake: &ImageTensor, real: &ImageTensor) -> Result<f64> {
    same_dims(fake, real)?;
    pixel_loss(
        &fake.to_range(ValueRange::Unit).to_tensor(),
        &real.to_range(ValueRange::Unit).to_tensor(),
    )
}

pub fn feature_difference(
    fake: &ImageTensor,
    real: &ImageTensor,
    psi: &EmbeddingNetwork,
) -> Result<f64> {
    same_dims(fake, real)?;
    let f = psi.embed_images(&[fake, real])?;
    feature_loss(&f[0], &f[1])
}

pub fn style_difference(
    fake: &ImageTensor,
    real: &ImageTensor,
    psi: &EmbeddingNetwork,
) -> Result<f64> {
    same_dims(fake, real)?;
    let f = psi.embed_images(&[fake, real])?;
    style_loss(&f[0], &f[1])
}

/// Mean squared error of the `[0, 1]` versions.
pub fn mse(fake: &ImageTensor, real: &ImageTensor) -> Result<f64> {
    same_dims(fake, real)?;
    let a = fake.to_range(ValueRange::Unit);
    let b = real.to_range(ValueRange::Unit);
    Ok(neumaier_sum(
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y)),
    ) / a.data().len() as f64)
}

/// `10 log10(max_val^2 / mse)`; `+inf` when `mse` is zero.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "max_val must be positive, got {max_val}"
        )));
    }
    if !(mse >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mse must be non-negative, got {mse}"
        )));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(fake: &ImageTensor, real: &ImageTensor, max_val: f64) -> Result<f64> {
    psnr_from_mse(mse(fake, real)?, max_val)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || !(self.sigma > 0.0) || !(self.max_val > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid SSIM config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid windows of two `h x w` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("planes must hold {h}x{w} values")));
    }
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            cfg.window_size
        )));
    }
    let taps = gaussian_window(cfg.window_size, cfg.sigma);
    let f = |p: &[f64]| filter_valid(p, h, w, &taps);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = f(a);
    let mu_b = f(b);
    let e_aa = f(&sq(a, a));
    let e_bb = f(&sq(b, b));
    let e_ab = f(&sq(a, b));
    let c1 = (cfg.k1 * cfg.max_val).powi(2);
    let c2 = (cfg.k2 * cfg.max_val).powi(2);
    let map = (0..mu_a.len()).map(|i| {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    });
    Ok((neumaier_sum(map) / mu_a.len() as f64).clamp(-1.0, 1.0))
}

/// SSIM on the luma (channel mean) of the `[0, 1]` versions.
pub fn ssim(fake: &ImageTensor, real: &ImageTensor, cfg: &SsimConfig) -> Result<f64> {
    same_dims(fake, real)?;
    let (_, h, w) = fake.dims();
    ssim_plane(
        &fake.to_range(ValueRange::Unit).luma(),
        &real.to_range(ValueRange::Unit).luma(),
        h,
        w,
        cfg,
    )
}

/// Produces a face image for a pair; implemented by the generator and by
/// evaluation stubs.
pub trait Reconstructor {
    fn reconstruct(&self, pair: &PairedSample, rng: &mut ChaCha8Rng) -> Result<ImageTensor>;
}

impl Reconstructor for Generator {
    fn reconstruct(&self, pair: &PairedSample, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let x = ImageTensor::batch(&[&pair.ear], ValueRange::Symmetric)?;
        let y = self.forward(&x, Mode::Eval, rng)?;
        ImageTensor::from_batch(&y, 0, ValueRange::Symmetric)
    }
}

/// Per-pair RNG for reconstruction, so a pair's output does not depend on
/// which other pairs are evaluated or in what order.
pub fn pair_rng(pair_id: &str, seed: u64) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(pair_id.as_bytes()).finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    for (b, k) in s.iter_mut().zip(seed.to_le_bytes()) {
        *b ^= k;
    }
    ChaCha8Rng::from_seed(s)
}

/// JSON cannot hold infinities; `+inf` PSNR is written as the string "inf".
mod psnr_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub subject_id: String,
    pub pixel_diff: f64,
    pub feature_diff: f64,
    pub style_diff: f64,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Which model was evaluated on which data.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLabel {
    pub model: String,
    pub data: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: ReportLabel,
    pub n_pairs: usize,
    pub pixel_diff: f64,
    pub feature_diff: f64,
    pub style_diff: f64,
    /// Mean over pairs with finite PSNR; `+inf` when every pair is exact.
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    /// Pairs left out of the PSNR mean because their reconstruction was exact.
    pub psnr_excluded: usize,
    pub ssim: f64,
    pub pairs: Vec<PairMetrics>,
}

pub const CSV_HEADER: [&str; 6] = [
    "pair_id",
    "pixel_diff",
    "feature_diff",
    "style_diff",
    "psnr_db",
    "ssim",
];

impl MetricsReport {
    pub fn from_pairs(label: ReportLabel, pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let col = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).collect::<Vec<_>>();
        let finite_psnr: Vec<f64> = pairs
            .iter()
            .map(|p| p.psnr_db)
            .filter(|v| v.is_finite())
            .collect();
        Ok(Self {
            label,
            n_pairs: pairs.len(),
            pixel_diff: mean(&col(|p| p.pixel_diff)),
            feature_diff: mean(&col(|p| p.feature_diff)),
            style_diff: mean(&col(|p| p.style_diff)),
            psnr_db: if finite_psnr.is_empty() {
                f64::INFINITY
            } else {
                mean(&finite_psnr)
            },
            psnr_excluded: pairs.len() - finite_psnr.len(),
            ssim: mean(&col(|p| p.ssim)),
            pairs,
        })
    }

    /// Report restricted to `pair_ids`, recomputed from the per-pair rows.
    pub fn filtered(&self, label: ReportLabel, pair_ids: &BTreeSet<String>) -> Result<Self> {
        let rows = self
            .pairs
            .iter()
            .filter(|p| pair_ids.contains(&p.pair_id))
            .cloned()
            .collect();
        Self::from_pairs(label, rows)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Per-pair table: `pair_id` plus the five metrics.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for p in &self.pairs {
            w.write_record([
                p.pair_id.clone(),
                p.pixel_diff.to_string(),
                p.feature_diff.to_string(),
                p.style_diff.to_string(),
                p.psnr_db.to_string(),
                p.ssim.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// All five metrics for one (reconstruction, ground truth) pair.
pub fn pair_metrics(
    pair: &PairedSample,
    fake: &ImageTensor,
    psi: &EmbeddingNetwork,
    ssim_cfg: &SsimConfig,
) -> Result<PairMetrics> {
    let real = &pair.face;
    same_dims(fake, real)?;
    let feats = psi.embed_images(&[fake, real])?;
    Ok(PairMetrics {
        pair_id: pair.pair_id.clone(),
        subject_id: pair.subject_id.clone(),
        pixel_diff: pixel_difference(fake, real)?,
        feature_diff: feature_loss(&feats[0], &feats[1])?,
        style_diff: style_loss(&feats[0], &feats[1])?,
        psnr_db: psnr(fake, real, ssim_cfg.max_val)?,
        ssim: ssim(fake, real, ssim_cfg)?,
    })
}

/// Reconstruct every pair's face from its ear and aggregate the metrics.
pub fn evaluate_set(
    model: &dyn Reconstructor,
    psi: &EmbeddingNetwork,
    pairs: &[PairedSample],
    ssim_cfg: &SsimConfig,
    seed: u64,
    label: ReportLabel,
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let rows = pairs
        .iter()
        .map(|pair| {
            let fake = model.reconstruct(pair, &mut pair_rng(&pair.pair_id, seed))?;
            pair_metrics(pair, &fake, psi, ssim_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(label, rows)
}
