use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Square output side length.
    pub target_size: usize,
    pub range: ValueRange,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            target_size: 64,
            range: ValueRange::Symmetric,
        }
    }
}

/// Ear image, face image and labels for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub ear: ImageTensor,
    pub face: ImageTensor,
    pub subject_id: String,
    pub pair_id: String,
}

/// Bilinear resampling with half-pixel centers; edge pixels are clamped.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let (c, h, w) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = img.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageTensor::new(c, out_h, out_w, data, img.range())
}

/// Decode an image file as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-size image".into(),
        });
    }
    ImageTensor::from_rgb8(&decoded.to_rgb8())
}

/// Load, resize and range-map one image.
pub fn load_image(path: &Path, cfg: &IngestConfig) -> Result<ImageTensor> {
    let img = read_image(path)?;
    Ok(resize_bilinear(&img, cfg.target_size, cfg.target_size)?.to_range(cfg.range))
}

/// Load both images of a manifest entry.
pub fn load_pair(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    cfg: &IngestConfig,
) -> Result<PairedSample> {
    let ear = load_image(&manifest.resolve(&entry.ear_path), cfg)?;
    let face = load_image(&manifest.resolve(&entry.face_path), cfg)?;
    Ok(PairedSample {
        ear,
        face,
        subject_id: entry.subject_id.clone(),
        pair_id: entry.pair_id.clone(),
    })
}

/// Load the pairs whose ids are in `ids`, in manifest order.
pub fn load_pairs<'a>(
    manifest: &DatasetManifest,
    ids: impl IntoIterator<Item = &'a String>,
    cfg: &IngestConfig,
) -> Result<Vec<PairedSample>> {
    let wanted: std::collections::HashSet<&str> = ids.into_iter().map(String::as_str).collect();
    manifest
        .entries
        .iter()
        .filter(|e| wanted.contains(e.pair_id.as_str()))
        .map(|e| load_pair(manifest, e, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn save_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)));
        img.save(path).unwrap();
    }

    #[test]
    fn resizes_to_target_square() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_png(&p, 512, 384, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]);
        let cfg = IngestConfig {
            target_size: 256,
            range: ValueRange::Unit,
        };
        let img = load_image(&p, &cfg).unwrap();
        assert_eq!(img.dims(), (3, 256, 256));
    }

    #[test]
    fn same_size_only_remaps_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        save_png(&p, 8, 8, |x, y| [(x * 30) as u8, (y * 30) as u8, 255]);
        let raw = read_image(&p).unwrap();
        let cfg = IngestConfig {
            target_size: 8,
            range: ValueRange::Symmetric,
        };
        let img = load_image(&p, &cfg).unwrap();
        for (a, b) in img.data().iter().zip(raw.data()) {
            assert!((a - (2.0 * b - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gray_stays_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_png(&p, 37, 53, |_, _| [128, 128, 128]);
        let cfg = IngestConfig {
            target_size: 16,
            range: ValueRange::Unit,
        };
        let img = load_image(&p, &cfg).unwrap();
        for v in img.data() {
            assert!((v - 128.0 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn undecodable_file_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Image { .. })));
    }

    #[test]
    fn bilinear_downsample_by_two_averages_blocks() {
        let img = ImageTensor::new(
            1,
            2,
            4,
            vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75],
            ValueRange::Unit,
        )
        .unwrap();
        let out = resize_bilinear(&img, 1, 2).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }
}
