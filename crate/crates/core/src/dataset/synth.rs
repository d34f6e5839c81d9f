//! Procedural paired ear/face images for desk-scale runs.
//!
//! Each subject gets a latent vector `z` in `[0,1]^8`. The ear and the face
//! are two different fixed renderings of the same `z`:
//!
//! | latent | face (family A)              | ear (family A)                |
//! |--------|------------------------------|-------------------------------|
//! | z0     | background red, eye radius   | helix width                   |
//! | z1     | background green, mouth width| helix height                  |
//! | z2     | background blue, iris tint   | concha size                   |
//! | z3     | head width                   | helix stripe frequency        |
//! | z4     | skin tone                    | skin tone                     |
//! | z5     | skin blue, lip tint          | background red, skin blue     |
//! | z6     | hair tone and height         | background green              |
//! | z7     | hair blue, eye spacing       | background blue, lobe size    |
//!
//! Family B uses different shapes and colour maps of the same latents so a
//! model trained on one family can be tested on the other.
//!
//! Per-pair nuisance is a shared sub-pixel translation of up to two pixels
//! and a brightness offset of up to 0.05, applied identically to both
//! images of the pair.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};

pub const LATENT_DIM: usize = 8;
const MAX_SHIFT_PX: f64 = 2.0;
const MAX_BRIGHTNESS: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthFamily {
    #[default]
    A,
    B,
}

impl SynthFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthFamily::A => "a",
            SynthFamily::B => "b",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub pairs_per_subject: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub family: SynthFamily,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            pairs_per_subject: 5,
            image_size: 64,
            seed: 0,
            family: SynthFamily::A,
        }
    }
}

/// Per-pair nuisance parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub shift_x: f64,
    pub shift_y: f64,
    pub brightness: f64,
}

impl Nuisance {
    pub const NONE: Nuisance = Nuisance {
        shift_x: 0.0,
        shift_y: 0.0,
        brightness: 0.0,
    };
}

type Rgb = [f64; 3];

struct Canvas {
    size: usize,
    pixels: Vec<Rgb>,
    shift: (f64, f64),
}

impl Canvas {
    fn new(size: usize, nuisance: &Nuisance) -> Self {
        Self {
            size,
            pixels: vec![[0.0; 3]; size * size],
            shift: (
                nuisance.shift_x / size as f64,
                nuisance.shift_y / size as f64,
            ),
        }
    }

    /// Blend `color(u, v)` in with per-pixel coverage `coverage(u, v)`, where
    /// `(u, v)` are shifted normalized pixel-center coordinates.
    fn paint(&mut self, coverage: impl Fn(f64, f64) -> f64, color: impl Fn(f64, f64) -> Rgb) {
        let s = self.size as f64;
        for y in 0..self.size {
            for x in 0..self.size {
                let u = (x as f64 + 0.5) / s - self.shift.0;
                let v = (y as f64 + 0.5) / s - self.shift.1;
                let a = coverage(u, v);
                if a <= 0.0 {
                    continue;
                }
                let c = color(u, v);
                let px = &mut self.pixels[y * self.size + x];
                for k in 0..3 {
                    px[k] += a * (c[k] - px[k]);
                }
            }
        }
    }

    fn fill(&mut self, color: impl Fn(f64, f64) -> Rgb) {
        self.paint(|_, _| 1.0, color);
    }

    fn finish(self, brightness: f64) -> ImageTensor {
        let plane = self.size * self.size;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.iter().enumerate() {
            for k in 0..3 {
                data[k * plane + i] = (px[k] + brightness).clamp(0.0, 1.0);
            }
        }
        ImageTensor::new(3, self.size, self.size, data, ValueRange::Unit).expect("valid canvas")
    }
}

/// Anti-aliased coverage of a shape from its signed distance in normalized
/// units (negative inside).
fn coverage(signed_distance: f64, size: usize) -> f64 {
    (0.5 - signed_distance * size as f64).clamp(0.0, 1.0)
}

fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((u - cx) / rx).hypot((v - cy) / ry);
    (q - 1.0) * rx.min(ry)
}

fn rounded_rect(u: f64, v: f64, cx: f64, cy: f64, hx: f64, hy: f64, r: f64) -> f64 {
    let qx = (u - cx).abs() - (hx - r);
    let qy = (v - cy).abs() - (hy - r);
    qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0) - r
}

fn scale(c: Rgb, f: f64) -> Rgb {
    [c[0] * f, c[1] * f, c[2] * f]
}

fn face_a(z: &[f64; LATENT_DIM], size: usize, n: &Nuisance) -> ImageTensor {
    let mut cv = Canvas::new(size, n);
    let bg = [0.2 + 0.6 * z[0], 0.2 + 0.6 * z[1], 0.25 + 0.5 * z[2]];
    cv.fill(|_, _| bg);
    let head_rx = 0.24 + 0.08 * z[3];
    let head_ry = 0.33;
    let hair = [0.1 + 0.6 * z[6], 0.07 + 0.4 * z[6], 0.05 + 0.35 * z[7]];
    let hair_ry = 0.14 + 0.1 * z[6];
    cv.paint(
        |u, v| {
            coverage(
                ellipse(u, v, 0.5, 0.36, head_rx * 1.08, hair_ry + 0.08),
                size,
            )
        },
        |_, _| hair,
    );
    let skin = [0.55 + 0.4 * z[4], 0.4 + 0.3 * z[4], 0.3 + 0.3 * z[5]];
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.58, head_rx, head_ry), size),
        |_, _| skin,
    );
    let eye_dx = 0.08 + 0.06 * z[7];
    let eye_r = 0.03 + 0.02 * z[0];
    let iris = [0.1, 0.1 + 0.2 * z[2], 0.15 + 0.5 * z[2]];
    for side in [-1.0, 1.0] {
        cv.paint(
            |u, v| coverage(ellipse(u, v, 0.5 + side * eye_dx, 0.52, eye_r, eye_r), size),
            |_, _| iris,
        );
    }
    let lips = [0.55 + 0.35 * z[5], 0.15, 0.2];
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.74, 0.05 + 0.08 * z[1], 0.025), size),
        |_, _| lips,
    );
    cv.finish(n.brightness)
}

fn ear_a(z: &[f64; LATENT_DIM], size: usize, n: &Nuisance) -> ImageTensor {
    let mut cv = Canvas::new(size, n);
    let bg = [0.25 + 0.5 * z[5], 0.25 + 0.5 * z[6], 0.25 + 0.5 * z[7]];
    cv.fill(|_, _| bg);
    let skin = [0.55 + 0.4 * z[4], 0.4 + 0.3 * z[4], 0.3 + 0.3 * z[5]];
    let rx = 0.2 + 0.1 * z[0];
    let ry = 0.33 + 0.08 * z[1];
    let freq = 4.0 + 8.0 * z[3];
    let lobe_r = 0.06 + 0.05 * z[7];
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.5 + ry * 0.85, lobe_r, lobe_r), size),
        |_, _| scale(skin, 0.95),
    );
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.47, rx, ry), size),
        |_, v| scale(skin, 1.0 + 0.08 * (std::f64::consts::TAU * freq * v).sin()),
    );
    let concha = 0.45 + 0.3 * z[2];
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.53, 0.5, rx * concha, ry * concha), size),
        |_, _| scale(skin, 0.65),
    );
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.52, 0.035, 0.035), size),
        |_, _| [0.12, 0.08, 0.08],
    );
    cv.finish(n.brightness)
}

fn face_b(z: &[f64; LATENT_DIM], size: usize, n: &Nuisance) -> ImageTensor {
    let mut cv = Canvas::new(size, n);
    let top = [0.15 + 0.5 * z[2], 0.2 + 0.5 * z[0], 0.2 + 0.3 * z[1]];
    let bottom = [0.7 - 0.4 * z[1], 0.6 - 0.3 * z[2], 0.5 + 0.4 * z[0]];
    cv.fill(|_, v| {
        let t = v.clamp(0.0, 1.0);
        [
            top[0] + t * (bottom[0] - top[0]),
            top[1] + t * (bottom[1] - top[1]),
            top[2] + t * (bottom[2] - top[2]),
        ]
    });
    let skin = [0.45 + 0.45 * z[5], 0.35 + 0.35 * z[4], 0.25 + 0.35 * z[4]];
    let hx = 0.22 + 0.1 * z[3];
    cv.paint(
        |u, v| coverage(rounded_rect(u, v, 0.5, 0.56, hx, 0.34, 0.1), size),
        |_, _| skin,
    );
    let fringe = [0.05 + 0.3 * z[7], 0.05 + 0.5 * z[6], 0.1 + 0.3 * z[6]];
    cv.paint(
        |u, v| {
            coverage(
                rounded_rect(u, v, 0.5, 0.26, hx + 0.02, 0.05 + 0.06 * z[6], 0.04),
                size,
            )
        },
        |_, _| fringe,
    );
    let eye_dx = 0.07 + 0.07 * z[7];
    for side in [-1.0, 1.0] {
        cv.paint(
            |u, v| {
                coverage(
                    rounded_rect(
                        u,
                        v,
                        0.5 + side * eye_dx,
                        0.5,
                        0.045,
                        0.015 + 0.015 * z[0],
                        0.01,
                    ),
                    size,
                )
            },
            |_, _| [0.05, 0.05, 0.05],
        );
    }
    cv.paint(
        |u, v| {
            coverage(
                rounded_rect(u, v, 0.5, 0.75, 0.04 + 0.09 * z[1], 0.018, 0.015),
                size,
            )
        },
        |_, _| [0.35 + 0.5 * z[5], 0.1, 0.3],
    );
    cv.finish(n.brightness)
}

fn ear_b(z: &[f64; LATENT_DIM], size: usize, n: &Nuisance) -> ImageTensor {
    let mut cv = Canvas::new(size, n);
    let bg = [0.7 - 0.4 * z[6], 0.3 + 0.4 * z[7], 0.6 - 0.3 * z[5]];
    cv.fill(|_, _| bg);
    let skin = [0.45 + 0.45 * z[5], 0.35 + 0.35 * z[4], 0.25 + 0.35 * z[4]];
    let r_out = 0.28 + 0.1 * z[0];
    let r_in = r_out * (0.35 + 0.3 * z[2]);
    let spokes = (3.0 + (6.0 * z[3]).round()).max(3.0);
    cv.paint(
        |u, v| {
            coverage(
                ellipse(u, v, 0.5, 0.5, r_out, r_out * (1.0 + 0.3 * z[1])),
                size,
            )
        },
        |u, v| {
            let a = (v - 0.5).atan2(u - 0.5);
            scale(skin, 1.0 + 0.1 * (spokes * a).cos())
        },
    );
    cv.paint(
        |u, v| coverage(ellipse(u, v, 0.5, 0.5, r_in, r_in), size),
        |_, _| scale(skin, 0.5 + 0.3 * z[7]),
    );
    cv.finish(n.brightness)
}

/// Render the ear and face of one latent.
pub fn render_pair(
    family: SynthFamily,
    latent: &[f64; LATENT_DIM],
    size: usize,
    nuisance: &Nuisance,
) -> (ImageTensor, ImageTensor) {
    match family {
        SynthFamily::A => (
            ear_a(latent, size, nuisance),
            face_a(latent, size, nuisance),
        ),
        SynthFamily::B => (
            ear_b(latent, size, nuisance),
            face_b(latent, size, nuisance),
        ),
    }
}

/// Latents and nuisances exactly as [`generate_synthetic`] draws them.
pub fn draw_subjects(cfg: &SynthConfig) -> Vec<([f64; LATENT_DIM], Vec<Nuisance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_subjects)
        .map(|_| {
            let mut z = [0.0; LATENT_DIM];
            z.iter_mut().for_each(|v| *v = rng.random::<f64>());
            let nuisances = (0..cfg.pairs_per_subject)
                .map(|_| Nuisance {
                    shift_x: rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                    shift_y: rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                    brightness: rng.random_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS),
                })
                .collect();
            (z, nuisances)
        })
        .collect()
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:03}")
}

pub fn pair_id(subject: usize, pair: usize) -> String {
    format!("s{subject:03}_p{pair:02}")
}

fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Render a synthetic dataset into `out_dir` (PNG images under `ears/` and
/// `faces/`, plus `manifest.csv`) and return its manifest.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if cfg.n_subjects < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 subjects, got {}",
            cfg.n_subjects
        )));
    }
    if cfg.pairs_per_subject == 0 || cfg.image_size == 0 {
        return Err(Error::InvalidArgument(
            "pairs_per_subject and image_size must be positive".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["ears", "faces"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(cfg.n_subjects * cfg.pairs_per_subject);
    for (s, (latent, nuisances)) in draw_subjects(cfg).iter().enumerate() {
        for (p, nuisance) in nuisances.iter().enumerate() {
            let id = pair_id(s, p);
            let (ear, face) = render_pair(cfg.family, latent, cfg.image_size, nuisance);
            let ear_path = PathBuf::from("ears").join(format!("{id}.png"));
            let face_path = PathBuf::from("faces").join(format!("{id}.png"));
            write_png(&ear, &out_dir.join(&ear_path))?;
            write_png(&face, &out_dir.join(&face_path))?;
            entries.push(ManifestEntry {
                pair_id: id,
                subject_id: subject_id(s),
                ear_path,
                face_path,
            });
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l1(a: &ImageTensor, b: &ImageTensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.data().len() as f64
    }

    #[test]
    fn two_subjects_one_pair_gives_two_entries_four_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 2,
            pairs_per_subject: 1,
            image_size: 16,
            seed: 1,
            family: SynthFamily::A,
        };
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        let files = ["ears", "faces"]
            .iter()
            .map(|d| std::fs::read_dir(dir.path().join(d)).unwrap().count())
            .sum::<usize>();
        assert_eq!(files, 4);
    }

    #[test]
    fn rejects_single_subject() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_subjects: 1,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, dir.path()).is_err());
    }

    #[test]
    fn families_render_differently() {
        let subjects = draw_subjects(&SynthConfig::default());
        let (z, _) = &subjects[0];
        let (ea, fa) = render_pair(SynthFamily::A, z, 32, &Nuisance::NONE);
        let (eb, fb) = render_pair(SynthFamily::B, z, 32, &Nuisance::NONE);
        assert!(l1(&ea, &eb) > 0.02);
        assert!(l1(&fa, &fb) > 0.02);
    }

    #[test]
    fn nuisance_moves_the_image() {
        let z = [0.5; LATENT_DIM];
        let (_, a) = render_pair(SynthFamily::A, &z, 32, &Nuisance::NONE);
        let shifted = Nuisance {
            shift_x: 1.5,
            ..Nuisance::NONE
        };
        let (_, b) = render_pair(SynthFamily::A, &z, 32, &shifted);
        assert!(l1(&a, &b) > 1e-3);
    }
}
