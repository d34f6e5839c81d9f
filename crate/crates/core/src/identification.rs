//! Closed-set identification of reconstructed faces against a gallery of
//! real faces: cosine similarity matrix and CMC rank-k accuracy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::FeatureVector;
use crate::metrics::{pair_rng, Reconstructor};
use crate::networks::EmbeddingNetwork;

pub const DEFAULT_RANKS: [usize; 5] = [1, 2, 5, 10, 20];

/// Images embedded per network call.
const EMBED_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn new(values: Vec<f64>, probe_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if values.len() != probe_ids.len() * gallery_ids.len() {
            return Err(Error::Shape(format!(
                "{} similarities for {} probes x {} gallery items",
                values.len(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "similarity {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            values,
            probe_ids,
            gallery_ids,
        })
    }

    pub fn n_probe(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let g = self.n_gallery();
        &self.values[i * g..(i + 1) * g]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_gallery() + j]
    }

    /// Apply `f` to every entry; `f` must keep values in `[-1, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.values.iter().map(|&v| f(v)).collect(),
            self.probe_ids.clone(),
            self.gallery_ids.clone(),
        )
    }

    /// Matrix as CSV: header `probe` + gallery ids, one row per probe.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["probe".to_string()];
        header.extend(self.gallery_ids.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, id) in self.probe_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(i).iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of every probe against every gallery item.
pub fn similarity_matrix(
    probe_feats: &[FeatureVector],
    gallery_feats: &[FeatureVector],
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
) -> Result<SimilarityMatrix> {
    if probe_feats.len() != probe_ids.len() || gallery_feats.len() != gallery_ids.len() {
        return Err(Error::Shape(
            "one identity label is needed per feature vector".into(),
        ));
    }
    let norms = |feats: &[FeatureVector], ids: &[String], role: &str| {
        feats
            .iter()
            .zip(ids)
            .enumerate()
            .map(|(i, (f, id))| {
                let n = norm(f.values());
                if n == 0.0 {
                    Err(Error::ZeroNorm(format!("{role} {i} (identity `{id}`)")))
                } else {
                    Ok(n)
                }
            })
            .collect::<Result<Vec<_>>>()
    };
    let pn = norms(probe_feats, &probe_ids, "probe")?;
    let gn = norms(gallery_feats, &gallery_ids, "gallery item")?;
    let mut values = Vec::with_capacity(pn.len() * gn.len());
    for (p, np) in probe_feats.iter().zip(&pn) {
        for (g, ng) in gallery_feats.iter().zip(&gn) {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "probe dimension {} differs from gallery dimension {}",
                    p.len(),
                    g.len()
                )));
            }
            let dot: f64 = p.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
            values.push((dot / (np * ng)).clamp(-1.0, 1.0));
        }
    }
    SimilarityMatrix::new(values, probe_ids, gallery_ids)
}

/// 1-based rank of the first gallery item sharing `identity` in `row`
/// sorted by descending similarity, ties kept in gallery order. `None`
/// when the identity is absent from the gallery.
pub fn probe_rank(row: &[f64], gallery_ids: &[String], identity: &str) -> Option<usize> {
    // best same-identity entry: highest similarity, lowest index on ties
    let (best_j, best) = gallery_ids
        .iter()
        .enumerate()
        .filter(|(_, g)| *g == identity)
        .map(|(j, _)| (j, row[j]))
        .fold(None, |acc: Option<(usize, f64)>, (j, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((j, s)),
        })?;
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > best || (s == best && j < best_j))
        .count();
    Some(ahead + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub ranks: Vec<usize>,
    pub accuracies: Vec<f64>,
    /// Probes whose identity does not occur in the gallery.
    pub excluded_probes: usize,
}

impl CmcCurve {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ranks
            .iter()
            .position(|&r| r == k)
            .map(|i| self.accuracies[i])
    }
}

/// Rank-k accuracy for each `k` in `ks` (sorted, deduplicated).
pub fn cmc(sim: &SimilarityMatrix, ks: &[usize]) -> Result<CmcCurve> {
    if sim.n_probe() == 0 || sim.n_gallery() == 0 {
        return Err(Error::Empty("similarity matrix".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument(
            "ranks must be a nonempty list of k >= 1".into(),
        ));
    }
    let mut ranks = ks.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    let probe_ranks: Vec<Option<usize>> = (0..sim.n_probe())
        .map(|i| probe_rank(sim.row(i), sim.gallery_ids(), &sim.probe_ids()[i]))
        .collect();
    let valid: Vec<usize> = probe_ranks.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Empty(
            "no probe identity occurs in the gallery".into(),
        ));
    }
    let accuracies = ranks
        .iter()
        .map(|&k| valid.iter().filter(|&&r| r <= k).count() as f64 / valid.len() as f64)
        .collect();
    Ok(CmcCurve {
        ranks,
        accuracies,
        excluded_probes: probe_ranks.len() - valid.len(),
    })
}

/// CMC report as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcReport {
    pub ranks: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub n_probe: usize,
    pub n_gallery: usize,
    pub excluded_probes: usize,
}

impl CmcReport {
    pub fn new(curve: &CmcCurve, sim: &SimilarityMatrix) -> Self {
        Self {
            ranks: curve.ranks.clone(),
            accuracies: curve.accuracies.clone(),
            n_probe: sim.n_probe(),
            n_gallery: sim.n_gallery(),
            excluded_probes: curve.excluded_probes,
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn embed_all(psi: &EmbeddingNetwork, images: &[&ImageTensor]) -> Result<Vec<FeatureVector>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        out.extend(psi.embed_images(chunk)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Identification {
    pub curve: CmcCurve,
    pub similarity: SimilarityMatrix,
}

/// Reconstruct each probe's face from its ear, embed probes and gallery
/// faces with `psi`, and rank the gallery for every probe.
pub fn identify(
    model: &dyn Reconstructor,
    psi: &EmbeddingNetwork,
    probes: &[PairedSample],
    gallery: &[(ImageTensor, String)],
    ks: &[usize],
    seed: u64,
) -> Result<Identification> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Empty("gallery".into()));
    }
    let fakes = probes
        .iter()
        .map(|p| model.reconstruct(p, &mut pair_rng(&p.pair_id, seed)))
        .collect::<Result<Vec<_>>>()?;
    let probe_feats = embed_all(psi, &fakes.iter().collect::<Vec<_>>())?;
    let gallery_feats = embed_all(psi, &gallery.iter().map(|(img, _)| img).collect::<Vec<_>>())?;
    let similarity = similarity_matrix(
        &probe_feats,
        &gallery_feats,
        probes.iter().map(|p| p.subject_id.clone()).collect(),
        gallery.iter().map(|(_, id)| id.clone()).collect(),
    )?;
    let curve = cmc(&similarity, ks)?;
    Ok(Identification { curve, similarity })
}
