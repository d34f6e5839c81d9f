//! Experiment configuration and the commands behind the `xmodal` CLI.
//!
//! Every command works inside one output directory, holds a lock file
//! there while running, echoes the configuration and records what it wrote
//! in `artifacts.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_splits, generate_synthetic, load_pair, load_pairs, DatasetManifest, IngestConfig,
    PairedSample, SplitAssignment, SplitName, SplitSpec, SynthConfig,
};
use crate::embedding_plugin::{load_embedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::identification::{identify, CmcReport, DEFAULT_RANKS};
use crate::image::ImageTensor;
use crate::metrics::{
    evaluate_set, pair_rng, MetricsReport, Reconstructor, ReportLabel, SsimConfig,
};
use crate::networks::{EmbeddingNetwork, Generator};
use crate::trainer::{
    latest_checkpoint, load_generator, train, ModelConfig, TrainConfig, TrainData, TrainOutcome,
};

pub const CONFIG_ECHO: &str = "config.toml";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const ARTIFACTS: &str = "artifacts.json";
pub const LOCK: &str = ".lock";
pub const SPLITS: &str = "splits.json";
pub const RUN_INFO: &str = "run.json";

/// Where the pairs come from: an existing manifest or a synthetic set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    /// Directory for the rendered synthetic set; `<out_dir>/synthetic_<family>` if unset.
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ssim: SsimConfig,
    /// Splits evaluated when none are named on the command line.
    pub splits: Vec<SplitName>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ssim: SsimConfig::default(),
            splits: vec![SplitName::SdTest1, SplitName::SdTest2, SplitName::SidTest],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSection {
    pub ks: Vec<usize>,
    /// Splits whose real faces form the gallery; the probe split if unset.
    pub gallery: Option<Vec<SplitName>>,
    /// Also write the similarity matrix as CSV.
    pub dump_similarity: bool,
}

impl Default for IdentificationSection {
    fn default() -> Self {
        Self {
            ks: DEFAULT_RANKS.to_vec(),
            gallery: None,
            dump_similarity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Copied into every seeded component (data, split, training, embedder).
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub ingest: IngestConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderSpec,
    pub metrics: MetricsSection,
    pub identification: IdentificationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection {
                synthetic: Some(SynthConfig::default()),
                ..DatasetSection::default()
            },
            ingest: IngestConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embedder: EmbedderSpec::default(),
            metrics: MetricsSection::default(),
            identification: IdentificationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn propagate_seed(&mut self) {
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.embedder.seed = self.seed;
        if let Some(s) = &mut self.dataset.synthetic {
            s.seed = self.seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.manifest, &self.dataset.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset: give either `manifest` or `synthetic`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "dataset: `manifest` or `synthetic` is required".into(),
                ))
            }
            _ => {}
        }
        self.model.generator.validate()?;
        self.train.validate()?;
        self.embedder.validate()?;
        self.metrics.ssim.validate()?;
        let div = self.model.generator.size_divisor();
        if self.ingest.target_size == 0 || !self.ingest.target_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "ingest.target_size {} must be a positive multiple of {div} for a depth-{} generator",
                self.ingest.target_size, self.model.generator.depth
            )));
        }
        if self.identification.ks.is_empty() || self.identification.ks.contains(&0) {
            return Err(Error::Config(
                "identification.ks must list ranks >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// A resolved configuration plus the text it was read from.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    raw: String,
}

impl Experiment {
    pub fn from_file(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(raw, overrides)
    }

    pub fn from_text(raw: String, overrides: &Overrides) -> Result<Self> {
        let config = ExperimentConfig::from_toml(&raw)?;
        Self::build(config, raw, overrides)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let raw = config.to_toml();
        Self::build(config, raw, &Overrides::default())
    }

    fn build(mut config: ExperimentConfig, raw: String, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            config.out_dir = out.clone();
        }
        config.propagate_seed();
        config.validate()?;
        Ok(Self { config, raw })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.dataset.manifest {
            Some(p) => p.clone(),
            None => self.data_root().join("manifest.csv"),
        }
    }

    fn data_root(&self) -> PathBuf {
        self.config.dataset.root.clone().unwrap_or_else(|| {
            let family = self
                .config
                .dataset
                .synthetic
                .as_ref()
                .map(|s| s.family)
                .unwrap_or_default();
            self.out_dir()
                .join(format!("synthetic_{}", family.as_str()))
        })
    }

    pub fn splits_path(&self) -> PathBuf {
        self.out_dir().join(SPLITS)
    }

    pub fn embedder(&self) -> Result<EmbeddingNetwork> {
        load_embedder(&self.config.embedder)
    }

    /// Manifest and splits written by `prepare`.
    pub fn load_prepared(&self) -> Result<(DatasetManifest, SplitAssignment)> {
        let mp = self.manifest_path();
        let sp = self.splits_path();
        if !mp.exists() || !sp.exists() {
            return Err(Error::Config(format!(
                "{} or {} is missing; run `prepare` first",
                mp.display(),
                sp.display()
            )));
        }
        Ok((DatasetManifest::load(&mp)?, SplitAssignment::load(&sp)?))
    }

    /// Pairs of `split` in manifest order.
    pub fn split_pairs(
        &self,
        manifest: &DatasetManifest,
        splits: &SplitAssignment,
        split: SplitName,
    ) -> Result<Vec<PairedSample>> {
        let ids = splits.get(split);
        let ordered: Vec<&String> = manifest
            .entries
            .iter()
            .map(|e| &e.pair_id)
            .filter(|id| ids.contains(*id))
            .collect();
        load_pairs(manifest, ordered, &self.config.ingest)
    }

    /// Explicit checkpoint, or the newest one under the output directory.
    pub fn resolve_checkpoint(&self, checkpoint: Option<&Path>) -> Result<PathBuf> {
        match checkpoint {
            Some(p) => Ok(p.to_path_buf()),
            None => latest_checkpoint(self.out_dir()).ok_or_else(|| {
                Error::Config(format!(
                    "no checkpoint under {}; train first or pass --checkpoint",
                    self.out_dir().display()
                ))
            }),
        }
    }
}

/// Holds the output-directory lock and collects written files.
pub struct Run {
    out_dir: PathBuf,
    lock: PathBuf,
    produced: Vec<PathBuf>,
}

impl Run {
    pub fn begin(exp: &Experiment) -> Result<Self> {
        let out_dir = exp.out_dir().to_path_buf();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let lock = out_dir.join(LOCK);
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Config(format!(
                    "{} is in use by another command (remove {} if it is stale)",
                    out_dir.display(),
                    lock.display()
                )),
                _ => Error::io(&lock, e),
            })?;
        let mut run = Self {
            out_dir,
            lock,
            produced: Vec::new(),
        };
        let echo = run.out_dir.join(CONFIG_ECHO);
        std::fs::write(&echo, &exp.raw).map_err(|e| Error::io(&echo, e))?;
        let resolved = run.out_dir.join(RESOLVED_CONFIG);
        std::fs::write(&resolved, exp.config.to_toml()).map_err(|e| Error::io(&resolved, e))?;
        run.record(echo);
        run.record(resolved);
        Ok(run)
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.produced.push(path.into());
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Merge the recorded files into `artifacts.json` and release the lock.
    pub fn finish(self) -> Result<()> {
        let path = self.out_dir.join(ARTIFACTS);
        let mut all: BTreeSet<String> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        all.extend(self.produced.iter().map(|p| self.display_path(p)));
        let text = serde_json::to_string_pretty(&all).expect("artifact list serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub manifest_path: PathBuf,
    pub splits_path: PathBuf,
    pub manifest: DatasetManifest,
    pub splits: SplitAssignment,
}

/// Render (or validate) the dataset and write the split assignment.
pub fn cmd_prepare(exp: &Experiment) -> Result<Prepared> {
    let mut run = Run::begin(exp)?;
    let manifest_path = exp.manifest_path();
    let manifest = match &exp.config.dataset.synthetic {
        Some(synth) => {
            let root = exp.data_root();
            let m = generate_synthetic(synth, &root)?;
            run.record(&manifest_path);
            run.record(root.join("ears"));
            run.record(root.join("faces"));
            m
        }
        None => DatasetManifest::load(&manifest_path)?,
    };
    let splits = build_splits(&manifest, &exp.config.split)?;
    let splits_path = exp.splits_path();
    splits.save(&splits_path)?;
    run.record(&splits_path);
    run.finish()?;
    Ok(Prepared {
        manifest_path,
        splits_path,
        manifest,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    dataset_name: String,
    seed: u64,
}

pub fn cmd_train(exp: &Experiment, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut run = Run::begin(exp)?;
    let (manifest, splits) = exp.load_prepared()?;
    let psi = exp.embedder()?;
    let data = TrainData {
        manifest: &manifest,
        splits: &splits,
        ingest: exp.config.ingest,
        psi: &psi,
    };
    let info_path = exp.out_dir().join(RUN_INFO);
    let info = RunInfo {
        dataset_name: manifest.dataset_name.clone(),
        seed: exp.config.seed,
    };
    std::fs::write(
        &info_path,
        serde_json::to_string_pretty(&info).expect("serializes"),
    )
    .map_err(|e| Error::io(&info_path, e))?;
    run.record(&info_path);
    let outcome = train(
        &exp.config.model,
        &exp.config.train,
        &data,
        exp.out_dir(),
        resume,
    )?;
    run.record(&outcome.log_path);
    for c in &outcome.checkpoints {
        run.record(c);
    }
    run.finish()?;
    Ok(outcome)
}

/// Dataset name recorded next to a checkpoint by `train`, or the
/// checkpoint path when there is none.
pub fn model_label(checkpoint: &Path) -> String {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|run_dir| run_dir.join(RUN_INFO))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<RunInfo>(&t).ok())
        .map(|i| i.dataset_name)
        .unwrap_or_else(|| checkpoint.display().to_string())
}

fn evaluate_splits(
    exp: &Experiment,
    model: &dyn Reconstructor,
    model_name: &str,
    requested: &[SplitName],
    report_dir: &Path,
    run: &mut Run,
) -> Result<Vec<MetricsReport>> {
    let (manifest, splits) = exp.load_prepared()?;
    let psi = exp.embedder()?;
    let requested = if requested.is_empty() {
        exp.config.metrics.splits.clone()
    } else {
        requested.to_vec()
    };
    std::fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let label = |split: SplitName| ReportLabel {
        model: model_name.to_string(),
        data: manifest.dataset_name.clone(),
        split: split.to_string(),
    };
    let mut computed: BTreeMap<String, MetricsReport> = BTreeMap::new();
    let mut compute = |split: SplitName| -> Result<MetricsReport> {
        if let Some(r) = computed.get(split.as_str()) {
            return Ok(r.clone());
        }
        let pairs = exp.split_pairs(&manifest, &splits, split)?;
        let r = evaluate_set(
            model,
            &psi,
            &pairs,
            &exp.config.metrics.ssim,
            exp.config.seed,
            label(split),
        )?;
        computed.insert(split.as_str().to_string(), r.clone());
        Ok(r)
    };
    let mut reports = Vec::with_capacity(requested.len());
    for split in requested {
        let report = match split {
            // a subset of sd_test_1's pairs; reported as a filtered view
            SplitName::SdTest2 => compute(SplitName::SdTest1)?
                .filtered(label(SplitName::SdTest2), splits.get(SplitName::SdTest2))?,
            other => compute(other)?,
        };
        let json = report_dir.join(format!("{split}.json"));
        let csv = report_dir.join(format!("{split}.csv"));
        report.write_json(&json)?;
        report.write_csv(&csv)?;
        run.record(json);
        run.record(csv);
        reports.push(report);
    }
    Ok(reports)
}

/// Same-dataset evaluation; reports go to `<out_dir>/eval/<split>.{json,csv}`.
pub fn cmd_evaluate(
    exp: &Experiment,
    checkpoint: Option<&Path>,
    splits: &[SplitName],
) -> Result<Vec<MetricsReport>> {
    let mut run = Run::begin(exp)?;
    let ckpt = exp.resolve_checkpoint(checkpoint)?;
    let generator = load_generator(&ckpt)?;
    let dir = exp.out_dir().join("eval");
    let reports = evaluate_splits(exp, &generator, &model_label(&ckpt), splits, &dir, &mut run)?;
    run.finish()?;
    Ok(reports)
}

/// Evaluate a checkpoint trained elsewhere on this experiment's dataset;
/// reports go to `<out_dir>/cross_eval/<model>__<data>/`.
pub fn cmd_cross_eval(
    exp: &Experiment,
    checkpoint: &Path,
    model_name: Option<&str>,
    splits: &[SplitName],
) -> Result<Vec<MetricsReport>> {
    let mut run = Run::begin(exp)?;
    let generator = load_generator(checkpoint)?;
    let (manifest, _) = exp.load_prepared()?;
    let model_name = model_name
        .map(str::to_string)
        .unwrap_or_else(|| model_label(checkpoint));
    let safe = |s: &str| s.replace(['/', '\\', ' '], "_");
    let dir = exp.out_dir().join("cross_eval").join(format!(
        "{}__{}",
        safe(&model_name),
        safe(&manifest.dataset_name)
    ));
    let reports = evaluate_splits(exp, &generator, &model_name, splits, &dir, &mut run)?;
    run.finish()?;
    Ok(reports)
}

/// Rank-k identification of reconstructed `split` probes against the
/// configured gallery; report at `<out_dir>/identify/<split>.json`.
pub fn cmd_identify(
    exp: &Experiment,
    checkpoint: Option<&Path>,
    split: SplitName,
) -> Result<CmcReport> {
    let mut run = Run::begin(exp)?;
    let ckpt = exp.resolve_checkpoint(checkpoint)?;
    let generator = load_generator(&ckpt)?;
    let (manifest, splits) = exp.load_prepared()?;
    let psi = exp.embedder()?;
    let probes = exp.split_pairs(&manifest, &splits, split)?;
    let gallery_splits = exp
        .config
        .identification
        .gallery
        .clone()
        .unwrap_or_else(|| vec![split]);
    let mut gallery_ids = BTreeSet::new();
    for s in &gallery_splits {
        gallery_ids.extend(splits.get(*s).iter().cloned());
    }
    let ordered: Vec<&String> = manifest
        .entries
        .iter()
        .map(|e| &e.pair_id)
        .filter(|id| gallery_ids.contains(*id))
        .collect();
    let gallery: Vec<(ImageTensor, String)> = load_pairs(&manifest, ordered, &exp.config.ingest)?
        .into_iter()
        .map(|p| (p.face, p.subject_id))
        .collect();
    let result = identify(
        &generator,
        &psi,
        &probes,
        &gallery,
        &exp.config.identification.ks,
        exp.config.seed,
    )?;
    let dir = exp.out_dir().join("identify");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let report = CmcReport::new(&result.curve, &result.similarity);
    let json = dir.join(format!("{split}.json"));
    report.write_json(&json)?;
    run.record(json);
    if exp.config.identification.dump_similarity {
        let csv = dir.join(format!("{split}_similarity.csv"));
        result.similarity.write_csv(&csv)?;
        run.record(csv);
    }
    run.finish()?;
    Ok(report)
}

/// Reconstruction of one pair exactly as the evaluation commands produce it.
pub fn reconstruct_pair(
    generator: &Generator,
    pair: &PairedSample,
    seed: u64,
) -> Result<ImageTensor> {
    generator.reconstruct(pair, &mut pair_rng(&pair.pair_id, seed))
}

/// One column per pair with the ear, the reconstruction and the real face
/// stacked top to bottom.
pub fn render_grid(
    generator: &Generator,
    pairs: &[PairedSample],
    seed: u64,
) -> Result<image::RgbImage> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Empty("grid pair list".into()))?;
    let (_, h, w) = first.face.dims();
    let mut grid = image::RgbImage::new((w * pairs.len()) as u32, (3 * h) as u32);
    for (col, pair) in pairs.iter().enumerate() {
        let fake = reconstruct_pair(generator, pair, seed)?;
        for (row, img) in [&pair.ear, &fake, &pair.face].into_iter().enumerate() {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Shape("grid images must share one size".into()));
            }
            image::imageops::replace(
                &mut grid,
                &img.to_rgb8(),
                (col * w) as i64,
                (row * h) as i64,
            );
        }
    }
    Ok(grid)
}

/// Write a grid for `pair_ids` (default: the first three `sd_test_1` pairs)
/// to `output` (default `<out_dir>/grid.png`).
pub fn cmd_grid(
    exp: &Experiment,
    checkpoint: Option<&Path>,
    pair_ids: &[String],
    output: Option<&Path>,
) -> Result<PathBuf> {
    let mut run = Run::begin(exp)?;
    let ckpt = exp.resolve_checkpoint(checkpoint)?;
    let generator = load_generator(&ckpt)?;
    let (manifest, splits) = exp.load_prepared()?;
    let ids: Vec<String> = if pair_ids.is_empty() {
        manifest
            .entries
            .iter()
            .filter(|e| splits.sd_test_1.contains(&e.pair_id))
            .take(3)
            .map(|e| e.pair_id.clone())
            .collect()
    } else {
        pair_ids.to_vec()
    };
    let pairs = ids
        .iter()
        .map(|id| {
            let entry = manifest
                .entry(id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown pair_id `{id}`")))?;
            load_pair(&manifest, entry, &exp.config.ingest)
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = render_grid(&generator, &pairs, exp.config.seed)?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| exp.out_dir().join("grid.png"));
    grid.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    run.record(&path);
    run.finish()?;
    Ok(path)
}
