//! Alternating discriminator / generator optimization, checkpoints and the
//! JSON-lines training log.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xmodal_nn::{Adam, AdamConfig, ConvParams, Tensor};

use crate::checkpoint::Archive;
use crate::dataset::{load_pair, DatasetManifest, IngestConfig, PairedSample, SplitAssignment};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::losses::{
    adversarial_loss_d_grad, adversarial_loss_g_grad, composite_generator_loss, feature_loss,
    feature_loss_grad, pixel_loss, pixel_loss_grad, style_loss, style_loss_grad, GeneratorTerms,
    LossBreakdown, LossWeights,
};
use crate::networks::{
    Discriminator, DiscriminatorConfig, EmbeddingNetwork, Generator, GeneratorConfig,
    GeneratorTape, Mode,
};

pub const TRAIN_STATE_KIND: &str = "train_state";
pub const GENERATOR_KIND: &str = "generator";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            max_steps: Some(2000),
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument(
                "checkpoint_every must be >= 1".into(),
            ));
        }
        self.weights.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Generator and discriminator architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        Self {
            generator: GeneratorConfig::desk_scale(),
            discriminator: DiscriminatorConfig::desk_scale(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Option<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    train: TrainConfig,
    model: ModelConfig,
    rng: RngState,
    g_opt_steps: u64,
    d_opt_steps: u64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
    rng: ChaCha8Rng,
    config: TrainConfig,
    model: ModelConfig,
}

fn check_finite(value: f64, component: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

fn ensure_finite_tensor(t: &Tensor, component: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

impl TrainState {
    /// Fresh networks; generator then discriminator weights are drawn from
    /// a ChaCha8 stream seeded with `config.seed`, which afterwards drives
    /// dropout.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(model.generator.clone(), &mut rng)?;
        let discriminator = Discriminator::new(model.discriminator.clone(), &mut rng)?;
        let g_opt = Adam::new(config.adam(), generator.params());
        let d_opt = Adam::new(config.adam(), discriminator.params());
        Ok(Self {
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
            rng,
            config,
            model,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// One discriminator update on `(ear, face)` vs `(ear, fake)`. The fake
    /// batch is a plain tensor, so nothing reaches the generator.
    pub fn discriminator_step(
        &mut self,
        ears: &Tensor,
        faces: &Tensor,
        fake: &Tensor,
    ) -> Result<f64> {
        let (real_logits, real_tape) = self.discriminator.forward_tape(ears, faces)?;
        let (fake_logits, fake_tape) = self.discriminator.forward_tape(ears, fake)?;
        let (loss, g_real, g_fake) = adversarial_loss_d_grad(&real_logits, &fake_logits)?;
        check_finite(loss, "adversarial_d")?;
        let mut grads = self.discriminator.zero_grads();
        self.discriminator
            .backward(&real_tape, &g_real, Some(&mut grads), false)?;
        self.discriminator
            .backward(&fake_tape, &g_fake, Some(&mut grads), false)?;
        self.d_opt.step(self.discriminator.params_mut(), &grads);
        Ok(loss)
    }

    /// One generator update on the weighted objective. The discriminator
    /// and the embedding network are only back-propagated through.
    pub fn generator_step(
        &mut self,
        ears: &Tensor,
        faces: &Tensor,
        tape: &GeneratorTape,
        psi: &EmbeddingNetwork,
    ) -> Result<LossBreakdown> {
        let w = self.config.weights;
        let fake = tape.output();
        let n = fake.shape().n as f64;

        let (logits, d_tape) = self.discriminator.forward_tape(ears, fake)?;
        let (adversarial_g, g_logits) = adversarial_loss_g_grad(&logits)?;
        check_finite(adversarial_g, "adversarial_g")?;
        let mut grad = self
            .discriminator
            .backward(&d_tape, &g_logits, None, true)?
            .expect("face gradient requested");

        let pixel = check_finite(pixel_loss(fake, faces)?, "pixel")?;
        grad.add_scaled(&pixel_loss_grad(fake, faces)?, w.lambda)?;

        let (psi_fake, psi_scale) = psi.prepare_network_batch(fake)?;
        let (fake_feats, psi_tape) = psi.embed_tape(&psi_fake)?;
        let real_feats = psi.embed(&psi.prepare_network_batch(faces)?.0)?;
        let mut feature = 0.0;
        let mut style = 0.0;
        let mut feat_grads = Vec::with_capacity(fake_feats.len());
        for (f, r) in fake_feats.iter().zip(&real_feats) {
            feature += feature_loss(f, r)?;
            style += style_loss(f, r)?;
            let gf = feature_loss_grad(f, r)?;
            let gs = style_loss_grad(f, r)?;
            feat_grads.push(
                gf.iter()
                    .zip(&gs)
                    .map(|(a, b)| (w.beta * a + w.gamma * b) / n)
                    .collect(),
            );
        }
        let feature = check_finite(feature / n, "feature")?;
        let style = check_finite(style / n, "style")?;
        grad.add_scaled(&psi.backward_input(&psi_tape, &feat_grads)?, psi_scale)?;
        ensure_finite_tensor(&grad, "generator gradient")?;

        let breakdown = composite_generator_loss(
            &GeneratorTerms {
                adversarial_g,
                pixel,
                feature,
                style,
            },
            &w,
        )?;
        let mut grads = self.generator.zero_grads();
        self.generator.backward(tape, &grad, &mut grads)?;
        self.g_opt.step(self.generator.params_mut(), &grads);
        Ok(breakdown)
    }

    /// One discriminator update (on a fresh fake batch) followed by one
    /// generator update.
    pub fn train_step(
        &mut self,
        batch: &[PairedSample],
        psi: &EmbeddingNetwork,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let ears: Vec<&ImageTensor> = batch.iter().map(|p| &p.ear).collect();
        let faces: Vec<&ImageTensor> = batch.iter().map(|p| &p.face).collect();
        let ears = ImageTensor::batch(&ears, ValueRange::Symmetric)?;
        let faces = ImageTensor::batch(&faces, ValueRange::Symmetric)?;
        let tape = self
            .generator
            .forward_tape(&ears, Mode::Train, &mut self.rng, None)?;
        ensure_finite_tensor(tape.output(), "generator output")?;
        let adversarial_d = self.discriminator_step(&ears, &faces, tape.output())?;
        let mut breakdown = self.generator_step(&ears, &faces, &tape, psi)?;
        breakdown.adversarial_d = adversarial_d;
        self.step += 1;
        Ok(breakdown)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = StateMeta {
            step: self.step,
            train: self.config.clone(),
            model: self.model.clone(),
            rng: RngState::capture(&self.rng),
            g_opt_steps: self.g_opt.steps,
            d_opt_steps: self.d_opt.steps,
        };
        let mut a = Archive::new(
            TRAIN_STATE_KIND,
            serde_json::to_value(meta).expect("meta serializes"),
        );
        let gn = self.generator.param_names();
        let dn = self.discriminator.param_names();
        a.push_params("g", &gn, self.generator.params());
        a.push_params("d", &dn, self.discriminator.params());
        a.push_params("g_opt.m", &gn, &self.g_opt.first);
        a.push_params("g_opt.v", &gn, &self.g_opt.second);
        a.push_params("d_opt.m", &dn, &self.d_opt.first);
        a.push_params("d_opt.v", &dn, &self.d_opt.second);
        a.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::load(path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if a.kind != TRAIN_STATE_KIND {
            return Err(bad(format!(
                "expected a {TRAIN_STATE_KIND} archive, found `{}`",
                a.kind
            )));
        }
        let meta: StateMeta =
            serde_json::from_value(a.meta.clone()).map_err(|e| bad(format!("bad meta: {e}")))?;
        let mut state = TrainState::new(meta.model.clone(), meta.train.clone())?;
        let gn = state.generator.param_names();
        let dn = state.discriminator.param_names();
        let wrap = |e: Error| bad(e.to_string());
        state
            .generator
            .set_params(a.take_params("g", &gn).map_err(wrap)?)
            .map_err(wrap)?;
        state
            .discriminator
            .set_params(a.take_params("d", &dn).map_err(wrap)?)
            .map_err(wrap)?;
        let moments =
            |prefix: &str, names: &[String], like: &[ConvParams]| -> Result<Vec<ConvParams>> {
                let m = a.take_params(prefix, names).map_err(wrap)?;
                for (x, y) in m.iter().zip(like) {
                    if x.weight.len() != y.weight.len() || x.bias.len() != y.bias.len() {
                        return Err(bad(format!(
                            "`{prefix}` moment shapes do not match the model"
                        )));
                    }
                }
                Ok(m)
            };
        let g_like = state.g_opt.first.clone();
        let d_like = state.d_opt.first.clone();
        state.g_opt.first = moments("g_opt.m", &gn, &g_like)?;
        state.g_opt.second = moments("g_opt.v", &gn, &g_like)?;
        state.d_opt.first = moments("d_opt.m", &dn, &d_like)?;
        state.d_opt.second = moments("d_opt.v", &dn, &d_like)?;
        state.g_opt.steps = meta.g_opt_steps;
        state.d_opt.steps = meta.d_opt_steps;
        state.step = meta.step;
        state.rng = meta
            .rng
            .restore()
            .ok_or_else(|| bad("bad rng state".into()))?;
        Ok(state)
    }
}

/// Save only the generator (config + weights).
pub fn save_generator(generator: &Generator, path: impl AsRef<Path>) -> Result<()> {
    let mut a = Archive::new(
        GENERATOR_KIND,
        serde_json::json!({ "generator": generator.config() }),
    );
    a.push_params("g", &generator.param_names(), generator.params());
    a.save(path)
}

/// Load a generator from either a generator archive or a training-state
/// checkpoint, validating tensor shapes against the stored config.
pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    let path = path.as_ref();
    let a = Archive::load(path)?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let cfg_value = match a.kind.as_str() {
        GENERATOR_KIND => a.meta.get("generator").cloned(),
        TRAIN_STATE_KIND => a
            .meta
            .get("model")
            .and_then(|m| m.get("generator"))
            .cloned(),
        other => return Err(bad(format!("archive kind `{other}` holds no generator"))),
    }
    .ok_or_else(|| bad("missing generator config".into()))?;
    let cfg: GeneratorConfig =
        serde_json::from_value(cfg_value).map_err(|e| bad(format!("bad generator config: {e}")))?;
    // weights are overwritten below; the init stream is irrelevant
    let mut g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = g.param_names();
    let params = a.take_params("g", &names).map_err(|e| bad(e.to_string()))?;
    g.set_params(params).map_err(|e| bad(e.to_string()))?;
    Ok(g)
}

/// Seed of the shuffle for `epoch`, independent of how many steps ran
/// before, so that a resumed run sees the same batches.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch + 1)
}

/// Batches of pair ids for `epoch`: the training pairs in manifest order,
/// shuffled, chunked into `batch_size` (the last batch may be short).
pub fn epoch_batches(
    train_ids: &[String],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<String>> {
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    ids.chunks(batch_size).map(<[String]>::to_vec).collect()
}

#[derive(Clone, Debug, Serialize)]
struct LogLine<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
}

#[derive(Clone, Debug, Deserialize)]
struct LogLineOwned {
    #[allow(dead_code)]
    step: u64,
    #[serde(flatten)]
    losses: LossBreakdown,
}

/// Read the loss history of a training log.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LossBreakdown>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<LogLineOwned>(&line)
                .map(|l| l.losses)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir
        .join(CHECKPOINT_DIR)
        .join(format!("step_{step:08}.ckpt"))
}

/// Most recent `step_*.ckpt` under `out_dir/checkpoints`.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let step = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Loss history of the whole run, including any steps before a resume.
    pub history: Vec<LossBreakdown>,
}

/// Everything [`train`] reads besides the configs.
pub struct TrainData<'a> {
    pub manifest: &'a DatasetManifest,
    pub splits: &'a SplitAssignment,
    pub ingest: IngestConfig,
    pub psi: &'a EmbeddingNetwork,
}

/// Run (or resume) training, writing `train_log.jsonl` and
/// `checkpoints/step_XXXXXXXX.ckpt` under `out_dir`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_ids: Vec<String> = data
        .manifest
        .entries
        .iter()
        .filter(|e| data.splits.train.contains(&e.pair_id))
        .map(|e| e.pair_id.clone())
        .collect();
    if train_ids.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);

    let (mut state, mut history) = match resume_from {
        Some(ckpt) => {
            let mut state = TrainState::load(ckpt)?;
            if state.model() != model
                || state.config().seed != cfg.seed
                || state.config().batch_size != cfg.batch_size
            {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced with a different model, seed or batch size",
                    ckpt.display()
                )));
            }
            let mut history = read_log(&log_path)?;
            let done = state.step() as usize;
            if history.len() < done {
                return Err(Error::Config(format!(
                    "training log has {} lines but the checkpoint is at step {done}",
                    history.len()
                )));
            }
            history.truncate(done);
            // continue with the (possibly extended) schedule of `cfg`
            state.config = TrainConfig {
                epochs: cfg.epochs,
                max_steps: cfg.max_steps,
                checkpoint_every: cfg.checkpoint_every,
                ..state.config.clone()
            };
            (state, history)
        }
        None => (TrainState::new(model.clone(), cfg.clone())?, Vec::new()),
    };

    let mut log =
        BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    for (i, b) in history.iter().enumerate() {
        write_log_line(&mut log, &log_path, i as u64 + 1, b)?;
    }

    let per_epoch = train_ids.len().div_ceil(cfg.batch_size) as u64;
    let scheduled = per_epoch * cfg.epochs as u64;
    let total = cfg.max_steps.map_or(scheduled, |m| m.min(scheduled));
    let mut checkpoints = Vec::new();
    let mut current_epoch = None;
    let mut batches = Vec::new();
    while state.step() < total {
        let epoch = state.step() / per_epoch;
        if current_epoch != Some(epoch) {
            batches = epoch_batches(&train_ids, cfg.batch_size, cfg.seed, epoch);
            current_epoch = Some(epoch);
        }
        let ids = &batches[(state.step() % per_epoch) as usize];
        let batch = ids
            .iter()
            .map(|id| {
                let entry = data.manifest.entry(id).expect("train id from manifest");
                load_pair(data.manifest, entry, &data.ingest)
            })
            .collect::<Result<Vec<_>>>()?;
        let breakdown = state.train_step(&batch, data.psi)?;
        write_log_line(&mut log, &log_path, state.step(), &breakdown)?;
        history.push(breakdown);
        if state.step() % cfg.checkpoint_every == 0 || state.step() == total {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let p = checkpoint_path(out_dir, state.step());
            state.save(&p)?;
            log::info!("step {} checkpoint {}", state.step(), p.display());
            checkpoints.push(p);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = checkpoint_path(out_dir, state.step());
    if !final_checkpoint.exists() {
        state.save(&final_checkpoint)?;
        checkpoints.push(final_checkpoint.clone());
    }
    Ok(TrainOutcome {
        steps: state.step(),
        checkpoints,
        log_path,
        final_checkpoint,
        history,
    })
}

fn write_log_line(
    w: &mut impl Write,
    path: &Path,
    step: u64,
    losses: &LossBreakdown,
) -> Result<()> {
    let line = serde_json::to_string(&LogLine { step, losses }).expect("log line serializes");
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}
