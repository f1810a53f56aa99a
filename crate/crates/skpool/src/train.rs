//! Deterministic training loop, evaluation, and robustness sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{
    build_cloud, inject_false_negatives, inject_false_positives, load_clips, shuffle_tracking,
    ClipRecord, KeypointCloud,
};
use crate::error::{Error, Result};
use crate::localize::{
    mixed_label, mixed_training_logit, pooled_video_logit, sample_mix_masks, video_soft_label,
    MaskMode,
};
use crate::model::{forward_features, forward_recognition, ForwardMode, ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamHyperparams, AdamState};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Recognition,
    Localization,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Recognition => write!(f, "recognition"),
            Mode::Localization => write!(f, "localization"),
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_mixing_probability() -> f64 {
    0.5
}

/// Full description of a training run. The on-disk config file mirrors this
/// struct field for field as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Enable batch-mixing augmentation (localization mode only).
    #[serde(default)]
    pub mixing: bool,
    #[serde(default = "default_mixing_probability")]
    pub mixing_probability: f64,
    pub seed: u64,
    pub train_path: PathBuf,
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    pub checkpoint_path: PathBuf,
}

impl TrainConfig {
    /// A config with library defaults for everything but the mode and paths.
    pub fn with_defaults(
        mode: Mode,
        train_path: impl Into<PathBuf>,
        checkpoint_path: impl Into<PathBuf>,
    ) -> Self {
        let adam = AdamHyperparams::default();
        TrainConfig {
            mode,
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 8,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            mixing: mode == Mode::Localization,
            mixing_probability: default_mixing_probability(),
            seed: 0,
            train_path: train_path.into(),
            eval_path: None,
            checkpoint_path: checkpoint_path.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.mixing {
            if self.mode != Mode::Localization {
                return Err(Error::Config(
                    "mixing augmentation requires localization mode".into(),
                ));
            }
            if self.batch_size < 2 {
                return Err(Error::Config(
                    "mixing augmentation needs batch_size >= 2".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.mixing_probability) {
            return Err(Error::Config(format!(
                "mixing_probability must be in [0, 1], got {}",
                self.mixing_probability
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyperparams {
        AdamHyperparams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy per loss term.
    pub loss: f64,
    /// Running training accuracy over unmixed forward passes.
    pub accuracy: f64,
}

/// Summary of one training run. Everything except `wall_clock_secs` is a pure
/// function of `(config, seed, dataset)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub final_test_accuracy: Option<f64>,
    pub wall_clock_secs: f64,
}

/// Train from scratch per the config, checkpointing every epoch.
pub fn train(cfg: &TrainConfig) -> Result<(Checkpoint, RunReport)> {
    train_resumable(cfg, None, &mut |_| {})
}

/// Train with an optional resume checkpoint and a per-epoch observer.
///
/// Resuming requires the checkpoint to embed exactly this config; training
/// continues from the recorded epoch, reproducing the uninterrupted run
/// bit for bit (per-epoch randomness is derived statelessly from the seed).
pub fn train_resumable(
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    let started = Instant::now();

    let clips = load_clips(&cfg.train_path)?;
    if clips.is_empty() {
        return Err(Error::Config(format!(
            "empty dataset: {}",
            cfg.train_path.display()
        )));
    }
    let clouds = build_all(&clips, &cfg.model)?;
    let labels = clip_labels(&clips, cfg)?;
    let eval_set = cfg
        .eval_path
        .as_ref()
        .map(|p| -> Result<_> {
            let clips = load_clips(p)?;
            build_all(&clips, &cfg.model)
        })
        .transpose()?;

    let (params, mut adam, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.train != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was produced by a different config".into(),
                ));
            }
            (ckpt.params, ckpt.adam, ckpt.epochs_completed)
        }
        None => {
            let params = ModelParams::init(&cfg.model, cfg.seed)?;
            let adam = AdamState::new(&params);
            (params, adam, 0)
        }
    };

    let mut stats = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let epoch_stats = run_epoch(epoch, cfg, &clouds, &labels, &params, &mut adam)?;
        on_epoch(&epoch_stats);
        stats.push(epoch_stats);
        let ckpt = Checkpoint {
            train: cfg.clone(),
            epochs_completed: epoch + 1,
            params: params.clone(),
            adam: adam.clone(),
        };
        save_checkpoint(&cfg.checkpoint_path, &ckpt)?;
    }

    let final_test_accuracy = eval_set
        .as_ref()
        .map(|clouds| evaluate_clouds(&params, &cfg.model, cfg.mode, clouds))
        .transpose()?;
    let checkpoint = Checkpoint {
        train: cfg.clone(),
        epochs_completed: cfg.epochs,
        params,
        adam,
    };
    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs: stats,
        final_test_accuracy,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}

fn build_all(clips: &[ClipRecord], model: &ModelConfig) -> Result<Vec<KeypointCloud>> {
    clips
        .iter()
        .map(|c| build_cloud(c, model.num_categories))
        .collect()
}

fn clip_labels(clips: &[ClipRecord], cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    clips
        .iter()
        .map(|clip| match cfg.mode {
            Mode::Recognition => {
                if clip.label >= cfg.model.num_classes {
                    return Err(Error::Validation(format!(
                        "clip {:?}: label {} not below num_classes {}",
                        clip.clip_id, clip.label, cfg.model.num_classes
                    )));
                }
                let mut label = vec![0.0; cfg.model.num_classes];
                label[clip.label] = 1.0;
                Ok(label)
            }
            Mode::Localization => video_soft_label(clip, cfg.model.num_classes),
        })
        .collect()
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    // Stateless per-epoch stream so a resumed run replays identically.
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15))
}

struct EpochTally {
    loss_sum: f64,
    loss_terms: usize,
    correct: usize,
    counted: usize,
}

impl EpochTally {
    fn observe_logits(&mut self, logits: &Tensor, label: &[f64]) {
        let values = logits.values();
        let predicted = argmax(&values);
        if label[predicted] == label.iter().cloned().fold(f64::NEG_INFINITY, f64::max) {
            self.correct += 1;
        }
        self.counted += 1;
    }
}

fn run_epoch(
    epoch: usize,
    cfg: &TrainConfig,
    clouds: &[KeypointCloud],
    labels: &[Vec<f64>],
    params: &ModelParams,
    adam: &mut AdamState,
) -> Result<EpochStats> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut rng);
    let hp = cfg.adam();

    let mut tally = EpochTally {
        loss_sum: 0.0,
        loss_terms: 0,
        correct: 0,
        counted: 0,
    };

    for batch in order.chunks(cfg.batch_size) {
        params.zero_grads();
        match cfg.mode {
            Mode::Recognition => {
                recognition_batch(batch, cfg, clouds, labels, params, &mut tally)?
            }
            Mode::Localization => {
                localization_batch(batch, cfg, clouds, labels, params, &mut rng, &mut tally)?
            }
        }
        adam_step(params, adam, &hp)?;
    }

    Ok(EpochStats {
        epoch,
        loss: tally.loss_sum / tally.loss_terms.max(1) as f64,
        accuracy: tally.correct as f64 / tally.counted.max(1) as f64,
    })
}

fn check_finite(loss: f64, cfg: &TrainConfig) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss diverged (non-finite); last good checkpoint remains at {}",
            cfg.checkpoint_path.display()
        )));
    }
    Ok(loss)
}

fn recognition_batch(
    batch: &[usize],
    cfg: &TrainConfig,
    clouds: &[KeypointCloud],
    labels: &[Vec<f64>],
    params: &ModelParams,
    tally: &mut EpochTally,
) -> Result<()> {
    let weight = 1.0 / batch.len() as f64;
    for &idx in batch {
        let mut tape = Tape::new();
        let logits = forward_recognition(&mut tape, &clouds[idx], params, &cfg.model)?;
        tally.observe_logits(&logits, &labels[idx]);
        let target = Tensor::constant(1, cfg.model.num_classes, labels[idx].clone());
        let loss = tape.softmax_cross_entropy(&logits, &target)?;
        tally.loss_sum += check_finite(loss.get(0, 0), cfg)?;
        tally.loss_terms += 1;
        let scaled = tape.scale(&loss, weight)?;
        tape.backward(&scaled)?;
    }
    Ok(())
}

fn localization_batch(
    batch: &[usize],
    cfg: &TrainConfig,
    clouds: &[KeypointCloud],
    labels: &[Vec<f64>],
    params: &ModelParams,
    rng: &mut ChaCha8Rng,
    tally: &mut EpochTally,
) -> Result<()> {
    // Decide pairings and draw all randomness up front so the term count is
    // known before any gradient is taken.
    enum Term {
        Plain(usize),
        Mixed(usize, usize),
    }
    let mut terms = Vec::new();
    let mut chunks = batch.chunks_exact(2);
    for pair in &mut chunks {
        let mix = cfg.mixing && rng.gen_bool(cfg.mixing_probability);
        if mix {
            terms.push(Term::Mixed(pair[0], pair[1]));
        } else {
            terms.push(Term::Plain(pair[0]));
            terms.push(Term::Plain(pair[1]));
        }
    }
    for &rest in chunks.remainder() {
        terms.push(Term::Plain(rest));
    }

    let weight = 1.0 / terms.len() as f64;
    for term in terms {
        let mut tape = Tape::new();
        let (logits, label) = match term {
            Term::Plain(idx) => {
                let feats = forward_features(
                    &mut tape,
                    &clouds[idx],
                    params,
                    &cfg.model,
                    ForwardMode::Localization,
                )?;
                let logits = pooled_video_logit(&mut tape, &feats.features, params)?;
                tally.observe_logits(&logits, &labels[idx]);
                (logits, labels[idx].clone())
            }
            Term::Mixed(a, b) => {
                let (mask_a, mask_b) =
                    sample_mix_masks(&clouds[a], &clouds[b], MaskMode::FrameWindow, rng);
                let feat_a = forward_features(
                    &mut tape,
                    &clouds[a],
                    params,
                    &cfg.model,
                    ForwardMode::Localization,
                )?;
                let feat_b = forward_features(
                    &mut tape,
                    &clouds[b],
                    params,
                    &cfg.model,
                    ForwardMode::Localization,
                )?;
                let logits = mixed_training_logit(
                    &mut tape,
                    &feat_a.features,
                    &mask_a,
                    &feat_b.features,
                    &mask_b,
                    params,
                )?;
                let label = mixed_label(&labels[a], &labels[b], mask_a.lambda);
                (logits, label)
            }
        };
        let target = Tensor::constant(1, cfg.model.num_classes, label);
        let loss = tape.softmax_cross_entropy(&logits, &target)?;
        tally.loss_sum += check_finite(loss.get(0, 0), cfg)?;
        tally.loss_terms += 1;
        let scaled = tape.scale(&loss, weight)?;
        tape.backward(&scaled)?;
    }
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of a checkpoint's parameters over prebuilt clouds.
/// Argmax ties break to the lowest class index.
pub fn evaluate_clouds(
    params: &ModelParams,
    model: &ModelConfig,
    mode: Mode,
    clouds: &[KeypointCloud],
) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let mut correct = 0;
    for cloud in clouds {
        if cloud.label >= model.num_classes {
            return Err(Error::Validation(format!(
                "clip {:?}: label {} not below num_classes {}",
                cloud.clip_id, cloud.label, model.num_classes
            )));
        }
        let mut tape = Tape::new();
        let logits = match mode {
            Mode::Recognition => forward_recognition(&mut tape, cloud, params, model)?,
            Mode::Localization => {
                let feats =
                    forward_features(&mut tape, cloud, params, model, ForwardMode::Localization)?;
                pooled_video_logit(&mut tape, &feats.features, params)?
            }
        };
        if argmax(&logits.values()) == cloud.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clouds.len() as f64)
}

/// Evaluate a checkpoint on a clip dataset.
pub fn evaluate(ckpt: &Checkpoint, clips: &[ClipRecord]) -> Result<f64> {
    let clouds = build_all(clips, &ckpt.train.model)?;
    evaluate_clouds(&ckpt.params, &ckpt.train.model, ckpt.train.mode, &clouds)
}

/// Which corruption a robustness sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Gaussian coordinate noise; the grid is the sigma values.
    FpSigma,
    /// Keypoint zeroing; the grid is the zeroed fraction.
    FnRatio,
    /// Tracking-index switching; the grid is the switch interval in frames.
    TrackInterval,
}

/// Accuracy at each corruption level: returns `(level, accuracy)` rows.
///
/// False positives and negatives are injected into the prebuilt clouds;
/// tracking corruption rewrites the clips and rebuilds. Per-clip corruption
/// seeds derive from `seed XOR clip_index`.
pub fn robustness_sweep(
    ckpt: &Checkpoint,
    clips: &[ClipRecord],
    axis: SweepAxis,
    grid: &[f64],
    fp_ratio: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&fp_ratio) {
        return Err(Error::Config(format!(
            "fp ratio must be in [0, 1], got {fp_ratio}"
        )));
    }
    let model = &ckpt.train.model;
    let clean = build_all(clips, model)?;
    let mut curve = Vec::with_capacity(grid.len());
    for &level in grid {
        let clouds: Vec<KeypointCloud> = match axis {
            SweepAxis::FpSigma => {
                if level < 0.0 {
                    return Err(Error::Config(format!("negative sigma {level}")));
                }
                clean
                    .iter()
                    .enumerate()
                    .map(|(i, c)| inject_false_positives(c, level, fp_ratio, seed ^ i as u64))
                    .collect()
            }
            SweepAxis::FnRatio => {
                if !(0.0..=1.0).contains(&level) {
                    return Err(Error::Config(format!("fn ratio {level} outside [0, 1]")));
                }
                clean
                    .iter()
                    .enumerate()
                    .map(|(i, c)| inject_false_negatives(c, level, seed ^ i as u64))
                    .collect()
            }
            SweepAxis::TrackInterval => {
                let interval = level.round() as usize;
                if interval == 0 {
                    return Err(Error::Config(format!(
                        "track interval must be at least 1, got {level}"
                    )));
                }
                let shuffled: Vec<ClipRecord> = clips
                    .iter()
                    .enumerate()
                    .map(|(i, c)| shuffle_tracking(c, interval, seed ^ i as u64))
                    .collect();
                build_all(&shuffled, model)?
            }
        };
        let accuracy = evaluate_clouds(&ckpt.params, model, ckpt.train.mode, &clouds)?;
        curve.push((level, accuracy));
    }
    Ok(curve)
}
