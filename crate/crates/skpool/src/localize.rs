//! Weakly supervised spatio-temporal action localization.
//!
//! Training pools instance-level features into a single video-level logit, so
//! only video-level labels are needed; inference drops that pool and applies
//! the shared head to every (frame, instance) slot. The batch-mixing
//! augmentation masks two clips' instance features with complementary binary
//! masks, max-pools across both, and mixes the labels by the kept fraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{ClipRecord, KeypointCloud};
use crate::error::{Error, Result};
use crate::model::{
    apply_head, forward_features, global_max, ForwardMode, ModelConfig, ModelParams,
};
use crate::tensor::{Tape, Tensor};

/// Shape of the region kept by a mixing mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Keep a contiguous window of frames (all instances in those frames).
    #[default]
    FrameWindow,
    /// Keep instance rows sampled independently of frame structure
    /// (ablation mode).
    IidRows,
}

/// Binary row selector over a clip's instance slots.
///
/// Every row is kept or dropped whole (the mask broadcasts across channels).
/// `lambda` is this sample's label weight: the fraction of its rows kept,
/// which is what the mixed label uses.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    pub keep: Vec<bool>,
    pub lambda: f64,
}

impl MixMask {
    pub fn ones(rows: usize) -> Self {
        MixMask {
            keep: vec![true; rows],
            lambda: 1.0,
        }
    }

    pub fn zeros(rows: usize) -> Self {
        MixMask {
            keep: vec![false; rows],
            lambda: 0.0,
        }
    }

    pub fn kept_rows(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Complementary mask over the same rows.
    pub fn complement(&self) -> MixMask {
        MixMask {
            keep: self.keep.iter().map(|k| !k).collect(),
            lambda: 1.0 - self.lambda,
        }
    }

    /// The mask as a constant `rows x width` 0/1 matrix.
    fn to_tensor(&self, width: usize) -> Tensor {
        let mut values = Vec::with_capacity(self.keep.len() * width);
        for &k in &self.keep {
            let v = if k { 1.0 } else { 0.0 };
            values.extend(std::iter::repeat(v).take(width));
        }
        Tensor::constant(self.keep.len(), width, values)
    }
}

/// Sample complementary mixing masks for a pair of clips.
///
/// The mixing ratio is drawn uniformly on `[0, 1]`. In frame-window mode the
/// kept set of `a` is a contiguous window covering `round(lambda * F)` frames
/// and `b` keeps the complement of such a window; each mask is sized to its
/// own clip with the same raw ratio. The label weight is then adjusted to the
/// fraction of rows actually kept, so rounding never skews the mixed label.
pub fn sample_mix_masks(
    a: &KeypointCloud,
    b: &KeypointCloud,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> (MixMask, MixMask) {
    let lambda_raw: f64 = rng.gen_range(0.0..=1.0);
    let keep_a = sample_keep(&a.slot_frame, a.num_frames, lambda_raw, mode, false, rng);
    let keep_b = sample_keep(&b.slot_frame, b.num_frames, lambda_raw, mode, true, rng);
    let lambda = keep_a.iter().filter(|&&k| k).count() as f64 / keep_a.len() as f64;
    (
        MixMask {
            keep: keep_a,
            lambda,
        },
        MixMask {
            keep: keep_b,
            lambda: 1.0 - lambda,
        },
    )
}

fn sample_keep(
    slot_frame: &[usize],
    num_frames: usize,
    lambda: f64,
    mode: MaskMode,
    complement: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    match mode {
        MaskMode::FrameWindow => {
            let window = (lambda * num_frames as f64).round() as usize;
            let start = rng.gen_range(0..=num_frames - window);
            slot_frame
                .iter()
                .map(|&f| (f >= start && f < start + window) != complement)
                .collect()
        }
        MaskMode::IidRows => {
            let rows = slot_frame.len();
            let kept = (lambda * rows as f64).round() as usize;
            let mut order: Vec<usize> = (0..rows).collect();
            use rand::seq::SliceRandom;
            order.shuffle(rng);
            let mut keep = vec![complement; rows];
            for &row in order.iter().take(kept) {
                keep[row] = !complement;
            }
            keep
        }
    }
}

/// Mixed label per the kept-fraction ratio: `lambda * l_a + (1 - lambda) * l_b`.
pub fn mixed_label(label_a: &[f64], label_b: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(label_a.len(), label_b.len());
    label_a
        .iter()
        .zip(label_b)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Video-level soft label: uniform over the distinct instance-level classes
/// when the clip carries them, else one-hot on the clip label. This is the
/// only label the weakly supervised trainer sees.
pub fn video_soft_label(clip: &ClipRecord, num_classes: usize) -> Result<Vec<f64>> {
    let classes = clip.instance_classes();
    let mut label = vec![0.0; num_classes];
    if classes.is_empty() {
        if clip.label >= num_classes {
            return Err(Error::Validation(format!(
                "clip {:?}: label {} not below num_classes {num_classes}",
                clip.clip_id, clip.label
            )));
        }
        label[clip.label] = 1.0;
    } else {
        for &c in &classes {
            if c >= num_classes {
                return Err(Error::Validation(format!(
                    "clip {:?}: instance label {c} not below num_classes {num_classes}",
                    clip.clip_id
                )));
            }
            label[c] = 1.0 / classes.len() as f64;
        }
    }
    Ok(label)
}

/// The training-path video logit: global max over instance features, then
/// the shared head.
pub fn pooled_video_logit(
    tape: &mut Tape,
    features: &Tensor,
    params: &ModelParams,
) -> Result<Tensor> {
    let pooled = global_max(tape, features)?;
    apply_head(tape, &pooled, params)
}

/// Inter-sample mixed logit: mask each clip's instance features, stack, pool
/// across both, and apply the shared head. Features must be the nonnegative
/// localization-mode outputs, so a zeroed row can never win a max.
pub fn mixed_training_logit(
    tape: &mut Tape,
    feat_a: &Tensor,
    mask_a: &MixMask,
    feat_b: &Tensor,
    mask_b: &MixMask,
    params: &ModelParams,
) -> Result<Tensor> {
    for (feat, mask) in [(feat_a, mask_a), (feat_b, mask_b)] {
        if feat.rows() != mask.keep.len() {
            return Err(Error::Dimension {
                op: "mixed_training_logit",
                lhs: feat.shape_string(),
                rhs: format!("{} mask rows", mask.keep.len()),
            });
        }
    }
    let masked_a = tape.mul(feat_a, &mask_a.to_tensor(feat_a.cols()))?;
    let masked_b = tape.mul(feat_b, &mask_b.to_tensor(feat_b.cols()))?;
    let stacked = tape.concat_rows(&masked_a, &masked_b)?;
    let pooled = global_max(tape, &stacked)?;
    apply_head(tape, &pooled, params)
}

/// Per-slot classification of one clip.
#[derive(Debug, Clone, Serialize)]
pub struct InstancePrediction {
    pub clip_id: String,
    pub frame_idx: usize,
    /// Position within the frame's instance list.
    pub instance_slot: usize,
    #[serde(skip_serializing)]
    pub logits: Vec<f64>,
    pub class: usize,
    pub score: f64,
}

/// Score every (frame, instance) slot of a clip with the shared head: the
/// final pooling is simply removed from the recognition architecture.
pub fn infer_instance_logits(
    cloud: &KeypointCloud,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<InstancePrediction>> {
    let mut tape = Tape::new();
    let feats = forward_features(&mut tape, cloud, params, cfg, ForwardMode::Localization)?;
    let logits = apply_head(&mut tape, &feats.features, params)?;
    let values = logits.values();
    let c = cfg.num_classes;
    let mut out = Vec::with_capacity(feats.rows.len());
    for (slot, row) in feats.rows.iter().enumerate() {
        let row_logits = values[slot * c..(slot + 1) * c].to_vec();
        let (class, score) = softmax_argmax(&row_logits);
        out.push(InstancePrediction {
            clip_id: cloud.clip_id.clone(),
            frame_idx: row.frame_idx,
            instance_slot: row.instance_pos.expect("localization rows carry instances"),
            logits: row_logits,
            class,
            score,
        });
    }
    Ok(out)
}

/// Argmax class (ties to the lowest index) and its softmax probability.
fn softmax_argmax(logits: &[f64]) -> (usize, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    (best, (logits[best] - max).exp() / denom)
}

/// Per-class precision, recall, and average precision at the instance level.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Ground-truth slots of this class.
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationMetrics {
    /// Fraction of labeled slots whose argmax class is correct.
    pub accuracy: f64,
    /// Mean AP over classes with nonzero support.
    pub mean_ap: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Average precision of a score-ranked prediction list: each true positive
/// contributes the precision at its rank, normalized by the ground-truth
/// count (no interpolation).
pub fn average_precision(ranked_correct: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut true_positives = 0.0;
    let mut sum = 0.0;
    for (rank, &correct) in ranked_correct.iter().enumerate() {
        if correct {
            true_positives += 1.0;
            sum += true_positives / (rank + 1) as f64;
        }
    }
    sum / num_gt as f64
}

/// Match predictions against per-instance ground truth: a prediction is
/// correct iff its class equals the slot's label. Slots without a label are
/// excluded. Predictions for unknown clips or slots are evaluation errors.
pub fn eval_instance_localization(
    preds: &[InstancePrediction],
    ground_truth: &[ClipRecord],
) -> Result<LocalizationMetrics> {
    use std::collections::HashMap;
    let mut gt: HashMap<(&str, usize, usize), Option<usize>> = HashMap::new();
    let mut num_classes = 0;
    for clip in ground_truth {
        for frame in &clip.frames {
            for (pos, inst) in frame.instances.iter().enumerate() {
                gt.insert(
                    (clip.clip_id.as_str(), frame.frame_idx, pos),
                    inst.instance_label,
                );
                if let Some(l) = inst.instance_label {
                    num_classes = num_classes.max(l + 1);
                }
            }
        }
    }

    let mut labeled: Vec<(&InstancePrediction, usize)> = Vec::new();
    for pred in preds {
        let key = (pred.clip_id.as_str(), pred.frame_idx, pred.instance_slot);
        match gt.get(&key) {
            None => {
                return Err(Error::Evaluation(format!(
                    "prediction for unknown slot: clip {:?} frame {} instance {}",
                    pred.clip_id, pred.frame_idx, pred.instance_slot
                )))
            }
            Some(None) => continue,
            Some(Some(label)) => labeled.push((pred, *label)),
        }
        num_classes = num_classes.max(pred.class + 1);
    }
    if labeled.is_empty() {
        return Err(Error::Evaluation(
            "no labeled instance slots to evaluate".into(),
        ));
    }

    let correct = labeled.iter().filter(|(p, l)| p.class == *l).count();
    let accuracy = correct as f64 / labeled.len() as f64;

    let mut per_class = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_classes = 0;
    for class in 0..num_classes {
        let support = labeled.iter().filter(|(_, l)| *l == class).count();
        let mut claimed: Vec<(&InstancePrediction, usize)> = labeled
            .iter()
            .filter(|(p, _)| p.class == class)
            .cloned()
            .collect();
        // Stable sort keeps input order on score ties, so ranking is
        // deterministic.
        claimed.sort_by(|a, b| b.0.score.partial_cmp(&a.0.score).unwrap());
        let ranked: Vec<bool> = claimed.iter().map(|(_, l)| *l == class).collect();
        let tp = ranked.iter().filter(|&&c| c).count();
        let precision = if claimed.is_empty() {
            0.0
        } else {
            tp as f64 / claimed.len() as f64
        };
        let recall = if support == 0 {
            0.0
        } else {
            tp as f64 / support as f64
        };
        let ap = average_precision(&ranked, support);
        if support > 0 {
            ap_sum += ap;
            ap_classes += 1;
        }
        per_class.push(ClassMetrics {
            class,
            support,
            precision,
            recall,
            ap,
        });
    }
    Ok(LocalizationMetrics {
        accuracy,
        mean_ap: if ap_classes == 0 {
            0.0
        } else {
            ap_sum / ap_classes as f64
        },
        per_class,
    })
}
