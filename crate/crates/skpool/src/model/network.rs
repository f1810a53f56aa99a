//! Forward pipeline: point embedding, MLP blocks, grouped pooling, and the
//! cascaded reduction from keypoints to instances to frames.

use crate::data::KeypointCloud;
use crate::error::{Error, Result};
use crate::tensor::{Segments, Tape, Tensor};

use super::{encoding_matrix, MlpBlockParams, ModelConfig, ModelParams, NORM_EPS};

/// Which pooling cascade the forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Full cascade: keypoints -> instances -> frames, features per frame.
    Recognition,
    /// The second grouped pool is switched off: features stay per instance.
    Localization,
}

/// Identity of one output feature row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowId {
    /// Original frame index in the clip.
    pub frame_idx: usize,
    /// Position within the frame's instance list; `None` for frame-level rows.
    pub instance_pos: Option<usize>,
}

/// Output of the feature extractor: nonnegative features plus per-row identity.
#[derive(Debug, Clone)]
pub struct FeatureRows {
    pub features: Tensor,
    pub rows: Vec<RowId>,
}

/// Embed every keypoint with a shared two-layer perceptron, then add the
/// keypoint-type index encoding.
pub fn point_embedding(
    tape: &mut Tape,
    cloud: &KeypointCloud,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if let Some(&bad) = cloud
        .keypoint_type_of
        .iter()
        .find(|&&t| t >= cfg.num_keypoint_types)
    {
        return Err(Error::Validation(format!(
            "keypoint type {bad} not below num_keypoint_types {}",
            cfg.num_keypoint_types
        )));
    }
    let n = cloud.num_rows();
    let x = Tensor::constant(n, 4, cloud.features.clone());
    let h = tape.matmul(&x, &params.embed_w1)?;
    let h = tape.add_row(&h, &params.embed_b1)?;
    let h = tape.relu(&h)?;
    let h = tape.matmul(&h, &params.embed_w2)?;
    let h = tape.add_row(&h, &params.embed_b2)?;
    let enc = Tensor::constant(
        n,
        cfg.embed_dim,
        encoding_matrix(&cloud.keypoint_type_of, cfg.embed_dim)?,
    );
    tape.add(&h, &enc)
}

/// Concatenate each row with its group's channel-wise max, project, activate.
pub fn concat_pool(tape: &mut Tape, x: &Tensor, seg: &Segments, w1: &Tensor) -> Result<Tensor> {
    let group_max = tape.segment_max(x, seg)?;
    let per_row_max = tape.gather_rows(&group_max, seg.group_of())?;
    let joined = tape.concat_cols(x, &per_row_max)?;
    let projected = tape.matmul(&joined, w1)?;
    tape.relu(&projected)
}

/// One MLP block: a grouped-pooling residual followed by a channel-mixing
/// residual.
pub fn mlp_block(
    tape: &mut Tape,
    x: &Tensor,
    seg: &Segments,
    block: &MlpBlockParams,
) -> Result<Tensor> {
    let normed = tape.layer_norm(x, &block.norm1_gain, &block.norm1_bias, NORM_EPS)?;
    let pooled = concat_pool(tape, &normed, seg, &block.w1)?;
    let y = tape.add(&pooled, x)?;

    let normed = tape.layer_norm(&y, &block.norm2_gain, &block.norm2_bias, NORM_EPS)?;
    let expanded = tape.matmul(&normed, &block.w2)?;
    let activated = tape.relu(&expanded)?;
    let contracted = tape.matmul(&activated, &block.w3)?;
    tape.add(&contracted, &y)
}

/// Grouped pool block: per local group, concatenate the group's channel max
/// with the global channel max. Rows reduce to one per group; width doubles.
pub fn gpb(tape: &mut Tape, x: &Tensor, seg: &Segments) -> Result<Tensor> {
    let local = tape.segment_max(x, seg)?;
    let global = tape.segment_max(x, &Segments::single(x.rows()))?;
    let global_rows = tape.gather_rows(&global, &vec![0; seg.num_groups()])?;
    tape.concat_cols(&local, &global_rows)
}

/// Channel-wise max over all rows, as a single-row tensor.
pub fn global_max(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let seg = Segments::single(x.rows());
    tape.segment_max(x, &seg)
}

/// The shared classifier head applied to each row independently.
pub fn apply_head(tape: &mut Tape, x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let logits = tape.matmul(x, &params.head_w)?;
    tape.add_row(&logits, &params.head_b)
}

/// Run the staged feature extractor.
///
/// Stage 1 operates on keypoint rows with instance slots as local groups and
/// pools them to one row per slot; the frame index encoding is added there,
/// where rows first gain a unique frame identity. Stage 2 operates on slot
/// rows with frames as local groups. Recognition then pools slots to frames
/// and runs stage 3 with one global group; localization skips that pool,
/// lifts the width instead, and runs stage 3 on slot rows grouped by frame.
/// A final activation keeps returned features nonnegative, which makes
/// zero-masking equivalent to dropping rows from any downstream max.
pub fn forward_features(
    tape: &mut Tape,
    cloud: &KeypointCloud,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: ForwardMode,
) -> Result<FeatureRows> {
    let mut h = point_embedding(tape, cloud, params, cfg)?;

    let slot_groups = Segments::new(cloud.instance_slot_of.clone(), cloud.num_instance_slots)?;
    for block in &params.stages[0].blocks {
        h = mlp_block(tape, &h, &slot_groups, block)?;
    }
    h = gpb(tape, &h, &slot_groups)?;

    let time_enc = Tensor::constant(
        cloud.num_instance_slots,
        2 * cfg.embed_dim,
        encoding_matrix(&cloud.slot_frame_idx, 2 * cfg.embed_dim)?,
    );
    h = tape.add(&h, &time_enc)?;

    let frame_groups = Segments::new(cloud.slot_frame.clone(), cloud.num_frames)?;
    for block in &params.stages[1].blocks {
        h = mlp_block(tape, &h, &frame_groups, block)?;
    }

    let (mut h, rows) = match mode {
        ForwardMode::Recognition => {
            let pooled = gpb(tape, &h, &frame_groups)?;
            let mut frame_idx_of = vec![0usize; cloud.num_frames];
            for (slot, &frame) in cloud.slot_frame.iter().enumerate() {
                frame_idx_of[frame] = cloud.slot_frame_idx[slot];
            }
            let rows = frame_idx_of
                .into_iter()
                .map(|frame_idx| RowId {
                    frame_idx,
                    instance_pos: None,
                })
                .collect();
            (pooled, rows)
        }
        ForwardMode::Localization => {
            let lifted = tape.matmul(&h, &params.lift)?;
            let rows = (0..cloud.num_instance_slots)
                .map(|slot| RowId {
                    frame_idx: cloud.slot_frame_idx[slot],
                    instance_pos: Some(cloud.slot_instance_pos[slot]),
                })
                .collect();
            (lifted, rows)
        }
    };

    let stage3_groups = match mode {
        ForwardMode::Recognition => Segments::single(cloud.num_frames),
        ForwardMode::Localization => frame_groups,
    };
    for block in &params.stages[2].blocks {
        h = mlp_block(tape, &h, &stage3_groups, block)?;
    }
    let features = tape.relu(&h)?;
    Ok(FeatureRows { features, rows })
}

/// Full recognition pass: frame features, global max, classifier head.
pub fn forward_recognition(
    tape: &mut Tape,
    cloud: &KeypointCloud,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let frames = forward_features(tape, cloud, params, cfg, ForwardMode::Recognition)?;
    let pooled = global_max(tape, &frames.features)?;
    apply_head(tape, &pooled, params)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{build_cloud, ClipRecord, FrameRecord, InstanceRecord, Keypoint};
    use crate::model::index_encoding;
    use crate::tensor::grad_check;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            blocks_per_stage: 1,
            expansion: 2,
            num_classes: 3,
            num_keypoint_types: 4,
            num_categories: 2,
        }
    }

    fn grid_clip(frames: usize, instances: usize, keypoints: usize) -> ClipRecord {
        ClipRecord {
            clip_id: "grid".into(),
            label: 0,
            frames: (0..frames)
                .map(|f| FrameRecord {
                    frame_idx: f,
                    instances: (0..instances)
                        .map(|i| InstanceRecord {
                            category: 0,
                            track_id: Some(i as i64),
                            instance_label: None,
                            keypoints: (0..keypoints)
                                .map(|k| {
                                    Keypoint::new(
                                        0.05 + 0.9 * (k as f64 / keypoints as f64),
                                        0.1 + 0.07 * i as f64 + 0.002 * f as f64,
                                        0.8,
                                    )
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn embedding_shares_weights_across_keypoints() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut clip = grid_clip(1, 1, 3);
        // Rows 0 and 2 carry the same 4-vector; give them the same type by
        // duplicating the keypoint at both list positions and padding type 1.
        clip.frames[0].instances[0].keypoints[2] = clip.frames[0].instances[0].keypoints[0];
        let cloud = build_cloud(&clip, 2).unwrap();
        let mut cloud2 = cloud.clone();
        cloud2.keypoint_type_of = vec![0, 1, 0];
        let mut tape = Tape::new();
        let emb = point_embedding(&mut tape, &cloud2, &params, &cfg).unwrap();
        let v = emb.values();
        let d = cfg.embed_dim;
        assert_eq!(v[..d], v[2 * d..3 * d]);
    }

    #[test]
    fn embedding_differs_exactly_by_the_encoding_difference() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut clip = grid_clip(1, 1, 2);
        clip.frames[0].instances[0].keypoints[1] = clip.frames[0].instances[0].keypoints[0];
        let cloud = build_cloud(&clip, 2).unwrap();
        let mut tape = Tape::new();
        let emb = point_embedding(&mut tape, &cloud, &params, &cfg).unwrap();
        let d = cfg.embed_dim;
        let v = emb.values();
        let e0 = index_encoding(0, d).unwrap();
        let e1 = index_encoding(1, d).unwrap();
        for c in 0..d {
            let diff = v[c] - v[d + c];
            assert!((diff - (e0[c] - e1[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocabulary_keypoint_type() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let clip = grid_clip(1, 1, 6);
        let cloud = build_cloud(&clip, 2).unwrap();
        let mut tape = Tape::new();
        let err = point_embedding(&mut tape, &cloud, &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn embedding_is_a_row_wise_map() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 6).unwrap();
        let cloud = build_cloud(&grid_clip(2, 2, 4), 2).unwrap();
        let mut tape = Tape::new();
        let base = point_embedding(&mut tape, &cloud, &params, &cfg)
            .unwrap()
            .values();
        let n = cloud.num_rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted_cloud = cloud.permute_rows(&perm);
        let permuted = point_embedding(&mut tape, &permuted_cloud, &params, &cfg)
            .unwrap()
            .values();
        let d = cfg.embed_dim;
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(permuted[new * d..(new + 1) * d], base[old * d..(old + 1) * d]);
        }
    }

    #[test]
    fn concat_pool_singleton_group_doubles_the_row() {
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..2 * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::constant(1, d, xv.clone());
        let w = Tensor::constant(2 * d, d, wv.clone());
        let mut tape = Tape::new();
        let out = concat_pool(&mut tape, &x, &Segments::single(1), &w).unwrap();
        // Oracle: sigma([x; x] W).
        let mut expected = vec![0.0; d];
        for j in 0..d {
            for k in 0..d {
                expected[j] += xv[k] * wv[k * d + j];
                expected[j] += xv[k] * wv[(d + k) * d + j];
            }
            expected[j] = expected[j].max(0.0);
        }
        for (a, b) in out.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_pool_matches_per_row_loop_oracle() {
        let (n, d) = (7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..2 * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let group_of = vec![0, 1, 0, 2, 1, 2, 0];
        let seg = Segments::new(group_of.clone(), 3).unwrap();
        let mut tape = Tape::new();
        let out = concat_pool(
            &mut tape,
            &Tensor::constant(n, d, xv.clone()),
            &seg,
            &Tensor::constant(2 * d, d, wv.clone()),
        )
        .unwrap();
        for i in 0..n {
            // Naive per-row group max.
            let mut gmax = vec![f64::NEG_INFINITY; d];
            for j in 0..n {
                if group_of[j] == group_of[i] {
                    for c in 0..d {
                        gmax[c] = gmax[c].max(xv[j * d + c]);
                    }
                }
            }
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += xv[i * d + k] * wv[k * d + j];
                    acc += gmax[k] * wv[(d + k) * d + j];
                }
                let expected = acc.max(0.0);
                assert!((out.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_block_with_zero_weights_is_identity() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 7).unwrap();
        let block = &params.stages[0].blocks[0];
        for w in [&block.w1, &block.w2, &block.w3] {
            let (r, c) = w.shape();
            w.set_values(&vec![0.0; r * c]);
        }
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv: Vec<f64> = (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::constant(5, d, xv.clone());
        let seg = Segments::new(vec![0, 0, 1, 1, 1], 2).unwrap();
        let mut tape = Tape::new();
        let out = mlp_block(&mut tape, &x, &seg, block).unwrap();
        assert_eq!(out.values(), xv);
    }

    #[test]
    fn mlp_block_preserves_shape() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 8).unwrap();
        let d = cfg.embed_dim;
        let x = Tensor::constant(6, d, vec![0.3; 6 * d]);
        let seg = Segments::new(vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        let mut tape = Tape::new();
        let out = mlp_block(&mut tape, &x, &seg, &params.stages[0].blocks[0]).unwrap();
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn mlp_block_gradient_passes_finite_differences() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let block = &params.stages[0].blocks[0];
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::leaf(4, d, (0..4 * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let seg = Segments::new(vec![0, 0, 1, 1], 2).unwrap();
        let inputs = [
            &x,
            &block.norm1_gain,
            &block.norm1_bias,
            &block.w1,
            &block.norm2_gain,
            &block.norm2_bias,
            &block.w2,
            &block.w3,
        ];
        let max_rel = grad_check(
            |tape| {
                let out = mlp_block(tape, &x, &seg, block)?;
                tape.sum(&out)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn gpb_single_group_duplicates_the_global_max() {
        let mut tape = Tape::new();
        let x = Tensor::constant(3, 2, vec![1.0, -2.0, 0.5, 4.0, -1.0, 0.0]);
        let out = gpb(&mut tape, &x, &Segments::single(3)).unwrap();
        assert_eq!(out.shape(), (1, 4));
        assert_eq!(out.values(), vec![1.0, 4.0, 1.0, 4.0]);
    }

    #[test]
    fn gpb_shape_contract() {
        let mut tape = Tape::new();
        let x = Tensor::constant(12, 4, (0..48).map(|v| v as f64).collect());
        let seg = Segments::new((0..12).map(|i| i % 3).collect(), 3).unwrap();
        let out = gpb(&mut tape, &x, &seg).unwrap();
        assert_eq!(out.shape(), (3, 8));
    }

    #[test]
    fn cascade_reduces_keypoints_to_instances_to_frames() {
        let cfg = ModelConfig {
            embed_dim: 8,
            blocks_per_stage: 1,
            expansion: 2,
            num_classes: 4,
            num_keypoint_types: 18,
            num_categories: 2,
        };
        let params = ModelParams::init(&cfg, 10).unwrap();
        let cloud = build_cloud(&grid_clip(300, 2, 18), 2).unwrap();
        assert_eq!(cloud.num_rows(), 10800);
        assert_eq!(cloud.num_instance_slots, 600);
        let mut tape = Tape::new();
        let recognition =
            forward_features(&mut tape, &cloud, &params, &cfg, ForwardMode::Recognition).unwrap();
        assert_eq!(recognition.features.shape(), (300, 4 * cfg.embed_dim));
        let mut tape = Tape::new();
        let localization =
            forward_features(&mut tape, &cloud, &params, &cfg, ForwardMode::Localization).unwrap();
        assert_eq!(localization.features.shape(), (600, 4 * cfg.embed_dim));
        assert_eq!(localization.rows[0].instance_pos, Some(0));
    }

    #[test]
    fn features_are_nonnegative() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 11).unwrap();
        let cloud = build_cloud(&grid_clip(4, 2, 4), 2).unwrap();
        for mode in [ForwardMode::Recognition, ForwardMode::Localization] {
            let mut tape = Tape::new();
            let out = forward_features(&mut tape, &cloud, &params, &cfg, mode).unwrap();
            assert!(out.features.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn degenerate_single_keypoint_clip_yields_finite_logits() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12).unwrap();
        let cloud = build_cloud(&grid_clip(1, 1, 1), 2).unwrap();
        let mut tape = Tape::new();
        let logits = forward_recognition(&mut tape, &cloud, &params, &cfg).unwrap();
        assert_eq!(logits.shape(), (1, cfg.num_classes));
        assert!(logits.all_finite());
    }

    #[test]
    fn reversing_frames_changes_logits() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let clip = grid_clip(6, 1, 4);
        let mut reversed = clip.clone();
        let mut frames: Vec<_> = clip.frames.iter().rev().cloned().collect();
        for (i, f) in frames.iter_mut().enumerate() {
            f.frame_idx = i;
        }
        reversed.frames = frames;
        let mut tape = Tape::new();
        let a = forward_recognition(&mut tape, &build_cloud(&clip, 2).unwrap(), &params, &cfg)
            .unwrap()
            .values();
        let b = forward_recognition(
            &mut tape,
            &build_cloud(&reversed, 2).unwrap(),
            &params,
            &cfg,
        )
        .unwrap()
        .values();
        assert_ne!(a, b);
    }

    #[test]
    fn permuting_keypoints_within_an_instance_keeps_logits_bitwise() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 14).unwrap();
        let cloud = build_cloud(&grid_clip(3, 2, 4), 2).unwrap();
        // Reverse each slot's row range.
        let mut perm: Vec<usize> = (0..cloud.num_rows()).collect();
        for slot in 0..cloud.num_instance_slots {
            let rows: Vec<usize> = (0..cloud.num_rows())
                .filter(|&r| cloud.instance_slot_of[r] == slot)
                .collect();
            for (a, b) in rows.iter().zip(rows.iter().rev()) {
                perm[*a] = *b;
            }
        }
        let permuted = cloud.permute_rows(&perm);
        let mut tape = Tape::new();
        let a = forward_recognition(&mut tape, &cloud, &params, &cfg).unwrap();
        let b = forward_recognition(&mut tape, &permuted, &params, &cfg).unwrap();
        let (av, bv) = (a.values(), b.values());
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn permuting_instances_within_a_frame_keeps_logits_bitwise() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 15).unwrap();
        let clip = grid_clip(3, 3, 4);
        let mut swapped = clip.clone();
        for frame in &mut swapped.frames {
            frame.instances.reverse();
        }
        let mut tape = Tape::new();
        let a = forward_recognition(&mut tape, &build_cloud(&clip, 2).unwrap(), &params, &cfg)
            .unwrap()
            .values();
        let b = forward_recognition(&mut tape, &build_cloud(&swapped, 2).unwrap(), &params, &cfg)
            .unwrap()
            .values();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn end_to_end_gradients_pass_finite_differences_on_a_small_model() {
        let cfg = ModelConfig {
            embed_dim: 4,
            blocks_per_stage: 1,
            expansion: 1,
            num_classes: 2,
            num_keypoint_types: 2,
            num_categories: 1,
        };
        let params = ModelParams::init(&cfg, 16).unwrap();
        let cloud = build_cloud(&grid_clip(2, 1, 2), 1).unwrap();
        let labels = Tensor::constant(1, 2, vec![1.0, 0.0]);
        let tensors: Vec<&Tensor> = params.named().into_iter().map(|(_, t)| t).collect();
        let max_rel = grad_check(
            |tape| {
                let logits = forward_recognition(tape, &cloud, &params, &cfg)?;
                tape.softmax_cross_entropy(&logits, &labels)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
