//! The structured keypoint pooling network: configuration, parameters,
//! index encodings, and the forward pipeline.

mod encoding;
mod network;

pub use encoding::{encoding_matrix, index_encoding};
pub use network::{
    apply_head, concat_pool, forward_features, forward_recognition, global_max, gpb, mlp_block,
    FeatureRows, ForwardMode, RowId,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon used by every normalization layer in the network.
pub const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
///
/// Stage widths are derived: the embedding produces `embed_dim` channels and
/// each grouped pool doubles the width, giving `(D, 2D, 4D)` across the three
/// stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width D. Must be even so sinusoid channels pair up.
    pub embed_dim: usize,
    /// MLP blocks per stage (r).
    pub blocks_per_stage: usize,
    /// MLP expansion ratio (alpha).
    pub expansion: usize,
    /// Number of action classes (C).
    pub num_classes: usize,
    /// Size of the keypoint-type vocabulary for index encoding.
    pub num_keypoint_types: usize,
    /// Number of instance categories (person = 0, objects >= 1).
    pub num_categories: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            blocks_per_stage: 2,
            expansion: 4,
            num_classes: 4,
            num_keypoint_types: 18,
            num_categories: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be even and at least 2, got {}",
                self.embed_dim
            )));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.expansion == 0 {
            return Err(Error::Config("expansion must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.num_keypoint_types == 0 || self.num_categories == 0 {
            return Err(Error::Config(
                "num_keypoint_types and num_categories must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel widths of the three stages.
    pub fn stage_widths(&self) -> [usize; 3] {
        [self.embed_dim, 2 * self.embed_dim, 4 * self.embed_dim]
    }

    /// Width of the features entering the classifier head.
    pub fn head_width(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Weights of one MLP block: a grouped-pooling residual followed by a
/// channel-mixing residual, each with its own normalization.
#[derive(Debug, Clone)]
pub struct MlpBlockParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    /// Projection applied to `[row; group max]`, 2D' x D'.
    pub w1: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    /// Expansion D' x alpha*D' and contraction alpha*D' x D'.
    pub w2: Tensor,
    pub w3: Tensor,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub blocks: Vec<MlpBlockParams>,
}

/// All trainable tensors, in a fixed canonical order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Two-layer perceptron embedding the 4-channel keypoint vector into D.
    pub embed_w1: Tensor,
    pub embed_b1: Tensor,
    pub embed_w2: Tensor,
    pub embed_b2: Tensor,
    pub stages: [StageParams; 3],
    /// Width-matching 2D -> 4D lift used when the second grouped pool is
    /// switched off (localization mode).
    pub lift: Tensor,
    /// Shared classifier head, 4D x C plus bias.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Initialize every weight uniformly in +-sqrt(6 / (fan_in + fan_out)),
    /// gains at one and biases at zero, deterministically from the seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let mut uniform = |rows: usize, cols: usize| -> Tensor {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let values = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::leaf(rows, cols, values)
        };
        let ones = |cols: usize| Tensor::leaf(1, cols, vec![1.0; cols]);
        let zeros_row = |cols: usize| Tensor::leaf(1, cols, vec![0.0; cols]);

        let embed_w1 = uniform(4, d);
        let embed_b1 = zeros_row(d);
        let embed_w2 = uniform(d, d);
        let embed_b2 = zeros_row(d);
        let stages = cfg.stage_widths().map(|width| StageParams {
            blocks: (0..cfg.blocks_per_stage)
                .map(|_| MlpBlockParams {
                    norm1_gain: ones(width),
                    norm1_bias: zeros_row(width),
                    w1: uniform(2 * width, width),
                    norm2_gain: ones(width),
                    norm2_bias: zeros_row(width),
                    w2: uniform(width, cfg.expansion * width),
                    w3: uniform(cfg.expansion * width, width),
                })
                .collect(),
        });
        let lift = uniform(2 * d, 4 * d);
        let head_w = uniform(4 * d, cfg.num_classes);
        let head_b = zeros_row(cfg.num_classes);
        Ok(ModelParams {
            embed_w1,
            embed_b1,
            embed_w2,
            embed_b2,
            stages,
            lift,
            head_w,
            head_b,
        })
    }

    /// Every parameter with its canonical name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.w1".into(), &self.embed_w1),
            ("embed.b1".into(), &self.embed_b1),
            ("embed.w2".into(), &self.embed_w2),
            ("embed.b2".into(), &self.embed_b2),
        ];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stage{s}.block{b}");
                out.push((format!("{prefix}.norm1.gain"), &block.norm1_gain));
                out.push((format!("{prefix}.norm1.bias"), &block.norm1_bias));
                out.push((format!("{prefix}.w1"), &block.w1));
                out.push((format!("{prefix}.norm2.gain"), &block.norm2_gain));
                out.push((format!("{prefix}.norm2.bias"), &block.norm2_bias));
                out.push((format!("{prefix}.w2"), &block.w2));
                out.push((format!("{prefix}.w3"), &block.w3));
            }
        }
        out.push(("lift.w".into(), &self.lift));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named() {
            t.zero_grad();
        }
    }

    pub fn num_values(&self) -> usize {
        self.named()
            .iter()
            .map(|(_, t)| t.rows() * t.cols())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Rebuild parameters from `(name, rows, cols, values)` blobs, validating
    /// every shape against the config. Unknown, missing, or misshapen blobs
    /// are checkpoint errors naming the blob.
    pub fn from_blobs(
        cfg: &ModelConfig,
        mut blobs: std::collections::HashMap<String, (usize, usize, Vec<f64>)>,
    ) -> Result<Self> {
        let template = ModelParams::init(cfg, 0)?;
        for (name, tensor) in template.named() {
            let (rows, cols, values) = blobs.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter blob {name:?}"))
            })?;
            if (rows, cols) != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "blob {name:?} has shape {rows}x{cols}, expected {}",
                    tensor.shape_string()
                )));
            }
            tensor.set_values(&values);
        }
        if let Some(name) = blobs.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter blob {name:?}"
            )));
        }
        Ok(template)
    }
}
