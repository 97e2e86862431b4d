//! The segmentation network: an encoder with hierarchical windowed
//! self-attention and a chain of refining decoders with cross-attention.
//!
//! Block `i` (1-based) of every stage runs a dilated convolution
//! feed-forward sublayer and an attention sublayer whose window and dilation
//! are both `2^i`, so early blocks see local context and late blocks see the
//! whole sequence. Each decoder consumes the previous stage's softmax
//! probabilities and feature stream and adds an attention correction scaled
//! by a geometrically decaying weight.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::ops::{
    add_scaled, affine, banded_attention, channel_dropout, concat_cols, dilated_conv1d,
    instance_norm, relu, row_softmax,
};
use crate::tensor::{Tape, Tensor, TensorError};

/// Convolution kernel width; every feed-forward sublayer uses 3 taps.
pub const KERNEL_SIZE: usize = 3;

/// Base of the per-block window/dilation growth (`2^i` at block `i`).
pub const WINDOW_BASE: usize = 2;

const NORM_EPS: f64 = 1e-5;

/// Decoder inputs must be probability rows; this is the normalization slack.
const PROB_ROW_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("block index is 1-based; got 0")]
    ZeroBlockIndex,
    #[error("block index {index} exceeds the maximum {max} (window would overflow)")]
    BlockIndexTooLarge { index: usize, max: usize },
    #[error("decoder index is 1-based; got 0")]
    ZeroDecoderIndex,
    #[error("feature dimension mismatch: model expects {expected}, input has {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("class count mismatch: model expects {expected}, input has {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("decoder input row {row} sums to {sum:.6}; rows must sum to 1 within 1e-4")]
    UnnormalizedProbabilities { row: usize, sum: f64 },
    #[error("anchor frame {frame} out of range for a {frames}-frame sequence")]
    AnchorOutOfRange { frame: usize, frames: usize },
    #[error("empty input: {0} needs at least one frame")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters. Serializable so a run can be configured
/// from JSON and snapshotted next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Blocks per stage (encoder and every decoder alike).
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
    /// Refinement stages after the encoder; 0 means encoder-only.
    #[serde(default = "default_num_decoders")]
    pub num_decoders: usize,
    /// Input feature dimension D.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Internal width d of every block.
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    /// Number of action classes C.
    pub num_classes: usize,
    /// Channel dropout rate applied to the raw input features while training.
    #[serde(default = "default_input_dropout")]
    pub input_dropout: f64,
    /// Geometric decay of the per-decoder attention weight; decoder k uses
    /// alpha_decay^(k-1).
    #[serde(default = "default_alpha_decay")]
    pub alpha_decay: f64,
    /// Weight of the smoothing loss relative to classification.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Growth base of window/dilation schedules; fixed at 2.
    #[serde(default = "default_window_base")]
    pub window_base: usize,
}

fn default_num_blocks() -> usize {
    9
}
fn default_num_decoders() -> usize {
    3
}
fn default_feature_dim() -> usize {
    2048
}
fn default_model_dim() -> usize {
    64
}
fn default_input_dropout() -> f64 {
    0.3
}
fn default_alpha_decay() -> f64 {
    0.5
}
fn default_lambda() -> f64 {
    0.25
}
fn default_window_base() -> usize {
    WINDOW_BASE
}

impl ModelConfig {
    /// Defaults everywhere except the two dataset-determined dimensions.
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            num_blocks: default_num_blocks(),
            num_decoders: default_num_decoders(),
            feature_dim,
            model_dim: default_model_dim(),
            num_classes,
            input_dropout: default_input_dropout(),
            alpha_decay: default_alpha_decay(),
            lambda: default_lambda(),
            window_base: default_window_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.num_blocks > MAX_BLOCK_INDEX {
            return fail(format!("num_blocks must be at most {MAX_BLOCK_INDEX}"));
        }
        if self.feature_dim == 0 || self.model_dim == 0 || self.num_classes == 0 {
            return fail("feature_dim, model_dim, and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return fail(format!("input_dropout must be in [0, 1); got {}", self.input_dropout));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return fail(format!("alpha_decay must be in (0, 1]; got {}", self.alpha_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be a non-negative real; got {}", self.lambda));
        }
        if self.window_base != WINDOW_BASE {
            return fail(format!("window_base is fixed at {WINDOW_BASE}; got {}", self.window_base));
        }
        Ok(())
    }
}

/// Largest supported block index, so `2^i` stays well inside usize range.
pub const MAX_BLOCK_INDEX: usize = 30;

/// Attention window (total width) of block `i`, 1-based: `2^i`.
pub fn window_schedule(block: usize) -> Result<usize> {
    if block == 0 {
        return Err(ModelError::ZeroBlockIndex);
    }
    if block > MAX_BLOCK_INDEX {
        return Err(ModelError::BlockIndexTooLarge {
            index: block,
            max: MAX_BLOCK_INDEX,
        });
    }
    Ok(WINDOW_BASE.pow(block as u32))
}

/// Convolution dilation of block `i`; locked to the window schedule.
pub fn dilation_schedule(block: usize) -> Result<usize> {
    window_schedule(block)
}

/// Attention weight of decoder `k`, 1-based: 1 for the first decoder, then
/// multiplied by `alpha_decay` per stage.
pub fn alpha_schedule(alpha_decay: f64, decoder: usize) -> Result<f64> {
    if decoder == 0 {
        return Err(ModelError::ZeroDecoderIndex);
    }
    if !(alpha_decay > 0.0 && alpha_decay <= 1.0) {
        return Err(ModelError::InvalidConfig(format!(
            "alpha_decay must be in (0, 1]; got {alpha_decay}"
        )));
    }
    Ok(alpha_decay.powi(decoder as i32 - 1))
}

/// Exact number of attention scores a full forward pass of one encoder
/// materializes: per block, each frame's window is clipped to the sequence,
/// so block `i` (half-width h = min(2^(i-1), T-1)) contributes
/// `T*(2h+1) - h*(h+1)`.
pub fn closed_form_score_count(frames: usize, num_blocks: usize) -> u64 {
    (1..=num_blocks)
        .map(|i| per_block_score_count(frames, i))
        .sum()
}

/// Closed-form clipped score count of a single block (see
/// [`closed_form_score_count`]).
pub fn per_block_score_count(frames: usize, block: usize) -> u64 {
    if frames == 0 {
        return 0;
    }
    let t = frames as u64;
    let half = ((1u64 << block) / 2).min(t - 1);
    t * (2 * half + 1) - half * (half + 1)
}

// One fully connected layer, applied frame-wise.
struct Linear<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: uniform_param(rng, d_in, d_out, d_in),
            bias: uniform_param(rng, 1, d_out, d_in),
        }
    }

    fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(affine(tape, x, &self.weight, &self.bias)?)
    }

    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Bounded uniform init: +-1/sqrt(fan_in), drawn in f64 so the same seed
/// produces the same weights regardless of the scalar type.
fn uniform_param<S: Scalar, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| S::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::param(rows, cols, values).expect("sized by construction")
}

/// Per-block attention instrumentation from one forward pass.
#[derive(Debug, Clone)]
pub struct BlockAttention<S> {
    /// The block's window size 2^i.
    pub window: usize,
    /// Attention scores actually computed (window clipped at bounds).
    pub scores_materialized: u64,
    /// Anchor frame's attention weights over all T frames, when requested.
    pub anchor_row: Option<Vec<S>>,
}

/// One encoder block: dilated-conv feed-forward, then windowed
/// self-attention, merged as `x + proj(f + attention(f))`.
pub struct EncoderBlock<S: Scalar> {
    window: usize,
    dilation: usize,
    conv_kernel: Tensor<S>,
    query: Linear<S>,
    key: Linear<S>,
    value: Linear<S>,
    out: Linear<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    fn init<R: Rng>(rng: &mut R, dim: usize, block_index: usize) -> Result<Self> {
        Ok(EncoderBlock {
            window: window_schedule(block_index)?,
            dilation: dilation_schedule(block_index)?,
            conv_kernel: uniform_param(rng, KERNEL_SIZE * dim, dim, KERNEL_SIZE * dim),
            query: Linear::init(rng, dim, dim),
            key: Linear::init(rng, dim, dim),
            value: Linear::init(rng, dim, dim),
            out: Linear::init(rng, dim, dim),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn forward(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        anchor: Option<usize>,
    ) -> Result<(Tensor<S>, BlockAttention<S>)> {
        let c = dilated_conv1d(tape, x, &self.conv_kernel, KERNEL_SIZE, self.dilation)?;
        let n = instance_norm(tape, &c, S::from_f64(NORM_EPS))?;
        let f = relu(tape, &n)?;
        let q = self.query.forward(tape, &f)?;
        let k = self.key.forward(tape, &f)?;
        let v = self.value.forward(tape, &f)?;
        let (a, info) = banded_attention(tape, &q, &k, &v, self.window, anchor)?;
        let merged = add_scaled(tape, &f, &a, S::one())?;
        let projected = self.out.forward(tape, &merged)?;
        let y = add_scaled(tape, x, &projected, S::one())?;
        Ok((
            y,
            BlockAttention {
                window: self.window,
                scores_materialized: info.scores_materialized,
                anchor_row: info.anchor_row,
            },
        ))
    }

    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.conv.kernel"), self.conv_kernel.clone()));
        self.query.visit(&format!("{prefix}.attn.query"), out);
        self.key.visit(&format!("{prefix}.attn.key"), out);
        self.value.visit(&format!("{prefix}.attn.value"), out);
        self.out.visit(&format!("{prefix}.out"), out);
    }
}

/// One decoder block. Query and key projections read the concatenation of
/// the external feature stream and the conv output (2d -> d); values come
/// from the conv output alone, so the attention result stays a convex
/// combination of this stage's own content.
pub struct DecoderBlock<S: Scalar> {
    window: usize,
    dilation: usize,
    conv_kernel: Tensor<S>,
    query: Linear<S>,
    key: Linear<S>,
    value: Linear<S>,
    out: Linear<S>,
}

impl<S: Scalar> DecoderBlock<S> {
    fn init<R: Rng>(rng: &mut R, dim: usize, block_index: usize) -> Result<Self> {
        Ok(DecoderBlock {
            window: window_schedule(block_index)?,
            dilation: dilation_schedule(block_index)?,
            conv_kernel: uniform_param(rng, KERNEL_SIZE * dim, dim, KERNEL_SIZE * dim),
            query: Linear::init(rng, 2 * dim, dim),
            key: Linear::init(rng, 2 * dim, dim),
            value: Linear::init(rng, dim, dim),
            out: Linear::init(rng, dim, dim),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        external: &Tensor<S>,
        alpha: f64,
    ) -> Result<Tensor<S>> {
        let c = dilated_conv1d(tape, x, &self.conv_kernel, KERNEL_SIZE, self.dilation)?;
        let n = instance_norm(tape, &c, S::from_f64(NORM_EPS))?;
        let f = relu(tape, &n)?;
        // With alpha exactly 0 the attention sublayer is skipped outright,
        // making the output bit-identical to an ablated network instead of
        // relying on `f + 0 * a` round-tripping through float arithmetic.
        let merged = if alpha == 0.0 {
            f.clone()
        } else {
            let mixed = concat_cols(tape, external, &f)?;
            let q = self.query.forward(tape, &mixed)?;
            let k = self.key.forward(tape, &mixed)?;
            let v = self.value.forward(tape, &f)?;
            let (a, _) = banded_attention(tape, &q, &k, &v, self.window, None)?;
            add_scaled(tape, &f, &a, S::from_f64(alpha))?
        };
        let projected = self.out.forward(tape, &merged)?;
        Ok(add_scaled(tape, x, &projected, S::one())?)
    }

    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.conv.kernel"), self.conv_kernel.clone()));
        self.query.visit(&format!("{prefix}.attn.query"), out);
        self.key.visit(&format!("{prefix}.attn.key"), out);
        self.value.visit(&format!("{prefix}.attn.value"), out);
        self.out.visit(&format!("{prefix}.out"), out);
    }
}

/// Output of one encoder pass.
pub struct EncoderOutput<S: Scalar> {
    /// Per-frame class logits, T x C.
    pub logits: Tensor<S>,
    /// Final block's T x d feature map, consumed by the first decoder.
    pub feature: Tensor<S>,
    /// Per-block attention instrumentation, in block order.
    pub blocks: Vec<BlockAttention<S>>,
}

pub struct Encoder<S: Scalar> {
    input: Linear<S>,
    blocks: Vec<EncoderBlock<S>>,
    classifier: Linear<S>,
    input_dropout: f64,
}

impl<S: Scalar> Encoder<S> {
    fn init<R: Rng>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let d = config.model_dim;
        let blocks = (1..=config.num_blocks)
            .map(|i| EncoderBlock::init(rng, d, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            input: Linear::init(rng, config.feature_dim, d),
            blocks,
            classifier: Linear::init(rng, d, config.num_classes),
            input_dropout: config.input_dropout,
        })
    }

    /// When `training`, channel dropout is applied to the raw features (the
    /// only use of `rng`); `anchor` captures that frame's attention row in
    /// every block.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        training: bool,
        rng: &mut R,
        anchor: Option<usize>,
    ) -> Result<EncoderOutput<S>> {
        let (frames, dim) = features.shape();
        if frames == 0 {
            return Err(ModelError::EmptyInput("encoder features"));
        }
        let expected = self.input.weight.rows();
        if dim != expected {
            return Err(ModelError::FeatureDimMismatch {
                expected,
                got: dim,
            });
        }
        if let Some(frame) = anchor {
            if frame >= frames {
                return Err(ModelError::AnchorOutOfRange { frame, frames });
            }
        }
        let dropped = channel_dropout(tape, features, self.input_dropout, training, rng)?;
        let mut x = self.input.forward(tape, &dropped)?;
        let mut infos = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, info) = block.forward(tape, &x, anchor)?;
            x = next;
            infos.push(info);
        }
        let logits = self.classifier.forward(tape, &x)?;
        Ok(EncoderOutput {
            logits,
            feature: x,
            blocks: infos,
        })
    }

    fn visit(&self, out: &mut Vec<(String, Tensor<S>)>) {
        self.input.visit("encoder.input", out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("encoder.block{}", i + 1), out);
        }
        self.classifier.visit("encoder.classifier", out);
    }
}

pub struct Decoder<S: Scalar> {
    input: Linear<S>,
    blocks: Vec<DecoderBlock<S>>,
    classifier: Linear<S>,
}

impl<S: Scalar> Decoder<S> {
    fn init<R: Rng>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let d = config.model_dim;
        let blocks = (1..=config.num_blocks)
            .map(|i| DecoderBlock::init(rng, d, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            input: Linear::init(rng, config.num_classes, d),
            blocks,
            classifier: Linear::init(rng, d, config.num_classes),
        })
    }

    /// Refines `probs` (the previous stage's softmax output, T x C) against
    /// `external` (the previous stage's feature stream, T x d), with the
    /// attention correction scaled by `alpha`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        probs: &Tensor<S>,
        external: &Tensor<S>,
        alpha: f64,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let (frames, classes) = probs.shape();
        if frames == 0 {
            return Err(ModelError::EmptyInput("decoder probabilities"));
        }
        let expected = self.input.weight.rows();
        if classes != expected {
            return Err(ModelError::ClassCountMismatch {
                expected,
                got: classes,
            });
        }
        {
            let values = probs.values();
            for row in 0..frames {
                let sum: f64 = values[row * classes..(row + 1) * classes]
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .sum();
                if (sum - 1.0).abs() > PROB_ROW_TOLERANCE {
                    return Err(ModelError::UnnormalizedProbabilities { row, sum });
                }
            }
        }
        let mut x = self.input.forward(tape, probs)?;
        for block in &self.blocks {
            x = block.forward(tape, &x, external, alpha)?;
        }
        let logits = self.classifier.forward(tape, &x)?;
        Ok((logits, x))
    }

    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.input.visit(&format!("{prefix}.input"), out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{}", i + 1), out);
        }
        self.classifier.visit(&format!("{prefix}.classifier"), out);
    }
}

/// One named stage of predictions: the encoder, then each decoder in chain
/// order.
pub struct StagePrediction<S: Scalar> {
    pub name: String,
    /// Raw T x C logits (softmax is applied where probabilities are needed).
    pub logits: Tensor<S>,
}

/// Everything a full forward pass produces.
pub struct ModelOutput<S: Scalar> {
    /// Stage 0 is the encoder; stages 1..=num_decoders are the decoders.
    pub stages: Vec<StagePrediction<S>>,
    /// Attention instrumentation of the encoder's blocks.
    pub encoder_blocks: Vec<BlockAttention<S>>,
}

impl<S: Scalar> ModelOutput<S> {
    /// Logits of the last stage — the model's actual prediction.
    pub fn final_logits(&self) -> &Tensor<S> {
        &self.stages.last().expect("at least the encoder stage").logits
    }
}

/// Per-frame argmax over a logits (or probability) matrix; ties take the
/// lowest class index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let (rows, cols) = logits.shape();
    let values = logits.values();
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// The full encoder-decoder network.
pub struct Model<S: Scalar> {
    config: ModelConfig,
    encoder: Encoder<S>,
    decoders: Vec<Decoder<S>>,
}

impl<S: Scalar> Model<S> {
    /// Fresh network with uniform(+-1/sqrt(fan_in)) weights. Parameter
    /// creation order is fixed, so one seed gives one bit-exact
    /// initialization.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(rng, &config)?;
        let decoders = (0..config.num_decoders)
            .map(|_| Decoder::init(rng, &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder<S> {
        &self.encoder
    }

    pub fn decoders(&self) -> &[Decoder<S>] {
        &self.decoders
    }

    /// Stage count of a forward pass: the encoder plus every decoder.
    pub fn num_stages(&self) -> usize {
        1 + self.decoders.len()
    }

    /// Runs the encoder, then chains each decoder on the softmax of the
    /// previous stage's logits and the previous stage's feature stream.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        features: &Tensor<S>,
        training: bool,
        rng: &mut R,
        anchor: Option<usize>,
    ) -> Result<ModelOutput<S>> {
        let encoded = self.encoder.forward(tape, features, training, rng, anchor)?;
        let mut stages = vec![StagePrediction {
            name: "encoder".to_string(),
            logits: encoded.logits,
        }];
        let mut feature = encoded.feature;
        for (k, decoder) in self.decoders.iter().enumerate() {
            let alpha = alpha_schedule(self.config.alpha_decay, k + 1)?;
            let probs = row_softmax(tape, &stages.last().expect("nonempty").logits)?;
            let (logits, next_feature) = decoder.forward(tape, &probs, &feature, alpha)?;
            stages.push(StagePrediction {
                name: format!("decoder{}", k + 1),
                logits,
            });
            feature = next_feature;
        }
        Ok(ModelOutput {
            stages,
            encoder_blocks: encoded.blocks,
        })
    }

    /// All parameter tensors with their canonical names, in a fixed order
    /// (the checkpoint and optimizer orders).
    pub fn parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.encoder.visit(&mut out);
        for (k, decoder) in self.decoders.iter().enumerate() {
            decoder.visit(&format!("decoder{}", k + 1), &mut out);
        }
        out
    }

    /// Clears accumulated gradients on every parameter.
    pub fn zero_grads(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}
