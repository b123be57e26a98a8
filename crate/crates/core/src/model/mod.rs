//! The spatio-temporal transformer, its vanilla and full-attention variants,
//! autoregressive rollout and attention export.

mod attention;
mod bench;
mod forward;
mod params;
mod rollout;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{dump_attention, AttentionMap, AttentionMaps, MapKind};
pub use bench::{bench_grid, default_bench_grid, predict_workspace, BenchConfig, BenchRow, BenchStatus};
pub use forward::{
    attention_block, embed_joints, forward_on_tape, positional_encoding, spatial_attention, temporal_attention,
    AttentionParams, LayerTrace, Mode, Trace,
};
pub use params::{BoundParams, ModelParameters};
pub use rollout::{project_frames, rollout};

use ndtensor::{Tape, Tensor, TensorError};
use rand::RngCore;

use crate::motiondata::ROT_DIM;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("cannot project prediction onto SO(3): {0}")]
    Projection(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Normalizer applied to attention scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Softmax,
    /// ReLU, then divide by the row sum.
    SumNormalize,
}

/// Which spatial projections are per-joint and which are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialSharing {
    /// Per-joint queries, shared keys and values.
    QuerySeparate,
    AllSeparate,
    AllShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Decoupled temporal and spatial attention.
    St,
    /// Temporal attention over whole-pose vectors.
    Vanilla1d,
    /// Causal attention over all joint-time tokens.
    Full2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub joints: usize,
    pub joint_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_size: usize,
    pub window: usize,
    pub dropout: f64,
    pub tau: TauMode,
    pub spatial_sharing: SpatialSharing,
    pub variant: Variant,
    /// Separate feed-forward and layer norm per branch, summed afterwards.
    pub ff_per_branch: bool,
}

impl ModelConfig {
    /// The large-dataset setting: 8 blocks, 8 heads, 128-dim embeddings,
    /// 256-wide feed-forward, dropout 0.1 and 120-frame windows.
    pub fn large(joints: usize) -> Self {
        Self {
            joints,
            joint_dim: ROT_DIM,
            embed_dim: 128,
            layers: 8,
            heads: 8,
            ff_size: 256,
            window: 120,
            dropout: 0.1,
            tau: TauMode::Softmax,
            spatial_sharing: SpatialSharing::QuerySeparate,
            variant: Variant::St,
            ff_per_branch: false,
        }
    }

    /// Small setting used for desk-scale experiments.
    pub fn tiny(joints: usize) -> Self {
        Self {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            ff_size: 32,
            window: 32,
            dropout: 0.0,
            ..Self::large(joints)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.joints == 0 || self.layers == 0 || self.window == 0 || self.ff_size == 0 {
            return fail("joints, layers, window and ff_size must be positive".into());
        }
        if self.joint_dim != ROT_DIM {
            return fail(format!("joint_dim must be {ROT_DIM} (rotation matrices), got {}", self.joint_dim));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embedding size {} must be evenly divisible by the number of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim % 2 != 0 {
            return fail(format!("embedding size {} must be even", self.embed_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Tokens per frame seen by the attention layers.
    pub(crate) fn token_joints(&self) -> usize {
        match self.variant {
            Variant::Vanilla1d => 1,
            _ => self.joints,
        }
    }

    /// Input width of each token.
    pub(crate) fn token_dim(&self) -> usize {
        match self.variant {
            Variant::Vanilla1d => self.joints * self.joint_dim,
            _ => self.joint_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Query-key pairs scored per sample and layer for a `frames`-long input.
    pub fn scores_per_layer(&self, frames: usize) -> u64 {
        let (n, t) = (self.joints as u64, frames as u64);
        match self.variant {
            Variant::St => n * t * (t + n),
            Variant::Vanilla1d => t * t,
            Variant::Full2d => (n * t) * (n * t),
        }
    }
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters<f32>,
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `B × T × N × 9`; position `t` predicts frame `t + 1`.
    pub poses: Tensor<f32>,
    pub maps: Option<AttentionMaps>,
    /// Scored query-key pairs per sample, one entry per layer.
    pub score_counts: Vec<u64>,
    /// Values held by the forward tape.
    pub workspace_elements: usize,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let params = ModelParameters::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Forward pass on `B × T × N × 9` windows.
    pub fn forward(&self, input: &Tensor<f32>, mode: Mode<'_>, capture_maps: bool) -> Result<Prediction> {
        self.forward_with_budget(input, mode, capture_maps, None)
    }

    /// As [`Model::forward`], failing with a budget error before allocating
    /// more than `budget` tape elements.
    pub fn forward_with_budget(
        &self,
        input: &Tensor<f32>,
        mode: Mode<'_>,
        capture_maps: bool,
        budget: Option<usize>,
    ) -> Result<Prediction> {
        let mut tape = match budget {
            Some(b) => Tape::with_budget(b),
            None => Tape::new(),
        };
        let bound = self.params.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let trace = forward_on_tape(&mut tape, &self.config, &bound, x, mode)?;
        let maps = capture_maps.then(|| AttentionMaps::from_trace(&tape, &trace));
        Ok(Prediction {
            poses: tape.value(trace.prediction).clone(),
            maps,
            score_counts: trace.layers.iter().map(|l| l.scores_per_sample).collect(),
            workspace_elements: tape.workspace_elements(),
        })
    }

    /// Writes the configuration as one JSON line followed by the `STT1` weights.
    pub fn write_checkpoint<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_string(&self.config).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        self.params.write(&mut w)?;
        Ok(())
    }

    pub fn read_checkpoint<R: std::io::Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Format("missing configuration header".into()))?;
        let config: ModelConfig =
            serde_json::from_slice(&bytes[..split]).map_err(|e| ModelError::Format(format!("header: {e}")))?;
        config.validate()?;
        let params = ModelParameters::read(&bytes[split + 1..], &config)?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
