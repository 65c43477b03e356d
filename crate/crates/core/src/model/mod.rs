//! Toy dual-stream velocity predictor.
//!
//! Each stream (audio, video) is a pre-norm transformer. Every block runs
//! self-attention, then cross-attention into the other stream, then a
//! feed-forward layer. Video queries attending to audio keys/values form the
//! A2V path; audio queries attending to video form V2A.

mod attention;
mod checkpoint;
mod forward;
mod grad_norms;
mod layout;

use omninft_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seed;

pub use attention::{a2v_cross_attention, attention, AttentionOutput};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    AttentionCache, BlockMask, Direction, ForwardOptions, ForwardOutput, KvAnchor, SurgeryConfig,
    Velocity,
};
pub use grad_norms::{layer_grad_norms, GradNormEntry, GradNormTable};
pub use layout::{BlockLayout, Layout, ParamInfo, ParamInit, ParamPath, StreamLayout};

/// Hidden width multiplier of the feed-forward sublayer.
pub const FFN_MULT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Audio,
    Video,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Audio => "audio",
            Stream::Video => "video",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks_audio: usize,
    pub blocks_video: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_audio_tokens: usize,
    pub n_video_tokens: usize,
    /// First deep block; blocks below it are shallow.
    pub shallow_boundary: usize,
    /// Detach ratio applied to A2V keys/values in shallow blocks.
    pub detach_ratio: f64,
    pub prompt_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks_audio: 6,
            blocks_video: 6,
            d_model: 32,
            heads: 2,
            n_audio_tokens: 8,
            n_video_tokens: 16,
            shallow_boundary: 2,
            detach_ratio: 0.1,
            prompt_vocab: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("blocks_audio", self.blocks_audio),
            ("blocks_video", self.blocks_video),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("n_audio_tokens", self.n_audio_tokens),
            ("n_video_tokens", self.n_video_tokens),
            ("prompt_vocab", self.prompt_vocab),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CoreError::Config(format!(
                    "model.{name} must be at least 1"
                )));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(CoreError::Config(format!(
                "model.d_model ({}) must be divisible by model.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.shallow_boundary > self.min_blocks() {
            return Err(CoreError::Config(format!(
                "model.shallow_boundary ({}) exceeds the smaller block count ({})",
                self.shallow_boundary,
                self.min_blocks()
            )));
        }
        if !(0.0..=1.0).contains(&self.detach_ratio) {
            return Err(CoreError::Config(format!(
                "model.detach_ratio ({}) must lie in [0, 1]",
                self.detach_ratio
            )));
        }
        Ok(())
    }

    pub fn min_blocks(&self) -> usize {
        self.blocks_audio.min(self.blocks_video)
    }

    pub fn max_blocks(&self) -> usize {
        self.blocks_audio.max(self.blocks_video)
    }

    pub fn blocks(&self, stream: Stream) -> usize {
        match stream {
            Stream::Audio => self.blocks_audio,
            Stream::Video => self.blocks_video,
        }
    }

    pub fn tokens(&self, stream: Stream) -> usize {
        match stream {
            Stream::Audio => self.n_audio_tokens,
            Stream::Video => self.n_video_tokens,
        }
    }

    pub fn latent_shape(&self, stream: Stream) -> [usize; 2] {
        [self.tokens(stream), self.d_model]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameters of the dual-stream model, stored flat in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct DualStreamPolicy {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor>,
}

/// Parameters of one policy recorded on a graph, in [`Layout`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl DualStreamPolicy {
    /// Uniform `±1/√fan_in` weights from a seeded generator; unit norm gains,
    /// zero biases and zero output projections.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = seed::rng(seed::derive_seed(&[seed::tag::INIT, seed]));
        let params = layout
            .params()
            .iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                let data = match info.init {
                    ParamInit::Zeros => vec![0.0; n],
                    ParamInit::Ones => vec![1.0; n],
                    ParamInit::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                };
                Tensor::new(info.shape.clone(), data).expect("layout shape")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    /// Rebuilds a policy from parameter tensors, checking them against the layout.
    pub fn from_params(config: &ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if params.len() != layout.params().len() {
            return Err(CoreError::LengthMismatch("policy parameters"));
        }
        for (t, info) in params.iter().zip(layout.params()) {
            if t.shape() != info.shape.as_slice() {
                return Err(CoreError::Shape {
                    what: "policy parameter",
                    expected: info.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// `self ← eta·self + (1 − eta)·other`, elementwise over all parameters.
    pub fn ema_from(&mut self, other: &DualStreamPolicy, eta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(CoreError::OutOfRange {
                what: "eta",
                value: eta,
                range: "[0, 1]",
            });
        }
        if self.config != other.config {
            return Err(CoreError::LengthMismatch("ema parameter sets"));
        }
        for (old, new) in self.params.iter_mut().zip(&other.params) {
            for (o, n) in old.data_mut().iter_mut().zip(new.data()) {
                *o = eta * *o + (1.0 - eta) * n;
            }
        }
        Ok(())
    }
}
