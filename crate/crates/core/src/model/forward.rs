use std::collections::{BTreeMap, BTreeSet};

use omninft_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::attention::{a2v_cross_attention, attention, mean_over_heads};
use super::{BlockLayout, BoundParams, DualStreamPolicy, ModelConfig, Stream, StreamLayout};
use crate::error::{CoreError, Result};

/// Cross-attention direction, named by information flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Video queries attend to audio keys/values.
    A2V,
    /// Audio queries attend to video keys/values.
    V2A,
}

impl std::str::FromStr for Direction {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2v" => Ok(Direction::A2V),
            "v2a" => Ok(Direction::V2A),
            other => Err(CoreError::Config(format!(
                "unknown direction `{other}` (expected a2v or v2a)"
            ))),
        }
    }
}

/// Cross-attention sublayers to disable. A disabled sublayer adds nothing to
/// its residual stream.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockMask {
    pub a2v: BTreeSet<usize>,
    pub v2a: BTreeSet<usize>,
}

impl BlockMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(direction: Direction, blocks: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::default();
        m.set_mut(direction).extend(blocks);
        m
    }

    /// Every block of the receiving stream in `direction`.
    pub fn all(direction: Direction, config: &ModelConfig) -> Self {
        let receiver = match direction {
            Direction::A2V => Stream::Video,
            Direction::V2A => Stream::Audio,
        };
        Self::new(direction, 0..config.blocks(receiver))
    }

    fn set_mut(&mut self, direction: Direction) -> &mut BTreeSet<usize> {
        match direction {
            Direction::A2V => &mut self.a2v,
            Direction::V2A => &mut self.v2a,
        }
    }

    pub fn blocks(&self, direction: Direction) -> &BTreeSet<usize> {
        match direction {
            Direction::A2V => &self.a2v,
            Direction::V2A => &self.v2a,
        }
    }

    pub fn is_blocked(&self, direction: Direction, block: usize) -> bool {
        self.blocks(direction).contains(&block)
    }

    pub fn is_empty(&self) -> bool {
        self.a2v.is_empty() && self.v2a.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (dir, receiver) in [
            (Direction::A2V, Stream::Video),
            (Direction::V2A, Stream::Audio),
        ] {
            if let Some(&l) = self
                .blocks(dir)
                .iter()
                .find(|&&l| l >= config.blocks(receiver))
            {
                return Err(CoreError::Config(format!(
                    "mask block {l} out of range for {} stream with {} blocks",
                    receiver.as_str(),
                    config.blocks(receiver)
                )));
            }
        }
        Ok(())
    }
}

/// Layer-wise partial detach of A2V keys/values: ratio `alpha_s` below
/// `shallow_boundary`, zero from it on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurgeryConfig {
    pub enabled: bool,
    pub shallow_boundary: usize,
    pub alpha_s: f64,
}

impl SurgeryConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            shallow_boundary: 0,
            alpha_s: 0.0,
        }
    }

    pub fn from_model(config: &ModelConfig, enabled: bool) -> Self {
        Self {
            enabled,
            shallow_boundary: config.shallow_boundary,
            alpha_s: config.detach_ratio,
        }
    }

    pub fn alpha_at(&self, block: usize) -> f64 {
        if self.enabled && block < self.shallow_boundary {
            self.alpha_s
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_s) {
            return Err(CoreError::OutOfRange {
                what: "alpha_s",
                value: self.alpha_s,
                range: "[0, 1]",
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    pub surgery: SurgeryConfig,
    pub mask: BlockMask,
    /// Record head-averaged V2A maps of deep blocks.
    pub cache_attn: bool,
    /// Frozen shallow A2V keys/values. With surgery on, a block listed here
    /// uses `(1 − α)·K + α·K₀` in place of the partial detach: same value at
    /// the anchor point, same gradient, but an ordinary function that finite
    /// differences can check.
    pub kv_anchor: Option<KvAnchor>,
}

/// Shallow A2V `(keys, values)` per block, as recorded in [`ForwardOutput::a2v_kv`].
/// `(v_audio, v_video, cached V2A maps)` from a gradient-free forward.
pub type Velocity = (Tensor, Tensor, Vec<(usize, Tensor)>);

pub type KvAnchor = BTreeMap<usize, (Tensor, Tensor)>;

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            surgery: SurgeryConfig::disabled(),
            mask: BlockMask::none(),
            cache_attn: false,
            kv_anchor: None,
        }
    }
}

pub struct ForwardOutput {
    pub v_audio: Var,
    pub v_video: Var,
    /// `(block, [N_a × N_v] map)` for each deep V2A sublayer that ran, when caching.
    pub v2a_maps: Vec<(usize, Tensor)>,
    /// Source keys/values of every A2V sublayer that ran with surgery.
    pub a2v_kv: KvAnchor,
}

/// V2A attention maps keyed by `(block, denoising step)`. Rows are audio
/// queries, columns video keys; every row is a probability distribution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionCache {
    maps: BTreeMap<(usize, usize), Tensor>,
}

impl AttentionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, block: usize, step: usize, map: Tensor) -> Result<()> {
        if map.shape().len() != 2 {
            return Err(CoreError::Shape {
                what: "attention map",
                expected: vec![0, 0],
                got: map.shape().to_vec(),
            });
        }
        for i in 0..map.rows() {
            let row = map.row(i);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(CoreError::OutOfRange {
                    what: "attention row sum",
                    value: total,
                    range: "1 ± 1e-9",
                });
            }
        }
        self.maps.insert((block, step), map);
        Ok(())
    }

    pub fn get(&self, block: usize, step: usize) -> Option<&Tensor> {
        self.maps.get(&(block, step))
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.maps.keys().copied()
    }

    pub fn maps(&self) -> impl Iterator<Item = (&(usize, usize), &Tensor)> {
        self.maps.iter()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn affine_norm(g: &mut Graph, p: &BoundParams, h: Var, gain: usize, bias: usize) -> Result<Var> {
    let n = g.layer_norm(h)?;
    let n = g.mul_row(n, p.get(gain))?;
    Ok(g.add_row(n, p.get(bias))?)
}

/// Sinusoidal embedding of `t` as a `[1, d]` row.
pub(crate) fn timestep_features(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = 100.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::new(vec![1, d], out).expect("row shape")
}

fn embed_stream(
    g: &mut Graph,
    p: &BoundParams,
    s: &StreamLayout,
    x: Var,
    t_feat: Var,
    prompt: usize,
) -> Result<Var> {
    let h = g.matmul(x, p.get(s.in_weight))?;
    let h = g.add_row(h, p.get(s.in_bias))?;
    let h = g.add(h, p.get(s.pos_emb))?;
    let te = g.matmul(t_feat, p.get(s.time_w1))?;
    let te = g.add_row(te, p.get(s.time_b1))?;
    let te = g.silu(te);
    let te = g.matmul(te, p.get(s.time_w2))?;
    let te = g.add_row(te, p.get(s.time_b2))?;
    let pe = g.embedding(p.get(s.prompt_emb), &[prompt])?;
    let cond = g.add(te, pe)?;
    Ok(g.add_row(h, cond)?)
}

fn self_attention_sublayer(
    g: &mut Graph,
    p: &BoundParams,
    b: &BlockLayout,
    h: Var,
    heads: usize,
) -> Result<Var> {
    let n = affine_norm(g, p, h, b.self_ln_gain, b.self_ln_bias)?;
    let q = g.matmul(n, p.get(b.self_q))?;
    let k = g.matmul(n, p.get(b.self_k))?;
    let v = g.matmul(n, p.get(b.self_v))?;
    let a = attention(g, q, k, v, heads)?;
    let o = g.matmul(a.output, p.get(b.self_o))?;
    Ok(g.add(h, o)?)
}

fn feed_forward_sublayer(g: &mut Graph, p: &BoundParams, b: &BlockLayout, h: Var) -> Result<Var> {
    let n = affine_norm(g, p, h, b.ffn_ln_gain, b.ffn_ln_bias)?;
    let u = g.matmul(n, p.get(b.ffn_w1))?;
    let u = g.add_row(u, p.get(b.ffn_b1))?;
    let u = g.silu(u);
    let u = g.matmul(u, p.get(b.ffn_w2))?;
    let u = g.add_row(u, p.get(b.ffn_b2))?;
    Ok(g.add(h, u)?)
}

/// Residual update of `receiver` from cross-attention into `source`.
/// `surgery` carries the partial-detach ratio on the source keys/values and
/// an optional frozen anchor replacing the detach.
#[allow(clippy::too_many_arguments)]
fn cross_attention_sublayer(
    g: &mut Graph,
    p: &BoundParams,
    b: &BlockLayout,
    receiver: Var,
    source: Var,
    surgery: Option<(f64, Option<&(Tensor, Tensor)>)>,
    heads: usize,
    record: Option<&mut KvAnchor>,
    block: usize,
) -> Result<(Var, Vec<Var>)> {
    let n = affine_norm(g, p, receiver, b.cross_ln_gain, b.cross_ln_bias)?;
    let q = g.matmul(n, p.get(b.cross_q))?;
    let src = g.layer_norm(source)?;
    let k = g.matmul(src, p.get(b.cross_k))?;
    let v = g.matmul(src, p.get(b.cross_v))?;
    if let Some(rec) = record {
        rec.insert(block, (g.value(k).clone(), g.value(v).clone()));
    }
    let a = match surgery {
        Some((alpha, Some((k0, v0)))) => {
            let k = anchored(g, k, k0, alpha)?;
            let v = anchored(g, v, v0, alpha)?;
            attention(g, q, k, v, heads)?
        }
        Some((alpha, None)) => a2v_cross_attention(g, q, k, v, alpha, heads)?,
        None => attention(g, q, k, v, heads)?,
    };
    let o = g.matmul(a.output, p.get(b.cross_o))?;
    Ok((g.add(receiver, o)?, a.probs))
}

fn anchored(g: &mut Graph, x: Var, anchor: &Tensor, alpha: f64) -> Result<Var> {
    let live = g.scale(x, 1.0 - alpha);
    let frozen = g.constant(anchor.map(|a| alpha * a));
    Ok(g.add(live, frozen)?)
}

fn output_head(g: &mut Graph, p: &BoundParams, s: &StreamLayout, h: Var) -> Result<Var> {
    let n = affine_norm(g, p, h, s.out_ln_gain, s.out_ln_bias)?;
    let v = g.matmul(n, p.get(s.out_weight))?;
    Ok(g.add(v, p.get(s.out_bias))?)
}

fn check_shape(g: &Graph, x: Var, expected: [usize; 2], what: &'static str) -> Result<()> {
    if g.value(x).shape() != expected {
        return Err(CoreError::Shape {
            what,
            expected: expected.to_vec(),
            got: g.value(x).shape().to_vec(),
        });
    }
    Ok(())
}

impl DualStreamPolicy {
    /// Joint velocity prediction `(v_audio, v_video)` for latents at time `t`
    /// under prompt `prompt`, recorded on `g` with parameters `bound`.
    ///
    /// Blocks advance in lockstep. Within block `l` both streams first run
    /// self-attention; both cross-attention updates are then computed from
    /// those post-self-attention states; the feed-forward layers run last. A
    /// stream with fewer blocks keeps its final hidden state as the
    /// cross-attention source for the remaining blocks of the other stream.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x_audio: Var,
        x_video: Var,
        t: f64,
        prompt: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = self.config();
        let layout = self.layout();
        check_shape(g, x_audio, cfg.latent_shape(Stream::Audio), "audio latent")?;
        check_shape(g, x_video, cfg.latent_shape(Stream::Video), "video latent")?;
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::OutOfRange {
                what: "t",
                value: t,
                range: "[0, 1]",
            });
        }
        if prompt >= cfg.prompt_vocab {
            return Err(CoreError::InvalidPrompt {
                id: prompt,
                vocab: cfg.prompt_vocab,
            });
        }
        if bound.vars.len() != layout.params().len() {
            return Err(CoreError::LengthMismatch("bound parameters"));
        }
        opts.mask.validate(cfg)?;
        opts.surgery.validate()?;

        let t_feat = g.constant(timestep_features(t, cfg.d_model));
        let mut ha = embed_stream(g, bound, &layout.audio, x_audio, t_feat, prompt)?;
        let mut hv = embed_stream(g, bound, &layout.video, x_video, t_feat, prompt)?;
        let mut v2a_maps = Vec::new();
        let mut a2v_kv = KvAnchor::new();

        for l in 0..cfg.max_blocks() {
            let audio_block = layout.audio.blocks.get(l);
            let video_block = layout.video.blocks.get(l);
            if let Some(b) = audio_block {
                ha = self_attention_sublayer(g, bound, b, ha, cfg.heads)?;
            }
            if let Some(b) = video_block {
                hv = self_attention_sublayer(g, bound, b, hv, cfg.heads)?;
            }
            let mut next_hv = hv;
            if let Some(b) = video_block {
                if !opts.mask.is_blocked(Direction::A2V, l) {
                    let surgery = opts.surgery.enabled.then(|| {
                        let anchor = opts.kv_anchor.as_ref().and_then(|a| a.get(&l));
                        (opts.surgery.alpha_at(l), anchor)
                    });
                    let record = opts.surgery.enabled.then_some(&mut a2v_kv);
                    next_hv = cross_attention_sublayer(
                        g, bound, b, hv, ha, surgery, cfg.heads, record, l,
                    )?
                    .0;
                }
            }
            let mut next_ha = ha;
            if let Some(b) = audio_block {
                if !opts.mask.is_blocked(Direction::V2A, l) {
                    let (out, probs) =
                        cross_attention_sublayer(g, bound, b, ha, hv, None, cfg.heads, None, l)?;
                    if opts.cache_attn && l >= cfg.shallow_boundary {
                        v2a_maps.push((l, mean_over_heads(g, &probs)));
                    }
                    next_ha = out;
                }
            }
            ha = next_ha;
            hv = next_hv;
            if let Some(b) = audio_block {
                ha = feed_forward_sublayer(g, bound, b, ha)?;
            }
            if let Some(b) = video_block {
                hv = feed_forward_sublayer(g, bound, b, hv)?;
            }
        }

        let v_audio = output_head(g, bound, &layout.audio, ha)?;
        let v_video = output_head(g, bound, &layout.video, hv)?;
        Ok(ForwardOutput {
            v_audio,
            v_video,
            v2a_maps,
            a2v_kv,
        })
    }

    /// Gradient-free evaluation on a private graph: `(v_audio, v_video, maps)`.
    pub fn velocity(
        &self,
        x_audio: &Tensor,
        x_video: &Tensor,
        t: f64,
        prompt: usize,
        opts: &ForwardOptions,
    ) -> Result<Velocity> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xa = g.constant(x_audio.clone());
        let xv = g.constant(x_video.clone());
        let out = self.forward(&mut g, &bound, xa, xv, t, prompt, opts)?;
        Ok((
            g.value(out.v_audio).clone(),
            g.value(out.v_video).clone(),
            out.v2a_maps,
        ))
    }
}
