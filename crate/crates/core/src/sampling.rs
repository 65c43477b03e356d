//! Linear flow-matching path and the Euler ODE sampler.
//!
//! Time runs from `t = 1` (independent Gaussian priors per modality) to
//! `t = 0` (data), `x_t = (1 − t)·x0 + t·x1`.

use omninft_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{AttentionCache, DualStreamPolicy, ForwardOptions, ModelConfig, Stream};
use crate::seed::{self, derive_seed};

/// One joint sample: audio `[N_a × d]` and video `[N_v × d]` latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub audio: Tensor,
    pub video: Tensor,
}

impl LatentPair {
    pub fn new(audio: Tensor, video: Tensor) -> Self {
        Self { audio, video }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            audio: Tensor::zeros(&config.latent_shape(Stream::Audio)),
            video: Tensor::zeros(&config.latent_shape(Stream::Video)),
        }
    }

    /// Independent standard normal draws per modality.
    pub fn prior(config: &ModelConfig, audio_seed: u64, video_seed: u64) -> Self {
        Self {
            audio: seed::gaussian(
                &config.latent_shape(Stream::Audio),
                &mut seed::rng(audio_seed),
            ),
            video: seed::gaussian(
                &config.latent_shape(Stream::Video),
                &mut seed::rng(video_seed),
            ),
        }
    }

    pub fn get(&self, stream: Stream) -> &Tensor {
        match stream {
            Stream::Audio => &self.audio,
            Stream::Video => &self.video,
        }
    }

    fn zip(&self, other: &LatentPair, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<LatentPair> {
        Ok(LatentPair {
            audio: self.audio.zip_with(&other.audio, f)?,
            video: self.video.zip_with(&other.video, f)?,
        })
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        for s in [Stream::Audio, Stream::Video] {
            let expected = config.latent_shape(s);
            if self.get(s).shape() != expected {
                return Err(CoreError::Shape {
                    what: "latent",
                    expected: expected.to_vec(),
                    got: self.get(s).shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// `(1 − t)·x0 + t·x1`, per modality at a shared `t`.
pub fn interpolate(x0: &LatentPair, x1: &LatentPair, t: f64) -> Result<LatentPair> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::OutOfRange {
            what: "t",
            value: t,
            range: "[0, 1]",
        });
    }
    x0.zip(x1, |a, b| (1.0 - t) * a + t * b)
}

/// `x1 − x0`, the time derivative of the linear path.
pub fn velocity_target(x0: &LatentPair, x1: &LatentPair) -> Result<LatentPair> {
    x1.zip(x0, |b, a| b - a)
}

/// Which denoising steps feed the attention cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LateSteps {
    /// The final `n` steps.
    Last(usize),
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub late_steps: LateSteps,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 16,
            late_steps: LateSteps::Last(4),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps < 1 {
            return Err(CoreError::Config(
                "sampler.num_steps must be at least 1".into(),
            ));
        }
        let steps = self.late_step_set();
        if steps.is_empty() {
            return Err(CoreError::Config(
                "sampler.late_steps must be nonempty".into(),
            ));
        }
        if let Some(s) = steps.iter().find(|&&s| s >= self.num_steps) {
            return Err(CoreError::Config(format!(
                "sampler.late_steps entry {s} is not below num_steps ({})",
                self.num_steps
            )));
        }
        Ok(())
    }

    /// Sorted, deduplicated step indices in `0..num_steps`.
    pub fn late_step_set(&self) -> Vec<usize> {
        let mut v = match &self.late_steps {
            LateSteps::Last(n) => (self.num_steps.saturating_sub(*n)..self.num_steps).collect(),
            LateSteps::Explicit(v) => v.clone(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Seed of rollout `index`'s prior for `stream` under prompt `prompt`.
pub fn prior_seed(master: u64, prompt: usize, index: usize, stream: Stream) -> u64 {
    derive_seed(&[
        seed::tag::PRIOR,
        master,
        prompt as u64,
        index as u64,
        stream as u64,
    ])
}

/// Integrates `dx/dt = v(x, t)` from `prior` at `t = 1` to `t = 0` with
/// uniform Euler steps, both streams advancing together. V2A maps of deep
/// blocks are cached at the configured late steps when `opts.cache_attn` is set.
pub fn sample_ode_from(
    policy: &DualStreamPolicy,
    prompt: usize,
    prior: LatentPair,
    sampler: &SamplerConfig,
    opts: &ForwardOptions,
) -> Result<(LatentPair, AttentionCache)> {
    sampler.validate()?;
    prior.check_shapes(policy.config())?;
    let n = sampler.num_steps;
    let dt = 1.0 / n as f64;
    let late = sampler.late_step_set();
    let mut x = prior;
    let mut cache = AttentionCache::new();
    for k in 0..n {
        let t = 1.0 - k as f64 * dt;
        let cache_here = opts.cache_attn && late.binary_search(&k).is_ok();
        let step_opts = ForwardOptions {
            cache_attn: cache_here,
            ..opts.clone()
        };
        let (va, vv, maps) = policy.velocity(&x.audio, &x.video, t, prompt, &step_opts)?;
        let v = LatentPair::new(va, vv);
        x = x.zip(&v, |xi, vi| xi - dt * vi)?;
        for (block, map) in maps {
            cache.insert(block, k, map)?;
        }
    }
    Ok((x, cache))
}

/// [`sample_ode_from`] with the prior of rollout 0 derived from `sampler.seed`.
pub fn sample_ode(
    policy: &DualStreamPolicy,
    prompt: usize,
    sampler: &SamplerConfig,
    opts: &ForwardOptions,
) -> Result<(LatentPair, AttentionCache)> {
    let prior = rollout_prior(policy.config(), sampler.seed, prompt, 0);
    sample_ode_from(policy, prompt, prior, sampler, opts)
}

pub fn rollout_prior(config: &ModelConfig, master: u64, prompt: usize, index: usize) -> LatentPair {
    LatentPair::prior(
        config,
        prior_seed(master, prompt, index, Stream::Audio),
        prior_seed(master, prompt, index, Stream::Video),
    )
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub prompt: usize,
    pub index: usize,
    pub sample: LatentPair,
    pub cache: AttentionCache,
}

/// `group_size` independent rollouts for one prompt, evaluated in parallel
/// and returned in rollout-index order.
pub fn rollout_group(
    policy: &DualStreamPolicy,
    prompt: usize,
    group_size: usize,
    sampler: &SamplerConfig,
    opts: &ForwardOptions,
) -> Result<Vec<Rollout>> {
    if group_size < 1 {
        return Err(CoreError::Config("group size must be at least 1".into()));
    }
    (0..group_size)
        .into_par_iter()
        .map(|index| {
            let prior = rollout_prior(policy.config(), sampler.seed, prompt, index);
            let (sample, cache) = sample_ode_from(policy, prompt, prior, sampler, opts)?;
            Ok(Rollout {
                prompt,
                index,
                sample,
                cache,
            })
        })
        .collect()
}
