//! Closed-form stand-ins for the video-quality, audio-quality and AV-sync
//! reward models, plus the prompt corpus that defines their targets.

use std::path::Path;

use omninft_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelConfig, Stream};
use crate::sampling::LatentPair;
use crate::seed::{self, derive_seed};

/// Target latents and sync pairing for one prompt id.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSpec {
    pub id: usize,
    pub video_target: Tensor,
    pub audio_target: Tensor,
    /// `(video token, audio token)` pairs that should co-activate.
    pub sync_pairing: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub video: f64,
    pub audio: f64,
    pub sync: f64,
}

impl RewardVector {
    pub fn is_finite(&self) -> bool {
        self.video.is_finite() && self.audio.is_finite() && self.sync.is_finite()
    }

    pub fn sum(&self) -> f64 {
        self.video + self.audio + self.sync
    }
}

fn mean_square_distance(x: &Tensor, target: &Tensor) -> Result<f64> {
    if x.shape() != target.shape() {
        return Err(CoreError::Shape {
            what: "reward input",
            expected: target.shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let n = x.numel().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `exp(−‖x_v − target‖² / (N_v·d))`, in `(0, 1]`.
pub fn reward_video(x_video: &Tensor, spec: &PromptSpec) -> Result<f64> {
    Ok((-mean_square_distance(x_video, &spec.video_target)?).exp())
}

/// `exp(−‖x_a − target‖² / (N_a·d))`, in `(0, 1]`.
pub fn reward_audio(x_audio: &Tensor, spec: &PromptSpec) -> Result<f64> {
    Ok((-mean_square_distance(x_audio, &spec.audio_target)?).exp())
}

/// Pearson correlation of `xs` and `ys`; 0 when either is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    // Spread at round-off level counts as constant.
    let flat = |ss: f64, vals: &[f64]| {
        let peak = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ss <= (1e-12 * peak).powi(2) * n
    };
    if flat(sxx, xs) || flat(syy, ys) {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

fn token_energies(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Correlation between the L2 energies of paired video and audio tokens.
pub fn reward_sync(x_audio: &Tensor, x_video: &Tensor, spec: &PromptSpec) -> Result<f64> {
    if spec.sync_pairing.len() < 2 {
        return Err(CoreError::TooFewPairs(spec.sync_pairing.len()));
    }
    let ev = token_energies(x_video);
    let ea = token_energies(x_audio);
    let mut xs = Vec::with_capacity(spec.sync_pairing.len());
    let mut ys = Vec::with_capacity(spec.sync_pairing.len());
    for &(i, j) in &spec.sync_pairing {
        let (v, a) = ev.get(i).zip(ea.get(j)).ok_or(CoreError::Shape {
            what: "sync pairing index",
            expected: vec![ev.len(), ea.len()],
            got: vec![i, j],
        })?;
        xs.push(*v);
        ys.push(*a);
    }
    Ok(pearson(&xs, &ys))
}

pub fn evaluate_rewards(sample: &LatentPair, spec: &PromptSpec) -> Result<RewardVector> {
    let r = RewardVector {
        video: reward_video(&sample.video, spec)?,
        audio: reward_audio(&sample.audio, spec)?,
        sync: reward_sync(&sample.audio, &sample.video, spec)?,
    };
    if !r.is_finite() {
        return Err(CoreError::NonFinite {
            what: "reward",
            context: format!("prompt {}", spec.id),
        });
    }
    Ok(r)
}

/// Adds `+ε·u` to the video reward and `−ε·u` to the audio reward with
/// `u = ±1` drawn from `seed`. The sum of the two is unchanged.
pub fn inject_conflict(rewards: RewardVector, epsilon: f64, seed: u64) -> Result<RewardVector> {
    if !(epsilon >= 0.0) {
        return Err(CoreError::OutOfRange {
            what: "conflict epsilon",
            value: epsilon,
            range: "[0, inf)",
        });
    }
    if epsilon == 0.0 {
        return Ok(rewards);
    }
    let u = if seed::rng(seed).random_bool(0.5) {
        1.0
    } else {
        -1.0
    };
    Ok(RewardVector {
        video: rewards.video + epsilon * u,
        audio: rewards.audio - epsilon * u,
        sync: rewards.sync,
    })
}

/// One corpus line: targets are regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub id: usize,
    pub seed: u64,
    pub pairs: Vec<(usize, usize)>,
}

/// Prompt corpus file: a TOML document of `[[prompt]]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCorpus {
    #[serde(rename = "prompt", default)]
    pub prompts: Vec<PromptEntry>,
}

impl PromptCorpus {
    /// `count` prompts with one sync pair per audio token (distinct video
    /// tokens while they last), all derived from `seed`.
    pub fn generate(count: usize, seed: u64, config: &ModelConfig) -> Self {
        let prompts = (0..count)
            .map(|id| {
                let s = derive_seed(&[seed, id as u64]);
                let mut rng = seed::rng(s);
                let mut video: Vec<usize> = (0..config.n_video_tokens).collect();
                video.shuffle(&mut rng);
                let pairs = (0..config.n_audio_tokens)
                    .map(|j| (video[j % video.len()], j))
                    .collect();
                PromptEntry { id, seed: s, pairs }
            })
            .collect();
        Self { prompts }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Corpus(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("corpus serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Materializes every prompt's targets for `config`.
    pub fn specs(&self, config: &ModelConfig, target_scale: f64) -> Result<Vec<PromptSpec>> {
        let mut specs: Vec<PromptSpec> = self
            .prompts
            .iter()
            .map(|e| prompt_spec(e, config, target_scale))
            .collect::<Result<_>>()?;
        specs.sort_by_key(|s| s.id);
        if specs.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(CoreError::Corpus("duplicate prompt id".into()));
        }
        Ok(specs)
    }
}

/// Builds targets whose paired tokens share an energy level, so an output that
/// matches both targets is also well synchronized.
pub fn prompt_spec(
    entry: &PromptEntry,
    config: &ModelConfig,
    target_scale: f64,
) -> Result<PromptSpec> {
    if entry.id >= config.prompt_vocab {
        return Err(CoreError::InvalidPrompt {
            id: entry.id,
            vocab: config.prompt_vocab,
        });
    }
    if entry.pairs.len() < 2 {
        return Err(CoreError::TooFewPairs(entry.pairs.len()));
    }
    for &(i, j) in &entry.pairs {
        if i >= config.n_video_tokens || j >= config.n_audio_tokens {
            return Err(CoreError::Corpus(format!(
                "prompt {}: pair ({i}, {j}) out of range",
                entry.id
            )));
        }
    }
    let d = config.d_model;
    let mut rng = seed::rng(entry.seed);
    let level =
        |rng: &mut seed::SeededRng| target_scale * (d as f64).sqrt() * rng.random_range(0.2..1.2);
    let video_levels: Vec<f64> = (0..config.n_video_tokens)
        .map(|_| level(&mut rng))
        .collect();
    let mut audio_levels: Vec<Option<f64>> = vec![None; config.n_audio_tokens];
    for &(i, j) in &entry.pairs {
        audio_levels[j].get_or_insert(video_levels[i]);
    }
    let audio_levels: Vec<f64> = audio_levels
        .into_iter()
        .map(|l| l.unwrap_or_else(|| level(&mut rng)))
        .collect();
    let directions = |n: usize, levels: &[f64], rng: &mut seed::SeededRng| {
        let mut t = seed::gaussian(&[n, d], rng);
        for (row, &lvl) in t.data_mut().chunks_mut(d).zip(levels) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x *= lvl / norm);
        }
        t
    };
    let video_target = directions(config.n_video_tokens, &video_levels, &mut rng);
    let audio_target = directions(config.n_audio_tokens, &audio_levels, &mut rng);
    Ok(PromptSpec {
        id: entry.id,
        video_target,
        audio_target,
        sync_pairing: entry.pairs.clone(),
    })
}

/// Conflict rate: share of samples whose video and audio advantages have opposite signs.
pub fn conflict_rate(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::Empty("conflict rate"));
    }
    let conflicts = pairs.iter().filter(|(v, a)| v * a < 0.0).count();
    Ok(conflicts as f64 / pairs.len() as f64)
}

impl PromptSpec {
    pub fn target(&self, stream: Stream) -> &Tensor {
        match stream {
            Stream::Audio => &self.audio_target,
            Stream::Video => &self.video_target,
        }
    }
}
