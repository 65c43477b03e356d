//! The training loop: sample with the old policy, score and route rewards,
//! fit the training policy on the buffer, then blend it into the old policy.

use std::time::Instant;

use omninft_autodiff::{Graph, Tensor};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::{
    layer_grad_norms, DualStreamPolicy, ForwardOptions, GradNormTable, SurgeryConfig,
};
use crate::modes::TrainingMode;
use crate::objective::{composite_loss, region_weights, LossInput, RegionWeights};
use crate::optim::Adam;
use crate::rewards::{conflict_rate, evaluate_rewards, inject_conflict, PromptSpec, RewardVector};
use crate::sampling::{rollout_group, LatentPair, SamplerConfig};
use crate::seed::{self, derive_seed, tag};

/// Training time is drawn from this open interval so both endpoints stay valid.
pub const TRAIN_T_RANGE: (f64, f64) = (0.001, 0.999);

/// Rollouts used for the gradient-norm probe.
const PROBE_ROLLOUTS: usize = 4;

/// One buffered rollout with everything the training stage needs.
#[derive(Clone, Debug)]
pub struct BufferEntry {
    pub prompt: usize,
    pub rollout: usize,
    pub sample: LatentPair,
    pub r_v: f64,
    pub r_a: f64,
    pub weights: RegionWeights,
    pub iteration: usize,
}

/// Output of one sampling stage. `rewards` are the clean rewards, before any
/// conflict injection; `pairs` holds each rollout's per-reward `(A_v, A_a)`.
#[derive(Clone, Debug, Default)]
pub struct SamplingOutcome {
    pub buffer: Vec<BufferEntry>,
    pub rewards: Vec<RewardVector>,
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mode: String,
    pub wall_time_s: f64,
    pub reward_video: Summary,
    pub reward_audio: Summary,
    pub reward_sync: Summary,
    pub loss_video: f64,
    pub loss_audio: f64,
    pub loss_total: f64,
    pub conflict_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norms: Option<GradNormTable>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub loss_video: f64,
    pub loss_audio: f64,
    pub loss_total: f64,
}

/// Sampler for group `slot` of `iteration`: the configured sampler with its
/// seed mixed with the master seed, iteration and slot, so every group draws
/// fresh priors even when a prompt repeats within an iteration.
pub fn iteration_sampler(config: &RunConfig, iteration: usize, slot: usize) -> SamplerConfig {
    SamplerConfig {
        seed: derive_seed(&[
            tag::SAMPLE,
            config.train.seed,
            config.sampler.seed,
            iteration as u64,
            slot as u64,
        ]),
        ..config.sampler.clone()
    }
}

/// Prompts visited at `iteration`, cycling through the corpus.
pub fn iteration_prompts(
    specs: &[PromptSpec],
    per_iteration: usize,
    iteration: usize,
) -> Vec<&PromptSpec> {
    (0..per_iteration)
        .map(|k| &specs[(iteration * per_iteration + k) % specs.len()])
        .collect()
}

/// Rolls out a group per prompt with the old policy, scores it, perturbs the
/// rewards when conflict injection is on, converts them to optimality
/// probabilities with `mode`, and attaches region weights.
pub fn sampling_stage(
    old_policy: &DualStreamPolicy,
    prompts: &[&PromptSpec],
    config: &RunConfig,
    mode: &dyn TrainingMode,
    iteration: usize,
) -> Result<SamplingOutcome> {
    let nft = config.train.nft();
    let opts = ForwardOptions {
        cache_attn: mode.region_weighting(),
        ..ForwardOptions::default()
    };
    let mut out = SamplingOutcome::default();
    for (slot, spec) in prompts.iter().enumerate() {
        let sampler = iteration_sampler(config, iteration, slot);
        let rollouts = rollout_group(
            old_policy,
            spec.id,
            config.train.group_size,
            &sampler,
            &opts,
        )?;
        let clean = rollouts
            .iter()
            .map(|r| evaluate_rewards(&r.sample, spec))
            .collect::<Result<Vec<_>>>()?;
        for (r, rollout) in clean.iter().zip(&rollouts) {
            if !r.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "reward",
                    context: format!(
                        "iteration {iteration}, prompt {}, rollout {}",
                        spec.id, rollout.index
                    ),
                });
            }
        }
        let noisy = clean
            .iter()
            .zip(&rollouts)
            .map(|(r, rollout)| {
                let s = derive_seed(&[
                    tag::CONFLICT,
                    config.train.seed,
                    iteration as u64,
                    slot as u64,
                    rollout.index as u64,
                ]);
                inject_conflict(*r, config.rewards.conflict_epsilon, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let advantages = mode.advantages(&noisy, &nft)?;
        let n_video = config.model.n_video_tokens;
        for (rollout, adv) in rollouts.into_iter().zip(&advantages.rollouts) {
            let weights = if mode.region_weighting() {
                region_weights(&rollout.cache, nft.lambda)?
            } else {
                RegionWeights::uniform(n_video, nft.lambda)
            };
            out.pairs.push((adv.a_v, adv.a_a));
            out.buffer.push(BufferEntry {
                prompt: spec.id,
                rollout: rollout.index,
                sample: rollout.sample,
                r_v: adv.r_v,
                r_a: adv.r_a,
                weights,
                iteration,
            });
        }
        out.rewards.extend(clean);
    }
    Ok(out)
}

/// Fresh prior and training time for buffer element `element`.
fn element_draw(
    config: &RunConfig,
    iteration: usize,
    element: usize,
    domain: u64,
) -> (LatentPair, f64) {
    let s = derive_seed(&[domain, config.train.seed, iteration as u64, element as u64]);
    let x1 = LatentPair::prior(&config.model, derive_seed(&[s, 0]), derive_seed(&[s, 1]));
    let t = seed::rng(derive_seed(&[s, 2])).random_range(TRAIN_T_RANGE.0..TRAIN_T_RANGE.1);
    (x1, t)
}

fn training_options(config: &RunConfig, surgery: bool) -> ForwardOptions {
    ForwardOptions {
        surgery: SurgeryConfig::from_model(&config.model, surgery),
        ..ForwardOptions::default()
    }
}

/// Loss values and parameter gradients for one buffer element.
fn element_gradients(
    policy: &DualStreamPolicy,
    old_policy: &DualStreamPolicy,
    entry: &BufferEntry,
    x1: &LatentPair,
    t: f64,
    config: &RunConfig,
    opts: &ForwardOptions,
) -> Result<([f64; 3], Vec<Tensor>)> {
    let nft = config.train.nft();
    let mut g = Graph::new();
    let bound = policy.bind(&mut g, true);
    let input = LossInput {
        prompt: entry.prompt,
        x0: &entry.sample,
        x1,
        t,
        r_v: entry.r_v,
        r_a: entry.r_a,
        weights: Some(&entry.weights.weights),
    };
    let terms = composite_loss(&mut g, policy, &bound, old_policy, &input, &nft, opts)?;
    let values = [
        g.value(terms.video).item(),
        g.value(terms.audio).item(),
        g.value(terms.total).item(),
    ];
    let context = || {
        format!(
            "iteration {}, prompt {}, rollout {}",
            entry.iteration, entry.prompt, entry.rollout
        )
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "loss",
            context: context(),
        });
    }
    let grads = g.backward(terms.total)?.into_tensors();
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(CoreError::NonFinite {
            what: "gradient",
            context: context(),
        });
    }
    Ok((values, grads))
}

/// One pass over the buffer in minibatches. Per-element gradients are
/// computed in parallel and averaged in buffer order, then Adam takes a step.
pub fn training_stage(
    policy: &mut DualStreamPolicy,
    old_policy: &DualStreamPolicy,
    optimizer: &mut Adam,
    buffer: &[BufferEntry],
    config: &RunConfig,
    mode: &dyn TrainingMode,
) -> Result<TrainStats> {
    let opts = training_options(config, mode.gradient_surgery());
    let mut sums = [0.0; 3];
    let mut offset = 0;
    for batch in buffer.chunks(config.train.minibatch_size) {
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, entry)| {
                let (x1, t) = element_draw(config, entry.iteration, offset + i, tag::TRAIN);
                element_gradients(policy, old_policy, entry, &x1, t, config, &opts)
            })
            .collect::<Result<Vec<_>>>()?;
        offset += batch.len();
        let scale = 1.0 / batch.len() as f64;
        let mut mean: Vec<Tensor> = policy
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        for (values, grads) in &results {
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            for (m, g) in mean.iter_mut().zip(grads) {
                for (a, b) in m.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
        optimizer.step(policy.params_mut(), &mean)?;
    }
    let n = buffer.len().max(1) as f64;
    Ok(TrainStats {
        loss_video: sums[0] / n,
        loss_audio: sums[1] / n,
        loss_total: sums[2] / n,
    })
}

/// `θ_old ← η·θ_old + (1 − η)·θ`.
pub fn ema_update(
    old_policy: &mut DualStreamPolicy,
    policy: &DualStreamPolicy,
    eta: f64,
) -> Result<()> {
    old_policy.ema_from(policy, eta)
}

/// Per-layer gradient norms of the mean composite loss over the first few
/// buffer entries, with draws fixed by the probe seed.
pub fn probe_grad_norms(
    policy: &DualStreamPolicy,
    old_policy: &DualStreamPolicy,
    buffer: &[BufferEntry],
    config: &RunConfig,
    surgery: bool,
) -> Result<GradNormTable> {
    let entries = &buffer[..buffer.len().min(PROBE_ROLLOUTS)];
    if entries.is_empty() {
        return Err(CoreError::Empty("gradient probe buffer"));
    }
    let opts = training_options(config, surgery);
    let nft = config.train.nft();
    layer_grad_norms(policy, |g, bound| {
        let mut total = None;
        for (i, entry) in entries.iter().enumerate() {
            let (x1, t) = element_draw(config, entry.iteration, i, tag::PROBE);
            let input = LossInput {
                prompt: entry.prompt,
                x0: &entry.sample,
                x1: &x1,
                t,
                r_v: entry.r_v,
                r_a: entry.r_a,
                weights: Some(&entry.weights.weights),
            };
            let terms = composite_loss(g, policy, bound, old_policy, &input, &nft, &opts)?;
            total = Some(match total {
                None => terms.total,
                Some(acc) => g.add(acc, terms.total)?,
            });
        }
        let total = total.expect("nonempty probe");
        Ok(g.scale(total, 1.0 / entries.len() as f64))
    })
}

/// Training and old policies plus the optimizer state.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub policy: DualStreamPolicy,
    pub old_policy: DualStreamPolicy,
    pub optimizer: Adam,
}

impl TrainerState {
    /// Both policies start from the same reference initialisation.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let policy = DualStreamPolicy::init(&config.model, config.train.seed)?;
        let optimizer = Adam::new(config.train.adam(), policy.params());
        Ok(Self {
            old_policy: policy.clone(),
            policy,
            optimizer,
        })
    }
}

/// Runs one full iteration and returns its metrics.
pub fn run_iteration(
    state: &mut TrainerState,
    specs: &[PromptSpec],
    config: &RunConfig,
    mode: &dyn TrainingMode,
    iteration: usize,
) -> Result<IterationMetrics> {
    let start = Instant::now();
    let prompts = iteration_prompts(specs, config.train.prompts_per_iteration, iteration);
    let outcome = sampling_stage(&state.old_policy, &prompts, config, mode, iteration)?;

    let interval = config.train.grad_norm_interval;
    let grad_norms = if interval > 0 && iteration.is_multiple_of(interval) {
        Some(probe_grad_norms(
            &state.policy,
            &state.old_policy,
            &outcome.buffer,
            config,
            mode.gradient_surgery(),
        )?)
    } else {
        None
    };

    let stats = training_stage(
        &mut state.policy,
        &state.old_policy,
        &mut state.optimizer,
        &outcome.buffer,
        config,
        mode,
    )?;
    ema_update(
        &mut state.old_policy,
        &state.policy,
        config.train.eta_at(iteration),
    )?;

    let column = |f: fn(&RewardVector) -> f64| outcome.rewards.iter().map(f).collect::<Vec<_>>();
    Ok(IterationMetrics {
        iteration,
        mode: mode.name().to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        reward_video: Summary::of(&column(|r| r.video)),
        reward_audio: Summary::of(&column(|r| r.audio)),
        reward_sync: Summary::of(&column(|r| r.sync)),
        loss_video: stats.loss_video,
        loss_audio: stats.loss_audio,
        loss_total: stats.loss_total,
        conflict_rate: conflict_rate(&outcome.pairs)?,
        grad_norms,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub state: TrainerState,
}

/// Runs `config.train.iterations` iterations, handing each record to
/// `on_record` as soon as it is produced (so callers can stream it to disk).
pub fn train<F>(config: &RunConfig, mode: &dyn TrainingMode, mut on_record: F) -> Result<RunOutcome>
where
    F: FnMut(&IterationMetrics) -> Result<()>,
{
    config.validate()?;
    let specs = config.prompt_specs()?;
    for spec in &specs {
        if spec.id >= config.model.prompt_vocab {
            return Err(CoreError::InvalidPrompt {
                id: spec.id,
                vocab: config.model.prompt_vocab,
            });
        }
    }
    let mut state = TrainerState::new(config)?;
    let mut metrics = Vec::with_capacity(config.train.iterations);
    for iteration in 0..config.train.iterations {
        let m = run_iteration(&mut state, &specs, config, mode, iteration)?;
        log::info!(
            "iter {iteration}: R_v {:.4} R_a {:.4} R_av {:.4} loss {:.5}",
            m.reward_video.mean,
            m.reward_audio.mean,
            m.reward_sync.mean,
            m.loss_total
        );
        on_record(&m)?;
        metrics.push(m);
    }
    Ok(RunOutcome { metrics, state })
}
