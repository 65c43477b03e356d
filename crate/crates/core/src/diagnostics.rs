//! Analyses behind the harness commands: finite-difference checks of the
//! composite loss, the isolated A2V surgery probe, KV-blocking ablations and
//! advantage-conflict statistics.

use omninft_autodiff::finite_diff::{central_difference, relative_error, DEFAULT_STEP};
use omninft_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::model::GradNormTable;
use crate::model::{
    BlockMask, Direction, DualStreamPolicy, ForwardOptions, KvAnchor, ModelConfig, ParamPath,
    Stream, SurgeryConfig,
};
use crate::modes::TrainingMode;
use crate::objective::{composite_loss, AdvantageSet, LossInput, NftConfig, RegionWeights};
use crate::rewards::{conflict_rate, evaluate_rewards, inject_conflict, PromptSpec};
use crate::sampling::{interpolate, rollout_group, LatentPair, SamplerConfig};
use crate::seed::{self, derive_seed, tag};
use crate::trainer::{iteration_prompts, probe_grad_norms, sampling_stage};

/// Relative-error floor for gradient checks.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// A freshly initialised policy with every parameter moved by `U(−scale, scale)`,
/// so zero-initialised tensors (output projections, biases) carry gradient too.
pub fn perturbed_policy(config: &ModelConfig, seed: u64, scale: f64) -> Result<DualStreamPolicy> {
    let mut policy = DualStreamPolicy::init(config, seed)?;
    let mut rng = seed::rng(derive_seed(&[tag::PROBE, seed]));
    for p in policy.params_mut() {
        for x in p.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
    Ok(policy)
}

/// Everything one composite-loss evaluation needs, drawn from a seed.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub policy: DualStreamPolicy,
    pub old_policy: DualStreamPolicy,
    pub prompt: usize,
    pub x0: LatentPair,
    pub x1: LatentPair,
    pub t: f64,
    pub r_v: f64,
    pub r_a: f64,
    pub weights: RegionWeights,
}

impl LossCase {
    /// Random policies, latents, probabilities and non-uniform region weights.
    pub fn random(config: &ModelConfig, seed: u64, lambda: f64) -> Result<Self> {
        let policy = perturbed_policy(config, seed, 0.5)?;
        let old_policy = perturbed_policy(config, seed.wrapping_add(1), 0.5)?;
        let mut rng = seed::rng(derive_seed(&[tag::PROBE, seed, 1]));
        let x0 = LatentPair::prior(config, rng.random(), rng.random());
        let x1 = LatentPair::prior(config, rng.random(), rng.random());
        let scores: Vec<f64> = (0..config.n_video_tokens).map(|_| rng.random()).collect();
        Ok(Self {
            policy,
            old_policy,
            prompt: rng.random_range(0..config.prompt_vocab),
            x0,
            x1,
            t: rng.random_range(0.1..0.9),
            r_v: rng.random(),
            r_a: rng.random(),
            weights: RegionWeights::from_scores(&scores, lambda),
        })
    }

    fn input(&self) -> LossInput<'_> {
        LossInput {
            prompt: self.prompt,
            x0: &self.x0,
            x1: &self.x1,
            t: self.t,
            r_v: self.r_v,
            r_a: self.r_a,
            weights: Some(&self.weights.weights),
        }
    }

    fn options(&self, surgery: bool) -> ForwardOptions {
        ForwardOptions {
            surgery: SurgeryConfig::from_model(self.policy.config(), surgery),
            ..ForwardOptions::default()
        }
    }

    /// Shallow A2V keys/values of the case's policy at the training input.
    pub fn kv_anchor(&self) -> Result<KvAnchor> {
        let xt = interpolate(&self.x0, &self.x1, self.t)?;
        let mut g = Graph::new();
        let bound = self.policy.bind(&mut g, false);
        let xa = g.constant(xt.audio);
        let xv = g.constant(xt.video);
        let out = self.policy.forward(
            &mut g,
            &bound,
            xa,
            xv,
            self.t,
            self.prompt,
            &self.options(true),
        )?;
        Ok(out.a2v_kv)
    }

    /// Total loss for `policy` (whose parameters replace the case's own).
    /// With `anchor`, surgery blocks use the frozen-blend surrogate whose
    /// ordinary derivative is the surgery gradient.
    pub fn loss(
        &self,
        policy: &DualStreamPolicy,
        nft: &NftConfig,
        surgery: bool,
        anchor: Option<&KvAnchor>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, false);
        let opts = ForwardOptions {
            kv_anchor: anchor.cloned(),
            ..self.options(surgery)
        };
        let terms = composite_loss(
            &mut g,
            policy,
            &bound,
            &self.old_policy,
            &self.input(),
            nft,
            &opts,
        )?;
        Ok(g.value(terms.total).item())
    }

    /// Backpropagated parameter gradients of the total loss.
    pub fn gradients(&self, nft: &NftConfig, surgery: bool) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.policy.bind(&mut g, true);
        let terms = composite_loss(
            &mut g,
            &self.policy,
            &bound,
            &self.old_policy,
            &self.input(),
            nft,
            &self.options(surgery),
        )?;
        Ok(g.backward(terms.total)?.into_tensors())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub surgery: bool,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
}

/// Compares backpropagated gradients of the total loss with central
/// differences over every parameter coordinate. With surgery on, the
/// differenced function freezes the detached share of the shallow A2V
/// keys/values at the case's parameters.
pub fn gradcheck_composite(
    case: &LossCase,
    nft: &NftConfig,
    surgery: bool,
) -> Result<GradcheckReport> {
    let analytic = case.gradients(nft, surgery)?;
    let layout = case.policy.layout();
    let mut report = GradcheckReport {
        surgery,
        coordinates: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    let anchor = if surgery {
        Some(case.kv_anchor()?)
    } else {
        None
    };
    let mut probe = case.policy.clone();
    for (i, info) in layout.params().iter().enumerate() {
        let base = case.policy.params()[i].data().to_vec();
        let mut failure = None;
        let numeric = central_difference(
            |x| {
                probe.params_mut()[i].data_mut().copy_from_slice(x);
                case.loss(&probe, nft, surgery, anchor.as_ref())
                    .unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    })
            },
            &base,
            DEFAULT_STEP,
        );
        probe.params_mut()[i].data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        for (&a, &n) in analytic[i].data().iter().zip(&numeric) {
            let err = relative_error(a, n, GRADCHECK_FLOOR);
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = info.name.clone();
            }
        }
        report.coordinates += base.len();
    }
    Ok(report)
}

/// Result of the isolated A2V probe at one detach ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryProbe {
    pub alpha: f64,
    /// Largest relative deviation of `g_on` from `(1 − α)·g_off` over the KV path.
    pub max_deviation: f64,
    pub kv_norm_off: f64,
    pub kv_norm_on: f64,
    /// `‖f(x)‖` change in the probe's forward output between surgery on and
    /// off; zero when the forward pass is untouched.
    pub forward_max_abs_diff: f64,
}

/// Parameters whose only route to the video output is a shallow A2V
/// key/value edge once V2A is fully masked: all audio-stream parameters plus
/// the shallow video cross K/V projections.
pub fn kv_path_params(policy: &DualStreamPolicy) -> Vec<usize> {
    let shallow = policy.config().shallow_boundary;
    policy
        .layout()
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p.stream == Stream::Audio
                || (p.path == ParamPath::CrossKv && p.block.is_some_and(|b| b < shallow))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Isolated A2V probe. V2A is masked everywhere and A2V from `L` on, so
/// audio reaches the video output only through shallow A2V keys/values.
/// The loss is a fixed weighted sum of squares of the video velocity.
pub fn surgery_probe(policy: &DualStreamPolicy, alpha: f64, seed: u64) -> Result<SurgeryProbe> {
    let cfg = policy.config();
    if cfg.shallow_boundary == 0 {
        return Err(CoreError::Config(
            "surgery probe needs model.shallow_boundary >= 1".into(),
        ));
    }
    let mut mask = BlockMask::all(Direction::V2A, cfg);
    mask.a2v.extend(cfg.shallow_boundary..cfg.blocks_video);
    let mut rng = seed::rng(derive_seed(&[tag::PROBE, seed, 2]));
    let x = LatentPair::prior(cfg, rng.random(), rng.random());
    let weights: Vec<f64> = (0..cfg.n_video_tokens * cfg.d_model)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let run = |enabled: bool| -> Result<(Vec<Tensor>, Tensor)> {
        let opts = ForwardOptions {
            surgery: SurgeryConfig {
                enabled,
                shallow_boundary: cfg.shallow_boundary,
                alpha_s: alpha,
            },
            mask: mask.clone(),
            cache_attn: false,
            kv_anchor: None,
        };
        let mut g = Graph::new();
        let bound = policy.bind(&mut g, true);
        let xa = g.constant(x.audio.clone());
        let xv = g.constant(x.video.clone());
        let out = policy.forward(&mut g, &bound, xa, xv, 0.5, 0, &opts)?;
        let loss = weighted_square(&mut g, out.v_video, &weights)?;
        let v = g.value(out.v_video).clone();
        Ok((g.backward(loss)?.into_tensors(), v))
    };
    let (off, v_off) = run(false)?;
    let (on, v_on) = run(true)?;
    let keep = 1.0 - alpha;
    let mut probe = SurgeryProbe {
        alpha,
        max_deviation: 0.0,
        kv_norm_off: 0.0,
        kv_norm_on: 0.0,
        forward_max_abs_diff: v_off
            .data()
            .iter()
            .zip(v_on.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    };
    for i in kv_path_params(policy) {
        probe.kv_norm_off += off[i].squared_norm();
        probe.kv_norm_on += on[i].squared_norm();
        for (&a, &b) in off[i].data().iter().zip(on[i].data()) {
            let expected = keep * a;
            let dev = if expected == 0.0 {
                if b == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                ((b - expected) / expected).abs()
            };
            probe.max_deviation = probe.max_deviation.max(dev);
        }
    }
    probe.kv_norm_off = probe.kv_norm_off.sqrt();
    probe.kv_norm_on = probe.kv_norm_on.sqrt();
    Ok(probe)
}

fn weighted_square(g: &mut Graph, v: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights.to_vec())?);
    let sq = g.mul(v, v)?;
    let weighted = g.mul(sq, w)?;
    Ok(g.sum(weighted))
}

/// Whether masking every cross-attention sublayer in `direction` makes the
/// receiving stream's velocity bitwise independent of the source stream's input.
pub fn blocking_invariance(
    policy: &DualStreamPolicy,
    direction: Direction,
    seed: u64,
) -> Result<bool> {
    let cfg = policy.config();
    let opts = ForwardOptions {
        mask: BlockMask::all(direction, cfg),
        ..ForwardOptions::default()
    };
    let mut rng = seed::rng(derive_seed(&[tag::PROBE, seed, 3]));
    let x = LatentPair::prior(cfg, rng.random(), rng.random());
    let y = LatentPair::prior(cfg, rng.random(), rng.random());
    let (perturbed_audio, perturbed_video) = match direction {
        Direction::V2A => (x.audio.clone(), y.video.clone()),
        Direction::A2V => (y.audio.clone(), x.video.clone()),
    };
    let (a0, v0, _) = policy.velocity(&x.audio, &x.video, 0.5, 0, &opts)?;
    let (a1, v1, _) = policy.velocity(&perturbed_audio, &perturbed_video, 0.5, 0, &opts)?;
    Ok(match direction {
        Direction::V2A => a0.bit_eq(&a1),
        Direction::A2V => v0.bit_eq(&v1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub direction: Direction,
    pub blocks: Vec<usize>,
    pub mean_sync: f64,
    /// `mean_sync − baseline`; negative means blocking hurt synchronization.
    pub delta: f64,
    /// Set when the range masks every block of the direction: the receiving
    /// stream's invariance to the other stream's input.
    pub invariance: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_sync: f64,
    pub rows: Vec<AblationRow>,
}

fn mean_sync(
    policy: &DualStreamPolicy,
    specs: &[PromptSpec],
    sampler: &SamplerConfig,
    group_size: usize,
    mask: &BlockMask,
) -> Result<f64> {
    let opts = ForwardOptions {
        mask: mask.clone(),
        ..ForwardOptions::default()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for spec in specs {
        for r in rollout_group(policy, spec.id, group_size, sampler, &opts)? {
            total += evaluate_rewards(&r.sample, spec)?.sync;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Empty("ablation prompts"));
    }
    Ok(total / count as f64)
}

/// Mean sync reward with cross-attention blocked on each range, against the
/// unmasked baseline over the same priors.
pub fn ablate_kv(
    policy: &DualStreamPolicy,
    specs: &[PromptSpec],
    sampler: &SamplerConfig,
    group_size: usize,
    direction: Direction,
    ranges: &[Vec<usize>],
) -> Result<AblationReport> {
    let cfg = policy.config();
    let baseline = mean_sync(policy, specs, sampler, group_size, &BlockMask::none())?;
    let full = BlockMask::all(direction, cfg);
    let rows = ranges
        .iter()
        .map(|blocks| {
            let mask = BlockMask::new(direction, blocks.iter().copied());
            mask.validate(cfg)?;
            let mean = if mask.is_empty() {
                baseline
            } else {
                mean_sync(policy, specs, sampler, group_size, &mask)?
            };
            let invariance = if mask == full {
                Some(blocking_invariance(policy, direction, sampler.seed)?)
            } else {
                None
            };
            Ok(AblationRow {
                direction,
                blocks: blocks.clone(),
                mean_sync: mean,
                delta: mean - baseline,
                invariance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        baseline_sync: baseline,
        rows,
    })
}

/// One rollout's per-reward video and audio advantages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictRow {
    pub group: usize,
    pub prompt: usize,
    pub rollout: usize,
    pub a_v: f64,
    pub a_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub rate: f64,
    pub rows: Vec<ConflictRow>,
}

impl ConflictReport {
    pub fn from_rows(rows: Vec<ConflictRow>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.a_v, r.a_a)).collect();
        Ok(Self {
            rate: conflict_rate(&pairs)?,
            rows,
        })
    }
}

/// Rolls out `groups` groups with `policy` (prompts cycle through `specs`),
/// applies conflict injection of strength `epsilon`, and reports how often
/// the video and audio advantages disagree in sign.
pub fn diagnose_conflict(
    policy: &DualStreamPolicy,
    specs: &[PromptSpec],
    config: &RunConfig,
    groups: usize,
    epsilon: f64,
) -> Result<ConflictReport> {
    if groups == 0 || specs.is_empty() {
        return Err(CoreError::Empty("conflict diagnosis groups"));
    }
    let nft = config.train.nft();
    let mut rows = Vec::with_capacity(groups * config.train.group_size);
    for group in 0..groups {
        let spec = &specs[group % specs.len()];
        let sampler = SamplerConfig {
            seed: derive_seed(&[tag::SAMPLE, config.sampler.seed, group as u64]),
            ..config.sampler.clone()
        };
        let rollouts = rollout_group(
            policy,
            spec.id,
            config.train.group_size,
            &sampler,
            &ForwardOptions::default(),
        )?;
        let rewards = rollouts
            .iter()
            .map(|r| {
                let clean = evaluate_rewards(&r.sample, spec)?;
                let s = derive_seed(&[
                    tag::CONFLICT,
                    config.sampler.seed,
                    group as u64,
                    r.index as u64,
                ]);
                inject_conflict(clean, epsilon, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let adv = AdvantageSet::routed(&rewards, &nft)?;
        rows.extend(adv.rollouts.iter().enumerate().map(|(j, a)| ConflictRow {
            group,
            prompt: spec.id,
            rollout: j,
            a_v: a.a_v,
            a_a: a.a_a,
        }));
    }
    ConflictReport::from_rows(rows)
}

/// Everything `gradcheck` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub model: ModelConfig,
    pub tolerance: f64,
    pub finite_difference: Vec<GradcheckReport>,
    /// Largest gradient magnitude of the total loss at `β = 0`; must be 0.
    pub beta_zero_max_grad: f64,
    pub probe: SurgeryProbe,
    pub probe_full_detach: SurgeryProbe,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.finite_difference
            .iter()
            .all(|r| r.max_rel_error <= self.tolerance)
            && self.beta_zero_max_grad == 0.0
            && self.probe.max_deviation <= 1e-10
            && self.probe_full_detach.kv_norm_on == 0.0
    }
}

/// Miniature model used by the gradient checks: 2 blocks per stream, width 8,
/// 4 video and 3 audio tokens. Heads, detach ratio and the shallow boundary
/// come from `base` where they fit.
pub fn miniature_model(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        blocks_audio: 2,
        blocks_video: 2,
        d_model: 8,
        heads: if 8 % base.heads == 0 { base.heads } else { 2 },
        n_audio_tokens: 3,
        n_video_tokens: 4,
        shallow_boundary: base.shallow_boundary.clamp(1, 2),
        detach_ratio: base.detach_ratio,
        prompt_vocab: 2,
    }
}

/// Finite-difference check of the composite loss with surgery off and on, the
/// β = 0 zero-gradient check, and the isolated surgery probe at the
/// configured ratio and at full detach.
pub fn run_gradcheck(config: &RunConfig, seed: u64) -> Result<GradcheckSummary> {
    let model = miniature_model(&config.model);
    let nft = config.train.nft();
    let case = LossCase::random(&model, seed, nft.lambda)?;
    let finite_difference = [false, true]
        .into_iter()
        .map(|surgery| gradcheck_composite(&case, &nft, surgery))
        .collect::<Result<Vec<_>>>()?;
    let zero_beta = NftConfig {
        beta: 0.0,
        ..nft.clone()
    };
    let mut beta_zero_max_grad = 0.0f64;
    for surgery in [false, true] {
        for g in case.gradients(&zero_beta, surgery)? {
            beta_zero_max_grad = g
                .data()
                .iter()
                .fold(beta_zero_max_grad, |m, x| m.max(x.abs()));
        }
    }
    Ok(GradcheckSummary {
        tolerance: 1e-4,
        finite_difference,
        beta_zero_max_grad,
        probe: surgery_probe(&case.policy, model.detach_ratio, seed)?,
        probe_full_detach: surgery_probe(&case.policy, 1.0, seed)?,
        model,
    })
}

/// Per-layer gradient norms on one sampled batch with surgery off and on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProfile {
    pub alpha_s: f64,
    pub shallow_boundary: usize,
    pub surgery_off: GradNormTable,
    pub surgery_on: GradNormTable,
    /// `(block, on/off)` for the shallow audio KV path, i.e. the video
    /// stream's cross K/V projections below the boundary.
    pub shallow_kv_ratio: Vec<(usize, f64)>,
}

/// Samples iteration 0 of `config` with `mode` from `policy` and profiles
/// the probe loss on that buffer with surgery off and on. `policy` also
/// serves as the old policy.
pub fn profile_gradients(
    config: &RunConfig,
    mode: &dyn TrainingMode,
    policy: &DualStreamPolicy,
) -> Result<GradientProfile> {
    config.validate()?;
    if policy.config() != &config.model {
        return Err(CoreError::Config(
            "checkpoint architecture differs from [model]".into(),
        ));
    }
    let specs = config.prompt_specs()?;
    let prompts = iteration_prompts(&specs, config.train.prompts_per_iteration, 0);
    let outcome = sampling_stage(policy, &prompts, config, mode, 0)?;
    let off = probe_grad_norms(policy, policy, &outcome.buffer, config, false)?;
    let on = probe_grad_norms(policy, policy, &outcome.buffer, config, true)?;
    let shallow_kv_ratio = (0..config.model.shallow_boundary)
        .filter_map(|l| {
            let a = off.get(Stream::Video, Some(l), ParamPath::CrossKv)?;
            let b = on.get(Stream::Video, Some(l), ParamPath::CrossKv)?;
            Some((l, if a > 0.0 { b / a } else { f64::NAN }))
        })
        .collect();
    Ok(GradientProfile {
        alpha_s: config.model.detach_ratio,
        shallow_boundary: config.model.shallow_boundary,
        surgery_off: off,
        surgery_on: on,
        shallow_kv_ratio,
    })
}
