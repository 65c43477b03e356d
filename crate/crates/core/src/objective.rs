//! Group advantages, modality routing, optimality probabilities, implicit
//! positive/negative policies, region weights and the composite loss.

use omninft_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{AttentionCache, BoundParams, DualStreamPolicy, ForwardOptions};
use crate::rewards::RewardVector;
use crate::sampling::{interpolate, velocity_target, LatentPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NftConfig {
    /// Mixing weight of the training policy in the implicit policies.
    pub beta: f64,
    /// Region reweighting strength.
    pub lambda: f64,
    /// Floor on the group standard deviation.
    pub z_floor: f64,
    /// Advantages are clipped to `[-clip, clip]` before mapping to `[0, 1]`.
    pub clip: f64,
}

impl Default for NftConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda: 1.5,
            z_floor: 1e-8,
            clip: 1.0,
        }
    }
}

impl NftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::Config(format!(
                "train.beta ({}) must be >= 0",
                self.beta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::Config(format!(
                "train.lambda ({}) must be >= 0",
                self.lambda
            )));
        }
        if !(self.z_floor > 0.0) || !(self.clip > 0.0) {
            return Err(CoreError::Config(
                "z_floor and clip must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `(raw − mean) / max(std, z_floor)` with population statistics over the group.
pub fn group_advantages(raw: &[f64], z_floor: f64) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= z_floor {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| (r - mean) / std).collect()
}

/// `(A_v + A_av, A_a + A_av)` elementwise.
pub fn route_advantages(a_v: &[f64], a_a: &[f64], a_av: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a_v.len() != a_a.len() || a_v.len() != a_av.len() {
        return Err(CoreError::LengthMismatch("route_advantages"));
    }
    let routed_v = a_v.iter().zip(a_av).map(|(v, s)| v + s).collect();
    let routed_a = a_a.iter().zip(a_av).map(|(a, s)| a + s).collect();
    Ok((routed_v, routed_a))
}

/// One advantage per rollout from the group-normalized sum of all raw rewards.
pub fn shared_advantage(rewards: &[RewardVector], z_floor: f64) -> Vec<f64> {
    let sums: Vec<f64> = rewards.iter().map(RewardVector::sum).collect();
    group_advantages(&sums, z_floor)
}

/// `1/2 + 1/2·clip(A, −c, c)/c`; with the default `c = 1` this is the usual
/// `1/2 + 1/2·clip(A, −1, 1)`.
pub fn optimality_probability(advantage: f64, clip: f64) -> f64 {
    0.5 + 0.5 * advantage.clamp(-clip, clip) / clip
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutAdvantage {
    pub a_v: f64,
    pub a_a: f64,
    pub a_av: f64,
    pub routed_v: f64,
    pub routed_a: f64,
    pub r_v: f64,
    pub r_a: f64,
}

/// Advantages of one group, in rollout order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub rollouts: Vec<RolloutAdvantage>,
}

impl AdvantageSet {
    /// Per-reward normalization followed by routing.
    pub fn routed(rewards: &[RewardVector], nft: &NftConfig) -> Result<Self> {
        let (a_v, a_a, a_av) = per_reward_advantages(rewards, nft.z_floor);
        let (routed_v, routed_a) = route_advantages(&a_v, &a_a, &a_av)?;
        Ok(Self::assemble(
            &a_v, &a_a, &a_av, &routed_v, &routed_a, nft.clip,
        ))
    }

    /// One shared advantage drives both branches.
    pub fn shared(rewards: &[RewardVector], nft: &NftConfig) -> Self {
        let (a_v, a_a, a_av) = per_reward_advantages(rewards, nft.z_floor);
        let shared = shared_advantage(rewards, nft.z_floor);
        Self::assemble(&a_v, &a_a, &a_av, &shared, &shared, nft.clip)
    }

    fn assemble(
        a_v: &[f64],
        a_a: &[f64],
        a_av: &[f64],
        routed_v: &[f64],
        routed_a: &[f64],
        clip: f64,
    ) -> Self {
        let rollouts = (0..a_v.len())
            .map(|j| RolloutAdvantage {
                a_v: a_v[j],
                a_a: a_a[j],
                a_av: a_av[j],
                routed_v: routed_v[j],
                routed_a: routed_a[j],
                r_v: optimality_probability(routed_v[j], clip),
                r_a: optimality_probability(routed_a[j], clip),
            })
            .collect();
        Self { rollouts }
    }
}

fn per_reward_advantages(rewards: &[RewardVector], z_floor: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let col = |f: fn(&RewardVector) -> f64| {
        let raw: Vec<f64> = rewards.iter().map(f).collect();
        group_advantages(&raw, z_floor)
    };
    (col(|r| r.video), col(|r| r.audio), col(|r| r.sync))
}

/// `v⁺ = (1 − β)·v_old + β·v_θ` and `v⁻ = (1 + β)·v_old − β·v_θ`.
pub fn implicit_policies(g: &mut Graph, v_old: Var, v_train: Var, beta: f64) -> Result<(Var, Var)> {
    if g.value(v_old).shape() != g.value(v_train).shape() {
        return Err(CoreError::Shape {
            what: "implicit policies",
            expected: g.value(v_old).shape().to_vec(),
            got: g.value(v_train).shape().to_vec(),
        });
    }
    let old_pos = g.scale(v_old, 1.0 - beta);
    let train_pos = g.scale(v_train, beta);
    let plus = g.add(old_pos, train_pos)?;
    let old_neg = g.scale(v_old, 1.0 + beta);
    let minus = g.sub(old_neg, train_pos)?;
    Ok((plus, minus))
}

/// Per-video-token weights `w_i = 1 + λ·ŝ_i` in `[1, 1 + λ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights {
    pub weights: Vec<f64>,
    pub lambda: f64,
}

impl RegionWeights {
    pub fn uniform(n: usize, lambda: f64) -> Self {
        Self {
            weights: vec![1.0; n],
            lambda,
        }
    }

    /// Min-max normalizes `scores` and maps them to `1 + λ·ŝ`. A spread below
    /// `1e-9` yields uniform weights.
    pub fn from_scores(scores: &[f64], lambda: f64) -> Self {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread = max - min;
        if !(spread >= 1e-9) {
            return Self::uniform(scores.len(), lambda);
        }
        let weights = scores
            .iter()
            .map(|s| 1.0 + lambda * ((s - min) / spread))
            .collect();
        Self { weights, lambda }
    }
}

/// Attention mass each video token receives from audio queries, averaged over
/// every cached `(block, step)` map.
pub fn region_scores(cache: &AttentionCache) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(CoreError::Empty("region scores: attention cache"));
    }
    let mut scores: Option<Vec<f64>> = None;
    for (_, map) in cache.maps() {
        let n_v = map.last_dim();
        let acc = scores.get_or_insert_with(|| vec![0.0; n_v]);
        if acc.len() != n_v {
            return Err(CoreError::LengthMismatch("attention maps"));
        }
        for j in 0..map.rows() {
            for (a, p) in acc.iter_mut().zip(map.row(j)) {
                *a += p;
            }
        }
    }
    let count = cache.len() as f64;
    Ok(scores
        .expect("nonempty")
        .into_iter()
        .map(|s| s / count)
        .collect())
}

pub fn region_weights(cache: &AttentionCache, lambda: f64) -> Result<RegionWeights> {
    Ok(RegionWeights::from_scores(&region_scores(cache)?, lambda))
}

/// Mean squared error per token (over the feature axis), as a `[tokens]` vector.
fn per_token_error(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.value(pred).last_dim() as f64;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let tok = g.sum_last(sq);
    Ok(g.scale(tok, 1.0 / d))
}

/// `Σ_i w_i e_i / Σ_i w_i`, or the plain token mean without weights.
fn weighted_error(g: &mut Graph, pred: Var, target: Var, weights: Option<&[f64]>) -> Result<Var> {
    let tok = per_token_error(g, pred, target)?;
    let n = g.value(tok).numel();
    match weights {
        Some(w) => {
            if w.len() != n {
                return Err(CoreError::LengthMismatch("region weights"));
            }
            let total: f64 = w.iter().sum();
            let wv = g.constant(Tensor::vector(w.to_vec()));
            let weighted = g.mul(tok, wv)?;
            let s = g.sum(weighted);
            Ok(g.scale(s, 1.0 / total))
        }
        None => Ok(g.mean(tok)?),
    }
}

/// `r·‖v⁺ − v‖²_w + (1 − r)·‖v⁻ − v‖²_w` for one branch.
pub fn nft_branch_loss(
    g: &mut Graph,
    v_train: Var,
    v_old: Var,
    target: Var,
    r: f64,
    beta: f64,
    weights: Option<&[f64]>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&r) {
        return Err(CoreError::OutOfRange {
            what: "optimality probability",
            value: r,
            range: "[0, 1]",
        });
    }
    let (plus, minus) = implicit_policies(g, v_old, v_train, beta)?;
    let pos = weighted_error(g, plus, target, weights)?;
    let neg = weighted_error(g, minus, target, weights)?;
    let pos = g.scale(pos, r);
    let neg = g.scale(neg, 1.0 - r);
    Ok(g.add(pos, neg)?)
}

/// Region-weighted video loss plus the unweighted audio loss.
pub fn total_loss(g: &mut Graph, video: Var, audio: Var) -> Result<Var> {
    Ok(g.add(video, audio)?)
}

/// One training element: a buffered sample, its optimality probabilities and
/// region weights, plus the fresh prior and time drawn for this step.
#[derive(Clone, Debug)]
pub struct LossInput<'a> {
    pub prompt: usize,
    pub x0: &'a LatentPair,
    pub x1: &'a LatentPair,
    pub t: f64,
    pub r_v: f64,
    pub r_a: f64,
    pub weights: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub video: Var,
    pub audio: Var,
    pub total: Var,
}

/// Builds the composite loss on `g`: the training policy (bound as `bound`)
/// runs with `opts` (gradient surgery lives there) and the old policy is
/// evaluated separately and enters as a constant.
pub fn composite_loss(
    g: &mut Graph,
    policy: &DualStreamPolicy,
    bound: &BoundParams,
    old_policy: &DualStreamPolicy,
    input: &LossInput<'_>,
    nft: &NftConfig,
    opts: &ForwardOptions,
) -> Result<LossTerms> {
    if !(input.t > 0.0 && input.t < 1.0) {
        return Err(CoreError::OutOfRange {
            what: "training t",
            value: input.t,
            range: "(0, 1)",
        });
    }
    let xt = interpolate(input.x0, input.x1, input.t)?;
    let v = velocity_target(input.x0, input.x1)?;
    let old_opts = ForwardOptions {
        cache_attn: false,
        kv_anchor: None,
        ..opts.clone()
    };
    let (old_a, old_v, _) =
        old_policy.velocity(&xt.audio, &xt.video, input.t, input.prompt, &old_opts)?;

    let xa = g.constant(xt.audio);
    let xv = g.constant(xt.video);
    let train_opts = ForwardOptions {
        cache_attn: false,
        ..opts.clone()
    };
    let out = policy.forward(g, bound, xa, xv, input.t, input.prompt, &train_opts)?;
    let old_a = g.constant(old_a);
    let old_v = g.constant(old_v);
    let target_a = g.constant(v.audio);
    let target_v = g.constant(v.video);
    let video = nft_branch_loss(
        g,
        out.v_video,
        old_v,
        target_v,
        input.r_v,
        nft.beta,
        input.weights,
    )?;
    let audio = nft_branch_loss(g, out.v_audio, old_a, target_a, input.r_a, nft.beta, None)?;
    let total = total_loss(g, video, audio)?;
    Ok(LossTerms {
        video,
        audio,
        total,
    })
}
