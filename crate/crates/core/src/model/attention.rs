use omninft_autodiff::{Graph, Tensor, Var};

use crate::error::{CoreError, Result};

pub struct AttentionOutput {
    /// Concatenated head outputs, `[queries, d]`, before the output projection.
    pub output: Var,
    /// Per-head attention probabilities, each `[queries, keys]`.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`, `v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<AttentionOutput> {
    let d = g.value(q).last_dim();
    if heads == 0
        || !d.is_multiple_of(heads)
        || g.value(k).last_dim() != d
        || g.value(v).shape() != g.value(k).shape()
    {
        return Err(CoreError::Shape {
            what: "attention operands",
            expected: g.value(q).shape().to_vec(),
            got: g.value(k).shape().to_vec(),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores)?;
        outs.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let output = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok(AttentionOutput { output, probs })
}

/// Video-query / audio-key-value attention with the audio keys and values
/// passed through `partial_detach(·, alpha)` first.
///
/// The forward value does not depend on `alpha`; only the gradient reaching
/// `k_audio` and `v_audio` is scaled by `1 − alpha`.
pub fn a2v_cross_attention(
    g: &mut Graph,
    q_video: Var,
    k_audio: Var,
    v_audio: Var,
    alpha: f64,
    heads: usize,
) -> Result<AttentionOutput> {
    let k = g.partial_detach(k_audio, alpha)?;
    let v = g.partial_detach(v_audio, alpha)?;
    attention(g, q_video, k, v, heads)
}

/// Head-averaged attention map.
pub(crate) fn mean_over_heads(g: &Graph, probs: &[Var]) -> Tensor {
    let first = g.value(probs[0]);
    let mut acc = Tensor::zeros(first.shape());
    for p in probs {
        for (a, x) in acc.data_mut().iter_mut().zip(g.value(*p).data()) {
            *a += x;
        }
    }
    let n = probs.len() as f64;
    acc.map(|x| x / n)
}
