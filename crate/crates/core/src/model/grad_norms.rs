use std::collections::BTreeMap;

use omninft_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{BoundParams, DualStreamPolicy, Layout, ParamPath, Stream};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormEntry {
    pub stream: Stream,
    /// `None` for parameters outside the transformer blocks.
    pub block: Option<usize>,
    pub path: ParamPath,
    pub norm: f64,
}

/// L2 gradient norms grouped by `(stream, block, path)`. The groups partition
/// the parameters, so their squared norms sum to `total²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormTable {
    pub entries: Vec<GradNormEntry>,
    pub total: f64,
}

impl GradNormTable {
    pub fn from_gradients(layout: &Layout, grads: &[Tensor]) -> Self {
        let mut groups: BTreeMap<(Stream, Option<usize>, ParamPath), f64> = BTreeMap::new();
        let mut total = 0.0;
        for (info, g) in layout.params().iter().zip(grads) {
            let sq = g.squared_norm();
            *groups
                .entry((info.stream, info.block, info.path))
                .or_default() += sq;
            total += sq;
        }
        let entries = groups
            .into_iter()
            .map(|((stream, block, path), sq)| GradNormEntry {
                stream,
                block,
                path,
                norm: sq.sqrt(),
            })
            .collect();
        Self {
            entries,
            total: total.sqrt(),
        }
    }

    pub fn get(&self, stream: Stream, block: Option<usize>, path: ParamPath) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.stream == stream && e.block == block && e.path == path)
            .map(|e| e.norm)
    }
}

/// Backpropagates the loss built by `loss_fn` on a fresh graph with `policy`
/// bound as trainable, and groups the parameter gradients.
pub fn layer_grad_norms<F>(policy: &DualStreamPolicy, loss_fn: F) -> Result<GradNormTable>
where
    F: FnOnce(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = policy.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bound)?;
    let grads = g.backward(loss)?.into_tensors();
    Ok(GradNormTable::from_gradients(policy.layout(), &grads))
}
