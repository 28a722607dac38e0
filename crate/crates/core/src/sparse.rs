//! High-precision attention over the keys that survive filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{coverage, pruning_ratio, select_traced, topk_select, FilterConfig, KeyIndexSet, SelectionTrace};
use crate::quant::{quantize_int16, QuantizedMatrix};
use crate::tensor::{attend_dense_head, scaled_dot, scaled_scores, softmax, split_heads, weighted_sum, Matrix, SoftmaxMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub per_head_pruning_ratio: Vec<f64>,
    /// Mean top-k coverage over the pruned heads; `None` when no head was pruned.
    pub mean_coverage: Option<f64>,
    /// Per head `|union of selections| / n`, averaged over heads.
    pub keys_touched_fraction: f64,
}

/// `softmax(q . K'^T / sqrt(d)) . V'` over the gathered rows `idx`, with K' and
/// V' dequantized from the 16-bit words.
pub fn sparse_attend_row(
    q: &[f64],
    k: &QuantizedMatrix,
    v: &QuantizedMatrix,
    idx: &KeyIndexSet,
    head_dim: usize,
    mode: SoftmaxMode,
) -> Result<Vec<f64>> {
    if k.rows() != v.rows() {
        return Err(Error::Shape("K and V row counts differ".into()));
    }
    if q.len() != k.cols() {
        return Err(Error::Shape(format!(
            "query has {} features, keys have {}",
            q.len(),
            k.cols()
        )));
    }
    if idx.last() >= k.rows() {
        return Err(Error::InvalidArgument(format!(
            "key {} beyond {} rows",
            idx.last(),
            k.rows()
        )));
    }
    let keys: Vec<Vec<f64>> = idx.iter().map(|j| k.dequantized_row(j)).collect();
    let values: Vec<Vec<f64>> = idx.iter().map(|j| v.dequantized_row(j)).collect();
    let scores: Vec<f64> = keys.iter().map(|kr| scaled_dot(q, kr, head_dim)).collect();
    let probs = softmax(&scores, mode)?;
    Ok(weighted_sum(&probs, values.iter().map(Vec::as_slice), v.cols()))
}

/// Output of one filtered head together with the per-query selection traces.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome {
    pub output: Matrix,
    pub traces: Vec<SelectionTrace>,
    pub pruning_ratio: f64,
    /// Mean per-query coverage of the equally sized float top-k.
    pub coverage: f64,
    pub keys_touched_fraction: f64,
    pub pruned: bool,
}

impl HeadOutcome {
    pub fn selections(&self) -> Vec<KeyIndexSet> {
        self.traces.iter().map(|t| t.selected.clone()).collect()
    }
}

fn union_len(selections: impl Iterator<Item = impl AsRef<KeyIndexSet>>, n: usize) -> usize {
    let mut seen = vec![false; n];
    for s in selections {
        for j in s.as_ref().iter() {
            seen[j] = true;
        }
    }
    seen.iter().filter(|&&b| b).count()
}

impl AsRef<KeyIndexSet> for SelectionTrace {
    fn as_ref(&self) -> &KeyIndexSet {
        &self.selected
    }
}

/// Filters and attends every query of one head.
///
/// Q, K and V are each quantized once with a per-tensor scale; queries are
/// attended at full 16-bit precision over their surviving keys.
pub fn attend_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &FilterConfig,
    mode: SoftmaxMode,
) -> Result<HeadOutcome> {
    cfg.validate()?;
    if q.cols() != k.cols() || k.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} are inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = k.rows();
    let head_dim = q.cols();
    let (qq, kq, vq) = (quantize_int16(q), quantize_int16(k), quantize_int16(v));
    let reference = scaled_scores(q, k)?;

    let mut data = Vec::with_capacity(q.rows() * v.cols());
    let mut traces = Vec::with_capacity(q.rows());
    let mut cov_sum = 0.0;
    for i in 0..q.rows() {
        let trace = select_traced(i, &qq, &kq, cfg)?;
        let row = sparse_attend_row(&qq.dequantized_row(i), &kq, &vq, &trace.selected, head_dim, mode)?;
        data.extend(row);
        let oracle = topk_select(reference.row(i), trace.selected.len())?;
        cov_sum += coverage(&trace.selected, &oracle);
        traces.push(trace);
    }
    let selections: Vec<KeyIndexSet> = traces.iter().map(|t| t.selected.clone()).collect();
    Ok(HeadOutcome {
        output: Matrix::new(q.rows(), v.cols(), data)?,
        pruning_ratio: pruning_ratio(&selections, n)?,
        coverage: cov_sum / q.rows() as f64,
        keys_touched_fraction: union_len(traces.iter(), n) as f64 / n as f64,
        traces,
        pruned: true,
    })
}

/// Which heads of a layer are filtered; the rest run dense attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerPolicy {
    Uniform(bool),
    PerHead(Vec<bool>),
}

impl Default for LayerPolicy {
    fn default() -> Self {
        Self::Uniform(true)
    }
}

impl LayerPolicy {
    /// Leaves the first `exempt_layers` layers of a model unpruned.
    pub fn for_layer(layer: usize, exempt_layers: usize) -> Self {
        Self::Uniform(layer >= exempt_layers)
    }

    pub fn prunes(&self, head: usize) -> bool {
        match self {
            Self::Uniform(on) => *on,
            Self::PerHead(flags) => flags[head],
        }
    }

    fn check(&self, heads: usize) -> Result<()> {
        match self {
            Self::PerHead(flags) if flags.len() != heads => Err(Error::InvalidArgument(format!(
                "policy lists {} heads, layer has {heads}",
                flags.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergonOutput {
    pub output: Matrix,
    pub stats: AttentionStats,
    pub heads: Vec<HeadOutcome>,
}

/// Multi-head attention with per-head filtering.
pub fn energon_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    cfg: &FilterConfig,
    policy: &LayerPolicy,
    mode: SoftmaxMode,
) -> Result<EnergonOutput> {
    let set = split_heads(q, k, v, heads)?;
    policy.check(heads)?;
    let n = set.seq_len();
    let outcomes = set
        .heads()
        .iter()
        .enumerate()
        .map(|(h, head)| {
            if policy.prunes(h) {
                attend_head(&head.q, &head.k, &head.v, cfg, mode)
            } else {
                let all = KeyIndexSet::all(n)?;
                Ok(HeadOutcome {
                    output: attend_dense_head(&head.q, &head.k, &head.v)?,
                    traces: (0..n)
                        .map(|_| SelectionTrace {
                            survivors_per_round: Vec::new(),
                            selected: all.clone(),
                        })
                        .collect(),
                    pruning_ratio: 1.0,
                    coverage: 1.0,
                    keys_touched_fraction: 1.0,
                    pruned: false,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let blocks: Vec<Matrix> = outcomes.iter().map(|o| o.output.clone()).collect();
    let pruned: Vec<&HeadOutcome> = outcomes.iter().filter(|o| o.pruned).collect();
    let stats = AttentionStats {
        per_head_pruning_ratio: outcomes.iter().map(|o| o.pruning_ratio).collect(),
        mean_coverage: (!pruned.is_empty())
            .then(|| pruned.iter().map(|o| o.coverage).sum::<f64>() / pruned.len() as f64),
        keys_touched_fraction: outcomes.iter().map(|o| o.keys_touched_fraction).sum::<f64>()
            / outcomes.len() as f64,
    };
    Ok(EnergonOutput {
        output: Matrix::hconcat(&blocks)?,
        stats,
        heads: outcomes,
    })
}

impl AttentionStats {
    /// Model-level pruning ratio: `n` over the mean keys kept per query, all heads pooled.
    pub fn overall_pruning_ratio(&self) -> f64 {
        let inv: f64 = self.per_head_pruning_ratio.iter().map(|r| 1.0 / r).sum();
        self.per_head_pruning_ratio.len() as f64 / inv
    }
}
