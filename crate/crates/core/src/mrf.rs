//! Mix-precision multi-round filtering of query-key pairs.
//!
//! Each round scores the surviving candidate keys of one query with low-bit
//! integer dot products, derives a per-row threshold from the min, max and
//! mean of those scores, and keeps the keys that score strictly above it.
//! The top-k baseline and the coverage metric used to judge a selection
//! against it live here as well.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{truncate, BitView, BitWidth, QuantizedMatrix};

/// Strictly increasing, non-empty list of key positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct KeyIndexSet(Vec<usize>);

impl KeyIndexSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("key index set"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "key indices must be strictly increasing".into(),
            ));
        }
        Ok(Self(indices))
    }

    /// Sorts and deduplicates arbitrary indices.
    pub fn from_unsorted(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self::new(v)
    }

    /// Every key of an `n`-token sequence.
    pub fn all(n: usize) -> Result<Self> {
        Self::new((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, key: usize) -> bool {
        self.0.binary_search(&key).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn is_subset_of(&self, other: &KeyIndexSet) -> bool {
        self.iter().all(|k| other.contains(k))
    }

    pub fn intersection_len(&self, other: &KeyIndexSet) -> usize {
        let (mut a, mut b, mut count) = (0, 0, 0);
        while a < self.0.len() && b < other.0.len() {
            match self.0[a].cmp(&other.0[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    count += 1;
                    a += 1;
                    b += 1;
                }
            }
        }
        count
    }
}

impl TryFrom<Vec<usize>> for KeyIndexSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<KeyIndexSet> for Vec<usize> {
    fn from(s: KeyIndexSet) -> Self {
        s.0
    }
}

/// Filtering schedule: one bit width and one `alpha` per round.
///
/// Zero rounds is a valid configuration that keeps every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub bitwidths: Vec<u32>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_reuse")]
    pub reuse_round0: bool,
}

fn default_reuse() -> bool {
    true
}

impl Default for FilterConfig {
    /// Two rounds, 2-bit then 4-bit keys, mean filtering, round-0 reuse on.
    fn default() -> Self {
        Self {
            bitwidths: vec![2, 4],
            alphas: vec![0.0, 0.0],
            reuse_round0: true,
        }
    }
}

impl FilterConfig {
    pub fn new(bitwidths: Vec<u32>, alphas: Vec<f64>, reuse_round0: bool) -> Result<Self> {
        let cfg = Self {
            bitwidths,
            alphas,
            reuse_round0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The default 2-bit/4-bit schedule with the given alphas.
    pub fn two_round(alpha0: f64, alpha1: f64) -> Result<Self> {
        Self::new(vec![2, 4], vec![alpha0, alpha1], true)
    }

    /// No filtering rounds: every key reaches the attention stage.
    pub fn passthrough() -> Self {
        Self {
            bitwidths: Vec::new(),
            alphas: Vec::new(),
            reuse_round0: false,
        }
    }

    pub fn rounds(&self) -> usize {
        self.bitwidths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bitwidths.len() != self.alphas.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bit widths but {} alphas",
                self.bitwidths.len(),
                self.alphas.len()
            )));
        }
        if let Some(b) = self.bitwidths.iter().find(|&&b| b != 2 && b != 4) {
            return Err(Error::UnsupportedBits(*b));
        }
        if self.bitwidths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("bit widths must be nondecreasing".into()));
        }
        for &a in &self.alphas {
            check_alpha(a)?;
        }
        Ok(())
    }

    /// Whether round `r` rebuilds its scores from round `r - 1`'s partial sums.
    pub fn reuses_previous(&self, r: usize) -> bool {
        self.reuse_round0 && r >= 1 && self.bitwidths[r - 1] == 2 && self.bitwidths[r] == 4
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > -1.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha {alpha} outside (-1, 1)")))
    }
}

/// Integer scores of one filtering round, aligned with their candidate keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundScores {
    scores: Vec<i64>,
    candidates: KeyIndexSet,
}

impl RoundScores {
    pub fn new(scores: Vec<i64>, candidates: KeyIndexSet) -> Result<Self> {
        if scores.len() != candidates.len() {
            return Err(Error::Misaligned);
        }
        Ok(Self { scores, candidates })
    }

    pub fn scores(&self) -> &[i64] {
        &self.scores
    }

    pub fn candidates(&self) -> &KeyIndexSet {
        &self.candidates
    }

    /// Scores for the keys of `subset`, which must be drawn from these candidates.
    pub fn restrict(&self, subset: &KeyIndexSet) -> Result<RoundScores> {
        let mut scores = Vec::with_capacity(subset.len());
        let cand = self.candidates.as_slice();
        for key in subset.iter() {
            let pos = cand.binary_search(&key).map_err(|_| Error::Misaligned)?;
            scores.push(self.scores[pos]);
        }
        Ok(RoundScores {
            scores,
            candidates: subset.clone(),
        })
    }
}

/// Fractional bits of the fixed-point `alpha` held by the threshold calculator.
pub const ALPHA_FRACTION_BITS: u32 = 20;
const ALPHA_ONE: i128 = 1 << ALPHA_FRACTION_BITS;

/// A row threshold kept as the exact rational `num / den` so that comparing
/// integer scores against it involves no rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold {
    num: i128,
    den: i128,
}

impl Threshold {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `score > theta`.
    pub fn is_exceeded_by(&self, score: i64) -> bool {
        i128::from(score) * self.den > self.num
    }

    pub fn numerator(&self) -> i128 {
        self.num
    }

    pub fn denominator(&self) -> i128 {
        self.den
    }
}

fn alpha_fixed(alpha: f64) -> i128 {
    let a = (alpha * ALPHA_ONE as f64).round() as i128;
    a.clamp(-(ALPHA_ONE - 1), ALPHA_ONE - 1)
}

/// Dynamic threshold of one row.
///
/// For `alpha >= 0` it interpolates between the mean and the max of the
/// scores; for `alpha < 0` between the mean and the min. `alpha` is rounded
/// to `ALPHA_FRACTION_BITS` fractional bits; the mean is the wide integer sum
/// over a single division.
pub fn threshold(scores: &[i64], alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let first = *scores.first().ok_or(Error::Empty("score set"))?;
    let (mut min, mut max, mut sum) = (first, first, 0i128);
    for &s in scores {
        min = min.min(s);
        max = max.max(s);
        sum += i128::from(s);
    }
    let count = scores.len() as i128;
    let a = alpha_fixed(alpha);
    let num = if a >= 0 {
        a * i128::from(max) * count + (ALPHA_ONE - a) * sum
    } else {
        -a * i128::from(min) * count + (ALPHA_ONE + a) * sum
    };
    Ok(Threshold {
        num,
        den: ALPHA_ONE * count,
    })
}

/// Keys scoring strictly above `theta`; if none do, the lowest-index argmax.
pub fn survivors(scores: &RoundScores, theta: &Threshold) -> KeyIndexSet {
    let keep: Vec<usize> = scores
        .candidates
        .iter()
        .zip(&scores.scores)
        .filter(|(_, &s)| theta.is_exceeded_by(s))
        .map(|(k, _)| k)
        .collect();
    if keep.is_empty() {
        let mut best = 0;
        for (i, &s) in scores.scores.iter().enumerate() {
            if s > scores.scores[best] {
                best = i;
            }
        }
        return KeyIndexSet(vec![scores.candidates.as_slice()[best]]);
    }
    KeyIndexSet(keep)
}

/// Convenience: threshold plus survivor selection on precomputed scores.
pub fn filter_scores(scores: &RoundScores, alpha: f64) -> Result<KeyIndexSet> {
    let theta = threshold(&scores.scores, alpha)?;
    Ok(survivors(scores, &theta))
}

fn int_dot(q: &[i32], k: impl Iterator<Item = i32>) -> i64 {
    q.iter().zip(k).map(|(&a, b)| i64::from(a) * i64::from(b)).sum()
}

/// One filtering round for one query.
///
/// `q` holds the query's 4-bit operands. Without `prev`, each candidate's score
/// is the dot product of `q` with the key at the view's width. With `prev`
/// (round-0 scores computed against the 2-bit view, aligned with
/// `candidates`) the key view must be 4-bit and the score is rebuilt as
/// `(prev << 2) + q . lo2(k)`, where `lo2` is the unsigned bottom pair.
pub fn filter_round(
    q: &[i32],
    keys: &BitView<'_>,
    candidates: &KeyIndexSet,
    alpha: f64,
    prev: Option<&RoundScores>,
) -> Result<(RoundScores, KeyIndexSet)> {
    if q.len() != keys.cols() {
        return Err(Error::Shape(format!(
            "query has {} features, keys have {}",
            q.len(),
            keys.cols()
        )));
    }
    if candidates.last() >= keys.rows() {
        return Err(Error::InvalidArgument(format!(
            "candidate key {} beyond {} keys",
            candidates.last(),
            keys.rows()
        )));
    }
    let source = keys.source();
    let scores: Vec<i64> = match prev {
        Some(prev) => {
            if prev.candidates != *candidates {
                return Err(Error::Misaligned);
            }
            if keys.width() != BitWidth::Four {
                return Err(Error::InvalidArgument(
                    "score reuse needs the 4-bit key view".into(),
                ));
            }
            candidates
                .iter()
                .zip(&prev.scores)
                .map(|(j, &s0)| {
                    let lo = source.row(j).iter().map(|&x| truncate(x, BitWidth::Four) & 3);
                    (s0 << 2) + int_dot(q, lo)
                })
                .collect()
        }
        None => candidates
            .iter()
            .map(|j| int_dot(q, source.row(j).iter().map(|&x| truncate(x, keys.width()))))
            .collect(),
    };
    let scores = RoundScores {
        scores,
        candidates: candidates.clone(),
    };
    let kept = filter_scores(&scores, alpha)?;
    Ok((scores, kept))
}

/// Survivors of every round for one query; the last entry is the final selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub survivors_per_round: Vec<KeyIndexSet>,
    pub selected: KeyIndexSet,
}

/// Runs every round of `cfg` for query `row` and records each round's survivors.
pub fn select_traced(
    row: usize,
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    cfg: &FilterConfig,
) -> Result<SelectionTrace> {
    cfg.validate()?;
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "Q has {} features, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    if row >= q.rows() {
        return Err(Error::InvalidArgument(format!("query {row} beyond {} rows", q.rows())));
    }
    let q4 = q.view(4)?.row(row);
    let mut candidates = KeyIndexSet::all(k.rows())?;
    let mut prev: Option<RoundScores> = None;
    let mut per_round = Vec::with_capacity(cfg.rounds());
    for r in 0..cfg.rounds() {
        let view = k.view(cfg.bitwidths[r])?;
        let reuse = match (&prev, cfg.reuses_previous(r)) {
            (Some(p), true) => Some(p.restrict(&candidates)?),
            _ => None,
        };
        let (scores, kept) = filter_round(&q4, &view, &candidates, cfg.alphas[r], reuse.as_ref())?;
        prev = Some(scores);
        per_round.push(kept.clone());
        candidates = kept;
    }
    Ok(SelectionTrace {
        survivors_per_round: per_round,
        selected: candidates,
    })
}

/// Final key selection for query `row`.
pub fn select(
    row: usize,
    q: &QuantizedMatrix,
    k: &QuantizedMatrix,
    cfg: &FilterConfig,
) -> Result<KeyIndexSet> {
    select_traced(row, q, k, cfg).map(|t| t.selected)
}

/// Indices of the `k` largest scores, ties going to the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Result<KeyIndexSet> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(KeyIndexSet(order))
}

/// Fraction of `reference` found in `selected`.
pub fn coverage(selected: &KeyIndexSet, reference: &KeyIndexSet) -> f64 {
    selected.intersection_len(reference) as f64 / reference.len() as f64
}

/// `n` over the mean number of keys kept per row.
pub fn pruning_ratio(selections: &[KeyIndexSet], n: usize) -> Result<f64> {
    if selections.is_empty() {
        return Err(Error::Empty("selection list"));
    }
    let kept: usize = selections.iter().map(KeyIndexSet::len).sum();
    Ok((n * selections.len()) as f64 / kept as f64)
}
