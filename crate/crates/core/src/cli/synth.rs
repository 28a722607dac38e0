//! Seeded Gaussian Q/K/V with optional planted query-key affinity.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

fn default_strength() -> f64 {
    1.0
}

/// Each query is pulled towards `keys_per_query` random keys:
/// `q_i = strength * sum(k_j) / sqrt(keys_per_query) + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub keys_per_query: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
}

/// Q, K and V of one head together with the planted keys of each query.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHead {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub planted: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn planted_head(rng: &mut impl Rng, n: usize, d: usize, planted: Option<&PlantedSpec>) -> SyntheticHead {
    let k = gaussian(rng, n, d);
    let v = gaussian(rng, n, d);
    let Some(p) = planted.filter(|p| p.keys_per_query > 0) else {
        return SyntheticHead {
            q: gaussian(rng, n, d),
            k,
            v,
            planted: vec![Vec::new(); n],
        };
    };
    let count = p.keys_per_query.min(n);
    let gain = p.strength / (count as f64).sqrt();
    let mut chosen = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut keys = sample(rng, n, count).into_vec();
        keys.sort_unstable();
        for c in 0..d {
            let pull: f64 = keys.iter().map(|&j| k.get(j, c)).sum();
            let noise: f64 = rng.sample(StandardNormal);
            data.push(gain * pull + noise);
        }
        chosen.push(keys);
    }
    SyntheticHead {
        q: Matrix::new(n, d, data).expect("finite gaussian data"),
        k,
        v,
        planted: chosen,
    }
}

/// `heads` independent heads drawn from one seeded stream.
pub fn generate(seed: u64, n: usize, d: usize, heads: usize, planted: Option<&PlantedSpec>) -> Vec<SyntheticHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..heads).map(|_| planted_head(&mut rng, n, d, planted)).collect()
}

/// Concatenates per-head blocks into `n x (heads * d)` projections.
pub fn assemble(heads: &[SyntheticHead]) -> (Matrix, Matrix, Matrix) {
    let cat = |f: fn(&SyntheticHead) -> &Matrix| {
        let blocks: Vec<Matrix> = heads.iter().map(|h| f(h).clone()).collect();
        Matrix::hconcat(&blocks).expect("equal head shapes")
    };
    (cat(|h| &h.q), cat(|h| &h.k), cat(|h| &h.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scaled_scores;

    #[test]
    fn seeded_and_shaped() {
        let spec = PlantedSpec {
            keys_per_query: 4,
            strength: 1.0,
        };
        let a = generate(5, 32, 8, 2, Some(&spec));
        let b = generate(5, 32, 8, 2, Some(&spec));
        assert_eq!(a, b);
        assert_ne!(a, generate(6, 32, 8, 2, Some(&spec)));
        assert_eq!(a[0].q.shape(), (32, 8));
        assert!(a[1].planted.iter().all(|p| p.len() == 4));
        let (q, _, _) = assemble(&a);
        assert_eq!(q.shape(), (32, 16));
    }

    #[test]
    fn planted_keys_score_high() {
        let spec = PlantedSpec {
            keys_per_query: 4,
            strength: 1.0,
        };
        let h = &generate(9, 256, 64, 1, Some(&spec))[0];
        let s = scaled_scores(&h.q, &h.k).unwrap();
        let mut planted_rank_sum = 0usize;
        for i in 0..256 {
            let row = s.row(i);
            for &j in &h.planted[i] {
                planted_rank_sum += row.iter().filter(|&&x| x > row[j]).count();
            }
        }
        // planted keys sit near the top of their rows on average
        assert!(planted_rank_sum / (256 * 4) < 10);
    }
}
