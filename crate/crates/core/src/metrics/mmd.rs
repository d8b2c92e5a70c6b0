use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::stream;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract(format!("MMD needs at least 2 vectors per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::shape("mmd", "feature vectors differ in length"));
    }
    Ok(())
}

/// Median pairwise Euclidean distance over the pooled set (upper median for
/// an even count). Falls back to 1 when every pair coincides.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased MMD^2 from a pooled Gram matrix, with `idx[..n]` in the first set.
fn mmd_from_gram(gram: &[f64], total: usize, idx: &[usize], n: usize) -> f64 {
    let m = total - n;
    let (x, y) = idx.split_at(n);
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for (i, &p) in x.iter().enumerate() {
        for &q in &x[i + 1..] {
            kxx += gram[p * total + q];
        }
        for &q in y {
            kxy += gram[p * total + q];
        }
    }
    for (i, &p) in y.iter().enumerate() {
        for &q in &y[i + 1..] {
            kyy += gram[p * total + q];
        }
    }
    2.0 * kxx / (n * (n - 1)) as f64 + 2.0 * kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64
}

fn gram(pooled: &[&Vec<f64>], h: f64) -> Vec<f64> {
    let t = pooled.len();
    let rows = parallel::map_range(t, |i| {
        (0..t)
            .map(|j| (-sq_dist(pooled[i], pooled[j]) / (2.0 * h * h)).exp())
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

/// Unbiased squared MMD with an RBF kernel `exp(-d^2 / 2h^2)`; `h` defaults
/// to the median heuristic.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    check_sets(a, b)?;
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    if !(h > 0.0) {
        return Err(Error::contract(format!("bandwidth must be positive, got {h}")));
    }
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let g = gram(&pooled, h);
    let idx: Vec<usize> = (0..pooled.len()).collect();
    Ok(mmd_from_gram(&g, pooled.len(), &idx, a.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdTest {
    pub mmd2: f64,
    pub bandwidth: f64,
    /// Standard deviation of MMD^2 under random relabelling.
    pub null_std: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// MMD^2 with a permutation null: the pooled set is relabelled
/// `permutations` times (each from its own seeded stream) with the
/// bandwidth held fixed.
pub fn mmd_permutation_test(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    bandwidth: Option<f64>,
    permutations: usize,
    seed: u64,
) -> Result<MmdTest> {
    check_sets(a, b)?;
    if permutations == 0 {
        return Err(Error::contract("permutation test needs at least one permutation"));
    }
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(a, b));
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let total = pooled.len();
    let g = gram(&pooled, h);
    let base: Vec<usize> = (0..total).collect();
    let observed = mmd_from_gram(&g, total, &base, a.len());
    let null = parallel::map_range(permutations, |k| {
        let mut idx = base.clone();
        idx.shuffle(&mut stream(seed, &[k as u64]));
        mmd_from_gram(&g, total, &idx, a.len())
    });
    let mean = null.iter().sum::<f64>() / permutations as f64;
    let var = null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / permutations as f64;
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    Ok(MmdTest {
        mmd2: observed,
        bandwidth: h,
        null_std: var.sqrt(),
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}
