//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scfl_core::DeviceEcon;

pub type M = DMatrix<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `X^T (X W - Y)` by explicit summation over rows.
pub fn gradient(x: &M, y: &M, w: &M) -> M {
    let (d, o) = (x.ncols(), y.ncols());
    let mut g = M::zeros(d, o);
    for r in 0..x.nrows() {
        for k in 0..o {
            let mut resid = -y[(r, k)];
            for j in 0..d {
                resid += x[(r, j)] * w[(j, k)];
            }
            for j in 0..d {
                g[(j, k)] += x[(r, j)] * resid;
            }
        }
    }
    g
}

pub fn half_sq_loss(x: &M, y: &M, w: &M) -> f64 {
    0.5 * (x * w - y).iter().map(|v| v * v).sum::<f64>()
}

/// Smallest sum of squares left in any column after dropping any one row.
pub fn h2_brute(x: &M) -> f64 {
    let mut best = f64::INFINITY;
    for j in 0..x.ncols() {
        for skip in 0..x.nrows() {
            let s: f64 = (0..x.nrows()).filter(|&r| r != skip).map(|r| x[(r, j)] * x[(r, j)]).sum();
            best = best.min(s);
        }
    }
    best
}

pub fn budget_bits(h2: f64, c: usize, sigma2: f64) -> f64 {
    0.5 * (1.0 + c as f64 / (h2 + sigma2)).log2()
}

pub fn noise_for_budget(eps: f64, h2: f64, c: usize) -> f64 {
    c as f64 / (2f64.powf(2.0 * eps) - 1.0) - h2
}

/// Server objective after substituting the cheapest feasible rewards,
/// with performance `-sigma^4`. Devices must be sorted by `mu`.
pub fn contract_objective(eps: &[f64], econ: &[DeviceEcon], lambda: f64) -> f64 {
    let n = econ.len();
    // rewards from the binding constraints, accumulated from the last device
    let mut rewards = vec![0.0; n];
    rewards[n - 1] = econ[n - 1].mu * eps[n - 1];
    for i in (0..n - 1).rev() {
        rewards[i] = rewards[i + 1] + econ[i].mu * (eps[i] - eps[i + 1]);
    }
    let perf: f64 = econ
        .iter()
        .zip(eps)
        .map(|(e, &x)| {
            let s = noise_for_budget(x, e.h2, e.c);
            -s * s
        })
        .sum();
    perf - lambda * rewards.iter().sum::<f64>()
}

/// Best non-increasing budget vector on a uniform grid of `points` values in
/// `(0, max cap]` plus every device's cap, found by dynamic programming over
/// devices.
pub fn contract_grid_oracle(econ: &[DeviceEcon], lambda: f64, points: usize) -> (Vec<f64>, f64) {
    let n = econ.len();
    let caps: Vec<f64> = econ.iter().map(|e| budget_bits(e.h2, e.c, 0.0)).collect();
    let top = caps.iter().cloned().fold(0.0, f64::max);
    let mut grid: Vec<f64> = (1..=points).map(|g| top * g as f64 / points as f64).collect();
    grid.extend(&caps);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let points = grid.len();
    let weight = |i: usize| {
        let prev = if i == 0 { 0.0 } else { i as f64 * econ[i - 1].mu };
        (i + 1) as f64 * econ[i].mu - prev
    };
    let term = |i: usize, x: f64| {
        let s = noise_for_budget(x, econ[i].h2, econ[i].c);
        -s * s - lambda * weight(i) * x
    };
    let mut best = vec![f64::NEG_INFINITY; points];
    let mut back = vec![vec![usize::MAX; points]; n];
    for i in 0..n {
        let mut suffix = vec![(f64::NEG_INFINITY, usize::MAX); points + 1];
        for g in (0..points).rev() {
            suffix[g] = if best[g] >= suffix[g + 1].0 { (best[g], g) } else { suffix[g + 1] };
        }
        let mut next = vec![f64::NEG_INFINITY; points];
        for g in 0..points {
            if grid[g] > caps[i] {
                continue;
            }
            if i == 0 {
                next[g] = term(0, grid[g]);
            } else if suffix[g].0 > f64::NEG_INFINITY {
                next[g] = term(i, grid[g]) + suffix[g].0;
                back[i][g] = suffix[g].1;
            }
        }
        best = next;
    }
    let mut g = (0..points).max_by(|&a, &b| best[a].total_cmp(&best[b])).unwrap();
    let value = best[g];
    let mut eps = vec![0.0; n];
    for i in (0..n).rev() {
        eps[i] = grid[g];
        g = back[i][g];
    }
    (eps, value)
}

/// Random economic types sorted by `mu`.
pub fn random_econ(r: &mut ChaCha8Rng, n: usize) -> Vec<DeviceEcon> {
    let c = r.random_range(20..=200);
    let mut econ: Vec<DeviceEcon> = (0..n)
        .map(|id| DeviceEcon { id, mu: r.random_range(0.5..5.0), h2: r.random_range(1.0..50.0), c })
        .collect();
    econ.sort_by(|a, b| a.mu.total_cmp(&b.mu));
    econ
}

/// TOML for a synthetic experiment; `extra` lines are appended to `[training]`.
pub fn synthetic_config(
    seed: u64,
    out: &std::path::Path,
    devices: usize,
    m: usize,
    d: usize,
    c: usize,
    sigma2: f64,
    straggler_ratio: f64,
    training: &str,
) -> String {
    format!(
        r#"
seed = {seed}
output_dir = "{out}"

[dataset]
kind = "synthetic"
m = {m}
m_test = {m_test}
d = {d}
o = 1

[partition]
devices = {devices}
kind = "noniid"

[system]
round_deadline_s = 1e-2
straggler_ratio = {straggler_ratio}

[coding]
c = {c}
sigma2 = {sigma2}

[training]
{training}
"#,
        out = out.display(),
        m_test = m / 4,
    )
}
