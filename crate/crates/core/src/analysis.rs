//! Analytical constants, gradient-variance bounds, the optimality-gap bound
//! and Monte Carlo checks of the random-matrix moments behind them.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::coding;
use crate::data::{Dataset, DevicePartition};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Stream};
use crate::training::{self, LocalUpdate};

/// Problem-dependent constants used by the bounds.
///
/// `zeta` and `kappa` are the largest per-device values of `zeta_i^2` and
/// `kappa_i^2`. `kappa_i^2` bounds the local residual over the ball
/// `||W||_F <= phi`. `alpha_i^2` is the smallest eigenvalue of the local Gram
/// matrix, so that `alpha = sum_i alpha_i^2` is a valid strong-convexity
/// constant of `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConstants {
    pub sizes: Vec<usize>,
    pub alpha_sq: Vec<f64>,
    pub zeta_sq: Vec<f64>,
    pub kappa_sq: Vec<f64>,
    pub phi_sq: f64,
    pub alpha: f64,
    pub smoothness: f64,
    pub zeta: f64,
    pub kappa: f64,
}

pub fn estimate_constants(ds: &Dataset, partition: &DevicePartition, phi: f64) -> Result<ProblemConstants> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(invalid(format!("model radius phi must be positive, got {phi}")));
    }
    let n = partition.device_count();
    let mut alpha_sq = Vec::with_capacity(n);
    let mut zeta_sq = Vec::with_capacity(n);
    let mut kappa_sq = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = ds.slice(partition.range(i));
        let z = linalg::frob_sq(&x);
        alpha_sq.push(linalg::min_eigenvalue(&(x.transpose() * &x)).max(0.0));
        zeta_sq.push(z);
        kappa_sq.push((z.sqrt() * phi + linalg::frob_sq(&y).sqrt()).powi(2));
    }
    let x = ds.features();
    let smoothness = linalg::power_iteration(&(x.transpose() * x), 1e-9, 100_000);
    Ok(ProblemConstants {
        sizes: partition.sizes(),
        alpha: alpha_sq.iter().sum(),
        zeta: zeta_sq.iter().cloned().fold(0.0, f64::max),
        kappa: kappa_sq.iter().cloned().fold(0.0, f64::max),
        alpha_sq,
        zeta_sq,
        kappa_sq,
        phi_sq: phi * phi,
        smoothness,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceBound {
    pub rho1: f64,
    pub rho2: f64,
}

impl VarianceBound {
    pub fn rho(&self) -> f64 {
        0.25 * self.rho1 + 0.25 * self.rho2
    }
}

/// Error bound for the inverse-probability weighted device updates.
pub fn rho1(consts: &ProblemConstants, p: &[f64], batches: &[usize], tau: usize) -> Result<f64> {
    let n = consts.sizes.len();
    if p.len() != n || batches.len() != n {
        return Err(Error::Shape(format!(
            "{} probabilities and {} batches for {n} devices",
            p.len(),
            batches.len()
        )));
    }
    let mut arrival = 0.0;
    let mut sampling = 0.0;
    for i in 0..n {
        if !(p[i] > 0.0 && p[i] <= 1.0) {
            return Err(invalid(format!("device {i} probability {} outside (0, 1]", p[i])));
        }
        if batches[i] == 0 {
            return Err(invalid(format!("device {i} has batch 0")));
        }
        let (l, b) = (consts.sizes[i] as f64, batches[i] as f64);
        let zk = consts.zeta_sq[i] * consts.kappa_sq[i];
        arrival += (1.0 - p[i]) / p[i] * zk;
        sampling += l * (l - b) / b * zk;
    }
    let t = tau as f64;
    Ok(2.0 * t * arrival + 2.0 * t * sampling)
}

/// Error bound for the coded server update. `n_dim` multiplies the
/// cross-term and defaults to the label dimension in the harness.
pub fn rho2(consts: &ProblemConstants, sigma2: &[f64], c: usize, m: usize, d: usize, n_dim: usize, tau: usize) -> Result<f64> {
    if c == 0 {
        return Err(invalid("c must be at least 1"));
    }
    let (c, m, d, n, t) = (c as f64, m as f64, d as f64, n_dim as f64, tau as f64);
    let s2: f64 = sigma2.iter().sum();
    let s4: f64 = sigma2.iter().map(|s| s * s).sum();
    Ok(4.0 * t / c * (m + m * m) * consts.zeta * consts.kappa
        + 4.0 * t / c * (d + d * d) * consts.phi_sq * s4
        + 4.0 * d * m * n * t / (c * c) * (consts.zeta * consts.phi_sq + consts.kappa) * s2)
}

/// Optimality-gap bound after `etas.len()` rounds.
pub fn convergence_bound(consts: &ProblemConstants, bound: &VarianceBound, etas: &[f64], w0: &Matrix, w_star: &Matrix) -> Result<f64> {
    if etas.is_empty() {
        return Err(invalid("need at least one round"));
    }
    if let Some((k, eta)) = etas
        .iter()
        .enumerate()
        .find(|(_, &e)| !(e > 0.0) || e * consts.smoothness >= 1.0)
    {
        return Err(Error::Schedule(format!("eta_{k} * L = {}", eta * consts.smoothness)));
    }
    let sum: f64 = etas.iter().sum();
    let sum_sq: f64 = etas.iter().map(|e| e * e).sum();
    let dist = linalg::frob_sq(&(w0 - w_star));
    Ok((1.0 - consts.alpha * etas[0]) / (2.0 * sum) * dist + sum_sq / sum * bound.rho())
}

/// One row of a bound report.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub quantity: String,
    pub value: f64,
    pub empirical: Option<f64>,
}

pub fn write_bound_report(path: impl AsRef<Path>, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value", "empirical", "ratio"])?;
    for r in rows {
        let (emp, ratio) = match r.empirical {
            Some(e) => (format!("{e:?}"), if r.value != 0.0 { format!("{:?}", e / r.value) } else { String::new() }),
            None => (String::new(), String::new()),
        };
        w.write_record([r.quantity.clone(), format!("{:?}", r.value), emp, ratio])?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs to the random-matrix moment check.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSpec {
    pub m: usize,
    pub c: usize,
    pub d: usize,
    pub sigma2: Vec<f64>,
    pub server_batch: usize,
    pub local_rows: usize,
    pub local_batch: usize,
    pub draws: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentPair {
    pub name: &'static str,
    pub empirical: f64,
    pub theoretical: f64,
}

impl MomentPair {
    /// Relative error; 0 when both sides vanish.
    pub fn rel_error(&self) -> f64 {
        if self.theoretical == 0.0 {
            if self.empirical == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            ((self.empirical - self.theoretical) / self.theoretical).abs()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub wishart: MomentPair,
    /// Noise moment against `(d + d^2)/c * sum_i sigma_i^4`.
    pub noise: MomentPair,
    /// Same empirical value against `(d + d^2)/c * (sum_i sigma_i^2)^2`, the
    /// exact value for the summed noise matrix.
    pub noise_total: MomentPair,
    pub server_sampling: MomentPair,
    pub device_sampling: MomentPair,
    /// Largest per-draw device sampling error; exactly 0 at full batch.
    pub device_sampling_max: f64,
}

impl MomentReport {
    pub fn pairs(&self) -> [&MomentPair; 5] {
        [&self.wishart, &self.noise, &self.noise_total, &self.server_sampling, &self.device_sampling]
    }
}

fn mask_error(n: usize, batch: usize, rng: &mut rng::Rng) -> f64 {
    let keep = batch as f64 / n as f64;
    let scale = n as f64 / batch as f64;
    (0..n)
        .map(|_| {
            let s = if rng.random::<f64>() < keep { scale } else { 0.0 };
            (s - 1.0) * (s - 1.0)
        })
        .sum()
}

pub fn wishart_selfcheck(spec: &MomentSpec) -> Result<MomentReport> {
    let MomentSpec { m, c, d, server_batch, local_rows, local_batch, draws, seed, .. } = *spec;
    if draws < 1000 {
        return Err(invalid(format!("need at least 1000 draws, got {draws}")));
    }
    if m == 0 || c == 0 || d == 0 {
        return Err(invalid("m, c and d must be positive"));
    }
    if server_batch == 0 || server_batch > c || local_batch == 0 || local_batch > local_rows {
        return Err(invalid("batches must lie in [1, rows]"));
    }
    if spec.sigma2.iter().any(|s| !(*s >= 0.0)) {
        return Err(invalid("noise variances must be non-negative"));
    }
    let total: f64 = spec.sigma2.iter().sum();
    let per_draw: Vec<[f64; 4]> = (0..draws)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, Stream::MonteCarlo, &[r as u64]);
            let g = linalg::standard_normal(c, m, &mut rng);
            let wish = linalg::frob_sq(&(g.transpose() * &g / c as f64 - Matrix::identity(m, m)));
            let mut noise = Matrix::zeros(c, d);
            for &s in &spec.sigma2 {
                if s > 0.0 {
                    noise += linalg::normal(c, d, s.sqrt(), &mut rng);
                }
            }
            let nn = linalg::frob_sq(&(noise.transpose() * &noise / c as f64 - Matrix::identity(d, d) * total));
            let srv = mask_error(c, server_batch, &mut rng);
            let dev = mask_error(local_rows, local_batch, &mut rng);
            [wish, nn, srv, dev]
        })
        .collect();
    let r = draws as f64;
    let mean = |j: usize| per_draw.iter().map(|v| v[j]).sum::<f64>() / r;
    let (cf, mf, df) = (c as f64, m as f64, d as f64);
    let s4: f64 = spec.sigma2.iter().map(|s| s * s).sum();
    let (bs, l, b) = (server_batch as f64, local_rows as f64, local_batch as f64);
    let noise_emp = mean(1);
    Ok(MomentReport {
        wishart: MomentPair { name: "wishart", empirical: mean(0), theoretical: (mf + mf * mf) / cf },
        noise: MomentPair { name: "noise", empirical: noise_emp, theoretical: (df + df * df) / cf * s4 },
        noise_total: MomentPair {
            name: "noise_total",
            empirical: noise_emp,
            theoretical: (df + df * df) / cf * total * total,
        },
        server_sampling: MomentPair { name: "server_sampling", empirical: mean(2), theoretical: cf * (cf - bs) / bs },
        device_sampling: MomentPair { name: "device_sampling", empirical: mean(3), theoretical: l * (l - b) / b },
        device_sampling_max: per_draw.iter().map(|v| v[3]).fold(0.0, f64::max),
    })
}

/// Draws the aggregated update with frozen models (`eta = 0`), where the
/// target `u = tau * grad f(W)` is known exactly. Every draw re-encodes the
/// data, resamples arrivals as Bernoulli(`p_i`) and resamples all batches.
#[derive(Clone, Debug)]
pub struct UpdateProbe<'a> {
    pub data: &'a Dataset,
    pub partition: &'a DevicePartition,
    pub p: &'a [f64],
    pub batches: &'a [usize],
    pub sigma2: &'a [f64],
    pub c: usize,
    pub server_batch: usize,
    pub tau: usize,
}

impl UpdateProbe<'_> {
    pub fn target(&self, w: &Matrix) -> Matrix {
        training::full_gradient(self.data.features(), self.data.labels(), w) * self.tau as f64
    }

    pub fn draw(&self, w: &Matrix, seed: u64) -> Result<Matrix> {
        let n = self.partition.device_count();
        if self.p.len() != n || self.batches.len() != n || self.sigma2.len() != n {
            return Err(Error::Shape("probe vectors must have one entry per device".into()));
        }
        let shards = coding::encode_fleet(self.data, self.partition, self.c, self.sigma2, seed)?;
        let coded = coding::build_global(&shards)?;
        let mut arrivals = rng::stream(seed, Stream::Channel, &[]);
        let mut updates = Vec::with_capacity(n);
        for i in 0..n {
            let arrived = arrivals.random::<f64>() < self.p[i];
            let (x, y) = self.data.slice(self.partition.range(i));
            let s = rng::derive_seed(seed, Stream::DeviceBatch, &[i as u64]);
            let grad = training::local_train(&x, &y, w, self.tau, 0.0, self.batches[i], s)?;
            updates.push(LocalUpdate { device: i, grad, arrived, batch: self.batches[i] });
        }
        let s = rng::derive_seed(seed, Stream::ServerBatch, &[]);
        let server = training::server_train(&coded, w, self.tau, 0.0, self.server_batch, s)?;
        training::aggregate(&updates, self.p, &server)
    }

    /// Monte Carlo estimate of `E ||g - u||_F^2`.
    pub fn mean_sq_error(&self, w: &Matrix, draws: usize, seed: u64) -> Result<f64> {
        let u = self.target(w);
        let errs: Vec<f64> = (0..draws)
            .into_par_iter()
            .map(|r| {
                let g = self.draw(w, rng::derive_seed(seed, Stream::MonteCarlo, &[r as u64]))?;
                Ok(linalg::frob_sq(&(g - &u)))
            })
            .collect::<Result<_>>()?;
        Ok(errs.iter().sum::<f64>() / draws as f64)
    }
}
