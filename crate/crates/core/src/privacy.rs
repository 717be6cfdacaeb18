//! Mutual-information privacy budgets of released coded data, in bits.

use std::fmt;

use crate::data::{Dataset, DevicePartition};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// A privacy budget. `Unbounded` arises when neither the data geometry nor
/// the noise hides anything (`h^2 + sigma^2 = 0`).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Budget {
    Bits(f64),
    Unbounded,
}

impl Budget {
    pub fn bits(self) -> Option<f64> {
        match self {
            Budget::Bits(b) => Some(b),
            Budget::Unbounded => None,
        }
    }

    fn max(self, other: Budget) -> Budget {
        match (self, other) {
            (Budget::Bits(a), Budget::Bits(b)) => Budget::Bits(a.max(b)),
            _ => Budget::Unbounded,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Bits(b) => write!(f, "{b}"),
            Budget::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// `h` and `h^2` for a local feature matrix: per column, the sum of squares
/// minus the largest squared entry, minimised over columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HValue {
    pub h: f64,
    pub h2: f64,
}

pub fn h_value(x: &Matrix) -> Result<HValue> {
    if x.nrows() == 0 {
        return Err(Error::Empty("local dataset has no rows".into()));
    }
    let h2 = x
        .column_iter()
        .map(|col| {
            let (sum, max) = col
                .iter()
                .fold((0.0_f64, 0.0_f64), |(s, m), v| (s + v * v, m.max(v * v)));
            (sum - max).max(0.0)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(HValue { h: h2.sqrt(), h2 })
}

/// `1/2 log2(1 + c / (h^2 + sigma^2))`.
pub fn epsilon(h2: f64, c: usize, sigma2: f64) -> Result<Budget> {
    if c == 0 {
        return Err(invalid("c must be at least 1"));
    }
    if !(h2 >= 0.0) || !(sigma2 >= 0.0) {
        return Err(invalid(format!("h^2 = {h2} and sigma^2 = {sigma2} must be non-negative")));
    }
    let denom = h2 + sigma2;
    if denom == 0.0 {
        return Ok(Budget::Unbounded);
    }
    Ok(Budget::Bits(0.5 * (c as f64 / denom).ln_1p() / std::f64::consts::LN_2))
}

/// Noise variance that yields budget `eps`: `c / (2^(2 eps) - 1) - h^2`.
pub fn epsilon_inverse(eps: f64, h2: f64, c: usize) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(invalid(format!("budget must be positive, got {eps}")));
    }
    let sigma2 = c as f64 / (2.0 * eps * std::f64::consts::LN_2).exp_m1() - h2;
    match epsilon(h2, c, 0.0)? {
        Budget::Bits(cap) if eps > cap * (1.0 + 1e-12) => {
            Err(invalid(format!("budget {eps} exceeds the noiseless budget {cap}")))
        }
        _ => Ok(sigma2.max(0.0)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyProfile {
    pub h2: f64,
    pub c: usize,
    pub sigma2: f64,
    pub epsilon: Budget,
}

impl PrivacyProfile {
    pub fn new(h2: f64, c: usize, sigma2: f64) -> Result<Self> {
        Ok(Self { h2, c, sigma2, epsilon: epsilon(h2, c, sigma2)? })
    }
}

/// Per-device profiles for a partitioned dataset.
pub fn device_profiles(ds: &Dataset, partition: &DevicePartition, c: usize, sigma2: &[f64]) -> Result<Vec<PrivacyProfile>> {
    if sigma2.len() != partition.device_count() {
        return Err(Error::Shape(format!(
            "{} noise levels for {} devices",
            sigma2.len(),
            partition.device_count()
        )));
    }
    partition
        .ranges()
        .iter()
        .zip(sigma2)
        .map(|(r, &s)| {
            let (x, _) = ds.slice(r.clone());
            PrivacyProfile::new(h_value(&x)?.h2, c, s)
        })
        .collect()
}

/// The system budget is the largest device budget.
pub fn system_budget(profiles: &[PrivacyProfile]) -> Result<Budget> {
    profiles
        .iter()
        .map(|p| p.epsilon)
        .reduce(Budget::max)
        .ok_or_else(|| Error::Empty("no privacy profiles".into()))
}
