//! Compute and uplink timing of heterogeneous devices.
//!
//! A round lasts `T` seconds. Device `i` needs `t_D + t_C + t_U`, where the
//! upload time depends on an exponentially distributed channel gain drawn
//! fresh every round. The update arrives iff the total fits in `T`.

use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng, Stream};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// MAC operations per second.
    pub mac_rate: f64,
    /// Transmit power in watts.
    pub tx_power: f64,
    /// Local sample count `l_i`.
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Bandwidth `B` in Hz.
    pub bandwidth: f64,
    /// Receiver noise power `N0` in watts.
    pub noise_power: f64,
    /// Mean of the exponential channel power gain.
    pub mean_gain: f64,
    /// Update size `M` in bits.
    pub update_size: f64,
    /// Model download time in seconds.
    pub download_time: f64,
    /// Round deadline `T` in seconds.
    pub deadline: f64,
    /// MAC operations needed per sample.
    pub mac_per_sample: f64,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth_hz", self.bandwidth),
            ("noise_power_w", self.noise_power),
            ("mean_gain", self.mean_gain),
            ("round_deadline_s", self.deadline),
            ("mac_per_sample", self.mac_per_sample),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: format!("must be positive and finite, got {v}"),
                });
            }
        }
        for (field, v) in [("update_size_bits", self.update_size), ("t_download_s", self.download_time)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    field: field.into(),
                    message: format!("must be non-negative and finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundTiming {
    pub compute_time: f64,
    pub upload_time: f64,
    pub total: f64,
    pub arrived: bool,
}

pub fn compute_time(profile: &DeviceProfile, ch: &ChannelModel, tau: usize, b: usize) -> f64 {
    (tau * b) as f64 * ch.mac_per_sample / profile.mac_rate
}

pub fn uplink_rate(ch: &ChannelModel, tx_power: f64, gain: f64) -> f64 {
    ch.bandwidth * (1.0 + gain * tx_power / ch.noise_power).log2()
}

pub fn upload_time(ch: &ChannelModel, tx_power: f64, gain: f64) -> f64 {
    if ch.update_size == 0.0 {
        return 0.0;
    }
    let rate = uplink_rate(ch, tx_power, gain);
    if rate > 0.0 {
        ch.update_size / rate
    } else {
        f64::INFINITY
    }
}

pub fn sample_gain(ch: &ChannelModel, rng: &mut Rng) -> f64 {
    Exp::new(1.0 / ch.mean_gain)
        .expect("mean gain validated positive")
        .sample(rng)
}

/// Timing for a realised gain.
pub fn timing_for_gain(profile: &DeviceProfile, ch: &ChannelModel, tau: usize, b: usize, gain: f64) -> RoundTiming {
    let compute = compute_time(profile, ch, tau, b);
    let upload = upload_time(ch, profile.tx_power, gain);
    let total = ch.download_time + compute + upload;
    RoundTiming {
        compute_time: compute,
        upload_time: upload,
        total,
        arrived: total <= ch.deadline,
    }
}

pub fn draw_round(profile: &DeviceProfile, ch: &ChannelModel, tau: usize, b: usize, seed: u64) -> RoundTiming {
    let gain = sample_gain(ch, &mut rng::from_seed(seed));
    timing_for_gain(profile, ch, tau, b, gain)
}

/// Closed-form `Pr[t_D + t_C + t_U <= T]` under exponential fading.
pub fn arrival_probability(profile: &DeviceProfile, ch: &ChannelModel, tau: usize, b: usize) -> f64 {
    let slack = ch.deadline - ch.download_time - compute_time(profile, ch, tau, b);
    if slack <= 0.0 {
        return 0.0;
    }
    let threshold = ((ch.update_size / (ch.bandwidth * slack)).exp2() - 1.0) * ch.noise_power / profile.tx_power;
    (-threshold / ch.mean_gain).exp()
}

/// Largest batch meeting the deadline for a realised gain, or 0 when even a
/// single sample per step misses it.
pub fn adapt_batch(profile: &DeviceProfile, ch: &ChannelModel, tau: usize, gain: f64) -> usize {
    let slack = ch.deadline - ch.download_time - upload_time(ch, profile.tx_power, gain);
    if !(slack > 0.0) {
        return 0;
    }
    let per_sample = tau as f64 * ch.mac_per_sample / profile.mac_rate;
    let bound = (slack / per_sample).floor();
    let mut b = if bound >= profile.samples as f64 { profile.samples } else { bound as usize };
    // guard the floor against rounding in the linear bound
    while b > 0 && !timing_for_gain(profile, ch, tau, b, gain).arrived {
        b -= 1;
    }
    b
}

/// Largest server batch whose `tau` steps fit in the round, capped at `c`.
pub fn server_batch(server_mac_rate: f64, ch: &ChannelModel, tau: usize, c: usize) -> usize {
    let per_sample = tau as f64 * ch.mac_per_sample / server_mac_rate;
    let bound = (ch.deadline / per_sample).floor();
    if bound >= c as f64 {
        c
    } else {
        bound as usize
    }
}

pub fn mean_straggler_ratio(fleet: &[DeviceProfile], ch: &ChannelModel, tau: usize, b: usize) -> f64 {
    fleet
        .iter()
        .map(|p| 1.0 - arrival_probability(p, ch, tau, b.min(p.samples).max(1)))
        .sum::<f64>()
        / fleet.len() as f64
}

const BANDWIDTH_BRACKET: (f64, f64) = (1.0, 1e12);

/// Bisects the bandwidth (in log space) until the mean straggler probability
/// matches `target_ratio`. Batches larger than a device's data are clamped.
pub fn straggler_calibrate(
    target_ratio: f64,
    fleet: &[DeviceProfile],
    ch: &ChannelModel,
    tau: usize,
    b: usize,
) -> Result<ChannelModel> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(invalid(format!("target straggler ratio {target_ratio} outside [0, 1)")));
    }
    if fleet.is_empty() {
        return Err(Error::Empty("fleet has no devices".into()));
    }
    let ratio_at = |bw: f64| mean_straggler_ratio(fleet, &ChannelModel { bandwidth: bw, ..*ch }, tau, b);
    let (mut lo, mut hi) = (BANDWIDTH_BRACKET.0.ln(), BANDWIDTH_BRACKET.1.ln());
    let floor = ratio_at(hi.exp());
    if floor > target_ratio + 1e-3 {
        return Err(Error::Unreachable {
            target: target_ratio,
            message: format!("even {:e} Hz leaves a straggler ratio of {floor:.4}", BANDWIDTH_BRACKET.1),
        });
    }
    if ratio_at(lo.exp()) < target_ratio - 1e-3 {
        return Err(Error::Unreachable {
            target: target_ratio,
            message: format!("even {} Hz keeps stragglers below the target", BANDWIDTH_BRACKET.0),
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = ratio_at(mid.exp());
        if (r - target_ratio).abs() < 1e-5 {
            lo = mid;
            hi = mid;
            break;
        }
        // straggling falls as bandwidth grows
        if r > target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bw = if target_ratio == 0.0 { hi.exp() } else { (0.5 * (lo + hi)).exp() };
    Ok(ChannelModel { bandwidth: bw, ..*ch })
}

/// Heterogeneous fleet: MAC rate `U[lo, hi] * base`, power `U[p_lo, p_hi]` dBm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetSpec {
    pub mac_rate_kmacs: f64,
    pub mac_scale_min: f64,
    pub mac_scale_max: f64,
    pub tx_power_dbm_min: f64,
    pub tx_power_dbm_max: f64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            mac_rate_kmacs: 1536.0,
            mac_scale_min: 0.8,
            mac_scale_max: 1.0,
            tx_power_dbm_min: 15.0,
            tx_power_dbm_max: 25.0,
        }
    }
}

pub fn sample_fleet(spec: &FleetSpec, sizes: &[usize], seed: u64) -> Vec<DeviceProfile> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &samples)| {
            let mut r = rng::stream(seed, Stream::Fleet, &[i as u64]);
            let scale = r.random_range(spec.mac_scale_min..=spec.mac_scale_max);
            let dbm = r.random_range(spec.tx_power_dbm_min..=spec.tx_power_dbm_max);
            DeviceProfile {
                mac_rate: scale * spec.mac_rate_kmacs * 1e3,
                tx_power: dbm_to_watts(dbm),
                samples,
            }
        })
        .collect()
}
