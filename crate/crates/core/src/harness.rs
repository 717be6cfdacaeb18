//! Experiment orchestration: TOML configs, end-to-end runs, sweeps and
//! framework comparisons. Every run writes plain CSV artifacts plus a
//! manifest of the random streams it consumed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, VarianceBound};
use crate::data::{self, Dataset, DevicePartition, LabelSortSpec};
use crate::error::{Error, Result};
use crate::incentive::{self, DesignedContract, DeviceEcon, Gamma, SolverOptions};
use crate::linalg::{self, Matrix};
use crate::privacy::{self, PrivacyProfile};
use crate::rng::{self, Stream};
use crate::simulation::{self, BatchMode, Framework, RunOutput, Scenario, TrainConfig};
use crate::system::{self, ChannelModel, FleetSpec};
use crate::training::{self, LrSchedule};

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub system: SystemConfig,
    pub coding: CodingConfig,
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incentive: Option<IncentiveConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        m: usize,
        #[serde(default)]
        m_test: usize,
        d: usize,
        o: usize,
        #[serde(default)]
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        d: usize,
        o: usize,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    #[default]
    Iid,
    Noniid,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub devices: usize,
    #[serde(default)]
    pub kind: PartitionKind,
    #[serde(default = "one")]
    pub shards_per_device: usize,
}

/// A single value or an inclusive `[lo, hi]` range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spread {
    Value(f64),
    Range([f64; 2]),
}

impl Spread {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Spread::Value(v) => (v, v),
            Spread::Range([lo, hi]) => (lo, hi),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeConfig {
    #[default]
    Fixed,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub bandwidth_hz: f64,
    pub noise_power_w: f64,
    pub mean_gain: f64,
    pub tx_power_dbm: Spread,
    pub mac_rate_kmacs: f64,
    pub mac_scale: Spread,
    pub server_mac_rate_kmacs: f64,
    /// Defaults to 32 bits per model entry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_size_bits: Option<f64>,
    pub t_download_s: f64,
    pub round_deadline_s: f64,
    /// Defaults to `d * o`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mac_per_sample: Option<f64>,
    pub mode: ModeConfig,
    /// When set, the bandwidth is recalibrated to hit this mean straggler ratio.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub straggler_ratio: Option<f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let fleet = FleetSpec::default();
        Self {
            bandwidth_hz: 1e6,
            noise_power_w: 1e-10,
            mean_gain: 1e-8,
            tx_power_dbm: Spread::Range([fleet.tx_power_dbm_min, fleet.tx_power_dbm_max]),
            mac_rate_kmacs: fleet.mac_rate_kmacs,
            mac_scale: Spread::Range([fleet.mac_scale_min, fleet.mac_scale_max]),
            server_mac_rate_kmacs: 15_360.0,
            update_size_bits: None,
            t_download_s: 1e-4,
            round_deadline_s: 1e-3,
            mac_per_sample: None,
            mode: ModeConfig::Fixed,
            straggler_ratio: None,
        }
    }
}

/// Noise levels: one value for all devices, one per device, or `"contract"`
/// to take them from the solved contract.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Uniform(f64),
    PerDevice(Vec<f64>),
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodingConfig {
    pub c: usize,
    pub sigma2: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub tau: usize,
    pub schedule: LrSchedule,
    /// Local batch in fixed mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaConfig {
    #[default]
    NegSquare,
    NegLinear { weight: f64 },
}

impl GammaConfig {
    pub fn build(self) -> Gamma {
        match self {
            GammaConfig::NegSquare => Gamma::NegSquare,
            GammaConfig::NegLinear { weight } => Gamma::NegLinear(weight),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncentiveConfig {
    #[serde(default)]
    pub lambda: f64,
    /// When set, `lambda` is chosen so the contract pays this total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_reward: Option<f64>,
    /// Privacy sensitivity per device, in device order.
    pub mu: Vec<f64>,
    /// Overrides the data-derived `h^2` per device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: GammaConfig,
    #[serde(default)]
    pub sigma_min2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Model-norm radius for the bounds; defaults to twice the larger of
    /// the initial and optimal model norms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    /// Multiplier of the cross term in the coded-update bound; defaults to `o`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_dim: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path.as_ref())?)?;
        // relative data paths are taken from the config's directory
        if let Some(dir) = path.as_ref().parent() {
            if let DatasetConfig::Csv { path, test_path, .. } = &mut cfg.dataset {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
                if let Some(t) = test_path.as_mut().filter(|t| t.is_relative()) {
                    *t = dir.join(&*t);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("config", e.to_string()))
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let n = self.partition.devices;
        if n == 0 {
            return Err(config_err("partition.devices", "must be at least 1"));
        }
        if self.partition.shards_per_device == 0 {
            return Err(config_err("partition.shards_per_device", "must be at least 1"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { m, d, o, noise_std, .. } => {
                if *m < n {
                    return Err(config_err("dataset.m", format!("{m} rows cannot cover {n} devices")));
                }
                if *d == 0 || *o == 0 {
                    return Err(config_err("dataset.d", "dimensions must be positive"));
                }
                if !(*noise_std >= 0.0) {
                    return Err(config_err("dataset.noise_std", "must be non-negative"));
                }
            }
            DatasetConfig::Csv { d, o, .. } => {
                if *d == 0 || *o == 0 {
                    return Err(config_err("dataset.d", "dimensions must be positive"));
                }
            }
        }
        let sys = &self.system;
        for (field, v) in [
            ("system.bandwidth_hz", sys.bandwidth_hz),
            ("system.noise_power_w", sys.noise_power_w),
            ("system.mean_gain", sys.mean_gain),
            ("system.mac_rate_kmacs", sys.mac_rate_kmacs),
            ("system.server_mac_rate_kmacs", sys.server_mac_rate_kmacs),
            ("system.round_deadline_s", sys.round_deadline_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(field, format!("must be positive, got {v}")));
            }
        }
        if !(sys.t_download_s >= 0.0) {
            return Err(config_err("system.t_download_s", "must be non-negative"));
        }
        let (s_lo, s_hi) = sys.mac_scale.bounds();
        if !(s_lo > 0.0 && s_lo <= s_hi) {
            return Err(config_err("system.mac_scale", "needs 0 < lo <= hi"));
        }
        let (p_lo, p_hi) = sys.tx_power_dbm.bounds();
        if !(p_lo <= p_hi) {
            return Err(config_err("system.tx_power_dbm", "needs lo <= hi"));
        }
        if let Some(r) = sys.straggler_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(config_err("system.straggler_ratio", format!("{r} outside [0, 1)")));
            }
        }
        if self.coding.c == 0 {
            return Err(config_err("coding.c", "must be at least 1"));
        }
        match &self.coding.sigma2 {
            NoiseSpec::Uniform(s) if !(*s >= 0.0) => return Err(config_err("coding.sigma2", "must be non-negative")),
            NoiseSpec::PerDevice(v) if v.len() != n => {
                return Err(config_err("coding.sigma2", format!("{} values for {n} devices", v.len())))
            }
            NoiseSpec::PerDevice(v) if v.iter().any(|s| !(*s >= 0.0)) => {
                return Err(config_err("coding.sigma2", "must be non-negative"))
            }
            NoiseSpec::Keyword(k) if k != "contract" => {
                return Err(config_err("coding.sigma2", format!("expected a number, a list or \"contract\", got \"{k}\"")))
            }
            NoiseSpec::Keyword(_) if self.incentive.is_none() => {
                return Err(config_err("coding.sigma2", "\"contract\" needs an [incentive] section"))
            }
            _ => {}
        }
        let t = &self.training;
        if t.rounds == 0 {
            return Err(config_err("training.rounds", "must be at least 1"));
        }
        if t.tau == 0 {
            return Err(config_err("training.tau", "must be at least 1"));
        }
        match (sys.mode, t.batch) {
            (ModeConfig::Fixed, None) => return Err(config_err("training.batch", "required in fixed mode")),
            (ModeConfig::Fixed, Some(0)) => return Err(config_err("training.batch", "must be at least 1")),
            _ => {}
        }
        if let Some(bs) = t.server_batch {
            if bs == 0 || bs > self.coding.c {
                return Err(config_err("training.server_batch", format!("{bs} outside [1, c = {}]", self.coding.c)));
            }
        }
        match t.schedule {
            LrSchedule::Constant { eta0_l } if !(eta0_l > 0.0 && eta0_l < 1.0) => {
                return Err(config_err("training.schedule", format!("eta0 * L = {eta0_l} must lie in (0, 1)")))
            }
            LrSchedule::Inverse { beta, scale } if !(beta > 0.0 && scale > 0.0) => {
                return Err(config_err("training.schedule", "beta and scale must be positive"))
            }
            _ => {}
        }
        if let Some(inc) = &self.incentive {
            if inc.mu.len() != n {
                return Err(config_err("incentive.mu", format!("{} values for {n} devices", inc.mu.len())));
            }
            if inc.mu.iter().any(|m| !(*m > 0.0)) {
                return Err(config_err("incentive.mu", "must be positive"));
            }
            if let Some(h2) = &inc.h2 {
                if h2.len() != n || h2.iter().any(|h| !(*h >= 0.0)) {
                    return Err(config_err("incentive.h2", format!("need {n} non-negative values")));
                }
            }
            if !(inc.lambda >= 0.0) {
                return Err(config_err("incentive.lambda", "must be non-negative"));
            }
            if !(inc.sigma_min2 >= 0.0) {
                return Err(config_err("incentive.sigma_min2", "must be non-negative"));
            }
        }
        if let Some(phi) = self.analysis.phi {
            if !(phi > 0.0) {
                return Err(config_err("analysis.phi", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Data, timing and noise levels resolved from a config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scenario: Scenario,
    pub train: TrainConfig,
    pub privacy: Vec<PrivacyProfile>,
    pub contract: Option<(Vec<DeviceEcon>, DesignedContract, f64)>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { m, m_test, d, o, noise_std } => {
            let s = data::generate_synthetic_split(cfg.seed, *m, *m_test, *d, *o, *noise_std)?;
            Ok((s.train, s.test))
        }
        DatasetConfig::Csv { path, test_path, d, o, normalize } => {
            let mut train = data::load_csv(path, *d, *o)?;
            let mut test = match test_path {
                Some(p) => data::load_csv(p, *d, *o)?,
                None => train.clone(),
            };
            if *normalize {
                train = data::normalize(&train)?;
                test = data::normalize(&test)?;
            }
            Ok((train, test))
        }
    }
}

fn partition(cfg: &ExperimentConfig, ds: Dataset) -> Result<(Dataset, DevicePartition)> {
    let n = cfg.partition.devices;
    if ds.m() < n {
        return Err(config_err("partition.devices", format!("{} rows cannot cover {n} devices", ds.m())));
    }
    match cfg.partition.kind {
        PartitionKind::Iid => {
            let p = DevicePartition::even(ds.m(), n)?;
            Ok((ds, p))
        }
        PartitionKind::Noniid => data::partition_noniid(
            &ds,
            n,
            LabelSortSpec { shards_per_device: cfg.partition.shards_per_device },
            cfg.seed,
        ),
    }
}

fn solve_contract(
    inc: &IncentiveConfig,
    train: &Dataset,
    part: &DevicePartition,
    c: usize,
) -> Result<(Vec<DeviceEcon>, DesignedContract, f64)> {
    let h2: Vec<f64> = match &inc.h2 {
        Some(h) => h.clone(),
        None => (0..part.device_count())
            .map(|i| privacy::h_value(&train.slice(part.range(i)).0).map(|h| h.h2))
            .collect::<Result<_>>()?,
    };
    let econ = incentive::sort_econ(
        inc.mu
            .iter()
            .zip(&h2)
            .enumerate()
            .map(|(id, (&mu, &h2))| DeviceEcon { id, mu, h2, c })
            .collect(),
    )?;
    let gamma = inc.gamma.build();
    let opts = SolverOptions { sigma_min2: inc.sigma_min2 };
    let lambda = match inc.total_reward {
        Some(target) => incentive::lambda_for_total_reward(&econ, target, &gamma, &opts)?,
        None => inc.lambda,
    };
    let designed = incentive::design_contract(&econ, lambda, &gamma, &opts)?;
    Ok((econ, designed, lambda))
}

/// Loads data, samples the fleet, calibrates the channel and fixes noise.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let (train, part) = partition(cfg, train)?;
    let n = part.device_count();
    let sizes = part.sizes();
    let sys = &cfg.system;
    let (s_lo, s_hi) = sys.mac_scale.bounds();
    let (p_lo, p_hi) = sys.tx_power_dbm.bounds();
    let fleet_spec = FleetSpec {
        mac_rate_kmacs: sys.mac_rate_kmacs,
        mac_scale_min: s_lo,
        mac_scale_max: s_hi,
        tx_power_dbm_min: p_lo,
        tx_power_dbm_max: p_hi,
    };
    let fleet = system::sample_fleet(&fleet_spec, &sizes, cfg.seed);
    let entries = (train.d() * train.o()) as f64;
    let mut channel = ChannelModel {
        bandwidth: sys.bandwidth_hz,
        noise_power: sys.noise_power_w,
        mean_gain: sys.mean_gain,
        update_size: sys.update_size_bits.unwrap_or(32.0 * entries),
        download_time: sys.t_download_s,
        deadline: sys.round_deadline_s,
        mac_per_sample: sys.mac_per_sample.unwrap_or(entries),
    };
    channel.validate()?;

    let batch = match sys.mode {
        ModeConfig::Fixed => {
            let b = cfg.training.batch.expect("validated");
            let min_l = sizes.iter().copied().min().unwrap_or(0);
            if b > min_l {
                return Err(config_err("training.batch", format!("{b} exceeds the smallest local dataset ({min_l})")));
            }
            BatchMode::Fixed(b)
        }
        ModeConfig::Adaptive => BatchMode::Adaptive,
    };
    if let Some(target) = sys.straggler_ratio {
        let b = match batch {
            BatchMode::Fixed(b) => b,
            BatchMode::Adaptive => 1,
        };
        channel = system::straggler_calibrate(target, &fleet, &channel, cfg.training.tau, b)?;
    }

    let contract = match &cfg.incentive {
        Some(inc) => Some(solve_contract(inc, &train, &part, cfg.coding.c)?),
        None => None,
    };
    let sigma2 = match &cfg.coding.sigma2 {
        NoiseSpec::Uniform(s) => vec![*s; n],
        NoiseSpec::PerDevice(v) => v.clone(),
        NoiseSpec::Keyword(_) => {
            let (econ, designed, _) = contract.as_ref().expect("validated");
            let mut s = vec![0.0; n];
            for (e, &v) in econ.iter().zip(&designed.sigma2) {
                s[e.id] = v;
            }
            s
        }
    };
    let privacy = privacy::device_profiles(&train, &part, cfg.coding.c, &sigma2)?;
    Ok(Prepared {
        scenario: Scenario {
            train,
            test,
            partition: part,
            fleet,
            channel,
            server_mac_rate: sys.server_mac_rate_kmacs * 1e3,
            coded_rows: cfg.coding.c,
            sigma2,
            seed: cfg.seed,
        },
        train: TrainConfig {
            rounds: cfg.training.rounds,
            tau: cfg.training.tau,
            schedule: cfg.training.schedule,
            batch,
            server_batch: cfg.training.server_batch,
        },
        privacy,
        contract,
    })
}

/// Headline numbers of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub framework: Framework,
    pub rounds: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_accuracy: Option<f64>,
    pub optimal_loss: f64,
    pub rank_deficient: bool,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub smoothness: f64,
    pub server_batch: usize,
    pub mean_arrival_probability: f64,
    pub system_epsilon_bits: Option<f64>,
    pub bound: Option<VarianceBound>,
    pub convergence_bound: Option<f64>,
}

impl Summary {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:?}");
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        vec![
            ("framework", self.framework.name().to_string()),
            ("rounds", self.rounds.to_string()),
            ("final_train_loss", f(self.final_train_loss)),
            ("final_test_loss", f(self.final_test_loss)),
            ("final_accuracy", opt(self.final_accuracy)),
            ("optimal_loss", f(self.optimal_loss)),
            ("rank_deficient", self.rank_deficient.to_string()),
            ("initial_gap", f(self.initial_gap)),
            ("final_gap", f(self.final_gap)),
            ("smoothness", f(self.smoothness)),
            ("server_batch", self.server_batch.to_string()),
            ("mean_arrival_probability", f(self.mean_arrival_probability)),
            ("system_epsilon_bits", opt(self.system_epsilon_bits)),
            ("rho1", opt(self.bound.map(|b| b.rho1))),
            ("rho2", opt(self.bound.map(|b| b.rho2))),
            ("rho", opt(self.bound.map(|b| b.rho()))),
            ("convergence_bound", opt(self.convergence_bound)),
        ]
    }
}

/// Bound constants for a finished run; `None` where the bound does not apply.
fn bounds(cfg: &ExperimentConfig, prep: &Prepared, out: &RunOutput, w_star: &Matrix) -> (Option<VarianceBound>, Option<f64>) {
    let s = &prep.scenario;
    let w0 = match out.initial_model() {
        Some(w) => w,
        None => return (None, None),
    };
    let phi = cfg
        .analysis
        .phi
        .unwrap_or_else(|| 2.0 * linalg::frob_sq(w0).sqrt().max(linalg::frob_sq(w_star).sqrt()));
    let consts = match analysis::estimate_constants(&s.train, &s.partition, phi) {
        Ok(c) => c,
        Err(_) => return (None, None),
    };
    let batches: Vec<usize> = match prep.train.batch {
        BatchMode::Fixed(b) => vec![b; s.partition.device_count()],
        BatchMode::Adaptive => vec![1; s.partition.device_count()],
    };
    let n_dim = cfg.analysis.n_dim.unwrap_or(s.train.o());
    let rho1 = analysis::rho1(&consts, &out.arrival_probabilities, &batches, out.tau);
    let rho2 = analysis::rho2(&consts, &s.sigma2, s.coded_rows, s.train.m(), s.train.d(), n_dim, out.tau);
    let bound = match (rho1, rho2) {
        (Ok(rho1), Ok(rho2)) => VarianceBound { rho1, rho2 },
        _ => return (None, None),
    };
    let conv = analysis::convergence_bound(&consts, &bound, &out.etas, w0, w_star).ok();
    (Some(bound), conv)
}

/// Runs one framework on a prepared scenario and summarises it.
pub fn execute(cfg: &ExperimentConfig, prep: &Prepared, framework: Framework) -> Result<(RunOutput, Summary)> {
    let out = simulation::run(framework, &prep.scenario, &prep.train)?;
    let s = &prep.scenario;
    let opt = training::solve_optimal(&s.train);
    let optimal_loss = training::dataset_loss(&s.train, &opt.w);
    let initial = out.initial_model().map(|w| training::dataset_loss(&s.train, w)).unwrap_or(f64::NAN);
    let final_train_loss = training::dataset_loss(&s.train, &out.final_model);
    let (bound, convergence_bound) = bounds(cfg, prep, &out, &opt.w);
    let p = &out.arrival_probabilities;
    let summary = Summary {
        framework,
        rounds: out.metrics.len(),
        final_train_loss,
        final_test_loss: training::dataset_loss(&s.test, &out.final_model),
        final_accuracy: simulation::accuracy(&s.test, &out.final_model),
        optimal_loss,
        rank_deficient: opt.rank_deficient,
        initial_gap: initial - optimal_loss,
        final_gap: final_train_loss - optimal_loss,
        smoothness: out.smoothness,
        server_batch: out.server_batch,
        mean_arrival_probability: p.iter().sum::<f64>() / p.len() as f64,
        system_epsilon_bits: privacy::system_budget(&prep.privacy)?.bits(),
        bound,
        convergence_bound,
    };
    Ok((out, summary))
}

pub fn write_summary(path: impl AsRef<Path>, summary: &Summary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value"])?;
    for (k, v) in summary.rows() {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[0].to_string(), rec[1].to_string()))
        })
        .collect()
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.ncols()).map(|j| format!("col{j}")))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            values.push(cell.parse::<f64>().map_err(|_| Error::CsvCell {
                row: idx + 2,
                column: format!("col{j}"),
                message: format!("`{cell}` is not a number"),
            })?);
        }
        rows += 1;
    }
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn write_privacy_csv(path: impl AsRef<Path>, profiles: &[PrivacyProfile]) -> Result<()> {
    write_privacy(fs::File::create(path)?, profiles)
}

pub fn write_privacy<W: std::io::Write>(out: W, profiles: &[PrivacyProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["device", "h2", "sigma2", "epsilon_bits"])?;
    for (i, p) in profiles.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:?}", p.h2), format!("{:?}", p.sigma2), p.epsilon.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Contract table in original device ids, plus a trailing summary table.
pub fn write_contract_csv(path: impl AsRef<Path>, econ: &[DeviceEcon], designed: &DesignedContract) -> Result<()> {
    write_contract(fs::File::create(path)?, econ, designed)
}

pub fn write_contract<W: std::io::Write>(out: W, econ: &[DeviceEcon], designed: &DesignedContract) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record(["device", "epsilon_bits", "sigma2", "reward", "device_utility"])?;
    for ((e, it), s2) in econ.iter().zip(&designed.contract.items).zip(&designed.sigma2) {
        w.write_record([
            e.id.to_string(),
            format!("{:?}", it.epsilon),
            format!("{s2:?}"),
            format!("{:?}", it.reward),
            format!("{:?}", incentive::device_utility(it.epsilon, it.reward, e.mu)),
        ])?;
    }
    w.write_record(["server_utility", "total_reward"])?;
    w.write_record([format!("{:?}", designed.server_utility), format!("{:?}", designed.contract.total_reward())])?;
    w.flush()?;
    Ok(())
}

pub fn write_lambda_table<W: std::io::Write>(out: W, rows: &[incentive::LambdaRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "total_reward", "sigma2_total"])?;
    for r in rows {
        w.write_record([format!("{:?}", r.lambda), format!("{:?}", r.total_reward), format!("{:?}", r.sigma2_total)])?;
    }
    w.flush()?;
    Ok(())
}

/// Every derived stream seed the run can consume.
pub fn write_manifest(path: impl AsRef<Path>, cfg: &ExperimentConfig, prep: &Prepared, framework: Framework) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stream", "path", "seed"])?;
    let master = cfg.seed;
    let n = prep.scenario.partition.device_count();
    let mut row = |s: Stream, p: &[u64]| -> Result<()> {
        let path = p.iter().map(u64::to_string).collect::<Vec<_>>().join("/");
        w.write_record([format!("{s:?}"), path, rng::derive_seed(master, s, p).to_string()])?;
        Ok(())
    };
    row(Stream::Synthetic, &[])?;
    row(Stream::Partition, &[])?;
    row(Stream::Init, &[])?;
    for i in 0..n as u64 {
        row(Stream::Fleet, &[i])?;
        row(Stream::Coding, &[i])?;
    }
    let tau_rounds = prep.train.rounds as u64;
    for k in 0..tau_rounds {
        for i in 0..n as u64 {
            row(Stream::Channel, &[k, i])?;
            row(Stream::DeviceBatch, &[k, i])?;
        }
        row(Stream::ServerBatch, &[k])?;
    }
    drop(row);
    w.write_record(["framework", "", framework.name()])?;
    w.flush()?;
    Ok(())
}

/// Artifacts of a finished run.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub summary: Summary,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MODEL_FILE: &str = "final_model.csv";

fn write_run(dir: &Path, cfg: &ExperimentConfig, prep: &Prepared, out: &RunOutput, summary: &Summary) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    simulation::write_metrics_csv(dir.join(METRICS_FILE), &out.metrics)?;
    write_summary(dir.join(SUMMARY_FILE), summary)?;
    write_matrix_csv(dir.join(MODEL_FILE), &out.final_model)?;
    write_privacy_csv(dir.join("privacy.csv"), &prep.privacy)?;
    if let Some((econ, designed, _)) = &prep.contract {
        write_contract_csv(dir.join("contract.csv"), econ, designed)?;
    }
    write_manifest(dir.join("manifest.csv"), cfg, prep, out.framework)
}

/// SCFL end to end; artifacts land in `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prep = prepare(cfg)?;
    let (output, summary) = execute(cfg, &prep, Framework::Scfl)?;
    write_run(&cfg.output_dir, cfg, &prep, &output, &summary)?;
    Ok(ExperimentReport { dir: cfg.output_dir.clone(), output, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    StragglerRatio,
    CodedCountC,
    Sigma2,
    Lambda,
    TotalReward,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Tau,
        SweepAxis::StragglerRatio,
        SweepAxis::CodedCountC,
        SweepAxis::Sigma2,
        SweepAxis::Lambda,
        SweepAxis::TotalReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::StragglerRatio => "straggler_ratio",
            SweepAxis::CodedCountC => "coded_count_c",
            SweepAxis::Sigma2 => "sigma2",
            SweepAxis::Lambda => "lambda",
            SweepAxis::TotalReward => "total_reward",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Copy of `cfg` with this axis set to `v`.
    pub fn apply(self, cfg: &ExperimentConfig, v: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let count = |field: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(config_err(field, format!("sweep value {v} is not a positive integer")))
            }
        };
        match self {
            SweepAxis::Tau => c.training.tau = count("training.tau")?,
            SweepAxis::StragglerRatio => c.system.straggler_ratio = Some(v),
            SweepAxis::CodedCountC => c.coding.c = count("coding.c")?,
            SweepAxis::Sigma2 => c.coding.sigma2 = NoiseSpec::Uniform(v),
            SweepAxis::Lambda | SweepAxis::TotalReward => {
                let inc = c
                    .incentive
                    .as_mut()
                    .ok_or_else(|| config_err("incentive", format!("sweeping {} needs an [incentive] section", self.name())))?;
                if self == SweepAxis::Lambda {
                    inc.lambda = v;
                    inc.total_reward = None;
                } else {
                    inc.total_reward = Some(v);
                }
                c.coding.sigma2 = NoiseSpec::Keyword("contract".into());
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Seeds `seed, seed + 1, ..`; the same seeds are reused at every value.
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFailure {
    pub value: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    pub mean_train_loss: f64,
    pub sd_train_loss: f64,
    pub mean_test_loss: f64,
    pub sd_test_loss: f64,
    pub mean_gap: f64,
    pub sd_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    pub failures: Vec<SweepFailure>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Runs every (value, seed) pair concurrently, each into its own directory
/// under `cfg.output_dir`, then aggregates in value order.
pub fn run_sweep(cfg: &ExperimentConfig, sweep: &SweepSpec) -> Result<SweepReport> {
    if sweep.values.is_empty() {
        return Err(config_err("sweep.values", "must not be empty"));
    }
    if sweep.repetitions == 0 {
        return Err(config_err("sweep.repetitions", "must be at least 1"));
    }
    let jobs: Vec<(usize, f64, u64)> = sweep
        .values
        .iter()
        .enumerate()
        .flat_map(|(vi, &v)| (0..sweep.repetitions as u64).map(move |r| (vi, v, cfg.seed.wrapping_add(r))))
        .collect();
    let results: Vec<std::result::Result<SweepPoint, SweepFailure>> = jobs
        .par_iter()
        .map(|&(vi, value, seed)| {
            let attempt = || -> Result<Summary> {
                let mut c = sweep.axis.apply(cfg, value)?;
                c.seed = seed;
                c.output_dir = cfg.output_dir.join(format!("{}_{vi}", sweep.axis.name())).join(format!("seed_{seed}"));
                Ok(run_experiment(&c)?.summary)
            };
            attempt()
                .map(|summary| SweepPoint { value, seed, summary })
                .map_err(|e| SweepFailure { value, seed, error: e.to_string() })
        })
        .collect();

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(f) => failures.push(f),
        }
    }
    let rows = sweep
        .values
        .iter()
        .map(|&value| {
            let here: Vec<&SweepPoint> = points.iter().filter(|p| p.value == value).collect();
            let col = |f: fn(&Summary) -> f64| mean_sd(&here.iter().map(|p| f(&p.summary)).collect::<Vec<_>>());
            let (mean_train_loss, sd_train_loss) = col(|s| s.final_train_loss);
            let (mean_test_loss, sd_test_loss) = col(|s| s.final_test_loss);
            let (mean_gap, sd_gap) = col(|s| s.final_gap);
            SweepRow { value, runs: here.len(), mean_train_loss, sd_train_loss, mean_test_loss, sd_test_loss, mean_gap, sd_gap }
        })
        .collect();
    let report = SweepReport { rows, points, failures };
    write_sweep(&cfg.output_dir, sweep.axis, &report)?;
    Ok(report)
}

fn write_sweep(dir: &Path, axis: SweepAxis, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record([
        axis.name(),
        "runs",
        "mean_train_loss",
        "sd_train_loss",
        "mean_test_loss",
        "sd_test_loss",
        "mean_gap",
        "sd_gap",
    ])?;
    for r in &report.rows {
        w.write_record([
            format!("{:?}", r.value),
            r.runs.to_string(),
            format!("{:?}", r.mean_train_loss),
            format!("{:?}", r.sd_train_loss),
            format!("{:?}", r.mean_test_loss),
            format!("{:?}", r.sd_test_loss),
            format!("{:?}", r.mean_gap),
            format!("{:?}", r.sd_gap),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_details.csv"))?;
    w.write_record([axis.name(), "seed", "final_train_loss", "final_test_loss", "final_gap", "final_accuracy"])?;
    for p in &report.points {
        w.write_record([
            format!("{:?}", p.value),
            p.seed.to_string(),
            format!("{:?}", p.summary.final_train_loss),
            format!("{:?}", p.summary.final_test_loss),
            format!("{:?}", p.summary.final_gap),
            p.summary.final_accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
    w.write_record([axis.name(), "seed", "error"])?;
    for f in &report.failures {
        w.write_record([format!("{:?}", f.value), f.seed.to_string(), f.error.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs each framework on the same prepared scenario. Per-framework metrics
/// go to `<name>/metrics.csv`; final numbers to `comparison.csv`.
pub fn compare_baselines(cfg: &ExperimentConfig, kinds: &[Framework]) -> Result<Vec<Summary>> {
    if kinds.is_empty() {
        return Err(config_err("kinds", "need at least one framework"));
    }
    let prep = prepare(cfg)?;
    let mut summaries = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (out, summary) = execute(cfg, &prep, kind)?;
        write_run(&cfg.output_dir.join(kind.name()), cfg, &prep, &out, &summary)?;
        summaries.push(summary);
    }
    let mut w = csv::Writer::from_path(cfg.output_dir.join("comparison.csv"))?;
    w.write_record(["framework", "rounds", "final_train_loss", "final_test_loss", "final_gap", "final_accuracy"])?;
    for s in &summaries {
        w.write_record([
            s.framework.name().to_string(),
            s.rounds.to_string(),
            format!("{:?}", s.final_train_loss),
            format!("{:?}", s.final_test_loss),
            format!("{:?}", s.final_gap),
            s.final_accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(summaries)
}
