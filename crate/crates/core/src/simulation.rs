//! Round-by-round federated training with simulated timing.
//!
//! All four frameworks share one driver. Within a round every device and the
//! server work from the same snapshot of the global model, each with its own
//! random stream, and the results are reduced in device order. Output is
//! therefore independent of the number of worker threads.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coding::{self, GlobalCodedDataset};
use crate::data::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Stream};
use crate::system::{self, ChannelModel, DeviceProfile};
use crate::training::{self, LocalUpdate, LrSchedule, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Scfl,
    FedAvg,
    CodedFedL,
    DpCfl,
}

impl Framework {
    pub const ALL: [Framework; 4] = [Framework::Scfl, Framework::FedAvg, Framework::CodedFedL, Framework::DpCfl];

    pub fn name(self) -> &'static str {
        match self {
            Framework::Scfl => "scfl",
            Framework::FedAvg => "fedavg",
            Framework::CodedFedL => "codedfedl",
            Framework::DpCfl => "dpcfl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s.to_ascii_lowercase())
    }

    fn uses_devices(self) -> bool {
        self != Framework::DpCfl
    }

    fn uses_server(self) -> bool {
        self != Framework::FedAvg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "b", rename_all = "lowercase")]
pub enum BatchMode {
    /// Every device uses batch `b`; arrivals follow the channel draw.
    Fixed(usize),
    /// Each device picks the largest batch its realised channel allows.
    Adaptive,
}

/// Everything fixed before training starts.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: DevicePartition,
    pub fleet: Vec<DeviceProfile>,
    pub channel: ChannelModel,
    pub server_mac_rate: f64,
    pub coded_rows: usize,
    pub sigma2: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub rounds: usize,
    pub tau: usize,
    pub schedule: LrSchedule,
    pub batch: BatchMode,
    /// Overrides the deadline-derived server batch.
    pub server_batch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub time_s: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub arrived: usize,
    pub mean_batch: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub framework: Framework,
    /// Learning-rate weighted average of the iterates.
    pub final_model: Matrix,
    /// Iterates `W_0 .. W_{K-1}`.
    pub iterates: Vec<Matrix>,
    pub etas: Vec<f64>,
    pub metrics: Vec<RoundMetrics>,
    pub arrival_probabilities: Vec<f64>,
    pub server_batch: usize,
    pub smoothness: f64,
    pub tau: usize,
    pub coded: Option<GlobalCodedDataset>,
}

impl RunOutput {
    pub fn initial_model(&self) -> Option<&Matrix> {
        self.iterates.first()
    }
}

pub fn smoothness(ds: &Dataset) -> f64 {
    let x = ds.features();
    linalg::power_iteration(&(x.transpose() * x), 1e-10, 100_000)
}

/// Argmax accuracy when labels have several columns; `None` for regression.
pub fn accuracy(ds: &Dataset, w: &Matrix) -> Option<f64> {
    if ds.o() < 2 {
        return None;
    }
    let pred = ds.features() * w;
    let hits = (0..ds.m())
        .filter(|&i| pred.row(i).transpose().argmax().0 == ds.labels().row(i).transpose().argmax().0)
        .count();
    Some(hits as f64 / ds.m() as f64)
}

fn validate(s: &Scenario, cfg: &TrainConfig) -> Result<()> {
    let n = s.partition.device_count();
    let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
    if s.partition.ranges().last().map(|r| r.end) != Some(s.train.m()) {
        return bad("partition", "does not cover the training set".into());
    }
    if s.fleet.len() != n {
        return bad("fleet", format!("{} profiles for {n} devices", s.fleet.len()));
    }
    if s.sigma2.len() != n {
        return bad("sigma2", format!("{} noise levels for {n} devices", s.sigma2.len()));
    }
    for (i, (p, l)) in s.fleet.iter().zip(s.partition.sizes()).enumerate() {
        if p.samples != l {
            return bad("fleet", format!("device {i} profile lists {} samples, partition gives {l}", p.samples));
        }
        if !(p.mac_rate > 0.0 && p.tx_power > 0.0) {
            return bad("fleet", format!("device {i} needs positive MAC rate and power"));
        }
    }
    if s.test.d() != s.train.d() || s.test.o() != s.train.o() {
        return bad("test", "test set shape differs from training set".into());
    }
    if cfg.tau == 0 {
        return bad("tau", "must be at least 1".into());
    }
    if let BatchMode::Fixed(b) = cfg.batch {
        let min_l = s.partition.sizes().into_iter().min().unwrap_or(0);
        if b == 0 || b > min_l {
            return bad("batch", format!("fixed batch {b} must lie in [1, {min_l}]"));
        }
    }
    if s.coded_rows == 0 {
        return bad("c", "must be positive".into());
    }
    s.channel.validate()
}

/// Executes one framework end to end.
pub fn run(framework: Framework, s: &Scenario, cfg: &TrainConfig) -> Result<RunOutput> {
    validate(s, cfg)?;
    let n = s.partition.device_count();
    let tau = if framework == Framework::CodedFedL { 1 } else { cfg.tau };
    let l_smooth = smoothness(&s.train);
    let schedule: Schedule = training::make_schedule(cfg.schedule, l_smooth, tau)?;

    let coded = if framework.uses_server() {
        let sigma2: Vec<f64> = if framework == Framework::CodedFedL { vec![0.0; n] } else { s.sigma2.clone() };
        let shards = coding::encode_fleet(&s.train, &s.partition, s.coded_rows, &sigma2, s.seed)?;
        Some(coding::build_global(&shards)?)
    } else {
        None
    };
    let b_s = cfg
        .server_batch
        .unwrap_or_else(|| system::server_batch(s.server_mac_rate, &s.channel, tau, s.coded_rows));
    if framework.uses_server() && (b_s == 0 || b_s > s.coded_rows) {
        return Err(Error::Config {
            field: "server_batch".into(),
            message: format!("server batch {b_s} outside [1, {}]", s.coded_rows),
        });
    }

    let p: Vec<f64> = s
        .fleet
        .iter()
        .map(|dev| {
            let b = match cfg.batch {
                BatchMode::Fixed(b) => b,
                BatchMode::Adaptive => 1,
            };
            system::arrival_probability(dev, &s.channel, tau, b)
        })
        .collect();
    if matches!(framework, Framework::Scfl | Framework::CodedFedL) {
        if let Some(i) = p.iter().position(|&pi| pi <= 0.0) {
            return Err(Error::Config {
                field: "fleet".into(),
                message: format!("device {i} can never meet the deadline, so its weight 1/p is undefined"),
            });
        }
    }

    let locals: Vec<(Matrix, Matrix)> = (0..n).map(|i| s.train.slice(s.partition.range(i))).collect();
    let mut w = linalg::standard_normal(s.train.d(), s.train.o(), &mut rng::stream(s.seed, Stream::Init, &[]));
    let mut weighted = Matrix::zeros(w.nrows(), w.ncols());
    let mut eta_sum = 0.0;
    let mut iterates = Vec::with_capacity(cfg.rounds);
    let mut etas = Vec::with_capacity(cfg.rounds);
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for k in 0..cfg.rounds {
        let eta = schedule.eta(k);
        iterates.push(w.clone());
        etas.push(eta);
        weighted += &w * eta;
        eta_sum += eta;

        let updates: Vec<LocalUpdate> = if framework.uses_devices() {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let dev = &s.fleet[i];
                    let gain = system::sample_gain(&s.channel, &mut rng::stream(s.seed, Stream::Channel, &[k as u64, i as u64]));
                    let (batch, arrived) = match cfg.batch {
                        BatchMode::Fixed(b) => (b, system::timing_for_gain(dev, &s.channel, tau, b, gain).arrived),
                        BatchMode::Adaptive => {
                            let b = system::adapt_batch(dev, &s.channel, tau, gain);
                            (b, b > 0)
                        }
                    };
                    // stragglers' work never reaches the server, so skip it
                    let grad = if arrived {
                        let (x, y) = &locals[i];
                        let seed = rng::derive_seed(s.seed, Stream::DeviceBatch, &[k as u64, i as u64]);
                        training::local_train(x, y, &w, tau, eta, batch, seed).map_err(|e| at_round(e, k))?
                    } else {
                        Matrix::zeros(w.nrows(), w.ncols())
                    };
                    Ok(LocalUpdate { device: i, grad, arrived, batch })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let server = match &coded {
            Some(coded) if framework.uses_server() => {
                let seed = rng::derive_seed(s.seed, Stream::ServerBatch, &[k as u64]);
                Some(
                    training::server_train_with(coded, &w, tau, eta, b_s, framework == Framework::Scfl, seed)
                        .map_err(|e| at_round(e, k))?,
                )
            }
            _ => None,
        };

        let g = match framework {
            Framework::Scfl | Framework::CodedFedL => {
                training::aggregate(&updates, &p, server.as_ref().expect("coded frameworks run the server"))?
            }
            Framework::FedAvg => updates
                .iter()
                .filter(|u| u.arrived)
                .fold(Matrix::zeros(w.nrows(), w.ncols()), |acc, u| acc + &u.grad),
            Framework::DpCfl => server.expect("server-only framework"),
        };
        w -= g * eta;
        if !linalg::is_finite(&w) {
            return Err(Error::Divergence { round: k, step: tau });
        }

        let avg = &weighted / eta_sum;
        let arrived: Vec<&LocalUpdate> = updates.iter().filter(|u| u.arrived).collect();
        metrics.push(RoundMetrics {
            round: k + 1,
            time_s: (k + 1) as f64 * s.channel.deadline,
            train_loss: training::dataset_loss(&s.train, &avg),
            test_loss: training::dataset_loss(&s.test, &avg),
            test_accuracy: accuracy(&s.test, &avg),
            arrived: arrived.len(),
            mean_batch: if arrived.is_empty() {
                0.0
            } else {
                arrived.iter().map(|u| u.batch as f64).sum::<f64>() / arrived.len() as f64
            },
        });
    }

    let final_model = if eta_sum > 0.0 { weighted / eta_sum } else { w };
    Ok(RunOutput {
        framework,
        final_model,
        iterates,
        etas,
        metrics,
        arrival_probabilities: p,
        server_batch: b_s,
        smoothness: l_smooth,
        tau,
        coded,
    })
}

fn at_round(e: Error, round: usize) -> Error {
    match e {
        Error::Divergence { step, .. } => Error::Divergence { round, step },
        other => other,
    }
}

pub fn run_scfl(s: &Scenario, cfg: &TrainConfig) -> Result<RunOutput> {
    run(Framework::Scfl, s, cfg)
}

pub fn run_baseline(kind: Framework, s: &Scenario, cfg: &TrainConfig) -> Result<RunOutput> {
    run(kind, s, cfg)
}

pub const METRICS_HEADER: [&str; 7] = [
    "round",
    "k_time_s",
    "train_loss",
    "test_loss",
    "test_accuracy",
    "arrived_count",
    "mean_batch",
];

pub fn write_metrics<W: std::io::Write>(out: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            format!("{:?}", m.time_s),
            format!("{:?}", m.train_loss),
            format!("{:?}", m.test_loss),
            m.test_accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
            m.arrived.to_string(),
            format!("{:?}", m.mean_batch),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[RoundMetrics]) -> Result<()> {
    write_metrics(std::fs::File::create(path)?, metrics)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::CsvHeader(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let cell = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|_| Error::CsvCell {
                row: idx + 2,
                column: METRICS_HEADER[j].into(),
                message: format!("`{}` is not a number", &rec[j]),
            })
        };
        out.push(RoundMetrics {
            round: cell(0)? as usize,
            time_s: cell(1)?,
            train_loss: cell(2)?,
            test_loss: cell(3)?,
            test_accuracy: if rec[4].is_empty() { None } else { Some(cell(4)?) },
            arrived: cell(5)? as usize,
            mean_batch: cell(6)?,
        });
    }
    Ok(out)
}
