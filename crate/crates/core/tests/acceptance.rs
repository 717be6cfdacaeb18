//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{contract_grid_oracle, contract_objective, gradient, h2_brute, half_sq_loss, random_econ, rng, synthetic_config, M};
use rand::Rng;
use rayon::prelude::*;
use scfl_core::analysis::{self, MomentSpec, UpdateProbe, VarianceBound};
use scfl_core::harness::{self, ExperimentConfig, SweepAxis, SweepSpec};
use scfl_core::incentive::{self, Gamma, SolverOptions};
use scfl_core::privacy::{self, Budget};
use scfl_core::{data, linalg, simulation, training, DevicePartition, Framework};

type Check = Result<(bool, Vec<String>), String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn frob(m: &M) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Unbiased aggregate: MC mean within 4 standard errors of the gradient.
fn unbiasedness() -> Check {
    let ds = data::generate_synthetic(11, 40, 5, 1, 0.1).map_err(|e| e.to_string())?;
    let part = DevicePartition::even(40, 4).map_err(|e| e.to_string())?;
    let p = [0.3, 0.5, 0.7, 0.9];
    let sigma2 = [0.25; 4];
    let batches = [5; 4];
    let probe = UpdateProbe { data: &ds, partition: &part, p: &p, batches: &batches, sigma2: &sigma2, c: 200, server_batch: 100, tau: 1 };
    let w = linalg::standard_normal(5, 1, &mut scfl_core::rng::from_seed(5));
    let draws = 20_000;
    let samples: Vec<M> = (0..draws)
        .into_par_iter()
        .map(|r| probe.draw(&w, 1_000 + r as u64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let truth = gradient(ds.features(), ds.labels(), &w);
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for j in 0..truth.len() {
        let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst = worst.max((mean - truth[j]).abs() / (var / n).sqrt());
    }
    Ok((worst <= 4.0, vec![format!("largest deviation {worst:.2} standard errors over {} entries", truth.len())]))
}

/// Random-matrix and sampling second moments within 5%.
fn moments() -> Check {
    let spec = MomentSpec {
        m: 40,
        c: 200,
        d: 5,
        sigma2: vec![0.25; 4],
        server_batch: 60,
        local_rows: 10,
        local_batch: 3,
        draws: 5000,
        seed: 21,
    };
    let rep = analysis::wishart_selfcheck(&spec).map_err(|e| e.to_string())?;
    let required = [&rep.wishart, &rep.noise, &rep.server_sampling, &rep.device_sampling];
    let pass = required.iter().all(|p| p.rel_error() <= 0.05);
    let notes = rep
        .pairs()
        .iter()
        .map(|p| {
            let role = if p.name == "noise_total" { " (reference, not gated)" } else { "" };
            format!("{}: empirical {:.6} vs {:.6}, rel err {:.4}{role}", p.name, p.empirical, p.theoretical, p.rel_error())
        })
        .collect();
    Ok((pass, notes))
}

/// Empirical update error at frozen models never exceeds the bound.
fn variance_bounds() -> Check {
    let mut r = rng(31);
    let mut notes = Vec::new();
    let mut pass = true;
    for inst in 0..10 {
        let n = r.random_range(2..=4);
        let l = r.random_range(5..=12);
        let m = n * l;
        let d = r.random_range(2..=5);
        let o = r.random_range(1..=2);
        let c = r.random_range(20..=100);
        let tau = r.random_range(1..=3);
        let ds = data::generate_synthetic(100 + inst, m, d, o, 0.1).map_err(|e| e.to_string())?;
        let part = DevicePartition::even(m, n).map_err(|e| e.to_string())?;
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.3..1.0)).collect();
        let batches: Vec<usize> = (0..n).map(|_| r.random_range(1..=l)).collect();
        let sigma2: Vec<f64> = (0..n).map(|_| r.random_range(0.0..0.5)).collect();
        let server_batch = r.random_range(1..=c);
        let w = linalg::standard_normal(d, o, &mut scfl_core::rng::from_seed(inst));
        let probe = UpdateProbe { data: &ds, partition: &part, p: &p, batches: &batches, sigma2: &sigma2, c, server_batch, tau };
        let emp = probe.mean_sq_error(&w, 2000, 7 + inst).map_err(|e| e.to_string())?;
        let consts = analysis::estimate_constants(&ds, &part, frob(&w)).map_err(|e| e.to_string())?;
        let bound = VarianceBound {
            rho1: analysis::rho1(&consts, &p, &batches, tau).map_err(|e| e.to_string())?,
            rho2: analysis::rho2(&consts, &sigma2, c, m, d, o, tau).map_err(|e| e.to_string())?,
        };
        let ok = emp <= bound.rho();
        pass &= ok;
        notes.push(format!("instance {inst} (N={n}, tau={tau}, c={c}): empirical {emp:.4e} <= bound {:.4e}: {ok}", bound.rho()));
    }
    Ok((pass, notes))
}

fn convergence_config(seed: u64, dir: &std::path::Path) -> Result<ExperimentConfig, String> {
    let tau = 2;
    let beta = 1000.0;
    let text = synthetic_config(
        seed,
        dir,
        10,
        200,
        5,
        100,
        0.01,
        0.2,
        &format!(
            "rounds = 500\ntau = {tau}\nbatch = 10\nschedule = {{ kind = \"inverse\", beta = {beta}, scale = {} }}",
            0.5 * beta / tau as f64
        ),
    )
    .replace("noniid", "iid");
    ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())
}

/// Inverse-schedule SCFL shrinks the gap below 5% and stays under the bound.
fn convergence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut pass = true;
    let mut notes = Vec::new();
    for seed in 1..=5 {
        let cfg = convergence_config(seed, dir.path())?;
        let prep = harness::prepare(&cfg).map_err(|e| e.to_string())?;
        let out = simulation::run(Framework::Scfl, &prep.scenario, &prep.train).map_err(|e| e.to_string())?;
        let train = &prep.scenario.train;
        let w_star = training::solve_optimal(train).w;
        let f_star = half_sq_loss(train.features(), train.labels(), &w_star);
        let w0 = &out.iterates[0];
        let initial = half_sq_loss(train.features(), train.labels(), w0) - f_star;
        let phi = out.iterates.iter().map(frob).fold(frob(&w_star), f64::max);
        let consts = analysis::estimate_constants(train, &prep.scenario.partition, phi).map_err(|e| e.to_string())?;
        let batches = vec![10; prep.scenario.partition.device_count()];
        let bound = VarianceBound {
            rho1: analysis::rho1(&consts, &out.arrival_probabilities, &batches, out.tau).map_err(|e| e.to_string())?,
            rho2: analysis::rho2(&consts, &prep.scenario.sigma2, 100, train.m(), train.d(), train.o(), out.tau)
                .map_err(|e| e.to_string())?,
        };
        let mut under = true;
        for k in (50..=500).step_by(50) {
            let gap = out.metrics[k - 1].train_loss - f_star;
            let b = analysis::convergence_bound(&consts, &bound, &out.etas[..k], w0, &w_star).map_err(|e| e.to_string())?;
            under &= gap <= b;
        }
        let final_gap = out.metrics[499].train_loss - f_star;
        let ratio = final_gap / initial;
        pass &= ratio < 0.05 && under;
        notes.push(format!("seed {seed}: final/initial gap {ratio:.4e}, under bound at every 50th round: {under}"));
    }
    Ok((pass, notes))
}

/// Privacy accountant against brute force and its own inverse.
fn privacy_accountant() -> Check {
    let mut r = rng(51);
    let mut h_ok = 0;
    for _ in 0..100 {
        let (rows, cols) = (r.random_range(1..=12), r.random_range(1..=6));
        // integer entries keep every partial sum exact
        let x = M::from_fn(rows, cols, |_, _| r.random_range(-9..=9) as f64);
        if privacy::h_value(&x).map_err(|e| e.to_string())?.h2 == h2_brute(&x) {
            h_ok += 1;
        }
    }
    let mut worst_trip: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..100 {
        let h2 = r.random_range(0.0..50.0);
        let c = r.random_range(1..=500);
        let grid: Vec<f64> = (0..200).map(|k| 1e-3 * 1.08f64.powi(k)).collect();
        let mut prev = f64::INFINITY;
        for &s2 in &grid {
            let eps = match privacy::epsilon(h2, c, s2).map_err(|e| e.to_string())? {
                Budget::Bits(b) => b,
                Budget::Unbounded => return Err("finite noise gave an unbounded budget".into()),
            };
            monotone &= eps < prev;
            prev = eps;
            let back = privacy::epsilon_inverse(eps, h2, c).map_err(|e| e.to_string())?;
            worst_trip = worst_trip.max((back - s2).abs() / s2.max(1.0));
        }
    }
    let pass = h_ok == 100 && worst_trip <= 1e-10 && monotone;
    Ok((
        pass,
        vec![
            format!("h matches brute force on {h_ok}/100 matrices"),
            format!("worst round-trip error {worst_trip:.3e}"),
            format!("budget strictly decreasing on every grid: {monotone}"),
        ],
    ))
}

/// Contract solver: feasibility, optimality against the grid oracle, and
/// minimality of the rewards.
fn contract_solver() -> Check {
    let mut r = rng(61);
    let instances: Vec<_> = (0..100)
        .map(|_| {
            let n = r.random_range(2..=6);
            let lambda = 10f64.powf(r.random_range(-3.0..1.0));
            (random_econ(&mut r, n), lambda)
        })
        .collect();
    let results: Vec<(usize, bool, Option<f64>, bool)> = instances
        .par_iter()
        .map(|(econ, lambda)| {
            let d = incentive::design_contract(econ, *lambda, &Gamma::NegSquare, &SolverOptions::default())
                .map_err(|e| e.to_string())?;
            let rep = incentive::check_feasibility(&d.contract, econ).map_err(|e| e.to_string())?;
            let feasible = rep.violations.is_empty() && rep.feasible();
            let eps: Vec<f64> = d.contract.items.iter().map(|it| it.epsilon).collect();
            let gap = if econ.len() <= 4 {
                let (_, oracle) = contract_grid_oracle(econ, *lambda, 200_000);
                let ours = contract_objective(&eps, econ, *lambda);
                Some((oracle - ours).abs() / oracle.abs().max(1.0))
            } else {
                None
            };
            let minimal = (0..econ.len()).all(|i| {
                let mut cut = d.contract.clone();
                cut.items[i].reward -= 1e-3;
                !incentive::check_feasibility(&cut, econ).map(|rep| rep.feasible()).unwrap_or(false)
            });
            Ok((econ.len(), feasible, gap, minimal))
        })
        .collect::<Result<_, String>>()?;
    let feasible = results.iter().filter(|r| r.1).count();
    let gaps: Vec<f64> = results.iter().filter_map(|r| r.2).collect();
    let worst_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let minimal = results.iter().filter(|r| r.3).count();
    let pass = feasible == 100 && worst_gap <= 1e-4 && minimal == 100;
    Ok((
        pass,
        vec![
            format!("feasible with zero violations: {feasible}/100"),
            format!("largest relative objective difference from the grid oracle over {} instances: {worst_gap:.3e}", gaps.len()),
            format!("reward cut breaks a constraint: {minimal}/100"),
        ],
    ))
}

fn final_train_loss(cfg: &ExperimentConfig, kind: Framework) -> Result<f64, String> {
    let prep = harness::prepare(cfg).map_err(|e| e.to_string())?;
    let (_, s) = harness::execute(cfg, &prep, kind).map_err(|e| e.to_string())?;
    Ok(s.final_train_loss)
}

fn trend_config(dir: &std::path::Path) -> Result<ExperimentConfig, String> {
    let text = synthetic_config(
        1,
        dir,
        20,
        2000,
        20,
        400,
        0.01,
        0.5,
        "rounds = 200\ntau = 5\nbatch = 20\nschedule = { kind = \"constant\", eta0_l = 0.5 }",
    );
    ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())
}

fn non_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

/// Qualitative trends: stragglers, noise, coded data and the contract.
fn trends() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = trend_config(dir.path())?;
    let mut notes = Vec::new();

    let wins = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = ExperimentConfig { seed, ..base.clone() };
            Ok(final_train_loss(&cfg, Framework::Scfl)? < final_train_loss(&cfg, Framework::FedAvg)?)
        })
        .collect::<Result<Vec<bool>, String>>()?
        .into_iter()
        .filter(|&w| w)
        .count();
    let stragglers_ok = wins >= 8;
    notes.push(format!("SCFL below FedAvg at 50% stragglers: {wins}/10 seeds"));

    let noise = harness::run_sweep(
        &ExperimentConfig { output_dir: dir.path().join("sigma2"), ..base.clone() },
        &SweepSpec { axis: SweepAxis::Sigma2, values: vec![0.0, 0.1, 1.0, 10.0], repetitions: 5 },
    )
    .map_err(|e| e.to_string())?;
    let noise_means: Vec<f64> = noise.rows.iter().map(|r| r.mean_train_loss).collect();
    let noise_ok = noise.failures.is_empty() && non_decreasing(&noise_means);
    notes.push(format!("mean final loss over sigma2 [0, 0.1, 1, 10]: {noise_means:.4?}"));

    let coded = harness::run_sweep(
        &ExperimentConfig { output_dir: dir.path().join("c"), ..base.clone() },
        &SweepSpec { axis: SweepAxis::CodedCountC, values: vec![50.0, 200.0, 800.0], repetitions: 5 },
    )
    .map_err(|e| e.to_string())?;
    let coded_means: Vec<f64> = coded.rows.iter().map(|r| r.mean_train_loss).collect();
    let coded_ok = coded.failures.is_empty() && coded_means.windows(2).all(|w| w[1] <= w[0]);
    notes.push(format!("mean final loss over c [50, 200, 800]: {coded_means:.4?}"));

    let mut r = rng(71);
    let mut self_select = true;
    let mut beats = 0;
    for _ in 0..10 {
        let n = r.random_range(3..=6);
        let econ = random_econ(&mut r, n);
        let lambda = 10f64.powf(r.random_range(-3.0..0.0));
        let d = incentive::design_contract(&econ, lambda, &Gamma::NegSquare, &SolverOptions::default()).map_err(|e| e.to_string())?;
        for (i, e) in econ.iter().enumerate() {
            let own = incentive::device_utility(d.contract.items[i].epsilon, d.contract.items[i].reward, e.mu);
            self_select &= d
                .contract
                .items
                .iter()
                .all(|it| incentive::device_utility(it.epsilon, it.reward, e.mu) <= own + 1e-9);
        }
        let perf: f64 = d.sigma2.iter().map(|s| -s * s).sum();
        let game = incentive::stackelberg_equilibrium(&econ, d.contract.total_reward(), &Gamma::NegSquare, &SolverOptions::default())
            .map_err(|e| e.to_string())?;
        if perf >= game.performance {
            beats += 1;
        }
    }
    notes.push(format!("every device prefers its own item: {self_select}"));
    notes.push(format!("contract performance at least the game's at equal total reward: {beats}/10"));

    Ok((stragglers_ok && noise_ok && coded_ok && self_select && beats >= 8, notes))
}

fn artifacts_with_threads(threads: usize, dir: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let base = trend_config(dir)?;
        let cfg = ExperimentConfig { training: rounds_override(&base, 60), ..base.clone() };
        harness::compare_baselines(&cfg, &Framework::ALL).map_err(|e| e.to_string())?;
        harness::run_sweep(
            &ExperimentConfig { output_dir: dir.join("sweep"), ..cfg.clone() },
            &SweepSpec { axis: SweepAxis::Tau, values: vec![1.0, 3.0], repetitions: 2 },
        )
        .map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for kind in Framework::ALL {
            files.push(std::fs::read(dir.join(kind.name()).join(harness::METRICS_FILE)).map_err(|e| e.to_string())?);
        }
        files.push(std::fs::read(dir.join("comparison.csv")).map_err(|e| e.to_string())?);
        files.push(std::fs::read(dir.join("sweep").join("sweep_details.csv")).map_err(|e| e.to_string())?);
        Ok(files)
    })
}

fn rounds_override(base: &ExperimentConfig, rounds: usize) -> harness::TrainingConfig {
    harness::TrainingConfig { rounds, ..base.training.clone() }
}

/// Byte-identical artifacts for 1, 2 and 8 worker threads.
fn determinism() -> Check {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let single = artifacts_with_threads(1, dirs[0].path())?;
    let mut pass = true;
    let mut notes = Vec::new();
    for (threads, dir) in [(2, &dirs[1]), (8, &dirs[2])] {
        let other = artifacts_with_threads(threads, dir.path())?;
        let same = other == single;
        pass &= same;
        notes.push(format!("{} files identical with {threads} threads vs 1: {same}", single.len()));
    }
    Ok((pass, notes))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "unbiased aggregate update", limit: Some(Duration::from_secs(60)), run: unbiasedness },
        Criterion { id: 2, name: "second moments of coding and sampling", limit: Some(Duration::from_secs(60)), run: moments },
        Criterion { id: 3, name: "update error below variance bound", limit: None, run: variance_bounds },
        Criterion { id: 4, name: "convergence and gap bound", limit: Some(Duration::from_secs(120)), run: convergence },
        Criterion { id: 5, name: "privacy accountant", limit: None, run: privacy_accountant },
        Criterion { id: 6, name: "contract solver", limit: Some(Duration::from_secs(120)), run: contract_solver },
        Criterion { id: 7, name: "qualitative trends", limit: None, run: trends },
        Criterion { id: 8, name: "thread-count determinism", limit: None, run: determinism },
    ];
    let mut failed = 0;
    for c in criteria {
        let start = Instant::now();
        let result = (c.run)();
        let took = start.elapsed();
        let (ok, notes) = match result {
            Ok((ok, notes)) => (ok, notes),
            Err(e) => (false, vec![format!("error: {e}")]),
        };
        let in_time = c.limit.is_none_or(|l| took <= l);
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        let limit = c.limit.map(|l| format!(" / limit {}s", l.as_secs())).unwrap_or_default();
        println!(
            "{} criterion {}: {} ({:.1}s{limit})",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64()
        );
        for n in notes {
            println!("    {n}");
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
