//! Contract design for noise levels.
//!
//! Devices are sorted by privacy sensitivity `mu` (ascending). The server
//! offers one (budget, reward) item per type; device utilities are
//! `r - mu * eps` and the server values noise through a concave,
//! non-increasing performance function `Gamma(sigma^2)`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::privacy::{self, Budget};

const SLACK_TOL: f64 = -1e-9;
const GOLDEN_TOL: f64 = 1e-8;

/// Performance of the learned model as a function of a device's noise level.
#[derive(Clone)]
pub enum Gamma {
    /// `-sigma^4`.
    NegSquare,
    /// `-w * sigma^2`.
    NegLinear(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl Default for Gamma {
    fn default() -> Self {
        Gamma::NegSquare
    }
}

impl fmt::Debug for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::NegSquare => f.write_str("NegSquare"),
            Gamma::NegLinear(w) => write!(f, "NegLinear({w})"),
            Gamma::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl Gamma {
    pub fn eval(&self, sigma2: f64) -> f64 {
        match self {
            Gamma::NegSquare => -sigma2 * sigma2,
            Gamma::NegLinear(w) => -w * sigma2,
            Gamma::Custom(f) => f(sigma2),
        }
    }

    /// Probes monotonicity and concavity on a uniform grid over `[0, hi]`.
    pub fn probe(&self, hi: f64) -> Result<()> {
        let n = 200;
        let xs: Vec<f64> = (0..=n).map(|k| hi * k as f64 / n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        let scale = ys.iter().fold(1.0_f64, |m, y| m.max(y.abs()));
        for k in 1..=n {
            if ys[k] > ys[k - 1] + 1e-12 * scale {
                return Err(Error::NotConcave(format!("Gamma increases between {} and {}", xs[k - 1], xs[k])));
            }
        }
        for k in 1..n {
            if ys[k + 1] - 2.0 * ys[k] + ys[k - 1] > 1e-9 * scale {
                return Err(Error::NotConcave(format!("convex kink near sigma^2 = {}", xs[k])));
            }
        }
        Ok(())
    }
}

/// Economic type of one device.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviceEcon {
    /// Identifier carried through sorting.
    pub id: usize,
    pub mu: f64,
    pub h2: f64,
    pub c: usize,
}

impl DeviceEcon {
    /// Budget at noise level `sigma2`.
    pub fn q(&self, sigma2: f64) -> Result<Budget> {
        privacy::epsilon(self.h2, self.c, sigma2)
    }

    /// Noise level for budget `eps` (not clamped to the admissible range).
    pub fn q_inv(&self, eps: f64) -> f64 {
        self.c as f64 / (2.0 * eps * std::f64::consts::LN_2).exp_m1() - self.h2
    }

    /// Largest admissible budget, reached at noise `sigma_min2`.
    pub fn cap(&self, sigma_min2: f64) -> Result<f64> {
        match self.q(sigma_min2)? {
            Budget::Bits(b) => Ok(b),
            Budget::Unbounded => Err(invalid(format!(
                "device {} has h^2 = 0 and no minimum noise, so its budget is unbounded",
                self.id
            ))),
        }
    }
}

/// Sorts by `mu`, keeping ids, and validates the types.
pub fn sort_econ(mut econ: Vec<DeviceEcon>) -> Result<Vec<DeviceEcon>> {
    if econ.is_empty() {
        return Err(Error::Empty("no devices".into()));
    }
    for e in &econ {
        if !(e.mu > 0.0 && e.mu.is_finite()) || !(e.h2 >= 0.0) || e.c == 0 {
            return Err(invalid(format!("device {} needs mu > 0, h2 >= 0 and c >= 1", e.id)));
        }
    }
    econ.sort_by(|a, b| a.mu.total_cmp(&b.mu).then(a.id.cmp(&b.id)));
    Ok(econ)
}

fn ensure_sorted(econ: &[DeviceEcon]) -> Result<()> {
    if econ.is_empty() {
        return Err(Error::Empty("no devices".into()));
    }
    if econ.windows(2).any(|w| w[0].mu > w[1].mu) || econ.iter().any(|e| !(e.mu > 0.0)) {
        return Err(invalid("privacy sensitivities must be positive and ascending"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContractItem {
    pub epsilon: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Contract {
    pub items: Vec<ContractItem>,
}

impl Contract {
    pub fn total_reward(&self) -> f64 {
        self.items.iter().map(|it| it.reward).sum()
    }
}

pub fn server_utility(sigma2: &[f64], rewards: &[f64], lambda: f64, gamma: &Gamma) -> f64 {
    sigma2.iter().map(|&s| gamma.eval(s)).sum::<f64>() - lambda * rewards.iter().sum::<f64>()
}

pub fn device_utility(eps: f64, reward: f64, mu: f64) -> f64 {
    reward - mu * eps
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ViolationKind {
    /// Negative utility for the device's own item.
    Participation,
    /// The device prefers item `other`.
    Compatibility { other: usize },
    /// Budgets are not non-increasing at this index.
    BudgetOrder,
    /// Rewards are not non-increasing at this index.
    RewardOrder,
    /// Last reward below the last device's cost, or not positive.
    LastReward,
    /// Adjacent-item reward bracket violated.
    RewardBracket,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub device: usize,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub ir_ok: bool,
    pub ic_ok: bool,
    pub monotone_ok: bool,
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.ir_ok && self.ic_ok && self.monotone_ok
    }
}

/// Participation, full pairwise compatibility and the ordering conditions.
pub fn check_feasibility(contract: &Contract, econ: &[DeviceEcon]) -> Result<FeasibilityReport> {
    let n = econ.len();
    if contract.items.len() != n {
        return Err(Error::Shape(format!("{} items for {n} devices", contract.items.len())));
    }
    ensure_sorted(econ)?;
    let it = &contract.items;
    let mut violations = Vec::new();
    let mut flag = |kind, device, slack: f64| {
        if slack < SLACK_TOL || slack.is_nan() {
            violations.push(Violation { kind, device, slack });
        }
    };
    for i in 0..n {
        let own = device_utility(it[i].epsilon, it[i].reward, econ[i].mu);
        flag(ViolationKind::Participation, i, own);
        for j in (0..n).filter(|&j| j != i) {
            let alt = device_utility(it[j].epsilon, it[j].reward, econ[i].mu);
            flag(ViolationKind::Compatibility { other: j }, i, own - alt);
        }
    }
    for i in 0..n.saturating_sub(1) {
        flag(ViolationKind::BudgetOrder, i, it[i].epsilon - it[i + 1].epsilon);
        flag(ViolationKind::RewardOrder, i, it[i].reward - it[i + 1].reward);
        let (mu_i, mu_next) = (econ[i].mu, econ[i + 1].mu);
        let upper = it[i + 1].reward - mu_next * it[i + 1].epsilon + mu_next * it[i].epsilon;
        let lower = it[i + 1].reward - mu_i * it[i + 1].epsilon + mu_i * it[i].epsilon;
        flag(ViolationKind::RewardBracket, i, (upper - it[i].reward).min(it[i].reward - lower));
    }
    let last = n - 1;
    flag(ViolationKind::LastReward, last, it[last].reward - econ[last].mu * it[last].epsilon);
    if !(it[last].epsilon > 0.0 && it[last].reward > 0.0) {
        violations.push(Violation { kind: ViolationKind::LastReward, device: last, slack: it[last].reward.min(it[last].epsilon) });
    }
    let ir_ok = !violations.iter().any(|v| v.kind == ViolationKind::Participation);
    let ic_ok = !violations.iter().any(|v| matches!(v.kind, ViolationKind::Compatibility { .. }));
    let monotone_ok = !violations.iter().any(|v| {
        matches!(
            v.kind,
            ViolationKind::BudgetOrder | ViolationKind::RewardOrder | ViolationKind::LastReward | ViolationKind::RewardBracket
        )
    });
    Ok(FeasibilityReport { ir_ok, ic_ok, monotone_ok, violations })
}

/// Cheapest rewards that keep the given budgets feasible.
pub fn optimal_rewards(eps: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    let n = eps.len();
    if n == 0 || mu.len() != n {
        return Err(Error::Shape(format!("{} budgets and {} sensitivities", n, mu.len())));
    }
    if eps.windows(2).any(|w| w[0] < w[1]) || !(eps[n - 1] > 0.0) {
        return Err(invalid("budgets must be positive and non-increasing"));
    }
    if mu.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("sensitivities must be ascending"));
    }
    let mut r = vec![0.0; n];
    r[n - 1] = mu[n - 1] * eps[n - 1];
    for i in (0..n - 1).rev() {
        r[i] = r[i + 1] - mu[i] * eps[i + 1] + mu[i] * eps[i];
    }
    Ok(r)
}

/// Options shared by the contract and baseline solvers.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SolverOptions {
    /// Minimum noise level every device must add.
    pub sigma_min2: f64,
}

/// Virtual objective of the device at (0-based) position `k`.
pub fn phi(eps: f64, k: usize, lambda: f64, econ: &[DeviceEcon], gamma: &Gamma, opts: &SolverOptions) -> Result<f64> {
    let cap = econ[k].cap(opts.sigma_min2)?;
    if !(eps > 0.0) || eps > cap * (1.0 + 1e-12) {
        return Err(invalid(format!("budget {eps} outside (0, {cap}]")));
    }
    Ok(phi_unchecked(eps, k, lambda, econ, gamma))
}

fn virtual_cost(k: usize, econ: &[DeviceEcon]) -> f64 {
    let i = (k + 1) as f64;
    let prev = if k == 0 { 0.0 } else { k as f64 * econ[k - 1].mu };
    i * econ[k].mu - prev
}

fn phi_unchecked(eps: f64, k: usize, lambda: f64, econ: &[DeviceEcon], gamma: &Gamma) -> f64 {
    gamma.eval(econ[k].q_inv(eps)) - lambda * virtual_cost(k, econ) * eps
}

/// Golden-section maximisation of a unimodal function on `[a, b]`.
fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        }
    }
    // endpoints matter when the optimum sits on the boundary
    let mid = 0.5 * (a + b);
    [a, mid, b].into_iter().fold(mid, |best, x| if f(x) > f(best) { x } else { best })
}

fn lower_edge(cap: f64) -> f64 {
    cap * 1e-12
}

fn pooled_argmax(block: std::ops::Range<usize>, lambda: f64, econ: &[DeviceEcon], gamma: &Gamma, caps: &[f64]) -> f64 {
    let cap = caps[block.clone()].iter().cloned().fold(f64::INFINITY, f64::min);
    golden_max(
        |e| block.clone().map(|k| phi_unchecked(e, k, lambda, econ, gamma)).sum(),
        lower_edge(cap),
        cap,
        GOLDEN_TOL,
    )
}

fn caps(econ: &[DeviceEcon], opts: &SolverOptions) -> Result<Vec<f64>> {
    econ.iter().map(|e| e.cap(opts.sigma_min2)).collect()
}

/// Optimal non-increasing budgets: per-device maximisers, then adjacent
/// violating runs are pooled at the maximiser of their summed objective
/// until the sequence is ordered.
pub fn bunching_ironing(econ: &[DeviceEcon], lambda: f64, gamma: &Gamma, opts: &SolverOptions) -> Result<Vec<f64>> {
    ensure_sorted(econ)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let caps = caps(econ, opts)?;
    let noisiest = econ
        .iter()
        .zip(&caps)
        .map(|(e, &cap)| e.q_inv(lower_edge(cap)).min(1e12))
        .fold(opts.sigma_min2 + 1.0, f64::max);
    gamma.probe(noisiest)?;

    // each block: (start, end, pooled value)
    let mut blocks: Vec<(usize, usize, f64)> = Vec::with_capacity(econ.len());
    for k in 0..econ.len() {
        blocks.push((k, k + 1, pooled_argmax(k..k + 1, lambda, econ, gamma, &caps)));
        while blocks.len() >= 2 {
            let (s1, _, v1) = blocks[blocks.len() - 2];
            let (_, e2, v2) = blocks[blocks.len() - 1];
            if v1 >= v2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push((s1, e2, pooled_argmax(s1..e2, lambda, econ, gamma, &caps)));
        }
    }
    let mut eps = vec![0.0; econ.len()];
    for (s, e, v) in blocks {
        eps[s..e].fill(v);
    }
    Ok(eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignedContract {
    pub contract: Contract,
    pub sigma2: Vec<f64>,
    pub server_utility: f64,
}

pub fn design_contract(econ: &[DeviceEcon], lambda: f64, gamma: &Gamma, opts: &SolverOptions) -> Result<DesignedContract> {
    let eps = bunching_ironing(econ, lambda, gamma, opts)?;
    let mu: Vec<f64> = econ.iter().map(|e| e.mu).collect();
    let rewards = optimal_rewards(&eps, &mu)?;
    let sigma2: Vec<f64> = econ
        .iter()
        .zip(&eps)
        .map(|(e, &x)| e.q_inv(x).max(opts.sigma_min2))
        .collect();
    let contract = Contract {
        items: eps
            .iter()
            .zip(&rewards)
            .map(|(&epsilon, &reward)| ContractItem { epsilon, reward })
            .collect(),
    };
    let report = check_feasibility(&contract, econ)?;
    if !report.feasible() {
        return Err(Error::Degenerate(format!("solver produced an infeasible contract: {:?}", report.violations)));
    }
    Ok(DesignedContract {
        server_utility: server_utility(&sigma2, &rewards, lambda, gamma),
        contract,
        sigma2,
    })
}

/// Summed virtual objective of a budget vector.
pub fn virtual_objective(eps: &[f64], econ: &[DeviceEcon], lambda: f64, gamma: &Gamma) -> f64 {
    eps.iter()
        .enumerate()
        .map(|(k, &e)| phi_unchecked(e, k, lambda, econ, gamma))
        .sum()
}

/// Equilibrium of the proportional-allocation game at a fixed total reward.
#[derive(Clone, Debug, PartialEq)]
pub struct StackelbergOutcome {
    pub total_reward: f64,
    pub epsilon: Vec<f64>,
    pub rewards: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Summed performance `sum_i Gamma(sigma_i^2)`.
    pub performance: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn best_response(total: f64, others: f64, mu: f64, floor: f64, cap: f64) -> f64 {
    if others <= 0.0 {
        // a lone participant is paid the same for any budget
        return floor;
    }
    ((total * others / mu).sqrt() - others).clamp(floor, cap)
}

/// Devices split `total_reward` in proportion to their budgets and each
/// best-responds to the others until no budget moves by more than 1e-6.
pub fn stackelberg_equilibrium(econ: &[DeviceEcon], total_reward: f64, gamma: &Gamma, opts: &SolverOptions) -> Result<StackelbergOutcome> {
    ensure_sorted(econ)?;
    if !(total_reward >= 0.0 && total_reward.is_finite()) {
        return Err(invalid(format!("total reward must be non-negative, got {total_reward}")));
    }
    let caps = caps(econ, opts)?;
    let floor = caps.iter().cloned().fold(f64::INFINITY, f64::min) * 1e-6;
    let mut eps: Vec<f64> = caps.iter().map(|c| 0.5 * c).collect();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < 1000 {
        iterations += 1;
        let mut moved = 0.0_f64;
        for i in 0..econ.len() {
            let others: f64 = eps.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, e)| e).sum();
            let next = best_response(total_reward, others, econ[i].mu, floor, caps[i]);
            moved = moved.max((next - eps[i]).abs());
            eps[i] = next;
        }
        if moved < 1e-6 {
            converged = true;
            break;
        }
    }
    let sum: f64 = eps.iter().sum();
    let rewards: Vec<f64> = eps.iter().map(|e| total_reward * e / sum).collect();
    let sigma2: Vec<f64> = econ.iter().zip(&eps).map(|(e, &x)| e.q_inv(x).max(opts.sigma_min2)).collect();
    Ok(StackelbergOutcome {
        total_reward,
        performance: sigma2.iter().map(|&s| gamma.eval(s)).sum(),
        epsilon: eps,
        rewards,
        sigma2,
        iterations,
        converged,
    })
}

/// Server picks the total reward on a log grid to maximise
/// `sum Gamma(sigma_i^2) - lambda_s * R`.
pub fn stackelberg_baseline(econ: &[DeviceEcon], lambda_s: f64, gamma: &Gamma, opts: &SolverOptions) -> Result<StackelbergOutcome> {
    ensure_sorted(econ)?;
    let caps = caps(econ, opts)?;
    let scale: f64 = econ.iter().zip(&caps).map(|(e, c)| e.mu * c).sum::<f64>().max(f64::MIN_POSITIVE);
    let points = 241;
    let outcomes: Vec<StackelbergOutcome> = (0..points)
        .into_par_iter()
        .map(|g| {
            let r = scale * 10f64.powf(-6.0 + 12.0 * g as f64 / (points - 1) as f64);
            stackelberg_equilibrium(econ, r, gamma, opts)
        })
        .collect::<Result<_>>()?;
    Ok(outcomes
        .into_iter()
        .reduce(|best, o| {
            let u = |x: &StackelbergOutcome| x.performance - lambda_s * x.total_reward;
            if u(&o) > u(&best) {
                o
            } else {
                best
            }
        })
        .expect("grid is non-empty"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub total_reward: f64,
    pub sigma2_total: f64,
}

pub fn lambda_table(econ: &[DeviceEcon], grid: &[f64], gamma: &Gamma, opts: &SolverOptions) -> Result<Vec<LambdaRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid".into()));
    }
    grid.par_iter()
        .map(|&lambda| {
            let d = design_contract(econ, lambda, gamma, opts)?;
            Ok(LambdaRow {
                lambda,
                total_reward: d.contract.total_reward(),
                sigma2_total: d.sigma2.iter().sum(),
            })
        })
        .collect()
}

/// Weight `lambda` whose optimal contract pays `target` in total, found by
/// bisection in log space (total reward falls as lambda grows).
pub fn lambda_for_total_reward(econ: &[DeviceEcon], target: f64, gamma: &Gamma, opts: &SolverOptions) -> Result<f64> {
    let total = |l: f64| design_contract(econ, l, gamma, opts).map(|d| d.contract.total_reward());
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    if total(10f64.powf(lo))? < target || total(10f64.powf(hi))? > target {
        return Err(Error::Unreachable {
            target,
            message: "total reward outside the range spanned by lambda in [1e-30, 1e30]".into(),
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(10f64.powf(mid))? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(10f64.powf(0.5 * (lo + hi)))
}

/// Reads `device,mu,h2` rows; the result is sorted by `mu`.
pub fn load_econ_csv(path: impl AsRef<Path>, c: usize) -> Result<Vec<DeviceEcon>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != ["device", "mu", "h2"] {
        return Err(Error::CsvHeader(format!("expected device,mu,h2, found {}", header.join(","))));
    }
    let mut out = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = idx + 2;
        let cell = |j: usize| -> Result<f64> {
            rec.get(j).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::CsvCell {
                row,
                column: header[j].clone(),
                message: format!("`{}` is not a number", rec.get(j).unwrap_or("")),
            })
        };
        let id = rec.get(0).and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| Error::CsvCell {
            row,
            column: "device".into(),
            message: "device id must be a non-negative integer".into(),
        })?;
        out.push(DeviceEcon { id, mu: cell(1)?, h2: cell(2)?, c });
    }
    sort_econ(out)
}
