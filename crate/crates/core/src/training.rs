//! Gradient estimators, aggregation and learning-rate schedules.
//!
//! Losses and gradients are sum-scaled: `f(W) = 1/2 ||XW - Y||_F^2` and
//! `grad f(W) = X^T (XW - Y)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coding::GlobalCodedDataset;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Rng};

pub fn loss(x: &Matrix, y: &Matrix, w: &Matrix) -> f64 {
    0.5 * linalg::frob_sq(&(x * w - y))
}

pub fn dataset_loss(ds: &Dataset, w: &Matrix) -> f64 {
    loss(ds.features(), ds.labels(), w)
}

pub fn full_gradient(x: &Matrix, y: &Matrix, w: &Matrix) -> Matrix {
    x.transpose() * (x * w - y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimalSolution {
    pub w: Matrix,
    pub rank: usize,
    /// `X^T X` is singular; `w` is the minimum-norm minimiser.
    pub rank_deficient: bool,
}

/// Closed-form least-squares optimum.
pub fn solve_optimal(ds: &Dataset) -> OptimalSolution {
    let (w, rank) = linalg::lstsq(ds.features(), ds.labels());
    OptimalSolution {
        w,
        rank,
        rank_deficient: rank < ds.d(),
    }
}

/// Indices kept by an i.i.d. Bernoulli(`keep`) row mask.
fn bernoulli_rows(n: usize, keep: f64, rng: &mut Rng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < keep).collect()
}

fn masked_gradient(x: &Matrix, y: &Matrix, w: &Matrix, rows: &[usize]) -> Matrix {
    if rows.is_empty() {
        return Matrix::zeros(x.ncols(), w.ncols());
    }
    let xs = x.select_rows(rows.iter());
    let ys = y.select_rows(rows.iter());
    full_gradient(&xs, &ys, w)
}

/// `(l/b) X_hat^T (X_hat W - Y_hat)` over a Bernoulli(b/l) row mask.
pub fn device_gradient(x: &Matrix, y: &Matrix, w: &Matrix, b: usize, rng: &mut Rng) -> Result<Matrix> {
    let l = x.nrows();
    if b == 0 || b > l {
        return Err(invalid(format!("batch {b} outside [1, {l}]")));
    }
    let rows = bernoulli_rows(l, b as f64 / l as f64, rng);
    Ok(masked_gradient(x, y, w, &rows) * (l as f64 / b as f64))
}

/// What a device reports at the end of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub device: usize,
    /// Sum of the `tau` local stochastic gradients.
    pub grad: Matrix,
    pub arrived: bool,
    pub batch: usize,
}

/// Runs `tau` local SGD steps from `w` and returns the accumulated gradient.
pub fn local_train(x: &Matrix, y: &Matrix, w: &Matrix, tau: usize, eta: f64, b: usize, seed: u64) -> Result<Matrix> {
    if tau == 0 {
        return Err(invalid("tau must be at least 1"));
    }
    let mut rng = rng::from_seed(seed);
    let mut local = w.clone();
    let mut acc = Matrix::zeros(w.nrows(), w.ncols());
    for step in 0..tau {
        let g = device_gradient(x, y, &local, b, &mut rng)?;
        if !linalg::is_finite(&g) {
            return Err(Error::Divergence { round: 0, step });
        }
        local -= &g * eta;
        acc += g;
    }
    Ok(acc)
}

/// Coded stochastic gradient `(1/b_s) X_hat^T (X_hat W - Y_hat)`, plus the
/// make-up term `-sigma^2 W` when `makeup` is set.
pub fn coded_gradient(coded: &GlobalCodedDataset, w: &Matrix, b_s: usize, makeup: bool, rng: &mut Rng) -> Result<Matrix> {
    let c = coded.c();
    if b_s == 0 || b_s > c {
        return Err(invalid(format!("server batch {b_s} outside [1, {c}]")));
    }
    let rows = bernoulli_rows(c, b_s as f64 / c as f64, rng);
    let mut g = masked_gradient(&coded.x, &coded.y, w, &rows) / b_s as f64;
    if makeup && coded.sigma2 != 0.0 {
        g -= w * coded.sigma2;
    }
    Ok(g)
}

pub fn server_gradient(coded: &GlobalCodedDataset, w: &Matrix, b_s: usize, rng: &mut Rng) -> Result<Matrix> {
    coded_gradient(coded, w, b_s, true, rng)
}

pub fn server_train_with(
    coded: &GlobalCodedDataset,
    w: &Matrix,
    tau: usize,
    eta: f64,
    b_s: usize,
    makeup: bool,
    seed: u64,
) -> Result<Matrix> {
    if tau == 0 {
        return Err(invalid("tau must be at least 1"));
    }
    let mut rng = rng::from_seed(seed);
    let mut local = w.clone();
    let mut acc = Matrix::zeros(w.nrows(), w.ncols());
    for step in 0..tau {
        let g = coded_gradient(coded, &local, b_s, makeup, &mut rng)?;
        if !linalg::is_finite(&g) {
            return Err(Error::Divergence { round: 0, step });
        }
        local -= &g * eta;
        acc += g;
    }
    Ok(acc)
}

/// Accumulated server update over `tau` steps, make-up term included.
pub fn server_train(coded: &GlobalCodedDataset, w: &Matrix, tau: usize, eta: f64, b_s: usize, seed: u64) -> Result<Matrix> {
    server_train_with(coded, w, tau, eta, b_s, true, seed)
}

/// `1/2 (sum_i 1_i / p_i * g_i + g_s)`, summed in update order.
pub fn aggregate(updates: &[LocalUpdate], p: &[f64], server: &Matrix) -> Result<Matrix> {
    if updates.len() != p.len() {
        return Err(Error::Shape(format!("{} updates but {} probabilities", updates.len(), p.len())));
    }
    let mut total = Matrix::zeros(server.nrows(), server.ncols());
    for (u, &pi) in updates.iter().zip(p) {
        if !(pi > 0.0 && pi <= 1.0) {
            return Err(invalid(format!("device {} has arrival probability {pi}", u.device)));
        }
        if u.arrived {
            total += &u.grad / pi;
        }
    }
    total += server;
    Ok(total * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `eta_k = eta0`, given as a multiple of `1/L`.
    Constant { eta0_l: f64 },
    /// `eta_k = tau * scale / ((k + beta) L)`.
    Inverse { beta: f64, scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    spec: LrSchedule,
    smoothness: f64,
    tau: usize,
}

impl Schedule {
    pub fn eta(&self, k: usize) -> f64 {
        match self.spec {
            LrSchedule::Constant { eta0_l } => eta0_l / self.smoothness,
            LrSchedule::Inverse { beta, scale } => self.tau as f64 * scale / ((k as f64 + beta) * self.smoothness),
        }
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn etas(&self, rounds: usize) -> Vec<f64> {
        (0..rounds).map(|k| self.eta(k)).collect()
    }
}

/// Checks `eta_k L < 1` (the sequence is non-increasing, so `k = 0` decides).
pub fn make_schedule(spec: LrSchedule, smoothness: f64, tau: usize) -> Result<Schedule> {
    if !(smoothness > 0.0 && smoothness.is_finite()) {
        return Err(Error::Schedule(format!("smoothness constant must be positive, got {smoothness}")));
    }
    if tau == 0 {
        return Err(invalid("tau must be at least 1"));
    }
    let head = match spec {
        LrSchedule::Constant { eta0_l } => {
            if !(eta0_l > 0.0) {
                return Err(Error::Schedule(format!("eta0*L = {eta0_l} must be positive")));
            }
            eta0_l
        }
        LrSchedule::Inverse { beta, scale } => {
            if !(beta > 0.0) || !(scale > 0.0) {
                return Err(Error::Schedule(format!("beta = {beta} and scale = {scale} must be positive")));
            }
            tau as f64 * scale / beta
        }
    };
    if head >= 1.0 {
        return Err(Error::Schedule(format!("eta_0 * L = {head}")));
    }
    Ok(Schedule { spec, smoothness, tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn toy() -> (Matrix, Matrix) {
        (Matrix::from_row_slice(2, 1, &[1.0, 2.0]), Matrix::from_row_slice(2, 1, &[1.0, 2.0]))
    }

    #[test]
    fn loss_examples() {
        let (x, y) = toy();
        assert_eq!(loss(&x, &y, &Matrix::from_element(1, 1, 1.0)), 0.0);
        assert_eq!(loss(&x, &Matrix::zeros(2, 1), &Matrix::zeros(1, 1)), 0.0);
    }

    #[test]
    fn loss_matches_double_loop() {
        let mut r = from_seed(1);
        let x = linalg::standard_normal(7, 3, &mut r);
        let y = linalg::standard_normal(7, 2, &mut r);
        let w = linalg::standard_normal(3, 2, &mut r);
        let mut naive = 0.0;
        for i in 0..7 {
            for k in 0..2 {
                let mut pred = 0.0;
                for j in 0..3 {
                    pred += x[(i, j)] * w[(j, k)];
                }
                naive += (pred - y[(i, k)]).powi(2);
            }
        }
        naive *= 0.5;
        assert!(((loss(&x, &y, &w) - naive) / naive).abs() < 1e-12);
    }

    #[test]
    fn optimum_of_exact_fit_and_scalar_case() {
        let (x, y) = toy();
        let ds = Dataset::new(x.clone(), y).unwrap();
        let sol = solve_optimal(&ds);
        assert!((sol.w[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(!sol.rank_deficient);

        let y2 = Matrix::from_row_slice(2, 1, &[3.0, -1.0]);
        let ds2 = Dataset::new(x.clone(), y2.clone()).unwrap();
        let scalar = (x.transpose() * &y2)[(0, 0)] / (x.transpose() * &x)[(0, 0)];
        assert!((solve_optimal(&ds2).w[(0, 0)] - scalar).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_flagged() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let ds = Dataset::new(x, Matrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        assert!(solve_optimal(&ds).rank_deficient);
    }

    #[test]
    fn full_batch_device_gradient_is_exact() {
        let (x, y) = toy();
        let w = Matrix::from_element(1, 1, 0.3);
        let g = device_gradient(&x, &y, &w, 2, &mut from_seed(0)).unwrap();
        assert!(linalg::max_abs(&(g - full_gradient(&x, &y, &w))) < 1e-15);
    }

    #[test]
    fn two_single_row_devices_sum_to_the_global_gradient() {
        let (x, y) = toy();
        let w = Matrix::zeros(1, 1);
        let g1 = device_gradient(&x.rows(0, 1).into_owned(), &y.rows(0, 1).into_owned(), &w, 1, &mut from_seed(0)).unwrap();
        let g2 = device_gradient(&x.rows(1, 1).into_owned(), &y.rows(1, 1).into_owned(), &w, 1, &mut from_seed(0)).unwrap();
        assert_eq!(g1[(0, 0)], -1.0);
        assert_eq!(g2[(0, 0)], -4.0);
        assert_eq!(g1[(0, 0)] + g2[(0, 0)], full_gradient(&x, &y, &w)[(0, 0)]);
    }

    #[test]
    fn local_train_single_step_equals_one_gradient() {
        let (x, y) = toy();
        let w = Matrix::from_element(1, 1, -0.5);
        let acc = local_train(&x, &y, &w, 1, 0.1, 1, 42).unwrap();
        let one = device_gradient(&x, &y, &w, 1, &mut from_seed(42)).unwrap();
        assert_eq!(acc, one);
    }

    #[test]
    fn local_train_at_local_optimum_is_zero() {
        let (x, y) = toy();
        let acc = local_train(&x, &y, &Matrix::from_element(1, 1, 1.0), 4, 0.1, 2, 3).unwrap();
        assert_eq!(acc, Matrix::zeros(1, 1));
    }

    #[test]
    fn server_gradient_special_cases() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let y = Matrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        let coded = GlobalCodedDataset { x: x.clone(), y: y.clone(), sigma2: 0.0 };
        let w = Matrix::from_row_slice(2, 1, &[0.2, -0.4]);
        let g = server_gradient(&coded, &w, 3, &mut from_seed(1)).unwrap();
        let expect = full_gradient(&x, &y, &w) / 3.0;
        assert!(linalg::max_abs(&(g - expect)) < 1e-15);

        let noisy = GlobalCodedDataset { sigma2: 2.0, ..coded };
        let g0 = server_gradient(&noisy, &Matrix::zeros(2, 1), 3, &mut from_seed(1)).unwrap();
        let expect0 = -(x.transpose() * &y) / 3.0;
        assert!(linalg::max_abs(&(g0 - expect0)) < 1e-15);
    }

    #[test]
    fn makeup_term_dominates_on_zero_data() {
        let coded = GlobalCodedDataset { x: Matrix::zeros(4, 2), y: Matrix::zeros(4, 1), sigma2: 5.0 };
        let w = Matrix::from_row_slice(2, 1, &[10.0, -3.0]);
        let acc = server_train(&coded, &w, 3, 0.0, 2, 8).unwrap();
        let expect = &w * (-5.0 * 3.0);
        assert!(linalg::max_abs(&(acc - expect)) < 1e-12);
    }

    #[test]
    fn aggregation_identities() {
        let g = |v: f64| Matrix::from_element(1, 1, v);
        let ups = vec![
            LocalUpdate { device: 0, grad: g(1.0), arrived: true, batch: 1 },
            LocalUpdate { device: 1, grad: g(2.0), arrived: true, batch: 1 },
        ];
        assert_eq!(aggregate(&ups, &[1.0, 1.0], &g(3.0)).unwrap(), g(3.0));
        let none: Vec<_> = ups.iter().cloned().map(|u| LocalUpdate { arrived: false, ..u }).collect();
        assert_eq!(aggregate(&none, &[0.5, 0.5], &g(3.0)).unwrap(), g(1.5));
        assert!(aggregate(&ups, &[0.0, 1.0], &g(3.0)).is_err());
    }

    #[test]
    fn schedules_respect_the_step_limit() {
        let l = 4.0;
        assert!(make_schedule(LrSchedule::Constant { eta0_l: 0.5 }, l, 1).is_ok());
        assert!(make_schedule(LrSchedule::Constant { eta0_l: 1.0 }, l, 1).is_err());
        let s = make_schedule(LrSchedule::Inverse { beta: 1.0, scale: 0.99 }, l, 1).unwrap();
        assert!((s.eta(0) * l - 0.99).abs() < 1e-15);
        assert!(make_schedule(LrSchedule::Inverse { beta: 1.0, scale: 0.6 }, l, 2).is_err());
        assert!(make_schedule(LrSchedule::Inverse { beta: 0.0, scale: 0.5 }, l, 1).is_err());
    }
}
