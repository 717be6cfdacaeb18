//! Noisy random-projection coding of local datasets.
//!
//! Each device releases `X~ = G X + N` and `Y~ = G Y` with a private Gaussian
//! projection `G` (c x l) and additive noise `N` (c x d). The projection and
//! noise are drawn, used and dropped inside [`encode_local`].

use std::path::Path;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::data::{Dataset, DevicePartition};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Rng, Stream};

/// One device's coded release.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedShard {
    pub x: Matrix,
    pub y: Matrix,
    pub sigma2: f64,
}

impl CodedShard {
    pub fn c(&self) -> usize {
        self.x.nrows()
    }
}

/// Server-side sum of all shards.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCodedDataset {
    pub x: Matrix,
    pub y: Matrix,
    /// Total noise variance, the sum of the shards' variances.
    pub sigma2: f64,
}

impl GlobalCodedDataset {
    pub fn c(&self) -> usize {
        self.x.nrows()
    }
}

fn draw_projection(rng: &mut Rng, c: usize, l: usize, d: usize, sigma2: f64) -> (Matrix, Matrix) {
    let g = linalg::standard_normal(c, l, rng);
    let n = if sigma2 > 0.0 {
        linalg::normal(c, d, sigma2.sqrt(), rng)
    } else {
        Matrix::zeros(c, d)
    };
    (g, n)
}

pub fn encode_local(x: &Matrix, y: &Matrix, c: usize, sigma2: f64, seed: u64) -> Result<CodedShard> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(invalid(format!("noise variance must be a non-negative number, got {sigma2}")));
    }
    if c == 0 {
        return Err(invalid("coded sample count c must be positive"));
    }
    if x.nrows() == 0 {
        return Err(Error::Empty("local dataset has no rows".into()));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::Shape("local features and labels differ in row count".into()));
    }
    let mut rng = rng::from_seed(seed);
    let (g, n) = draw_projection(&mut rng, c, x.nrows(), x.ncols(), sigma2);
    Ok(CodedShard {
        x: &g * x + n,
        y: &g * y,
        sigma2,
    })
}

/// Seed used for device `i`'s coding draw.
pub fn shard_seed(master: u64, device: usize) -> u64 {
    rng::derive_seed(master, Stream::Coding, &[device as u64])
}

/// Encodes every device's local data, in parallel, each from its own stream.
pub fn encode_fleet(
    ds: &Dataset,
    partition: &DevicePartition,
    c: usize,
    sigma2: &[f64],
    master: u64,
) -> Result<Vec<CodedShard>> {
    if sigma2.len() != partition.device_count() {
        return Err(Error::Shape(format!(
            "{} noise levels for {} devices",
            sigma2.len(),
            partition.device_count()
        )));
    }
    (0..partition.device_count())
        .into_par_iter()
        .map(|i| {
            let (x, y) = ds.slice(partition.range(i));
            encode_local(&x, &y, c, sigma2[i], shard_seed(master, i))
        })
        .collect()
}

/// Sums shards in ascending device order.
pub fn build_global(shards: &[CodedShard]) -> Result<GlobalCodedDataset> {
    let first = shards
        .first()
        .ok_or_else(|| Error::Empty("no coded shards to combine".into()))?;
    let mut x = first.x.clone();
    let mut y = first.y.clone();
    let mut sigma2 = first.sigma2;
    for (i, s) in shards.iter().enumerate().skip(1) {
        if s.x.shape() != x.shape() || s.y.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "shard {i} is {:?}/{:?}, expected {:?}/{:?}",
                s.x.shape(),
                s.y.shape(),
                x.shape(),
                y.shape()
            )));
        }
        x += &s.x;
        y += &s.y;
        sigma2 += s.sigma2;
    }
    Ok(GlobalCodedDataset { x, y, sigma2 })
}

/// Writes a shard with the dataset CSV schema plus a `key,value` sidecar
/// next to it (`<path>.meta.csv`).
pub fn export_shard(path: impl AsRef<Path>, shard: &CodedShard, seed: u64) -> Result<()> {
    let path = path.as_ref();
    crate::data::write_csv(path, &shard.x, &shard.y)?;
    let mut meta = csv::Writer::from_path(path.with_extension("meta.csv"))?;
    meta.write_record(["key", "value"])?;
    meta.write_record(["c", &shard.c().to_string()])?;
    meta.write_record(["sigma2", &format!("{:?}", shard.sigma2)])?;
    meta.write_record(["seed", &seed.to_string()])?;
    meta.flush()?;
    Ok(())
}

/// Outcome of the reconstruction probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackReport {
    /// `||X_U_hat - X_U||_F / ||X_U||_F` after the best orthogonal alignment.
    /// NaN when the unknown rows are all zero.
    pub normalized_error: f64,
    /// Noise floor the attacker estimated from the residual spectrum.
    pub noise_floor: f64,
    /// Set when the known rows carry no information or the target is empty.
    pub degenerate: bool,
}

/// Reconstruction probe against a coded release.
///
/// The attacker holds the coded features (a single shard or the global sum)
/// and a subset of the true rows. Rows of a coded matrix are i.i.d.
/// `N(0, X^T X + s^2 I)`, so the release reveals the data only through its
/// Gram matrix. The attack estimates that Gram matrix, removes the known
/// rows' share, strips an isotropic noise floor estimated from the trailing
/// eigenvalues, and factors the rest into the unknown rows. Recovery is only
/// possible up to an orthogonal mixing of those rows, so the error is taken
/// after the best orthogonal alignment with the truth.
pub fn reconstruction_attack(coded_x: &Matrix, truth: &Matrix, known: &[usize]) -> Result<AttackReport> {
    let l = truth.nrows();
    let d = truth.ncols();
    if coded_x.ncols() != d {
        return Err(Error::Shape(format!(
            "coded data has {} columns, truth has {d}",
            coded_x.ncols()
        )));
    }
    if known.is_empty() {
        return Err(invalid("the attacker needs at least one known row"));
    }
    if known.len() >= l {
        return Err(invalid(format!("{} known rows leave nothing to reconstruct", known.len())));
    }
    let mut is_known = vec![false; l];
    for &k in known {
        if k >= l || is_known[k] {
            return Err(invalid(format!("known row index {k} is out of range or repeated")));
        }
        is_known[k] = true;
    }
    let unknown: Vec<usize> = (0..l).filter(|&i| !is_known[i]).collect();
    let xk = truth.select_rows(known.iter());
    let xu = truth.select_rows(unknown.iter());
    let xu_norm = linalg::frob_sq(&xu).sqrt();
    let degenerate = linalg::max_abs(&xk) == 0.0 || xu_norm == 0.0;

    let c = coded_x.nrows() as f64;
    let residual = coded_x.transpose() * coded_x / c - xk.transpose() * &xk;
    let eig = SymmetricEigen::new((&residual + residual.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rank = unknown.len().min(d);
    let noise_floor = if rank < d {
        order[rank..].iter().map(|&j| eig.eigenvalues[j]).sum::<f64>() / (d - rank) as f64
    } else {
        0.0
    };
    let mut factor = Matrix::zeros(rank, d);
    for (row, &j) in order[..rank].iter().enumerate() {
        let scale = (eig.eigenvalues[j] - noise_floor).max(0.0).sqrt();
        factor
            .row_mut(row)
            .copy_from(&(eig.eigenvectors.column(j).transpose() * scale));
    }
    // orthogonal Procrustes: rotate the factor onto the truth
    let cross = &xu * factor.transpose();
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let estimate = u * v_t * factor;
    let normalized_error = if xu_norm > 0.0 {
        linalg::frob_sq(&(estimate - &xu)).sqrt() / xu_norm
    } else {
        f64::NAN
    };
    Ok(AttackReport {
        normalized_error,
        noise_floor,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Re-derives the private draw for a seed; only available to tests.
    fn regenerate(seed: u64, c: usize, l: usize, d: usize, sigma2: f64) -> (Matrix, Matrix) {
        draw_projection(&mut rng::from_seed(seed), c, l, d, sigma2)
    }

    #[test]
    fn zero_data_yields_pure_noise() {
        let c = 400;
        let s = encode_local(&Matrix::zeros(3, 2), &Matrix::zeros(3, 1), c, 0.5, 11).unwrap();
        assert!(s.y.iter().all(|&v| v == 0.0));
        let var = linalg::frob_sq(&s.x) / (c * 2) as f64;
        assert!((var - 0.5).abs() < 0.1, "sample variance {var}");
    }

    #[test]
    fn noiseless_single_row_is_rank_one() {
        let x = Matrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let s = encode_local(&x, &Matrix::zeros(1, 1), 20, 0.0, 4).unwrap();
        for r in 0..20 {
            let g = s.x[(r, 0)];
            for j in 0..3 {
                assert!((s.x[(r, j)] - g * x[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn negative_noise_is_rejected() {
        assert!(encode_local(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1), 2, -1.0, 0).is_err());
    }

    #[test]
    fn coded_entries_have_zero_mean() {
        let x = Matrix::from_row_slice(2, 2, &[0.3, -0.7, 1.0, 0.2]);
        let y = Matrix::from_row_slice(2, 1, &[0.5, -0.1]);
        let draws = 10_000;
        let mut sum = Matrix::zeros(1, 2);
        let mut sq = Matrix::zeros(1, 2);
        for seed in 0..draws {
            let s = encode_local(&x, &y, 1, 0.2, seed).unwrap();
            let row = s.x.row(0).into_owned();
            sum += &row;
            sq += row.component_mul(&row);
        }
        let n = draws as f64;
        for j in 0..2 {
            let mean = sum[(0, j)] / n;
            let se = ((sq[(0, j)] / n - mean * mean) / n).sqrt();
            assert!(mean.abs() < 4.0 * se, "entry {j}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn single_shard_passes_through() {
        let s = encode_local(&Matrix::identity(2, 2), &Matrix::zeros(2, 1), 3, 0.1, 1).unwrap();
        let g = build_global(std::slice::from_ref(&s)).unwrap();
        assert_eq!(g.x, s.x);
        assert_eq!(g.y, s.y);
        assert_eq!(g.sigma2, 0.1);
    }

    #[test]
    fn opposite_shards_cancel() {
        let s = encode_local(&Matrix::identity(2, 2), &Matrix::identity(2, 1), 3, 0.0, 1).unwrap();
        let neg = CodedShard { x: -&s.x, y: -&s.y, sigma2: 0.0 };
        let g = build_global(&[s, neg]).unwrap();
        assert!(g.x.iter().chain(g.y.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn global_sum_equals_concatenated_projection() {
        let ds = crate::data::generate_synthetic(5, 9, 3, 2, 0.1).unwrap();
        let part = DevicePartition::new(vec![0..2, 2..6, 6..9], 9).unwrap();
        let sig = [0.1, 0.0, 0.3];
        let c = 7;
        let shards = encode_fleet(&ds, &part, c, &sig, 99).unwrap();
        let global = build_global(&shards).unwrap();

        let mut g_full = Matrix::zeros(c, 9);
        let mut n_full = Matrix::zeros(c, 3);
        for i in 0..3 {
            let r = part.range(i);
            let (g, n) = regenerate(shard_seed(99, i), c, r.len(), 3, sig[i]);
            g_full.columns_mut(r.start, r.len()).copy_from(&g);
            n_full += n;
        }
        let x = &g_full * ds.features() + n_full;
        let y = &g_full * ds.labels();
        assert!(linalg::max_abs(&(x - &global.x)) < 1e-12);
        assert!(linalg::max_abs(&(y - &global.y)) < 1e-12);
        assert!((global.sigma2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shards_are_rejected() {
        let a = encode_local(&Matrix::identity(2, 2), &Matrix::zeros(2, 1), 3, 0.0, 1).unwrap();
        let b = encode_local(&Matrix::identity(2, 2), &Matrix::zeros(2, 1), 4, 0.0, 1).unwrap();
        assert!(build_global(&[a, b]).is_err());
        assert!(build_global(&[]).is_err());
    }

    #[test]
    fn attack_flags_zero_known_rows() {
        let mut truth = Matrix::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        truth.row_mut(0).fill(0.0);
        let s = encode_local(&truth, &Matrix::zeros(5, 1), 50, 0.0, 2).unwrap();
        let rep = reconstruction_attack(&s.x, &truth, &[0]).unwrap();
        assert!(rep.degenerate);
        assert!(reconstruction_attack(&s.x, &truth, &[]).is_err());
        assert!(reconstruction_attack(&s.x, &truth, &[0, 1, 2, 3, 4]).is_err());
    }
}
