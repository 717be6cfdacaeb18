//! Datasets, device partitions, synthetic generation and CSV ingestion.
//!
//! Local datasets are row ranges into one global matrix. A partition never
//! copies data; callers slice rows when they need a device's local view.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Stream};

/// Global features `X` (m x d) and labels `Y` (m x o).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "features have {} rows but labels have {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Empty("dataset needs m, d, o >= 1".into()));
        }
        if !linalg::is_finite(&x) || !linalg::is_finite(&y) {
            return Err(invalid("dataset contains non-finite values"));
        }
        Ok(Self { x, y })
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn labels(&self) -> &Matrix {
        &self.y
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn o(&self) -> usize {
        self.y.ncols()
    }

    /// Owned copy of a contiguous block of rows.
    pub fn slice(&self, rows: Range<usize>) -> (Matrix, Matrix) {
        let n = rows.end - rows.start;
        (
            self.x.rows(rows.start, n).into_owned(),
            self.y.rows(rows.start, n).into_owned(),
        )
    }

    /// Rows in the given order.
    pub fn select(&self, order: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(order.iter()),
            y: self.y.select_rows(order.iter()),
        }
    }
}

/// Disjoint, ordered, contiguous row ranges covering `[0, m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DevicePartition {
    ranges: Vec<Range<usize>>,
}

impl DevicePartition {
    pub fn new(ranges: Vec<Range<usize>>, m: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Empty("partition needs at least one device".into()));
        }
        let mut next = 0;
        for (i, r) in ranges.iter().enumerate() {
            if r.start != next || r.end <= r.start {
                return Err(invalid(format!(
                    "device {i} range {r:?} breaks contiguous coverage at row {next}"
                )));
            }
            next = r.end;
        }
        if next != m {
            return Err(invalid(format!("partition covers {next} rows, dataset has {m}")));
        }
        Ok(Self { ranges })
    }

    /// `n` nearly equal contiguous blocks; the first `m % n` get one extra row.
    pub fn even(m: usize, n: usize) -> Result<Self> {
        if n == 0 || n > m {
            return Err(invalid(format!("cannot split {m} rows across {n} devices")));
        }
        let base = m / n;
        let extra = m % n;
        let mut start = 0;
        let ranges = (0..n)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self::new(ranges, m)
    }

    pub fn device_count(&self) -> usize {
        self.ranges.len()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.ranges[i].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.end - r.start).collect()
    }
}

/// Label-sorted shard split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSortSpec {
    pub shards_per_device: usize,
}

impl Default for LabelSortSpec {
    fn default() -> Self {
        Self { shards_per_device: 1 }
    }
}

/// Synthetic regression data together with the generating model.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub w_true: Matrix,
}

/// Features uniform in [-1, 1] (then normalized), `Y = X W_true + noise`.
pub fn generate_synthetic(seed: u64, m: usize, d: usize, o: usize, noise_std: f64) -> Result<Dataset> {
    Ok(generate_synthetic_split(seed, m, 0, d, o, noise_std)?.train)
}

/// Same generator, with `m_test` extra held-out rows drawn from the same model.
pub fn generate_synthetic_split(
    seed: u64,
    m: usize,
    m_test: usize,
    d: usize,
    o: usize,
    noise_std: f64,
) -> Result<SyntheticData> {
    if m == 0 || d == 0 || o == 0 {
        return Err(invalid("synthetic data needs m, d, o >= 1"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid("noise_std must be non-negative"));
    }
    let mut rng = rng::stream(seed, Stream::Synthetic, &[]);
    let w_true = linalg::standard_normal(d, o, &mut rng);
    let total = m + m_test;
    let raw = linalg::uniform(total, d, -1.0, 1.0, &mut rng);
    let scale = linalg::max_abs(&raw);
    let x = if scale > 0.0 { raw / scale } else { raw };
    let mut y = &x * &w_true;
    if noise_std > 0.0 {
        y += linalg::normal(total, o, noise_std, &mut rng);
    }
    let train = Dataset::new(x.rows(0, m).into_owned(), y.rows(0, m).into_owned())?;
    let test = if m_test > 0 {
        Dataset::new(x.rows(m, m_test).into_owned(), y.rows(m, m_test).into_owned())?
    } else {
        train.clone()
    };
    Ok(SyntheticData { train, test, w_true })
}

/// Divides every feature by the largest absolute feature entry.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    let scale = linalg::max_abs(&ds.x);
    if scale == 0.0 {
        return Err(invalid("cannot normalize an all-zero feature matrix"));
    }
    let x = if scale == 1.0 { ds.x.clone() } else { &ds.x / scale };
    Ok(Dataset { x, y: ds.y.clone() })
}

fn expected_header(d: usize, o: usize) -> Vec<String> {
    (0..d)
        .map(|j| format!("f{j}"))
        .chain((0..o).map(|j| format!("y{j}")))
        .collect()
}

/// Reads a dataset with header `f0..f{d-1},y0..y{o-1}`.
pub fn load_csv(path: impl AsRef<Path>, d: usize, o: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let expected = expected_header(d, o);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    for (j, want) in expected.iter().enumerate() {
        match header.get(j) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(Error::CsvHeader(format!(
                    "column {j} is `{got}`, expected `{want}`"
                )))
            }
            None => return Err(Error::CsvHeader(format!("missing column `{want}`"))),
        }
    }
    if header.len() > expected.len() {
        return Err(Error::CsvHeader(format!(
            "unexpected extra column `{}`",
            header[expected.len()]
        )));
    }
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2; // 1-based, after the header line
        if record.len() != expected.len() {
            return Err(Error::CsvCell {
                row,
                column: expected.get(record.len()).cloned().unwrap_or_default(),
                message: format!("expected {} cells, found {}", expected.len(), record.len()),
            });
        }
        for (cell, name) in record.iter().zip(&expected) {
            let v: f64 = cell.parse().map_err(|_| Error::CsvCell {
                row,
                column: name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            values.push(v);
        }
    }
    let m = values.len() / expected.len();
    if m == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.as_ref().display())));
    }
    let all = Matrix::from_row_slice(m, d + o, &values);
    Dataset::new(all.columns(0, d).into_owned(), all.columns(d, o).into_owned())
}

/// Writes features and labels with the ingestion header. Values use the
/// shortest representation that round-trips exactly.
pub fn write_csv(path: impl AsRef<Path>, x: &Matrix, y: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(expected_header(x.ncols(), y.ncols()))?;
    for i in 0..x.nrows() {
        let row: Vec<String> = x
            .row(i)
            .iter()
            .chain(y.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sorts rows by the first label column (ties by index), cuts them into
/// `N * shards_per_device` shards and hands shards to devices by a seeded
/// permutation. The returned dataset is reordered so that every device owns
/// one contiguous range.
pub fn partition_noniid(
    ds: &Dataset,
    n: usize,
    spec: LabelSortSpec,
    seed: u64,
) -> Result<(Dataset, DevicePartition)> {
    let m = ds.m();
    if n == 0 || n > m {
        return Err(invalid(format!("cannot split {m} rows across {n} devices")));
    }
    if spec.shards_per_device == 0 {
        return Err(invalid("shards_per_device must be positive"));
    }
    let shard_count = n * spec.shards_per_device;
    if shard_count > m {
        return Err(invalid(format!("{shard_count} shards exceed {m} rows")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    let label = ds.y.column(0);
    order.sort_by(|&a, &b| label[a].total_cmp(&label[b]).then(a.cmp(&b)));

    let base = m / shard_count;
    let shards: Vec<Range<usize>> = (0..shard_count)
        .map(|s| {
            let start = s * base;
            let end = if s + 1 == shard_count { m } else { start + base };
            start..end
        })
        .collect();
    let mut assignment: Vec<usize> = (0..shard_count).collect();
    assignment.shuffle(&mut rng::stream(seed, Stream::Partition, &[]));

    let mut reordered = Vec::with_capacity(m);
    let mut ranges = Vec::with_capacity(n);
    for device in 0..n {
        let start = reordered.len();
        for &shard in &assignment[device * spec.shards_per_device..(device + 1) * spec.shards_per_device] {
            reordered.extend(shards[shard].clone().map(|k| order[k]));
        }
        ranges.push(start..reordered.len());
    }
    Ok((ds.select(&reordered), DevicePartition::new(ranges, m)?))
}
