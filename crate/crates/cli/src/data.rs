//! Dataset ingestion: the 1-D toy problem, CSV loading, train/test
//! splitting and standardization.
//!
//! Standardization statistics always come from the training split alone;
//! the test split is transformed with the training statistics.

use std::path::Path;

use vbnet::linalg::DenseMatrix;
use vbnet::rng::Rng;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

/// Standardized train/test matrices plus the statistics that produced
/// them (needed to map predictions back to raw units).
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub task: Task,
    pub train_x: DenseMatrix,
    pub train_y: DenseMatrix,
    pub test_x: DenseMatrix,
    pub test_y: DenseMatrix,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Empty for classification.
    pub target_mean: Vec<f64>,
    /// Empty for classification.
    pub target_std: Vec<f64>,
}

/// The toy regression curve.
pub fn toy_function(x: f64) -> f64 {
    x.sin() + (x / 2.0).sin() + (x / 3.0).sin() - (x / 4.0).sin()
}

/// Standard deviation of the toy observation noise.
pub fn toy_noise_std() -> f64 {
    (-1.0f64).exp()
}

/// Raw (unstandardized) toy samples: x uniform in (-10, 10), targets
/// corrupted by N(0, exp(-2)) noise.
pub fn generate_toy_raw(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed).derive(0x70);
    let noise_std = toy_noise_std();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = -10.0 + 20.0 * rng.uniform();
        xs.push(x);
        ys.push(toy_function(x) + noise_std * rng.normal());
    }
    (xs, ys)
}

/// Toy dataset with an 80/20 split, standardized, deterministic per seed.
pub fn generate_toy(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 2 {
        return Err(CliError::Config("toy dataset needs at least 2 points".into()));
    }
    let (xs, ys) = generate_toy_raw(n, seed);
    let x = DenseMatrix::from_vec_unchecked(n, 1, xs);
    let y = DenseMatrix::from_vec_unchecked(n, 1, ys);
    split_and_standardize(x, y, Task::Regression, 0.8, seed)
}

/// Loads a numeric CSV with a header row. The last `label_columns`
/// columns are targets; classification expects one integer class column,
/// expanded to one-hot. 90/10 split by seeded permutation.
pub fn load_csv(path: &Path, task: Task, label_columns: usize, seed: u64) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, _header)) = lines.next() else {
        return Err(CliError::EmptyDataset);
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let w = *width.get_or_insert(fields.len());
        if fields.len() != w {
            return Err(CliError::RaggedRow {
                line: idx + 1,
                expected: w,
                got: fields.len(),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (c, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| CliError::Parse {
                line: idx + 1,
                column: c + 1,
                content: field.trim().to_string(),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::EmptyDataset);
    }
    let width = width.unwrap();
    if label_columns == 0 || label_columns >= width {
        return Err(CliError::Config(format!(
            "label_columns {label_columns} out of range for {width} columns"
        )));
    }
    let n = rows.len();
    let d = width - label_columns;
    let mut x = DenseMatrix::zeros(n, d);
    for (r, row) in rows.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&row[..d]);
    }
    let y = match task {
        Task::Regression => {
            let mut y = DenseMatrix::zeros(n, label_columns);
            for (r, row) in rows.iter().enumerate() {
                y.row_mut(r).copy_from_slice(&row[d..]);
            }
            y
        }
        Task::Classification => {
            if label_columns != 1 {
                return Err(CliError::Config(
                    "classification expects a single class column".into(),
                ));
            }
            let mut labels = Vec::with_capacity(n);
            for (r, row) in rows.iter().enumerate() {
                let v = row[d];
                let rounded = v.round();
                if (v - rounded).abs() > 1e-9 || rounded < 0.0 {
                    return Err(CliError::Parse {
                        line: r + 2,
                        column: d + 1,
                        content: format!("{v} (not a class index)"),
                    });
                }
                labels.push(rounded as usize);
            }
            let classes = labels.iter().max().copied().unwrap_or(0) + 1;
            let mut y = DenseMatrix::zeros(n, classes);
            for (r, &label) in labels.iter().enumerate() {
                y.set(r, label, 1.0);
            }
            y
        }
    };
    split_and_standardize(x, y, task, 0.9, seed)
}

fn split_and_standardize(
    x: DenseMatrix,
    y: DenseMatrix,
    task: Task,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let n = x.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed).derive(0x5b17);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    let n_train = (((n as f64) * train_fraction).round() as usize).clamp(1, n.max(2) - 1).max(1);
    let gather = |m: &DenseMatrix, idx: &[usize]| {
        let mut out = DenseMatrix::zeros(idx.len(), m.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        out
    };
    let mut train_x = gather(&x, &perm[..n_train]);
    let mut test_x = gather(&x, &perm[n_train..]);
    let mut train_y = gather(&y, &perm[..n_train]);
    let mut test_y = gather(&y, &perm[n_train..]);

    let (feature_mean, feature_std) = standardize_pair(&mut train_x, &mut test_x);
    let (target_mean, target_std) = match task {
        Task::Regression => standardize_pair(&mut train_y, &mut test_y),
        Task::Classification => (Vec::new(), Vec::new()),
    };
    Ok(DatasetSplit {
        task,
        train_x,
        train_y,
        test_x,
        test_y,
        feature_mean,
        feature_std,
        target_mean,
        target_std,
    })
}

/// Column statistics from `train` applied to both matrices. Columns with
/// zero spread keep scale 1 so constants pass through unchanged.
fn standardize_pair(train: &mut DenseMatrix, test: &mut DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let cols = train.cols();
    let n = train.rows() as f64;
    let mut means = vec![0.0; cols];
    let mut stds = vec![0.0; cols];
    for c in 0..cols {
        let mut sum = 0.0;
        for r in 0..train.rows() {
            sum += train.get(r, c);
        }
        let mean = sum / n;
        let mut var = 0.0;
        for r in 0..train.rows() {
            let d = train.get(r, c) - mean;
            var += d * d;
        }
        var /= n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        means[c] = mean;
        stds[c] = std;
        for r in 0..train.rows() {
            let v = (train.get(r, c) - mean) / std;
            train.set(r, c, v);
        }
        for r in 0..test.rows() {
            let v = (test.get(r, c) - mean) / std;
            test.set(r, c, v);
        }
    }
    (means, stds)
}
