//! Dataset generation, standardization, splitting, and CSV ingestion.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::model::RegressionData;
use crate::{Error, Result};

/// A named dataset of raw (or standardized) features and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn regression(&self) -> Result<RegressionData> {
        RegressionData::new(self.x.clone(), self.y.clone())
    }

    /// CSV with header `x1..xn,y1..ym`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let cols: Vec<String> = (1..=self.x.ncols())
            .map(|i| format!("x{i}"))
            .chain((1..=self.y.ncols()).map(|i| format!("y{i}")))
            .collect();
        out.push_str(&cols.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.y.row(i))
                .map(|v| format!("{v}"))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// The deterministic Regression2d mean surface `x1 sin(x1) + cos(x2)`.
pub fn regression2d_surface(x1: f64, x2: f64) -> f64 {
    x1 * x1.sin() + x2.cos()
}

/// Regression2d generator: `x1, x2 ~ U(-2, 2)`,
/// `y ~ N(x1 sin(x1) + cos(x2), 0.1^2)`.
pub fn gen_regression2d(n_points: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n_points);
    let mut ys = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x1 = rng.random_range(-2.0..2.0);
        let x2 = rng.random_range(-2.0..2.0);
        let noise: f64 = rng.sample(StandardNormal);
        xs.push(vec![x1, x2]);
        ys.push(vec![regression2d_surface(x1, x2) + 0.1 * noise]);
    }
    Dataset {
        name: "regression2d".into(),
        x: Matrix::from_rows(&xs).expect("rectangular rows"),
        y: Matrix::from_rows(&ys).expect("rectangular rows"),
    }
}

/// Configuration of the sinusoidal generator.
///
/// This is a stand-in for externally sourced 1D regression sets, not a
/// reproduction of any of them: inputs are uniform over the given intervals
/// and `y ~ N(amplitude * sin(2 pi frequency x), noise_std^2)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinusoidalSpec {
    pub intervals: Vec<(f64, f64)>,
    pub amplitude: f64,
    pub frequency: f64,
    pub noise_std: f64,
}

impl Default for SinusoidalSpec {
    fn default() -> Self {
        Self {
            intervals: vec![(-1.0, 1.0)],
            amplitude: 1.0,
            frequency: 0.5,
            noise_std: 0.1,
        }
    }
}

impl SinusoidalSpec {
    pub fn mean(&self, x: f64) -> f64 {
        self.amplitude * (2.0 * std::f64::consts::PI * self.frequency * x).sin()
    }

    fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::InvalidInput("need at least one x interval".into()));
        }
        if self.intervals.iter().any(|&(a, b)| !(b > a)) {
            return Err(Error::InvalidInput("intervals must satisfy a < b".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidInput("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sinusoidal 1D generator over a (possibly gapped) union of intervals.
pub fn gen_sinusoidal(n_points: usize, seed: u64, spec: &SinusoidalSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<f64> = spec.intervals.iter().map(|&(a, b)| b - a).collect();
    let total: f64 = lengths.iter().sum();
    let mut xs = Vec::with_capacity(n_points);
    let mut ys = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        // Interval chosen proportionally to its length, then uniform inside.
        let mut u = rng.random_range(0.0..total);
        let mut idx = 0;
        for (i, &len) in lengths.iter().enumerate() {
            if u < len {
                idx = i;
                break;
            }
            u -= len;
            idx = i;
        }
        let (a, b) = spec.intervals[idx];
        let x = rng.random_range(a..b);
        let noise: f64 = rng.sample(StandardNormal);
        xs.push(vec![x]);
        ys.push(vec![spec.mean(x) + spec.noise_std * noise]);
    }
    Ok(Dataset {
        name: "sinusoidal".into(),
        x: Matrix::from_rows(&xs).expect("rectangular rows"),
        y: Matrix::from_rows(&ys).expect("rectangular rows"),
    })
}

/// Per-column affine maps fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    /// Names of columns left unscaled because their training std was zero.
    pub degenerate_columns: Vec<String>,
}

impl Standardization {
    fn fit(x: &Matrix, y: &Matrix) -> Self {
        let fit_cols = |m: &Matrix, prefix: &str, degenerate: &mut Vec<String>| {
            let n = m.nrows() as f64;
            let mut means = vec![0.0; m.ncols()];
            let mut stds = vec![0.0; m.ncols()];
            for j in 0..m.ncols() {
                let mut mean = 0.0;
                for i in 0..m.nrows() {
                    mean += m.get(i, j);
                }
                mean /= n;
                let mut var = 0.0;
                for i in 0..m.nrows() {
                    var += (m.get(i, j) - mean).powi(2);
                }
                var /= n;
                means[j] = mean;
                let std = var.sqrt();
                if std == 0.0 {
                    degenerate.push(format!("{prefix}{}", j + 1));
                    stds[j] = 1.0;
                } else {
                    stds[j] = std;
                }
            }
            (means, stds)
        };
        let mut degenerate = Vec::new();
        let (x_mean, x_std) = fit_cols(x, "x", &mut degenerate);
        let (y_mean, y_std) = fit_cols(y, "y", &mut degenerate);
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
            degenerate_columns: degenerate,
        }
    }

    fn transform(m: &Matrix, means: &[f64], stds: &[f64]) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.nrows() {
            let row = out.row_mut(i);
            for j in 0..row.len() {
                row[j] = (row[j] - means[j]) / stds[j];
            }
        }
        out
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            name: ds.name.clone(),
            x: Self::transform(&ds.x, &self.x_mean, &self.x_std),
            y: Self::transform(&ds.y, &self.y_mean, &self.y_std),
        }
    }

    pub fn invert(&self, ds: &Dataset) -> Dataset {
        let invert_cols = |m: &Matrix, means: &[f64], stds: &[f64]| {
            let mut out = m.clone();
            for i in 0..out.nrows() {
                let row = out.row_mut(i);
                for j in 0..row.len() {
                    row[j] = row[j] * stds[j] + means[j];
                }
            }
            out
        };
        Dataset {
            name: ds.name.clone(),
            x: invert_cols(&ds.x, &self.x_mean, &self.x_std),
            y: invert_cols(&ds.y, &self.y_mean, &self.y_std),
        }
    }
}

/// A standardized train/test split plus the maps that produced it.
#[derive(Debug, Clone)]
pub struct SplitStandardized {
    pub train: Dataset,
    pub test: Dataset,
    pub standardization: Standardization,
}

/// Seeded random split; standardization (features and targets) is fitted on
/// the training rows and applied to both splits.
pub fn split_standardize(ds: &Dataset, train_frac: f64, seed: u64) -> Result<SplitStandardized> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "need at least two rows to split".into(),
        ));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);

    let take = |idx: &[usize]| -> Dataset {
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| ds.x.row(i).to_vec()).collect();
        let ys: Vec<Vec<f64>> = idx.iter().map(|&i| ds.y.row(i).to_vec()).collect();
        Dataset {
            name: ds.name.clone(),
            x: Matrix::from_rows(&xs).expect("rectangular rows"),
            y: Matrix::from_rows(&ys).expect("rectangular rows"),
        }
    };
    let train_raw = take(&indices[..n_train]);
    let test_raw = take(&indices[n_train..]);
    let standardization = Standardization::fit(&train_raw.x, &train_raw.y);
    Ok(SplitStandardized {
        train: standardization.apply(&train_raw),
        test: standardization.apply(&test_raw),
        standardization,
    })
}

/// Metadata written next to generated datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub standardization: Standardization,
}

/// Parses a numeric CSV with a mandatory header row.
///
/// A first line whose every cell parses as a number is treated as a missing
/// header. Ragged rows and non-numeric cells report their `(line, column)`.
pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Matrix)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty CSV file".into()))?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if header.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(Error::InvalidInput(
            "CSV is missing a header row (first line is numeric)".into(),
        ));
    }
    let ncols = header.len();
    let mut rows = Vec::new();
    for (line_idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::Parse {
                line: line_idx + 1,
                column: 1,
                message: format!("row has {} fields, expected {ncols}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(ncols);
        for (col, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| Error::Parse {
                line: line_idx + 1,
                column: col + 1,
                message: format!("{e} (cell {field:?})"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok((header, Matrix::from_rows(&rows)?))
}

/// Loads a dataset from CSV text, partitioning columns into features and the
/// named target columns.
pub fn load_csv_str(text: &str, name: &str, target_columns: &[String]) -> Result<Dataset> {
    if target_columns.is_empty() {
        return Err(Error::InvalidInput("need at least one target column".into()));
    }
    let (header, values) = parse_numeric_csv(text)?;
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for t in target_columns {
        let idx = header.iter().position(|h| h == t).ok_or_else(|| {
            Error::InvalidInput(format!(
                "target column {t:?} not found in header {header:?}"
            ))
        })?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| !target_idx.contains(i))
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::InvalidInput(
            "all columns declared as targets; no features left".into(),
        ));
    }
    let pick = |cols: &[usize]| -> Matrix {
        let rows: Vec<Vec<f64>> = (0..values.nrows())
            .map(|i| cols.iter().map(|&j| values.get(i, j)).collect())
            .collect();
        Matrix::from_rows(&rows).expect("rectangular rows")
    };
    Ok(Dataset {
        name: name.to_string(),
        x: pick(&feature_idx),
        y: pick(&target_idx),
    })
}

pub fn load_csv(path: &std::path::Path, target_columns: &[String]) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    load_csv_str(&text, &name, target_columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_values() {
        assert!((regression2d_surface(0.0, 0.0) - 1.0).abs() < 1e-15);
        let expected = 2.0 * 2f64.sin() + 1.0;
        assert!((regression2d_surface(2.0, 0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn regression2d_support_and_determinism() {
        let a = gen_regression2d(256, 7);
        let b = gen_regression2d(256, 7);
        assert_eq!(a, b);
        assert!(a.x.data().iter().all(|&v| (-2.0..2.0).contains(&v)));
        assert_eq!(a.len(), 256);
    }

    #[test]
    fn regression2d_residual_std_matches_noise() {
        let ds = gen_regression2d(4096, 11);
        let n = ds.len();
        let mut sq = 0.0;
        for i in 0..n {
            let r = ds.y.get(i, 0) - regression2d_surface(ds.x.get(i, 0), ds.x.get(i, 1));
            sq += r * r;
        }
        let std = (sq / n as f64).sqrt();
        assert!((std - 0.1).abs() < 0.02, "residual std {std}");
    }

    #[test]
    fn regression2d_input_moments() {
        let ds = gen_regression2d(100_000, 13);
        for j in 0..2 {
            let n = ds.len() as f64;
            let mean: f64 = (0..ds.len()).map(|i| ds.x.get(i, j)).sum::<f64>() / n;
            let var: f64 =
                (0..ds.len()).map(|i| (ds.x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 4.0 / 3.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn sinusoidal_zero_noise_lies_on_curve() {
        let spec = SinusoidalSpec {
            noise_std: 0.0,
            ..SinusoidalSpec::default()
        };
        let ds = gen_sinusoidal(64, 3, &spec).unwrap();
        for i in 0..ds.len() {
            let x = ds.x.get(i, 0);
            assert!((ds.y.get(i, 0) - spec.mean(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoidal_respects_interval_gaps() {
        let spec = SinusoidalSpec {
            intervals: vec![(-2.0, -1.0), (1.0, 2.0)],
            ..SinusoidalSpec::default()
        };
        let ds = gen_sinusoidal(512, 5, &spec).unwrap();
        let mut in_left = 0;
        for i in 0..ds.len() {
            let x = ds.x.get(i, 0);
            let left = (-2.0..-1.0).contains(&x);
            let right = (1.0..2.0).contains(&x);
            assert!(left || right, "x = {x} outside both intervals");
            if left {
                in_left += 1;
            }
        }
        assert!(in_left > 0 && in_left < ds.len());
        assert_eq!(
            gen_sinusoidal(512, 5, &spec).unwrap(),
            ds,
            "generator must be seed-deterministic"
        );
    }

    #[test]
    fn split_sizes_and_standardization() {
        let ds = gen_regression2d(10, 17);
        let split = split_standardize(&ds, 0.8, 1).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);

        let ds = gen_regression2d(256, 19);
        let split = split_standardize(&ds, 0.8, 2).unwrap();
        assert_eq!(split.train.len(), 205);
        assert_eq!(split.test.len(), 51);
        // Training columns have mean 0 and std 1.
        for m in [&split.train.x, &split.train.y] {
            let n = m.nrows() as f64;
            for j in 0..m.ncols() {
                let mean: f64 = (0..m.nrows()).map(|i| m.get(i, j)).sum::<f64>() / n;
                let var: f64 =
                    (0..m.nrows()).map(|i| (m.get(i, j) - mean).powi(2)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-9);
                assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardization_round_trips() {
        let ds = gen_regression2d(64, 23);
        let split = split_standardize(&ds, 0.8, 3).unwrap();
        let recovered = split.standardization.invert(&split.train);
        // Recovered rows must match some raw rows exactly (up to float noise).
        for i in 0..recovered.len() {
            let rx = recovered.x.row(i);
            let found = (0..ds.len()).any(|k| {
                ds.x.row(k)
                    .iter()
                    .zip(rx)
                    .all(|(a, b)| (a - b).abs() < 1e-12)
            });
            assert!(found, "row {i} not recovered");
        }
    }

    #[test]
    fn degenerate_column_passes_through() {
        let ds = Dataset {
            name: "const".into(),
            x: Matrix::from_rows(&[
                vec![5.0, 1.0],
                vec![5.0, 2.0],
                vec![5.0, 3.0],
                vec![5.0, 4.0],
            ])
            .unwrap(),
            y: Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap(),
        };
        let split = split_standardize(&ds, 0.5, 7).unwrap();
        assert_eq!(split.standardization.degenerate_columns, vec!["x1"]);
        // The constant column is only centered, never rescaled.
        assert!(split.train.x.iter_rows().all(|r| r[0].abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip_and_target_partition() {
        let ds = gen_regression2d(16, 29);
        let csv = ds.to_csv();
        let back = load_csv_str(&csv, "regression2d", &["y1".to_string()]).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn three_column_file_with_one_target() {
        let text = "a,b,t\n1,2,3\n4,5,6\n";
        let ds = load_csv_str(text, "toy", &["t".to_string()]).unwrap();
        assert_eq!(ds.x.ncols(), 2);
        assert_eq!(ds.y.ncols(), 1);
        assert_eq!(ds.y.get(1, 0), 6.0);
    }

    #[test]
    fn airfoil_shaped_file_accepted() {
        let mut text = String::from("f1,f2,f3,f4,f5,target\n");
        for i in 0..8 {
            text.push_str(&format!("{i},1,2,3,4,{}\n", i * 2));
        }
        let ds = load_csv_str(&text, "airfoil", &["target".to_string()]).unwrap();
        assert_eq!(ds.x.ncols(), 5);
        assert_eq!(ds.len(), 8);
    }

    #[test]
    fn csv_errors_carry_location() {
        match load_csv_str("a,b\n1,oops\n", "broken", &["b".to_string()]) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!((line, column), (2, 2));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        match load_csv_str("a,b\n1,2\n3\n", "ragged", &["b".to_string()]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(load_csv_str("1,2\n3,4\n", "headerless", &["y".to_string()]).is_err());
    }
}
