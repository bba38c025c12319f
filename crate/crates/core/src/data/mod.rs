//! Datasets: synthetic generators, the IDX loader and the mini-batch sampler.

mod idx;
mod synth;

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Targets, Task};
use crate::numerics::{Matrix, Rng};

pub use idx::{load_idx, load_mnist_dir, parse_idx_images, parse_idx_labels};
pub use synth::{gen_blobs, gen_spirals, gen_teacher_student};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub targets: Targets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Number of classes for classification data.
    pub classes: Option<usize>,
    pub provenance: String,
}

/// Per-feature affine map fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    /// All rows in the training split.
    pub fn new(x: Matrix, targets: Targets, provenance: impl Into<String>) -> Result<Self> {
        let classes = match &targets {
            Targets::Classes(c) => Some(c.iter().copied().max().map_or(0, |m| m + 1)),
            Targets::Values(_) => None,
        };
        let d = Dataset {
            train: (0..x.rows()).collect(),
            test: Vec::new(),
            x,
            targets,
            classes,
            provenance: provenance.into(),
        };
        d.check()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_width(&self) -> usize {
        self.x.cols()
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    /// Checks finiteness, label range and that the split partitions the rows.
    pub fn check(&self) -> Result<()> {
        if self.targets.len() != self.x.rows() {
            return Err(Error::domain(format!(
                "{} inputs but {} targets",
                self.x.rows(),
                self.targets.len()
            )));
        }
        if !self.x.is_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        match &self.targets {
            Targets::Values(y) if !y.is_finite() => return Err(Error::NonFinite("dataset targets".into())),
            Targets::Classes(c) => {
                let n = self.classes.unwrap_or(0);
                if let Some(bad) = c.iter().find(|&&k| k >= n) {
                    return Err(Error::domain(format!("label {bad} outside [0, {n})")));
                }
            }
            _ => {}
        }
        let mut seen = vec![false; self.len()];
        for &i in self.train.iter().chain(&self.test) {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::domain(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::domain("train/test split does not cover every row"));
        }
        Ok(())
    }

    /// Random train/test split with `test_fraction` of the rows held out.
    pub fn split(mut self, test_fraction: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::domain(format!("test fraction must lie in [0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        self.test = idx[..n_test].to_vec();
        self.test.sort_unstable();
        self.train = idx[n_test..].to_vec();
        self.train.sort_unstable();
        Ok(self)
    }

    /// Rows `idx` as a batch.
    pub fn rows(&self, idx: &[usize]) -> (Matrix, Targets) {
        let cols: Vec<usize> = (0..self.x.cols()).collect();
        (self.x.select(idx, &cols), self.targets.select(idx))
    }

    pub fn train_part(&self) -> (Matrix, Targets) {
        self.rows(&self.train)
    }

    pub fn test_part(&self) -> (Matrix, Targets) {
        self.rows(&self.test)
    }

    /// Fits per-feature mean and standard deviation on the training rows.
    ///
    /// Constant features keep unit scale so they map to zero rather than NaN.
    pub fn fit_standardizer(&self) -> Standardizer {
        let m = self.x.cols();
        let n = self.train.len().max(1) as f64;
        let mut mean = vec![0.0; m];
        for &i in &self.train {
            for (a, v) in mean.iter_mut().zip(self.x.row(i)) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m];
        for &i in &self.train {
            for ((a, v), mu) in var.iter_mut().zip(self.x.row(i)).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    /// Standardizes every row with statistics of the training split.
    pub fn standardize(&mut self) -> Standardizer {
        let s = self.fit_standardizer();
        s.apply(&mut self.x);
        s
    }

    /// Writes inputs followed by targets, one row per sample.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut header: Vec<String> = (0..self.x.cols()).map(|j| format!("x{j}")).collect();
        match &self.targets {
            Targets::Values(y) => header.extend((0..y.cols()).map(|j| format!("y{j}"))),
            Targets::Classes(_) => header.push("class".into()),
        }
        header.push("split".into());
        writeln!(out, "{}", header.join(","))?;
        let mut is_test = vec![false; self.len()];
        for &i in &self.test {
            is_test[i] = true;
        }
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            match &self.targets {
                Targets::Values(y) => fields.extend(y.row(i).iter().map(|v| v.to_string())),
                Targets::Classes(c) => fields.push(c[i].to_string()),
            }
            fields.push(if is_test[i] { "test" } else { "train" }.into());
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Empirical `E‖x‖⁴` over all rows, a finite-moment sanity statistic.
    pub fn fourth_moment(&self) -> f64 {
        let n = self.len().max(1) as f64;
        (0..self.len())
            .map(|i| {
                let s: f64 = self.x.row(i).iter().map(|v| v * v).sum();
                s * s
            })
            .sum::<f64>()
            / n
    }
}

impl Standardizer {
    pub fn apply(&self, x: &mut Matrix) {
        for i in 0..x.rows() {
            for ((v, mu), sd) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

/// `b` training-row indices drawn uniformly with replacement.
pub fn sample_batch(data: &Dataset, b: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    if data.train.is_empty() {
        return Err(Error::domain("training split is empty"));
    }
    let n = data.train.len() as u64;
    Ok((0..b).map(|_| data.train[rng.below(n) as usize]).collect())
}
