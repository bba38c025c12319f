use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{forward, GateSample, NetworkSpec, Targets, WeightSet};
use crate::numerics::{Matrix, Rng};

use super::Dataset;

/// Regression data `y = teacher(x) + σ·ε` with `x, ε` standard normal.
pub fn gen_teacher_student(
    teacher: &NetworkSpec,
    weights: &WeightSet,
    n: usize,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("noise level must be non-negative, got {sigma}")));
    }
    let x = Matrix::from_fn(n, teacher.input_width(), |_, _| rng.normal());
    let (mut y, _) = forward(teacher, weights, &GateSample::ones(teacher), &x)?;
    if sigma > 0.0 {
        y.as_mut_slice().iter_mut().for_each(|v| *v += sigma * rng.normal());
    }
    Dataset::new(x, Targets::Values(y), format!("teacher-student n={n} sigma={sigma}"))
}

/// Gaussian blobs with unit covariance; centers sit evenly on a circle of radius
/// `separation` in the first two coordinates.
pub fn gen_blobs(classes: usize, n: usize, dim: usize, separation: f64, rng: &mut Rng) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::domain(format!("blobs need at least 2 classes, got {classes}")));
    }
    if dim < 2 {
        return Err(Error::domain(format!("blobs need at least 2 dimensions, got {dim}")));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Matrix::from_fn(n, dim, |i, j| {
        let angle = 2.0 * PI * labels[i] as f64 / classes as f64;
        let center = match j {
            0 => separation * angle.cos(),
            1 => separation * angle.sin(),
            _ => 0.0,
        };
        center + rng.normal()
    });
    let mut d = Dataset::new(x, Targets::Classes(labels), format!("blobs k={classes} n={n} sep={separation}"))?;
    d.classes = Some(classes);
    Ok(d)
}

/// Two interleaved spiral arms in the plane, each sweeping `turns` revolutions.
pub fn gen_spirals(n: usize, turns: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(turns > 0.0) {
        return Err(Error::domain(format!("turns must be positive, got {turns}")));
    }
    let mut labels = Vec::with_capacity(n);
    let mut x = Matrix::zeros(n, 2);
    for i in 0..n {
        let class = i % 2;
        let t = rng.uniform();
        let r = 0.2 + 0.8 * t;
        let phi = 2.0 * PI * turns * t + class as f64 * PI;
        x[(i, 0)] = r * phi.cos() + 0.02 * rng.normal();
        x[(i, 1)] = r * phi.sin() + 0.02 * rng.normal();
        labels.push(class);
    }
    let mut d = Dataset::new(x, Targets::Classes(labels), format!("spirals n={n} turns={turns}"))?;
    d.classes = Some(2);
    Ok(d)
}
