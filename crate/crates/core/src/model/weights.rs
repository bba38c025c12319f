use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::{NetworkSpec, SkipKind};
use crate::numerics::{Matrix, Rng};

/// Trainable matrices of one block. Biases live in the last column of `w1` and `w3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    /// `hidden × (in + 1)`
    pub w1: Option<Matrix>,
    /// `out × hidden`
    pub w2: Option<Matrix>,
    /// `out × (in + 1)`; `None` for identity skips.
    pub w3: Option<Matrix>,
}

impl BlockWeights {
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        [&self.w1, &self.w2, &self.w3].into_iter().flatten()
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        [&mut self.w1, &mut self.w2, &mut self.w3].into_iter().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub blocks: Vec<BlockWeights>,
}

impl WeightSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let blocks = spec
            .blocks
            .iter()
            .map(|b| BlockWeights {
                w1: b.nonlinear.then(|| Matrix::zeros(b.hidden, b.input + 1)),
                w2: b.nonlinear.then(|| Matrix::zeros(b.output, b.hidden)),
                w3: (b.skip == SkipKind::Dense).then(|| Matrix::zeros(b.output, b.input + 1)),
            })
            .collect();
        WeightSet { blocks }
    }

    /// Fan-in scaled uniform `U(−1/√fan_in, 1/√fan_in)` weights with zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Self {
        let mut w = WeightSet::zeros(spec);
        for (bw, b) in w.blocks.iter_mut().zip(&spec.blocks) {
            let fill = |m: &mut Matrix, fan_in: usize, has_bias: bool, rng: &mut Rng| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight_cols = if has_bias { m.cols() - 1 } else { m.cols() };
                for i in 0..m.rows() {
                    for j in 0..weight_cols {
                        m[(i, j)] = rng.uniform_range(-bound, bound);
                    }
                }
            };
            if let Some(m) = bw.w1.as_mut() {
                fill(m, b.input, true, rng);
            }
            if let Some(m) = bw.w2.as_mut() {
                fill(m, b.hidden, false, rng);
            }
            if let Some(m) = bw.w3.as_mut() {
                fill(m, b.input, true, rng);
            }
        }
        w
    }

    /// Errors unless every matrix has the shape `spec` prescribes.
    pub fn check_shapes(&self, spec: &NetworkSpec) -> Result<()> {
        let expect = WeightSet::zeros(spec);
        if expect.blocks.len() != self.blocks.len() {
            return Err(Error::spec(format!(
                "weight set has {} blocks, architecture has {}",
                self.blocks.len(),
                expect.blocks.len()
            )));
        }
        for (l, (a, b)) in self.blocks.iter().zip(&expect.blocks).enumerate() {
            let pairs = [(&a.w1, &b.w1, "W1"), (&a.w2, &b.w2, "W2"), (&a.w3, &b.w3, "W3")];
            for (x, y, name) in pairs {
                let ok = match (x, y) {
                    (Some(x), Some(y)) => x.shape() == y.shape(),
                    (None, None) => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::spec(format!(
                        "block {l}: {name} shape {:?} does not match architecture {:?}",
                        x.as_ref().map(Matrix::shape),
                        y.as_ref().map(Matrix::shape)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks.iter().flat_map(|b| b.matrices()).map(Matrix::norm_sq).sum()
    }

    /// Flattened view of every trainable entry (fixed order: block, W1, W2, W3, row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.matrices())
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for m in self.blocks.iter_mut().flat_map(|b| b.matrices_mut()) {
            for v in m.as_mut_slice() {
                *v = it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flat_map(|b| b.matrices()).all(Matrix::is_finite)
    }
}
