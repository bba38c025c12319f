use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::spec::{NetworkSpec, SkipKind, Task};
use crate::model::weights::{BlockWeights, WeightSet};
use crate::numerics::Matrix;

/// Gate multipliers of one block. Entries are 0/1 when sampled, arbitrary reals when relaxed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSample {
    pub b: f64,
    pub units: Vec<f64>,
    pub inputs: Vec<f64>,
    /// Evaluate the nonlinear path even when `b == 0` so that `dĈ/dξ_B` is available.
    pub probe: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub blocks: Vec<BlockSample>,
}

impl GateSample {
    /// Every multiplier equal to one; skip-only blocks carry `b = 0`.
    pub fn ones(spec: &NetworkSpec) -> Self {
        GateSample {
            blocks: spec
                .blocks
                .iter()
                .map(|b| BlockSample {
                    b: if b.nonlinear { 1.0 } else { 0.0 },
                    units: vec![1.0; b.hidden],
                    inputs: vec![1.0; b.input],
                    probe: b.nonlinear,
                })
                .collect(),
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.blocks.len() != spec.blocks.len() {
            return Err(Error::spec(format!(
                "gate sample has {} blocks, architecture has {}",
                self.blocks.len(),
                spec.blocks.len()
            )));
        }
        for (l, (s, b)) in self.blocks.iter().zip(&spec.blocks).enumerate() {
            if s.units.len() != b.hidden || s.inputs.len() != b.input {
                return Err(Error::spec(format!(
                    "block {l}: gate sample widths ({}, {}) do not match ({}, {})",
                    s.units.len(),
                    s.inputs.len(),
                    b.hidden,
                    b.input
                )));
            }
        }
        Ok(())
    }
}

/// `dĈ/dξ` for every gate entry, laid out like [`GateSample`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateGrads {
    pub blocks: Vec<BlockGateGrad>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockGateGrad {
    pub b: f64,
    pub units: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl GateGrads {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        GateGrads {
            blocks: spec
                .blocks
                .iter()
                .map(|b| BlockGateGrad {
                    b: 0.0,
                    units: vec![0.0; b.hidden],
                    inputs: vec![0.0; b.input],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GateGrads, s: f64) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.b += s * b.b;
            for (x, y) in a.units.iter_mut().zip(&b.units) {
                *x += s * y;
            }
            for (x, y) in a.inputs.iter_mut().zip(&b.inputs) {
                *x += s * y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Values(_) => Task::Regression,
            Targets::Classes(_) => Task::Classification,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => {
                let cols: Vec<usize> = (0..m.cols()).collect();
                Targets::Values(m.select(idx, &cols))
            }
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockTrace {
    z: Matrix,
    hz: Matrix,
    zbar1: Matrix,
    /// `(u, a(u), ξ₁ ⊙ a(u), v)` when the nonlinear path was evaluated.
    path: Option<(Matrix, Matrix, Matrix, Matrix)>,
}

/// Forward cache for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    z_out: Matrix,
    pub sample: GateSample,
}

impl ForwardTrace {
    pub fn input(&self) -> &Matrix {
        &self.blocks[0].z
    }

    pub fn batch_size(&self) -> usize {
        self.z_out.rows()
    }
}

/// Per-block `Σ_batch` of `m ⊙ scale` columns.
fn scale_cols(m: &mut Matrix, scale: &[f64]) {
    for i in 0..m.rows() {
        for (v, s) in m.row_mut(i).iter_mut().zip(scale) {
            *v *= s;
        }
    }
}

fn col_dot_sums(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for i in 0..a.rows() {
        for ((o, x), y) in out.iter_mut().zip(a.row(i)).zip(b.row(i)) {
            *o += x * y;
        }
    }
    out
}

fn drop_last_col(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols() - 1, |i, j| m[(i, j)])
}

fn block_err(l: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("block {l}: {what}")),
        other => other,
    }
}

/// Gated residual forward pass over a batch (rows of `x`).
pub fn forward(spec: &NetworkSpec, w: &WeightSet, xi: &GateSample, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    xi.check(spec)?;
    w.check_shapes(spec)?;
    if x.cols() != spec.input_width() {
        return Err(Error::Shape {
            op: "forward input",
            left: x.shape(),
            right: (x.rows(), spec.input_width()),
        });
    }
    let mut z = x.clone();
    let mut traces = Vec::with_capacity(spec.blocks.len());
    for (l, ((b, bw), s)) in spec.blocks.iter().zip(&w.blocks).zip(&xi.blocks).enumerate() {
        let hz = z.map(|v| b.input_activation.apply(v));
        let mut zbar = hz.clone();
        scale_cols(&mut zbar, &s.inputs);
        let zbar1 = zbar.with_ones_col();

        let path = match (&bw.w1, &bw.w2) {
            (Some(w1), Some(w2)) if s.b != 0.0 || s.probe => {
                let u = zbar1.matmul_t(w1).map_err(|e| block_err(l, e))?;
                let act = u.map(|v| b.activation.apply(v));
                let mut g = act.clone();
                scale_cols(&mut g, &s.units);
                let v = g.matmul_t(w2).map_err(|e| block_err(l, e))?;
                Some((u, act, g, v))
            }
            _ => None,
        };

        let mut next = match (b.skip, &bw.w3) {
            (SkipKind::Dense, Some(w3)) => zbar1.matmul_t(w3).map_err(|e| block_err(l, e))?,
            (SkipKind::Identity, None) => zbar.clone(),
            _ => return Err(Error::spec(format!("block {l}: skip kind {:?} cannot be evaluated", b.skip))),
        };
        if let Some((_, _, _, v)) = &path {
            if s.b != 0.0 {
                for (o, p) in next.as_mut_slice().iter_mut().zip(v.as_slice()) {
                    *o += s.b * p;
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("block {l}: activations")));
        }
        traces.push(BlockTrace {
            z: std::mem::replace(&mut z, next),
            hz,
            zbar1,
            path,
        });
    }
    let pred = z.map(|v| spec.output_activation.apply(v));
    if !pred.is_finite() {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok((
        pred,
        ForwardTrace {
            blocks: traces,
            z_out: z,
            sample: xi.clone(),
        },
    ))
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Per-sample mean loss and its gradient with respect to the predictions.
pub fn loss_and_grad(pred: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let n = pred.rows();
    if targets.len() != n {
        return Err(Error::Shape {
            op: "loss",
            left: pred.shape(),
            right: (targets.len(), pred.cols()),
        });
    }
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, pred.cols())));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, pred.cols());
    let mut total = 0.0;
    match targets {
        Targets::Values(y) => {
            if y.shape() != pred.shape() {
                return Err(Error::Shape {
                    op: "loss",
                    left: pred.shape(),
                    right: y.shape(),
                });
            }
            for i in 0..n {
                for j in 0..pred.cols() {
                    let d = pred[(i, j)] - y[(i, j)];
                    total += 0.5 * d * d;
                    grad[(i, j)] = d * inv_n;
                }
            }
        }
        Targets::Classes(c) => {
            for (i, &class) in c.iter().enumerate() {
                if class >= pred.cols() {
                    return Err(Error::domain(format!(
                        "class label {class} out of range for {} outputs",
                        pred.cols()
                    )));
                }
                let ls = log_softmax_row(pred.row(i));
                total -= ls[class];
                for (j, l) in ls.iter().enumerate() {
                    let onehot = if j == class { 1.0 } else { 0.0 };
                    grad[(i, j)] = (l.exp() - onehot) * inv_n;
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn loss(pred: &Matrix, targets: &Targets) -> Result<f64> {
    loss_and_grad(pred, targets).map(|(l, _)| l)
}

/// Count of rows whose arg-max matches the class label.
pub fn correct_predictions(pred: &Matrix, classes: &[usize]) -> usize {
    (0..pred.rows())
        .filter(|&i| {
            let row = pred.row(i);
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) })
                .0;
            arg == classes[i]
        })
        .count()
}

/// Reverse pass: weight gradients for the realized gates and `dĈ/dξ` at the sampled values.
pub fn backward(spec: &NetworkSpec, w: &WeightSet, trace: &ForwardTrace, dpred: &Matrix) -> Result<(WeightSet, GateGrads)> {
    if trace.blocks.len() != spec.blocks.len() || w.check_shapes(spec).is_err() {
        return Err(Error::spec("stale forward trace: architecture or weights changed shape"));
    }
    if dpred.shape() != trace.z_out.shape() {
        return Err(Error::Shape {
            op: "backward output gradient",
            left: dpred.shape(),
            right: trace.z_out.shape(),
        });
    }
    let mut wgrad = WeightSet::zeros(spec);
    let mut ggrad = GateGrads::zeros(spec);

    let mut dz = dpred.clone();
    for (v, z) in dz.as_mut_slice().iter_mut().zip(trace.z_out.as_slice()) {
        *v *= spec.output_activation.derivative(*z);
    }

    for l in (0..spec.blocks.len()).rev() {
        let b = &spec.blocks[l];
        let bw: &BlockWeights = &w.blocks[l];
        let t = &trace.blocks[l];
        let s = &trace.sample.blocks[l];
        if t.zbar1.cols() != b.input + 1 || dz.cols() != b.output {
            return Err(Error::spec(format!("stale forward trace at block {l}")));
        }
        let gw = &mut wgrad.blocks[l];
        let gg = &mut ggrad.blocks[l];
        let mut dzbar1 = Matrix::zeros(t.zbar1.rows(), t.zbar1.cols());

        if let (Some((u, act, g, v)), Some(w1), Some(w2)) = (&t.path, &bw.w1, &bw.w2) {
            gg.b = dz.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
            if s.b != 0.0 {
                let mut dv = dz.clone();
                dv.scale(s.b);
                gw.w2 = Some(dv.t_matmul(g)?);
                let dg = dv.matmul(w2)?;
                gg.units = col_dot_sums(&dg, act);
                let mut du = dg;
                scale_cols(&mut du, &s.units);
                for (d, x) in du.as_mut_slice().iter_mut().zip(u.as_slice()) {
                    *d *= b.activation.derivative(*x);
                }
                gw.w1 = Some(du.t_matmul(&t.zbar1)?);
                dzbar1 = du.matmul(w1)?;
            }
        }

        match (b.skip, &bw.w3) {
            (SkipKind::Dense, Some(w3)) => {
                gw.w3 = Some(dz.t_matmul(&t.zbar1)?);
                dzbar1.add_assign(&dz.matmul(w3)?)?;
            }
            _ => {
                for i in 0..dz.rows() {
                    let src = dz.row(i).to_vec();
                    for (d, v) in dzbar1.row_mut(i).iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }

        let dzbar = drop_last_col(&dzbar1);
        gg.inputs = col_dot_sums(&dzbar, &t.hz);
        if l > 0 {
            let mut dprev = dzbar;
            scale_cols(&mut dprev, &s.inputs);
            for (d, z) in dprev.as_mut_slice().iter_mut().zip(t.z.as_slice()) {
                *d *= b.input_activation.derivative(*z);
            }
            dz = dprev;
        }
    }
    Ok((wgrad, ggrad))
}

/// Forward, loss and backward in one call.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    w: &WeightSet,
    xi: &GateSample,
    x: &Matrix,
    targets: &Targets,
) -> Result<(f64, WeightSet, GateGrads)> {
    let (pred, trace) = forward(spec, w, xi, x)?;
    let (l, dpred) = loss_and_grad(&pred, targets)?;
    let (gw, gg) = backward(spec, w, &trace, &dpred)?;
    Ok((l, gw, gg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::{Activation, BlockSpec};
    use crate::numerics::{finite_diff_grad, max_rel_err, Rng};

    fn two_block(act: Activation) -> NetworkSpec {
        NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(3, 4, 2, act, SkipKind::Dense),
                BlockSpec::dense(2, 3, 2, act, SkipKind::Dense).with_input_activation(Activation::Tanh),
            ],
        )
    }

    fn random_input(rng: &mut Rng, n: usize, m: usize) -> Matrix {
        Matrix::from_fn(n, m, |_, _| rng.normal())
    }

    fn random_sample(spec: &NetworkSpec, rng: &mut Rng) -> GateSample {
        let mut s = GateSample::ones(spec);
        for (l, b) in s.blocks.iter_mut().enumerate() {
            b.b = rng.uniform_range(0.2, 1.3);
            b.units.iter_mut().for_each(|u| *u = rng.uniform_range(0.2, 1.3));
            if l > 0 {
                b.inputs.iter_mut().for_each(|u| *u = rng.uniform_range(0.2, 1.3));
            }
        }
        s
    }

    #[test]
    fn pure_skip_path() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 2, 2, Activation::Identity, SkipKind::Dense)],
        );
        let mut w = WeightSet::zeros(&spec);
        w.blocks[0].w3 = Some(Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let (y, _) = forward(&spec, &w, &GateSample::ones(&spec), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn blocks_off_with_identity_skips_pass_input_through() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 3, 2, Activation::Relu, SkipKind::Identity),
                BlockSpec::dense(2, 3, 2, Activation::Relu, SkipKind::Identity),
            ],
        );
        let w = WeightSet::init(&spec, &mut Rng::new(1));
        let mut xi = GateSample::ones(&spec);
        xi.blocks.iter_mut().for_each(|b| b.b = 0.0);
        let x = Matrix::from_rows(&[vec![0.3, -1.7], vec![2.0, 5.0]]);
        let (y, _) = forward(&spec, &w, &xi, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_evaluated_unit_removal() {
        // in = 2, K = 2, out = 1, ReLU, ξ₁ = [1, 0].
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 2, 1, Activation::Relu, SkipKind::Dense)],
        );
        let mut w = WeightSet::zeros(&spec);
        w.blocks[0].w1 = Some(Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 1.0, 0.0]]));
        w.blocks[0].w2 = Some(Matrix::from_rows(&[vec![3.0, -2.0]]));
        w.blocks[0].w3 = Some(Matrix::from_rows(&[vec![0.5, 0.25, 1.0]]));
        let mut xi = GateSample::ones(&spec);
        xi.blocks[0].units = vec![1.0, 0.0];
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]);
        // u = [1 + 2 + 0.5, −1 + 1] = [3.5, 0]; path = 3·3.5 = 10.5; skip = 0.5 + 0.25 + 1 = 1.75
        let (y, _) = forward(&spec, &w, &xi, &x).unwrap();
        assert_eq!(y[(0, 0)], 12.25);
    }

    #[test]
    fn loss_values() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(loss(&y, &Targets::Values(y.clone())).unwrap(), 0.0);
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let l = loss(&logits, &Targets::Classes(vec![0])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(loss(&logits, &Targets::Classes(vec![2])).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let mut rng = Rng::new(4);
        let p = random_input(&mut rng, 5, 3);
        let c: Vec<usize> = (0..5).map(|i| i % 3).collect();
        let l1 = loss(&p, &Targets::Classes(c.clone())).unwrap();
        let p2 = Matrix::from_fn(10, 3, |i, j| p[(i % 5, j)]);
        let c2: Vec<usize> = (0..10).map(|i| c[i % 5]).collect();
        let l2 = loss(&p2, &Targets::Classes(c2)).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn stationary_point_has_zero_gradients() {
        let spec = two_block(Activation::Relu);
        let w = WeightSet::zeros(&spec);
        let x = random_input(&mut Rng::new(2), 6, 3);
        let y = Targets::Values(Matrix::zeros(6, 2));
        let (l, gw, gg) = loss_and_grads(&spec, &w, &GateSample::ones(&spec), &x, &y).unwrap();
        assert_eq!(l, 0.0);
        assert!(gw.to_flat().iter().all(|&v| v == 0.0));
        for b in gg.blocks {
            assert_eq!(b.b, 0.0);
            assert!(b.units.iter().chain(&b.inputs).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let spec = two_block(if seed % 2 == 0 { Activation::Tanh } else { Activation::Softplus });
            let w = WeightSet::init(&spec, &mut rng);
            let x = random_input(&mut rng, 5, 3);
            let y = Targets::Values(random_input(&mut rng, 5, 2));
            let xi = random_sample(&spec, &mut rng);
            let (_, gw, _) = loss_and_grads(&spec, &w, &xi, &x, &y).unwrap();
            let mut probe = w.clone();
            let fd = finite_diff_grad(
                |flat| {
                    probe.set_flat(flat);
                    let (p, _) = forward(&spec, &probe, &xi, &x).unwrap();
                    loss(&p, &y).unwrap()
                },
                &w.to_flat(),
                1e-5,
            )
            .unwrap();
            let err = max_rel_err(&gw.to_flat(), &fd, 1e-6);
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn gate_gradients_match_relaxed_finite_differences() {
        let mut rng = Rng::new(21);
        let spec = two_block(Activation::Tanh);
        let w = WeightSet::init(&spec, &mut rng);
        let x = random_input(&mut rng, 4, 3);
        let y = Targets::Classes(vec![0, 1, 1, 0]);
        let spec = NetworkSpec { task: Task::Classification, ..spec };
        let xi = random_sample(&spec, &mut rng);
        let (_, _, gg) = loss_and_grads(&spec, &w, &xi, &x, &y).unwrap();
        let flatten = |s: &GateSample| -> Vec<f64> {
            s.blocks
                .iter()
                .flat_map(|b| std::iter::once(b.b).chain(b.units.iter().copied()).chain(b.inputs.iter().copied()))
                .collect()
        };
        let unflatten = |flat: &[f64]| -> GateSample {
            let mut s = xi.clone();
            let mut it = flat.iter().copied();
            for b in &mut s.blocks {
                b.b = it.next().unwrap();
                b.units.iter_mut().for_each(|u| *u = it.next().unwrap());
                b.inputs.iter_mut().for_each(|u| *u = it.next().unwrap());
            }
            s
        };
        let fd = finite_diff_grad(
            |flat| {
                let (p, _) = forward(&spec, &w, &unflatten(flat), &x).unwrap();
                loss(&p, &y).unwrap()
            },
            &flatten(&xi),
            1e-5,
        )
        .unwrap();
        let analytic: Vec<f64> = gg
            .blocks
            .iter()
            .flat_map(|b| std::iter::once(b.b).chain(b.units.iter().copied()).chain(b.inputs.iter().copied()))
            .collect();
        let err = max_rel_err(&analytic, &fd, 1e-6);
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn block_gate_gradient_is_upstream_times_path_output() {
        // Single block, identity output: dĈ/dξ_B = Σ g ⊙ v with g = (ŷ − y)/n.
        let mut rng = Rng::new(5);
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 3, 2, Activation::Tanh, SkipKind::Dense)],
        );
        let w = WeightSet::init(&spec, &mut rng);
        let x = random_input(&mut rng, 3, 2);
        let yv = random_input(&mut rng, 3, 2);
        let xi = GateSample::ones(&spec);
        let (pred, trace) = forward(&spec, &w, &xi, &x).unwrap();
        let (_, dpred) = loss_and_grad(&pred, &Targets::Values(yv)).unwrap();
        let (_, gg) = backward(&spec, &w, &trace, &dpred).unwrap();
        let mut off = xi.clone();
        off.blocks[0].b = 0.0;
        let (skip_only, _) = forward(&spec, &w, &off, &x).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                expected += dpred[(i, j)] * (pred[(i, j)] - skip_only[(i, j)]);
            }
        }
        assert!((gg.blocks[0].b - expected).abs() < 1e-14);
    }

    #[test]
    fn loss_is_affine_in_block_gate() {
        let mut rng = Rng::new(33);
        let spec = two_block(Activation::Relu);
        let w = WeightSet::init(&spec, &mut rng);
        let x = random_input(&mut rng, 6, 3);
        let y = Targets::Values(random_input(&mut rng, 6, 2));
        // Only the last block: the squared loss is quadratic in an earlier block's gate.
        let eval = |t: f64| {
            let mut xi = GateSample::ones(&spec);
            xi.blocks[1].b = t;
            let (p, _) = forward(&spec, &w, &xi, &x).unwrap();
            p
        };
        let (p0, p1, ph) = (eval(0.0), eval(1.0), eval(0.5));
        // The prediction is affine in ξ_B of the last block.
        for i in 0..p0.rows() {
            for j in 0..p0.cols() {
                assert!((ph[(i, j)] - 0.5 * (p0[(i, j)] + p1[(i, j)])).abs() < 1e-10);
            }
        }
        let _ = y;
    }

    #[test]
    fn zero_unit_gate_decouples_its_weights() {
        let mut rng = Rng::new(8);
        let spec = two_block(Activation::Relu);
        let w = WeightSet::init(&spec, &mut rng);
        let x = random_input(&mut rng, 5, 3);
        let mut xi = GateSample::ones(&spec);
        xi.blocks[0].units[2] = 0.0;
        let (base, _) = forward(&spec, &w, &xi, &x).unwrap();
        let mut w2 = w.clone();
        w2.blocks[0].w1.as_mut().unwrap().set_row(2, 123.0);
        w2.blocks[0].w2.as_mut().unwrap().set_col(2, -77.0);
        let (pert, _) = forward(&spec, &w2, &xi, &x).unwrap();
        assert_eq!(base, pert);
    }

    #[test]
    fn shape_errors() {
        let spec = two_block(Activation::Relu);
        let w = WeightSet::zeros(&spec);
        let x = Matrix::zeros(2, 5);
        assert!(forward(&spec, &w, &GateSample::ones(&spec), &x).is_err());
        let other = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(3, 2, 2, Activation::Relu, SkipKind::Dense)],
        );
        let x = Matrix::zeros(2, 3);
        let (p, trace) = forward(&spec, &w, &GateSample::ones(&spec), &x).unwrap();
        let (_, d) = loss_and_grad(&p, &Targets::Values(Matrix::zeros(2, 2))).unwrap();
        assert!(backward(&other, &WeightSet::zeros(&other), &trace, &d).is_err());
    }

    #[test]
    fn non_finite_activation_names_block() {
        let spec = two_block(Activation::Identity);
        let mut w = WeightSet::zeros(&spec);
        w.blocks[0].w3.as_mut().unwrap()[(0, 0)] = f64::MAX;
        w.blocks[0].w3.as_mut().unwrap()[(0, 1)] = f64::MAX;
        let x = Matrix::from_rows(&[vec![10.0, 10.0, 0.0]]);
        let err = forward(&spec, &w, &GateSample::ones(&spec), &x).unwrap_err().to_string();
        assert!(err.contains("block 0"), "{err}");
    }
}
