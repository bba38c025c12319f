//! Exhaustive-enumeration oracles over the gate distribution (tiny networks only).

use serde::Serialize;

use crate::complexity::{j_fp, ComplexityConsts};
use crate::error::{Error, Result};
use crate::gates::{GateIndex, GateState};
use crate::model::{forward, loss, NetworkSpec, Targets, WeightSet};
use crate::numerics::{Matrix, Rng};

/// Largest number of fractional gates the gradient oracle enumerates.
pub const EXACT_GATE_LIMIT: usize = 16;
/// Largest number of gates the vertex verifier enumerates.
pub const VERTEX_GATE_LIMIT: usize = 12;

/// Expected cost `C(W, Θ) = E_Ξ[Ĉ]`, enumerating every live gate with θ strictly inside (0, 1).
pub fn expected_cost(spec: &NetworkSpec, w: &WeightSet, gates: &GateState, x: &Matrix, t: &Targets) -> Result<f64> {
    let free: Vec<GateIndex> = gates
        .live_gates()
        .into_iter()
        .filter(|&i| {
            let v = gates.get(i);
            v > 0.0 && v < 1.0
        })
        .collect();
    if free.len() > EXACT_GATE_LIMIT {
        return Err(Error::GateLimit {
            count: free.len(),
            limit: EXACT_GATE_LIMIT,
        });
    }
    let mut total = 0.0;
    let mut config = gates.clone();
    for mask in 0u64..(1 << free.len()) {
        let mut p = 1.0;
        for (k, &idx) in free.iter().enumerate() {
            let th = gates.get(idx);
            let on = mask >> k & 1 == 1;
            p *= if on { th } else { 1.0 - th };
            config.set(idx, if on { 1.0 } else { 0.0 });
        }
        let (pred, _) = forward(spec, w, &config.expected(), x)?;
        total += p * loss(&pred, t)?;
    }
    Ok(total)
}

/// Expected cost with some gates held at fixed values.
pub fn conditional_cost(
    spec: &NetworkSpec,
    w: &WeightSet,
    gates: &GateState,
    fixed: &[(GateIndex, f64)],
    x: &Matrix,
    t: &Targets,
) -> Result<f64> {
    let mut g = gates.clone();
    for &(idx, v) in fixed {
        g.set(idx, v);
    }
    expected_cost(spec, w, &g, x, t)
}

/// Exact `∂C/∂θ` as a difference of conditional expectations.
pub fn theta_grad_exact(
    spec: &NetworkSpec,
    w: &WeightSet,
    gates: &GateState,
    x: &Matrix,
    t: &Targets,
    idx: GateIndex,
) -> Result<f64> {
    let c = |fixed: &[(GateIndex, f64)]| conditional_cost(spec, w, gates, fixed, x, t);
    match idx {
        GateIndex::Block(_) | GateIndex::Input(_, _) => Ok(c(&[(idx, 1.0)])? - c(&[(idx, 0.0)])?),
        GateIndex::Unit(l, _) => {
            let tb = gates.blocks[l].theta_b;
            if tb == 0.0 {
                return Ok(0.0);
            }
            let b = GateIndex::Block(l);
            Ok(tb * (c(&[(b, 1.0), (idx, 1.0)])? - c(&[(b, 1.0), (idx, 0.0)])?))
        }
    }
}

/// Regularizer settings of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective<'a> {
    pub consts: &'a ComplexityConsts,
    pub lambda: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Objective<'_> {
    /// `C(W, Θ) + λ/2 ‖W‖² + ν J_FP(Θ)`.
    pub fn value(&self, spec: &NetworkSpec, w: &WeightSet, gates: &GateState, x: &Matrix, t: &Targets) -> Result<f64> {
        Ok(expected_cost(spec, w, gates, x, t)?
            + 0.5 * self.lambda * w.norm_sq()
            + self.nu * j_fp(gates, self.consts, self.alpha, self.beta)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VertexReport {
    pub gates: usize,
    pub vertex_min: f64,
    pub interior_min: f64,
    /// Largest `|L(θ=½) − ½(L(0) + L(1))|` over coordinates and interior points.
    pub midpoint_residual: f64,
    /// Vertex `θ` values (one per live gate, in `live_gates` order) attaining the minimum.
    pub argmin: Vec<f64>,
}

/// Compares the objective over all `{0, 1}` gate vertices with random interior points.
pub fn vertex_verify(
    spec: &NetworkSpec,
    w: &WeightSet,
    template: &GateState,
    x: &Matrix,
    t: &Targets,
    obj: &Objective<'_>,
    trials: usize,
    rng: &mut Rng,
) -> Result<VertexReport> {
    let live = template.live_gates();
    if live.len() > VERTEX_GATE_LIMIT {
        return Err(Error::GateLimit {
            count: live.len(),
            limit: VERTEX_GATE_LIMIT,
        });
    }
    let at = |vals: &[f64]| {
        let mut g = template.clone();
        for (&idx, &v) in live.iter().zip(vals) {
            g.set(idx, v);
        }
        obj.value(spec, w, &g, x, t)
    };
    let mut vertex_min = f64::INFINITY;
    let mut argmin = Vec::new();
    for mask in 0u64..(1 << live.len()) {
        let vals: Vec<f64> = (0..live.len()).map(|k| (mask >> k & 1) as f64).collect();
        let v = at(&vals)?;
        if v < vertex_min {
            vertex_min = v;
            argmin = vals;
        }
    }
    let mut interior_min = f64::INFINITY;
    let mut midpoint_residual: f64 = 0.0;
    for _ in 0..trials {
        let mut vals: Vec<f64> = (0..live.len()).map(|_| rng.uniform_range(1e-6, 1.0 - 1e-6)).collect();
        interior_min = interior_min.min(at(&vals)?);
        for k in 0..live.len() {
            let keep = vals[k];
            let mut line = [0.0; 3];
            for (slot, v) in line.iter_mut().zip([0.0, 0.5, 1.0]) {
                vals[k] = v;
                *slot = at(&vals)?;
            }
            vals[k] = keep;
            midpoint_residual = midpoint_residual.max((line[1] - 0.5 * (line[0] + line[2])).abs());
        }
    }
    Ok(VertexReport {
        gates: live.len(),
        vertex_min,
        interior_min,
        midpoint_residual,
        argmin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::derive_consts;
    use crate::model::{Activation, BlockSpec, GateSample, SkipKind, Task};
    use crate::numerics::finite_diff_grad;

    fn tiny() -> NetworkSpec {
        NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 2, 2, Activation::Tanh, SkipKind::Dense),
                BlockSpec::dense(2, 2, 1, Activation::Relu, SkipKind::Dense),
            ],
        )
    }

    fn problem(seed: u64) -> (NetworkSpec, WeightSet, GateState, Matrix, Targets) {
        let mut rng = Rng::new(seed);
        let spec = tiny();
        let w = WeightSet::init(&spec, &mut rng);
        let mut g = GateState::new(&spec, 0.5).unwrap();
        for idx in g.live_gates() {
            g.set(idx, rng.uniform_range(0.05, 0.95));
        }
        let x = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let y = Targets::Values(Matrix::from_fn(6, 1, |_, _| rng.normal()));
        (spec, w, g, x, y)
    }

    #[test]
    fn deterministic_gates_need_one_pass() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(1, 1, 1, Activation::Relu, SkipKind::Dense).with_gates(true, false, None)],
        );
        let mut w = WeightSet::zeros(&spec);
        w.blocks[0].w1 = Some(Matrix::from_rows(&[vec![1.0, 0.0]]));
        w.blocks[0].w2 = Some(Matrix::from_rows(&[vec![2.0]]));
        w.blocks[0].w3 = Some(Matrix::from_rows(&[vec![1.0, 0.0]]));
        let g = GateState::new(&spec, 0.3).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]);
        let y = Targets::Values(Matrix::from_rows(&[vec![0.0]]));
        // ξ_B = 1: ŷ = 1 + 2 = 3, Ĉ = 4.5; ξ_B = 0: ŷ = 1, Ĉ = 0.5.
        let d = theta_grad_exact(&spec, &w, &g, &x, &y, GateIndex::Block(0)).unwrap();
        assert!((d - 4.0).abs() < 1e-15);
        let c = expected_cost(&spec, &w, &g, &x, &y).unwrap();
        assert!((c - (0.3 * 4.5 + 0.7 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn unit_gradient_vanishes_with_block_off() {
        let (spec, w, mut g, x, y) = problem(1);
        g.set(GateIndex::Block(0), 0.0);
        assert_eq!(theta_grad_exact(&spec, &w, &g, &x, &y, GateIndex::Unit(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn exact_gradient_equals_finite_difference() {
        for seed in 0..5 {
            let (spec, w, g, x, y) = problem(10 + seed);
            let live = g.live_gates();
            let vals: Vec<f64> = live.iter().map(|&i| g.get(i)).collect();
            let fd = finite_diff_grad(
                |v| {
                    let mut h = g.clone();
                    for (&i, &t) in live.iter().zip(v) {
                        h.set(i, t);
                    }
                    expected_cost(&spec, &w, &h, &x, &y).unwrap()
                },
                &vals,
                1e-3,
            )
            .unwrap();
            for (k, &idx) in live.iter().enumerate() {
                let exact = theta_grad_exact(&spec, &w, &g, &x, &y, idx).unwrap();
                assert!((exact - fd[k]).abs() <= 1e-9, "{idx}: {exact} vs {}", fd[k]);
            }
        }
    }

    #[test]
    fn gate_limit_enforced() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 20, 1, Activation::Relu, SkipKind::Dense)],
        );
        let w = WeightSet::zeros(&spec);
        let g = GateState::new(&spec, 0.5).unwrap();
        let x = Matrix::zeros(1, 2);
        let y = Targets::Values(Matrix::zeros(1, 1));
        assert!(matches!(
            expected_cost(&spec, &w, &g, &x, &y),
            Err(Error::GateLimit { count: 21, limit: 16 })
        ));
        let consts = derive_consts(&spec).unwrap();
        let obj = Objective {
            consts: &consts,
            lambda: 0.0,
            nu: 0.0,
            alpha: 0.0,
            beta: 0.5,
        };
        assert!(vertex_verify(&spec, &w, &g, &x, &y, &obj, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn single_gate_interior_on_segment() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 2, 1, Activation::Tanh, SkipKind::Dense).with_gates(true, false, None)],
        );
        let mut rng = Rng::new(4);
        let w = WeightSet::init(&spec, &mut rng);
        let x = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let y = Targets::Values(Matrix::from_fn(5, 1, |_, _| rng.normal()));
        let consts = derive_consts(&spec).unwrap();
        let obj = Objective {
            consts: &consts,
            lambda: 1e-3,
            nu: 0.2,
            alpha: 0.1,
            beta: 0.5,
        };
        let g = GateState::new(&spec, 0.5).unwrap();
        let r = vertex_verify(&spec, &w, &g, &x, &y, &obj, 50, &mut rng).unwrap();
        assert_eq!(r.gates, 1);
        assert!(r.vertex_min <= r.interior_min + 1e-12);
        assert!(r.midpoint_residual < 1e-12);
        let ends: Vec<f64> = [0.0, 1.0]
            .iter()
            .map(|&v| {
                let mut h = g.clone();
                h.set(GateIndex::Block(0), v);
                obj.value(&spec, &w, &h, &x, &y).unwrap()
            })
            .collect();
        let mid = obj.value(&spec, &w, &g, &x, &y).unwrap();
        assert!(mid >= ends[0].min(ends[1]) - 1e-12 && mid <= ends[0].max(ends[1]) + 1e-12);
        let _ = GateSample::ones(&spec);
    }
}
