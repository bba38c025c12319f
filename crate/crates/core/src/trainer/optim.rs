use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateIndex, GateState};
use crate::model::{GateGrads, NetworkSpec, WeightSet};

use super::config::ThetaOptimizer;

/// `buf ← μ·buf + (g + λW)`, `W ← W − lr·buf`.
///
/// The update is computed in full before anything is written, so an error leaves
/// both the weights and the buffer untouched.
pub fn step_w(
    w: &mut WeightSet,
    buf: &mut WeightSet,
    grad: &WeightSet,
    lambda: f64,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut new_w = w.clone();
    let mut new_buf = buf.clone();
    for (l, ((bw, bb), bg)) in new_w.blocks.iter_mut().zip(&mut new_buf.blocks).zip(&grad.blocks).enumerate() {
        for ((mw, mb), mg) in bw.matrices_mut().zip(bb.matrices_mut()).zip(bg.matrices()) {
            if mw.shape() != mg.shape() || mw.shape() != mb.shape() {
                return Err(Error::Shape {
                    op: "step_w",
                    left: mw.shape(),
                    right: mg.shape(),
                });
            }
            for ((x, b), g) in mw.as_mut_slice().iter_mut().zip(mb.as_mut_slice()).zip(mg.as_slice()) {
                *b = momentum * *b + (g + lambda * *x);
                *x -= lr * *b;
            }
            if !mw.is_finite() {
                return Err(Error::NonFinite(format!("block {l}: weights after update")));
            }
        }
    }
    *w = new_w;
    *buf = new_buf;
    Ok(())
}

/// First and second moment estimates of the gate optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: GateGrads,
    pub v: GateGrads,
    pub t: u64,
}

impl AdamState {
    pub fn new(spec: &NetworkSpec) -> Self {
        AdamState {
            m: GateGrads::zeros(spec),
            v: GateGrads::zeros(spec),
            t: 0,
        }
    }

    fn slot(g: &mut GateGrads, idx: GateIndex) -> &mut f64 {
        match idx {
            GateIndex::Block(l) => &mut g.blocks[l].b,
            GateIndex::Unit(l, i) => &mut g.blocks[l].units[i],
            GateIndex::Input(l, i) => &mut g.blocks[l].inputs[i],
        }
    }
}

pub(crate) fn grad_at(g: &GateGrads, idx: GateIndex) -> f64 {
    match idx {
        GateIndex::Block(l) => g.blocks[l].b,
        GateIndex::Unit(l, i) => g.blocks[l].units[i],
        GateIndex::Input(l, i) => g.blocks[l].inputs[i],
    }
}

/// Bias-corrected adaptive-moment step on every live gate, followed by projection onto `[0, 1]`.
pub fn step_theta(gates: &mut GateState, adam: &mut AdamState, grad: &GateGrads, cfg: &ThetaOptimizer) {
    adam.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(adam.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(adam.t as i32);
    for idx in gates.live_gates() {
        let g = grad_at(grad, idx);
        let m = AdamState::slot(&mut adam.m, idx);
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        let m_hat = *m / c1;
        let v = AdamState::slot(&mut adam.v, idx);
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let v_hat = *v / c2;
        gates.set(idx, gates.get(idx) - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    gates.project();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, BlockSpec, SkipKind, Task};
    use crate::numerics::Rng;

    fn spec() -> NetworkSpec {
        NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 3, 2, Activation::Relu, SkipKind::Dense),
                BlockSpec::dense(2, 2, 2, Activation::Relu, SkipKind::Dense),
            ],
        )
    }

    #[test]
    fn pure_weight_decay() {
        let s = spec();
        let mut w = WeightSet::init(&s, &mut Rng::new(1));
        let before = w.to_flat();
        let mut buf = WeightSet::zeros(&s);
        step_w(&mut w, &mut buf, &WeightSet::zeros(&s), 0.01, 0.5, 0.9).unwrap();
        for (a, b) in w.to_flat().iter().zip(&before) {
            assert!((a - b * (1.0 - 0.5 * 0.01)).abs() < 1e-16);
        }
    }

    #[test]
    fn plain_gradient_step() {
        let s = spec();
        let mut w = WeightSet::init(&s, &mut Rng::new(2));
        let before = w.to_flat();
        let g = WeightSet::init(&s, &mut Rng::new(3));
        let mut buf = WeightSet::zeros(&s);
        step_w(&mut w, &mut buf, &g, 0.0, 0.1, 0.9).unwrap();
        for ((a, b), d) in w.to_flat().iter().zip(&before).zip(g.to_flat()) {
            assert_eq!(*a, b - 0.1 * d);
        }
    }

    #[test]
    fn two_momentum_steps_unrolled() {
        let s = spec();
        let mut w = WeightSet::init(&s, &mut Rng::new(4));
        let w0 = w.to_flat();
        let g1 = WeightSet::init(&s, &mut Rng::new(5));
        let g2 = WeightSet::init(&s, &mut Rng::new(6));
        let mut buf = WeightSet::zeros(&s);
        let (lr, mu, lam) = (0.05, 0.9, 0.01);
        step_w(&mut w, &mut buf, &g1, lam, lr, mu).unwrap();
        step_w(&mut w, &mut buf, &g2, lam, lr, mu).unwrap();
        for (k, x) in w.to_flat().iter().enumerate() {
            let (a, b) = (g1.to_flat()[k], g2.to_flat()[k]);
            let b1 = a + lam * w0[k];
            let x1 = w0[k] - lr * b1;
            let b2 = mu * b1 + b + lam * x1;
            let x2 = x1 - lr * b2;
            assert!((x - x2).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_update_names_block_and_commits_nothing() {
        let s = spec();
        let mut w = WeightSet::init(&s, &mut Rng::new(4));
        let before = w.clone();
        let mut g = WeightSet::zeros(&s);
        g.blocks[1].w2.as_mut().unwrap().as_mut_slice()[0] = f64::INFINITY;
        let mut buf = WeightSet::zeros(&s);
        let err = step_w(&mut w, &mut buf, &g, 0.0, 0.1, 0.9).unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
        assert_eq!(w, before);
        assert_eq!(buf, WeightSet::zeros(&s));
    }

    #[test]
    fn adam_first_step_and_projection() {
        let s = spec();
        let mut g = GateState::new(&s, 0.5).unwrap();
        let mut adam = AdamState::new(&s);
        let mut grad = GateGrads::zeros(&s);
        grad.blocks[0].b = 0.3;
        grad.blocks[0].units[0] = -2.0;
        let cfg = ThetaOptimizer {
            lr: 0.01,
            ..Default::default()
        };
        step_theta(&mut g, &mut adam, &grad, &cfg);
        // m̂ = g and v̂ = g² after one step: the move is lr·g/(|g| + ε).
        let expect = 0.5 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((g.blocks[0].theta_b - expect).abs() < 1e-15);
        // Zero gradient: zero move.
        assert_eq!(g.blocks[0].theta1[1], 0.5);

        let mut hi = GateState::new(&s, 1.0).unwrap();
        let mut lo = GateState::new(&s, 1.0).unwrap();
        lo.set(GateIndex::Block(0), 0.0);
        let mut up = GateGrads::zeros(&s);
        up.blocks[0].b = -5.0;
        let mut down = GateGrads::zeros(&s);
        down.blocks[0].b = 5.0;
        step_theta(&mut hi, &mut AdamState::new(&s), &up, &ThetaOptimizer { lr: 0.5, ..cfg.clone() });
        step_theta(&mut lo, &mut AdamState::new(&s), &down, &ThetaOptimizer { lr: 0.5, ..cfg });
        assert_eq!(hi.blocks[0].theta_b, 1.0);
        assert_eq!(lo.blocks[0].theta_b, 0.0);
    }

    #[test]
    fn dead_gates_are_untouched() {
        let s = spec();
        let mut g = GateState::new(&s, 0.5).unwrap();
        g.kill(GateIndex::Unit(0, 1));
        let mut grad = GateGrads::zeros(&s);
        grad.blocks[0].units[1] = -10.0;
        step_theta(&mut g, &mut AdamState::new(&s), &grad, &ThetaOptimizer::default());
        assert_eq!(g.blocks[0].theta1[1], 0.0);
        assert!(!g.blocks[0].unit_alive[1]);
    }
}
