//! Bernoulli gate parameters, the flattening hyper-prior and its collapsed penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockSample, GateSample, NetworkSpec};
use crate::numerics::Rng;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("gamma must lie in (0, 1), got {gamma}")))
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Flattening density `p(π|γ) = (γ−1)/log γ · 1/(1 + (γ−1)(1−π))`.
pub fn flattening_pdf(pi: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_prob("pi", pi)?;
    Ok((gamma - 1.0) / gamma.ln() / (1.0 + (gamma - 1.0) * (1.0 - pi)))
}

/// `J(π; θ)`: the per-gate KL term plus the negative log hyper-prior (up to a constant).
pub fn j_objective(pi: f64, theta: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_prob("pi", pi)?;
    check_prob("theta", theta)?;
    let xlogy = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * (x / y).ln() };
    Ok(xlogy(1.0 - theta, 1.0 - pi) + xlogy(theta, pi) + (1.0 + (gamma - 1.0) * (1.0 - pi)).ln())
}

/// Minimizer of [`j_objective`] over π: `γθ / (1 + θ(γ−1))`.
pub fn pi_star(theta: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    check_prob("theta", theta)?;
    // Written as γθ / (γθ + 1 − θ) so that θ = 1 maps to exactly 1.
    Ok(gamma * theta / (gamma * theta + (1.0 - theta)))
}

/// Collapsed penalty `J(π*(θ); θ) = (1 − θ) log γ`.
pub fn j_flat(theta: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    j_flat_log(theta, gamma.ln())
}

/// [`j_flat`] parameterized by `log γ ≤ 0`; `log γ = 0` means no direct regularization.
pub fn j_flat_log(theta: f64, log_gamma: f64) -> Result<f64> {
    check_prob("theta", theta)?;
    if !(log_gamma <= 0.0) {
        return Err(Error::domain(format!("log gamma must be non-positive, got {log_gamma}")));
    }
    Ok((1.0 - theta) * log_gamma)
}

/// Address of one gate parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GateIndex {
    Block(usize),
    Unit(usize, usize),
    Input(usize, usize),
}

impl std::fmt::Display for GateIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateIndex::Block(l) => write!(f, "block {l}"),
            GateIndex::Unit(l, i) => write!(f, "unit {i} of block {l}"),
            GateIndex::Input(l, i) => write!(f, "input {i} of block {l}"),
        }
    }
}

/// Gate parameters of one block. Ungated entries are fixed at 1; skip-only blocks carry `θ_B = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGates {
    pub theta_b: f64,
    pub b_gated: bool,
    pub b_alive: bool,
    pub theta1: Vec<f64>,
    pub units_gated: bool,
    pub unit_alive: Vec<bool>,
    pub theta2: Vec<f64>,
    pub inputs_gated: bool,
    pub input_alive: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub blocks: Vec<BlockGates>,
}

impl GateState {
    /// Every gated parameter starts at `init`.
    pub fn new(spec: &NetworkSpec, init: f64) -> Result<Self> {
        check_prob("theta init", init)?;
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let units_gated = b.has_theta1();
                let inputs_gated = spec.has_theta2(l);
                BlockGates {
                    theta_b: match (b.nonlinear, b.has_theta_b()) {
                        (false, _) => 0.0,
                        (true, true) => init,
                        (true, false) => 1.0,
                    },
                    b_gated: b.has_theta_b(),
                    b_alive: b.nonlinear,
                    theta1: vec![if units_gated { init } else { 1.0 }; b.hidden],
                    units_gated,
                    unit_alive: vec![true; b.hidden],
                    theta2: vec![if inputs_gated { init } else { 1.0 }; b.input],
                    inputs_gated,
                    input_alive: vec![true; b.input],
                }
            })
            .collect();
        Ok(GateState { blocks })
    }

    pub fn get(&self, idx: GateIndex) -> f64 {
        match idx {
            GateIndex::Block(l) => self.blocks[l].theta_b,
            GateIndex::Unit(l, i) => self.blocks[l].theta1[i],
            GateIndex::Input(l, i) => self.blocks[l].theta2[i],
        }
    }

    pub fn set(&mut self, idx: GateIndex, value: f64) {
        match idx {
            GateIndex::Block(l) => self.blocks[l].theta_b = value,
            GateIndex::Unit(l, i) => self.blocks[l].theta1[i] = value,
            GateIndex::Input(l, i) => self.blocks[l].theta2[i] = value,
        }
    }

    pub fn is_alive(&self, idx: GateIndex) -> bool {
        match idx {
            GateIndex::Block(l) => self.blocks[l].b_alive,
            GateIndex::Unit(l, i) => self.blocks[l].unit_alive[i],
            GateIndex::Input(l, i) => self.blocks[l].input_alive[i],
        }
    }

    /// Trainable gates that have not been pruned, in a fixed order (block, units, inputs).
    pub fn live_gates(&self) -> Vec<GateIndex> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            if b.b_gated && b.b_alive {
                out.push(GateIndex::Block(l));
            }
            if b.units_gated {
                out.extend((0..b.theta1.len()).filter(|&i| b.unit_alive[i]).map(|i| GateIndex::Unit(l, i)));
            }
            if b.inputs_gated {
                out.extend((0..b.theta2.len()).filter(|&i| b.input_alive[i]).map(|i| GateIndex::Input(l, i)));
            }
        }
        out
    }

    /// Marks a structure pruned: `θ = 0` and dead from now on.
    pub fn kill(&mut self, idx: GateIndex) {
        self.set(idx, 0.0);
        match idx {
            GateIndex::Block(l) => self.blocks[l].b_alive = false,
            GateIndex::Unit(l, i) => self.blocks[l].unit_alive[i] = false,
            GateIndex::Input(l, i) => self.blocks[l].input_alive[i] = false,
        }
    }

    /// Clamps every θ to `[0, 1]`; dead structures stay at 0.
    pub fn project(&mut self) {
        for b in &mut self.blocks {
            b.theta_b = if b.b_alive { b.theta_b.clamp(0.0, 1.0) } else { 0.0 };
            for (t, &a) in b.theta1.iter_mut().zip(&b.unit_alive) {
                *t = if a { t.clamp(0.0, 1.0) } else { 0.0 };
            }
            for (t, &a) in b.theta2.iter_mut().zip(&b.input_alive) {
                *t = if a { t.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
    }

    pub fn in_range(&self) -> bool {
        self.blocks.iter().all(|b| {
            std::iter::once(&b.theta_b)
                .chain(&b.theta1)
                .chain(&b.theta2)
                .all(|t| (0.0..=1.0).contains(t))
        })
    }

    fn map_sample(&self, mut f: impl FnMut(f64) -> f64) -> GateSample {
        GateSample {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSample {
                    b: if b.b_alive { f(b.theta_b) } else { 0.0 },
                    units: b.theta1.iter().zip(&b.unit_alive).map(|(&t, &a)| if a { f(t) } else { 0.0 }).collect(),
                    inputs: b.theta2.iter().zip(&b.input_alive).map(|(&t, &a)| if a { f(t) } else { 0.0 }).collect(),
                    probe: b.b_gated && b.b_alive,
                })
                .collect(),
        }
    }

    /// One binary draw `Ξ ~ Bernoulli(Θ)`; dead structures draw 0, ungated ones 1.
    pub fn sample(&self, rng: &mut Rng) -> GateSample {
        self.map_sample(|t| {
            if t >= 1.0 {
                1.0
            } else if t <= 0.0 {
                0.0
            } else if rng.bernoulli(t) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Deterministic network `ξ = round(θ)` with ties rounding up.
    pub fn rounded(&self) -> GateSample {
        self.map_sample(|t| if t >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Relaxed sample `ξ = θ`.
    pub fn expected(&self) -> GateSample {
        self.map_sample(|t| t)
    }

    pub fn live_count(&self) -> usize {
        self.live_gates().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, BlockSpec, SkipKind, Task};
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn simpson(f: impl Fn(f64) -> f64, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn pdf_normalizes() {
        let mut rng = Rng::new(3);
        let mut gammas = vec![0.1, 0.5, 0.9];
        gammas.extend((0..20).map(|_| rng.uniform_range(0.01, 0.99)));
        for g in gammas {
            let total = simpson(|p| flattening_pdf(p, g).unwrap(), 2000);
            assert!((total - 1.0).abs() < 1e-8, "gamma {g}: {total}");
        }
    }

    #[test]
    fn pdf_at_one() {
        let v = flattening_pdf(1.0, 0.5).unwrap();
        assert!((v - 0.5 / std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.7213).abs() < 1e-4);
    }

    #[test]
    fn pdf_decreases_in_pi() {
        // The mass sits near π = 0 for γ < 1, which is what pulls π* below θ.
        for g in [0.1, 0.5, 0.9] {
            let vals: Vec<f64> = (0..=100).map(|i| flattening_pdf(i as f64 / 100.0, g).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "gamma {g}");
        }
    }

    #[test]
    fn pdf_rejects_bad_gamma() {
        for g in [0.0, 1.0, -0.3, 1.5, f64::NAN] {
            assert!(flattening_pdf(0.5, g).is_err());
        }
    }

    #[test]
    fn pi_star_values() {
        assert_eq!(pi_star(0.0, 0.3).unwrap(), 0.0);
        assert_eq!(pi_star(1.0, 0.3).unwrap(), 1.0);
        assert!((pi_star(0.5, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(pi_star(1.2, 0.5).is_err());
    }

    #[test]
    fn pi_star_is_grid_argmin() {
        for &g in &[0.05, 0.3, 0.7, 0.95] {
            for &t in &[0.0, 0.1, 0.37, 0.5, 0.81, 1.0] {
                let (best, _) = (0..=1000)
                    .map(|i| i as f64 / 1000.0)
                    .map(|p| (p, j_objective(p, t, g).unwrap()))
                    .fold((0.0, f64::INFINITY), |acc, (p, v)| if v < acc.1 { (p, v) } else { acc });
                let ps = pi_star(t, g).unwrap();
                assert!((best - ps).abs() <= 1e-3 + 1e-12, "γ={g} θ={t}: grid {best} vs {ps}");
                let jmin = j_objective(ps, t, g).unwrap();
                assert!((jmin - j_flat(t, g).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn j_flat_values() {
        assert_eq!(j_flat(1.0, 0.2).unwrap(), 0.0);
        assert!((j_flat(0.0, 0.2).unwrap() - 0.2f64.ln()).abs() < 1e-15);
        assert!((j_flat(0.5, 0.1).unwrap() + 1.1513).abs() < 1e-4);
        assert_eq!(j_flat_log(0.3, 0.0).unwrap(), 0.0);
        assert!(j_flat_log(0.3, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn pi_star_monotone_and_below_theta(t in 0.0f64..1.0, dt in 1e-6f64..0.5, g in 0.001f64..0.999) {
            let a = pi_star(t, g).unwrap();
            let b = pi_star((t + dt).min(1.0), g).unwrap();
            prop_assert!(b >= a);
            prop_assert!(a <= t + 1e-15);
        }

        #[test]
        fn j_flat_identity(t in 0.0f64..=1.0, g in 0.001f64..0.999) {
            let lg = g.ln();
            prop_assert!((j_flat(t, g).unwrap() + t * lg - lg).abs() <= 1e-14 * lg.abs().max(1.0));
        }

        #[test]
        fn j_flat_slope_is_constant(t in 0.01f64..0.99, g in 0.001f64..0.999) {
            let h = 1e-3;
            let slope = (j_flat(t + h, g).unwrap() - j_flat(t - h, g).unwrap()) / (2.0 * h);
            prop_assert!((slope + g.ln()).abs() < 1e-9);
        }
    }

    fn net() -> NetworkSpec {
        NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 3, 3, Activation::Relu, SkipKind::Dense),
                BlockSpec::dense(3, 4, 3, Activation::Relu, SkipKind::Dense),
                BlockSpec::linear(3, 1),
            ],
        )
    }

    #[test]
    fn construction_respects_gate_placement() {
        let g = GateState::new(&net(), 0.75).unwrap();
        assert!(!g.blocks[0].inputs_gated);
        assert!(g.blocks[1].inputs_gated);
        assert!(g.blocks[2].inputs_gated);
        assert_eq!(g.blocks[2].theta_b, 0.0);
        assert!(!g.blocks[2].b_gated);
        // θ_B + θ₁ of two nonlinear blocks, θ₂ of blocks 1 and 2.
        assert_eq!(g.live_count(), (1 + 3) + (1 + 4 + 3) + 3);
        assert!(GateState::new(&net(), 1.5).is_err());
    }

    #[test]
    fn projection() {
        let mut g = GateState::new(&net(), 0.5).unwrap();
        g.set(GateIndex::Unit(0, 0), 1.3);
        g.set(GateIndex::Unit(0, 1), -0.2);
        g.set(GateIndex::Unit(0, 2), 0.42);
        g.kill(GateIndex::Input(1, 1));
        g.set(GateIndex::Input(1, 1), 0.9);
        g.project();
        assert_eq!(g.blocks[0].theta1, vec![1.0, 0.0, 0.42]);
        assert_eq!(g.get(GateIndex::Input(1, 1)), 0.0);
        let once = g.clone();
        g.project();
        assert_eq!(g, once);
        assert!(g.in_range());
    }

    #[test]
    fn sampling() {
        let spec = net();
        let g = GateState::new(&spec, 1.0).unwrap();
        let s = g.sample(&mut Rng::new(1));
        assert!(s.blocks[..2].iter().all(|b| b.b == 1.0 && b.units.iter().all(|&u| u == 1.0)));
        assert_eq!(s.blocks[2].b, 0.0);

        let mut g = GateState::new(&spec, 0.75).unwrap();
        g.kill(GateIndex::Unit(1, 2));
        let mut rng = Rng::new(9);
        let mut hits = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let s = g.sample(&mut rng);
            assert_eq!(s.blocks[1].units[2], 0.0);
            assert_eq!(s.blocks[0].inputs, vec![1.0, 1.0]);
            hits += s.blocks[0].b as usize;
        }
        assert!((hits as f64 / n as f64 - 0.75).abs() < 0.01);
    }

    #[test]
    fn rounding_ties_go_up() {
        let mut g = GateState::new(&net(), 0.5).unwrap();
        g.set(GateIndex::Unit(0, 1), 0.4999);
        let r = g.rounded();
        assert_eq!(r.blocks[0].units, vec![1.0, 0.0, 1.0]);
    }
}
