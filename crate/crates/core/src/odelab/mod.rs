//! Deterministic gate/weight dynamics of one block, its Lyapunov functions, and
//! empirical certification of the attraction regions around pruned states.

mod host;
mod integrate;

use serde::{Deserialize, Serialize};

use crate::complexity::{cross_term, cross_term_floor, derive_consts, ComplexityConsts};
use crate::error::{Error, Result};
use crate::gates::{GateIndex, GateState};
use crate::model::{loss_and_grads, Activation, GateSample, NetworkSpec, Targets, WeightSet};
use crate::numerics::{Matrix, Rng};

pub use host::HostConfig;
pub use integrate::{
    certify, convergence_order, ConvergenceReport, e_set_drift, integrate, sweep, trajectory_csv, Certificate, CertifyOptions,
    IntegrateOptions, Method, Trajectory, TrajectoryPoint, Vanished, Verdict,
};

/// Largest number of live gates the enumeration accepts.
pub const HOST_GATE_LIMIT: usize = 16;

/// `[x]₊`
fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// `[x]₋`, taken as the magnitude of the negative part so that `h ≥ 0` at the upper bound.
fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// Projected rate `−g − h` of a parameter confined to `[0, 1]`, where `g` is its
/// unprojected gradient. At 0, `h = −[g]₊`; at 1, `h = [g]₋`.
pub fn projected_rate(theta: f64, g: f64) -> f64 {
    let h = if theta <= 0.0 {
        -pos(g)
    } else if theta >= 1.0 {
        neg(g)
    } else {
        0.0
    };
    -g - h
}

/// The variables of one block's subsystem: `W₁` (fan-in rows, bias last), `W₂` (fan-out
/// columns), `θ₁` and `θ_B`. Also used for time derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemState {
    pub w1: Matrix,
    pub w2: Matrix,
    pub theta1: Vec<f64>,
    pub theta_b: f64,
}

impl SubsystemState {
    pub fn units(&self) -> usize {
        self.theta1.len()
    }

    /// `self + h·d`
    pub fn step(&self, d: &SubsystemState, h: f64) -> SubsystemState {
        let add = |a: &Matrix, b: &Matrix| {
            let mut m = a.clone();
            m.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x += h * y);
            m
        };
        SubsystemState {
            w1: add(&self.w1, &d.w1),
            w2: add(&self.w2, &d.w2),
            theta1: self.theta1.iter().zip(&d.theta1).map(|(a, b)| a + h * b).collect(),
            theta_b: self.theta_b + h * d.theta_b,
        }
    }

    /// Clamps every θ into `[0, 1]`.
    pub fn clamp(&mut self) {
        self.theta_b = self.theta_b.clamp(0.0, 1.0);
        self.theta1.iter_mut().for_each(|t| *t = t.clamp(0.0, 1.0));
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w1.as_slice().to_vec();
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.theta1);
        v.push(self.theta_b);
        v
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> SubsystemState {
        SubsystemState {
            w1: self.w1.map(|x| c * x),
            w2: self.w2.map(|x| c * x),
            theta1: self.theta1.iter().map(|t| c * t).collect(),
            theta_b: c * self.theta_b,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    /// `‖w₁ᵢ‖` (row of `W₁`, bias included).
    pub fn fan_in_norm(&self, i: usize) -> f64 {
        self.w1.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `‖w₂ᵢ‖` (column of `W₂`).
    pub fn fan_out_norm(&self, i: usize) -> f64 {
        (0..self.w2.rows()).map(|r| self.w2[(r, i)].powi(2)).sum::<f64>().sqrt()
    }
}

/// `Λ_B = ½(‖W₁‖² + ‖W₂‖² + θ_B²)`
pub fn lyapunov_b(s: &SubsystemState) -> f64 {
    0.5 * (s.w1.norm_sq() + s.w2.norm_sq() + s.theta_b * s.theta_b)
}

/// `Λ_U = ½(‖w₁ᵢ‖² + ‖w₂ᵢ‖² + θ₁ᵢ²)`
pub fn lyapunov_u(s: &SubsystemState, i: usize) -> f64 {
    0.5 * (s.fan_in_norm(i).powi(2) + s.fan_out_norm(i).powi(2) + s.theta1[i] * s.theta1[i])
}

/// Which attraction region a check refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Block,
    Unit(usize),
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Block => write!(f, "block"),
            Region::Unit(i) => write!(f, "unit {i}"),
        }
    }
}

impl Region {
    pub fn lyapunov(self, s: &SubsystemState) -> f64 {
        match self {
            Region::Block => lyapunov_b(s),
            Region::Unit(i) => lyapunov_u(s, i),
        }
    }
}

/// Constants defining the attraction regions: `Λ ≤ ½ρ²` with `ρ = R_m / (4(η + κ))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConsts {
    pub r: f64,
    pub r_m: f64,
    pub eta: f64,
    pub kappa: f64,
    pub rho: f64,
}

impl StabilityConsts {
    pub fn new(r: f64, r_m: f64, eta: f64, kappa: f64) -> Result<Self> {
        if !(r_m > 0.0) || r < r_m {
            return Err(Error::domain(format!("need R >= R_m > 0, got R = {r}, R_m = {r_m}")));
        }
        if !(eta > 0.0 && kappa > 0.0) {
            return Err(Error::domain(format!("need eta, kappa > 0, got {eta}, {kappa}")));
        }
        Ok(StabilityConsts {
            r,
            r_m,
            eta,
            kappa,
            rho: r_m / (4.0 * (eta + kappa)),
        })
    }

    /// Largest Lyapunov value inside the region.
    pub fn threshold(&self) -> f64 {
        0.5 * (self.rho * self.rho)
    }
}

/// Membership in `D_B` or `D_U(i)`; the boundary belongs to the region.
pub fn in_region(s: &SubsystemState, consts: &StabilityConsts, region: Region) -> bool {
    region.lyapunov(s) <= consts.threshold()
}

/// Conditional expected costs of one block and their weight gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditionals {
    /// `C¹`: block path on.
    pub c_on: f64,
    /// `C⁰`: block path off.
    pub c_off: f64,
    /// `C_{1i,1}¹` per unit.
    pub unit_on: Vec<f64>,
    /// `C_{1i,0}¹` per unit.
    pub unit_off: Vec<f64>,
    /// `∂C/∂W₁`, `∂C/∂W₂` of the unconditioned cost.
    pub grad_w1: Matrix,
    pub grad_w2: Matrix,
    /// Row `i`: `∇_{w₁ᵢ} C_{1i,1}¹`; column `i`: `∇_{w₂ᵢ} C_{1i,1}¹`.
    pub unit_grad_w1: Matrix,
    pub unit_grad_w2: Matrix,
}

/// A frozen tiny network in which one block's subsystem evolves.
#[derive(Clone, Debug)]
pub struct Host {
    pub spec: NetworkSpec,
    pub weights: WeightSet,
    /// Values of every gate outside the subsystem; the subsystem's entries are overwritten.
    pub gates: GateState,
    pub x: Matrix,
    pub targets: Targets,
    pub block: usize,
    pub consts: ComplexityConsts,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Host {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: NetworkSpec,
        weights: WeightSet,
        gates: GateState,
        x: Matrix,
        targets: Targets,
        block: usize,
        nu: f64,
        alpha: f64,
        beta: f64,
        lambda: f64,
    ) -> Result<Self> {
        spec.check_trainable()?;
        weights.check_shapes(&spec)?;
        let b = spec
            .blocks
            .get(block)
            .ok_or_else(|| Error::spec(format!("block {block} does not exist")))?;
        if !(b.has_theta_b() && b.has_theta1()) {
            return Err(Error::spec(format!("block {block}: the subsystem needs both block and unit gates")));
        }
        let live = gates.live_gates().len();
        if live > HOST_GATE_LIMIT {
            return Err(Error::GateLimit {
                count: live,
                limit: HOST_GATE_LIMIT,
            });
        }
        if !(nu > 0.0) || !(lambda >= 0.0) || !(alpha >= 0.0) || !(0.0..=1.0).contains(&beta) {
            return Err(Error::domain(format!(
                "host needs nu > 0, lambda >= 0, alpha >= 0, beta in [0, 1]; got {nu}, {lambda}, {alpha}, {beta}"
            )));
        }
        if b.activation == Activation::Relu {
            log::warn!("block {block}: ReLU is not continuously differentiable; the stability assumptions do not hold");
        }
        let consts = derive_consts(&spec)?;
        Ok(Host {
            spec,
            weights,
            gates,
            x,
            targets,
            block,
            consts,
            nu,
            alpha,
            beta,
            lambda,
        })
    }

    pub fn units(&self) -> usize {
        self.spec.blocks[self.block].hidden
    }

    /// The subsystem as currently stored in the host.
    pub fn state(&self) -> SubsystemState {
        let bw = &self.weights.blocks[self.block];
        let bg = &self.gates.blocks[self.block];
        SubsystemState {
            w1: bw.w1.clone().expect("nonlinear block"),
            w2: bw.w2.clone().expect("nonlinear block"),
            theta1: bg.theta1.clone(),
            theta_b: bg.theta_b,
        }
    }

    fn check_state(&self, s: &SubsystemState) -> Result<()> {
        let bw = &self.weights.blocks[self.block];
        let (w1, w2) = (bw.w1.as_ref().expect("nonlinear block"), bw.w2.as_ref().expect("nonlinear block"));
        if s.w1.shape() != w1.shape() || s.w2.shape() != w2.shape() || s.units() != self.units() {
            return Err(Error::Shape {
                op: "subsystem state",
                left: s.w1.shape(),
                right: w1.shape(),
            });
        }
        Ok(())
    }

    /// Host weights and gates with the subsystem replaced by `s`.
    pub fn with_state(&self, s: &SubsystemState) -> (WeightSet, GateState) {
        let mut w = self.weights.clone();
        w.blocks[self.block].w1 = Some(s.w1.clone());
        w.blocks[self.block].w2 = Some(s.w2.clone());
        let mut g = self.gates.clone();
        let b = &mut g.blocks[self.block];
        b.theta_b = s.theta_b;
        b.theta1.clone_from(&s.theta1);
        (w, g)
    }

    /// `R` at the host's current input/output gate norms.
    pub fn cross_term(&self) -> f64 {
        let l = self.block;
        let n2: f64 = self.gates.blocks[l].theta2.iter().sum();
        let n2n: f64 = match self.gates.blocks.get(l + 1) {
            Some(next) => next.theta2.iter().sum(),
            None => self.spec.blocks[l].output as f64,
        };
        cross_term(&self.consts, l, n2, n2n, self.nu, self.beta)
    }

    pub fn cross_term_floor(&self) -> f64 {
        cross_term_floor(&self.consts, self.block, self.nu, self.beta)
    }

    /// Conditional costs by exhaustive enumeration: outer gates (outside the subsystem)
    /// weighted by their Bernoulli probabilities, unit patterns enumerated explicitly.
    pub fn conditionals(&self, s: &SubsystemState) -> Result<Conditionals> {
        self.check_state(s)?;
        let l = self.block;
        let (w, g) = self.with_state(s);
        let outer: Vec<GateIndex> = g
            .live_gates()
            .into_iter()
            .filter(|idx| !matches!(idx, GateIndex::Block(b) | GateIndex::Unit(b, _) if *b == l))
            .filter(|&idx| {
                let t = g.get(idx);
                t > 0.0 && t < 1.0
            })
            .collect();
        let k = s.units();
        let base = g.expected();
        let (r1, c1) = s.w1.shape();
        let (r2, c2) = s.w2.shape();
        let mut c_off = 0.0;
        let mut cond = vec![0.0; 1 << k];
        let mut grad1 = vec![Matrix::zeros(r1, c1); 1 << k];
        let mut grad2 = vec![Matrix::zeros(r2, c2); 1 << k];
        for o in 0..(1usize << outer.len()) {
            let mut xi: GateSample = base.clone();
            let mut p_o = 1.0;
            for (bit, &idx) in outer.iter().enumerate() {
                let on = o >> bit & 1 == 1;
                let t = g.get(idx);
                p_o *= if on { t } else { 1.0 - t };
                let v = if on { 1.0 } else { 0.0 };
                match idx {
                    GateIndex::Block(b) => xi.blocks[b].b = v,
                    GateIndex::Unit(b, i) => xi.blocks[b].units[i] = v,
                    GateIndex::Input(b, i) => xi.blocks[b].inputs[i] = v,
                }
            }
            if p_o == 0.0 {
                continue;
            }
            xi.blocks[l].b = 0.0;
            xi.blocks[l].units = vec![1.0; k];
            let (c, _, _) = loss_and_grads(&self.spec, &w, &xi, &self.x, &self.targets)?;
            c_off += p_o * c;
            xi.blocks[l].b = 1.0;
            for (pat, (acc, (g1, g2))) in cond.iter_mut().zip(grad1.iter_mut().zip(&mut grad2)).enumerate() {
                for i in 0..k {
                    xi.blocks[l].units[i] = if pat >> i & 1 == 1 { 1.0 } else { 0.0 };
                }
                let (c, gw, _) = loss_and_grads(&self.spec, &w, &xi, &self.x, &self.targets)?;
                *acc += p_o * c;
                let bw = &gw.blocks[l];
                for (a, b) in g1.as_mut_slice().iter_mut().zip(bw.w1.as_ref().expect("nonlinear block").as_slice()) {
                    *a += p_o * b;
                }
                for (a, b) in g2.as_mut_slice().iter_mut().zip(bw.w2.as_ref().expect("nonlinear block").as_slice()) {
                    *a += p_o * b;
                }
            }
        }
        // Probability of a unit pattern, optionally ignoring unit `skip`.
        let prob = |pat: usize, skip: Option<usize>| -> f64 {
            (0..k)
                .filter(|&i| Some(i) != skip)
                .map(|i| if pat >> i & 1 == 1 { s.theta1[i] } else { 1.0 - s.theta1[i] })
                .product()
        };
        let mut out = Conditionals {
            c_on: 0.0,
            c_off,
            unit_on: vec![0.0; k],
            unit_off: vec![0.0; k],
            grad_w1: Matrix::zeros(r1, c1),
            grad_w2: Matrix::zeros(r2, c2),
            unit_grad_w1: Matrix::zeros(r1, c1),
            unit_grad_w2: Matrix::zeros(r2, c2),
        };
        for pat in 0..(1usize << k) {
            let p = prob(pat, None);
            out.c_on += p * cond[pat];
            for (a, b) in out.grad_w1.as_mut_slice().iter_mut().zip(grad1[pat].as_slice()) {
                *a += s.theta_b * p * b;
            }
            for (a, b) in out.grad_w2.as_mut_slice().iter_mut().zip(grad2[pat].as_slice()) {
                *a += s.theta_b * p * b;
            }
            for i in 0..k {
                let pi = prob(pat, Some(i));
                if pat >> i & 1 == 1 {
                    out.unit_on[i] += pi * cond[pat];
                    for j in 0..c1 {
                        out.unit_grad_w1[(i, j)] += pi * grad1[pat][(i, j)];
                    }
                    for r in 0..r2 {
                        out.unit_grad_w2[(r, i)] += pi * grad2[pat][(r, i)];
                    }
                } else {
                    out.unit_off[i] += pi * cond[pat];
                }
            }
        }
        Ok(out)
    }

    /// Unprojected `(∂L/∂θ_B, ∂L/∂θ₁ᵢ)` of the subsystem.
    pub fn theta_forces(&self, s: &SubsystemState, c: &Conditionals) -> (f64, Vec<f64>) {
        let r = self.cross_term();
        let n1: f64 = s.theta1.iter().sum();
        let layer = self.alpha / self.consts.gated_blocks().max(1) as f64;
        let g_b = c.c_on - c.c_off + n1 * r + self.nu * layer;
        let g_1 = (0..s.units()).map(|i| s.theta_b * (c.unit_on[i] - c.unit_off[i] + r)).collect();
        (g_b, g_1)
    }

    /// Time derivative of the subsystem with the projection terms applied.
    pub fn rhs(&self, s: &SubsystemState) -> Result<SubsystemState> {
        let c = self.conditionals(s)?;
        let (g_b, g_1) = self.theta_forces(s, &c);
        let decay = |grad: &Matrix, w: &Matrix| {
            let mut d = grad.map(|v| -v);
            d.as_mut_slice().iter_mut().zip(w.as_slice()).for_each(|(a, b)| *a -= self.lambda * b);
            d
        };
        Ok(SubsystemState {
            w1: decay(&c.grad_w1, &s.w1),
            w2: decay(&c.grad_w2, &s.w2),
            theta1: s.theta1.iter().zip(&g_1).map(|(&t, &g)| projected_rate(t, g)).collect(),
            theta_b: projected_rate(s.theta_b, g_b),
        })
    }

    /// Per-state ratios bounding Lipschitz-type constants: the largest
    /// `|wᵀ∇_w C_{1i,1}¹| / ‖w‖` over fan-in and fan-out vectors, and the largest
    /// `|C_{1i,1}¹ − C_{1i,0}¹| / (‖w₁ᵢ‖ + ‖w₂ᵢ‖)`. Zero-norm vectors are skipped.
    pub fn constant_ratios(&self, s: &SubsystemState) -> Result<(Option<f64>, Option<f64>)> {
        let c = self.conditionals(s)?;
        let mut eta: Option<f64> = None;
        let mut kappa: Option<f64> = None;
        for i in 0..s.units() {
            let (n1, n2) = (s.fan_in_norm(i), s.fan_out_norm(i));
            if n1 > 0.0 {
                let d: f64 = s.w1.row(i).iter().zip(c.unit_grad_w1.row(i)).map(|(a, b)| a * b).sum();
                eta = Some(eta.map_or(d.abs() / n1, |e| e.max(d.abs() / n1)));
            }
            if n2 > 0.0 {
                let d: f64 = (0..s.w2.rows()).map(|r| s.w2[(r, i)] * c.unit_grad_w2[(r, i)]).sum();
                eta = Some(eta.map_or(d.abs() / n2, |e| e.max(d.abs() / n2)));
            }
            if n1 + n2 > 0.0 {
                let k = (c.unit_on[i] - c.unit_off[i]).abs() / (n1 + n2);
                kappa = Some(kappa.map_or(k, |e| e.max(k)));
            }
        }
        Ok((eta, kappa))
    }
}

/// Running maxima of the Lipschitz-type ratios over random states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstantEstimate {
    pub eta: f64,
    pub kappa: f64,
    pub eta_at: Option<SubsystemState>,
    pub kappa_at: Option<SubsystemState>,
    /// `(η, κ)` after each draw.
    pub history: Vec<(f64, f64)>,
}

/// Random subsystem state: weight entries uniform in `[−scale, scale]`, θ uniform in `[0, 1]`.
pub fn random_state(host: &Host, scale: f64, rng: &mut Rng) -> SubsystemState {
    let s = host.state();
    let mut fill = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.uniform_range(-scale, scale));
    let w1 = fill(&s.w1);
    let w2 = fill(&s.w2);
    SubsystemState {
        w1,
        w2,
        theta1: (0..s.units()).map(|_| rng.uniform()).collect(),
        theta_b: rng.uniform(),
    }
}

/// Estimates `η` and `κ` as maxima over `samples` random states. These are empirical
/// lower estimates of the true constants.
pub fn estimate_eta_kappa(host: &Host, samples: usize, scale: f64, rng: &mut Rng) -> Result<ConstantEstimate> {
    let mut est = ConstantEstimate {
        eta: 0.0,
        kappa: 0.0,
        eta_at: None,
        kappa_at: None,
        history: Vec::with_capacity(samples),
    };
    for _ in 0..samples {
        let s = random_state(host, scale, rng);
        let (e, k) = host.constant_ratios(&s)?;
        if let Some(e) = e.filter(|&e| e > est.eta) {
            est.eta = e;
            est.eta_at = Some(s.clone());
        }
        if let Some(k) = k.filter(|&k| k > est.kappa) {
            est.kappa = k;
            est.kappa_at = Some(s);
        }
        est.history.push((est.eta, est.kappa));
    }
    Ok(est)
}

/// Stability constants of a host from an `η, κ` estimate.
pub fn stability_consts(host: &Host, est: &ConstantEstimate) -> Result<StabilityConsts> {
    StabilityConsts::new(host.cross_term(), host.cross_term_floor(), est.eta, est.kappa)
}

/// Random state inside `D_B` or `D_U(i)`. The region's own variables are drawn in a ball
/// of radius `ρ` (θ components non-negative); everything else keeps the host values
/// for weights and is uniform in `[0, 1]` for θ.
pub fn sample_in_region(host: &Host, consts: &StabilityConsts, region: Region, rng: &mut Rng) -> SubsystemState {
    let mut s = host.state();
    let k = s.units();
    let radius = consts.rho * rng.uniform();
    match region {
        Region::Block => {
            let n = s.w1.as_slice().len() + s.w2.as_slice().len() + 1;
            let dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut it = dir.iter().map(|d| radius * d / norm);
            s.w1.as_mut_slice().iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
            s.w2.as_mut_slice().iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
            s.theta_b = it.next().unwrap_or(0.0).abs().min(1.0);
            s.theta1 = (0..k).map(|_| rng.uniform()).collect();
        }
        Region::Unit(i) => {
            let (c1, r2) = (s.w1.cols(), s.w2.rows());
            let dir: Vec<f64> = (0..c1 + r2 + 1).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (j, d) in dir[..c1].iter().enumerate() {
                s.w1[(i, j)] = radius * d / norm;
            }
            for r in 0..r2 {
                s.w2[(r, i)] = radius * dir[c1 + r] / norm;
            }
            for (j, t) in s.theta1.iter_mut().enumerate() {
                *t = if j == i { (radius * dir[c1 + r2] / norm).abs().min(1.0) } else { rng.uniform() };
            }
            s.theta_b = rng.uniform();
        }
    }
    s
}
