//! One-shot run of the engine's invariant checks on small random instances.

use gatecut::complexity::{derive_consts, gamma_schedule, grad_jfp, j_fp};
use gatecut::gates::{flattening_pdf, j_objective, pi_star, GateIndex, GateState};
use gatecut::model::{forward, loss_and_grads, Activation, BlockSpec, NetworkSpec, SkipKind, Targets, Task, WeightSet};
use gatecut::numerics::{finite_diff_grad, max_rel_err, Matrix, Rng};
use gatecut::odelab::{e_set_drift, integrate, HostConfig, IntegrateOptions, Region};
use gatecut::trainer::{apply_masks, compact, expected_cost, theta_grad_exact, vertex_verify, Objective};

/// Deliberate defects for exercising the checks themselves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Negate every log γ of the schedule.
    pub gamma_sign: bool,
}

impl Faults {
    pub fn parse(name: &str) -> Option<Faults> {
        match name {
            "gamma-sign" => Some(Faults { gamma_sign: true }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    /// Worst observed value against its bound.
    pub detail: String,
}

type Check = fn(&mut Rng, Faults) -> gatecut::Result<CheckResult>;

const CHECKS: [(&str, Check); 8] = [
    ("gate closed forms", gate_forms),
    ("weight gradients", weight_grads),
    ("exact gate gradients", exact_theta_grads),
    ("complexity gradient", complexity_grad),
    ("vertex optimum and multilinearity", vertex),
    ("masked vs compacted outputs", compaction),
    ("gamma schedule identity", schedule_identity),
    ("limit set invariance", limit_set),
];

/// Runs every check; instances are drawn from `seed`.
pub fn run_all(seed: u64, faults: Faults) -> Vec<CheckResult> {
    let root = Rng::new(seed);
    CHECKS
        .iter()
        .enumerate()
        .map(|(k, (name, f))| {
            f(&mut root.fork(k as u64), faults).unwrap_or_else(|e| CheckResult {
                name,
                pass: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

pub fn table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {}  {}\n",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    s
}

fn result(name: &'static str, worst: f64, bound: f64) -> CheckResult {
    CheckResult {
        name,
        pass: worst <= bound,
        detail: format!("worst {worst:.3e} (bound {bound:.0e})"),
    }
}

fn tiny_net(rng: &mut Rng) -> NetworkSpec {
    let act = [Activation::Tanh, Activation::Softplus][rng.below(2) as usize];
    let w = 2 + rng.below(2) as usize;
    NetworkSpec::new(
        Task::Regression,
        Activation::Identity,
        vec![
            BlockSpec::dense(w, 2, 3, act, SkipKind::Dense),
            BlockSpec::dense(3, 2, 3, act, SkipKind::Identity),
            BlockSpec::dense(3, 1 + rng.below(2) as usize, 2, act, SkipKind::Dense),
        ],
    )
}

fn instance(rng: &mut Rng) -> gatecut::Result<(NetworkSpec, WeightSet, GateState, Matrix, Targets)> {
    let spec = tiny_net(rng);
    let w = WeightSet::init(&spec, rng);
    let mut g = GateState::new(&spec, 1.0)?;
    for idx in g.live_gates() {
        g.set(idx, rng.uniform_range(0.05, 0.95));
    }
    let x = Matrix::from_fn(6, spec.input_width(), |_, _| rng.normal());
    let y = Matrix::from_fn(6, spec.output_width(), |_, _| rng.normal());
    Ok((spec, w, g, x, Targets::Values(y)))
}

fn gate_forms(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (theta, gamma) = (rng.uniform(), rng.uniform_range(0.05, 0.95));
        let p = pi_star(theta, gamma)?;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=1000 {
            let pi = k as f64 * 1e-3;
            let v = j_objective(pi, theta, gamma)?;
            if v < best.0 {
                best = (v, pi);
            }
        }
        // Closed form must beat the grid and sit within one grid step of its argmin.
        worst = worst.max((p - best.1).abs() - 1e-3).max(j_objective(p, theta, gamma)? - best.0);
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut integral = 0.0;
        for k in 0..=n {
            let c = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            integral += c * flattening_pdf(k as f64 * h, gamma)?;
        }
        worst = worst.max((integral * h / 3.0 - 1.0).abs() - 1e-8);
    }
    Ok(result("gate closed forms", worst.max(0.0), 0.0))
}

fn weight_grads(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let (spec, w, g, x, t) = instance(rng)?;
        let xi = g.sample(rng);
        let (_, gw, _) = loss_and_grads(&spec, &w, &xi, &x, &t)?;
        let fd = finite_diff_grad(
            |v: &[f64]| {
                let mut p = w.clone();
                p.set_flat(v);
                forward(&spec, &p, &xi, &x).and_then(|(y, _)| gatecut::model::loss(&y, &t)).unwrap_or(f64::NAN)
            },
            &w.to_flat(),
            1e-6,
        )?;
        worst = worst.max(max_rel_err(&gw.to_flat(), &fd, 1e-6));
    }
    Ok(result("weight gradients", worst, 1e-5))
}

fn exact_theta_grads(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..2 {
        let (spec, w, g, x, t) = instance(rng)?;
        for idx in g.live_gates() {
            let exact = theta_grad_exact(&spec, &w, &g, &x, &t, idx)?;
            // The cost is affine in each θ, so the central difference is exact up to rounding.
            let at = |v: f64| {
                let mut h = g.clone();
                h.set(idx, v);
                expected_cost(&spec, &w, &h, &x, &t)
            };
            let fd = (at(g.get(idx) + 1e-3)? - at(g.get(idx) - 1e-3)?) / 2e-3;
            worst = worst.max((exact - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(result("exact gate gradients", worst, 1e-9))
}

fn complexity_grad(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let (spec, _, g, _, _) = instance(rng)?;
        let consts = derive_consts(&spec)?;
        let (alpha, beta) = (rng.uniform(), rng.uniform());
        let grad = grad_jfp(&g, &consts, alpha, beta)?;
        for idx in g.live_gates() {
            let at = |v: f64| {
                let mut h = g.clone();
                h.set(idx, v);
                j_fp(&h, &consts, alpha, beta)
            };
            let fd = (at(g.get(idx) + 1e-4)? - at(g.get(idx) - 1e-4)?) / 2e-4;
            let an = match idx {
                GateIndex::Block(l) => grad.blocks[l].b,
                GateIndex::Unit(l, i) => grad.blocks[l].units[i],
                GateIndex::Input(l, i) => grad.blocks[l].inputs[i],
            };
            worst = worst.max((an - fd).abs() / fd.abs().max(1e-3));
        }
    }
    Ok(result("complexity gradient", worst, 1e-8))
}

fn vertex(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let spec = NetworkSpec::new(
        Task::Regression,
        Activation::Identity,
        vec![
            BlockSpec::dense(2, 2, 2, Activation::Tanh, SkipKind::Dense),
            BlockSpec::dense(2, 2, 1, Activation::Softplus, SkipKind::Dense),
        ],
    );
    let w = WeightSet::init(&spec, rng);
    let g = GateState::new(&spec, 0.5)?;
    let x = Matrix::from_fn(5, 2, |_, _| rng.normal());
    let t = Targets::Values(Matrix::from_fn(5, 1, |_, _| rng.normal()));
    let consts = derive_consts(&spec)?;
    let obj = Objective {
        consts: &consts,
        lambda: 1e-3,
        nu: 0.1,
        alpha: 0.2,
        beta: 0.5,
    };
    let r = vertex_verify(&spec, &w, &g, &x, &t, &obj, 40, rng)?;
    let gap = r.vertex_min - r.interior_min;
    Ok(CheckResult {
        name: "vertex optimum and multilinearity",
        pass: gap <= 1e-9 && r.midpoint_residual <= 1e-10,
        detail: format!("vertex - interior {gap:.3e} (bound 1e-9), midpoint residual {:.3e} (bound 1e-10)", r.midpoint_residual),
    })
}

fn compaction(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (spec, mut w, mut g, _, _) = instance(rng)?;
        for idx in g.live_gates() {
            if rng.bernoulli(0.3) {
                g.kill(idx);
            } else {
                g.set(idx, 1.0);
            }
        }
        apply_masks(&g, &mut [&mut w]);
        let (cs, cw, cg) = compact(&spec, &w, &g)?;
        let x = Matrix::from_fn(100, spec.input_width(), |_, _| rng.normal());
        let (a, _) = forward(&spec, &w, &g.rounded(), &x)?;
        let (b, _) = forward(&cs, &cw, &cg.rounded(), &x)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(result("masked vs compacted outputs", worst, 1e-6))
}

fn schedule_identity(rng: &mut Rng, faults: Faults) -> gatecut::Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (spec, _, g, _, _) = instance(rng)?;
        let consts = derive_consts(&spec)?;
        let (nu, alpha, beta) = (rng.uniform_range(0.01, 1.0), rng.uniform(), rng.uniform());
        let n = 1 + rng.below(50_000) as usize;
        let sign = if faults.gamma_sign { -1.0 } else { 1.0 };
        let mut s = 0.0;
        for (b, gm) in g.blocks.iter().zip(gamma_schedule(&g, &consts, nu, alpha, beta, n)?) {
            s += sign
                * (b.theta_b * gm.log_b + b.theta1.iter().sum::<f64>() * gm.log_1 + b.theta2.iter().sum::<f64>() * gm.log_2);
        }
        let lhs = nu * j_fp(&g, &consts, alpha, beta)?;
        worst = worst.max((lhs + s / n as f64).abs() / lhs.abs());
    }
    Ok(result("gamma schedule identity", worst, 1e-10))
}

fn limit_set(rng: &mut Rng, _: Faults) -> gatecut::Result<CheckResult> {
    let host = HostConfig {
        seed: rng.next_u64(),
        ..Default::default()
    }
    .build()?;
    let mut s = host.state().scaled(0.0);
    s.theta1.iter_mut().for_each(|t| *t = rng.uniform());
    let opts = IntegrateOptions {
        dt: 0.02,
        t_end: 2.0,
        ..Default::default()
    };
    let traj = integrate(&host, &s, &opts)?;
    Ok(result("limit set invariance", e_set_drift(&traj, Region::Block), 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_build_passes_for_several_seeds() {
        for seed in [0, 1, 17] {
            let r = run_all(seed, Faults::default());
            assert!(r.iter().all(|c| c.pass), "seed {seed}:\n{}", table(&r));
        }
    }

    #[test]
    fn flipped_gamma_sign_is_caught_by_the_identity_only() {
        let r = run_all(0, Faults::parse("gamma-sign").unwrap());
        let failed: Vec<_> = r.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        assert_eq!(failed, vec!["gamma schedule identity"]);
        assert!(Faults::parse("nope").is_none());
    }
}
