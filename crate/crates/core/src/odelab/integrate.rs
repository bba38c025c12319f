use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{par_map, Rng};

use super::{in_region, lyapunov_b, lyapunov_u, sample_in_region, Host, Region, StabilityConsts, SubsystemState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_end: f64,
    pub method: Method,
    /// State norm above which integration stops.
    pub blowup: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            dt: 1e-3,
            t_end: 200.0,
            method: Method::Rk4,
            blowup: 1e6,
        }
    }
}

impl IntegrateOptions {
    /// Defaults resolving the slow decay mode: `t_end = 200/λ`.
    pub fn for_host(host: &Host) -> Self {
        let mut o = IntegrateOptions::default();
        if host.lambda > 0.0 {
            o.t_end = 200.0 / host.lambda;
        }
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub lambda_b: f64,
    pub lambda_u: Vec<f64>,
    pub theta_b: f64,
    pub theta1: Vec<f64>,
    pub w1_norm: f64,
    pub w2_norm: f64,
    /// `max(‖w₁ᵢ‖, ‖w₂ᵢ‖)` per unit.
    pub unit_w: Vec<f64>,
}

impl TrajectoryPoint {
    fn of(t: f64, s: &SubsystemState) -> Self {
        let k = s.units();
        TrajectoryPoint {
            t,
            lambda_b: lyapunov_b(s),
            lambda_u: (0..k).map(|i| lyapunov_u(s, i)).collect(),
            theta_b: s.theta_b,
            theta1: s.theta1.clone(),
            w1_norm: s.w1.norm(),
            w2_norm: s.w2.norm(),
            unit_w: (0..k).map(|i| s.fan_in_norm(i).max(s.fan_out_norm(i))).collect(),
        }
    }

    pub fn lyapunov(&self, region: Region) -> f64 {
        match region {
            Region::Block => self.lambda_b,
            Region::Unit(i) => self.lambda_u[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub final_state: SubsystemState,
    /// Integration stopped early because the state norm exceeded the blow-up bound.
    pub blew_up: bool,
}

/// Integrates the projected dynamics from `s0`, clamping θ to `[0, 1]` after every step
/// (and every Runge-Kutta stage).
pub fn integrate(host: &Host, s0: &SubsystemState, opts: &IntegrateOptions) -> Result<Trajectory> {
    if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) {
        return Err(Error::domain(format!("need dt > 0 and t_end >= 0, got {} and {}", opts.dt, opts.t_end)));
    }
    let steps = (opts.t_end / opts.dt).round() as usize;
    let mut s = s0.clone();
    s.clamp();
    let mut points = vec![TrajectoryPoint::of(0.0, &s)];
    let mut blew_up = false;
    let dt = opts.dt;
    for n in 1..=steps {
        let mut next = match opts.method {
            Method::Euler => s.step(&host.rhs(&s)?, dt),
            Method::Rk4 => {
                let stage = |d: &SubsystemState, h: f64| {
                    let mut x = s.step(d, h);
                    x.clamp();
                    x
                };
                let k1 = host.rhs(&s)?;
                let k2 = host.rhs(&stage(&k1, 0.5 * dt))?;
                let k3 = host.rhs(&stage(&k2, 0.5 * dt))?;
                let k4 = host.rhs(&stage(&k3, dt))?;
                s.step(&k1, dt / 6.0).step(&k2, dt / 3.0).step(&k3, dt / 3.0).step(&k4, dt / 6.0)
            }
        };
        next.clamp();
        if !next.is_finite() || next.norm() > opts.blowup {
            blew_up = true;
            break;
        }
        s = next;
        points.push(TrajectoryPoint::of(n as f64 * dt, &s));
    }
    Ok(Trajectory {
        points,
        final_state: s,
        blew_up,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
    /// Started outside the region; convergence is not claimed.
    OutOfScope,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::OutOfScope => "OUT_OF_SCOPE",
        })
    }
}

/// Which factor of the product `θ_B·‖θ₁‖₁` (or `θ_B·θ₁ᵢ`) ended below tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vanished {
    ThetaB,
    Theta1,
    Both,
    Neither,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyOptions {
    pub integrate: IntegrateOptions,
    /// Tolerance on terminal weight norms and the vanishing θ factor.
    pub tol: f64,
    /// Allowed per-step Lyapunov increase is `slack_c · dt²`.
    pub slack_c: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            integrate: IntegrateOptions::default(),
            tol: 1e-3,
            slack_c: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub region: Region,
    pub in_region: bool,
    pub lyapunov0: f64,
    pub threshold: f64,
    /// Largest single-step increase of the region's Lyapunov function.
    pub max_increase: f64,
    pub slack: f64,
    pub monotone: bool,
    pub converged: bool,
    pub terminal_w: f64,
    pub terminal_theta_b: f64,
    pub terminal_theta1: f64,
    pub vanished: Vanished,
    pub blew_up: bool,
}

/// Integrates from `s0` and checks Lyapunov descent and convergence to the limit set.
/// Region membership and convergence are reported separately; the verdict is
/// `OUT_OF_SCOPE` whenever `s0` lies outside the region.
pub fn certify(
    host: &Host,
    s0: &SubsystemState,
    consts: &StabilityConsts,
    region: Region,
    opts: &CertifyOptions,
) -> Result<(Certificate, Trajectory)> {
    if let Region::Unit(i) = region {
        if i >= s0.units() {
            return Err(Error::domain(format!("unit {i} does not exist")));
        }
    }
    let inside = in_region(s0, consts, region);
    let traj = integrate(host, s0, &opts.integrate)?;
    let max_increase = traj
        .points
        .windows(2)
        .map(|w| w[1].lyapunov(region) - w[0].lyapunov(region))
        .fold(f64::NEG_INFINITY, f64::max);
    let slack = opts.slack_c * opts.integrate.dt * opts.integrate.dt;
    let last = traj.points.last().expect("trajectory has its initial point");
    let (terminal_w, terminal_theta1) = match region {
        Region::Block => (last.w1_norm.max(last.w2_norm), last.theta1.iter().sum()),
        Region::Unit(i) => (last.unit_w[i], last.theta1[i]),
    };
    let vanished = match (last.theta_b <= opts.tol, terminal_theta1 <= opts.tol) {
        (true, true) => Vanished::Both,
        (true, false) => Vanished::ThetaB,
        (false, true) => Vanished::Theta1,
        (false, false) => Vanished::Neither,
    };
    let monotone = max_increase <= slack;
    let converged = !traj.blew_up && terminal_w <= opts.tol && vanished != Vanished::Neither;
    let verdict = if !inside {
        Verdict::OutOfScope
    } else if monotone && converged {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok((
        Certificate {
            verdict,
            region,
            in_region: inside,
            lyapunov0: region.lyapunov(s0),
            threshold: consts.threshold(),
            max_increase,
            slack,
            monotone,
            converged,
            terminal_w,
            terminal_theta_b: last.theta_b,
            terminal_theta1,
            vanished,
            blew_up: traj.blew_up,
        },
        traj,
    ))
}

/// Certifies `n` random initializations inside `region`, in parallel. Initialization `i`
/// uses stream `i` of `seed`, so results do not depend on the thread count.
pub fn sweep(
    host: &Host,
    consts: &StabilityConsts,
    region: Region,
    n: usize,
    opts: &CertifyOptions,
    seed: u64,
    threads: usize,
) -> Result<Vec<(Certificate, Trajectory)>> {
    let root = Rng::new(seed);
    let ids: Vec<u64> = (0..n as u64).collect();
    par_map(&ids, threads, |&i| {
        let s0 = sample_in_region(host, consts, region, &mut root.fork(i));
        certify(host, &s0, consts, region, opts)
    })
    .into_iter()
    .collect()
}

/// Largest distance from the limit set along a trajectory: weight norms and the θ product.
pub fn e_set_drift(traj: &Trajectory, region: Region) -> f64 {
    traj.points
        .iter()
        .map(|p| match region {
            Region::Block => p.w1_norm.max(p.w2_norm).max(p.theta_b * p.theta1.iter().sum::<f64>()),
            Region::Unit(i) => p.unit_w[i].max(p.theta_b * p.theta1[i]),
        })
        .fold(0.0, f64::max)
}

/// Endpoint differences at `dt`, `dt/2`, `dt/4` and the observed order `log₂(e₁/e₂)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub method: Method,
    pub dt: f64,
    pub diff_coarse: f64,
    pub diff_fine: f64,
    pub order: f64,
}

pub fn convergence_order(host: &Host, s0: &SubsystemState, dt: f64, t_end: f64, method: Method) -> Result<ConvergenceReport> {
    let run = |h: f64| -> Result<Vec<f64>> {
        let o = IntegrateOptions {
            dt: h,
            t_end,
            method,
            blowup: f64::INFINITY,
        };
        Ok(integrate(host, s0, &o)?.final_state.to_flat())
    };
    let (a, b, c) = (run(dt)?, run(dt / 2.0)?, run(dt / 4.0)?);
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let (e1, e2) = (dist(&a, &b), dist(&b, &c));
    Ok(ConvergenceReport {
        method,
        dt,
        diff_coarse: e1,
        diff_fine: e2,
        order: (e1 / e2).log2(),
    })
}

/// Trajectory as CSV: `t, Λ_B, Λ_U(i)…, θ_B, θ₁ᵢ…, ‖W₁‖, ‖W₂‖`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let k = traj.final_state.units();
    let mut out = String::from("t,lambda_b");
    (0..k).for_each(|i| out.push_str(&format!(",lambda_u{i}")));
    out.push_str(",theta_b");
    (0..k).for_each(|i| out.push_str(&format!(",theta1_{i}")));
    out.push_str(",w1_norm,w2_norm\n");
    for p in &traj.points {
        out.push_str(&format!("{},{}", p.t, p.lambda_b));
        p.lambda_u.iter().for_each(|v| out.push_str(&format!(",{v}")));
        out.push_str(&format!(",{}", p.theta_b));
        p.theta1.iter().for_each(|v| out.push_str(&format!(",{v}")));
        out.push_str(&format!(",{},{}\n", p.w1_norm, p.w2_norm));
    }
    out
}
