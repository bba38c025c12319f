use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use gatecut::complexity::{analyze_static, StaticReport};
use gatecut::gates::GateState;
use gatecut::numerics::{thread_count, Rng};
use gatecut::odelab::{
    convergence_order, e_set_drift, estimate_eta_kappa, integrate, stability_consts, sweep, trajectory_csv,
    Certificate, CertifyOptions, IntegrateOptions, Method, Region, Trajectory, Verdict,
};
use gatecut::trainer::{
    apply_masks, compact, finalize_round, metrics_csv, prune_pass, Checkpoint, MetricsRecord, TrainOutcome, Trainer,
};

use crate::config::RunConfig;
use crate::svg::{line_chart, Series};
use crate::verify::{self, Faults};
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Header lines for text outputs, each prefixed with `comment`.
pub fn header(hash: &str, comment: &str) -> String {
    format!("{comment} gatecut {VERSION}\n{comment} config sha256 {hash}\n")
}

/// JSON outputs carry the header as a sibling object.
#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    header: Header<'a>,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct Header<'a> {
    engine: &'a str,
    version: &'a str,
    config_sha256: &'a str,
}

struct Out<'a> {
    dir: &'a Path,
    hash: &'a str,
}

impl Out<'_> {
    fn new<'a>(dir: &'a Path, hash: &'a str) -> Result<Out<'a>, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("output directory {}: {e}", dir.display())))?;
        Ok(Out { dir, hash })
    }

    fn text(&self, name: &str, comment: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, format!("{}{body}", header(self.hash, comment)))?;
        Ok(path)
    }

    fn svg(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        fs::write(&path, format!("<!--\n{}-->\n{body}", header(self.hash, "")))?;
        Ok(path)
    }

    fn json<T: Serialize>(&self, name: &str, body: T) -> Result<PathBuf, CliError> {
        let w = Wrapped {
            header: Header {
                engine: "gatecut",
                version: VERSION,
                config_sha256: self.hash,
            },
            body,
        };
        let path = self.dir.join(name);
        fs::write(&path, serde_json::to_string(&w).map_err(|e| CliError::Other(e.to_string()))?)?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct CheckpointBody<'a> {
    checkpoint: &'a Checkpoint,
}

/// Reads a checkpoint written by `train`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let body = v
        .get_mut("checkpoint")
        .map(serde_json::Value::take)
        .ok_or_else(|| CliError::Input(format!("{}: no checkpoint object", path.display())))?;
    let c: Checkpoint = serde_json::from_value(body).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    c.check_version().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(c)
}

fn gate_snapshot(g: &GateState) -> Vec<(f64, f64)> {
    g.blocks
        .iter()
        .map(|b| {
            let mean = if b.theta1.is_empty() {
                f64::NAN
            } else {
                b.theta1.iter().sum::<f64>() / b.theta1.len() as f64
            };
            (if b.b_gated { b.theta_b } else { f64::NAN }, mean)
        })
        .collect()
}

fn train_plots(out: &Out, metrics: &[MetricsRecord], thetas: &[Vec<(f64, f64)>]) -> Result<(), CliError> {
    let curve = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        metrics.iter().map(|m| (m.epoch as f64, f(m).unwrap_or(f64::NAN))).collect()
    };
    let acc = [
        Series::new("train accuracy", curve(&|m| m.train_acc)),
        Series::new("test accuracy", curve(&|m| m.test_acc)),
    ];
    if metrics.iter().any(|m| m.train_acc.is_some()) {
        out.svg("accuracy.svg", &line_chart("Accuracy", "epoch", "accuracy", &acc))?;
    }
    let loss = [
        Series::new("train loss", curve(&|m| Some(m.train_loss))),
        Series::new("test loss", curve(&|m| m.test_loss)),
    ];
    out.svg("loss.svg", &line_chart("Loss", "epoch", "loss", &loss))?;
    let ratios = [
        Series::new("fPR %", curve(&|m| Some(m.fpr))),
        Series::new("pPR %", curve(&|m| Some(m.ppr))),
    ];
    out.svg("pruning.svg", &line_chart("Pruning ratios", "epoch", "percent", &ratios))?;
    let blocks = thetas.first().map_or(0, Vec::len);
    let mut series = Vec::new();
    for l in 0..blocks {
        let pick = |k: usize| -> Vec<(f64, f64)> {
            thetas
                .iter()
                .enumerate()
                .map(|(e, s)| (e as f64, if k == 0 { s[l].0 } else { s[l].1 }))
                .collect()
        };
        let tb = pick(0);
        if tb.iter().any(|p| p.1.is_finite()) {
            series.push(Series::new(format!("θ_B block {l}"), tb));
        }
        let t1 = pick(1);
        if t1.iter().any(|p| p.1.is_finite()) {
            series.push(Series::new(format!("mean θ₁ block {l}"), t1));
        }
    }
    out.svg("theta.svg", &line_chart("Gate parameters", "epoch", "θ", &series))?;
    Ok(())
}

/// Per-block widths, parameters and FLOPS before and after pruning.
pub fn architecture_report(before: &StaticReport, after: &StaticReport) -> String {
    let mut s = String::from("Per-block structure before -> after pruning\n");
    let _ = writeln!(
        s,
        "{:>5} {:>13} {:>13} {:>13} {:>10} {:>27} {:>25}",
        "block", "in", "hidden", "out", "layers", "flops", "params"
    );
    for (b, a) in before.blocks.iter().zip(&after.blocks) {
        let _ = writeln!(
            s,
            "{:>5} {:>13} {:>13} {:>13} {:>10} {:>27} {:>25}",
            b.index,
            format!("{} -> {}", b.input, a.input),
            format!("{} -> {}", b.hidden, a.hidden),
            format!("{} -> {}", b.output, a.output),
            format!("{} -> {}", b.layers, a.layers),
            format!("{:.4e} -> {:.4e}", b.flops, a.flops),
            format!("{:.4e} -> {:.4e}", b.params, a.params),
        );
    }
    let pct = |a: f64, b: f64| if b > 0.0 { 100.0 * (1.0 - a / b) } else { 0.0 };
    let _ = writeln!(
        s,
        "total: layers {} -> {}, FLOPS {:.4e} -> {:.4e} ({:.2}% pruned), parameters {:.4e} -> {:.4e} ({:.2}% pruned)",
        before.layers,
        after.layers,
        before.flops,
        after.flops,
        pct(after.flops, before.flops),
        before.params,
        after.params,
        pct(after.params, before.params)
    );
    s
}

fn write_train_outputs(out: &Out, outcome: &TrainOutcome, before: &StaticReport) -> Result<(), CliError> {
    let after = analyze_static(&outcome.spec)?;
    let mut report = architecture_report(before, &after);
    let _ = writeln!(
        report,
        "layers left: {} (skips of pruned blocks not counted)",
        outcome.ratios.layers_left
    );
    out.text("architecture.txt", "#", &report)?;
    out.text("architecture_final.toml", "#", &outcome.spec.to_toml_string())?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<String, CliError> {
    let spec = cfg.model()?;
    let hyper = cfg.trainer()?;
    let data = cfg.dataset(&spec)?;
    let out = Out::new(out_dir, &cfg.hash)?;
    let before = analyze_static(&spec)?;
    let mut trainer = Trainer::new(spec, &data, hyper)?.with_threads(thread_count());
    let mut thetas = vec![gate_snapshot(&trainer.state.gates)];
    let write_progress = |t: &Trainer| -> Result<(), CliError> {
        out.text("metrics.csv", "#", &metrics_csv(&t.metrics))?;
        let mut log = String::from("epoch,kind,block,unit,theta\n");
        t.events.iter().for_each(|e| log.push_str(&format!("{e}\n")));
        out.text("prune_events.log", "#", &log)?;
        let mut timing = String::from("epoch,seconds\n");
        t.epoch_seconds.iter().enumerate().for_each(|(e, s)| timing.push_str(&format!("{},{s}\n", e + 1)));
        out.text("timing.csv", "#", &timing)?;
        out.json("checkpoint.json", CheckpointBody { checkpoint: &t.checkpoint() })?;
        Ok(())
    };
    while trainer.state.epoch < trainer.hyper.epochs {
        match trainer.run_epoch() {
            Ok(_) => {}
            Err(e @ gatecut::Error::Divergence { .. }) => {
                write_progress(&trainer)?;
                return Err(CliError::Divergence(e.to_string()));
            }
            Err(e) => return Err(e.into()),
        }
        thetas.push(gate_snapshot(&trainer.state.gates));
        if cfg.output.checkpoint_every_epoch {
            write_progress(&trainer)?;
        }
    }
    write_progress(&trainer)?;
    let outcome = trainer.finish()?;
    // `finish` may round and prune once more; the log must include those removals.
    let mut log = String::from("epoch,kind,block,unit,theta\n");
    outcome.events.iter().for_each(|e| log.push_str(&format!("{e}\n")));
    out.text("prune_events.log", "#", &log)?;
    write_train_outputs(&out, &outcome, &before)?;
    if cfg.output.plots {
        train_plots(&out, &outcome.metrics, &thetas)?;
    }
    let last = outcome.metrics.last();
    Ok(format!(
        "trained {} epochs on {}: test accuracy {}, fPR {:.2}%, pPR {:.2}%, {} layers left; outputs in {}",
        outcome.metrics.len(),
        data.provenance,
        last.and_then(|m| m.test_acc).map_or("-".to_string(), |a| format!("{:.4}", a)),
        outcome.ratios.fpr,
        outcome.ratios.ppr,
        outcome.ratios.layers_left,
        out_dir.display()
    ))
}

pub fn cmd_analyze(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<String, CliError> {
    let spec = cfg.model()?;
    let report = analyze_static(&spec)?;
    if let Some(dir) = out_dir {
        let out = Out::new(dir, &cfg.hash)?;
        out.text("complexity.csv", "#", &report.to_csv())?;
        out.text("complexity.txt", "#", &report.to_text())?;
    }
    Ok(report.to_text())
}

fn verdict_csv(rows: &[(Certificate, Trajectory)]) -> String {
    let mut s = String::from(
        "run,verdict,lyapunov0,threshold,max_increase,slack,monotone,converged,terminal_w,terminal_theta_b,terminal_theta1,vanished\n",
    );
    for (k, (c, _)) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{k},{},{},{},{},{},{},{},{},{},{},{:?}",
            c.verdict,
            c.lyapunov0,
            c.threshold,
            c.max_increase,
            c.slack,
            c.monotone,
            c.converged,
            c.terminal_w,
            c.terminal_theta_b,
            c.terminal_theta1,
            c.vanished
        );
    }
    s
}

/// Certification sweeps over the configured regions; `dt_halving` adds an integrator
/// convergence-order report.
pub fn cmd_odelab(cfg: &RunConfig, out_dir: &Path, dt_halving: bool) -> Result<(String, bool), CliError> {
    let o = &cfg.odelab;
    let host = o.host.build()?;
    let out = Out::new(out_dir, &cfg.hash)?;
    let root = Rng::new(o.seed);
    let est = estimate_eta_kappa(&host, o.eta_samples, o.eta_scale, &mut root.fork(1))?;
    let consts = stability_consts(&host, &est)?;
    let opts = CertifyOptions {
        integrate: IntegrateOptions {
            dt: o.dt,
            t_end: o.t_end,
            method: o.method,
            ..Default::default()
        },
        tol: o.tol,
        slack_c: o.slack_c,
    };
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "constants: R = {:.6e}, R_m = {:.6e}, eta = {:.6e}, kappa = {:.6e}, rho = {:.6e}, threshold = {:.6e}",
        consts.r,
        consts.r_m,
        consts.eta,
        consts.kappa,
        consts.rho,
        consts.threshold()
    );
    let mut all_pass = true;
    let mut charts = Vec::new();
    for (k, name) in o.regions.iter().enumerate() {
        let region = match name.as_str() {
            "block" => Region::Block,
            "unit" => Region::Unit(o.unit),
            other => return Err(CliError::Input(format!("[odelab] unknown region {other:?}"))),
        };
        let tag = name.as_str();
        let res = sweep(&host, &consts, region, o.runs, &opts, root.fork(10 + k as u64).next_u64(), thread_count())?;
        let pass = res.iter().filter(|(c, _)| c.verdict == Verdict::Pass).count();
        all_pass &= pass == res.len();
        let worst_inc = res.iter().map(|(c, _)| c.max_increase).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            summary,
            "{region}: {pass}/{} PASS (largest step increase {worst_inc:.3e}, allowed slack {:.3e})",
            res.len(),
            opts.slack_c * o.dt * o.dt
        );
        out.text(&format!("verdicts_{tag}.csv"), "#", &verdict_csv(&res))?;
        for (i, (_, traj)) in res.iter().take(o.trajectories).enumerate() {
            out.text(&format!("trajectory_{tag}_{i}.csv"), "#", &trajectory_csv(traj))?;
        }
        let series: Vec<Series> = res
            .iter()
            .take(o.trajectories.max(1))
            .enumerate()
            .map(|(i, (_, t))| {
                let pts = t.points.iter().map(|p| (p.t, p.lyapunov(region))).collect();
                Series::new(format!("run {i}"), pts)
            })
            .collect();
        charts.push((tag.to_string(), region, series));
    }
    // Start on the limit set: closed block, zero weights, arbitrary θ₁.
    let mut s0 = host.state().scaled(0.0);
    let mut rng = root.fork(2);
    s0.theta1.iter_mut().for_each(|t| *t = rng.uniform());
    let traj = integrate(&host, &s0, &opts.integrate)?;
    let drift = e_set_drift(&traj, Region::Block);
    let inv = drift <= 1e-12;
    all_pass &= inv;
    let _ = writeln!(
        summary,
        "E_B initialization: drift {drift:.3e} (bound 1e-12) {}",
        if inv { "PASS" } else { "FAIL" }
    );
    if dt_halving {
        let s = host.state();
        let mut conv = String::from("method,dt,diff_coarse,diff_fine,order\n");
        for m in [Method::Euler, Method::Rk4] {
            let r = convergence_order(&host, &s, o.dt, 1.0, m)?;
            let _ = writeln!(conv, "{:?},{},{},{},{}", m, r.dt, r.diff_coarse, r.diff_fine, r.order);
            let _ = writeln!(summary, "convergence order {:?} at dt {}: {:.3}", m, r.dt, r.order);
        }
        out.text("convergence.csv", "#", &conv)?;
    }
    for (tag, _, series) in &charts {
        out.svg(
            &format!("lyapunov_{tag}.svg"),
            &line_chart(&format!("Lyapunov descent ({tag})"), "t", "Λ", series),
        )?;
    }
    out.text("summary.txt", "#", &summary)?;
    Ok((summary, all_pass))
}

pub fn cmd_verify(seed: u64, faults: Faults, out_dir: Option<&Path>, hash: &str) -> Result<(String, bool), CliError> {
    let results = verify::run_all(seed, faults);
    let table = verify::table(&results);
    if let Some(dir) = out_dir {
        Out::new(dir, hash)?.text("verify.txt", "#", &table)?;
    }
    Ok((table, results.iter().all(|r| r.pass)))
}

/// Rounds, prunes and compacts a checkpointed network and writes it out.
pub fn cmd_export(ckpt_path: &Path, out_dir: &Path, hash: &str) -> Result<String, CliError> {
    let c = load_checkpoint(ckpt_path)?;
    let mut gates = c.state.gates.clone();
    finalize_round(&mut gates);
    prune_pass(&mut gates, c.hyper.theta_tol, c.state.epoch);
    let mut weights = c.state.weights.clone();
    apply_masks(&gates, &mut [&mut weights]);
    let (spec, weights, _) = compact(&c.spec, &weights, &gates)?;
    let out = Out::new(out_dir, hash)?;
    out.text("model.toml", "#", &spec.to_toml_string())?;
    #[derive(Serialize)]
    struct Body<'a> {
        weights: &'a gatecut::model::WeightSet,
    }
    out.json("weights.json", Body { weights: &weights })?;
    let after = analyze_static(&spec)?;
    let before = analyze_static(&c.spec)?;
    out.text("architecture.txt", "#", &architecture_report(&before, &after))?;
    Ok(format!("exported compacted network to {}", out_dir.display()))
}
