//! Joint training of weights and gate parameters with epoch-end pruning.

mod config;
mod exact;
mod optim;
mod prune;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::complexity::{check_regularizer, derive_consts, grad_jfp, ratios, ComplexityConsts, Ratios};
use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::gates::GateState;
use crate::model::{
    correct_predictions, forward, loss, loss_and_grads, GateGrads, GateSample, NetworkSpec, Targets, Task, WeightSet,
};
use crate::numerics::{par_map, thread_count, Matrix, Rng};

pub use config::{Hyperparams, LrSchedule, ThetaOptimizer, WOptimizer};
pub use exact::{
    conditional_cost, expected_cost, theta_grad_exact, vertex_verify, Objective, VertexReport, EXACT_GATE_LIMIT,
    VERTEX_GATE_LIMIT,
};
pub use optim::{step_theta, step_w, AdamState};
pub use prune::{apply_masks, compact, finalize_round, prune_pass, PruneEvent, StructureKind};

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Rows per forward chunk during evaluation.
const EVAL_CHUNK: usize = 1024;
/// Random inputs used for the masked-versus-compacted comparison.
const EQUIVALENCE_INPUTS: usize = 100;

/// Straight-through θ-gradient: the sampled-gate gradient plus `ν ∂J_FP/∂θ`.
pub fn theta_grad_st(
    dxi: &GateGrads,
    gates: &GateState,
    consts: &ComplexityConsts,
    nu: f64,
    alpha: f64,
    beta: f64,
) -> Result<GateGrads> {
    let mut g = dxi.clone();
    if nu != 0.0 {
        g.add_scaled(&grad_jfp(gates, consts, alpha, beta)?, nu);
    }
    Ok(g)
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub weights: WeightSet,
    pub gates: GateState,
    pub w_buf: WeightSet,
    pub adam: AdamState,
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub batch_rng: Rng,
    pub gate_rng: Rng,
    /// Θ rounded and no longer trained.
    pub frozen: bool,
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub fpr: f64,
    pub ppr: f64,
    pub layers_left: usize,
    pub theta1_l1: f64,
    pub undecided: usize,
    pub live_gates: usize,
    pub pruned: usize,
    pub compact_max_diff: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,test_loss,test_acc,fpr,ppr,layers_left,\
theta1_l1,undecided,live_gates,pruned,compact_max_diff";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.train_acc),
            opt(self.test_loss),
            opt(self.test_acc),
            self.fpr,
            self.ppr,
            self.layers_left,
            self.theta1_l1,
            self.undecided,
            self.live_gates,
            self.pruned,
            self.compact_max_diff
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: NetworkSpec,
    pub hyper: Hyperparams,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<PruneEvent>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match c.check_version() {
            Err(Error::Checkpoint(m)) => Err(Error::Checkpoint(format!("{}: {m}", path.display()))),
            other => other.map(|_| c),
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Compacted deterministic network.
    pub spec: NetworkSpec,
    pub weights: WeightSet,
    pub gates: GateState,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<PruneEvent>,
    pub ratios: Ratios,
    /// Wall-clock seconds per epoch; kept out of the metrics so they stay reproducible.
    pub epoch_seconds: Vec<f64>,
    /// Final state before compaction.
    pub state: TrainState,
}

pub struct Trainer<'a> {
    pub spec: NetworkSpec,
    pub hyper: Hyperparams,
    pub consts: ComplexityConsts,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<PruneEvent>,
    pub epoch_seconds: Vec<f64>,
    data: &'a Dataset,
    threads: usize,
}

fn check_data(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.input_width() != spec.input_width() {
        return Err(Error::config(format!(
            "dataset has {} input features, network expects {}",
            data.input_width(),
            spec.input_width()
        )));
    }
    match (&data.targets, spec.task) {
        (Targets::Values(y), Task::Regression) if y.cols() == spec.output_width() => Ok(()),
        (Targets::Classes(_), Task::Classification) if data.classes.unwrap_or(0) <= spec.output_width() => Ok(()),
        _ => Err(Error::config(format!(
            "dataset targets ({:?}, {:?} classes) do not fit a {:?} network with {} outputs",
            data.task(),
            data.classes,
            spec.task,
            spec.output_width()
        ))),
    }
}

impl<'a> Trainer<'a> {
    pub fn new(spec: NetworkSpec, data: &'a Dataset, hyper: Hyperparams) -> Result<Self> {
        spec.check_trainable()?;
        hyper.validate()?;
        check_data(&spec, data)?;
        let consts = derive_consts(&spec)?;
        check_regularizer(&consts, hyper.nu, hyper.alpha, hyper.beta)?;
        let root = Rng::new(hyper.seed);
        let state = TrainState {
            weights: WeightSet::init(&spec, &mut root.fork(1)),
            gates: GateState::new(&spec, hyper.theta_init)?,
            w_buf: WeightSet::zeros(&spec),
            adam: AdamState::new(&spec),
            iteration: 0,
            epoch: 0,
            batch_rng: root.fork(2),
            gate_rng: root.fork(3),
            frozen: false,
        };
        Ok(Trainer {
            spec,
            hyper,
            consts,
            state,
            metrics: Vec::new(),
            events: Vec::new(),
            epoch_seconds: Vec::new(),
            data,
            threads: thread_count(),
        })
    }

    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let mut t = Trainer::new(ckpt.spec, data, ckpt.hyper)?;
        ckpt.state.weights.check_shapes(&t.spec)?;
        t.state = ckpt.state;
        t.metrics = ckpt.metrics;
        t.events = ckpt.events;
        Ok(t)
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            hyper: self.hyper.clone(),
            state: self.state.clone(),
            metrics: self.metrics.clone(),
            events: self.events.clone(),
        }
    }

    fn shard_count(&self) -> usize {
        let b = self.hyper.batch_size;
        let s = if self.hyper.shards > 0 { self.hyper.shards } else { b.div_ceil(32).min(8) };
        s.clamp(1, b)
    }

    /// Batch-mean loss and gradients, reduced over a fixed number of shards in fixed order.
    fn batch_grads(&self, x: &Matrix, t: &Targets, xi: &GateSample) -> Result<(f64, WeightSet, GateGrads)> {
        let shards = self.shard_count();
        if shards == 1 {
            return loss_and_grads(&self.spec, &self.state.weights, xi, x, t);
        }
        let n = x.rows();
        let bounds: Vec<(usize, usize)> = (0..shards).map(|s| (s * n / shards, (s + 1) * n / shards)).collect();
        let results = par_map(&bounds, self.threads, |&(lo, hi)| {
            let idx: Vec<usize> = (lo..hi).collect();
            let cols: Vec<usize> = (0..x.cols()).collect();
            loss_and_grads(&self.spec, &self.state.weights, xi, &x.select(&idx, &cols), &t.select(&idx))
        });
        let mut total = 0.0;
        let mut gw = WeightSet::zeros(&self.spec);
        let mut gg = GateGrads::zeros(&self.spec);
        for (r, &(lo, hi)) in results.into_iter().zip(&bounds) {
            let (l, w, g) = r?;
            let share = (hi - lo) as f64 / n as f64;
            total += share * l;
            for (a, b) in gw.blocks.iter_mut().flat_map(|b| b.matrices_mut()).zip(w.blocks.iter().flat_map(|b| b.matrices())) {
                for (p, q) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *p += share * q;
                }
            }
            gg.add_scaled(&g, share);
        }
        Ok((total, gw, gg))
    }

    /// One iteration: sample a batch and gates, then update weights and Θ. Nothing is
    /// committed when the loss or any update is non-finite.
    pub fn step(&mut self, lr: f64) -> Result<f64> {
        let epoch = self.state.epoch;
        let iteration = self.state.iteration;
        let diverged = |msg: String| Error::Divergence { epoch, iteration, msg };
        let mut batch_rng = self.state.batch_rng.clone();
        let mut gate_rng = self.state.gate_rng.clone();
        let idx = sample_batch(self.data, self.hyper.batch_size, &mut batch_rng)?;
        let xi = self.state.gates.sample(&mut gate_rng);
        let (x, t) = self.data.rows(&idx);
        let (l, gw, gg) = match self.batch_grads(&x, &t, &xi) {
            Ok(r) => r,
            Err(Error::NonFinite(m)) => return Err(diverged(m)),
            Err(e) => return Err(e),
        };
        if !l.is_finite() || !gw.is_finite() {
            return Err(diverged(format!("non-finite loss {l} or gradient")));
        }
        let mut weights = self.state.weights.clone();
        let mut w_buf = self.state.w_buf.clone();
        let w = &self.hyper.w_optimizer;
        step_w(&mut weights, &mut w_buf, &gw, self.hyper.lambda, lr, w.momentum).map_err(|e| diverged(e.to_string()))?;
        apply_masks(&self.state.gates, &mut [&mut weights, &mut w_buf]);
        if !self.state.frozen {
            let h = &self.hyper;
            let g = theta_grad_st(&gg, &self.state.gates, &self.consts, h.nu, h.alpha, h.beta)?;
            let mut gates = self.state.gates.clone();
            let mut adam = self.state.adam.clone();
            step_theta(&mut gates, &mut adam, &g, &h.theta_optimizer);
            if !gates.in_range() {
                return Err(diverged("gate parameters left [0, 1]".into()));
            }
            self.state.gates = gates;
            self.state.adam = adam;
        }
        self.state.weights = weights;
        self.state.w_buf = w_buf;
        self.state.batch_rng = batch_rng;
        self.state.gate_rng = gate_rng;
        self.state.iteration += 1;
        Ok(l)
    }

    /// Loss and correct-prediction count of the deterministic network on `rows`.
    fn evaluate(&self, spec: &NetworkSpec, w: &WeightSet, xi: &GateSample, rows: &[usize]) -> Result<(f64, Option<usize>)> {
        let chunks: Vec<&[usize]> = rows.chunks(EVAL_CHUNK).collect();
        let parts = par_map(&chunks, self.threads, |idx| -> Result<(f64, Option<usize>)> {
            let (x, t) = self.data.rows(idx);
            let (pred, _) = forward(spec, w, xi, &x)?;
            let correct = match &t {
                Targets::Classes(c) => Some(correct_predictions(&pred, c)),
                Targets::Values(_) => None,
            };
            Ok((loss(&pred, &t)? * idx.len() as f64, correct))
        });
        let mut total = 0.0;
        let mut correct = None;
        for p in parts {
            let (l, c) = p?;
            total += l;
            if let Some(c) = c {
                correct = Some(correct.unwrap_or(0) + c);
            }
        }
        Ok((total / rows.len().max(1) as f64, correct))
    }

    /// Largest output difference between the masked and the compacted deterministic network.
    pub fn compaction_gap(&self, seed_label: u64) -> Result<f64> {
        let s = &self.state;
        let (cs, cw, cg) = compact(&self.spec, &s.weights, &s.gates)?;
        let mut rng = Rng::new(self.hyper.seed).fork(1000 + seed_label);
        let x = Matrix::from_fn(EQUIVALENCE_INPUTS, self.spec.input_width(), |_, _| rng.normal());
        let (a, _) = forward(&self.spec, &s.weights, &s.gates.rounded(), &x)?;
        let (b, _) = forward(&cs, &cw, &cg.rounded(), &x)?;
        Ok(a.max_abs_diff(&b))
    }

    /// Runs one epoch: optional rounding, `⌈N/B⌉` iterations, pruning, metrics.
    pub fn run_epoch(&mut self) -> Result<&MetricsRecord> {
        let started = Instant::now();
        let e = self.state.epoch;
        if !self.state.frozen && self.hyper.finalize_at() == Some(e) {
            finalize_round(&mut self.state.gates);
            self.state.frozen = true;
        }
        let w = &self.hyper.w_optimizer;
        let lr = w.schedule.rate(w.lr, e, self.hyper.epochs);
        let iters = self.data.train.len().div_ceil(self.hyper.batch_size);
        let mut loss_sum = 0.0;
        for _ in 0..iters {
            loss_sum += self.step(lr)?;
        }
        let events = prune_pass(&mut self.state.gates, self.hyper.theta_tol, e + 1);
        {
            let s = &mut self.state;
            apply_masks(&s.gates, &mut [&mut s.weights, &mut s.w_buf]);
        }
        for ev in &events {
            log::debug!("pruned {ev}");
        }
        let pruned = events.len();
        self.events.extend(events);
        self.state.epoch += 1;

        let s = &self.state;
        let xi = s.gates.rounded();
        let limit = self.hyper.eval_train_limit.min(self.data.train.len());
        let (_, train_correct) = self.evaluate(&self.spec, &s.weights, &xi, &self.data.train[..limit])?;
        let (test_loss, test_correct) = if self.data.test.is_empty() {
            (None, None)
        } else {
            let (l, c) = self.evaluate(&self.spec, &s.weights, &xi, &self.data.test)?;
            (Some(l), c)
        };
        let r = ratios(&s.gates, &self.consts);
        let live = s.gates.live_gates();
        let tol = self.hyper.theta_tol;
        let record = MetricsRecord {
            epoch: e + 1,
            lr,
            train_loss: loss_sum / iters as f64,
            train_acc: train_correct.map(|c| c as f64 / limit.max(1) as f64),
            test_loss,
            test_acc: test_correct.map(|c| c as f64 / self.data.test.len() as f64),
            fpr: r.fpr,
            ppr: r.ppr,
            layers_left: r.layers_left,
            theta1_l1: s.gates.blocks.iter().filter(|b| b.units_gated).map(|b| b.theta1.iter().sum::<f64>()).sum(),
            undecided: live.iter().filter(|&&i| s.gates.get(i) > tol && s.gates.get(i) < 1.0 - tol).count(),
            live_gates: live.len(),
            pruned,
            compact_max_diff: self.compaction_gap(e as u64)?,
        };
        log::info!(
            "epoch {}: loss {:.5} test acc {} fPR {:.2}% pPR {:.2}% layers {}",
            record.epoch,
            record.train_loss,
            record.test_acc.map_or("-".into(), |a| format!("{:.4}", a)),
            record.fpr,
            record.ppr,
            record.layers_left
        );
        self.metrics.push(record);
        self.epoch_seconds.push(started.elapsed().as_secs_f64());
        Ok(self.metrics.last().expect("record just pushed"))
    }

    /// Runs the remaining epochs and returns the compacted deterministic network.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.state.epoch < self.hyper.epochs {
            self.run_epoch()?;
        }
        self.finish()
    }

    /// Rounds whatever is still undecided, prunes, and compacts.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        let mut gates = self.state.gates.clone();
        finalize_round(&mut gates);
        let events = prune_pass(&mut gates, self.hyper.theta_tol, self.state.epoch);
        self.events.extend(events);
        let mut weights = self.state.weights.clone();
        apply_masks(&gates, &mut [&mut weights]);
        let final_ratios = ratios(&gates, &self.consts);
        let (spec, weights, gates) = compact(&self.spec, &weights, &gates)?;
        Ok(TrainOutcome {
            spec,
            weights,
            gates,
            metrics: self.metrics,
            events: self.events,
            ratios: final_ratios,
            epoch_seconds: self.epoch_seconds,
            state: self.state,
        })
    }
}

/// Trains from scratch.
pub fn train(spec: NetworkSpec, data: &Dataset, hyper: Hyperparams) -> Result<TrainOutcome> {
    Trainer::new(spec, data, hyper)?.run()
}

/// Metrics as CSV text (header plus one row per epoch).
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(MetricsRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
