use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateIndex, GateState};
use crate::model::{BlockSpec, BlockWeights, NetworkSpec, WeightSet};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Block,
    Unit,
    Input,
}

/// One removal, as written to the prune-event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub kind: StructureKind,
    pub block: usize,
    pub unit: Option<usize>,
    pub theta: f64,
}

impl fmt::Display for PruneEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            StructureKind::Block => "block",
            StructureKind::Unit => "unit",
            StructureKind::Input => "input",
        };
        let unit = self.unit.map_or("-".to_string(), |u| u.to_string());
        write!(f, "{},{},{},{},{}", self.epoch, kind, self.block, unit, self.theta)
    }
}

/// Kills the nonlinear path of block `l` together with its unit gates.
fn kill_block(gates: &mut GateState, l: usize) {
    gates.kill(GateIndex::Block(l));
    for i in 0..gates.blocks[l].theta1.len() {
        gates.kill(GateIndex::Unit(l, i));
    }
}

/// Removes every live structure whose θ is at or below `theta_tol`.
///
/// A block path also dies once all of its units are gone. Units dying together with
/// their block are not logged separately.
pub fn prune_pass(gates: &mut GateState, theta_tol: f64, epoch: usize) -> Vec<PruneEvent> {
    let mut events = Vec::new();
    for idx in gates.live_gates() {
        if !gates.is_alive(idx) {
            continue;
        }
        let theta = gates.get(idx);
        if theta > theta_tol {
            continue;
        }
        let (kind, block, unit) = match idx {
            GateIndex::Block(l) => (StructureKind::Block, l, None),
            GateIndex::Unit(l, i) => (StructureKind::Unit, l, Some(i)),
            GateIndex::Input(l, i) => (StructureKind::Input, l, Some(i)),
        };
        events.push(PruneEvent {
            epoch,
            kind,
            block,
            unit,
            theta,
        });
        match idx {
            GateIndex::Block(l) => kill_block(gates, l),
            other => gates.kill(other),
        }
    }
    for l in 0..gates.blocks.len() {
        let b = &gates.blocks[l];
        if b.b_alive && !b.unit_alive.is_empty() && b.unit_alive.iter().all(|a| !a) {
            events.push(PruneEvent {
                epoch,
                kind: StructureKind::Block,
                block: l,
                unit: None,
                theta: b.theta_b,
            });
            kill_block(gates, l);
        }
    }
    events
}

/// Sets every live gate to its nearest integer (ties to 1).
pub fn finalize_round(gates: &mut GateState) {
    for idx in gates.live_gates() {
        let t = gates.get(idx);
        gates.set(idx, if t >= 0.5 { 1.0 } else { 0.0 });
    }
}

/// Zeroes every weight attached to a dead structure, in `w` and any companion sets
/// (momentum buffers) that share its layout.
pub fn apply_masks(gates: &GateState, sets: &mut [&mut WeightSet]) {
    for set in sets.iter_mut() {
        for (l, g) in gates.blocks.iter().enumerate() {
            let dead_path = !g.b_alive;
            let bw = &mut set.blocks[l];
            if let (Some(w1), Some(w2)) = (bw.w1.as_mut(), bw.w2.as_mut()) {
                for (i, &alive) in g.unit_alive.iter().enumerate() {
                    if dead_path || !alive {
                        w1.set_row(i, 0.0);
                        w2.set_col(i, 0.0);
                    }
                }
            }
            for (i, &alive) in g.input_alive.iter().enumerate() {
                if alive {
                    continue;
                }
                if let Some(w1) = bw.w1.as_mut() {
                    w1.set_col(i, 0.0);
                }
                if let Some(w3) = bw.w3.as_mut() {
                    w3.set_col(i, 0.0);
                }
            }
        }
        // A dead input of block l is also a dead output row of block l − 1.
        for l in 1..gates.blocks.len() {
            for (i, &alive) in gates.blocks[l].input_alive.iter().enumerate() {
                if alive {
                    continue;
                }
                let prev = &mut set.blocks[l - 1];
                if let Some(w2) = prev.w2.as_mut() {
                    w2.set_row(i, 0.0);
                }
                if let Some(w3) = prev.w3.as_mut() {
                    w3.set_row(i, 0.0);
                }
            }
        }
    }
}

fn alive_idx(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

/// Physically removes dead units, inputs and block paths.
///
/// Returns the reduced architecture, weights and gates; surviving gates keep their θ.
pub fn compact(spec: &NetworkSpec, w: &WeightSet, gates: &GateState) -> Result<(NetworkSpec, WeightSet, GateState)> {
    let n = spec.blocks.len();
    let inputs: Vec<Vec<usize>> = gates.blocks.iter().map(|g| alive_idx(&g.input_alive)).collect();
    let mut blocks = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut new_gates = Vec::with_capacity(n);
    for l in 0..n {
        let b = &spec.blocks[l];
        let g = &gates.blocks[l];
        let bw = &w.blocks[l];
        let ins = &inputs[l];
        let outs: Vec<usize> = match inputs.get(l + 1) {
            Some(next) => next.clone(),
            None => (0..b.output).collect(),
        };
        if ins.is_empty() || outs.is_empty() {
            return Err(Error::spec(format!(
                "compaction would leave block {l} without {}, disconnecting input from output",
                if ins.is_empty() { "inputs" } else { "outputs" }
            )));
        }
        let path = b.nonlinear && g.b_alive;
        let units = if path { alive_idx(&g.unit_alive) } else { Vec::new() };
        let path = path && !units.is_empty();
        let mut ins_bias = ins.clone();
        ins_bias.push(b.input);

        let mut nb: BlockSpec = b.clone();
        nb.input = ins.len();
        nb.output = outs.len();
        nb.hidden = if path { units.len() } else { 0 };
        nb.nonlinear = path;
        if nb.gate_inputs == Some(true) && l > 0 && !spec.theta2_allowed(l) {
            nb.gate_inputs = None;
        }
        let nw = BlockWeights {
            w1: if path { bw.w1.as_ref().map(|m| m.select(&units, &ins_bias)) } else { None },
            w2: if path { bw.w2.as_ref().map(|m| m.select(&outs, &units)) } else { None },
            w3: bw.w3.as_ref().map(|m: &Matrix| m.select(&outs, &ins_bias)),
        };
        let mut ng = g.clone();
        ng.b_alive = path;
        ng.theta_b = if path { g.theta_b } else { 0.0 };
        ng.b_gated = g.b_gated && path;
        ng.theta1 = units.iter().map(|&i| g.theta1[i]).collect();
        ng.unit_alive = vec![true; units.len()];
        ng.units_gated = g.units_gated && path;
        ng.theta2 = ins.iter().map(|&i| g.theta2[i]).collect();
        ng.input_alive = vec![true; ins.len()];
        blocks.push(nb);
        weights.push(nw);
        new_gates.push(ng);
    }
    let new_spec = NetworkSpec {
        task: spec.task,
        output_activation: spec.output_activation,
        blocks,
    };
    new_spec.validate()?;
    Ok((new_spec, WeightSet { blocks: weights }, GateState { blocks: new_gates }))
}
