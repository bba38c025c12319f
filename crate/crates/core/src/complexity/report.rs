use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::gates::GateState;
use crate::model::NetworkSpec;

use super::{derive_consts, j_f_block, j_p_block};

const RESNET50: &str = include_str!("../../assets/resnet50.toml");

/// The bundled ResNet50 descriptor.
pub fn resnet50_spec() -> NetworkSpec {
    NetworkSpec::from_toml_str(RESNET50, "resnet50.toml").expect("bundled descriptor parses")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub index: usize,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
    pub flops: f64,
    pub params: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StaticReport {
    pub blocks: Vec<BlockReport>,
    pub flops: f64,
    pub params: f64,
    pub layers: usize,
    pub warnings: Vec<String>,
}

/// Baseline complexity of every block of an architecture (all structures present).
pub fn analyze_static(spec: &NetworkSpec) -> Result<StaticReport> {
    let consts = derive_consts(spec)?;
    let ones = GateState::new(spec, 1.0)?;
    let blocks: Vec<BlockReport> = spec
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| BlockReport {
            index: l,
            input: b.input,
            hidden: b.hidden,
            output: b.output,
            layers: consts.blocks[l].depth + 1,
            flops: j_f_block(&ones, &consts, l),
            params: j_p_block(&ones, &consts, l),
        })
        .collect();
    let mut warnings = Vec::new();
    if blocks.is_empty() {
        warnings.push("network has no blocks; totals are zero".to_string());
    }
    Ok(StaticReport {
        flops: consts.flops,
        params: consts.params,
        layers: blocks.iter().map(|b| b.layers).sum(),
        blocks,
        warnings,
    })
}

impl StaticReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,in,hidden,out,layers,flops,params\n");
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                b.index, b.input, b.hidden, b.output, b.layers, b.flops, b.params
            );
        }
        let _ = writeln!(s, "total,,,,{},{},{}", self.layers, self.flops, self.params);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("FLOPS count one multiply-accumulate as 1; hidden units add 1 each (bias + activation).\n");
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>6} {:>6} {:>6} {:>16} {:>14}",
            "block", "in", "hidden", "out", "layers", "flops", "params"
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>6} {:>6} {:>6} {:>16} {:>14}",
                b.index, b.input, b.hidden, b.output, b.layers, b.flops, b.params
            );
        }
        let _ = writeln!(
            s,
            "total: {} layers, {:.4e} FLOPS, {:.4e} parameters",
            self.layers, self.flops, self.params
        );
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}
