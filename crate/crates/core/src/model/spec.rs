//! Architecture description and its TOML file format.
//!
//! ```toml
//! task = "regression"            # or "classification"
//! output_activation = "identity"
//!
//! [[block]]
//! in = 4
//! hidden = 3
//! out = 5
//! activation = "relu"            # relu | tanh | softplus | identity
//! input_activation = "identity"  # h applied to the block input
//! skip = "dense"                 # dense | identity | pool
//! repeat = 1                     # M, descriptor only beyond 1
//! nonlinear = true               # false: skip path only (output/stem layers)
//! gate_block = true              # θ_B
//! gate_units = true              # θ₁
//! gate_inputs = true             # θ₂; omitted = on wherever allowed
//!
//! [block.conv]                   # optional: static complexity descriptor
//! out_h = 56
//! out_w = 56
//! kernels = [1, 3, 1]            # one per weight layer of the nonlinear path (M + 1)
//! skip_kernel = 1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `ln(1 + eˣ) − ln 2`, shifted so that `a(0) = 0`.
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                let sp = if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                };
                sp - std::f64::consts::LN_2
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipKind {
    /// Trainable `W₃` with bias.
    Dense,
    /// Fixed identity, requires `in == out`.
    Identity,
    /// Pooling/padding shortcut; complexity descriptor only.
    Pool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Convolution geometry for static complexity accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernels: Vec<usize>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub skip_kernel: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn yes() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

fn relu() -> Activation {
    Activation::Relu
}

fn identity() -> Activation {
    Activation::Identity
}

fn is_identity(a: &Activation) -> bool {
    *a == Activation::Identity
}

fn dense() -> SkipKind {
    SkipKind::Dense
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    #[serde(rename = "in")]
    pub input: usize,
    #[serde(default)]
    pub hidden: usize,
    #[serde(rename = "out")]
    pub output: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default = "identity", skip_serializing_if = "is_identity")]
    pub input_activation: Activation,
    #[serde(default = "dense")]
    pub skip: SkipKind,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub nonlinear: bool,
    #[serde(default = "yes")]
    pub gate_block: bool,
    #[serde(default = "yes")]
    pub gate_units: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_inputs: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvDescriptor>,
}

impl BlockSpec {
    /// Fully gated dense residual block.
    pub fn dense(input: usize, hidden: usize, output: usize, activation: Activation, skip: SkipKind) -> Self {
        BlockSpec {
            input,
            hidden,
            output,
            repeat: 1,
            activation,
            input_activation: Activation::Identity,
            skip,
            nonlinear: true,
            gate_block: true,
            gate_units: true,
            gate_inputs: None,
            conv: None,
        }
    }

    /// Block without a nonlinear path: `z⁺ = W₃ z̄ + b₃`.
    pub fn linear(input: usize, output: usize) -> Self {
        BlockSpec {
            input,
            hidden: 0,
            output,
            repeat: 1,
            activation: Activation::Identity,
            input_activation: Activation::Identity,
            skip: SkipKind::Dense,
            nonlinear: false,
            gate_block: false,
            gate_units: false,
            gate_inputs: None,
            conv: None,
        }
    }

    pub fn with_input_activation(mut self, h: Activation) -> Self {
        self.input_activation = h;
        self
    }

    pub fn with_gates(mut self, block: bool, units: bool, inputs: Option<bool>) -> Self {
        self.gate_block = block;
        self.gate_units = units;
        self.gate_inputs = inputs;
        self
    }

    pub fn has_theta_b(&self) -> bool {
        self.nonlinear && self.gate_block
    }

    pub fn has_theta1(&self) -> bool {
        self.nonlinear && self.gate_units
    }

    pub fn has_dense_skip(&self) -> bool {
        self.skip == SkipKind::Dense
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub task: Task,
    #[serde(default = "identity")]
    pub output_activation: Activation,
    #[serde(default, rename = "block")]
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    pub fn new(task: Task, output_activation: Activation, blocks: Vec<BlockSpec>) -> Self {
        NetworkSpec {
            task,
            output_activation,
            blocks,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.input)
    }

    pub fn output_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.output)
    }

    /// Whether θ₂ of block `l` may be gated: not the network input, and both the fan-out
    /// skip (`W₃ˡ`) and the fan-in skip (`W₃ˡ⁻¹`) are trainable so the unit can be removed
    /// from both sides.
    pub fn theta2_allowed(&self, l: usize) -> bool {
        l > 0 && self.blocks[l].has_dense_skip() && self.blocks[l - 1].has_dense_skip()
    }

    pub fn has_theta2(&self, l: usize) -> bool {
        self.theta2_allowed(l) && self.blocks[l].gate_inputs.unwrap_or(true)
    }

    /// Structural checks shared by the analyzer and the trainer.
    pub fn validate(&self) -> Result<()> {
        for (l, b) in self.blocks.iter().enumerate() {
            if b.input == 0 || b.output == 0 {
                return Err(Error::spec(format!("block {l}: widths must be at least 1")));
            }
            if b.repeat == 0 {
                return Err(Error::spec(format!("block {l}: repeat must be at least 1")));
            }
            if b.nonlinear && b.hidden == 0 {
                return Err(Error::spec(format!("block {l}: nonlinear path needs hidden >= 1")));
            }
            if !b.nonlinear && b.hidden != 0 {
                return Err(Error::spec(format!("block {l}: skip-only block must have hidden = 0")));
            }
            if b.skip == SkipKind::Identity && b.input != b.output {
                return Err(Error::spec(format!(
                    "block {l}: identity skip needs in == out, got {} -> {}",
                    b.input, b.output
                )));
            }
            if l > 0 && self.blocks[l - 1].output != b.input {
                return Err(Error::spec(format!(
                    "block {l}: input width {} does not match previous output {}",
                    b.input,
                    self.blocks[l - 1].output
                )));
            }
            if b.gate_inputs == Some(true) && !self.theta2_allowed(l) {
                return Err(Error::spec(format!(
                    "block {l}: input gates need dense skips on this and the previous block \
                     and are never placed on the network input"
                )));
            }
            if let Some(conv) = &b.conv {
                let layers = if b.nonlinear { b.repeat + 1 } else { 0 };
                if conv.kernels.len() != layers {
                    return Err(Error::spec(format!(
                        "block {l}: conv descriptor lists {} kernels, expected {layers}",
                        conv.kernels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Extra restrictions of the training engine.
    pub fn check_trainable(&self) -> Result<()> {
        self.validate()?;
        if self.blocks.is_empty() {
            return Err(Error::spec("network has no blocks"));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if b.repeat != 1 {
                return Err(Error::spec(format!(
                    "block {l}: repeat = {} is supported by the complexity analyzer only; training requires repeat = 1",
                    b.repeat
                )));
            }
            if b.conv.is_some() {
                return Err(Error::spec(format!("block {l}: convolutional blocks are descriptor-only")));
            }
            if b.skip == SkipKind::Pool {
                return Err(Error::spec(format!("block {l}: pooling skips are descriptor-only")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        spec.validate().map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }
}

/// 1-based line containing byte `offset`.
pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    #[test]
    fn parses_minimal_file() {
        let text = r#"
task = "regression"

[[block]]
in = 4
hidden = 3
out = 5
"#;
        let spec = NetworkSpec::from_toml_str(text, "t.toml").unwrap();
        assert_eq!(spec.blocks[0].activation, Activation::Relu);
        assert_eq!(spec.blocks[0].skip, SkipKind::Dense);
        assert!(spec.blocks[0].has_theta_b());
        assert!(!spec.has_theta2(0));
    }

    #[test]
    fn parse_error_names_line() {
        let text = "task = \"regression\"\n\n[[block]]\nin = 4\nhidden = 3\nout = 5\nbogus = 1\n";
        match NetworkSpec::from_toml_str(text, "t.toml") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 7, "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_broken_chain_and_identity_width() {
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 3, 4, Activation::Relu, SkipKind::Dense),
                BlockSpec::dense(3, 3, 3, Activation::Relu, SkipKind::Identity),
            ],
        );
        assert!(spec.validate().is_err());
        let spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(2, 3, 4, Activation::Relu, SkipKind::Identity)],
        );
        assert!(spec.validate().is_err());
    }

    #[test]
    fn input_gates_need_dense_skips() {
        let mut spec = NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![
                BlockSpec::dense(2, 3, 2, Activation::Relu, SkipKind::Identity),
                BlockSpec::dense(2, 3, 2, Activation::Relu, SkipKind::Dense),
            ],
        );
        assert!(!spec.has_theta2(1));
        spec.blocks[1].gate_inputs = Some(true);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn repeat_rejected_by_trainer_only() {
        let mut b = BlockSpec::dense(4, 4, 4, Activation::Relu, SkipKind::Identity);
        b.repeat = 2;
        let spec = NetworkSpec::new(Task::Regression, Activation::Identity, vec![b]);
        assert!(spec.validate().is_ok());
        let err = spec.check_trainable().unwrap_err().to_string();
        assert!(err.contains("repeat"), "{err}");
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Softplus] {
            for &x in &[-3.0, -0.7, 0.4, 2.5, 40.0, -40.0] {
                let g = finite_diff_grad(|v| act.apply(v[0]), &[x], 1e-6).unwrap()[0];
                assert!((g - act.derivative(x)).abs() < 1e-6, "{act:?} at {x}");
            }
            assert_eq!(act.apply(0.0), 0.0, "{act:?} must vanish at 0");
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert!((Activation::Softplus.apply(800.0) - (800.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((Activation::Softplus.apply(-800.0) + std::f64::consts::LN_2).abs() < 1e-12);
    }

    mod roundtrip {
        use super::*;
        use proptest::prelude::*;

        fn act() -> impl Strategy<Value = Activation> {
            prop_oneof![
                Just(Activation::Identity),
                Just(Activation::Relu),
                Just(Activation::Tanh),
                Just(Activation::Softplus)
            ]
        }

        fn network() -> impl Strategy<Value = NetworkSpec> {
            (1usize..5, 1usize..6, act(), any::<bool>())
                .prop_flat_map(|(n, width, out_act, cls)| {
                    let blocks = proptest::collection::vec(
                        (0usize..5, act(), act(), any::<bool>(), any::<bool>(), any::<bool>(), 0u8..3),
                        n,
                    );
                    (Just(width), Just(out_act), Just(cls), blocks)
                })
                .prop_map(|(width, out_act, cls, raw)| {
                    let n = raw.len();
                    let mut blocks: Vec<BlockSpec> = raw
                        .into_iter()
                        .map(|(hidden, a, h, dense_skip, gb, gu, gi)| {
                            let mut b = if hidden == 0 {
                                BlockSpec::linear(width, width)
                            } else {
                                BlockSpec::dense(
                                    width,
                                    hidden,
                                    width,
                                    a,
                                    if dense_skip { SkipKind::Dense } else { SkipKind::Identity },
                                )
                            };
                            b.input_activation = h;
                            b.gate_block = gb;
                            b.gate_units = gu;
                            b.gate_inputs = match gi {
                                0 => None,
                                1 => Some(false),
                                _ => Some(true),
                            };
                            b
                        })
                        .collect();
                    for l in 0..n {
                        if blocks[l].gate_inputs == Some(true) {
                            let ok = l > 0
                                && blocks[l].skip == SkipKind::Dense
                                && blocks[l - 1].skip == SkipKind::Dense;
                            if !ok {
                                blocks[l].gate_inputs = None;
                            }
                        }
                    }
                    let task = if cls { Task::Classification } else { Task::Regression };
                    NetworkSpec::new(task, out_act, blocks)
                })
        }

        proptest! {
            #[test]
            fn architecture_file_roundtrips(spec in network()) {
                spec.validate().unwrap();
                let text = spec.to_toml_string();
                let back = NetworkSpec::from_toml_str(&text, "roundtrip").unwrap();
                prop_assert_eq!(back, spec);
            }
        }
    }
}
