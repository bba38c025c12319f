use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gates::GateState;
use crate::model::{forward, Activation, BlockSpec, GateSample, NetworkSpec, SkipKind, Targets, Task, WeightSet};
use crate::numerics::{Matrix, Rng};

use super::Host;

fn d_inputs() -> usize {
    2
}
fn d_units() -> usize {
    2
}
fn d_outputs() -> usize {
    1
}
fn d_samples() -> usize {
    32
}
fn d_activation() -> Activation {
    Activation::Softplus
}
fn d_nu() -> f64 {
    1.0
}
fn d_beta() -> f64 {
    0.5
}
fn d_lambda() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.1
}

/// A single-block regression host: `inputs → units → outputs` with a dense skip,
/// block and unit gates, data from a random teacher of the same shape plus noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    #[serde(default = "d_inputs")]
    pub inputs: usize,
    #[serde(default = "d_units")]
    pub units: usize,
    #[serde(default = "d_outputs")]
    pub outputs: usize,
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_activation")]
    pub activation: Activation,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            inputs: d_inputs(),
            units: d_units(),
            outputs: d_outputs(),
            samples: d_samples(),
            activation: d_activation(),
            noise: d_noise(),
            nu: d_nu(),
            alpha: 0.0,
            beta: d_beta(),
            lambda: d_lambda(),
            seed: 0,
        }
    }
}

impl HostConfig {
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::new(
            Task::Regression,
            Activation::Identity,
            vec![BlockSpec::dense(self.inputs, self.units, self.outputs, self.activation, SkipKind::Dense)],
        )
    }

    pub fn build(&self) -> Result<Host> {
        let spec = self.spec();
        let root = Rng::new(self.seed);
        let teacher = WeightSet::init(&spec, &mut root.fork(1));
        let weights = WeightSet::init(&spec, &mut root.fork(2));
        let mut rng = root.fork(3);
        let x = Matrix::from_fn(self.samples, self.inputs, |_, _| rng.normal());
        let (mut y, _) = forward(&spec, &teacher, &GateSample::ones(&spec), &x)?;
        y.as_mut_slice().iter_mut().for_each(|v| *v += self.noise * rng.normal());
        let gates = GateState::new(&spec, 1.0)?;
        Host::new(
            spec,
            weights,
            gates,
            x,
            Targets::Values(y),
            0,
            self.nu,
            self.alpha,
            self.beta,
            self.lambda,
        )
    }
}
