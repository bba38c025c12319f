//! Expected FLOPS and parameter counts under the gate distribution, the weighted
//! complexity index, its gradients and the automatic γ schedule.
//!
//! Counting convention: one multiply-accumulate is one FLOP; every hidden unit adds one
//! FLOP per output position (bias plus activation) and one parameter. Skip biases and
//! normalization layers are not counted.

mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateState;
use crate::model::{BlockGateGrad, GateGrads, NetworkSpec, SkipKind};

pub use report::{analyze_static, resnet50_spec, BlockReport, StaticReport};

/// FLOPS (`f`) and parameter (`p`) factors of one block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockConsts {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    /// Per-unit cost summed over the hidden layers.
    pub fa: f64,
    /// Hidden-to-hidden layers of multi-layer paths; multiplies `‖θ₁‖₁²`.
    pub fm: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub pa: f64,
    pub pm: f64,
    /// Number of hidden layers M of the nonlinear path (0 for skip-only blocks).
    pub depth: usize,
    pub gated_block: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityConsts {
    pub blocks: Vec<BlockConsts>,
    /// Baseline FLOPS `F`.
    pub flops: f64,
    /// Baseline parameter count `P`.
    pub params: f64,
    /// Widths `(in, out)` used for the boundary vectors.
    widths: Vec<(usize, usize)>,
}

/// Per-block γ values in log form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGamma {
    pub log_b: f64,
    pub log_1: f64,
    pub log_2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    /// FLOPS pruning ratio in percent.
    pub fpr: f64,
    /// Parameter pruning ratio in percent.
    pub ppr: f64,
    pub layers_left: usize,
    pub flops: f64,
    pub params: f64,
}

/// Norms entering one block's terms: `(θ_B, ‖θ₁‖₁, ‖θ₂ˡ‖₁, ‖θ₂ˡ⁺¹‖₁)`.
fn norms(gates: &GateState, consts: &ComplexityConsts, l: usize) -> (f64, f64, f64, f64) {
    let b = &gates.blocks[l];
    let n2_next = match gates.blocks.get(l + 1) {
        Some(next) => next.theta2.iter().sum(),
        None => consts.widths[l].1 as f64,
    };
    (b.theta_b, b.theta1.iter().sum(), b.theta2.iter().sum(), n2_next)
}

fn block_terms(tb: f64, n1: f64, n2: f64, n2n: f64, c: [f64; 5]) -> f64 {
    let [k1, k2, k3, ka, km] = c;
    tb * (k1 * n1 * n2 + ka * n1 + km * n1 * n1 + k2 * n1 * n2n) + k3 * n2 * n2n
}

impl BlockConsts {
    fn f(&self) -> [f64; 5] {
        [self.f1, self.f2, self.f3, self.fa, self.fm]
    }

    fn p(&self) -> [f64; 5] {
        [self.p1, self.p2, self.p3, self.pa, self.pm]
    }
}

impl ComplexityConsts {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Number of blocks carrying a θ_B gate, the normalizer of the layer term.
    pub fn gated_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.gated_block).count()
    }

    fn layer_norm(&self) -> f64 {
        self.gated_blocks().max(1) as f64
    }

    fn inv(v: f64) -> f64 {
        if v > 0.0 {
            1.0 / v
        } else {
            0.0
        }
    }
}

/// FLOPS and parameter factors of every block, plus the all-ones baselines.
pub fn derive_consts(spec: &NetworkSpec) -> Result<ComplexityConsts> {
    spec.validate()?;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (l, b) in spec.blocks.iter().enumerate() {
        let m = if b.nonlinear { b.repeat } else { 0 };
        let (area, kernels, skip_k2) = match &b.conv {
            Some(conv) => {
                let (h, w) = conv.out_h.zip(conv.out_w).ok_or_else(|| {
                    Error::spec(format!("block {l}: conv descriptor needs out_h and out_w"))
                })?;
                let ks: Vec<f64> = conv.kernels.iter().map(|&k| (k * k) as f64).collect();
                (h as f64 * w as f64, ks, (conv.skip_kernel * conv.skip_kernel) as f64)
            }
            None => (1.0, vec![1.0; if b.nonlinear { m + 1 } else { 0 }], 1.0),
        };
        let mut c = BlockConsts {
            depth: m,
            gated_block: b.has_theta_b(),
            ..Default::default()
        };
        if b.nonlinear {
            c.p1 = kernels[0];
            c.p2 = kernels[m];
            c.pm = kernels[1..m].iter().sum();
            c.pa = m as f64;
            c.f1 = area * c.p1;
            c.f2 = area * c.p2;
            c.fm = area * c.pm;
            c.fa = area * c.pa;
        }
        if b.skip == SkipKind::Dense {
            c.p3 = skip_k2;
            c.f3 = area * skip_k2;
        }
        blocks.push(c);
    }
    let mut consts = ComplexityConsts {
        blocks,
        flops: 0.0,
        params: 0.0,
        widths: spec.blocks.iter().map(|b| (b.input, b.output)).collect(),
    };
    let ones = GateState::new(spec, 1.0)?;
    consts.flops = (0..spec.blocks.len()).map(|l| j_f_block(&ones, &consts, l)).sum();
    consts.params = (0..spec.blocks.len()).map(|l| j_p_block(&ones, &consts, l)).sum();
    Ok(consts)
}

/// Expected FLOPS of block `l`.
pub fn j_f_block(gates: &GateState, consts: &ComplexityConsts, l: usize) -> f64 {
    let (tb, n1, n2, n2n) = norms(gates, consts, l);
    block_terms(tb, n1, n2, n2n, consts.blocks[l].f())
}

/// Expected active parameters of block `l`.
pub fn j_p_block(gates: &GateState, consts: &ComplexityConsts, l: usize) -> f64 {
    let (tb, n1, n2, n2n) = norms(gates, consts, l);
    block_terms(tb, n1, n2, n2n, consts.blocks[l].p())
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be non-negative, got {alpha}")));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("beta must be non-negative, got {beta}")));
    }
    Ok(())
}

/// Weighted complexity index `β ΣJ_F/F + (1−β) ΣJ_P/P + α Σθ_B/L`.
pub fn j_fp(gates: &GateState, consts: &ComplexityConsts, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    let mut jf = 0.0;
    let mut jp = 0.0;
    let mut tb = 0.0;
    for l in 0..consts.len() {
        jf += j_f_block(gates, consts, l);
        jp += j_p_block(gates, consts, l);
        if consts.blocks[l].gated_block {
            tb += gates.blocks[l].theta_b;
        }
    }
    Ok(beta * jf * ComplexityConsts::inv(consts.flops)
        + (1.0 - beta) * jp * ComplexityConsts::inv(consts.params)
        + alpha * tb / consts.layer_norm())
}

/// `∂J_FP/∂θ` for every gate entry, laid out like the gate state.
pub fn grad_jfp(gates: &GateState, consts: &ComplexityConsts, alpha: f64, beta: f64) -> Result<GateGrads> {
    check_weights(alpha, beta)?;
    let wf = beta * ComplexityConsts::inv(consts.flops);
    let wp = (1.0 - beta) * ComplexityConsts::inv(consts.params);
    let n = consts.len();
    let all: Vec<_> = (0..n).map(|l| norms(gates, consts, l)).collect();
    let mut out = Vec::with_capacity(n);
    for l in 0..n {
        let c = &consts.blocks[l];
        let (tb, n1, n2, n2n) = all[l];
        let mix = |f: f64, p: f64| wf * f + wp * p;
        let d_b = mix(
            c.f1 * n1 * n2 + c.fa * n1 + c.fm * n1 * n1 + c.f2 * n1 * n2n,
            c.p1 * n1 * n2 + c.pa * n1 + c.pm * n1 * n1 + c.p2 * n1 * n2n,
        ) + if c.gated_block { alpha / consts.layer_norm() } else { 0.0 };
        let d_1 = tb
            * mix(
                c.f1 * n2 + c.fa + 2.0 * c.fm * n1 + c.f2 * n2n,
                c.p1 * n2 + c.pa + 2.0 * c.pm * n1 + c.p2 * n2n,
            );
        let mut d_2 = mix(tb * c.f1 * n1 + c.f3 * n2n, tb * c.p1 * n1 + c.p3 * n2n);
        if l > 0 {
            let (tbp, n1p, n2p, _) = all[l - 1];
            let cp = &consts.blocks[l - 1];
            d_2 += mix(tbp * cp.f2 * n1p + cp.f3 * n2p, tbp * cp.p2 * n1p + cp.p3 * n2p);
        }
        out.push(BlockGateGrad {
            b: d_b,
            units: vec![d_1; gates.blocks[l].theta1.len()],
            inputs: vec![d_2; gates.blocks[l].theta2.len()],
        });
    }
    Ok(GateGrads { blocks: out })
}

/// Per-block γ values that make the statistical prior penalty equal `ν·J_FP`.
///
/// The layer term is split evenly over the gated blocks, so `log γ_B = −ναN/L`.
pub fn gamma_schedule(
    gates: &GateState,
    consts: &ComplexityConsts,
    nu: f64,
    alpha: f64,
    beta: f64,
    n: usize,
) -> Result<Vec<BlockGamma>> {
    check_weights(alpha, beta)?;
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::domain(format!("nu must be non-negative, got {nu}")));
    }
    if n == 0 {
        return Err(Error::domain("dataset size must be at least 1"));
    }
    if consts.blocks.iter().any(|b| b.fm != 0.0 || b.pm != 0.0) {
        return Err(Error::spec("gamma schedule needs single-hidden-layer blocks"));
    }
    let wf = beta * ComplexityConsts::inv(consts.flops);
    let wp = (1.0 - beta) * ComplexityConsts::inv(consts.params);
    let scale = -nu * n as f64;
    Ok((0..consts.len())
        .map(|l| {
            let c = &consts.blocks[l];
            let (tb, _, n2, n2n) = norms(gates, consts, l);
            BlockGamma {
                log_b: if c.gated_block { scale * alpha / consts.layer_norm() } else { 0.0 },
                log_1: scale
                    * tb
                    * (wf * (c.f1 * n2 + c.fa + c.f2 * n2n) + wp * (c.p1 * n2 + c.pa + c.p2 * n2n)),
                log_2: scale * (wf * c.f3 + wp * c.p3) * n2n,
            }
        })
        .collect())
}

/// Cross term `R = ν ∂²J_FP/∂θ_B∂θ₁ᵢ` of block `l` at the given input/output gate norms.
pub fn cross_term(consts: &ComplexityConsts, l: usize, n2: f64, n2_next: f64, nu: f64, beta: f64) -> f64 {
    let c = &consts.blocks[l];
    let wf = beta * ComplexityConsts::inv(consts.flops);
    let wp = (1.0 - beta) * ComplexityConsts::inv(consts.params);
    nu * (wf * (c.f1 * n2 + c.fa + c.f2 * n2_next) + wp * (c.p1 * n2 + c.pa + c.p2 * n2_next))
}

/// Lower bound `R_m = ν(f_a β/F + p_a (1−β)/P)` of block `l`, valid for `β ∈ [0, 1]`.
pub fn cross_term_floor(consts: &ComplexityConsts, l: usize, nu: f64, beta: f64) -> f64 {
    cross_term(consts, l, 0.0, 0.0, nu, beta)
}

/// Smallest cross term over all gated blocks and all corners of the `‖θ₂‖₁` box.
///
/// The cross term is affine in both norms, so the corners bound it. Values of `β`
/// above one make the parameter weight negative and can drive it below zero.
pub fn min_cross_term(consts: &ComplexityConsts, nu: f64, beta: f64) -> f64 {
    let mut min = f64::INFINITY;
    for l in 0..consts.len() {
        if consts.blocks[l].depth == 0 {
            continue;
        }
        let n2_max = consts.widths[l].0 as f64;
        let n2n_max = consts.widths[l].1 as f64;
        for n2 in [0.0, n2_max] {
            for n2n in [0.0, n2n_max] {
                min = min.min(cross_term(consts, l, n2, n2n, nu, beta));
            }
        }
    }
    min
}

/// Checks the regularizer weights before training: warns for `β > 1` and refuses
/// settings whose cross term is not strictly positive.
pub fn check_regularizer(consts: &ComplexityConsts, nu: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    if beta > 1.0 {
        log::warn!("beta = {beta} exceeds 1; the parameter term enters with negative weight");
    }
    let min = min_cross_term(consts, nu, beta);
    if nu > 0.0 && !(min > 0.0) {
        return Err(Error::config(format!(
            "beta = {beta}: minimum cross term {min:e} is not positive, gates would not be driven to zero"
        )));
    }
    Ok(min)
}

/// Pruning ratios of the structures still alive in `gates` relative to the baseline.
pub fn ratios(gates: &GateState, consts: &ComplexityConsts) -> Ratios {
    let mut alive = gates.clone();
    for b in &mut alive.blocks {
        let path = b.b_alive && (b.theta1.is_empty() || b.unit_alive.iter().any(|&a| a));
        b.theta_b = if path { 1.0 } else { 0.0 };
        for (t, &a) in b.theta1.iter_mut().zip(&b.unit_alive) {
            *t = if a { 1.0 } else { 0.0 };
        }
        for (t, &a) in b.theta2.iter_mut().zip(&b.input_alive) {
            *t = if a { 1.0 } else { 0.0 };
        }
    }
    let flops: f64 = (0..consts.len()).map(|l| j_f_block(&alive, consts, l)).sum();
    let params: f64 = (0..consts.len()).map(|l| j_p_block(&alive, consts, l)).sum();
    let layers_left = consts
        .blocks
        .iter()
        .zip(&alive.blocks)
        .map(|(c, b)| match (c.depth, b.theta_b > 0.0) {
            (0, _) => 1,
            (m, true) => m + 1,
            (_, false) => 0,
        })
        .sum();
    let pct = |now: f64, base: f64| if base > 0.0 { 100.0 * (1.0 - now / base) } else { 0.0 };
    Ratios {
        fpr: pct(flops, consts.flops),
        ppr: pct(params, consts.params),
        layers_left,
        flops,
        params,
    }
}
