//! Staggered two-design ansatz and its exact gradients.
//!
//! The circuit alternates an even sub-layer of nearest-neighbour pairs
//! (0,1), (2,3), ... with an odd sub-layer (1,2), (3,4), ...; each pair
//! contributes one CZ followed by one parameterized RY per pair member.
//! There is no initial rotation column, which is what makes the parameter
//! count `n_layers * (2*n_qubits - 2)` (28 for the 8-qubit, 2-layer
//! instance).
//!
//! The forward pass embeds a waveform, runs the program, measures all
//! basis-state probabilities and returns the first `feature_len` of them
//! multiplied by `scale`. Gradients of any linear functional of the
//! feature vector are computed two independent ways: the parameter-shift
//! rule (two full circuit evaluations per angle) and a reverse adjoint
//! sweep (three passes over the state total). Both are exact for this
//! gate set and are required to agree to 1e-9.

use crate::rng::seeded_rng;
use crate::statevector::{QubitIndex, StateError, Statevector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VqcError {
    #[error("qubit count {0} is odd; the staggered ansatz needs an even register")]
    OddQubitCount(usize),
    #[error("qubit count {0} is below the two-qubit minimum")]
    TooFewQubits(usize),
    #[error("layer count must be at least 1")]
    NonPositiveLayers,
    #[error("feature length {len} exceeds register dimension {dim}")]
    FeatureLenExceedsRegister { len: usize, dim: usize },
    #[error("parameter vector has {got} entries, layout expects {expected}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("upstream gradient has {got} entries, feature vector has {expected}")]
    UpstreamLenMismatch { expected: usize, got: usize },
    #[error(transparent)]
    State(#[from] StateError),
}

/// One gate of the ansatz program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateSpec {
    Cz { a: QubitIndex, b: QubitIndex },
    Ry { wire: QubitIndex, param_index: usize },
}

/// Ordered gate program with parameter indexing in program order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnsatzLayout {
    n_qubits: usize,
    n_layers: usize,
    gates: Vec<GateSpec>,
    param_count: usize,
}

impl AnsatzLayout {
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn gates(&self) -> &[GateSpec] {
        &self.gates
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Register dimension `2^n_qubits`.
    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }
}

/// Builds the staggered layout. Deterministic for given inputs.
pub fn build_layout(n_qubits: usize, n_layers: usize) -> Result<AnsatzLayout, VqcError> {
    if n_qubits < 2 {
        return Err(VqcError::TooFewQubits(n_qubits));
    }
    if n_qubits % 2 != 0 {
        return Err(VqcError::OddQubitCount(n_qubits));
    }
    if n_layers == 0 {
        return Err(VqcError::NonPositiveLayers);
    }
    let mut gates = Vec::new();
    let mut param = 0usize;
    let mut pair_block = |gates: &mut Vec<GateSpec>, a: usize, b: usize| {
        gates.push(GateSpec::Cz {
            a: QubitIndex(a),
            b: QubitIndex(b),
        });
        gates.push(GateSpec::Ry {
            wire: QubitIndex(a),
            param_index: param,
        });
        gates.push(GateSpec::Ry {
            wire: QubitIndex(b),
            param_index: param + 1,
        });
        param += 2;
    };
    for _ in 0..n_layers {
        let mut a = 0;
        while a + 1 < n_qubits {
            pair_block(&mut gates, a, a + 1);
            a += 2;
        }
        let mut a = 1;
        while a + 1 < n_qubits {
            pair_block(&mut gates, a, a + 1);
            a += 2;
        }
    }
    debug_assert_eq!(param, n_layers * (2 * n_qubits - 2));
    Ok(AnsatzLayout {
        n_qubits,
        n_layers,
        gates,
        param_count: param,
    })
}

/// Trainable rotation angles, one per RY gate of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqcParams {
    pub thetas: Vec<f64>,
}

impl VqcParams {
    pub fn zeros(layout: &AnsatzLayout) -> Self {
        VqcParams {
            thetas: vec![0.0; layout.param_count()],
        }
    }

    /// Independent uniform angles on `[-pi, pi)` from a seeded stream.
    pub fn random(layout: &AnsatzLayout, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &[0x7e7a]);
        VqcParams {
            thetas: (0..layout.param_count())
                .map(|_| rng.gen_range(-PI..PI))
                .collect(),
        }
    }

    fn check(&self, layout: &AnsatzLayout) -> Result<(), VqcError> {
        if self.thetas.len() != layout.param_count() {
            return Err(VqcError::ParamCountMismatch {
                expected: layout.param_count(),
                got: self.thetas.len(),
            });
        }
        Ok(())
    }
}

/// How measured probabilities become classifier features: keep the first
/// `feature_len` entries and multiply by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature_len: usize,
    pub scale: f64,
}

impl FeatureSpec {
    /// 196 features scaled by the register dimension, capped at the
    /// dimension for small registers.
    pub fn default_for(layout: &AnsatzLayout) -> Self {
        FeatureSpec {
            feature_len: 196.min(layout.dim()),
            scale: layout.dim() as f64,
        }
    }

    fn check(&self, layout: &AnsatzLayout) -> Result<(), VqcError> {
        if self.feature_len > layout.dim() {
            return Err(VqcError::FeatureLenExceedsRegister {
                len: self.feature_len,
                dim: layout.dim(),
            });
        }
        Ok(())
    }
}

/// Nonnegative feature values; `sum(values) / scale <= 1` because the
/// truncated probabilities cannot exceed unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub scale: f64,
}

fn run_circuit(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
) -> Result<Statevector, VqcError> {
    let mut state = Statevector::embed_amplitude(waveform, layout.n_qubits())?;
    for gate in layout.gates() {
        match *gate {
            GateSpec::Cz { a, b } => state.apply_cz(a, b)?,
            GateSpec::Ry { wire, param_index } => {
                state.apply_ry(wire, params.thetas[param_index])?
            }
        }
    }
    Ok(state)
}

/// Embeds `waveform`, runs the ansatz, and measures the feature vector.
pub fn vqc_forward(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
) -> Result<FeatureVector, VqcError> {
    params.check(layout)?;
    feature.check(layout)?;
    let state = run_circuit(layout, params, waveform)?;
    let probs = state.measure_probabilities();
    let values = probs[..feature.feature_len]
        .iter()
        .map(|p| p * feature.scale)
        .collect();
    Ok(FeatureVector {
        values,
        scale: feature.scale,
    })
}

fn check_upstream(feature: &FeatureSpec, upstream: &[f64]) -> Result<(), VqcError> {
    if upstream.len() != feature.feature_len {
        return Err(VqcError::UpstreamLenMismatch {
            expected: feature.feature_len,
            got: upstream.len(),
        });
    }
    Ok(())
}

fn weighted_sum(values: &[f64], upstream: &[f64]) -> f64 {
    values.iter().zip(upstream).map(|(v, u)| v * u).sum()
}

/// Parameter-shift gradient of `sum_j upstream[j] * values[j]` with respect
/// to every angle, along with the number of gate applications it spent.
pub fn grad_parameter_shift_counted(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
    upstream: &[f64],
) -> Result<(Vec<f64>, u64), VqcError> {
    params.check(layout)?;
    feature.check(layout)?;
    check_upstream(feature, upstream)?;
    let mut shifted = params.clone();
    let mut grad = vec![0.0; layout.param_count()];
    let mut ops = 0u64;
    for k in 0..layout.param_count() {
        let original = shifted.thetas[k];
        shifted.thetas[k] = original + FRAC_PI_2;
        let state_plus = run_circuit(layout, &shifted, waveform)?;
        ops += state_plus.gate_ops();
        let plus = weighted_sum(
            &state_plus.measure_probabilities()[..feature.feature_len],
            upstream,
        );
        shifted.thetas[k] = original - FRAC_PI_2;
        let state_minus = run_circuit(layout, &shifted, waveform)?;
        ops += state_minus.gate_ops();
        let minus = weighted_sum(
            &state_minus.measure_probabilities()[..feature.feature_len],
            upstream,
        );
        shifted.thetas[k] = original;
        grad[k] = feature.scale * (plus - minus) / 2.0;
    }
    Ok((grad, ops))
}

/// See [`grad_parameter_shift_counted`]; drops the gate-application count.
pub fn grad_parameter_shift(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
    upstream: &[f64],
) -> Result<Vec<f64>, VqcError> {
    grad_parameter_shift_counted(layout, params, waveform, feature, upstream).map(|(g, _)| g)
}

/// Adjoint-mode gradient: one forward pass, then a reverse sweep that
/// un-applies each gate while propagating the cost vector
/// `lambda = D psi` (D diagonal with `scale * upstream` on the kept
/// features). For each RY it accumulates `2 Re <lambda | dG/dtheta | psi>`.
pub fn grad_adjoint_counted(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
    upstream: &[f64],
) -> Result<(Vec<f64>, u64), VqcError> {
    params.check(layout)?;
    feature.check(layout)?;
    check_upstream(feature, upstream)?;

    let mut psi = run_circuit(layout, params, waveform)?;
    let mut lambda_amps = psi.amplitudes().to_vec();
    for (j, amp) in lambda_amps.iter_mut().enumerate() {
        if j < feature.feature_len {
            *amp *= feature.scale * upstream[j];
        } else {
            *amp *= 0.0;
        }
    }
    let mut lambda = Statevector::from_raw(layout.n_qubits(), lambda_amps);

    let mut grad = vec![0.0; layout.param_count()];
    let mut scratch_ops = 0u64;
    for gate in layout.gates().iter().rev() {
        match *gate {
            GateSpec::Cz { a, b } => {
                psi.apply_cz(a, b)?;
                lambda.apply_cz(a, b)?;
            }
            GateSpec::Ry { wire, param_index } => {
                let theta = params.thetas[param_index];
                psi.apply_ry(wire, -theta)?;
                let mut scratch = psi.clone();
                scratch.apply_ry_deriv(wire, theta)?;
                scratch_ops += 1;
                let dot: f64 = lambda
                    .amplitudes()
                    .iter()
                    .zip(scratch.amplitudes())
                    .map(|(l, t)| (l.conj() * t).re)
                    .sum();
                grad[param_index] = 2.0 * dot;
                lambda.apply_ry(wire, -theta)?;
            }
        }
    }
    let ops = psi.gate_ops() + lambda.gate_ops() + scratch_ops;
    Ok((grad, ops))
}

/// See [`grad_adjoint_counted`]; drops the gate-application count.
pub fn grad_adjoint(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
    upstream: &[f64],
) -> Result<Vec<f64>, VqcError> {
    grad_adjoint_counted(layout, params, waveform, feature, upstream).map(|(g, _)| g)
}

/// Central finite differences of the same weighted sum; the independent
/// oracle both analytic routes are checked against.
pub fn grad_finite_difference(
    layout: &AnsatzLayout,
    params: &VqcParams,
    waveform: &[f64],
    feature: &FeatureSpec,
    upstream: &[f64],
    step: f64,
) -> Result<Vec<f64>, VqcError> {
    params.check(layout)?;
    feature.check(layout)?;
    check_upstream(feature, upstream)?;
    let mut shifted = params.clone();
    let mut grad = vec![0.0; layout.param_count()];
    for k in 0..layout.param_count() {
        let original = shifted.thetas[k];
        shifted.thetas[k] = original + step;
        let plus = weighted_sum(
            &vqc_forward(layout, &shifted, waveform, feature)?.values,
            upstream,
        );
        shifted.thetas[k] = original - step;
        let minus = weighted_sum(
            &vqc_forward(layout, &shifted, waveform, feature)?.values,
            upstream,
        );
        shifted.thetas[k] = original;
        grad[k] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Outcome of the gradient agreement suite over random circuit instances.
#[derive(Debug, Clone)]
pub struct GradAgreementReport {
    pub instances: usize,
    pub max_shift_vs_adjoint: f64,
    pub max_analytic_vs_fd: f64,
    pub shift_adjoint_tol: f64,
    pub fd_tol: f64,
}

impl GradAgreementReport {
    pub fn passed(&self) -> bool {
        self.max_shift_vs_adjoint <= self.shift_adjoint_tol && self.max_analytic_vs_fd <= self.fd_tol
    }
}

impl std::fmt::Display for GradAgreementReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradient agreement over {} random instances:", self.instances)?;
        writeln!(
            f,
            "  parameter-shift vs adjoint : max |diff| = {:.3e} (tol {:.0e})",
            self.max_shift_vs_adjoint, self.shift_adjoint_tol
        )?;
        write!(
            f,
            "  analytic vs finite diff    : max |diff| = {:.3e} (tol {:.0e})",
            self.max_analytic_vs_fd, self.fd_tol
        )
    }
}

/// Runs `instances` random (layout, angles, waveform, upstream) cases with
/// 2..=6 qubits and compares the two analytic gradients against each other
/// and against central finite differences with step `fd_step`.
pub fn gradient_agreement_suite(
    seed: u64,
    fd_step: f64,
    instances: usize,
) -> Result<GradAgreementReport, VqcError> {
    let mut rng = seeded_rng(seed, &[0x6ad]);
    let mut max_sa = 0.0f64;
    let mut max_fd = 0.0f64;
    for _ in 0..instances {
        let n_qubits = 2 * rng.gen_range(1..=3usize);
        let n_layers = rng.gen_range(1..=2usize);
        let layout = build_layout(n_qubits, n_layers)?;
        let params = VqcParams {
            thetas: (0..layout.param_count())
                .map(|_| rng.gen_range(-PI..PI))
                .collect(),
        };
        let len = rng.gen_range(1..=layout.dim());
        let waveform: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if waveform.iter().all(|&x| x == 0.0) {
            continue;
        }
        let feature = FeatureSpec {
            feature_len: rng.gen_range(1..=layout.dim()),
            scale: layout.dim() as f64,
        };
        let upstream: Vec<f64> = (0..feature.feature_len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let shift = grad_parameter_shift(&layout, &params, &waveform, &feature, &upstream)?;
        let adjoint = grad_adjoint(&layout, &params, &waveform, &feature, &upstream)?;
        let fd = grad_finite_difference(&layout, &params, &waveform, &feature, &upstream, fd_step)?;
        for k in 0..layout.param_count() {
            max_sa = max_sa.max((shift[k] - adjoint[k]).abs());
            max_fd = max_fd
                .max((shift[k] - fd[k]).abs())
                .max((adjoint[k] - fd[k]).abs());
        }
    }
    Ok(GradAgreementReport {
        instances,
        max_shift_vs_adjoint: max_sa,
        max_analytic_vs_fd: max_fd,
        shift_adjoint_tol: 1e-9,
        fd_tol: 1e-5,
    })
}
