//! Parameterized quantum models: angle encoding, forward pass, MSE loss,
//! parameter-shift gradients, the 8-qubit QCNN ansatz and random layered
//! circuits for barren-plateau experiments.
//!
//! Gradients use the parameter-shift rule with shift π/2, which is exact for
//! generators with eigenvalues ±1/2 (all single-qubit rotations here):
//!
//! ```text
//! ∂<O>/∂θ = [<O>(θ + π/2) - <O>(θ - π/2)] / 2
//! ```
//!
//! A parameter may feed several gates with different scale factors (the
//! compiled controlled rotations of the QCNN pool layers do this), so the
//! rule is applied per gate occurrence and the contributions are chain-ruled
//! by the occurrence scale: ∂<O>/∂θ = Σ_g s_g · [<O>(a_g + π/2) - <O>(a_g - π/2)] / 2.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{QflError, Result};
use crate::statevector::{init_zero, Angle, Gate, GateKind, StateVector};

/// Gate sequence over a fixed register with a declared parameter count.
#[derive(Debug, Clone)]
pub struct ParamCircuit {
    n_qubits: usize,
    gates: Vec<Gate>,
    param_count: usize,
}

impl ParamCircuit {
    pub fn new(n_qubits: usize) -> Self {
        ParamCircuit { n_qubits, gates: Vec::new(), param_count: 0 }
    }

    pub fn push(&mut self, gate: Gate) -> Result<()> {
        gate.validate(self.n_qubits)?;
        if let Some(Angle::Param { index, .. }) = gate.angle {
            self.param_count = self.param_count.max(index + 1);
        }
        self.gates.push(gate);
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Run the circuit on `input`, resolving trainable angles from `params`.
    pub fn run(&self, input: &StateVector, params: &[f64]) -> Result<StateVector> {
        self.run_with_shift(input, params, None)
    }

    /// Run with one gate occurrence's angle shifted by `delta` radians.
    /// `shift = Some((gate_index, delta))` drives the parameter-shift rule.
    pub fn run_with_shift(
        &self,
        input: &StateVector,
        params: &[f64],
        shift: Option<(usize, f64)>,
    ) -> Result<StateVector> {
        if params.len() < self.param_count {
            return Err(QflError::structural(format!(
                "circuit needs {} parameters, got {}",
                self.param_count,
                params.len()
            )));
        }
        let mut state = input.clone();
        for (gi, gate) in self.gates.iter().enumerate() {
            match shift {
                Some((idx, delta)) if idx == gi => {
                    let base = match gate.angle {
                        Some(Angle::Fixed(a)) => a,
                        Some(Angle::Param { index, scale }) => scale * params[index],
                        None => {
                            return Err(QflError::structural(
                                "shift target is not a rotation gate".to_string(),
                            ))
                        }
                    };
                    let shifted = Gate { angle: Some(Angle::Fixed(base + delta)), ..*gate };
                    state.apply_gate_mut(&shifted, params)?;
                }
                _ => state.apply_gate_mut(gate, params)?,
            }
        }
        Ok(state)
    }

    /// Indices and scales of the gates fed by each parameter.
    pub fn occurrences(&self, param: usize) -> Vec<(usize, f64)> {
        self.gates
            .iter()
            .enumerate()
            .filter_map(|(gi, g)| match g.angle {
                Some(Angle::Param { index, scale }) if index == param => Some((gi, scale)),
                _ => None,
            })
            .collect()
    }

    /// Exact gradient of an observable via per-occurrence parameter shifts.
    ///
    /// `observable` maps a final state to a scalar expectation value; the
    /// shift rule holds for any observable expectation.
    pub fn grad_observable<F>(
        &self,
        input: &StateVector,
        params: &[f64],
        observable: F,
    ) -> Result<Vec<f64>>
    where
        F: Fn(&StateVector) -> f64,
    {
        let mut grad = vec![0.0; params.len()];
        for (j, g) in grad.iter_mut().enumerate() {
            for (gi, scale) in self.occurrences(j) {
                let plus = observable(&self.run_with_shift(input, params, Some((gi, FRAC_PI_2)))?);
                let minus =
                    observable(&self.run_with_shift(input, params, Some((gi, -FRAC_PI_2)))?);
                *g += scale * (plus - minus) / 2.0;
            }
        }
        Ok(grad)
    }
}

/// Parameterized quantum model: trainable circuit, its parameter vector and
/// a readout qubit. Predictions are `(<Z> + 1) / 2`, always in [0, 1].
#[derive(Debug, Clone)]
pub struct QnnModel {
    pub circuit: ParamCircuit,
    pub params: Vec<f64>,
    pub readout_qubit: usize,
    pub n_qubits: usize,
}

impl QnnModel {
    pub fn new(circuit: ParamCircuit, params: Vec<f64>, readout_qubit: usize) -> Result<Self> {
        let n_qubits = circuit.n_qubits();
        if readout_qubit >= n_qubits {
            return Err(QflError::structural(format!(
                "readout qubit {readout_qubit} out of range for {n_qubits} qubits"
            )));
        }
        if params.len() < circuit.param_count() {
            return Err(QflError::structural(format!(
                "model needs {} parameters, got {}",
                circuit.param_count(),
                params.len()
            )));
        }
        Ok(QnnModel { circuit, params, readout_qubit, n_qubits })
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        Self::new(self.circuit.clone(), params.to_vec(), self.readout_qubit)
    }

    /// Forward pass: encode, run, map <Z> on the readout qubit to [0, 1].
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        self.forward_with(&self.params, features)
    }

    pub fn forward_with(&self, params: &[f64], features: &[f64]) -> Result<f64> {
        let state = encode(features, self.n_qubits)?;
        let out = self.circuit.run(&state, params)?;
        Ok((out.expectation_z(self.readout_qubit)? + 1.0) / 2.0)
    }
}

/// A batch of (feature vector, target) pairs. Features must be in [0, π].
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(QflError::structural(format!(
                "batch has {} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            if inputs.iter().any(|x| x.len() != d) {
                return Err(QflError::structural(
                    "batch feature vectors must share one dimension".to_string(),
                ));
            }
        }
        if labels.iter().any(|y| !y.is_finite()) {
            return Err(QflError::input("batch labels must be finite".to_string()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Angle encoding: RY(feature_i) applied to qubit i of |0...0>. Unused qubits
/// stay |0>. Features must already be scaled to [0, π].
pub fn encode(features: &[f64], n_qubits: usize) -> Result<StateVector> {
    if features.len() > n_qubits {
        return Err(QflError::input(format!(
            "{} features exceed {n_qubits} qubits",
            features.len()
        )));
    }
    for (i, &f) in features.iter().enumerate() {
        if !(0.0..=PI).contains(&f) {
            return Err(QflError::input(format!(
                "feature {i} = {f} outside [0, pi]"
            )));
        }
    }
    let mut state = init_zero(n_qubits)?;
    for (i, &f) in features.iter().enumerate() {
        state.apply_gate_mut(&Gate::ry(i, Angle::Fixed(f)), &[])?;
    }
    Ok(state)
}

/// Squared error for a single prediction.
pub fn loss_mse(pred: f64, label: f64) -> f64 {
    (pred - label) * (pred - label)
}

/// Mean MSE loss of a model over a batch.
pub fn batch_loss(model: &QnnModel, params: &[f64], batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(QflError::input("empty batch".to_string()));
    }
    let mut acc = 0.0;
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        acc += loss_mse(model.forward_with(params, x)?, y);
    }
    Ok(acc / batch.len() as f64)
}

/// Full-batch gradient of the mean MSE loss w.r.t. the model parameters,
/// chained through the parameter-shift rule:
///
/// ```text
/// ∂L/∂θ_j = (1/|B|) Σ_i 2 (pred_i - y_i) · (1/2) ∂<Z>_i/∂θ_j
/// ```
pub fn grad_parameter_shift(model: &QnnModel, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(QflError::input("empty batch".to_string()));
    }
    let readout = model.readout_qubit;
    let mut grad = vec![0.0; params.len()];
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let state = encode(x, model.n_qubits)?;
        let pred = (model
            .circuit
            .run(&state, params)?
            .expectation_z(readout)?
            + 1.0)
            / 2.0;
        let dz = model.circuit.grad_observable(&state, params, |s| {
            s.expectation_z(readout).expect("readout validated")
        })?;
        let coeff = 2.0 * (pred - y) * 0.5;
        for (g, d) in grad.iter_mut().zip(&dz) {
            *g += coeff * d;
        }
    }
    for g in grad.iter_mut() {
        *g /= batch.len() as f64;
    }
    Ok(grad)
}

/// Per-sample loss gradients, in batch order. Used by the FIM trace and the
/// mini-batch variance experiments.
pub fn per_sample_grads(model: &QnnModel, params: &[f64], batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(batch.len());
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let one = Batch::new(vec![x.clone()], vec![y])?;
        out.push(grad_parameter_shift(model, params, &one)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// QCNN ansatz
// ---------------------------------------------------------------------------

/// Append a compiled controlled-RY: CRY(θ) = RY(θ/2)·CNOT·RY(-θ/2)·CNOT with
/// both rotations on the target, sharing one parameter index.
fn push_cry(circuit: &mut ParamCircuit, control: usize, target: usize, param: usize) -> Result<()> {
    circuit.push(Gate::ry(target, Angle::Param { index: param, scale: 0.5 }))?;
    circuit.push(Gate::cnot(control, target))?;
    circuit.push(Gate::ry(target, Angle::Param { index: param, scale: -0.5 }))?;
    circuit.push(Gate::cnot(control, target))?;
    Ok(())
}

/// The QCNN ansatz: `conv_pool_pairs` blocks of a convolution layer
/// (a parameterized two-qubit unit RY·RY·CNOT·RY·RY on adjacent active-qubit
/// pairs) followed by a pooling layer (a parameterized controlled rotation
/// from each parked qubit onto its kept partner), then a fully connected tail
/// of single-qubit rotations on the readout qubit sized so the (8, 3)
/// configuration has exactly 64 trainable parameters.
///
/// Returns the circuit and its readout qubit.
pub fn qcnn_ansatz(n_qubits: usize, conv_pool_pairs: usize) -> Result<(ParamCircuit, usize)> {
    if n_qubits < 2 || !n_qubits.is_power_of_two() {
        return Err(QflError::config(format!(
            "qcnn needs a power-of-two qubit count >= 2, got {n_qubits}"
        )));
    }
    if n_qubits < (1 << conv_pool_pairs) {
        return Err(QflError::config(format!(
            "cannot halve {n_qubits} qubits {conv_pool_pairs} times"
        )));
    }
    let mut circuit = ParamCircuit::new(n_qubits);
    let mut active: Vec<usize> = (0..n_qubits).collect();
    let mut p = 0usize;
    for _ in 0..conv_pool_pairs {
        // convolution: two-qubit unit on each adjacent active pair
        for pair in active.chunks(2) {
            let (a, b) = (pair[0], pair[1]);
            circuit.push(Gate::ry(a, Angle::param(p)))?;
            circuit.push(Gate::ry(b, Angle::param(p + 1)))?;
            circuit.push(Gate::cnot(a, b))?;
            circuit.push(Gate::ry(a, Angle::param(p + 2)))?;
            circuit.push(Gate::ry(b, Angle::param(p + 3)))?;
            p += 4;
        }
        // pooling: controlled rotation from the parked qubit onto the kept one
        let mut kept = Vec::with_capacity(active.len() / 2);
        for pair in active.chunks(2) {
            let (keep, park) = (pair[0], pair[1]);
            push_cry(&mut circuit, park, keep, p)?;
            p += 1;
            kept.push(keep);
        }
        active = kept;
    }
    let readout = active[0];
    // fully connected tail: single-qubit rotations cycling RY/RZ/RX on the
    // readout qubit until the (8, 3) configuration reaches 64 parameters
    let target_total = if n_qubits == 8 && conv_pool_pairs == 3 { 64 } else { p + 3 };
    let mut k = 0usize;
    while p < target_total {
        let gate = match k % 3 {
            0 => Gate::ry(readout, Angle::param(p)),
            1 => Gate::rz(readout, Angle::param(p)),
            _ => Gate::rx(readout, Angle::param(p)),
        };
        circuit.push(gate)?;
        p += 1;
        k += 1;
    }
    Ok((circuit, readout))
}

// ---------------------------------------------------------------------------
// Random layered circuits
// ---------------------------------------------------------------------------

/// A random layered circuit: per layer, one uniformly random rotation
/// (RX/RY/RZ, angle ~ U[0, 2π)) on every qubit followed by a CNOT ladder.
/// The rotation on qubit 0 of the final layer is the designated trainable
/// parameter (index 0); its sampled angle is returned as the parameter vector.
/// Deterministic given the seed.
pub fn random_layered_circuit(
    n_qubits: usize,
    layers: usize,
    seed: u64,
) -> Result<(ParamCircuit, Vec<f64>)> {
    if n_qubits < 2 {
        return Err(QflError::config(format!(
            "random layered circuit needs >= 2 qubits, got {n_qubits}"
        )));
    }
    if layers < 1 {
        return Err(QflError::config("layers must be >= 1".to_string()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut circuit = ParamCircuit::new(n_qubits);
    let mut designated_angle = 0.0;
    for layer in 0..layers {
        for q in 0..n_qubits {
            let kind = match rng.gen_range(0..3u8) {
                0 => GateKind::Rx,
                1 => GateKind::Ry,
                _ => GateKind::Rz,
            };
            let angle = rng.gen_range(0.0..TAU);
            let is_designated = layer == layers - 1 && q == 0;
            let a = if is_designated {
                designated_angle = angle;
                Angle::param(0)
            } else {
                Angle::Fixed(angle)
            };
            let gate = match kind {
                GateKind::Rx => Gate::rx(q, a),
                GateKind::Ry => Gate::ry(q, a),
                _ => Gate::rz(q, a),
            };
            circuit.push(gate)?;
        }
        for q in 0..n_qubits - 1 {
            circuit.push(Gate::cnot(q, q + 1))?;
        }
    }
    Ok((circuit, vec![designated_angle]))
}
