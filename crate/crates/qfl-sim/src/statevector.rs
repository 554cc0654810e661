//! Dense statevector simulation of n-qubit circuits.
//!
//! Conventions, stated once and pinned by tests:
//!
//! * Rotations follow `RY(θ) = exp(-iθY/2)` (and analogously `RX`, `RZ`).
//! * Amplitudes are stored in little-endian basis ordering: qubit 0 is the
//!   least significant bit of the amplitude index. `expectation_z` results
//!   depend on this.
//! * All arithmetic is double-precision complex; there is no single-precision
//!   mode.

use num_complex::Complex64;

use crate::error::{QflError, Result};

/// Hard cap on qubit count; keeps the worst-case state at 2^16 amplitudes.
pub const MAX_QUBITS: usize = 16;

/// How a rotation gate obtains its angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Angle {
    /// Fixed angle in radians.
    Fixed(f64),
    /// `scale * params[index]` radians. `scale` is 1.0 for ordinary trainable
    /// gates; compiled controlled rotations use ±1/2 on a shared index.
    Param { index: usize, scale: f64 },
}

impl Angle {
    pub fn param(index: usize) -> Self {
        Angle::Param { index, scale: 1.0 }
    }

    fn resolve(&self, params: &[f64]) -> Result<f64> {
        match *self {
            Angle::Fixed(a) => Ok(a),
            Angle::Param { index, scale } => params
                .get(index)
                .map(|p| scale * p)
                .ok_or_else(|| {
                    QflError::structural(format!(
                        "param_index {index} out of bounds for {} parameters",
                        params.len()
                    ))
                }),
        }
    }
}

/// Gate kinds supported by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    Cnot,
    Cz,
    H,
}

impl GateKind {
    pub fn is_rotation(self) -> bool {
        matches!(self, GateKind::Rx | GateKind::Ry | GateKind::Rz)
    }

    pub fn is_controlled(self) -> bool {
        matches!(self, GateKind::Cnot | GateKind::Cz)
    }
}

/// A single gate. Control is present iff the kind is CNOT or CZ; an angle is
/// present iff the kind is a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    pub angle: Option<Angle>,
}

impl Gate {
    pub fn rx(target: usize, angle: Angle) -> Self {
        Gate { kind: GateKind::Rx, target, control: None, angle: Some(angle) }
    }
    pub fn ry(target: usize, angle: Angle) -> Self {
        Gate { kind: GateKind::Ry, target, control: None, angle: Some(angle) }
    }
    pub fn rz(target: usize, angle: Angle) -> Self {
        Gate { kind: GateKind::Rz, target, control: None, angle: Some(angle) }
    }
    pub fn h(target: usize) -> Self {
        Gate { kind: GateKind::H, target, control: None, angle: None }
    }
    pub fn cnot(control: usize, target: usize) -> Self {
        Gate { kind: GateKind::Cnot, target, control: Some(control), angle: None }
    }
    pub fn cz(control: usize, target: usize) -> Self {
        Gate { kind: GateKind::Cz, target, control: Some(control), angle: None }
    }

    /// Check the structural invariants against a register of `n_qubits`.
    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.target >= n_qubits {
            return Err(QflError::structural(format!(
                "gate target {} out of bounds for {n_qubits} qubits",
                self.target
            )));
        }
        match (self.kind.is_controlled(), self.control) {
            (true, Some(c)) => {
                if c >= n_qubits {
                    return Err(QflError::structural(format!(
                        "gate control {c} out of bounds for {n_qubits} qubits"
                    )));
                }
                if c == self.target {
                    return Err(QflError::structural(
                        "control and target must differ".to_string(),
                    ));
                }
            }
            (true, None) => {
                return Err(QflError::structural(format!(
                    "{:?} requires a control qubit",
                    self.kind
                )))
            }
            (false, Some(_)) => {
                return Err(QflError::structural(format!(
                    "{:?} takes no control qubit",
                    self.kind
                )))
            }
            (false, None) => {}
        }
        match (self.kind.is_rotation(), self.angle) {
            (true, None) => {
                return Err(QflError::structural(format!(
                    "{:?} requires an angle",
                    self.kind
                )))
            }
            (false, Some(_)) => {
                return Err(QflError::structural(format!(
                    "{:?} takes no angle",
                    self.kind
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// The 2x2 unitary of a single-qubit gate at a resolved angle.
    fn single_qubit_matrix(kind: GateKind, angle: f64) -> [[Complex64; 2]; 2] {
        let half = angle / 2.0;
        let (c, s) = (half.cos(), half.sin());
        match kind {
            GateKind::Rx => [
                [Complex64::new(c, 0.0), Complex64::new(0.0, -s)],
                [Complex64::new(0.0, -s), Complex64::new(c, 0.0)],
            ],
            GateKind::Ry => [
                [Complex64::new(c, 0.0), Complex64::new(-s, 0.0)],
                [Complex64::new(s, 0.0), Complex64::new(c, 0.0)],
            ],
            GateKind::Rz => [
                [Complex64::new(c, -s), Complex64::new(0.0, 0.0)],
                [Complex64::new(0.0, 0.0), Complex64::new(c, s)],
            ],
            GateKind::H => {
                let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                [[r, r], [r, -r]]
            }
            _ => unreachable!("not a single-qubit gate"),
        }
    }
}

/// Complex amplitude array representing an n-qubit pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// All-zeros basis state |0...0> on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        if n_qubits < 1 || n_qubits > MAX_QUBITS {
            return Err(QflError::config(format!(
                "n_qubits must be in 1..={MAX_QUBITS}, got {n_qubits}"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(StateVector { n_qubits, amplitudes })
    }

    /// Build from raw amplitudes (normalized within 1e-10).
    pub fn from_amplitudes(n_qubits: usize, amplitudes: Vec<Complex64>) -> Result<Self> {
        if n_qubits < 1 || n_qubits > MAX_QUBITS {
            return Err(QflError::config(format!(
                "n_qubits must be in 1..={MAX_QUBITS}, got {n_qubits}"
            )));
        }
        if amplitudes.len() != 1 << n_qubits {
            return Err(QflError::structural(format!(
                "expected {} amplitudes for {n_qubits} qubits, got {}",
                1usize << n_qubits,
                amplitudes.len()
            )));
        }
        let sv = StateVector { n_qubits, amplitudes };
        if (sv.norm_sq() - 1.0).abs() > 1e-10 {
            return Err(QflError::structural(format!(
                "state not normalized: |psi|^2 = {}",
                sv.norm_sq()
            )));
        }
        Ok(sv)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Apply a gate, returning the new state. The input is left untouched.
    pub fn apply_gate(&self, gate: &Gate, params: &[f64]) -> Result<StateVector> {
        let mut out = self.clone();
        out.apply_gate_mut(gate, params)?;
        Ok(out)
    }

    /// In-place gate application; the hot path used by circuit runners.
    pub fn apply_gate_mut(&mut self, gate: &Gate, params: &[f64]) -> Result<()> {
        gate.validate(self.n_qubits)?;
        match gate.kind {
            GateKind::Rx | GateKind::Ry | GateKind::Rz | GateKind::H => {
                let angle = match gate.angle {
                    Some(a) => a.resolve(params)?,
                    None => 0.0,
                };
                let m = Gate::single_qubit_matrix(gate.kind, angle);
                self.apply_single_qubit(gate.target, &m);
            }
            GateKind::Cnot => self.apply_cnot(gate.control.unwrap(), gate.target),
            GateKind::Cz => self.apply_cz(gate.control.unwrap(), gate.target),
        }
        Ok(())
    }

    fn apply_single_qubit(&mut self, target: usize, m: &[[Complex64; 2]; 2]) {
        let bit = 1usize << target;
        let dim = self.amplitudes.len();
        let mut i = 0;
        while i < dim {
            if i & bit == 0 {
                let j = i | bit;
                let a0 = self.amplitudes[i];
                let a1 = self.amplitudes[j];
                self.amplitudes[i] = m[0][0] * a0 + m[0][1] * a1;
                self.amplitudes[j] = m[1][0] * a0 + m[1][1] * a1;
            }
            i += 1;
        }
    }

    fn apply_cnot(&mut self, control: usize, target: usize) {
        let cbit = 1usize << control;
        let tbit = 1usize << target;
        for i in 0..self.amplitudes.len() {
            if i & cbit != 0 && i & tbit == 0 {
                self.amplitudes.swap(i, i | tbit);
            }
        }
    }

    fn apply_cz(&mut self, control: usize, target: usize) {
        let cbit = 1usize << control;
        let tbit = 1usize << target;
        for (i, amp) in self.amplitudes.iter_mut().enumerate() {
            if i & cbit != 0 && i & tbit != 0 {
                *amp = -*amp;
            }
        }
    }

    /// Pauli-Z expectation value on one qubit: sum over basis states of
    /// (+1 / -1 by the qubit's bit) times |amplitude|^2. Always in [-1, 1].
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        if qubit >= self.n_qubits {
            return Err(QflError::structural(format!(
                "qubit {qubit} out of range for {} qubits",
                self.n_qubits
            )));
        }
        let bit = 1usize << qubit;
        let mut acc = 0.0;
        for (i, amp) in self.amplitudes.iter().enumerate() {
            let p = amp.norm_sqr();
            if i & bit == 0 {
                acc += p;
            } else {
                acc -= p;
            }
        }
        Ok(acc.clamp(-1.0, 1.0))
    }

    /// Probability of measuring the all-zeros bitstring, |<0...0|psi>|^2.
    ///
    /// This is the global projector expectation used by the barren-plateau
    /// scan; unlike a single-qubit Pauli it concentrates at the 2^(-2n) rate.
    pub fn zero_prob(&self) -> f64 {
        self.amplitudes[0].norm_sqr()
    }
}

/// Convenience wrapper matching the operation names used elsewhere.
pub fn init_zero(n_qubits: usize) -> Result<StateVector> {
    StateVector::zero(n_qubits)
}
