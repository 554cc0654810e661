//! Differential-privacy noise calibration, the adaptive decay schedule, the
//! Gaussian mechanism, the n-qubit variance-factor predictor and the privacy
//! budget accountant.
//!
//! The calibrated per-client noise variance for an (ε, δ) guarantee over T
//! rounds with K participants per round is
//!
//! ```text
//! σ² = 8 T (2L + b)² ln(1/δ) / (K² ε²)
//! ```
//!
//! with the natural logarithm. The adaptive schedule decays the injected
//! variance as σ_t² = σ₀² / (1 + αt). When `enforce_dp` is on the injected
//! variance never falls below the T-normalized calibrated floor σ²/T; in
//! research mode the raw schedule is used as-is.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{QflError, Result};

/// Privacy hyperparameters. `clip_bound` is the Lipschitz/clipping constant L
/// and `estimation_error` the sparsification error bound b of the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    /// L: gradient clip / Lipschitz bound.
    pub clip_bound: f64,
    /// b: estimation error bound.
    pub estimation_error: f64,
    /// λ: regularization parameter; the filter threshold is b/λ.
    pub lambda: f64,
    /// σ₀²: initial adaptive noise variance.
    pub sigma0_sq: f64,
    /// α: schedule decay rate.
    pub alpha: f64,
    /// T: total communication rounds covered by the guarantee.
    pub rounds: usize,
    /// K: clients per round.
    pub clients_per_round: usize,
    /// Inject max(schedule, σ²/T) instead of the raw schedule.
    pub enforce_dp: bool,
}

impl Default for PrivacyParams {
    fn default() -> Self {
        PrivacyParams {
            epsilon: 1.0,
            delta: 1e-5,
            clip_bound: 1.0,
            estimation_error: 0.05,
            lambda: 1.0,
            sigma0_sq: 1e-3,
            alpha: 0.1,
            rounds: 50,
            clients_per_round: 2,
            enforce_dp: false,
        }
    }
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(QflError::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(QflError::config(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if self.clip_bound < 0.0 {
            return Err(QflError::config(format!(
                "clip bound L must be >= 0, got {}",
                self.clip_bound
            )));
        }
        if !(self.estimation_error > 0.0) {
            return Err(QflError::config(format!(
                "estimation error b must be > 0, got {}",
                self.estimation_error
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(QflError::config(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.sigma0_sq < 0.0 {
            return Err(QflError::config(format!(
                "sigma0_sq must be >= 0, got {}",
                self.sigma0_sq
            )));
        }
        if self.alpha < 0.0 {
            return Err(QflError::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.rounds < 1 {
            return Err(QflError::config("rounds T must be >= 1".to_string()));
        }
        if self.clients_per_round < 1 {
            return Err(QflError::config("clients per round K must be >= 1".to_string()));
        }
        Ok(())
    }

    /// The sparsification / acceptance threshold b/λ.
    pub fn filter_threshold(&self) -> f64 {
        self.estimation_error / self.lambda
    }

    /// Per-round injected variance: the adaptive schedule, floored at σ²/T
    /// when `enforce_dp` is set.
    pub fn round_sigma_sq(&self, t: usize) -> Result<f64> {
        let scheduled = adaptive_sigma_sq(self.sigma0_sq, self.alpha, t)?;
        if self.enforce_dp {
            let floor = lemma1_sigma_sq(self)? / self.rounds as f64;
            Ok(scheduled.max(floor))
        } else {
            Ok(scheduled)
        }
    }
}

/// Minimum Gaussian noise variance for the (ε, δ) client-level guarantee:
/// 8T(2L + b)² ln(1/δ) / (K² ε²).
pub fn lemma1_sigma_sq(p: &PrivacyParams) -> Result<f64> {
    p.validate()?;
    let t = p.rounds as f64;
    let k = p.clients_per_round as f64;
    let width = 2.0 * p.clip_bound + p.estimation_error;
    Ok(8.0 * t * width * width * (1.0 / p.delta).ln() / (k * k * p.epsilon * p.epsilon))
}

/// Adaptive decay schedule σ_t² = σ₀² / (1 + αt); non-increasing in t.
pub fn adaptive_sigma_sq(sigma0_sq: f64, alpha: f64, t: usize) -> Result<f64> {
    if sigma0_sq < 0.0 {
        return Err(QflError::config(format!(
            "sigma0_sq must be >= 0, got {sigma0_sq}"
        )));
    }
    if alpha < 0.0 {
        return Err(QflError::config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(sigma0_sq / (1.0 + alpha * t as f64))
}

/// i.i.d. N(0, σ²) samples; the zero-variance case returns an exact zero
/// vector without consuming randomness.
pub fn gaussian_noise(dim: usize, sigma_sq: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma_sq <= 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, sigma_sq.sqrt()).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Predicted gradient-variance factor for an n-qubit system: 3 / (2^{2n} - 1).
/// The n = 1 baseline is exactly 1.
pub fn variance_factor(n_qubits: usize) -> Result<f64> {
    if n_qubits < 1 {
        return Err(QflError::config(format!(
            "variance factor needs n >= 1, got {n_qubits}"
        )));
    }
    if n_qubits <= 31 {
        Ok(3.0 / ((1u64 << (2 * n_qubits)) - 1) as f64)
    } else {
        Ok(3.0 / (4.0f64.powi(n_qubits as i32) - 1.0))
    }
}

/// One accountant entry: client `client` consumed `epsilon` at round `round`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub epsilon: f64,
}

/// Privacy budget accountant: ε_glob = Σ_t Σ_u ε_u^t, accumulated in fixed
/// left-to-right entry order so totals are bitwise reproducible.
#[derive(Debug, Clone, Default)]
pub struct BudgetLedger {
    entries: Vec<LedgerEntry>,
    total: f64,
}

impl BudgetLedger {
    pub fn new() -> Self {
        BudgetLedger::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Record per-client consumptions for round `t`, returning the updated
    /// global total.
    pub fn record_and_total(&mut self, t: usize, per_client: &[(usize, f64)]) -> Result<f64> {
        for &(_, eps) in per_client {
            if eps < 0.0 || !eps.is_finite() {
                return Err(QflError::input(format!(
                    "epsilon entries must be >= 0 and finite, got {eps}"
                )));
            }
        }
        for &(client, epsilon) in per_client {
            self.entries.push(LedgerEntry { round: t, client, epsilon });
            self.total += epsilon;
        }
        Ok(self.total)
    }

    /// Recompute the total from entries in fixed left-to-right order. Equals
    /// `total()` bit-for-bit.
    pub fn recompute_total(&self) -> f64 {
        let mut acc = 0.0;
        for e in &self.entries {
            acc += e.epsilon;
        }
        acc
    }

    /// CSV export with header `round,client,epsilon`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,client,epsilon\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.round, e.client, e.epsilon));
        }
        out
    }
}
