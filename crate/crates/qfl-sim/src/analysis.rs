//! Experiment harnesses and bound evaluators: barren-plateau variance scans,
//! empirical mini-batch gradient variance, and concrete convergence bounds
//! for the convex and non-convex regimes.
//!
//! The bound evaluators use the explicit pre-asymptotic coefficients rather
//! than bare O(·) forms, so each "bound" is a concrete number:
//!
//! convex (average iterate, full participation, full batch):
//! ```text
//! 3·||θ⁰-θ*||²/(T η τ) + 36 η² τ(τ-1) L σ*² + 9 η τ σ*²
//!   + (2τ² + 3τ + 1) η² · 3σ²/(2^{2n} - 1)
//! ```
//!
//! non-convex (min gradient norm², discounted by the sharp-minima mass κ):
//! ```text
//! 8(L⁰-Lᵗ)/(T η τ κ) + 40 T η² τ(τ-1) L² σ_g²/κ + 24 T η τ L σ_g²/κ
//! ```

use rayon::prelude::*;

use crate::error::{QflError, Result};
use crate::privacy::variance_factor;
use crate::qnn::{grad_parameter_shift, random_layered_circuit, Batch, QnnModel};
use crate::server::stream;
use crate::statevector::init_zero;
use rand::Rng;

/// Inputs consumed by the bound evaluators.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    /// η_l: client learning rate.
    pub eta_l: f64,
    /// τ: local iterations.
    pub tau: usize,
    /// T: communication rounds.
    pub rounds: usize,
    /// L: smoothness constant.
    pub smoothness: f64,
    /// μ: strong convexity constant.
    pub mu: f64,
    /// σ*²: heterogeneity at the optimum.
    pub sigma_star_sq: f64,
    /// σ²: point-gradient variance feeding the quantum term.
    pub sigma_sq: f64,
    /// σ_g²: non-convex gradient heterogeneity.
    pub sigma_g_sq: f64,
    pub n_qubits: usize,
    /// ||θ⁰ - θ*||².
    pub theta0_gap: f64,
    /// L(θ⁰) - L(θᵗ).
    pub loss_drop: f64,
    /// κ ∈ (0, 1]: sharp-minima discount.
    pub kappa: f64,
    /// ||ϑ||²: injected gradient-variance magnitude (diagnostic).
    pub vartheta_sq: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            eta_l: 0.01,
            tau: 1,
            rounds: 100,
            smoothness: 1.0,
            mu: 0.1,
            sigma_star_sq: 0.0,
            sigma_sq: 0.0,
            sigma_g_sq: 0.0,
            n_qubits: 1,
            theta0_gap: 0.0,
            loss_drop: 0.0,
            kappa: 1.0,
            vartheta_sq: 0.0,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_l", self.eta_l),
            ("smoothness", self.smoothness),
            ("mu", self.mu),
            ("sigma_star_sq", self.sigma_star_sq),
            ("sigma_sq", self.sigma_sq),
            ("sigma_g_sq", self.sigma_g_sq),
            ("theta0_gap", self.theta0_gap),
            ("loss_drop", self.loss_drop),
            ("vartheta_sq", self.vartheta_sq),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(QflError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.tau < 1 || self.rounds < 1 || self.n_qubits < 1 {
            return Err(QflError::config("tau, rounds and n_qubits must be >= 1".to_string()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(QflError::config(format!("kappa must be in (0, 1], got {}", self.kappa)));
        }
        Ok(())
    }

    /// The admissible step-size window (lower, upper). The lower end exceeds
    /// the upper one at τ = 1, where only the upper constraint binds.
    pub fn step_window(&self) -> (f64, f64) {
        let tau = self.tau as f64;
        let lower = 1.0 / (2.0 * 6.0f64.sqrt() * tau * tau * self.smoothness);
        let upper = 1.0 / (6.0 * tau * self.smoothness);
        (lower, upper)
    }

    /// True when η_l violates the window; the evaluators still evaluate.
    pub fn step_window_violated(&self) -> bool {
        let (lower, upper) = self.step_window();
        if self.eta_l >= upper {
            return true;
        }
        lower < upper && self.eta_l <= lower
    }
}

/// The convex bound's four contributions, in order: initialization error,
/// client drift, noise at the optimum, quantum-induced gradient variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexBound {
    pub total: f64,
    pub terms: [f64; 4],
    pub step_window_warning: bool,
}

pub fn theorem3_bound(inputs: &BoundInputs) -> Result<ConvexBound> {
    inputs.validate()?;
    let eta = inputs.eta_l;
    let tau = inputs.tau as f64;
    let t = inputs.rounds as f64;
    let l = inputs.smoothness;
    let init = 3.0 * inputs.theta0_gap / (t * eta * tau);
    let drift = 36.0 * eta * eta * tau * (tau - 1.0) * l * inputs.sigma_star_sq;
    let noise_at_opt = 9.0 * eta * tau * inputs.sigma_star_sq;
    let quantum = (2.0 * tau * tau + 3.0 * tau + 1.0)
        * eta
        * eta
        * inputs.sigma_sq
        * variance_factor(inputs.n_qubits)?;
    let terms = [init, drift, noise_at_opt, quantum];
    Ok(ConvexBound {
        total: terms.iter().sum(),
        terms,
        step_window_warning: inputs.step_window_violated(),
    })
}

/// The non-convex bound's three contributions, in order: loss descent,
/// client drift, heterogeneity noise. Every term carries the 1/κ factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonConvexBound {
    pub total: f64,
    pub terms: [f64; 3],
}

pub fn theorem4_bound(inputs: &BoundInputs) -> Result<NonConvexBound> {
    inputs.validate()?;
    let eta = inputs.eta_l;
    let tau = inputs.tau as f64;
    let t = inputs.rounds as f64;
    let l = inputs.smoothness;
    let k = inputs.kappa;
    let descent = 8.0 * inputs.loss_drop / (t * eta * tau * k);
    let drift = 40.0 * t * eta * eta * tau * (tau - 1.0) * l * l * inputs.sigma_g_sq / k;
    let hetero = 24.0 * t * eta * tau * l * inputs.sigma_g_sq / k;
    let terms = [descent, drift, hetero];
    Ok(NonConvexBound { total: terms.iter().sum(), terms })
}

/// One row of a barren-plateau scan.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceScanRow {
    pub n_qubits: usize,
    pub layers: usize,
    pub n_samples: usize,
    /// Sample variance of the designated gradient component.
    pub sample_variance: f64,
}

/// CSV rendering of scan rows with the canonical header.
pub fn scan_rows_to_csv(rows: &[VarianceScanRow]) -> String {
    let mut out = String::from("n_qubits,layers,n_samples,sample_variance\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n_qubits, r.layers, r.n_samples, r.sample_variance
        ));
    }
    out
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// For each (n, layers) pair, draw `samples` random layered circuits and
/// record the sample variance of the designated parameter's gradient of the
/// all-zeros-probability readout. Deterministic per seed; seeds for the
/// individual circuits are derived from (seed, n, layers, sample index).
pub fn barren_plateau_scan(
    n_range: &[usize],
    layer_range: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<VarianceScanRow>> {
    if samples < 100 {
        return Err(QflError::config(format!(
            "scan needs >= 100 samples per cell, got {samples}"
        )));
    }
    let mut rows = Vec::new();
    for &n in n_range {
        for &layers in layer_range {
            let grads: Vec<f64> = (0..samples)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let mut srng = stream(seed, &[0xBA11, n as u64, layers as u64, i as u64]);
                    let circuit_seed: u64 = srng.gen();
                    let (circuit, params) = random_layered_circuit(n, layers, circuit_seed)?;
                    let input = init_zero(n)?;
                    let g = circuit.grad_observable(&input, &params, |s| s.zero_prob())?;
                    Ok(g[0])
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(VarianceScanRow {
                n_qubits: n,
                layers,
                n_samples: samples,
                sample_variance: sample_variance(&grads),
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of log2(variance) against n over a scan's rows.
pub fn log2_variance_slope(rows: &[VarianceScanRow]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(QflError::input("slope needs at least two rows".to_string()));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n_qubits as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.sample_variance.log2()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Estimate the mini-batch gradient deviation E||ḡ - g_B||²: the mean over
/// `trials` of the squared distance between the full-batch gradient and a
/// without-replacement mini-batch gradient. Batches are summed in index
/// order, so `batch_size == dataset size` gives exactly zero.
pub fn empirical_minibatch_variance(
    model: &QnnModel,
    dataset: &Batch,
    batch_size: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(QflError::config(format!("need >= 100 trials, got {trials}")));
    }
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(QflError::input(format!(
            "batch_size {batch_size} invalid for {} samples",
            dataset.len()
        )));
    }
    let full = grad_parameter_shift(model, &model.params, dataset)?;
    let devs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<f64> {
            let mut rng = stream(seed, &[0x0B47, trial as u64]);
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            for i in 0..batch_size {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(batch_size);
            idx.sort_unstable();
            let mini = Batch::new(
                idx.iter().map(|&i| dataset.inputs[i].clone()).collect(),
                idx.iter().map(|&i| dataset.labels[i]).collect(),
            )?;
            let g = grad_parameter_shift(model, &model.params, &mini)?;
            Ok(full.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(devs.iter().sum::<f64>() / trials as f64)
}

/// Verdict of checking a measured trajectory against the convex bound.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub pass: bool,
    /// L(θ̄^T) - L(θ*) for the average iterate θ̄.
    pub measured_gap: f64,
    pub bound: ConvexBound,
    /// measured / bound; comfortably below 1 on conforming runs.
    pub ratio: f64,
}

/// Check a quadratic-federation trajectory against the convex bound at the
/// horizon `rounds`: the average iterate θ̄ = (1/T) Σ θ^(t) over t = 0..T-1
/// must satisfy L(θ̄) - L(θ*) ≤ bound.
pub fn verify_convex_convergence(
    problem: &crate::data::QuadraticProblem,
    trajectory: &[Vec<f64>],
    inputs: &BoundInputs,
) -> Result<ConvergenceReport> {
    let t = inputs.rounds;
    if trajectory.len() < t {
        return Err(QflError::input(format!(
            "trajectory has {} states, need at least {t}",
            trajectory.len()
        )));
    }
    let dim = problem.dim;
    let mut avg = vec![0.0; dim];
    for state in &trajectory[..t] {
        for (a, s) in avg.iter_mut().zip(state) {
            *a += s;
        }
    }
    for a in avg.iter_mut() {
        *a /= t as f64;
    }
    let star = problem.global_optimum();
    let measured_gap = problem.global_loss(&avg) - problem.global_loss(&star);
    let bound = theorem3_bound(inputs)?;
    let ratio = if bound.total > 0.0 { measured_gap / bound.total } else { f64::INFINITY };
    Ok(ConvergenceReport { pass: measured_gap <= bound.total, measured_gap, bound, ratio })
}

/// Bounded-heterogeneity proxy σ_g² for a quadratic federation: the max over
/// the visited trajectory of (1/U) Σ_u ||∇L_u(θ) - ∇L(θ)||².
pub fn measure_sigma_g_sq(
    problem: &crate::data::QuadraticProblem,
    trajectory: &[Vec<f64>],
) -> f64 {
    let u = problem.curvatures.len();
    let mut worst = 0.0f64;
    for theta in trajectory {
        let global = problem.global_grad(theta);
        let mut acc = 0.0;
        for (a, c) in problem.curvatures.iter().zip(&problem.optima) {
            let d2: f64 = theta
                .iter()
                .zip(c)
                .zip(&global)
                .map(|((t, ci), g)| {
                    let local = a * (t - ci);
                    (local - g) * (local - g)
                })
                .sum();
            acc += d2;
        }
        worst = worst.max(acc / u as f64);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    fn base_inputs() -> BoundInputs {
        BoundInputs {
            eta_l: 0.01,
            tau: 4,
            rounds: 50,
            smoothness: 2.0,
            mu: 0.5,
            sigma_star_sq: 1.5,
            sigma_sq: 0.8,
            sigma_g_sq: 0.6,
            n_qubits: 4,
            theta0_gap: 9.0,
            loss_drop: 3.0,
            kappa: 0.5,
            vartheta_sq: 0.0,
        }
    }

    fn reevaluate_convex(i: &BoundInputs) -> f64 {
        // independent re-evaluation of the four closed forms
        let (eta, tau, t, l) = (i.eta_l, i.tau as f64, i.rounds as f64, i.smoothness);
        let vf = 3.0 / (2.0f64.powi(2 * i.n_qubits as i32) - 1.0);
        3.0 * i.theta0_gap / (t * eta * tau)
            + 36.0 * eta.powi(2) * tau * (tau - 1.0) * l * i.sigma_star_sq
            + 9.0 * eta * tau * i.sigma_star_sq
            + (2.0 * tau * tau + 3.0 * tau + 1.0) * eta.powi(2) * i.sigma_sq * vf
    }

    fn reevaluate_nonconvex(i: &BoundInputs) -> f64 {
        let (eta, tau, t, l, k) = (i.eta_l, i.tau as f64, i.rounds as f64, i.smoothness, i.kappa);
        8.0 * i.loss_drop / (t * eta * tau * k)
            + 40.0 * t * eta.powi(2) * tau * (tau - 1.0) * l * l * i.sigma_g_sq / k
            + 24.0 * t * eta * tau * l * i.sigma_g_sq / k
    }

    #[test]
    fn convex_bound_vanishes_when_sources_vanish() {
        let mut i = base_inputs();
        i.sigma_star_sq = 0.0;
        i.sigma_sq = 0.0;
        i.theta0_gap = 0.0;
        let b = theorem3_bound(&i).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.terms, [0.0; 4]);
    }

    #[test]
    fn convex_drift_term_zero_at_tau_one() {
        let mut i = base_inputs();
        i.tau = 1;
        let b = theorem3_bound(&i).unwrap();
        assert_eq!(b.terms[1], 0.0);
    }

    #[test]
    fn convex_bound_matches_reevaluation_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(200);
        for _ in 0..50 {
            let i = BoundInputs {
                eta_l: rng.gen_range(1e-4..0.1),
                tau: rng.gen_range(1..8),
                rounds: rng.gen_range(1..500),
                smoothness: rng.gen_range(0.1..5.0),
                mu: rng.gen_range(0.01..1.0),
                sigma_star_sq: rng.gen_range(0.0..4.0),
                sigma_sq: rng.gen_range(0.0..4.0),
                sigma_g_sq: rng.gen_range(0.0..4.0),
                n_qubits: rng.gen_range(1..10),
                theta0_gap: rng.gen_range(0.0..10.0),
                loss_drop: rng.gen_range(0.0..5.0),
                kappa: rng.gen_range(0.05..1.0),
                vartheta_sq: 0.0,
            };
            let b = theorem3_bound(&i).unwrap();
            assert!((b.total - reevaluate_convex(&i)).abs() <= 1e-12 * (1.0 + b.total));
            let b4 = theorem4_bound(&i).unwrap();
            assert!((b4.total - reevaluate_nonconvex(&i)).abs() <= 1e-12 * (1.0 + b4.total));
        }
    }

    #[test]
    fn nonconvex_bound_zero_without_drop_or_heterogeneity() {
        let mut i = base_inputs();
        i.sigma_g_sq = 0.0;
        i.loss_drop = 0.0;
        assert_eq!(theorem4_bound(&i).unwrap().total, 0.0);
    }

    #[test]
    fn halving_kappa_doubles_every_nonconvex_term() {
        let mut i = base_inputs();
        let a = theorem4_bound(&i).unwrap();
        i.kappa /= 2.0;
        let b = theorem4_bound(&i).unwrap();
        for (x, y) in a.terms.iter().zip(&b.terms) {
            assert!((y / x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nonconvex_rejects_bad_kappa() {
        let mut i = base_inputs();
        i.kappa = 0.0;
        assert!(theorem4_bound(&i).is_err());
        i.kappa = 1.5;
        assert!(theorem4_bound(&i).is_err());
    }

    #[test]
    fn bounds_are_monotone_in_their_inputs() {
        let grid = [0.0, 0.5, 1.0, 2.0, 4.0];
        let mut prev = -1.0;
        for &s in &grid {
            let mut i = base_inputs();
            i.sigma_star_sq = s;
            let total = theorem3_bound(&i).unwrap().total;
            assert!(total >= prev);
            prev = total;
        }
        // increasing n never increases the quantum term
        let mut prev_q = f64::INFINITY;
        for n in 1..=10 {
            let mut i = base_inputs();
            i.n_qubits = n;
            let q = theorem3_bound(&i).unwrap().terms[3];
            assert!(q <= prev_q);
            prev_q = q;
        }
    }

    #[test]
    fn quantum_term_collapses_at_large_qubit_counts() {
        let mut i = base_inputs();
        i.n_qubits = 2;
        let at2 = theorem3_bound(&i).unwrap().terms[3];
        i.n_qubits = 10;
        let at10 = theorem3_bound(&i).unwrap().terms[3];
        assert!(at10 / at2 < 1e-4);
    }

    #[test]
    fn step_window_flags() {
        let mut i = base_inputs();
        // tau = 4, L = 2: upper = 1/48, lower = 1/(2sqrt6*32)
        i.eta_l = 1.0 / 60.0;
        assert!(!i.step_window_violated());
        i.eta_l = 1.0 / 40.0;
        assert!(i.step_window_violated());
        assert!(theorem3_bound(&i).unwrap().step_window_warning);
        // tau = 1: the window is empty below, only the upper bound binds
        i.tau = 1;
        i.eta_l = 0.05;
        assert!(!i.step_window_violated());
    }

    #[test]
    fn scan_is_deterministic_and_rejects_small_samples() {
        assert!(barren_plateau_scan(&[2], &[5], 50, 1).is_err());
        let a = barren_plateau_scan(&[2, 3], &[5], 120, 9).unwrap();
        let b = barren_plateau_scan(&[2, 3], &[5], 120, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.sample_variance >= 0.0));
    }

    #[test]
    fn scan_csv_layout() {
        let rows = vec![VarianceScanRow { n_qubits: 2, layers: 5, n_samples: 120, sample_variance: 0.25 }];
        assert_eq!(
            scan_rows_to_csv(&rows),
            "n_qubits,layers,n_samples,sample_variance\n2,5,120,0.25\n"
        );
    }

    fn tiny_model(n: usize, seed: u64) -> QnnModel {
        let (circuit, params) = random_layered_circuit(n, 6, seed).unwrap();
        QnnModel::new(circuit, params, 0).unwrap()
    }

    fn random_dataset(n: usize, len: usize, label: f64, seed: u64) -> Batch {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Batch::new(
            (0..len).map(|_| (0..n).map(|_| rng.gen_range(0.0..PI)).collect()).collect(),
            vec![label; len],
        )
        .unwrap()
    }

    #[test]
    fn minibatch_variance_full_batch_is_exactly_zero() {
        let model = tiny_model(2, 3);
        let data = random_dataset(2, 12, 0.5, 4);
        let v = empirical_minibatch_variance(&model, &data, 12, 100, 5).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn minibatch_variance_is_nonnegative_and_validates() {
        let model = tiny_model(2, 6);
        let data = random_dataset(2, 10, 0.5, 7);
        assert!(empirical_minibatch_variance(&model, &data, 11, 100, 1).is_err());
        assert!(empirical_minibatch_variance(&model, &data, 4, 99, 1).is_err());
        let v = empirical_minibatch_variance(&model, &data, 4, 100, 1).unwrap();
        assert!(v >= 0.0);
    }

    #[test]
    fn convergence_report_trivially_passes_at_the_optimum() {
        let problem = crate::data::QuadraticProblem {
            curvatures: vec![1.0, 1.0],
            optima: vec![vec![0.0], vec![0.0]],
            dim: 1,
        };
        let mut i = base_inputs();
        i.rounds = 3;
        i.theta0_gap = 0.0;
        i.sigma_star_sq = 0.0;
        i.sigma_sq = 0.0;
        let traj = vec![vec![0.0]; 3];
        let r = verify_convex_convergence(&problem, &traj, &i).unwrap();
        assert!(r.pass);
        assert_eq!(r.measured_gap, 0.0);
    }

    #[test]
    fn sigma_g_proxy_zero_for_homogeneous_clients() {
        let problem = crate::data::QuadraticProblem {
            curvatures: vec![1.0, 1.0],
            optima: vec![vec![0.3, -0.2], vec![0.3, -0.2]],
            dim: 2,
        };
        let traj = vec![vec![1.0, 1.0], vec![0.5, 0.7]];
        assert_eq!(measure_sigma_g_sq(&problem, &traj), 0.0);
    }
}
