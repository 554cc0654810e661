//! Client-side local training: support/query split, inner and meta updates
//! with injected Gaussian noise, magnitude sparsification, the acceptance
//! filter, and the Fisher-information trace used for informed sampling.
//!
//! One local iteration computes
//!
//! ```text
//! θ~ = θ - η ∇L(θ; support)
//! φ  = θ - β [I - η ∇²L(θ~; support)] [∇L(θ~; query) + G_t]
//! ```
//!
//! and repeats τ times with θ ← φ between iterations. Gradients are clipped
//! to `clip_norm` before use, and the noise G_t ~ N(0, σ_t² I) is fresh per
//! iteration. In `FirstOrder` mode the bracket is the identity; in `ExactHvp`
//! mode the Hessian-vector product is formed by central finite differences on
//! the gradient with step h = 1e-4 · (1 + ||θ~||).

use rand::Rng;

use crate::error::{QflError, Result};
use crate::privacy::gaussian_noise;
use crate::qnn::{grad_parameter_shift, per_sample_grads, Batch, QnnModel};

/// How the meta update treats the second-order bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// [I - η∇²L]v via finite-difference Hessian-vector products.
    ExactHvp,
    /// Identity bracket: plain two-step update.
    FirstOrder,
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LocalConfig {
    /// η: inner learning rate.
    pub eta: f64,
    /// β: meta learning rate.
    pub beta: f64,
    /// τ: local iterations per round.
    pub tau: usize,
    /// Fraction of the local dataset used as the support set.
    pub support_fraction: f64,
    pub hessian_mode: HessianMode,
    /// L: gradient clip bound; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Mini-batch size per inner iteration; 0 uses the full support/query set.
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            eta: 0.1,
            beta: 0.5,
            tau: 1,
            support_fraction: 0.5,
            hessian_mode: HessianMode::FirstOrder,
            clip_norm: f64::INFINITY,
            batch_size: 0,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(QflError::config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.beta >= 0.0) {
            return Err(QflError::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.tau < 1 {
            return Err(QflError::config("tau must be >= 1".to_string()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(QflError::config(format!(
                "support_fraction must be in (0, 1), got {}",
                self.support_fraction
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(QflError::config(format!(
                "clip_norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Per-client training state for one round.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// θ_u: working parameters, initialized from the broadcast global model.
    pub theta: Vec<f64>,
    /// φ_u: meta-updated parameters after local training.
    pub phi: Vec<f64>,
    /// φ̂_u: sparsified parameters for transmission.
    pub phi_hat: Vec<f64>,
    /// Tr(I_u): informativeness weight for sampling.
    pub fim_trace: f64,
}

/// A differentiable local objective evaluated on index subsets of the
/// client's dataset. Quadratic test problems and QNN tasks both implement it.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    /// Number of samples in the local dataset.
    fn len(&self) -> usize;
    fn loss(&self, theta: &[f64], subset: &[usize]) -> Result<f64>;
    fn grad(&self, theta: &[f64], subset: &[usize]) -> Result<Vec<f64>>;
}

/// QNN objective: mean MSE of a model over the indexed samples.
pub struct QnnObjective {
    pub model: QnnModel,
    pub batch: Batch,
}

impl QnnObjective {
    fn subset_batch(&self, subset: &[usize]) -> Result<Batch> {
        let inputs = subset.iter().map(|&i| self.batch.inputs[i].clone()).collect();
        let labels = subset.iter().map(|&i| self.batch.labels[i]).collect();
        Batch::new(inputs, labels)
    }
}

impl Objective for QnnObjective {
    fn dim(&self) -> usize {
        self.model.params.len()
    }

    fn len(&self) -> usize {
        self.batch.len()
    }

    fn loss(&self, theta: &[f64], subset: &[usize]) -> Result<f64> {
        crate::qnn::batch_loss(&self.model, theta, &self.subset_batch(subset)?)
    }

    fn grad(&self, theta: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
        grad_parameter_shift(&self.model, theta, &self.subset_batch(subset)?)
    }
}

/// Quadratic objective ½ a ||θ - c||²; the synthetic dataset carries
/// `pseudo_len` interchangeable samples so splits behave uniformly.
pub struct QuadraticObjective {
    pub curvature: f64,
    pub optimum: Vec<f64>,
    pub pseudo_len: usize,
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.optimum.len()
    }

    fn len(&self) -> usize {
        self.pseudo_len
    }

    fn loss(&self, theta: &[f64], _subset: &[usize]) -> Result<f64> {
        Ok(0.5
            * self.curvature
            * theta
                .iter()
                .zip(&self.optimum)
                .map(|(t, c)| (t - c) * (t - c))
                .sum::<f64>())
    }

    fn grad(&self, theta: &[f64], _subset: &[usize]) -> Result<Vec<f64>> {
        Ok(theta
            .iter()
            .zip(&self.optimum)
            .map(|(t, c)| self.curvature * (t - c))
            .collect())
    }
}

/// Disjoint, covering support/query split of `[0, len)`. The support takes
/// floor(fraction·len) indices (clamped so both sides are nonempty);
/// deterministic given the stream.
pub fn split_support_query(
    len: usize,
    support_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if len < 2 {
        return Err(QflError::input(format!(
            "dataset of {len} samples cannot be split into support and query"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    // partial Fisher-Yates
    for i in 0..len - 1 {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let support_len = ((support_fraction * len as f64).floor() as usize).clamp(1, len - 1);
    let query = idx.split_off(support_len);
    Ok((idx, query))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale `g` down to norm `clip` when it exceeds it.
pub fn clip_gradient(mut g: Vec<f64>, clip: f64) -> Vec<f64> {
    let norm = l2_norm(&g);
    if norm > clip {
        let s = clip / norm;
        for x in g.iter_mut() {
            *x *= s;
        }
    }
    g
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(QflError::numerical(format!("non-finite {what}")));
    }
    Ok(())
}

/// Hessian-vector product ∇²L(θ)·v by central finite differences on the
/// gradient along the direction of v.
fn hessian_vector_product(
    obj: &dyn Objective,
    theta: &[f64],
    subset: &[usize],
    v: &[f64],
    clip: f64,
) -> Result<Vec<f64>> {
    let vnorm = l2_norm(v);
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let h = 1e-4 * (1.0 + l2_norm(theta));
    let step = h / vnorm;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + step * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - step * d).collect();
    let gp = clip_gradient(obj.grad(&plus, subset)?, clip);
    let gm = clip_gradient(obj.grad(&minus, subset)?, clip);
    // (∇L(θ + h·d) - ∇L(θ - h·d)) / (2h) scaled back by ||v||, d = v/||v||
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) * vnorm / (2.0 * h))
        .collect())
}

/// Run τ local meta iterations starting from `theta0`, returning φ_u.
/// Fails with a numerical error (client aborts its round) when any loss or
/// gradient turns non-finite.
pub fn local_meta_update(
    obj: &dyn Objective,
    theta0: &[f64],
    support: &[usize],
    query: &[usize],
    cfg: &LocalConfig,
    sigma_t_sq: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if support.is_empty() || query.is_empty() {
        return Err(QflError::input("support and query sets must be nonempty".to_string()));
    }
    let dim = theta0.len();
    let mut theta = theta0.to_vec();
    for _ in 0..cfg.tau {
        let support_view = minibatch(support, cfg.batch_size, rng);
        let query_view = minibatch(query, cfg.batch_size, rng);

        let g_s = clip_gradient(obj.grad(&theta, &support_view)?, cfg.clip_norm);
        check_finite(&g_s, "support gradient")?;
        debug_assert!(l2_norm(&g_s) <= cfg.clip_norm * (1.0 + 1e-12));

        let theta_tilde: Vec<f64> = theta.iter().zip(&g_s).map(|(t, g)| t - cfg.eta * g).collect();

        let g_q = clip_gradient(obj.grad(&theta_tilde, &query_view)?, cfg.clip_norm);
        check_finite(&g_q, "query gradient")?;
        debug_assert!(l2_norm(&g_q) <= cfg.clip_norm * (1.0 + 1e-12));

        let noise = gaussian_noise(dim, sigma_t_sq, rng);
        let v: Vec<f64> = g_q.iter().zip(&noise).map(|(g, n)| g + n).collect();

        let bracket = match cfg.hessian_mode {
            HessianMode::FirstOrder => v,
            HessianMode::ExactHvp => {
                let hv = hessian_vector_product(obj, &theta_tilde, &support_view, &v, cfg.clip_norm)?;
                v.iter().zip(&hv).map(|(vi, hi)| vi - cfg.eta * hi).collect()
            }
        };

        for (t, b) in theta.iter_mut().zip(&bracket) {
            *t -= cfg.beta * b;
        }
        check_finite(&theta, "meta-updated parameters")?;
    }
    Ok(theta)
}

fn minibatch(subset: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch_size == 0 || batch_size >= subset.len() {
        return subset.to_vec();
    }
    let mut idx = subset.to_vec();
    for i in 0..batch_size {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(batch_size);
    idx
}

/// Sparsified model: the zeroed parameter vector plus its transmission
/// encoding as (index, value) pairs of the kept coordinates.
#[derive(Debug, Clone)]
pub struct Sparsified {
    /// φ̂ with dropped coordinates set to zero.
    pub phi_hat: Vec<f64>,
    /// Kept coordinates as (index, value) pairs, in index order.
    pub kept: Vec<(usize, f64)>,
    pub dropped: usize,
    /// ||φ - θ_ref||₂, logged as a local-vs-global diagnostic only.
    pub global_distance: f64,
}

/// Zero as many coordinates of φ as possible, smallest magnitude first
/// (ties broken by lowest index), subject to ||φ̂ - φ||₂ ≤ b/λ inclusive.
pub fn sparsify(phi: &[f64], theta_ref: &[f64], b: f64, lambda: f64) -> Result<Sparsified> {
    if !(b >= 0.0) || !(lambda > 0.0) {
        return Err(QflError::config(format!(
            "sparsify needs b >= 0 and lambda > 0, got b={b} lambda={lambda}"
        )));
    }
    if phi.len() != theta_ref.len() {
        return Err(QflError::structural(format!(
            "phi has {} coordinates but the reference has {}",
            phi.len(),
            theta_ref.len()
        )));
    }
    let budget_sq = (b / lambda) * (b / lambda);
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&i, &j| {
        phi[i]
            .abs()
            .partial_cmp(&phi[j].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut phi_hat = phi.to_vec();
    let mut dropped = 0usize;
    let mut spent = 0.0;
    for &i in &order {
        let cost = phi[i] * phi[i];
        if spent + cost <= budget_sq {
            spent += cost;
            phi_hat[i] = 0.0;
            dropped += 1;
        } else {
            break;
        }
    }
    let kept = phi_hat
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i, *v))
        .collect();
    let global_distance = phi
        .iter()
        .zip(theta_ref)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(Sparsified { phi_hat, kept, dropped, global_distance })
}

/// Acceptance filter: true iff ||φ̂ - φ||₂ ≤ b/λ, inclusive at the boundary.
/// Compared in squared form so it agrees exactly with `sparsify`'s budget.
pub fn accept_for_aggregation(phi_hat: &[f64], phi: &[f64], b: f64, lambda: f64) -> Result<bool> {
    if phi_hat.len() != phi.len() {
        return Err(QflError::structural(format!(
            "dimension mismatch: {} vs {}",
            phi_hat.len(),
            phi.len()
        )));
    }
    let dev_sq: f64 = phi_hat
        .iter()
        .zip(phi)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(dev_sq <= (b / lambda) * (b / lambda))
}

/// Empirical FIM trace from per-sample loss gradients: the mean squared
/// gradient norm. The likelihood constant cancels in normalized sampling
/// probabilities.
pub fn fim_trace_from_grads<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for g in grads {
        acc += g.iter().map(|x| x * x).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(QflError::input("fim trace needs a nonempty dataset".to_string()));
    }
    Ok(acc / count as f64)
}

/// FIM trace of a QNN model over a dataset batch.
pub fn fim_trace(model: &QnnModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(QflError::input("fim trace needs a nonempty dataset".to_string()));
    }
    let grads = per_sample_grads(model, &model.params, batch)?;
    fim_trace_from_grads(grads.iter().map(|g| g.as_slice()))
}
