//! Synchronous federated orchestration: client sampling (uniform or
//! FIM-weighted), broadcast, local training fan-out, sparsified aggregation
//! and per-round bookkeeping.
//!
//! Rounds are deterministic for a fixed (config, seed) at any worker count:
//! per-client random streams are derived from (seed, round, client id) so
//! results do not depend on scheduling order, and every reduction runs in
//! fixed client order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::client::{
    accept_for_aggregation, fim_trace_from_grads, local_meta_update, sparsify,
    split_support_query, LocalConfig, Objective, QnnObjective, QuadraticObjective,
};
use crate::data::QuadraticProblem;
use crate::error::{QflError, Result};
use crate::privacy::{BudgetLedger, PrivacyParams};
use crate::qnn::{batch_loss, per_sample_grads, Batch, QnnModel};

/// Derive an independent random stream from the run seed and a role tag.
/// SplitMix64 steps over the mixed words keep streams decorrelated.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha12Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut acc = splitmix(seed);
    for &p in parts {
        acc = splitmix(acc ^ p);
    }
    ChaCha12Rng::seed_from_u64(acc)
}

/// Client sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    /// Without-replacement draws proportional to FIM traces.
    Fim,
}

/// Global model parameters at a given round.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub params: Vec<f64>,
    pub round: usize,
}

impl GlobalModel {
    pub fn new(params: Vec<f64>, round: usize) -> Result<Self> {
        if params.iter().any(|p| !p.is_finite()) {
            return Err(QflError::numerical("global model has non-finite entries".to_string()));
        }
        Ok(GlobalModel { params, round })
    }
}

/// Orchestration settings for a training run.
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// U: total clients in the federation.
    pub total_clients: usize,
    /// K: clients per round.
    pub clients_per_round: usize,
    /// T: communication rounds.
    pub rounds: usize,
    pub local: LocalConfig,
    /// η_g: server learning rate; 1.0 is plain averaging.
    pub eta_g: f64,
    pub sampling: Sampling,
    pub seed: u64,
    /// Record θ^(t) after every round (for convergence analysis).
    pub capture_trajectory: bool,
    /// Samples per client used to estimate the FIM trace; 0 = all.
    pub fim_subsample: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            total_clients: 4,
            clients_per_round: 2,
            rounds: 10,
            local: LocalConfig::default(),
            eta_g: 1.0,
            sampling: Sampling::Uniform,
            seed: 0,
            capture_trajectory: false,
            fim_subsample: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(QflError::config("total_clients U must be >= 1".to_string()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(QflError::config(format!(
                "clients_per_round K = {} must satisfy 1 <= K <= U = {}",
                self.clients_per_round, self.total_clients
            )));
        }
        if self.rounds == 0 {
            return Err(QflError::config("rounds T must be >= 1".to_string()));
        }
        if !(self.eta_g >= 0.0) || !self.eta_g.is_finite() {
            return Err(QflError::config(format!("eta_g must be >= 0, got {}", self.eta_g)));
        }
        self.local.validate()
    }
}

/// Select K distinct clients. Uniform mode draws a uniform K-subset; FIM mode
/// draws sequentially without replacement with probability proportional to
/// the traces, falling back to uniform when every trace is zero. Returned ids
/// are sorted ascending. Deterministic given the stream.
pub fn sample_clients(
    total: usize,
    k: usize,
    traces: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(QflError::config(format!(
            "cannot select {k} of {total} clients"
        )));
    }
    let mut selected = match traces {
        None => {
            let mut ids: Vec<usize> = (0..total).collect();
            for i in 0..k {
                let j = rng.gen_range(i..total);
                ids.swap(i, j);
            }
            ids.truncate(k);
            ids
        }
        Some(traces) => {
            if traces.len() != total {
                return Err(QflError::config(format!(
                    "{} traces for {total} clients",
                    traces.len()
                )));
            }
            if traces.iter().any(|t| *t < 0.0 || !t.is_finite()) {
                return Err(QflError::input("FIM traces must be finite and >= 0".to_string()));
            }
            if traces.iter().all(|t| *t == 0.0) {
                return sample_clients(total, k, None, rng);
            }
            let mut pool: Vec<usize> = (0..total).collect();
            let mut weights: Vec<f64> = traces.to_vec();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let sum: f64 = weights.iter().sum();
                let chosen = if sum <= 0.0 {
                    rng.gen_range(0..pool.len())
                } else {
                    let mut u = rng.gen_range(0.0..sum);
                    let mut idx = pool.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        if u < *w {
                            idx = i;
                            break;
                        }
                        u -= *w;
                    }
                    idx
                };
                picked.push(pool.remove(chosen));
                weights.remove(chosen);
            }
            picked
        }
    };
    selected.sort_unstable();
    Ok(selected)
}

/// A transmitted model: kept (index, value) pairs of the sparsified φ̂.
#[derive(Debug, Clone)]
pub struct SparseUpdate {
    pub kept: Vec<(usize, f64)>,
    pub dim: usize,
}

impl SparseUpdate {
    /// Reconstruct a dense vector, filling dropped coordinates from `fill`.
    /// A sparsified zero means "unchanged enough", so missing coordinates
    /// inherit the previous global value.
    pub fn densify(&self, fill: &[f64]) -> Result<Vec<f64>> {
        if fill.len() != self.dim {
            return Err(QflError::structural(format!(
                "fill vector has {} coordinates, update has {}",
                fill.len(),
                self.dim
            )));
        }
        let mut out = fill.to_vec();
        for &(i, v) in &self.kept {
            if i >= self.dim {
                return Err(QflError::structural(format!(
                    "kept index {i} out of bounds for dimension {}",
                    self.dim
                )));
            }
            out[i] = v;
        }
        Ok(out)
    }
}

/// Average the accepted updates and step the global model:
/// θ' = θ + η_g (mean - θ). Errors on an empty list; the caller treats that
/// round as a no-op.
pub fn aggregate(accepted: &[SparseUpdate], eta_g: f64, prev: &GlobalModel) -> Result<GlobalModel> {
    if accepted.is_empty() {
        return Err(QflError::input("no accepted client models to aggregate".to_string()));
    }
    let dim = prev.params.len();
    let mut mean = vec![0.0; dim];
    for update in accepted {
        let dense = update.densify(&prev.params)?;
        for (m, v) in mean.iter_mut().zip(&dense) {
            *m += v;
        }
    }
    let n = accepted.len() as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    let params: Vec<f64> = prev
        .params
        .iter()
        .zip(&mean)
        .map(|(p, m)| p + eta_g * (m - p))
        .collect();
    GlobalModel::new(params, prev.round + 1)
}

/// One round's bookkeeping.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub sigma_t_sq: f64,
    pub selected: Vec<usize>,
    pub accepted: Vec<usize>,
    pub global_loss: f64,
    pub test_accuracy: f64,
    pub epsilon_glob: f64,
}

/// Render records as CSV (UTF-8, LF, header row). Client id lists are
/// semicolon-joined.
pub fn records_to_csv(records: &[RoundRecord]) -> String {
    let mut out =
        String::from("round,sigma_t_sq,selected,accepted,global_loss,test_accuracy,epsilon_glob\n");
    for r in records {
        let sel: Vec<String> = r.selected.iter().map(|u| u.to_string()).collect();
        let acc: Vec<String> = r.accepted.iter().map(|u| u.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.sigma_t_sq,
            sel.join(";"),
            acc.join(";"),
            r.global_loss,
            r.test_accuracy,
            r.epsilon_glob
        ));
    }
    out
}

/// The federated task being trained.
#[derive(Debug)]
pub enum Problem {
    Quadratic(QuadraticProblem),
    Qnn {
        /// Model template; per-round parameters come from the global model.
        model: QnnModel,
        /// One local dataset per client.
        partitions: Vec<Batch>,
        /// Held-out evaluation set.
        test: Batch,
    },
}

impl Problem {
    pub fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.dim,
            Problem::Qnn { model, .. } => model.params.len(),
        }
    }

    pub fn n_clients(&self) -> usize {
        match self {
            Problem::Quadratic(q) => q.curvatures.len(),
            Problem::Qnn { partitions, .. } => partitions.len(),
        }
    }

    fn objective(&self, client: usize) -> Box<dyn Objective + '_> {
        match self {
            Problem::Quadratic(q) => Box::new(QuadraticObjective {
                curvature: q.curvatures[client],
                optimum: q.optima[client].clone(),
                pseudo_len: 4,
            }),
            Problem::Qnn { model, partitions, .. } => Box::new(QnnObjective {
                model: model.clone(),
                batch: partitions[client].clone(),
            }),
        }
    }

    /// Global loss and test accuracy at `params`. Accuracy is NaN for tasks
    /// without a classification readout.
    pub fn evaluate(&self, params: &[f64]) -> Result<(f64, f64)> {
        match self {
            Problem::Quadratic(q) => Ok((q.global_loss(params), f64::NAN)),
            Problem::Qnn { model, test, .. } => {
                let preds: Vec<f64> = test
                    .inputs
                    .par_iter()
                    .map(|x| model.forward_with(params, x))
                    .collect::<Result<Vec<f64>>>()?;
                let mut loss = 0.0;
                let mut correct = 0usize;
                for (p, &y) in preds.iter().zip(&test.labels) {
                    loss += (p - y) * (p - y);
                    if (*p >= 0.5) == (y >= 0.5) {
                        correct += 1;
                    }
                }
                Ok((
                    loss / test.len() as f64,
                    correct as f64 / test.len() as f64,
                ))
            }
        }
    }

    /// FIM trace of one client at `params`: the mean squared per-sample loss
    /// gradient norm, over at most `subsample` samples (0 = all).
    fn fim_trace_at(&self, client: usize, params: &[f64], subsample: usize, seed: u64) -> Result<f64> {
        match self {
            Problem::Quadratic(q) => {
                let g: Vec<f64> = params
                    .iter()
                    .zip(&q.optima[client])
                    .map(|(t, c)| q.curvatures[client] * (t - c))
                    .collect();
                fim_trace_from_grads([g.as_slice()])
            }
            Problem::Qnn { model, partitions, .. } => {
                let batch = &partitions[client];
                let m = model.with_params(params)?;
                let take = if subsample == 0 { batch.len() } else { subsample.min(batch.len()) };
                let mut rng = stream(seed, &[0xF1A7, client as u64]);
                let mut idx: Vec<usize> = (0..batch.len()).collect();
                for i in 0..take {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx.truncate(take);
                idx.sort_unstable();
                let sub = Batch::new(
                    idx.iter().map(|&i| batch.inputs[i].clone()).collect(),
                    idx.iter().map(|&i| batch.labels[i]).collect(),
                )?;
                let grads = per_sample_grads(&m, params, &sub)?;
                fim_trace_from_grads(grads.iter().map(|g| g.as_slice()))
            }
        }
    }

    /// Mean training loss across all client partitions at `params`.
    pub fn train_loss(&self, params: &[f64]) -> Result<f64> {
        match self {
            Problem::Quadratic(q) => Ok(q.global_loss(params)),
            Problem::Qnn { model, partitions, .. } => {
                let losses: Vec<f64> = partitions
                    .par_iter()
                    .map(|b| batch_loss(model, params, b))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(losses.iter().sum::<f64>() / losses.len() as f64)
            }
        }
    }
}

/// Outcome of one client's local round.
struct ClientOutcome {
    id: usize,
    update: Option<SparseUpdate>,
    accepted: bool,
    dropped: usize,
    filter_violation: bool,
    failed: Option<String>,
}

/// Everything a run produces.
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: Vec<f64>,
    pub ledger: BudgetLedger,
    /// θ^(t) for t = 0..=T when trajectory capture is on (index 0 = init).
    pub trajectory: Vec<Vec<f64>>,
    /// Mean fraction of coordinates dropped per transmitted model.
    pub mean_drop_fraction: f64,
    /// Transmissions whose φ̂ violated the b/λ filter (must stay zero).
    pub filter_violations: usize,
    /// Warnings emitted during the run (no-op rounds, client failures).
    pub warnings: Vec<String>,
}

/// Execute T synchronous rounds of the federated loop: sample clients,
/// broadcast, run τ local meta-updates with the scheduled noise variance,
/// sparsify and filter, aggregate the accepted models, charge the budget
/// ledger and evaluate the global model.
pub fn run_training(
    cfg: &TrainingConfig,
    problem: &Problem,
    privacy: &PrivacyParams,
    init: Vec<f64>,
) -> Result<RunOutput> {
    cfg.validate()?;
    privacy.validate()?;
    if problem.n_clients() != cfg.total_clients {
        return Err(QflError::config(format!(
            "problem defines {} clients but config expects {}",
            problem.n_clients(),
            cfg.total_clients
        )));
    }
    if init.len() != problem.dim() {
        return Err(QflError::config(format!(
            "initial parameters have dimension {}, problem needs {}",
            init.len(),
            problem.dim()
        )));
    }

    let b = privacy.estimation_error;
    let lambda = privacy.lambda;
    let eps_per_round = privacy.epsilon / cfg.rounds as f64;

    let mut global = GlobalModel::new(init, 0)?;
    let mut ledger = BudgetLedger::new();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut trajectory = Vec::new();
    let mut warnings = Vec::new();
    let mut drop_fractions: Vec<f64> = Vec::new();
    let mut filter_violations = 0usize;

    if cfg.capture_trajectory {
        trajectory.push(global.params.clone());
    }

    for t in 0..cfg.rounds {
        let sigma_t_sq = privacy.round_sigma_sq(t)?;

        let traces = match cfg.sampling {
            Sampling::Uniform => None,
            Sampling::Fim => {
                let per_client: Vec<f64> = (0..cfg.total_clients)
                    .into_par_iter()
                    .map(|u| {
                        problem.fim_trace_at(u, &global.params, cfg.fim_subsample, cfg.seed ^ t as u64)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Some(per_client)
            }
        };

        let mut sample_rng = stream(cfg.seed, &[0x5A3F, t as u64]);
        let selected = sample_clients(
            cfg.total_clients,
            cfg.clients_per_round,
            traces.as_deref(),
            &mut sample_rng,
        )?;

        let broadcast = global.params.clone();
        let outcomes: Vec<ClientOutcome> = selected
            .par_iter()
            .map(|&u| {
                let objective = problem.objective(u);
                let mut rng = stream(cfg.seed, &[0xC11E, t as u64, u as u64]);
                let run = (|| -> Result<(SparseUpdate, bool, usize)> {
                    let (support, query) =
                        split_support_query(objective.len(), cfg.local.support_fraction, &mut rng)?;
                    let phi = local_meta_update(
                        objective.as_ref(),
                        &broadcast,
                        &support,
                        &query,
                        &cfg.local,
                        sigma_t_sq,
                        &mut rng,
                    )?;
                    let sparse = sparsify(&phi, &broadcast, b, lambda)?;
                    let ok = accept_for_aggregation(&sparse.phi_hat, &phi, b, lambda)?;
                    Ok((
                        SparseUpdate { kept: sparse.kept, dim: phi.len() },
                        ok,
                        sparse.dropped,
                    ))
                })();
                match run {
                    Ok((update, accepted, dropped)) => ClientOutcome {
                        id: u,
                        update: Some(update),
                        accepted,
                        dropped,
                        filter_violation: !accepted,
                        failed: None,
                    },
                    Err(e) => ClientOutcome {
                        id: u,
                        update: None,
                        accepted: false,
                        dropped: 0,
                        filter_violation: false,
                        failed: Some(e.to_string()),
                    },
                }
            })
            .collect();

        let dim = problem.dim() as f64;
        let mut accepted_ids = Vec::new();
        let mut accepted_updates = Vec::new();
        let mut charges = Vec::new();
        for o in &outcomes {
            if let Some(reason) = &o.failed {
                warnings.push(format!(
                    "round {t}: client {} aborted ({reason}); excluded from aggregation",
                    o.id
                ));
                continue;
            }
            charges.push((o.id, eps_per_round));
            drop_fractions.push(o.dropped as f64 / dim);
            if o.filter_violation {
                filter_violations += 1;
            }
            if o.accepted {
                accepted_ids.push(o.id);
                accepted_updates.push(o.update.clone().expect("update present"));
            }
        }

        if accepted_updates.is_empty() {
            warnings.push(format!("round {t}: no accepted client models; round is a no-op"));
            global.round += 1;
        } else {
            global = aggregate(&accepted_updates, cfg.eta_g, &global)?;
        }

        let epsilon_glob = ledger.record_and_total(t, &charges)?;
        let (global_loss, test_accuracy) = problem.evaluate(&global.params)?;

        if cfg.capture_trajectory {
            trajectory.push(global.params.clone());
        }
        records.push(RoundRecord {
            round: t,
            sigma_t_sq,
            selected,
            accepted: accepted_ids,
            global_loss,
            test_accuracy,
            epsilon_glob,
        });
    }

    let mean_drop_fraction = if drop_fractions.is_empty() {
        0.0
    } else {
        drop_fractions.iter().sum::<f64>() / drop_fractions.len() as f64
    };

    Ok(RunOutput {
        records,
        final_params: global.params,
        ledger,
        trajectory,
        mean_drop_fraction,
        filter_violations,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::HessianMode;
    use crate::data::make_quadratic_federation;

    fn quad_problem(seed: u64, clients: usize, dim: usize, het: f64) -> Problem {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Problem::Quadratic(make_quadratic_federation(clients, dim, 0.5, 2.0, het, &mut rng).unwrap())
    }

    fn clean_privacy() -> PrivacyParams {
        PrivacyParams {
            sigma0_sq: 0.0,
            estimation_error: 1e-9,
            lambda: 1.0,
            ..PrivacyParams::default()
        }
    }

    #[test]
    fn uniform_sampling_is_a_k_subset() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = sample_clients(10, 4, None, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&u| u < 10));
        assert!(sample_clients(3, 4, None, &mut rng).is_err());
    }

    #[test]
    fn fim_sampling_frequency_matches_traces() {
        // traces [1, 3], K=1: client 1 chosen with frequency 3/4 ± 0.01
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let trials = 100_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let s = sample_clients(2, 1, Some(&[1.0, 3.0]), &mut rng).unwrap();
            if s[0] == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn fim_equal_traces_look_uniform() {
        // chi-square goodness of fit over 10^5 single draws from 4 clients,
        // critical value 11.345 at alpha = 0.01 with 3 degrees of freedom
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let trials = 100_000usize;
        let mut counts = [0f64; 4];
        for _ in 0..trials {
            let s = sample_clients(4, 1, Some(&[2.5, 2.5, 2.5, 2.5]), &mut rng).unwrap();
            counts[s[0]] += 1.0;
        }
        let expected = trials as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected) * (c - expected) / expected).sum();
        assert!(chi2 < 11.345, "chi2 {chi2}");
    }

    #[test]
    fn fim_zero_traces_fall_back_to_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let s = sample_clients(5, 2, Some(&[0.0; 5]), &mut rng).unwrap();
        assert_eq!(s.len(), 2);
        let mut rng2 = ChaCha12Rng::seed_from_u64(4);
        let s2 = sample_clients(5, 2, None, &mut rng2).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn fim_rejects_negative_traces() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert!(sample_clients(2, 1, Some(&[1.0, -0.5]), &mut rng).is_err());
    }

    #[test]
    fn aggregate_dense_mean() {
        let prev = GlobalModel::new(vec![0.0, 0.0], 0).unwrap();
        let a = SparseUpdate { kept: vec![(0, 1.0), (1, 0.0)], dim: 2 };
        let b = SparseUpdate { kept: vec![(0, 0.0), (1, 1.0)], dim: 2 };
        let next = aggregate(&[a, b], 1.0, &prev).unwrap();
        assert_eq!(next.params, vec![0.5, 0.5]);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn aggregate_identical_models_is_identity() {
        let prev = GlobalModel::new(vec![0.3, -0.7], 3).unwrap();
        let u = SparseUpdate { kept: vec![(0, 1.5), (1, 2.5)], dim: 2 };
        let next = aggregate(&[u.clone(), u.clone(), u], 1.0, &prev).unwrap();
        assert!((next.params[0] - 1.5).abs() < 1e-15);
        assert!((next.params[1] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn aggregate_frozen_server_with_zero_eta_g() {
        let prev = GlobalModel::new(vec![0.3, -0.7], 0).unwrap();
        let u = SparseUpdate { kept: vec![(0, 9.0), (1, 9.0)], dim: 2 };
        let next = aggregate(&[u], 0.0, &prev).unwrap();
        assert_eq!(next.params, prev.params);
    }

    #[test]
    fn aggregate_rejects_empty_list() {
        let prev = GlobalModel::new(vec![0.0], 0).unwrap();
        assert!(matches!(aggregate(&[], 1.0, &prev), Err(QflError::Input(_))));
    }

    #[test]
    fn densify_fills_dropped_coordinates_from_previous_global() {
        let u = SparseUpdate { kept: vec![(1, 5.0)], dim: 3 };
        let dense = u.densify(&[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(dense, vec![9.0, 5.0, 9.0]);
    }

    #[test]
    fn run_is_bit_deterministic_across_worker_counts() {
        let cfg = TrainingConfig {
            total_clients: 6,
            clients_per_round: 3,
            rounds: 5,
            seed: 42,
            capture_trajectory: true,
            sampling: Sampling::Fim,
            ..TrainingConfig::default()
        };
        let privacy = PrivacyParams { sigma0_sq: 0.01, ..clean_privacy() };
        let problem = quad_problem(7, 6, 3, 1.0);
        let init = vec![1.0, -2.0, 0.5];

        let run_with_pool = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_training(&cfg, &problem, &privacy, init.clone()).unwrap())
        };
        let a = run_with_pool(1);
        let b = run_with_pool(4);
        assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
        for (x, y) in a.final_params.iter().zip(&b.final_params) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn run_records_have_the_contracted_shape() {
        let cfg = TrainingConfig {
            total_clients: 5,
            clients_per_round: 2,
            rounds: 7,
            seed: 9,
            ..TrainingConfig::default()
        };
        let privacy = clean_privacy();
        let problem = quad_problem(3, 5, 2, 0.5);
        let out = run_training(&cfg, &problem, &privacy, vec![1.0, 1.0]).unwrap();
        assert_eq!(out.records.len(), 7);
        for r in &out.records {
            assert_eq!(r.selected.len(), 2);
            assert!(r.accepted.iter().all(|u| r.selected.contains(u)));
        }
        // per-round charge is ε/T per selected client
        let expected = privacy.epsilon / cfg.rounds as f64 * 2.0 * 7.0;
        assert!((out.ledger.total() - expected).abs() < 1e-12);
        assert_eq!(out.filter_violations, 0);
    }

    #[test]
    fn single_client_quadratic_matches_two_step_recursion() {
        // one client, no noise, inert sparsifier: the global trajectory must
        // follow the hand-derived recursion
        // θ_{t+1} = θ_t (1 - β a (1 - η a)) + β a (1 - η a) c
        let a = 0.9;
        let c = 1.3;
        let problem = Problem::Quadratic(QuadraticProblem {
            curvatures: vec![a],
            optima: vec![vec![c]],
            dim: 1,
        });
        let cfg = TrainingConfig {
            total_clients: 1,
            clients_per_round: 1,
            rounds: 12,
            seed: 5,
            capture_trajectory: true,
            local: LocalConfig { eta: 0.2, beta: 0.5, tau: 1, ..LocalConfig::default() },
            ..TrainingConfig::default()
        };
        let out = run_training(&cfg, &problem, &clean_privacy(), vec![4.0]).unwrap();
        let rate = 1.0 - cfg.local.beta * a * (1.0 - cfg.local.eta * a);
        let mut theta = 4.0;
        for t in 0..12 {
            theta = theta * rate + (1.0 - rate) * c;
            assert!(
                (out.trajectory[t + 1][0] - theta).abs() < 1e-8,
                "round {t}: {} vs {theta}",
                out.trajectory[t + 1][0]
            );
        }
    }

    #[test]
    fn monotone_loss_on_clean_convex_runs() {
        // full participation, no noise, τ=1, step sizes inside the stable
        // window: global loss never increases
        let problem = quad_problem(11, 8, 4, 1.0);
        let cfg = TrainingConfig {
            total_clients: 8,
            clients_per_round: 8,
            rounds: 60,
            seed: 2,
            local: LocalConfig { eta: 0.05, beta: 0.05, tau: 1, ..LocalConfig::default() },
            ..TrainingConfig::default()
        };
        let out = run_training(&cfg, &problem, &clean_privacy(), vec![2.0; 4]).unwrap();
        for w in out.records.windows(2) {
            assert!(w[1].global_loss <= w[0].global_loss + 1e-12);
        }
    }

    #[test]
    fn all_clients_failing_makes_rounds_no_ops() {
        // a divergent configuration aborts every client with a numerical
        // error, so every round is a no-op and the global model never moves
        let problem = Problem::Quadratic(QuadraticProblem {
            curvatures: vec![1e200],
            optima: vec![vec![0.0]],
            dim: 1,
        });
        let cfg = TrainingConfig {
            total_clients: 1,
            clients_per_round: 1,
            rounds: 4,
            seed: 1,
            capture_trajectory: true,
            local: LocalConfig { eta: 1e200, beta: 1e200, ..LocalConfig::default() },
            ..TrainingConfig::default()
        };
        let out = run_training(&cfg, &problem, &clean_privacy(), vec![1e5]).unwrap();
        for r in &out.records {
            assert!(r.accepted.is_empty());
        }
        for snap in &out.trajectory {
            assert_eq!(snap[0], 1e5);
        }
        assert!(out.warnings.iter().any(|w| w.contains("no-op")));
        // failed clients never upload, so nothing is charged
        assert_eq!(out.ledger.total(), 0.0);
    }

    #[test]
    fn hvp_mode_runs_end_to_end() {
        let problem = quad_problem(13, 4, 2, 0.2);
        let cfg = TrainingConfig {
            total_clients: 4,
            clients_per_round: 4,
            rounds: 10,
            seed: 3,
            local: LocalConfig {
                eta: 0.05,
                beta: 0.05,
                tau: 2,
                hessian_mode: HessianMode::ExactHvp,
                ..LocalConfig::default()
            },
            ..TrainingConfig::default()
        };
        let out = run_training(&cfg, &problem, &clean_privacy(), vec![1.5, -0.5]).unwrap();
        assert!(out.records.last().unwrap().global_loss < out.records[0].global_loss);
    }
}
