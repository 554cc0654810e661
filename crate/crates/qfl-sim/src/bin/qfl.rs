//! Config-driven command line for the simulator. Every subcommand reads one
//! config file and writes its outputs under `--out`; reruns with the same
//! config and seed produce byte-identical CSVs at any worker count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qfl_sim::analysis::{
    barren_plateau_scan, empirical_minibatch_variance, log2_variance_slope, scan_rows_to_csv,
    theorem3_bound, theorem4_bound,
};
use qfl_sim::config::RunConfig;
use qfl_sim::error::QflError;
use qfl_sim::privacy::{lemma1_sigma_sq, variance_factor};
use qfl_sim::qnn::{random_layered_circuit, QnnModel};
use qfl_sim::server::{records_to_csv, run_training, stream};
use qfl_sim::Result;
use rand::Rng;

#[derive(Parser)]
#[command(name = "qfl", about = "Quantum federated learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (key = value with [sections]).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides [run] out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores. Overrides [run] workers.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a federated training run and write round/ledger CSVs.
    RunFl(Common),
    /// Scan gradient variance of random layered circuits across qubit counts.
    BarrenPlateau(Common),
    /// Estimate mini-batch gradient variance against the qubit-count law.
    VarianceCheck(Common),
    /// Print the calibrated noise floor, the σ_t² schedule and the projected budget.
    DpAudit(Common),
    /// Evaluate the convex and non-convex convergence bounds.
    Bounds(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&RunConfig, &Path) -> Result<()>) = match &cli.command {
        Command::RunFl(c) => (c, cmd_run_fl),
        Command::BarrenPlateau(c) => (c, cmd_barren_plateau),
        Command::VarianceCheck(c) => (c, cmd_variance_check),
        Command::DpAudit(c) => (c, cmd_dp_audit),
        Command::Bounds(c) => (c, cmd_bounds),
    };

    let cfg = match load_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("qfl-out"));
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create output directory: {e}");
        return ExitCode::from(3);
    }
    if cfg.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }

    match run(&cfg, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (QflError::Config(_) | QflError::Format(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| QflError::config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = RunConfig::from_text(&text)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn tagged(out: &Path, stem: &str, cfg: &RunConfig) -> PathBuf {
    out.join(format!("{stem}_seed{}_cfg{:016x}.csv", cfg.seed, cfg.source_hash()))
}

fn cmd_run_fl(cfg: &RunConfig, out: &Path) -> Result<()> {
    let training = cfg.training_config()?;
    let privacy = cfg.privacy_params()?;
    let (problem, init) = cfg.build_problem()?;
    let output = run_training(&training, &problem, &privacy, init)?;

    fs::write(out.join("rounds.csv"), records_to_csv(&output.records))?;
    fs::write(out.join("ledger.csv"), output.ledger.to_csv())?;

    let last = output.records.last().expect("at least one round");
    let mut summary = String::new();
    summary.push_str(&format!("config_hash = {:016x}\n", cfg.source_hash()));
    summary.push_str(&format!("seed = {}\n", cfg.seed));
    summary.push_str(&format!("rounds = {}\n", output.records.len()));
    summary.push_str(&format!("final_global_loss = {}\n", last.global_loss));
    summary.push_str(&format!("final_test_accuracy = {}\n", last.test_accuracy));
    summary.push_str(&format!("epsilon_glob = {}\n", last.epsilon_glob));
    summary.push_str(&format!("mean_drop_fraction = {}\n", output.mean_drop_fraction));
    summary.push_str(&format!("filter_violations = {}\n", output.filter_violations));
    summary.push_str(&format!("warnings = {}\n", output.warnings.len()));
    fs::write(out.join("summary.txt"), summary)?;

    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "run-fl: {} rounds, final loss {:.6}, accuracy {:.4}, eps_glob {:.4} -> {}",
        output.records.len(),
        last.global_loss,
        last.test_accuracy,
        last.epsilon_glob,
        out.display()
    );
    Ok(())
}

fn cmd_barren_plateau(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (ns, layers, samples) = cfg.scan_settings()?;
    let rows = barren_plateau_scan(&ns, &layers, samples, cfg.seed)?;
    let path = tagged(out, "scan", cfg);
    fs::write(&path, scan_rows_to_csv(&rows))?;
    println!("n_qubits  layers  samples  variance");
    for r in &rows {
        println!(
            "{:>8}  {:>6}  {:>7}  {:.6e}",
            r.n_qubits, r.layers, r.n_samples, r.sample_variance
        );
    }
    if ns.len() >= 2 && layers.len() == 1 {
        println!("log2-variance slope vs n: {:.3}", log2_variance_slope(&rows)?);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_variance_check(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = cfg.variance_settings()?;
    let mut csv = String::from("n_qubits,layers,dataset,batch_size,trials,estimate\n");
    let mut estimates = Vec::new();
    for &n in &s.n_qubits {
        let mut acc = 0.0;
        for c in 0..s.circuits {
            let mut crng = stream(cfg.seed, &[0xC1BC, n as u64, c as u64]);
            let (circuit, params) = random_layered_circuit(n, s.layers, crng.gen())?;
            let model = QnnModel::new(circuit, params, 0)?;
            let mut drng = stream(cfg.seed, &[0xDA7A, n as u64, c as u64]);
            let inputs: Vec<Vec<f64>> = (0..s.dataset)
                .map(|_| (0..n).map(|_| drng.gen_range(0.0..std::f64::consts::PI)).collect())
                .collect();
            let batch = qfl_sim::qnn::Batch::new(inputs, vec![0.5; s.dataset])?;
            acc += empirical_minibatch_variance(&model, &batch, s.batch_size, s.trials, cfg.seed ^ c as u64)?;
        }
        let estimate = acc / s.circuits as f64;
        csv.push_str(&format!(
            "{n},{},{},{},{},{estimate}\n",
            s.layers, s.dataset, s.batch_size, s.trials
        ));
        estimates.push((n, estimate));
        println!("n = {n}: estimated E||g_full - g_batch||^2 = {estimate:.6e}");
    }
    if estimates.len() >= 2 {
        let (n0, e0) = estimates[0];
        for &(n, e) in &estimates[1..] {
            let measured = e / e0;
            let predicted = variance_factor(n)? / variance_factor(n0)?;
            println!(
                "ratio n={n} / n={n0}: measured {measured:.5}, predicted {predicted:.5}, factor {:.2}",
                (measured / predicted).max(predicted / measured)
            );
        }
    }
    let path = tagged(out, "variance", cfg);
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_dp_audit(cfg: &RunConfig, out: &Path) -> Result<()> {
    let privacy = cfg.privacy_params()?;
    if !privacy.clip_bound.is_finite() {
        return Err(QflError::config(
            "[privacy] clip must be finite for dp-audit".to_string(),
        ));
    }
    let calibrated = lemma1_sigma_sq(&privacy)?;
    println!("calibrated sigma^2 (T-round guarantee): {calibrated}");
    println!(
        "schedule: sigma0_sq = {}, alpha = {}, enforce_dp = {}",
        privacy.sigma0_sq, privacy.alpha, privacy.enforce_dp
    );
    let mut csv = String::from("round,sigma_t_sq\n");
    println!("round  sigma_t_sq");
    for t in 0..privacy.rounds {
        let s = privacy.round_sigma_sq(t)?;
        println!("{t:>5}  {s:.6e}");
        csv.push_str(&format!("{t},{s}\n"));
    }
    let projected = privacy.epsilon * privacy.clients_per_round as f64;
    println!(
        "projected epsilon_glob after {} rounds x {} clients: {projected}",
        privacy.rounds, privacy.clients_per_round
    );
    let path = tagged(out, "dp_audit", cfg);
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bounds(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (inputs, sweep) = cfg.bound_inputs()?;
    let convex = theorem3_bound(&inputs)?;
    if convex.step_window_warning {
        let (lo, hi) = inputs.step_window();
        eprintln!(
            "warning: eta_l = {} outside the step-size window ({lo:.6}, {hi:.6}); bound still evaluated",
            inputs.eta_l
        );
    }
    println!("convex bound:");
    println!("  initialization   {:.6e}", convex.terms[0]);
    println!("  client drift     {:.6e}", convex.terms[1]);
    println!("  noise at optimum {:.6e}", convex.terms[2]);
    println!("  quantum variance {:.6e}", convex.terms[3]);
    println!("  total            {:.6e}", convex.total);
    let nonconvex = theorem4_bound(&inputs)?;
    println!("non-convex bound (kappa = {}):", inputs.kappa);
    println!("  descent          {:.6e}", nonconvex.terms[0]);
    println!("  client drift     {:.6e}", nonconvex.terms[1]);
    println!("  heterogeneity    {:.6e}", nonconvex.terms[2]);
    println!("  total            {:.6e}", nonconvex.total);

    let mut csv = String::from("kind,kappa,term1,term2,term3,term4,total\n");
    csv.push_str(&format!(
        "convex,,{},{},{},{},{}\n",
        convex.terms[0], convex.terms[1], convex.terms[2], convex.terms[3], convex.total
    ));
    csv.push_str(&format!(
        "nonconvex,{},{},{},{},,{}\n",
        inputs.kappa, nonconvex.terms[0], nonconvex.terms[1], nonconvex.terms[2], nonconvex.total
    ));
    if !sweep.is_empty() {
        println!("kappa sweep:");
        println!("  kappa   total");
        for &k in &sweep {
            let mut swept = inputs.clone();
            swept.kappa = k;
            let b = theorem4_bound(&swept)?;
            println!("  {k:<6} {:.6e}", b.total);
            csv.push_str(&format!(
                "nonconvex,{k},{},{},{},,{}\n",
                b.terms[0], b.terms[1], b.terms[2], b.total
            ));
        }
    }
    let path = tagged(out, "bounds", cfg);
    fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}
