//! Federated QCNN training on a procedurally generated binary digit task.
//!
//! Ten clients hold label-skewed shards of ring-vs-stroke digit images,
//! block-averaged to 8 features for an 8-qubit QCNN. Two clients per round
//! run the noisy meta update, sparsify, and ship their models back for
//! averaging.
//!
//! ```bash
//! cargo run --release --example train_digits
//! ```

use qfl_sim::config::RunConfig;
use qfl_sim::server::run_training;

const CONFIG: &str = "
[run]
seed = 1

[federation]
clients = 10
clients_per_round = 2
rounds = 50

[local]
eta = 0.5
beta = 1.0
tau = 1
support_fraction = 0.5

[privacy]
epsilon = 1.0
delta = 1e-5
clip = 1.0
estimation_error = 0.05
lambda = 1.0
sigma0_sq = 0.001
alpha = 0.1

[problem]
kind = digits
train_samples = 500
test_samples = 200
block_rows = 2
block_cols = 4
";

fn main() -> qfl_sim::Result<()> {
    let cfg = RunConfig::from_text(CONFIG)?;
    let training = cfg.training_config()?;
    let privacy = cfg.privacy_params()?;
    let (problem, init) = cfg.build_problem()?;

    println!("round  sigma_t^2   loss      accuracy");
    let out = run_training(&training, &problem, &privacy, init)?;
    for r in out.records.iter().step_by(5).chain(out.records.last()) {
        println!(
            "{:>5}  {:.2e}  {:.6}  {:.3}",
            r.round, r.sigma_t_sq, r.global_loss, r.test_accuracy
        );
    }
    let last = out.records.last().unwrap();
    println!(
        "\nfinal accuracy {:.3}, epsilon_glob {:.3}, mean drop fraction {:.3}",
        last.test_accuracy, last.epsilon_glob, out.mean_drop_fraction
    );
    Ok(())
}
