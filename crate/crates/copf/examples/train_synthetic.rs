//! Short training run on the bundled synthetic dataset: one seed, the
//! default configuration at a small budget, epoch log and final metrics.
//!
//! ```text
//! cargo run --release --example train_synthetic
//! ```

use std::path::PathBuf;

use copf::config::EngineConfig;
use copf::data;

fn main() -> copf::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
    let files = vec![
        ("view".to_string(), dir.join("view.txt")),
        ("cart".to_string(), dir.join("cart.txt")),
        ("buy".to_string(), dir.join("buy.txt")),
    ];
    let order: Vec<String> = files.iter().map(|(name, _)| name.clone()).collect();
    let set = data::load_interactions(&files, &order)?;
    let split = data::leave_one_out_split(&set, 101)?;

    let mut cfg = EngineConfig::default();
    cfg.cogcn.dim = 32;
    cfg.cogcn.layers = 2;
    cfg.dfme.tau = 0.2;
    cfg.train.lambdas = vec![1.0 / 6.0, 2.0 / 6.0, 0.5];
    cfg.train.mu = 1e-5;
    cfg.train.batch_size = 512;
    cfg.train.steps_per_epoch = Some(5);
    cfg.train.epochs = 40;
    cfg.train.eval_every = 10;

    let graphs = data::build_graphs(&split.train, cfg.degree_mode)?;
    let outcome = copf::training::train(&split, &graphs, &cfg, cfg.train.seed)?;
    print!("{}", outcome.jsonl_log());
    println!(
        "best: epoch {} HR@10 {:.4} NDCG@10 {:.4}",
        outcome.best_epoch, outcome.best_hr, outcome.best_ndcg
    );
    Ok(())
}
