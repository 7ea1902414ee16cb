//! Run a handful of configuration variants at a small budget and print
//! the comparison table.
//!
//! ```text
//! cargo run --release --example ablation_grid
//! ```

use std::path::PathBuf;

use copf::config::{EngineConfig, Variant};
use copf::data::{self, DatasetSnapshot};

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
    let snapshot = DatasetSnapshot::new(set, &split, 101);

    let mut cfg = EngineConfig::default();
    cfg.cogcn.dim = 16;
    cfg.cogcn.layers = 2;
    cfg.dfme.tau = 0.2;
    cfg.train.lambdas = vec![1.0 / 6.0, 2.0 / 6.0, 0.5];
    cfg.train.mu = 1e-5;
    cfg.train.batch_size = 512;
    cfg.train.steps_per_epoch = Some(4);
    cfg.train.epochs = 30;
    cfg.train.eval_every = 10;

    let variants = ["full", "copf-c", "w/o-con", "w/o-dfme", "w/o-cogcn"]
        .iter()
        .map(|v| Variant::parse(v))
        .collect::<copf::Result<Vec<_>>>()?;
    let rows = copf::cli::run_ablation(&cfg, &snapshot, &variants, &[cfg.train.seed])?;
    print!("{}", copf::cli::ablation_table(&rows));
    Ok(())
}
