//! Directional experiment on the bundled synthetic dataset: the full
//! configuration against (a) a single-behavior degeneration (target
//! behavior only) and (b) the `w/o-dfme` variant, mean HR@10 over five
//! seeds.
//!
//! ```text
//! cargo run --release --example desk_experiment
//! ```

use std::path::PathBuf;
use std::time::Instant;

use copf::config::{EngineConfig, Variant};
use copf::data::{self, DatasetSnapshot};
use copf::Result;

/// Training setup shared by the acceptance suite; small fixed budget, no
/// early stopping.
pub fn experiment_config() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.cogcn.dim = 32;
    cfg.cogcn.layers = 2;
    cfg.dfme.tau = 0.2;
    cfg.train.lambdas = vec![0.3, 0.3, 0.4];
    cfg.train.mu = 1e-5;
    cfg.train.batch_size = 512;
    cfg.train.steps_per_epoch = Some(5);
    cfg.train.epochs = 200;
    cfg.train.eval_every = 20;
    cfg.train.patience = 1000;
    cfg.train.seed = 11;
    cfg
}

pub fn synthetic_snapshot(target_only: bool) -> Result<DatasetSnapshot> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
    let all = [
        ("view".to_string(), dir.join("view.txt")),
        ("cart".to_string(), dir.join("cart.txt")),
        ("buy".to_string(), dir.join("buy.txt")),
    ];
    let (files, order): (Vec<_>, Vec<String>) = if target_only {
        (vec![all[2].clone()], vec!["buy".to_string()])
    } else {
        (all.to_vec(), all.iter().map(|(n, _)| n.clone()).collect())
    };
    let set = data::load_interactions(&files, &order)?;
    let split = data::leave_one_out_split(&set, 101)?;
    Ok(DatasetSnapshot::new(set, &split, 101))
}

fn main() -> Result<()> {
    let seeds: Vec<u64> = (11..16).collect();
    let started = Instant::now();

    let full_cfg = experiment_config();
    let snapshot = synthetic_snapshot(false)?;

    let full = copf::cli::train_seed_list(&full_cfg, &snapshot, &seeds, None)?;
    println!("full            HR@10 {:.4}  NDCG@10 {:.4}", full.mean_hr10, full.mean_ndcg10);

    let wo_dfme_cfg = Variant::parse("w/o-dfme").unwrap().apply(&full_cfg);
    let wo_dfme = copf::cli::train_seed_list(&wo_dfme_cfg, &snapshot, &seeds, None)?;
    println!("w/o-dfme        HR@10 {:.4}  NDCG@10 {:.4}", wo_dfme.mean_hr10, wo_dfme.mean_ndcg10);

    let mut single_cfg = full_cfg.clone();
    single_cfg.train.lambdas = vec![1.0];
    let single_snapshot = synthetic_snapshot(true)?;
    let single = copf::cli::train_seed_list(&single_cfg, &single_snapshot, &seeds, None)?;
    println!("single-behavior HR@10 {:.4}  NDCG@10 {:.4}", single.mean_hr10, single.mean_ndcg10);

    println!("total runtime: {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "full beats w/o-dfme: {}; full beats single-behavior: {}",
        full.mean_hr10 > wo_dfme.mean_hr10,
        full.mean_hr10 > single.mean_hr10
    );
    Ok(())
}
