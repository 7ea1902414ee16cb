//! Ingest raw per-behavior interaction files, build the leave-one-out
//! split, and write a reusable snapshot.
//!
//! ```text
//! cargo run --example prepare_dataset
//! ```

use std::path::PathBuf;

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
    println!("users: {}", set.user_count);
    println!("items: {}", set.item_count);
    for (k, name) in set.behaviors.iter().enumerate() {
        println!("{name}: {} interactions", set.edge_count(k));
    }

    let split = data::leave_one_out_split(&set, 101)?;
    println!("test users: {}", split.test.len());
    println!(
        "training target edges: {}",
        split.train.edge_count(split.train.target_behavior())
    );

    let snapshot = DatasetSnapshot::new(set, &split, 101);
    let out = std::env::temp_dir().join("copf_prepared");
    std::fs::create_dir_all(&out)?;
    snapshot.save(&out.join("snapshot.json"))?;
    println!("snapshot: {}", out.join("snapshot.json").display());
    println!("dataset hash: {}", snapshot.dataset_hash());
    Ok(())
}
