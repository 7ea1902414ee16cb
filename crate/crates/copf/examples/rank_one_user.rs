//! Train briefly, then walk one test user through full-catalog ranking:
//! top-scored items, the held-out item's rank, and the overall metrics.
//!
//! ```text
//! cargo run --release --example rank_one_user
//! ```

use std::path::PathBuf;

use copf::config::EngineConfig;
use copf::data;
use copf::evaluation;
use copf::model::Scorer;

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
    cfg.train.epochs = 30;
    cfg.train.eval_every = 30;

    let graphs = data::build_graphs(&split.train, cfg.degree_mode)?;
    let outcome = copf::training::train(&split, &graphs, &cfg, 11)?;
    let scorer = Scorer::build(&outcome.best_store, &outcome.ids, &graphs, &cfg)?;

    let pair = split.test[0];
    let target = split.train.target_behavior();
    let mut scored: Vec<(u32, f64)> = (0..set.item_count as u32)
        .filter(|&v| v == pair.item || !split.train.has_edge(target, pair.user, v))
        .map(|v| (v, scorer.score(pair.user as usize, v as usize)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    println!("user {} held-out item {}", pair.user, pair.item);
    println!("top 10 of {} candidates:", scored.len());
    for (rank, (item, score)) in scored.iter().take(10).enumerate() {
        let marker = if *item == pair.item { "  <- held out" } else { "" };
        println!("{:>3}. item {:>4} score {score:+.4}{marker}", rank + 1, item);
    }
    let position = scored.iter().position(|&(v, _)| v == pair.item).unwrap() + 1;
    println!("held-out rank: {position}");

    let (hr, ndcg, _) = evaluation::evaluate(&scorer, &split, evaluation::DEFAULT_K, 1, false);
    println!("HR@10 {hr:.4}  NDCG@10 {ndcg:.4}");
    Ok(())
}
