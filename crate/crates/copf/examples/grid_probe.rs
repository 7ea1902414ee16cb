//! Scratch: screen (lr, lambda) settings for the desk experiment.
use copf::config::{EngineConfig, Variant};
use copf::data;
use std::path::PathBuf;

fn snapshot() -> copf::data::DatasetSnapshot {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
    let files = vec![
        ("view".to_string(), dir.join("view.txt")),
        ("cart".to_string(), dir.join("cart.txt")),
        ("buy".to_string(), dir.join("buy.txt")),
    ];
    let order: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let set = data::load_interactions(&files, &order).unwrap();
    let split = data::leave_one_out_split(&set, 101).unwrap();
    copf::data::DatasetSnapshot::new(set, &split, 101)
}

fn base_cfg(lr: f64, lambdas: Vec<f64>) -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.cogcn.dim = 32;
    cfg.cogcn.layers = 2;
    cfg.dfme.tau = 0.2;
    cfg.train.lambdas = lambdas;
    cfg.train.mu = 1e-5;
    cfg.train.learning_rate = lr;
    cfg.train.batch_size = 512;
    cfg.train.steps_per_epoch = Some(5);
    cfg.train.epochs = 200;
    cfg.train.eval_every = 20;
    cfg.train.patience = 1000;
    cfg
}

fn main() {
    let snap = std::sync::Arc::new(snapshot());
    let mut jobs = Vec::new();
    for (lr_name, lr) in [("lr1e-3", 1e-3), ("lr2e-3", 2e-3)] {
        for (l_name, lambdas) in [
            ("l-123", vec![1.0 / 6.0, 2.0 / 6.0, 0.5]),
            ("l-334", vec![0.3, 0.3, 0.4]),
        ] {
            for variant in ["full", "w/o-dfme"] {
                jobs.push((format!("{lr_name} {l_name} {variant}"), lr, lambdas.clone(), variant));
            }
        }
    }
    let mut results = Vec::new();
    for chunk in jobs.chunks(2) {
        let handles: Vec<_> = chunk
            .iter()
            .map(|(label, lr, lambdas, variant)| {
                let snap = snap.clone();
                let label = label.clone();
                let cfg = Variant::parse(variant).unwrap().apply(&base_cfg(*lr, lambdas.clone()));
                std::thread::spawn(move || {
                    let split = snap.split();
                    let graphs = data::build_graphs(&split.train, cfg.degree_mode).unwrap();
                    let out = copf::training::train(&split, &graphs, &cfg, 11).unwrap();
                    let curve: Vec<String> = out
                        .epochs
                        .iter()
                        .filter_map(|e| e.hr10.map(|h| format!("{}:{:.3}", e.epoch, h)))
                        .collect();
                    (label, out.best_hr, curve.join(" "))
                })
            })
            .collect();
        for h in handles {
            let (label, hr, curve) = h.join().unwrap();
            println!("{label}: best {hr:.4} | {curve}");
            results.push((label, hr));
        }
    }
    println!("== summary ==");
    for (label, hr) in results {
        println!("{label}: {hr:.4}");
    }
}
