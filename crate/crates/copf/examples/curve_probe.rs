//! Scratch: HR trajectory of full vs w/o-dfme on one seed.
use copf::config::Variant;
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

fn main() {
    let mut cfg = copf::config::EngineConfig::default();
    cfg.cogcn.dim = 32;
    cfg.cogcn.layers = 2;
    cfg.dfme.tau = 0.2;
    cfg.train.lambdas = vec![1.0/6.0, 2.0/6.0, 0.5];
    cfg.train.mu = 1e-5;
    cfg.train.batch_size = 512;
    cfg.train.steps_per_epoch = Some(5);
    cfg.train.epochs = 200;
    cfg.train.eval_every = 10;
    cfg.train.patience = 1000;
    let snap = snapshot();
    let split = snap.split();
    let graphs = data::build_graphs(&split.train, cfg.degree_mode).unwrap();
    for name in ["full", "w/o-dfme"] {
        let vcfg = Variant::parse(name).unwrap().apply(&cfg);
        let out = copf::training::train(&split, &graphs, &vcfg, 11).unwrap();
        let curve: Vec<String> = out.epochs.iter().filter_map(|e| e.hr10.map(|h| format!("{}:{:.4}", e.epoch, h))).collect();
        println!("{name}: {}", curve.join(" "));
    }
}
