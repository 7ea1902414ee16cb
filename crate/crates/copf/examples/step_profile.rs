//! Scratch: time one training step's phases.
use copf::data;
use std::path::PathBuf;
use std::time::Instant;

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");
    let files = vec![
        ("view".to_string(), dir.join("view.txt")),
        ("cart".to_string(), dir.join("cart.txt")),
        ("buy".to_string(), dir.join("buy.txt")),
    ];
    let order: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    let set = data::load_interactions(&files, &order).unwrap();
    let split = data::leave_one_out_split(&set, 101).unwrap();
    let graphs = data::build_graphs(&split.train, copf::config::DegreeMode::PerBehavior).unwrap();

    let mut cfg = copf::config::EngineConfig::default();
    cfg.cogcn.dim = 32;
    cfg.cogcn.layers = 2;
    cfg.train.lambdas = vec![1.0/6.0, 2.0/6.0, 0.5];
    cfg.train.mu = 1e-5;
    let lambdas = cfg.lambdas_for(3).unwrap();
    let (mut store, ids) = copf::model::init_model(split.train.user_count, split.train.item_count, 3, &cfg).unwrap();

    let index = copf::training::SamplerIndex::build(&split.train);
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut warned = false;
    let triples = copf::training::sample_triples(&split.train, &index, 512, &mut rng, &mut warned);

    // forward only
    let t0 = Instant::now();
    for _ in 0..3 {
        let v = copf::model::loss_value(&store, &ids, &graphs, &cfg, &lambdas, &triples, None).unwrap();
        std::hint::black_box(v);
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / 3.0);

    // forward + backward
    let t1 = Instant::now();
    for _ in 0..3 {
        store.zero_grads();
        copf::model::loss_backward(&mut store, &ids, &graphs, &cfg, &lambdas, &triples).unwrap();
    }
    println!("forward+backward: {:.1} ms", t1.elapsed().as_secs_f64() * 1000.0 / 3.0);

    // contrastive off
    let mut cfg2 = cfg.clone();
    cfg2.dfme.contrastive_on = false;
    cfg2.train.gamma = 0.0;
    let t2 = Instant::now();
    for _ in 0..3 {
        store.zero_grads();
        copf::model::loss_backward(&mut store, &ids, &graphs, &cfg2, &lambdas, &triples).unwrap();
    }
    println!("fwd+bwd, cl off: {:.1} ms", t2.elapsed().as_secs_f64() * 1000.0 / 3.0);
}
