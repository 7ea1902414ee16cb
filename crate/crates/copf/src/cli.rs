//! Operator surface: dataset preparation, training, evaluation, ablation
//! grids, and the verification command.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric
//! failure. Every training run directory gets a manifest written before
//! any compute, so a run is reconstructible from `manifest.json` plus the
//! dataset snapshot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, Variant};
use crate::data::{self, DatasetSnapshot};
use crate::error::{CopfError, Result};
use crate::evaluation::{self, MetricsReport, SeedMetrics};
use crate::model;
use crate::oracle::{self, DenseFixture, LossSelect};
use crate::tensor::{finite_diff_check, DenseMatrix, SgMode, Tape};
use crate::training;

#[derive(Parser)]
#[command(name = "copf", version, about = "multi-behavior recommendation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw interaction files, build the split, write a snapshot.
    Prepare {
        /// Behavior file as NAME=PATH, repeated in behavior order
        /// (last = target).
        #[arg(long = "behavior", value_name = "NAME=PATH", required = true)]
        behaviors: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Seed for leave-one-out tie-breaking.
        #[arg(long, default_value_t = 17)]
        split_seed: u64,
    },
    /// Train over the seed list and report per-seed and mean metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list; default: config seed plus offsets 0..5.
        #[arg(long)]
        seeds: Option<String>,
        /// Evaluation workers.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Score a checkpoint against the prepared split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run named configuration variants and emit a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variant name, repeatable (see `ablate --help-variants`).
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Gradient, stop-gradient, and sparse-vs-dense verification on the
    /// bundled fixture.
    Gradcheck {
        /// Optional config whose mode switches apply (shapes come from the
        /// fixture).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corrupt one analytic gradient to prove the check catches it.
        #[arg(long)]
        inject_gradient_fault: bool,
    },
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { behaviors, out, split_seed } => cmd_prepare(&behaviors, &out, split_seed),
        Command::Train { config, out, seeds, threads } => {
            let mut cfg = EngineConfig::from_file(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            cmd_train(&cfg, &out, parse_seeds(seeds.as_deref(), &cfg)?)
        }
        Command::Eval { config, checkpoint, out, threads } => {
            let mut cfg = EngineConfig::from_file(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            cmd_eval(&cfg, &checkpoint, &out)
        }
        Command::Ablate { config, out, variants, seeds, threads } => {
            let mut cfg = EngineConfig::from_file(&config)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let seeds = parse_seeds(seeds.as_deref(), &cfg)?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v))
                .collect::<Result<Vec<_>>>()?;
            cmd_ablate(&cfg, &out, &variants, &seeds)
        }
        Command::Gradcheck { config, inject_gradient_fault } => {
            let cfg = config.map(|p| EngineConfig::from_file(&p)).transpose()?;
            let summary = run_gradcheck(cfg, inject_gradient_fault)?;
            print!("{}", summary.render());
            if summary.passed() {
                Ok(())
            } else {
                Err(CopfError::Numeric(format!(
                    "gradcheck failed: {}",
                    summary.first_failure()
                )))
            }
        }
    }
}

fn parse_seeds(arg: Option<&str>, cfg: &EngineConfig) -> Result<Vec<u64>> {
    match arg {
        None => Ok((0..5).map(|i| cfg.train.seed + i).collect()),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CopfError::Usage(format!("bad seed {s:?}")))
            })
            .collect(),
    }
}

// ---- prepare ----

/// Per-behavior ingestion statistics, comparable against published
/// dataset tables.
#[derive(Serialize, Deserialize)]
pub struct PrepareStats {
    pub users: usize,
    pub items: usize,
    pub behaviors: Vec<(String, usize)>,
    pub target_interactions: usize,
    pub test_users: usize,
    pub dataset_hash: String,
}

pub fn cmd_prepare(behavior_args: &[String], out: &Path, split_seed: u64) -> Result<()> {
    let mut files = Vec::new();
    let mut order = Vec::new();
    for arg in behavior_args {
        let (name, path) = arg.split_once('=').ok_or_else(|| {
            CopfError::Usage(format!("--behavior expects NAME=PATH, got {arg:?}"))
        })?;
        files.push((name.to_string(), PathBuf::from(path)));
        order.push(name.to_string());
    }
    let set = data::load_interactions(&files, &order)?;
    let split = data::leave_one_out_split(&set, split_seed)?;
    let snapshot = DatasetSnapshot::new(set, &split, split_seed);

    std::fs::create_dir_all(out)?;
    snapshot.save(&out.join("snapshot.json"))?;
    let stats = PrepareStats {
        users: snapshot.interactions.user_count,
        items: snapshot.interactions.item_count,
        behaviors: snapshot
            .interactions
            .behaviors
            .iter()
            .enumerate()
            .map(|(k, name)| (name.clone(), snapshot.interactions.edge_count(k)))
            .collect(),
        target_interactions: snapshot
            .interactions
            .edge_count(snapshot.interactions.target_behavior()),
        test_users: snapshot.test.len(),
        dataset_hash: snapshot.dataset_hash(),
    };
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;

    println!("users: {}", stats.users);
    println!("items: {}", stats.items);
    for (name, count) in &stats.behaviors {
        println!("{name}: {count} interactions");
    }
    println!("test users: {}", stats.test_users);
    println!("dataset hash: {}", stats.dataset_hash);
    Ok(())
}

// ---- train ----

/// Everything needed to reproduce a run; written before training starts
/// and never touched afterwards.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub engine_version: String,
    pub command_line: Vec<String>,
    pub config: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    fn write_new(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        let path = out.join("manifest.json");
        if path.exists() {
            return Err(CopfError::Usage(format!(
                "run directory already initialized: {} exists",
                path.display()
            )));
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn load_dataset(cfg: &EngineConfig) -> Result<DatasetSnapshot> {
    let dir = cfg.dataset.as_ref().ok_or_else(|| {
        CopfError::Config("config key `dataset` must point at a prepared snapshot directory".into())
    })?;
    DatasetSnapshot::load(&Path::new(dir).join("snapshot.json"))
}

pub fn cmd_train(cfg: &EngineConfig, out: &Path, seeds: Vec<u64>) -> Result<()> {
    let snapshot = load_dataset(cfg)?;
    let manifest = RunManifest {
        format: "copf-manifest/v1".to_string(),
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        command_line: std::env::args().collect(),
        config: cfg.to_flat_toml(),
        config_hash: cfg.config_hash(),
        dataset_hash: snapshot.dataset_hash(),
        seeds: seeds.clone(),
    };
    manifest.write_new(out)?;

    let report = train_seed_list(cfg, &snapshot, &seeds, Some(out))?;
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

/// Train each seed and collect best-checkpoint metrics.
pub fn train_seed_list(
    cfg: &EngineConfig,
    snapshot: &DatasetSnapshot,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let split = snapshot.split();
    let graphs = data::build_graphs(&split.train, cfg.degree_mode)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = training::train(&split, &graphs, cfg, seed)?;
        if let Some(dir) = out {
            std::fs::write(dir.join(format!("epochs_seed{seed}.jsonl")), outcome.jsonl_log())?;
            training::save_checkpoint(
                &dir.join(format!("checkpoint_best_seed{seed}.bin")),
                &outcome.best_store,
                0,
                &cfg.config_hash(),
            )?;
        }
        if let Some(msg) = &outcome.aborted {
            return Err(CopfError::Numeric(format!("seed {seed}: {msg}")));
        }
        per_seed.push(SeedMetrics { seed, hr10: outcome.best_hr, ndcg10: outcome.best_ndcg });
    }
    Ok(MetricsReport::from_runs(
        &snapshot.dataset_hash(),
        &cfg.config_hash(),
        evaluation::DEFAULT_K,
        per_seed,
    ))
}

// ---- eval ----

pub fn cmd_eval(cfg: &EngineConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let snapshot = load_dataset(cfg)?;
    let split = snapshot.split();
    let graphs = data::build_graphs(&split.train, cfg.degree_mode)?;
    let ckpt = training::load_checkpoint(checkpoint)?;
    let ids = model::params_from_store(&ckpt.store, split.train.num_behaviors())?;
    let scorer = model::Scorer::build(&ckpt.store, &ids, &graphs, cfg)?;
    let (hr, ndcg, _) = evaluation::evaluate(
        &scorer,
        &split,
        evaluation::DEFAULT_K,
        cfg.threads,
        cfg.exclude_aux_candidates,
    );
    let report = MetricsReport::from_runs(
        &snapshot.dataset_hash(),
        &ckpt.config_hash,
        evaluation::DEFAULT_K,
        vec![SeedMetrics { seed: cfg.train.seed, hr10: hr, ndcg10: ndcg }],
    );
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), report.to_json()?)?;
    print!("{}", report.table());
    Ok(())
}

// ---- ablate ----

#[derive(Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub hr10: f64,
    pub ndcg10: f64,
}

pub fn cmd_ablate(
    cfg: &EngineConfig,
    out: &Path,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<()> {
    let snapshot = load_dataset(cfg)?;
    std::fs::create_dir_all(out)?;
    let rows = run_ablation(cfg, &snapshot, variants, seeds)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}

pub fn run_ablation(
    cfg: &EngineConfig,
    snapshot: &DatasetSnapshot,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let variant_cfg = variant.apply(cfg);
        let report = train_seed_list(&variant_cfg, snapshot, seeds, None)?;
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            hr10: report.mean_hr10,
            ndcg10: report.mean_ndcg10,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>10}", "variant", "HR@10", "NDCG@10");
    for row in rows {
        let _ = writeln!(out, "{:<12} {:>10.4} {:>10.4}", row.variant, row.hr10, row.ndcg10);
    }
    out
}

// ---- gradcheck ----

pub struct CheckOutcome {
    pub name: String,
    pub observed: f64,
    pub threshold: f64,
    pub passed: bool,
    pub note: Option<String>,
}

pub struct GradcheckSummary {
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> String {
        self.checks
            .iter()
            .find(|c| !c.passed)
            .map(|c| {
                format!(
                    "{}: observed {:.3e} vs threshold {:.3e}{}",
                    c.name,
                    c.observed,
                    c.threshold,
                    c.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
                )
            })
            .unwrap_or_default()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "[{status}] {:<38} observed {:>12.3e}  threshold {:>9.1e}{}",
                c.name,
                c.observed,
                c.threshold,
                c.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default()
            );
        }
        let _ = writeln!(out, "total runtime: {:.2}s", self.seconds);
        out
    }
}

/// The bundled verification fixture: 3 users, 3 items, 2 behaviors,
/// 4-dimensional embeddings, 2 layers.
pub fn standard_fixture() -> DenseFixture {
    DenseFixture::from_json(include_str!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/fixtures/standard.json"
    )))
    .expect("bundled fixture parses")
}

/// Engine configuration matching a fixture's shape, defaults elsewhere.
pub fn fixture_config(fixture: &DenseFixture, base: Option<EngineConfig>) -> EngineConfig {
    let mut cfg = base.unwrap_or_default();
    cfg.cogcn.dim = fixture.dim;
    cfg.cogcn.layers = fixture.layers;
    cfg.train.mu = 0.01;
    cfg
}

pub struct ForwardDivergence {
    /// Max absolute difference over the fusion intermediates,
    /// representations, gates, and predictions.
    pub forward_max_abs: f64,
    /// Relative difference of the full training-loss value (losses can be
    /// large on deep fixtures, so the absolute scale does not apply).
    pub loss_relative: f64,
}

/// Compare the engine forward against the dense reference over every
/// intermediate, representation, gate, and prediction, plus the loss.
pub fn forward_divergence(fixture: &DenseFixture, cfg: &EngineConfig) -> Result<ForwardDivergence> {
    let set = fixture.to_interaction_set();
    let graphs = data::build_graphs(&set, cfg.degree_mode)?;
    let (store, ids) = fixture.to_store(cfg)?;
    let engine = model::forward_table(&store, &ids, &graphs, cfg)?;
    let reference = oracle::dense_forward(fixture, cfg);

    let mut max_diff = 0.0f64;
    let mut track = |d: f64| {
        if d > max_diff {
            max_diff = d;
        }
    };

    for (k, layers) in engine.intermediates.iter().enumerate() {
        for (l, mat) in layers.iter().enumerate() {
            track(mat_diff(mat, &reference.fusion.intermediates[k][l]));
        }
    }
    for (k, mat) in engine.user_reps.iter().enumerate() {
        track(mat_diff(mat, &reference.fusion.user_reps[k]));
    }
    for (k, mat) in engine.item_reps.iter().enumerate() {
        track(mat_diff(mat, &reference.fusion.item_reps[k]));
    }
    let n = fixture.num_items;
    for task in 0..fixture.num_behaviors() {
        if let Some(gates) = &engine.gates[task] {
            for (row, gate_row) in reference.gates[task].iter().enumerate() {
                for (j, &g) in gate_row.iter().enumerate() {
                    track((gates.get(row, j) - g).abs());
                }
            }
        }
        let preds = &engine.predictions[task];
        for u in 0..fixture.num_users {
            for v in 0..n {
                track((preds.get(u * n + v, 0) - reference.predictions[task][u][v]).abs());
            }
        }
    }

    // loss values through both paths
    let triples = fixture.derived_triples();
    let lambdas = cfg.lambdas_for(fixture.num_behaviors())?;
    let engine_loss = model::loss_value(&store, &ids, &graphs, cfg, &lambdas, &triples, None)?;
    let oracle_loss = oracle::oracle_loss(
        fixture,
        fixture,
        cfg,
        &lambdas,
        &triples,
        LossSelect::Total,
        false,
        None,
    )?;
    let loss_relative =
        (engine_loss - oracle_loss).abs() / engine_loss.abs().max(oracle_loss.abs()).max(1.0);
    Ok(ForwardDivergence { forward_max_abs: max_diff, loss_relative })
}

fn mat_diff(engine: &DenseMatrix, reference: &[Vec<f64>]) -> f64 {
    let mut max = 0.0f64;
    for (r, row) in reference.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let d = (engine.get(r, c) - v).abs();
            if d > max {
                max = d;
            }
        }
    }
    max
}

/// Gradient verification on a fixture: engine finite differences against
/// tape gradients over the full loss. `fault` corrupts one analytic
/// gradient entry to prove the comparison catches it.
pub fn gradient_check_on(
    fixture: &DenseFixture,
    cfg: &EngineConfig,
    h: f64,
    tol: f64,
    fault: bool,
) -> Result<crate::tensor::GradCheckReport> {
    let set = fixture.to_interaction_set();
    let graphs = data::build_graphs(&set, cfg.degree_mode)?;
    let (mut store, ids) = fixture.to_store(cfg)?;
    let triples = fixture.derived_triples();
    let lambdas = cfg.lambdas_for(fixture.num_behaviors())?;

    // One pass to capture the frozen stop-gradient values the loss closure
    // replays; the analytic pass below records the same values.
    let mut probe = store.clone();
    let (_, recorded) =
        model::loss_backward(&mut probe, &ids, &graphs, cfg, &lambdas, &triples)?;

    let loss_fn = |s: &crate::tensor::ParameterStore| {
        model::loss_value(s, &ids, &graphs, cfg, &lambdas, &triples, Some(&recorded))
    };
    let grad_fn = |s: &mut crate::tensor::ParameterStore| -> Result<()> {
        model::loss_backward(s, &ids, &graphs, cfg, &lambdas, &triples)?;
        if fault {
            let id = s.id("user_embedding").expect("embedding present");
            s.grad_mut(id).values_mut()[0] += 1.0;
        }
        Ok(())
    };
    finite_diff_check(loss_fn, grad_fn, &mut store, h, tol)
}

/// Stop-gradient path verification on a fixture. With blocking active,
/// asserts the blocked quantities are zero (analytically and by sg-aware
/// finite differences) and that the target task's own loss keeps the same
/// nodes live. With blocking off, the paths are expected nonzero.
pub struct StopGradOutcome {
    /// Largest blocked-path magnitude (should be ~0 when blocking is on).
    pub blocked_max: f64,
    /// Smallest over tasks of the max live-path gradient (should be > 0).
    pub live_min: f64,
    /// Whether blocking was active in this configuration.
    pub blocking: bool,
}

pub fn stop_gradient_check_on(fixture: &DenseFixture, cfg: &EngineConfig) -> Result<StopGradOutcome> {
    use crate::config::StopGradMode;
    let set = fixture.to_interaction_set();
    let graphs = data::build_graphs(&set, cfg.degree_mode)?;
    let (store, ids) = fixture.to_store(cfg)?;
    let triples = fixture.derived_triples();
    let lambdas = cfg.lambdas_for(fixture.num_behaviors())?;
    let num_behaviors = fixture.num_behaviors();
    let target = num_behaviors - 1;
    let blocking = cfg.dfme.stop_grad_mode != StopGradMode::None;

    let mut blocked_max = 0.0f64;
    let mut live_min = f64::INFINITY;
    let mut track_blocked = |v: f64| {
        if v > blocked_max {
            blocked_max = v;
        }
    };

    for task in 0..num_behaviors - 1 {
        if triples[task].is_empty() {
            continue;
        }
        // analytic: gradients on the target slot of this auxiliary task
        let mut tape = Tape::with_sg_mode(SgMode::Record(Vec::new()));
        let probe =
            model::build_task_bpr_loss(&mut tape, &store, &ids, &graphs, cfg, task, &triples[task])?;
        tape.backward(probe.loss)?;
        let mut node_max = 0.0f64;
        let mut consider = |g: DenseMatrix| {
            for &v in g.values() {
                if v.abs() > node_max {
                    node_max = v.abs();
                }
            }
        };
        consider(tape.grad_or_zero(probe.positive.expert_rows[target]));
        consider(tape.grad_or_zero(probe.negative.expert_rows[target]));
        if let Some(slots) = &probe.slots {
            consider(tape.grad_or_zero(slots.slots[target].0));
            consider(tape.grad_or_zero(slots.slots[target].1));
        }
        consider(tape.grad_or_zero(probe.forward.reps[target].user));
        consider(tape.grad_or_zero(probe.forward.reps[target].item));
        // the target behavior's fitting embedding is reachable only
        // through target slots of auxiliary tasks
        let mut param_max = 0.0f64;
        if !ids.r_init.is_empty() {
            let mut scratch = store.clone();
            scratch.zero_grads();
            tape.write_grads(&mut scratch);
            for &v in scratch.grad(ids.r_init[target]).values() {
                param_max = param_max.max(v.abs());
            }
        }

        // numeric, stop-gradient aware: the loss must be flat in the same
        // directions
        let numeric = oracle::numerical_gradient(
            fixture,
            cfg,
            &lambdas,
            &triples,
            LossSelect::BprTask(task),
            blocking,
            1e-5,
        )?;
        let numeric_r = numeric.max_abs(&format!("fitting_r_{target}"));
        let (rep_u, rep_v) = oracle::numerical_rep_gradient(
            fixture,
            cfg,
            &lambdas,
            &triples,
            LossSelect::BprTask(task),
            blocking,
            1e-5,
        )?;
        let rep_max = mat_max(&rep_u).max(mat_max(&rep_v));

        track_blocked(node_max);
        track_blocked(param_max);
        track_blocked(numeric_r);
        track_blocked(rep_max);
        if !blocking {
            // paths are expected live without blocking; they also bound
            // the liveness floor
            live_min = live_min.min(rep_max.max(node_max));
        }
    }

    // the target task's own loss must keep those nodes live
    {
        let mut tape = Tape::with_sg_mode(SgMode::Record(Vec::new()));
        let probe = model::build_task_bpr_loss(
            &mut tape,
            &store,
            &ids,
            &graphs,
            cfg,
            target,
            &triples[target],
        )?;
        tape.backward(probe.loss)?;
        let mut analytic_live = 0.0f64;
        for node in [probe.forward.reps[target].user, probe.forward.reps[target].item] {
            for &v in tape.grad_or_zero(node).values() {
                analytic_live = analytic_live.max(v.abs());
            }
        }
        let (rep_u, rep_v) = oracle::numerical_rep_gradient(
            fixture,
            cfg,
            &lambdas,
            &triples,
            LossSelect::BprTask(target),
            blocking,
            1e-5,
        )?;
        live_min = live_min.min(analytic_live.min(mat_max(&rep_u).max(mat_max(&rep_v))));
    }

    Ok(StopGradOutcome { blocked_max, live_min, blocking })
}

fn mat_max(mat: &[Vec<f64>]) -> f64 {
    mat.iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// The `gradcheck` command body: finite differences, stop-gradient paths,
/// and the sparse-vs-dense comparison, all on the bundled fixture.
pub fn run_gradcheck(base: Option<EngineConfig>, inject_fault: bool) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let fixture = standard_fixture();
    let cfg = fixture_config(&fixture, base);
    let mut checks = Vec::new();

    let report = gradient_check_on(&fixture, &cfg, 1e-5, 1e-4, inject_fault)?;
    checks.push(CheckOutcome {
        name: "finite-difference gradient check".into(),
        observed: report.max_rel_error,
        threshold: 1e-4,
        passed: report.passed(),
        note: if report.passed() {
            None
        } else {
            report.worst().map(|w| format!("worst parameter: {}", w.name))
        },
    });

    let divergence = forward_divergence(&fixture, &cfg)?;
    checks.push(CheckOutcome {
        name: "sparse-vs-dense forward equivalence".into(),
        observed: divergence.forward_max_abs,
        threshold: 1e-10,
        passed: divergence.forward_max_abs < 1e-10,
        note: None,
    });
    checks.push(CheckOutcome {
        name: "loss-path agreement (relative)".into(),
        observed: divergence.loss_relative,
        threshold: 1e-12,
        passed: divergence.loss_relative < 1e-12,
        note: None,
    });

    let sg = stop_gradient_check_on(&fixture, &cfg)?;
    if sg.blocking {
        checks.push(CheckOutcome {
            name: "stop-gradient blocked paths".into(),
            observed: sg.blocked_max,
            threshold: 1e-8,
            passed: sg.blocked_max < 1e-8,
            note: None,
        });
    } else {
        checks.push(CheckOutcome {
            name: "stop-gradient blocked paths".into(),
            observed: sg.blocked_max,
            threshold: f64::INFINITY,
            passed: true,
            note: Some("paths live as configured (stop_grad_mode=none)".into()),
        });
    }
    checks.push(CheckOutcome {
        name: "target-path liveness".into(),
        observed: sg.live_min,
        threshold: 1e-6,
        passed: sg.live_min > 1e-6,
        note: Some("threshold is a floor".into()),
    });

    Ok(GradcheckSummary { checks, seconds: start.elapsed().as_secs_f64() })
}
