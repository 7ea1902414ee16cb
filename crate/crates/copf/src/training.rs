//! Joint optimization: triple sampling, the ranking loss, the epoch loop,
//! and checkpointing.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BprReduction, EngineConfig};
use crate::data::{GraphSet, InteractionSet, Split};
use crate::error::{CopfError, Result};
use crate::evaluation;
use crate::model::{self, ModelParams, Scorer, TripleBatch};
use crate::tensor::tape::NodeId;
use crate::tensor::{Adam, DenseMatrix, ParameterStore, Tape};

/// Sorted per-user item lists for every behavior; membership tests during
/// negative sampling and candidate filtering.
pub struct SamplerIndex {
    adjacency: Vec<Vec<Vec<u32>>>,
}

impl SamplerIndex {
    pub fn build(set: &InteractionSet) -> Self {
        let adjacency = (0..set.num_behaviors()).map(|k| set.adjacency(k)).collect();
        SamplerIndex { adjacency }
    }

    pub fn observed(&self, behavior: usize, user: u32, item: u32) -> bool {
        self.adjacency[behavior][user as usize]
            .binary_search(&item)
            .is_ok()
    }

    pub fn items_of(&self, behavior: usize, user: u32) -> &[u32] {
        &self.adjacency[behavior][user as usize]
    }
}

/// Sample `batch_size` (user, positive, negative) triples per behavior:
/// positives uniformly over the behavior's edges, the negative item
/// re-drawn until it is unobserved for that user under that behavior. A
/// draw whose user leaves no admissible negative after 100 attempts is
/// skipped (logged once per sampler).
pub fn sample_triples(
    set: &InteractionSet,
    index: &SamplerIndex,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    warned: &mut bool,
) -> TripleBatch {
    let num_items = set.item_count as u32;
    let mut batches = Vec::with_capacity(set.num_behaviors());
    for k in 0..set.num_behaviors() {
        let edges = &set.edges[k];
        let mut batch = Vec::with_capacity(batch_size);
        if edges.is_empty() {
            batches.push(batch);
            continue;
        }
        for _ in 0..batch_size {
            let (u, s) = edges[rng.gen_range(0..edges.len())];
            let mut negative = None;
            for _ in 0..100 {
                let t = rng.gen_range(0..num_items);
                if !index.observed(k, u, t) {
                    negative = Some(t);
                    break;
                }
            }
            match negative {
                Some(t) => batch.push((u, s, t)),
                None => {
                    if !*warned {
                        log::warn!(
                            "behavior {k}: no admissible negative for user {u} after 100 draws; skipping"
                        );
                        *warned = true;
                    }
                }
            }
        }
        batches.push(batch);
    }
    batches
}

/// Per-behavior ranking term: `-lambda * ln sigmoid(pos - neg)` over the
/// batch, in the guarded softplus form, mean- or sum-reduced.
pub fn bpr_loss(
    tape: &mut Tape,
    positive_scores: NodeId,
    negative_scores: NodeId,
    lambda: f64,
    reduction: BprReduction,
) -> Result<NodeId> {
    let margin = tape.sub(negative_scores, positive_scores)?;
    let losses = tape.softplus(margin);
    let reduced = match reduction {
        BprReduction::Mean => tape.mean_all(losses),
        BprReduction::Sum => tape.sum_all(losses),
    };
    Ok(tape.scale(reduced, lambda))
}

// ---- epoch log ----

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_bpr: f64,
    pub l_cl: f64,
    pub l_reg: f64,
    pub hr10: Option<f64>,
    pub ndcg10: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// One structured-text log line.
    pub fn jsonl(&self) -> String {
        format!(
            "{{\"epoch\":{},\"l_bpr\":{},\"l_cl\":{},\"l_reg\":{},\"hr10\":{},\"ndcg10\":{},\"seconds\":{}}}",
            self.epoch,
            self.l_bpr,
            self.l_cl,
            self.l_reg,
            opt(self.hr10),
            opt(self.ndcg10),
            self.seconds
        )
    }

    /// The log line without the wall-clock field; this is the
    /// reproducibility surface (timings cannot replay bitwise).
    pub fn canonical(&self) -> String {
        format!(
            "{{\"epoch\":{},\"l_bpr\":{},\"l_cl\":{},\"l_reg\":{},\"hr10\":{},\"ndcg10\":{}}}",
            self.epoch,
            self.l_bpr,
            self.l_cl,
            self.l_reg,
            opt(self.hr10),
            opt(self.ndcg10)
        )
    }
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "null".to_string(),
    }
}

// ---- training loop ----

pub struct TrainOutcome {
    /// Parameters at the end of the run.
    pub store: ParameterStore,
    pub ids: ModelParams,
    /// Snapshot with the best HR@10 seen at an evaluation point.
    pub best_store: ParameterStore,
    pub best_hr: f64,
    pub best_ndcg: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// Set when a non-finite loss aborted the run.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn canonical_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&e.canonical());
            out.push('\n');
        }
        out
    }

    pub fn jsonl_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&e.jsonl());
            out.push('\n');
        }
        out
    }
}

/// Run the optimization on a split: per step, one full-graph forward,
/// batched predictions, backward, Adam. Evaluates HR@10/NDCG@10 at the
/// configured cadence, keeps the best-by-HR snapshot, stops early after
/// `patience` evaluations without improvement, and aborts (keeping the
/// best snapshot) if the loss turns non-finite.
pub fn train(split: &Split, graphs: &GraphSet, cfg: &EngineConfig, seed: u64) -> Result<TrainOutcome> {
    let mut run_cfg = cfg.clone();
    run_cfg.train.seed = seed;
    let set = &split.train;
    let lambdas = run_cfg.lambdas_for(set.num_behaviors())?;
    let (mut store, ids) = model::init_model(
        set.user_count,
        set.item_count,
        set.num_behaviors(),
        &run_cfg,
    )?;

    let index = SamplerIndex::build(set);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(seed);
    sampler_rng.set_stream(1);
    let mut warned = false;

    let steps_per_epoch = run_cfg.train.steps_per_epoch.unwrap_or_else(|| {
        let largest = set.edges.iter().map(Vec::len).max().unwrap_or(0);
        largest.div_ceil(run_cfg.train.batch_size).max(1)
    });

    let mut adam = Adam::new(run_cfg.train.learning_rate);
    let mut epochs = Vec::with_capacity(run_cfg.train.epochs);
    let mut best_store = store.clone();
    let mut best_hr = f64::NEG_INFINITY;
    let mut best_ndcg = 0.0;
    let mut best_epoch = 0;
    let mut evals_since_best = 0usize;
    let mut aborted = None;

    'epochs: for epoch in 1..=run_cfg.train.epochs {
        let start = Instant::now();
        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let triples =
                sample_triples(set, &index, run_cfg.train.batch_size, &mut sampler_rng, &mut warned);
            store.zero_grads();
            let (values, _) =
                model::loss_backward(&mut store, &ids, graphs, &run_cfg, &lambdas, &triples)?;
            if !values.total.is_finite() {
                aborted = Some(format!(
                    "non-finite loss {} at epoch {epoch}; best checkpoint retained",
                    values.total
                ));
                break 'epochs;
            }
            adam.step(&mut store)?;
            sums.0 += values.bpr;
            sums.1 += values.contrastive;
            sums.2 += values.l2;
        }
        let n = steps_per_epoch as f64;
        let mut record = EpochRecord {
            epoch,
            l_bpr: sums.0 / n,
            l_cl: sums.1 / n,
            l_reg: sums.2 / n,
            hr10: None,
            ndcg10: None,
            seconds: 0.0,
        };

        let evaluate_now =
            epoch % run_cfg.train.eval_every == 0 || epoch == run_cfg.train.epochs;
        if evaluate_now && !split.test.is_empty() {
            let scorer = Scorer::build(&store, &ids, graphs, &run_cfg)?;
            let (hr, ndcg, _) = evaluation::evaluate(
                &scorer,
                split,
                evaluation::DEFAULT_K,
                run_cfg.threads,
                run_cfg.exclude_aux_candidates,
            );
            record.hr10 = Some(hr);
            record.ndcg10 = Some(ndcg);
            if hr > best_hr {
                best_hr = hr;
                best_ndcg = ndcg;
                best_epoch = epoch;
                best_store = store.clone();
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        epochs.push(record);
        if evals_since_best >= run_cfg.train.patience {
            break;
        }
    }

    if best_hr == f64::NEG_INFINITY {
        best_store = store.clone();
        best_hr = 0.0;
    }
    Ok(TrainOutcome {
        store,
        ids,
        best_store,
        best_hr,
        best_ndcg,
        best_epoch,
        epochs,
        aborted,
    })
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 8] = b"COPFCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned binary of all parameters, their optimizer moments, and the
/// config hash of the run that produced them.
pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    adam_step: u64,
    config_hash: &str,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_bytes(&mut buf, config_hash.as_bytes());
    buf.extend_from_slice(&adam_step.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        write_bytes(&mut buf, p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for m in [&p.value, &p.moment1, &p.moment2] {
            for v in m.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub struct Checkpoint {
    pub store: ParameterStore,
    pub adam_step: u64,
    pub config_hash: String,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CopfError::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let magic = take(&bytes, &mut cursor, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CopfError::Data("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CopfError::Data(format!("unsupported checkpoint version {version}")));
    }
    let hash_bytes = read_bytes(&bytes, &mut cursor)?;
    let config_hash = String::from_utf8(hash_bytes)
        .map_err(|_| CopfError::Data("bad config hash in checkpoint".into()))?;
    let adam_step = u64::from_le_bytes(take(&bytes, &mut cursor, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap());

    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&bytes, &mut cursor)?)
            .map_err(|_| CopfError::Data("bad parameter name".into()))?;
        let rows = u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&bytes, &mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(f64::from_le_bytes(
                    take(&bytes, &mut cursor, 8)?.try_into().unwrap(),
                ));
            }
            mats.push(DenseMatrix::from_values(rows, cols, values)?);
        }
        let id = store.add(&name, mats[0].clone())?;
        store.param_mut(id).moment1 = mats[1].clone();
        store.param_mut(id).moment2 = mats[2].clone();
    }
    Ok(Checkpoint { store, adam_step, config_hash })
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn read_bytes(bytes: &[u8], cursor: &mut usize) -> Result<Vec<u8>> {
    let len = u32::from_le_bytes(take(bytes, cursor, 4)?.try_into().unwrap()) as usize;
    Ok(take(bytes, cursor, len)?.to_vec())
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, n: usize) -> Result<&'a [u8]> {
    if *cursor + n > bytes.len() {
        return Err(CopfError::Data("truncated checkpoint".into()));
    }
    let slice = &bytes[*cursor..*cursor + n];
    *cursor += n;
    Ok(slice)
}
