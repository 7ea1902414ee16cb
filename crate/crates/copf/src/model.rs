//! Assembly of the full model: parameter initialization, the joint loss
//! (pairwise ranking + contrastive alignment + L2), and the frozen scorer
//! used by evaluation.
//!
//! Parameter registration order is fixed (user embedding, item embedding,
//! gates, fitting-expert embeddings, layer transforms) and seeds draw in
//! that order, so a configuration plus a seed pins every initial value.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cogcn;
use crate::config::{EngineConfig, GateSharing, HeadMode, NegativeSetMode};
use crate::data::GraphSet;
use crate::dfme::{self, BatchIds, RepPair};
use crate::error::{CopfError, Result};
use crate::tensor::params::{InitScheme, ParamId, ParameterStore};
use crate::tensor::tape::NodeId;
use crate::tensor::{dense::DenseMatrix, params::xavier_uniform, SgMode, Tape};

/// Ids of every trainable array the configuration uses.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub user_embedding: ParamId,
    pub item_embedding: ParamId,
    /// One entry when gates are shared, K entries per-task.
    pub gate_w: Vec<ParamId>,
    pub gate_b: Vec<ParamId>,
    /// Initial behavior embeddings for the fitting experts, one per behavior.
    pub r_init: Vec<ParamId>,
    /// Layer transforms shared across behaviors and fitting experts.
    pub w_layers: Vec<ParamId>,
}

/// Create and initialize the parameter store for a dataset shape.
pub fn init_model(
    num_users: usize,
    num_items: usize,
    num_behaviors: usize,
    cfg: &EngineConfig,
) -> Result<(ParameterStore, ModelParams)> {
    cfg.validate()?;
    let d = cfg.cogcn.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParameterStore::new();

    let user_embedding = store.add_with_init(
        "user_embedding",
        xavier_uniform(num_users, d, &mut rng),
        InitScheme::XavierUniform,
    )?;
    let item_embedding = store.add_with_init(
        "item_embedding",
        xavier_uniform(num_items, d, &mut rng),
        InitScheme::XavierUniform,
    )?;

    let mut gate_w = Vec::new();
    let mut gate_b = Vec::new();
    let mut r_init = Vec::new();
    let mut w_layers = Vec::new();

    if cfg.dfme.head == HeadMode::Dfme {
        let gate_copies = match cfg.dfme.gate_sharing {
            GateSharing::Shared => 1,
            GateSharing::PerTask => num_behaviors,
        };
        for g in 0..gate_copies {
            gate_w.push(store.add_with_init(
                &format!("gate_w_{g}"),
                xavier_uniform(num_behaviors, 2 * d, &mut rng),
                InitScheme::XavierUniform,
            )?);
            gate_b.push(store.add_with_init(
                &format!("gate_b_{g}"),
                DenseMatrix::zeros(num_behaviors, 1),
                InitScheme::Zeros,
            )?);
        }
        if cfg.dfme.fitting_on {
            for k in 0..num_behaviors {
                r_init.push(store.add_with_init(
                    &format!("fitting_r_{k}"),
                    xavier_uniform(1, d, &mut rng),
                    InitScheme::XavierUniform,
                )?);
            }
            for l in 0..cfg.cogcn.layers {
                w_layers.push(store.add_with_init(
                    &format!("fitting_w_{l}"),
                    xavier_uniform(d, d, &mut rng),
                    InitScheme::XavierUniform,
                )?);
            }
        }
    }

    Ok((
        store,
        ModelParams { user_embedding, item_embedding, gate_w, gate_b, r_init, w_layers },
    ))
}

/// Everything the rest of a pass needs from one representation forward.
pub struct ModelForward {
    pub reps: Vec<RepPair>,
    /// Per behavior, per layer joint matrices (for oracle comparisons).
    pub intermediates: Vec<Vec<NodeId>>,
    /// Joint fused matrices per behavior.
    pub joints: Vec<NodeId>,
    /// Every bound parameter leaf, in store order.
    pub param_leaves: Vec<(ParamId, NodeId)>,
    gate_w_nodes: Vec<NodeId>,
    gate_b_nodes: Vec<NodeId>,
    r_nodes: Vec<NodeId>,
    w_nodes: Vec<NodeId>,
}

impl ModelForward {
    pub fn gate_nodes(&self, task: usize) -> (NodeId, NodeId) {
        if self.gate_w_nodes.len() == 1 {
            (self.gate_w_nodes[0], self.gate_b_nodes[0])
        } else {
            (self.gate_w_nodes[task], self.gate_b_nodes[task])
        }
    }
}

/// Bind parameters, stack the embedding tables, and run the fusion network.
pub fn forward(
    tape: &mut Tape,
    store: &ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
) -> Result<ModelForward> {
    let mut param_leaves = Vec::with_capacity(store.len());
    let mut bind = |tape: &mut Tape, pid: ParamId| -> NodeId {
        let node = tape.param(store, pid);
        param_leaves.push((pid, node));
        node
    };

    let user_node = bind(tape, ids.user_embedding);
    let item_node = bind(tape, ids.item_embedding);
    let gate_w_nodes: Vec<NodeId> = ids.gate_w.iter().map(|&p| bind(tape, p)).collect();
    let gate_b_nodes: Vec<NodeId> = ids.gate_b.iter().map(|&p| bind(tape, p)).collect();
    let r_nodes: Vec<NodeId> = ids.r_init.iter().map(|&p| bind(tape, p)).collect();
    let w_nodes: Vec<NodeId> = ids.w_layers.iter().map(|&p| bind(tape, p)).collect();

    let initial = tape.concat_rows(&[user_node, item_node])?;
    let fused = cogcn::forward_all(tape, initial, graphs, &cfg.cogcn)?;
    let reps = fused
        .reps
        .per_behavior
        .iter()
        .map(|b| RepPair { user: b.user, item: b.item })
        .collect();
    let joints = fused.reps.per_behavior.iter().map(|b| b.joint).collect();

    Ok(ModelForward {
        reps,
        intermediates: fused.intermediates,
        joints,
        param_leaves,
        gate_w_nodes,
        gate_b_nodes,
        r_nodes,
        w_nodes,
    })
}

/// Per-slot matrices a task gathers expert rows from.
pub struct TaskSlots {
    /// Per behavior j: (user matrix, item matrix).
    pub slots: Vec<(NodeId, NodeId)>,
}

/// Expert source matrices for one task: its own representations on the
/// diagonal slot, fitting-expert outputs (or raw representations when
/// fitting is off) elsewhere.
pub fn build_task_slots(
    tape: &mut Tape,
    fwd: &ModelForward,
    graphs: &GraphSet,
    cfg: &EngineConfig,
    task: usize,
) -> Result<TaskSlots> {
    let num_behaviors = fwd.reps.len();
    let mut slots = Vec::with_capacity(num_behaviors);
    for j in 0..num_behaviors {
        if j == task {
            slots.push((fwd.reps[task].user, fwd.reps[task].item));
        } else if cfg.dfme.fitting_on {
            let out = dfme::fitting_expert_matrices(
                tape,
                fwd.reps[task],
                fwd.reps[j],
                &graphs.graphs[j],
                fwd.r_nodes[j],
                &fwd.w_nodes,
                cfg.cogcn.layers,
                &cfg.dfme,
            )?;
            slots.push(out);
        } else {
            slots.push((fwd.reps[j].user, fwd.reps[j].item));
        }
    }
    Ok(TaskSlots { slots })
}

/// Prediction nodes for a batch of pairs under one task.
pub struct PairPrediction {
    /// B x 1 scores.
    pub score: NodeId,
    /// B x K gate rows (DFME head only).
    pub gates: Option<NodeId>,
    /// Per slot, the gathered per-pair expert vectors.
    pub expert_rows: Vec<NodeId>,
}

pub fn predict_pairs(
    tape: &mut Tape,
    fwd: &ModelForward,
    slots: Option<&TaskSlots>,
    cfg: &EngineConfig,
    task: usize,
    users: &Rc<Vec<usize>>,
    items: &Rc<Vec<usize>>,
) -> Result<PairPrediction> {
    let target = fwd.reps.len() - 1;
    match cfg.dfme.head {
        HeadMode::Bilinear => {
            let expert = dfme::specific_expert(tape, fwd.reps[task], users, items)?;
            let score = tape.row_mean(expert);
            Ok(PairPrediction { score, gates: None, expert_rows: vec![expert] })
        }
        HeadMode::Dfme => {
            let slots = slots.ok_or_else(|| {
                CopfError::Usage("DFME head prediction needs task slots".into())
            })?;
            let mut expert_rows = Vec::with_capacity(slots.slots.len());
            for &(user_mat, item_mat) in &slots.slots {
                let u = tape.gather_rows(user_mat, Rc::clone(users))?;
                let v = tape.gather_rows(item_mat, Rc::clone(items))?;
                expert_rows.push(tape.hadamard(u, v)?);
            }
            let (gate_w, gate_b) = fwd.gate_nodes(task);
            let gates = dfme::gate(tape, fwd.reps[task], gate_w, gate_b, users, items)?;
            let score = dfme::aggregate_and_predict(
                tape,
                &expert_rows,
                gates,
                task,
                target,
                cfg.dfme.stop_grad_mode,
            )?;
            Ok(PairPrediction { score, gates: Some(gates), expert_rows })
        }
    }
}

/// One training batch: per behavior, (user, positive item, negative item).
pub type TripleBatch = Vec<Vec<(u32, u32, u32)>>;

/// Scalar components of the joint loss, still on the tape.
pub struct LossParts {
    pub total: NodeId,
    pub bpr: NodeId,
    pub contrastive: NodeId,
    pub l2: NodeId,
    pub forward: ModelForward,
}

/// Assemble the full training loss for a triple batch:
/// ranking loss over every behavior, contrastive alignment of each
/// auxiliary behavior with the target, and the L2 penalty over all
/// parameters.
pub fn build_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
) -> Result<LossParts> {
    let fwd = forward(tape, store, ids, graphs, cfg)?;
    let num_behaviors = fwd.reps.len();
    let target = num_behaviors - 1;
    if lambdas.len() != num_behaviors || triples.len() != num_behaviors {
        return Err(CopfError::Usage(format!(
            "loss needs {num_behaviors} lambda and triple groups, got {} and {}",
            lambdas.len(),
            triples.len()
        )));
    }

    // Ranking term: -lambda_k * ln sigmoid(pos - neg), reduced per behavior.
    let mut bpr_terms = Vec::new();
    for (k, batch) in triples.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let slots = match cfg.dfme.head {
            HeadMode::Dfme => Some(build_task_slots(tape, &fwd, graphs, cfg, k)?),
            HeadMode::Bilinear => None,
        };
        let users: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.0 as usize).collect());
        let pos_items: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.1 as usize).collect());
        let neg_items: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.2 as usize).collect());
        let pos = predict_pairs(tape, &fwd, slots.as_ref(), cfg, k, &users, &pos_items)?;
        let neg = predict_pairs(tape, &fwd, slots.as_ref(), cfg, k, &users, &neg_items)?;
        bpr_terms.push(crate::training::bpr_loss(
            tape,
            pos.score,
            neg.score,
            lambdas[k],
            cfg.train.bpr_reduction,
        )?);
    }
    let bpr = if bpr_terms.is_empty() {
        tape.scalar(0.0)
    } else {
        tape.sum_nodes(&bpr_terms)?
    };

    // Contrastive term between each auxiliary behavior and the target.
    let contrastive = if cfg.dfme.contrastive_on && num_behaviors > 1 {
        let batch_ids = match cfg.dfme.neg_mode {
            NegativeSetMode::Full => None,
            NegativeSetMode::Batch => Some(batch_ids_from_triples(&triples[target])),
        };
        let mut terms = Vec::new();
        for k in 0..num_behaviors - 1 {
            terms.push(dfme::contrastive_loss(
                tape,
                fwd.reps[target],
                fwd.reps[k],
                &cfg.dfme,
                batch_ids.as_ref(),
            )?);
        }
        tape.sum_nodes(&terms)?
    } else {
        tape.scalar(0.0)
    };

    // Squared L2 over every registered parameter, uniformly.
    let mut l2_terms = Vec::with_capacity(fwd.param_leaves.len());
    for &(_, node) in &fwd.param_leaves {
        let sq = tape.square(node);
        l2_terms.push(tape.sum_all(sq));
    }
    let l2_raw = tape.sum_nodes(&l2_terms)?;
    let l2 = tape.scale(l2_raw, cfg.train.mu);

    let scaled_cl = tape.scale(contrastive, cfg.train.gamma);
    let partial = tape.add(bpr, scaled_cl)?;
    let total = tape.add(partial, l2)?;

    Ok(LossParts { total, bpr, contrastive, l2, forward: fwd })
}

/// Intermediates of a single-task ranking loss, for gradient inspection.
pub struct TaskBprLoss {
    pub loss: NodeId,
    pub forward: ModelForward,
    /// Slot matrices of the task (DFME head only).
    pub slots: Option<TaskSlots>,
    /// Gathered per-pair expert vectors for the positive and negative
    /// predictions, per slot.
    pub positive: PairPrediction,
    pub negative: PairPrediction,
}

/// Unweighted mean ranking loss of one task alone (no lambda, no
/// contrastive term, no L2); the probe the stop-gradient checks differentiate.
pub fn build_task_bpr_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
    task: usize,
    batch: &[(u32, u32, u32)],
) -> Result<TaskBprLoss> {
    let fwd = forward(tape, store, ids, graphs, cfg)?;
    if batch.is_empty() {
        return Err(CopfError::Usage("task BPR loss needs a non-empty batch".into()));
    }
    let slots = match cfg.dfme.head {
        HeadMode::Dfme => Some(build_task_slots(tape, &fwd, graphs, cfg, task)?),
        HeadMode::Bilinear => None,
    };
    let users: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.0 as usize).collect());
    let pos_items: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.1 as usize).collect());
    let neg_items: Rc<Vec<usize>> = Rc::new(batch.iter().map(|t| t.2 as usize).collect());
    let positive = predict_pairs(tape, &fwd, slots.as_ref(), cfg, task, &users, &pos_items)?;
    let negative = predict_pairs(tape, &fwd, slots.as_ref(), cfg, task, &users, &neg_items)?;
    let loss = crate::training::bpr_loss(
        tape,
        positive.score,
        negative.score,
        1.0,
        cfg.train.bpr_reduction,
    )?;
    Ok(TaskBprLoss { loss, forward: fwd, slots, positive, negative })
}

fn batch_ids_from_triples(triples: &[(u32, u32, u32)]) -> BatchIds {
    let mut users: Vec<usize> = triples.iter().map(|t| t.0 as usize).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<usize> = triples
        .iter()
        .flat_map(|t| [t.1 as usize, t.2 as usize])
        .collect();
    items.sort_unstable();
    items.dedup();
    BatchIds { users: Rc::new(users), items: Rc::new(items) }
}

/// Loss evaluation with analytic gradients written to the store. Returns
/// the scalar components and the stop-gradient values recorded on the way
/// (for the finite-difference machinery).
pub fn loss_backward(
    store: &mut ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
) -> Result<(LossValues, Vec<DenseMatrix>)> {
    let mut tape = Tape::with_sg_mode(SgMode::Record(Vec::new()));
    let parts = build_loss(&mut tape, store, ids, graphs, cfg, lambdas, triples)?;
    let values = LossValues::from_parts(&tape, &parts);
    tape.backward(parts.total)?;
    tape.write_grads(store);
    Ok((values, tape.take_recorded_sg()))
}

/// Pure loss evaluation. When `sg_replay` is provided, stop-gradient nodes
/// emit those frozen values, making this exactly the function whose
/// gradient the tape computes.
pub fn loss_value(
    store: &ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
    sg_replay: Option<&[DenseMatrix]>,
) -> Result<f64> {
    let mut tape = match sg_replay {
        Some(values) => {
            Tape::with_sg_mode(SgMode::Replay { values: values.to_vec(), cursor: 0 })
        }
        None => Tape::new(),
    };
    let parts = build_loss(&mut tape, store, ids, graphs, cfg, lambdas, triples)?;
    Ok(tape.value(parts.total).scalar_value())
}

#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub bpr: f64,
    pub contrastive: f64,
    pub l2: f64,
}

impl LossValues {
    pub fn from_parts(tape: &Tape, parts: &LossParts) -> Self {
        LossValues {
            total: tape.value(parts.total).scalar_value(),
            bpr: tape.value(parts.bpr).scalar_value(),
            contrastive: tape.value(parts.contrastive).scalar_value(),
            l2: tape.value(parts.l2).scalar_value(),
        }
    }
}

/// Rebuild parameter ids from a loaded store by the fixed naming scheme.
pub fn params_from_store(store: &ParameterStore, num_behaviors: usize) -> Result<ModelParams> {
    let need = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| CopfError::Data(format!("checkpoint lacks parameter {name}")))
    };
    let mut gate_w = Vec::new();
    let mut gate_b = Vec::new();
    for g in 0..num_behaviors {
        match (store.id(&format!("gate_w_{g}")), store.id(&format!("gate_b_{g}"))) {
            (Some(w), Some(b)) => {
                gate_w.push(w);
                gate_b.push(b);
            }
            _ => break,
        }
    }
    let mut r_init = Vec::new();
    for k in 0..num_behaviors {
        match store.id(&format!("fitting_r_{k}")) {
            Some(id) => r_init.push(id),
            None => break,
        }
    }
    let mut w_layers = Vec::new();
    for l in 0.. {
        match store.id(&format!("fitting_w_{l}")) {
            Some(id) => w_layers.push(id),
            None => break,
        }
    }
    Ok(ModelParams {
        user_embedding: need("user_embedding")?,
        item_embedding: need("item_embedding")?,
        gate_w,
        gate_b,
        r_init,
        w_layers,
    })
}

/// Engine-side forward values over every (user, item) pair, u-major, in
/// the layout the dense reference produces; comparison fodder.
pub struct ForwardTable {
    /// Per behavior, per layer: joint (M+N) x d values.
    pub intermediates: Vec<Vec<DenseMatrix>>,
    pub user_reps: Vec<DenseMatrix>,
    pub item_reps: Vec<DenseMatrix>,
    /// Per task: (M*N) x K gate rows (DFME head only).
    pub gates: Vec<Option<DenseMatrix>>,
    /// Per task: (M*N) x 1 prediction scores.
    pub predictions: Vec<DenseMatrix>,
    pub contrastive: f64,
}

pub fn forward_table(
    store: &ParameterStore,
    ids: &ModelParams,
    graphs: &GraphSet,
    cfg: &EngineConfig,
) -> Result<ForwardTable> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, store, ids, graphs, cfg)?;
    let num_behaviors = fwd.reps.len();
    let target = num_behaviors - 1;
    let (m, n) = (graphs.num_users, graphs.num_items);

    let mut users = Vec::with_capacity(m * n);
    let mut items = Vec::with_capacity(m * n);
    for u in 0..m {
        for v in 0..n {
            users.push(u);
            items.push(v);
        }
    }
    let users = Rc::new(users);
    let items = Rc::new(items);

    let mut gates = Vec::with_capacity(num_behaviors);
    let mut predictions = Vec::with_capacity(num_behaviors);
    for task in 0..num_behaviors {
        let slots = match cfg.dfme.head {
            HeadMode::Dfme => Some(build_task_slots(&mut tape, &fwd, graphs, cfg, task)?),
            HeadMode::Bilinear => None,
        };
        let pred = predict_pairs(&mut tape, &fwd, slots.as_ref(), cfg, task, &users, &items)?;
        gates.push(pred.gates.map(|g| tape.value(g).clone()));
        predictions.push(tape.value(pred.score).clone());
    }

    let contrastive = if cfg.dfme.contrastive_on && num_behaviors > 1 {
        let mut terms = Vec::new();
        for k in 0..num_behaviors - 1 {
            terms.push(dfme::contrastive_loss(
                &mut tape,
                fwd.reps[target],
                fwd.reps[k],
                &cfg.dfme,
                None,
            )?);
        }
        let total = tape.sum_nodes(&terms)?;
        tape.value(total).scalar_value()
    } else {
        0.0
    };

    Ok(ForwardTable {
        intermediates: fwd
            .intermediates
            .iter()
            .map(|layers| layers.iter().map(|&l| tape.value(l).clone()).collect())
            .collect(),
        user_reps: fwd.reps.iter().map(|r| tape.value(r.user).clone()).collect(),
        item_reps: fwd.reps.iter().map(|r| tape.value(r.item).clone()).collect(),
        gates,
        predictions,
        contrastive,
    })
}

// ---- frozen scorer for evaluation ----

/// Target-task scoring against a frozen parameter snapshot. Matrix values
/// come off a forward tape, and per-pair arithmetic follows the tape's
/// operation order exactly, so scores are bitwise what the training path
/// would produce.
pub struct Scorer {
    head: HeadMode,
    target_user: DenseMatrix,
    target_item: DenseMatrix,
    /// Per behavior j: matrices whose rows combine into expert vectors.
    slot_matrices: Vec<(DenseMatrix, DenseMatrix)>,
    gate_w: Option<DenseMatrix>,
    gate_b: Option<DenseMatrix>,
    dim: usize,
}

impl Scorer {
    pub fn build(
        store: &ParameterStore,
        ids: &ModelParams,
        graphs: &GraphSet,
        cfg: &EngineConfig,
    ) -> Result<Scorer> {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, store, ids, graphs, cfg)?;
        let target = fwd.reps.len() - 1;
        let target_user = tape.value(fwd.reps[target].user).clone();
        let target_item = tape.value(fwd.reps[target].item).clone();

        let (slot_matrices, gate_w, gate_b) = match cfg.dfme.head {
            HeadMode::Bilinear => (Vec::new(), None, None),
            HeadMode::Dfme => {
                let slots = build_task_slots(&mut tape, &fwd, graphs, cfg, target)?;
                let mats = slots
                    .slots
                    .iter()
                    .map(|&(u, v)| (tape.value(u).clone(), tape.value(v).clone()))
                    .collect();
                let (gw, gb) = fwd.gate_nodes(target);
                (mats, Some(tape.value(gw).clone()), Some(tape.value(gb).clone()))
            }
        };

        Ok(Scorer {
            head: cfg.dfme.head,
            dim: cfg.cogcn.dim,
            target_user,
            target_item,
            slot_matrices,
            gate_w,
            gate_b,
        })
    }

    pub fn num_users(&self) -> usize {
        self.target_user.rows()
    }

    pub fn num_items(&self) -> usize {
        self.target_item.rows()
    }

    /// Score one (user, item) pair under the target task.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        match self.head {
            HeadMode::Bilinear => {
                let u = self.target_user.row(user);
                let v = self.target_item.row(item);
                let mut acc = 0.0;
                for (a, b) in u.iter().zip(v) {
                    acc += a * b;
                }
                acc / self.dim as f64
            }
            HeadMode::Dfme => {
                let gate_w = self.gate_w.as_ref().expect("gate weights");
                let gate_b = self.gate_b.as_ref().expect("gate bias");
                let num_tasks = gate_w.rows();
                let u = self.target_user.row(user);
                let v = self.target_item.row(item);

                // softmax(W_g [e_u || e_v] + b_g); the concatenated feature
                // goes through the same dot kernel as the tape's matmul, so
                // the logits are bitwise identical to the training path.
                let mut features = vec![0.0; 2 * self.dim];
                features[..self.dim].copy_from_slice(u);
                features[self.dim..].copy_from_slice(v);
                let mut logits = Vec::with_capacity(num_tasks);
                for j in 0..num_tasks {
                    logits.push(crate::tensor::dense::dot(gate_w.row(j), &features) + gate_b.get(j, 0));
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for e in &mut exps {
                    *e /= denom;
                }

                // sum_j g_j * (slot_u[j][user] ∘ slot_v[j][item]), then the
                // averaging tower.
                let mut mixed = vec![0.0; self.dim];
                for (j, share) in exps.iter().enumerate() {
                    let su = self.slot_matrices[j].0.row(user);
                    let sv = self.slot_matrices[j].1.row(item);
                    for ((m, a), b) in mixed.iter_mut().zip(su).zip(sv) {
                        *m += share * (a * b);
                    }
                }
                let mut acc = 0.0;
                for m in &mixed {
                    acc += m;
                }
                acc / self.dim as f64
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EngineConfig;
    use crate::data::{build_graphs, InteractionSet};

    fn small_setup() -> (InteractionSet, GraphSet, EngineConfig) {
        let set = InteractionSet {
            user_count: 3,
            item_count: 3,
            behaviors: vec!["view".into(), "buy".into()],
            edges: vec![
                vec![(0, 0), (0, 1), (1, 0), (2, 2)],
                vec![(0, 0), (1, 1), (2, 2), (2, 0)],
            ],
            timestamps: vec![vec![None; 4], vec![None; 4]],
            user_keys: vec!["u0".into(), "u1".into(), "u2".into()],
            item_keys: vec!["v0".into(), "v1".into(), "v2".into()],
        };
        let mut cfg = EngineConfig::default();
        cfg.cogcn.dim = 4;
        cfg.cogcn.layers = 2;
        cfg.dfme.tau = 0.4;
        let graphs = build_graphs(&set, cfg.degree_mode).unwrap();
        (set, graphs, cfg)
    }

    fn triples() -> TripleBatch {
        vec![
            vec![(0, 0, 2), (1, 0, 1)],
            vec![(0, 0, 1), (1, 1, 0), (2, 2, 1)],
        ]
    }

    #[test]
    fn loss_components_are_nonnegative_and_additive() {
        let (_, graphs, cfg) = small_setup();
        let (store, ids) = init_model(3, 3, 2, &cfg).unwrap();
        let lambdas = vec![0.5, 0.5];
        let mut tape = Tape::new();
        let parts =
            build_loss(&mut tape, &store, &ids, &graphs, &cfg, &lambdas, &triples()).unwrap();
        let v = LossValues::from_parts(&tape, &parts);
        assert!(v.bpr >= 0.0 && v.contrastive >= 0.0 && v.l2 >= 0.0);
        let recombined = v.bpr + cfg.train.gamma * v.contrastive + v.l2;
        assert!((v.total - recombined).abs() < 1e-12);
    }

    #[test]
    fn disabled_terms_drop_out() {
        let (_, graphs, mut cfg) = small_setup();
        cfg.train.gamma = 0.0;
        cfg.train.mu = 0.0;
        cfg.dfme.contrastive_on = false;
        let (store, ids) = init_model(3, 3, 2, &cfg).unwrap();
        let lambdas = vec![0.5, 0.5];
        let mut tape = Tape::new();
        let parts =
            build_loss(&mut tape, &store, &ids, &graphs, &cfg, &lambdas, &triples()).unwrap();
        let v = LossValues::from_parts(&tape, &parts);
        assert_eq!(v.total, v.bpr);
    }

    #[test]
    fn l2_of_a_single_parameter_is_mu_times_square() {
        // with zero-size data terms, total = mu * sum(theta^2)
        let (_, graphs, mut cfg) = small_setup();
        cfg.dfme.head = HeadMode::Bilinear;
        cfg.dfme.contrastive_on = false;
        cfg.train.mu = 0.01;
        let (mut store, ids) = init_model(3, 3, 2, &cfg).unwrap();
        for pid in store.ids().collect::<Vec<_>>() {
            store.value_mut(pid).fill(0.0);
        }
        store.value_mut(ids.user_embedding).values_mut()[0] = 2.0;
        let lambdas = vec![0.5, 0.5];
        let empty: TripleBatch = vec![vec![], vec![]];
        let mut tape = Tape::new();
        let parts =
            build_loss(&mut tape, &store, &ids, &graphs, &cfg, &lambdas, &empty).unwrap();
        let v = LossValues::from_parts(&tape, &parts);
        assert!((v.total - 0.04).abs() < 1e-15);
    }

    #[test]
    fn scorer_matches_tape_predictions_bitwise() {
        let (_, graphs, cfg) = small_setup();
        let (store, ids) = init_model(3, 3, 2, &cfg).unwrap();
        let scorer = Scorer::build(&store, &ids, &graphs, &cfg).unwrap();

        let mut tape = Tape::new();
        let fwd = forward(&mut tape, &store, &ids, &graphs, &cfg).unwrap();
        let slots = build_task_slots(&mut tape, &fwd, &graphs, &cfg, 1).unwrap();
        let users = Rc::new(vec![0usize, 1, 2]);
        let items = Rc::new(vec![2usize, 0, 1]);
        let pred =
            predict_pairs(&mut tape, &fwd, Some(&slots), &cfg, 1, &users, &items).unwrap();
        for (row, (&u, &v)) in users.iter().zip(items.iter()).enumerate() {
            let tape_score = tape.value(pred.score).get(row, 0);
            let frozen_score = scorer.score(u, v);
            assert_eq!(tape_score.to_bits(), frozen_score.to_bits());
        }
    }

    #[test]
    fn auxiliary_only_parameters_get_zero_grads_when_lambdas_degenerate() {
        let (_, graphs, mut cfg) = small_setup();
        cfg.dfme.gate_sharing = GateSharing::PerTask;
        cfg.dfme.contrastive_on = false;
        cfg.dfme.fitting_on = false;
        cfg.train.gamma = 0.0;
        cfg.train.mu = 0.0;
        let (mut store, ids) = init_model(3, 3, 2, &cfg).unwrap();
        let lambdas = vec![0.0, 1.0];
        let (_values, _) =
            loss_backward(&mut store, &ids, &graphs, &cfg, &lambdas, &triples()).unwrap();
        // the auxiliary task's private gate receives nothing
        let aux_gate = store.grad(ids.gate_w[0]);
        assert!(aux_gate.values().iter().all(|&g| g == 0.0));
        let target_gate = store.grad(ids.gate_w[1]);
        assert!(target_gate.values().iter().any(|&g| g != 0.0));
    }
}
