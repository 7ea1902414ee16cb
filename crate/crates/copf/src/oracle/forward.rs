//! Reference forward pass: the fusion network, the expert head, and the
//! joint loss, recomputed with plain dense arithmetic.
//!
//! Stop-gradient semantics for reference losses: the wrapped aggregation
//! terms are evaluated from a frozen parameter copy, which is exactly the
//! function whose gradient the tape reports. `rep_delta` injects an
//! additive perturbation on the fused target representations of the live
//! side, so node-level sensitivities can be measured by differencing.

use crate::config::{EngineConfig, HeadMode, InMode, PostMode, PreMode, SelfLoopMode, StopGradMode};
use crate::error::{CopfError, Result};
use crate::model::TripleBatch;
use crate::oracle::dense::{self, Mat};
use crate::oracle::fixture::DenseFixture;

/// Fusion outputs of the reference path.
pub struct OracleFusion {
    /// Per behavior, per layer: joint (M+N) x d matrices.
    pub intermediates: Vec<Vec<Mat>>,
    pub user_reps: Vec<Mat>,
    pub item_reps: Vec<Mat>,
}

/// Everything the reference computes for a fixture.
pub struct OracleForward {
    pub fusion: OracleFusion,
    /// Per task, per slot: expert source matrices (user side, item side).
    pub slot_matrices: Vec<Vec<(Mat, Mat)>>,
    /// Per task: gate rows for all pairs, u-major (row u * N + v).
    pub gates: Vec<Mat>,
    /// Per task: M x N prediction scores.
    pub predictions: Vec<Mat>,
}

fn propagation_operator(fixture: &DenseFixture, behavior: usize) -> Mat {
    let (m, n) = (fixture.num_users, fixture.num_items);
    let total = m + n;
    let mut adjacency = dense::zeros(total, total);
    for u in 0..m {
        for v in 0..n {
            let b = fixture.interactions[behavior][u][v];
            if b != 0.0 {
                adjacency[u][m + v] = b;
                adjacency[m + v][u] = b;
            }
        }
    }
    let mut operator = dense::zeros(total, total);
    for r in 0..total {
        let mut degree = 0.0;
        for c in 0..total {
            degree += adjacency[r][c];
        }
        if degree > 0.0 {
            for c in 0..total {
                operator[r][c] = adjacency[r][c] / degree;
            }
        }
    }
    operator
}

fn relations(in_mode: InMode, k: usize, num_behaviors: usize) -> Vec<usize> {
    match in_mode {
        InMode::Full => (0..=k).collect(),
        InMode::Strict => vec![k],
        InMode::None => (0..num_behaviors).collect(),
    }
}

/// The fusion stack, layer by layer, with the same term order the engine
/// uses. `rep_delta`, when given, adds onto the fused target outputs.
pub fn dense_fusion(
    fixture: &DenseFixture,
    cfg: &EngineConfig,
    rep_delta: Option<(&Mat, &Mat)>,
) -> OracleFusion {
    let num_behaviors = fixture.num_behaviors();
    let m = fixture.num_users;
    let operators: Vec<Mat> = (0..num_behaviors)
        .map(|k| propagation_operator(fixture, k))
        .collect();
    let initial = dense::stack(&fixture.user_embedding, &fixture.item_embedding);

    let mut intermediates: Vec<Vec<Mat>> = Vec::with_capacity(num_behaviors);
    let mut fused: Vec<Mat> = Vec::with_capacity(num_behaviors);
    let mut last_layers: Vec<Mat> = Vec::with_capacity(num_behaviors);
    let mut seed = initial.clone();

    for k in 0..num_behaviors {
        let mut layers = vec![seed.clone()];
        for _ in 0..cfg.cogcn.layers {
            let current = layers.last().unwrap();
            let mut acc: Option<Mat> = None;
            for k_prime in relations(cfg.cogcn.in_mode, k, num_behaviors) {
                let mut term = dense::matmul(&operators[k_prime], current);
                if cfg.cogcn.self_loop_mode == SelfLoopMode::PerRelation {
                    term = dense::add(&term, current);
                }
                acc = Some(match acc {
                    None => term,
                    Some(a) => dense::add(&a, &term),
                });
            }
            let mut next = acc.expect("at least one relation");
            if cfg.cogcn.self_loop_mode == SelfLoopMode::Once {
                next = dense::add(&next, current);
            }
            layers.push(next);
        }

        let mut fused_k = layers[0].clone();
        for layer in &layers[1..] {
            fused_k = dense::add(&fused_k, layer);
        }
        last_layers.push(layers.last().unwrap().clone());
        fused.push(fused_k);
        intermediates.push(layers);

        if k + 1 < num_behaviors {
            seed = match cfg.cogcn.pre_mode {
                PreMode::Full => {
                    let mut acc = last_layers[0].clone();
                    for upstream in &last_layers[1..] {
                        acc = dense::add(&acc, upstream);
                    }
                    dense::add(&acc, &initial)
                }
                PreMode::Strict => dense::add(last_layers.last().unwrap(), &initial),
                PreMode::None => initial.clone(),
            };
        }
    }

    let joint_outputs: Vec<Mat> = match cfg.cogcn.post_mode {
        PostMode::Decoupled => fused,
        PostMode::Fused => {
            let mut acc = fused[0].clone();
            for f in &fused[1..] {
                acc = dense::add(&acc, f);
            }
            let mean = dense::scale(&acc, 1.0 / num_behaviors as f64);
            vec![mean; num_behaviors]
        }
    };

    let mut user_reps = Vec::with_capacity(num_behaviors);
    let mut item_reps = Vec::with_capacity(num_behaviors);
    let target = num_behaviors - 1;
    for (k, joint) in joint_outputs.iter().enumerate() {
        let mut user: Mat = joint[..m].to_vec();
        let mut item: Mat = joint[m..].to_vec();
        if let Some((du, dv)) = rep_delta {
            if k == target {
                user = dense::add(&user, du);
                item = dense::add(&item, dv);
            }
        }
        user_reps.push(user);
        item_reps.push(item);
    }
    OracleFusion { intermediates, user_reps, item_reps }
}

/// Expert source matrices for one task, mirroring the slot layout of the
/// engine head.
fn task_slots(
    fixture: &DenseFixture,
    cfg: &EngineConfig,
    fusion: &OracleFusion,
    task: usize,
) -> Vec<(Mat, Mat)> {
    let num_behaviors = fixture.num_behaviors();
    let m = fixture.num_users;
    let mut slots = Vec::with_capacity(num_behaviors);
    for j in 0..num_behaviors {
        if j == task {
            slots.push((fusion.user_reps[task].clone(), fusion.item_reps[task].clone()));
        } else if cfg.dfme.fitting_on {
            let blend = |a: &Mat, b: &Mat| {
                dense::scale(
                    &dense::add(&dense::scale(a, cfg.dfme.alpha), &dense::scale(b, cfg.dfme.beta)),
                    0.5,
                )
            };
            let u_in = blend(&fusion.user_reps[task], &fusion.user_reps[j]);
            let v_in = blend(&fusion.item_reps[task], &fusion.item_reps[j]);
            let mut state = dense::stack(&u_in, &v_in);
            let operator = propagation_operator(fixture, j);
            let mut behavior_embedding = fixture.r_init[j].clone();
            for w in fixture.w_layers.iter().take(cfg.cogcn.layers) {
                // r_next[c] = sum_i w[c][i] * r[i]
                behavior_embedding = (0..fixture.dim)
                    .map(|c| {
                        let mut acc = 0.0;
                        for (i, ri) in behavior_embedding.iter().enumerate() {
                            acc += ri * w[c][i];
                        }
                        acc
                    })
                    .collect();
                let modulated: Mat = state
                    .iter()
                    .map(|row| {
                        row.iter()
                            .zip(&behavior_embedding)
                            .map(|(x, r)| x * r)
                            .collect()
                    })
                    .collect();
                let propagated = dense::matmul(&operator, &modulated);
                state = dense::add(&propagated, &modulated);
            }
            slots.push((state[..m].to_vec(), state[m..].to_vec()));
        } else {
            slots.push((fusion.user_reps[j].clone(), fusion.item_reps[j].clone()));
        }
    }
    slots
}

fn gate_row(
    fixture: &DenseFixture,
    fusion: &OracleFusion,
    task: usize,
    user: usize,
    item: usize,
) -> Vec<f64> {
    let d = fixture.dim;
    let num_behaviors = fixture.num_behaviors();
    let mut logits = Vec::with_capacity(num_behaviors);
    for j in 0..num_behaviors {
        let mut acc = 0.0;
        for c in 0..d {
            acc += fixture.gate_w[j][c] * fusion.user_reps[task][user][c];
        }
        for c in 0..d {
            acc += fixture.gate_w[j][d + c] * fusion.item_reps[task][item][c];
        }
        logits.push(acc + fixture.gate_b[j]);
    }
    dense::softmax(&logits)
}

/// One pair's prediction under a task, with optional frozen substitution of
/// the stop-gradient slots.
#[allow(clippy::too_many_arguments)]
fn predict_pair(
    cfg: &EngineConfig,
    fixture: &DenseFixture,
    fusion: &OracleFusion,
    slots: &[(Mat, Mat)],
    frozen: Option<(&DenseFixture, &OracleFusion, &[(Mat, Mat)])>,
    task: usize,
    user: usize,
    item: usize,
) -> f64 {
    let d = fixture.dim;
    match cfg.dfme.head {
        HeadMode::Bilinear => {
            let mut acc = 0.0;
            for c in 0..d {
                acc += fusion.user_reps[task][user][c] * fusion.item_reps[task][item][c];
            }
            acc / d as f64
        }
        HeadMode::Dfme => {
            let num_behaviors = fixture.num_behaviors();
            let target = num_behaviors - 1;
            let gates = gate_row(fixture, fusion, task, user, item);
            let frozen_gates = frozen.map(|(f, fu, _)| gate_row(f, fu, task, user, item));
            let mut mixed = vec![0.0; d];
            for j in 0..num_behaviors {
                let blocked = match cfg.dfme.stop_grad_mode {
                    StopGradMode::TargetOnly => task != target && j == target,
                    StopGradMode::All => j != task,
                    StopGradMode::None => false,
                };
                let (slot_u, slot_v, g) = if blocked {
                    match (&frozen, &frozen_gates) {
                        (Some((_, _, fslots)), Some(fg)) => {
                            (&fslots[j].0, &fslots[j].1, fg[j])
                        }
                        _ => (&slots[j].0, &slots[j].1, gates[j]),
                    }
                } else {
                    (&slots[j].0, &slots[j].1, gates[j])
                };
                for c in 0..d {
                    mixed[c] += g * (slot_u[user][c] * slot_v[item][c]);
                }
            }
            let mut acc = 0.0;
            for v in &mixed {
                acc += v;
            }
            acc / d as f64
        }
    }
}

/// Full reference forward: fusion intermediates, slot matrices, gates for
/// every pair, and predictions for every pair under every task.
pub fn dense_forward(fixture: &DenseFixture, cfg: &EngineConfig) -> OracleForward {
    let fusion = dense_fusion(fixture, cfg, None);
    let num_behaviors = fixture.num_behaviors();
    let (m, n) = (fixture.num_users, fixture.num_items);

    let mut slot_matrices = Vec::with_capacity(num_behaviors);
    let mut gates = Vec::with_capacity(num_behaviors);
    let mut predictions = Vec::with_capacity(num_behaviors);
    for task in 0..num_behaviors {
        let slots = task_slots(fixture, cfg, &fusion, task);
        let mut gate_table = Vec::with_capacity(m * n);
        let mut preds = dense::zeros(m, n);
        for u in 0..m {
            for v in 0..n {
                if cfg.dfme.head == HeadMode::Dfme {
                    gate_table.push(gate_row(fixture, &fusion, task, u, v));
                }
                preds[u][v] = predict_pair(cfg, fixture, &fusion, &slots, None, task, u, v);
            }
        }
        slot_matrices.push(slots);
        gates.push(gate_table);
        predictions.push(preds);
    }
    OracleForward { fusion, slot_matrices, gates, predictions }
}

/// Summed InfoNCE terms between every auxiliary behavior and the target,
/// user side plus item side, full negative sets.
pub fn contrastive_total(fusion: &OracleFusion, cfg: &EngineConfig) -> f64 {
    let num_behaviors = fusion.user_reps.len();
    let target = num_behaviors - 1;
    if !cfg.dfme.contrastive_on || num_behaviors < 2 {
        return 0.0;
    }
    let side = |anchors: &Mat, positives: &Mat| {
        let rows = anchors.len();
        let mut total = 0.0;
        for u in 0..rows {
            let mut sims = Vec::with_capacity(rows);
            for other in positives {
                let mut dot = 0.0;
                for (a, b) in anchors[u].iter().zip(other) {
                    dot += a * b;
                }
                sims.push(dot / cfg.dfme.tau);
            }
            total += dense::log_sum_exp(&sims) - sims[u];
        }
        total / rows as f64
    };
    let mut acc: Option<f64> = None;
    for k in 0..num_behaviors - 1 {
        let user_side = side(&fusion.user_reps[target], &fusion.user_reps[k]);
        let item_side = side(&fusion.item_reps[target], &fusion.item_reps[k]);
        let term = user_side + item_side;
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
    }
    acc.unwrap_or(0.0)
}

/// Which loss the reference evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSelect {
    /// Ranking + contrastive + L2, the training objective.
    Total,
    /// Unweighted mean ranking loss of one task alone.
    BprTask(usize),
}

/// Reference loss. With `sg_active`, stop-gradient slots evaluate from
/// `frozen`; `rep_delta` perturbs the live fused target representations.
pub fn oracle_loss(
    live: &DenseFixture,
    frozen: &DenseFixture,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
    select: LossSelect,
    sg_active: bool,
    rep_delta: Option<(&Mat, &Mat)>,
) -> Result<f64> {
    let num_behaviors = live.num_behaviors();
    let _target = num_behaviors - 1;
    let fusion = dense_fusion(live, cfg, rep_delta);
    let frozen_fusion = dense_fusion(frozen, cfg, None);

    let score = |task: usize, user: usize, item: usize, slots: &[(Mat, Mat)], frozen_slots: &[(Mat, Mat)]| {
        let frozen_ctx = if sg_active && cfg.dfme.head == HeadMode::Dfme {
            Some((frozen, &frozen_fusion, frozen_slots))
        } else {
            None
        };
        predict_pair(cfg, live, &fusion, slots, frozen_ctx, task, user, item)
    };

    let task_bpr = |task: usize| -> Result<f64> {
        let batch = &triples[task];
        if batch.is_empty() {
            return Ok(0.0);
        }
        let slots = task_slots(live, cfg, &fusion, task);
        let frozen_slots = task_slots(frozen, cfg, &frozen_fusion, task);
        let mut acc = 0.0;
        for &(u, s, t) in batch {
            let pos = score(task, u as usize, s as usize, &slots, &frozen_slots);
            let neg = score(task, u as usize, t as usize, &slots, &frozen_slots);
            acc += dense::softplus(neg - pos);
        }
        Ok(match cfg.train.bpr_reduction {
            crate::config::BprReduction::Mean => acc / batch.len() as f64,
            crate::config::BprReduction::Sum => acc,
        })
    };

    match select {
        LossSelect::BprTask(task) => {
            if task >= num_behaviors {
                return Err(CopfError::Usage(format!("no task {task}")));
            }
            task_bpr(task)
        }
        LossSelect::Total => {
            let mut bpr_acc: Option<f64> = None;
            for (k, &lambda) in lambdas.iter().enumerate() {
                if triples[k].is_empty() {
                    continue;
                }
                let term = lambda * task_bpr(k)?;
                bpr_acc = Some(match bpr_acc {
                    None => term,
                    Some(a) => a + term,
                });
            }
            let bpr = bpr_acc.unwrap_or(0.0);

            let contrastive = contrastive_total(&fusion, cfg);

            // L2 over the parameters the configuration registers, in the
            // engine's registration order.
            let mut l2_acc: Option<f64> = None;
            let mut push = |sum: f64| {
                l2_acc = Some(match l2_acc {
                    None => sum,
                    Some(a) => a + sum,
                });
            };
            let sq = |mat: &Mat| {
                let mut acc = 0.0;
                for row in mat {
                    for v in row {
                        acc += v * v;
                    }
                }
                acc
            };
            push(sq(&live.user_embedding));
            push(sq(&live.item_embedding));
            if cfg.dfme.head == HeadMode::Dfme {
                push(sq(&live.gate_w));
                let mut b_acc = 0.0;
                for v in &live.gate_b {
                    b_acc += v * v;
                }
                push(b_acc);
                if cfg.dfme.fitting_on {
                    for r in &live.r_init {
                        let mut acc = 0.0;
                        for v in r {
                            acc += v * v;
                        }
                        push(acc);
                    }
                    for w in &live.w_layers {
                        push(sq(w));
                    }
                }
            }
            let l2 = cfg.train.mu * l2_acc.unwrap_or(0.0);

            Ok((bpr + cfg.train.gamma * contrastive) + l2)
        }
    }
}
