//! Multi-expert prediction head with distribution fitting and selective
//! gradient blocking.
//!
//! Each behavior is one task. A task's own expert is the hadamard product
//! of its fused user and item vectors; its view of every other behavior is
//! a behavior-fitting expert: a lightly scaled blend of the two behaviors'
//! representations, propagated through the other behavior's graph under a
//! hierarchically updated behavior embedding. A softmax gate mixes the
//! experts, and an averaging tower turns the mix into a score. The
//! contrastive term aligns auxiliary representations with the target's.
//!
//! Gradient blocking happens at aggregation: with the target-only mode,
//! the target-expert slot of every auxiliary task is wrapped in
//! stop-gradient, so auxiliary losses cannot push on target-behavior
//! parameters through that slot.

use std::rc::Rc;

use crate::config::{DfmeConfig, StopGradMode};
use crate::data::BehaviorGraph;
use crate::error::{CopfError, Result};
use crate::tensor::tape::NodeId;
use crate::tensor::Tape;

/// Fused user/item representation nodes of one behavior.
#[derive(Clone, Copy, Debug)]
pub struct RepPair {
    pub user: NodeId,
    pub item: NodeId,
}

/// Restriction of the contrastive negative set to the current batch.
#[derive(Clone, Debug)]
pub struct BatchIds {
    pub users: Rc<Vec<usize>>,
    pub items: Rc<Vec<usize>>,
}

/// InfoNCE alignment between the target behavior and auxiliary behavior
/// `k`: user-side anchors are target user vectors, positives the same
/// user's auxiliary vector, negatives every other user's auxiliary vector
/// (full mode) or the batch's (batch mode); the item side is symmetric and
/// the two sides add.
pub fn contrastive_loss(
    tape: &mut Tape,
    target: RepPair,
    auxiliary: RepPair,
    cfg: &DfmeConfig,
    batch: Option<&BatchIds>,
) -> Result<NodeId> {
    if cfg.tau <= 0.0 {
        return Err(CopfError::Config(format!(
            "contrastive temperature must be > 0, got {}",
            cfg.tau
        )));
    }
    let user_side = info_nce_side(tape, target.user, auxiliary.user, cfg, batch.map(|b| &b.users))?;
    let item_side = info_nce_side(tape, target.item, auxiliary.item, cfg, batch.map(|b| &b.items))?;
    tape.add(user_side, item_side)
}

fn info_nce_side(
    tape: &mut Tape,
    anchors: NodeId,
    positives: NodeId,
    cfg: &DfmeConfig,
    batch: Option<&Rc<Vec<usize>>>,
) -> Result<NodeId> {
    let (anchors, positives) = match batch {
        Some(ids) => (
            tape.gather_rows(anchors, Rc::clone(ids))?,
            tape.gather_rows(positives, Rc::clone(ids))?,
        ),
        None => (anchors, positives),
    };
    let (anchors, positives) = if cfg.cosine_similarity {
        (normalize_rows(tape, anchors)?, normalize_rows(tape, positives)?)
    } else {
        (anchors, positives)
    };
    let similarity = tape.matmul_nt(anchors, positives)?;
    let scaled = tape.scale(similarity, 1.0 / cfg.tau);
    let lse = tape.row_log_sum_exp(scaled);
    let pos = tape.diag(scaled)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_row))
}

/// Row normalization written with the existing primitive set:
/// `x / ||x|| = x * exp(-0.5 ln(||x||^2 + eps))`.
fn normalize_rows(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let cols = tape.value(x).cols();
    let squared = tape.square(x);
    let mean = tape.row_mean(squared);
    let norm_sq = tape.scale(mean, cols as f64);
    let eps = tape.constant(crate::tensor::DenseMatrix::zeros(
        tape.value(norm_sq).rows(),
        1,
    ).map(|_| 1e-12));
    let guarded = tape.add(norm_sq, eps)?;
    let log_norm_sq = tape.log(guarded);
    let neg_half = tape.scale(log_norm_sq, -0.5);
    let inv_norm = tape.exp(neg_half);
    tape.mul_col_broadcast(x, inv_norm)
}

/// Behavior-specific expert for pairs `(us[i], vs[i])`: the hadamard
/// product of the behavior's fused user and item rows.
pub fn specific_expert(
    tape: &mut Tape,
    rep: RepPair,
    users: &Rc<Vec<usize>>,
    items: &Rc<Vec<usize>>,
) -> Result<NodeId> {
    let u = tape.gather_rows(rep.user, Rc::clone(users))?;
    let v = tape.gather_rows(rep.item, Rc::clone(items))?;
    tape.hadamard(u, v)
}

/// Full-matrix part of the behavior-fitting expert: blend task and other
/// representations, stack user over item rows, and propagate `depth` steps
/// through the other behavior's operator, each step modulated by the
/// hierarchically updated behavior embedding.
///
/// Step `i` uses `R_i = W_i * R_{i-1}` (the stored d-vector is `R_0`):
/// `E_i = (P + I)(E_{i-1} ∘ R_i)`.
pub fn fitting_expert_matrices(
    tape: &mut Tape,
    task_rep: RepPair,
    other_rep: RepPair,
    other_graph: &BehaviorGraph,
    r_init: NodeId,
    w_layers: &[NodeId],
    depth: usize,
    cfg: &DfmeConfig,
) -> Result<(NodeId, NodeId)> {
    if depth > w_layers.len() {
        return Err(CopfError::Config(format!(
            "fitting depth {depth} exceeds the {} available layer transforms",
            w_layers.len()
        )));
    }
    let num_users = tape.value(task_rep.user).rows();
    let num_items = tape.value(task_rep.item).rows();

    let u_in = blend(tape, task_rep.user, other_rep.user, cfg)?;
    let v_in = blend(tape, task_rep.item, other_rep.item, cfg)?;
    let mut state = tape.concat_rows(&[u_in, v_in])?;

    let mut behavior_embedding = r_init;
    for w in w_layers.iter().take(depth) {
        behavior_embedding = tape.matmul_nt(behavior_embedding, *w)?;
        let modulated = tape.mul_row_broadcast(state, behavior_embedding)?;
        let propagated = tape.spmm(&other_graph.operator, modulated)?;
        state = tape.add(propagated, modulated)?;
    }

    let user_out = tape.slice_rows(state, 0, num_users)?;
    let item_out = tape.slice_rows(state, num_users, num_items)?;
    Ok((user_out, item_out))
}

/// `(alpha * task + beta * other) / 2`.
fn blend(tape: &mut Tape, task: NodeId, other: NodeId, cfg: &DfmeConfig) -> Result<NodeId> {
    let a = tape.scale(task, cfg.alpha);
    let b = tape.scale(other, cfg.beta);
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Behavior-fitting expert rows for pairs `(us[i], vs[i])`.
pub fn fitting_expert(
    tape: &mut Tape,
    task_rep: RepPair,
    other_rep: RepPair,
    other_graph: &BehaviorGraph,
    r_init: NodeId,
    w_layers: &[NodeId],
    depth: usize,
    cfg: &DfmeConfig,
    users: &Rc<Vec<usize>>,
    items: &Rc<Vec<usize>>,
) -> Result<NodeId> {
    let (user_out, item_out) = fitting_expert_matrices(
        tape, task_rep, other_rep, other_graph, r_init, w_layers, depth, cfg,
    )?;
    let u = tape.gather_rows(user_out, Rc::clone(users))?;
    let v = tape.gather_rows(item_out, Rc::clone(items))?;
    tape.hadamard(u, v)
}

/// Per-pair expert weights: softmax over
/// `W_g (e_u || e_v) + b_g`, one row per pair.
pub fn gate(
    tape: &mut Tape,
    rep: RepPair,
    gate_w: NodeId,
    gate_b: NodeId,
    users: &Rc<Vec<usize>>,
    items: &Rc<Vec<usize>>,
) -> Result<NodeId> {
    let u = tape.gather_rows(rep.user, Rc::clone(users))?;
    let v = tape.gather_rows(rep.item, Rc::clone(items))?;
    let features = tape.concat_cols(u, v)?;
    let logits = tape.matmul_nt(features, gate_w)?;
    let num_tasks = tape.value(gate_b).rows();
    let bias_row = tape.reshape(gate_b, 1, num_tasks)?;
    let shifted = tape.add_row_broadcast(logits, bias_row)?;
    Ok(tape.softmax_rows(shifted))
}

/// Weighted expert mix plus averaging tower, with the stop-gradient
/// wrapper chosen per mode:
/// target-only wraps only the target slot of auxiliary tasks, `all` wraps
/// every cross-task slot, `none` never wraps. The wrapper is forward-
/// transparent; only gradients change.
pub fn aggregate_and_predict(
    tape: &mut Tape,
    experts: &[NodeId],
    gates: NodeId,
    task: usize,
    target: usize,
    mode: StopGradMode,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(experts.len());
    for (j, &expert) in experts.iter().enumerate() {
        let weight = tape.slice_cols(gates, j, 1)?;
        let mut term = tape.mul_col_broadcast(expert, weight)?;
        let block = match mode {
            StopGradMode::TargetOnly => task != target && j == target,
            StopGradMode::All => j != task,
            StopGradMode::None => false,
        };
        if block {
            term = tape.stop_gradient(term);
        }
        terms.push(term);
    }
    let mixed = tape.sum_nodes(&terms)?;
    Ok(tape.row_mean(mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DegreeMode;
    use crate::data::{build_graphs, InteractionSet};
    use crate::tensor::DenseMatrix;

    fn pair(tape: &mut Tape, user: DenseMatrix, item: DenseMatrix) -> RepPair {
        RepPair { user: tape.constant(user), item: tape.constant(item) }
    }

    fn identity2() -> DenseMatrix {
        DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    fn dfme_cfg(tau: f64) -> DfmeConfig {
        DfmeConfig { tau, ..DfmeConfig::default() }
    }

    #[test]
    fn contrastive_singleton_is_zero() {
        let mut tape = Tape::new();
        let one = DenseMatrix::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let target = pair(&mut tape, one.clone(), one.clone());
        let aux = pair(&mut tape, one.clone(), one);
        let loss = contrastive_loss(&mut tape, target, aux, &dfme_cfg(0.5), None).unwrap();
        assert_eq!(tape.value(loss).scalar_value(), 0.0);
    }

    #[test]
    fn contrastive_two_user_closed_form() {
        let mut tape = Tape::new();
        let target = pair(&mut tape, identity2(), identity2());
        let aux = pair(&mut tape, identity2(), identity2());
        let loss = contrastive_loss(&mut tape, target, aux, &dfme_cfg(1.0), None).unwrap();
        let per_side = (1.0 + 1.0_f64.exp()).ln() - 1.0; // -ln(e / (e + 1))
        let expected = 2.0 * per_side;
        assert!((tape.value(loss).scalar_value() - expected).abs() < 1e-12);
        assert!((expected - 0.626_523_375_036_445_6).abs() < 1e-12);
    }

    #[test]
    fn flipping_auxiliary_sign_increases_the_loss() {
        let build = |sign: f64| {
            let mut tape = Tape::new();
            let target = pair(&mut tape, identity2(), identity2());
            let aux = pair(&mut tape, identity2().scale(sign), identity2().scale(sign));
            let loss = contrastive_loss(&mut tape, target, aux, &dfme_cfg(0.7), None).unwrap();
            tape.value(loss).scalar_value()
        };
        assert!(build(-1.0) > build(1.0));
    }

    #[test]
    fn identical_rows_cost_ln_n_per_side() {
        let n = 5;
        let row = vec![0.4, -0.9, 0.2];
        let mat = DenseMatrix::from_rows(&vec![row; n]).unwrap();
        let mut tape = Tape::new();
        let target = pair(&mut tape, mat.clone(), mat.clone());
        let aux = pair(&mut tape, mat.clone(), mat);
        let loss = contrastive_loss(&mut tape, target, aux, &dfme_cfg(0.3), None).unwrap();
        let expected = 2.0 * (n as f64).ln();
        assert!((tape.value(loss).scalar_value() - expected).abs() < 1e-9);
    }

    #[test]
    fn specific_expert_is_the_hadamard_product() {
        let mut tape = Tape::new();
        let rep = pair(
            &mut tape,
            DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap(),
        );
        let e = specific_expert(&mut tape, rep, &Rc::new(vec![0]), &Rc::new(vec![0])).unwrap();
        assert_eq!(tape.value(e).row(0), &[3.0, 8.0]);

        let mut tape2 = Tape::new();
        let rep2 = pair(
            &mut tape2,
            DenseMatrix::zeros(1, 2),
            DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap(),
        );
        let z = specific_expert(&mut tape2, rep2, &Rc::new(vec![0]), &Rc::new(vec![0])).unwrap();
        assert_eq!(tape2.value(z).row(0), &[0.0, 0.0]);
    }

    fn empty_graph_set(m: usize, n: usize) -> crate::data::GraphSet {
        let set = InteractionSet {
            user_count: m,
            item_count: n,
            behaviors: vec!["a".into(), "b".into()],
            edges: vec![vec![], vec![(0, 0)]],
            timestamps: vec![vec![], vec![None]],
            user_keys: (0..m).map(|i| format!("u{i}")).collect(),
            item_keys: (0..n).map(|i| format!("v{i}")).collect(),
        };
        build_graphs(&set, DegreeMode::PerBehavior).unwrap()
    }

    #[test]
    fn fitting_blend_matches_direct_substitution() {
        let mut tape = Tape::new();
        let task = tape.constant(DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let other = tape.constant(DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let cfg = DfmeConfig { alpha: 0.1, beta: 0.001, ..DfmeConfig::default() };
        let blended = blend(&mut tape, task, other, &cfg).unwrap();
        assert_eq!(tape.value(blended).row(0), &[0.05, 0.0005]);
    }

    #[test]
    fn fitting_expert_with_neutral_elements_reduces_to_blended_hadamard() {
        // behavior 0 is empty, R = ones, W = identity: propagation leaves
        // the blended input untouched.
        let graphs = empty_graph_set(1, 1);
        let cfg = DfmeConfig { alpha: 0.1, beta: 0.001, ..DfmeConfig::default() };
        let mut tape = Tape::new();
        let task = pair(
            &mut tape,
            DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.2, 0.6]]).unwrap(),
        );
        let other = pair(
            &mut tape,
            DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.4, -0.2]]).unwrap(),
        );
        let r = tape.constant(DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let w = tape.constant(identity2());
        let expert = fitting_expert(
            &mut tape,
            task,
            other,
            &graphs.graphs[0],
            r,
            &[w],
            1,
            &cfg,
            &Rc::new(vec![0]),
            &Rc::new(vec![0]),
        )
        .unwrap();
        let u_in = [0.05, 0.0005];
        let v_in = [(0.1 * 0.2 + 0.001 * 0.4) / 2.0, (0.1 * 0.6 + 0.001 * -0.2) / 2.0];
        let expected = [u_in[0] * v_in[0], u_in[1] * v_in[1]];
        let got = tape.value(expert).row(0);
        assert!((got[0] - expected[0]).abs() < 1e-15);
        assert!((got[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn fitting_depth_cannot_exceed_available_transforms() {
        let graphs = empty_graph_set(1, 1);
        let mut tape = Tape::new();
        let task = pair(&mut tape, DenseMatrix::zeros(1, 2), DenseMatrix::zeros(1, 2));
        let other = pair(&mut tape, DenseMatrix::zeros(1, 2), DenseMatrix::zeros(1, 2));
        let r = tape.constant(DenseMatrix::zeros(1, 2));
        let err = fitting_expert_matrices(
            &mut tape,
            task,
            other,
            &graphs.graphs[0],
            r,
            &[],
            1,
            &DfmeConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }

    #[test]
    fn zero_gate_weights_give_uniform_selection() {
        let mut tape = Tape::new();
        let rep = pair(
            &mut tape,
            DenseMatrix::from_rows(&[vec![0.3, 0.5]]).unwrap(),
            DenseMatrix::from_rows(&[vec![-0.1, 0.7]]).unwrap(),
        );
        let w = tape.constant(DenseMatrix::zeros(3, 4));
        let b = tape.constant(DenseMatrix::zeros(3, 1));
        let g = gate(&mut tape, rep, w, b, &Rc::new(vec![0]), &Rc::new(vec![0])).unwrap();
        for &v in tape.value(g).row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_rows_are_normalized_probabilities() {
        let mut tape = Tape::new();
        let rep = pair(
            &mut tape,
            DenseMatrix::from_rows(&[vec![0.9, -0.4], vec![0.1, 0.2]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.5, 0.3], vec![-0.6, 0.8]]).unwrap(),
        );
        let w = tape.constant(
            DenseMatrix::from_values(2, 4, vec![0.4, -0.2, 0.9, 0.1, -0.3, 0.8, 0.2, -0.5])
                .unwrap(),
        );
        let b = tape.constant(DenseMatrix::from_values(2, 1, vec![0.05, -0.02]).unwrap());
        let g = gate(
            &mut tape,
            rep,
            w,
            b,
            &Rc::new(vec![0, 1]),
            &Rc::new(vec![1, 0]),
        )
        .unwrap();
        let gv = tape.value(g);
        for r in 0..gv.rows() {
            let sum: f64 = gv.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(gv.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn single_task_aggregation_is_the_expert_mean() {
        let mut tape = Tape::new();
        let expert = tape.constant(DenseMatrix::from_rows(&[vec![2.0, 4.0]]).unwrap());
        let gates = tape.constant(DenseMatrix::from_rows(&[vec![1.0]]).unwrap());
        let pred = aggregate_and_predict(
            &mut tape,
            &[expert],
            gates,
            0,
            0,
            StopGradMode::TargetOnly,
        )
        .unwrap();
        assert_eq!(tape.value(pred).get(0, 0), 3.0);
    }

    #[test]
    fn stop_grad_mode_never_changes_forward_values() {
        let experts_data = [
            DenseMatrix::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.3]]).unwrap(),
            DenseMatrix::from_rows(&[vec![0.7, 0.5], vec![-0.2, 0.1]]).unwrap(),
        ];
        let gates_data =
            DenseMatrix::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let run = |mode: StopGradMode| {
            let mut tape = Tape::new();
            let experts: Vec<NodeId> = experts_data
                .iter()
                .map(|e| tape.constant(e.clone()))
                .collect();
            let gates = tape.constant(gates_data.clone());
            let pred = aggregate_and_predict(&mut tape, &experts, gates, 0, 1, mode).unwrap();
            tape.value(pred).clone()
        };
        let a = run(StopGradMode::TargetOnly);
        let b = run(StopGradMode::All);
        let c = run(StopGradMode::None);
        assert!(a.bits_eq(&b));
        assert!(a.bits_eq(&c));
    }
}
