//! Constraint-staged graph-convolutional fusion.
//!
//! Per behavior, node features propagate through the relation graphs the
//! in-behavior constraint allows, the pre-behavior constraint decides what
//! seeds the next behavior's stack, and layer outputs fuse by summation.
//! With the post-behavior constraint on, every behavior keeps its own
//! fused output pair; turned off, the behaviors share the mean output.
//!
//! The whole network is linear in the node features; the configuration
//! switches only change which linear operator it applies.

use crate::config::{CogcnConfig, InMode, PostMode, PreMode, SelfLoopMode};
use crate::data::GraphSet;
use crate::error::{CopfError, Result};
use crate::tensor::tape::NodeId;
use crate::tensor::Tape;

/// Fused representation nodes for one behavior: user rows and item rows of
/// the joint matrix.
#[derive(Clone, Copy, Debug)]
pub struct BehaviorNodes {
    pub user: NodeId,
    pub item: NodeId,
    /// The unsplit (M+N) x d fused matrix.
    pub joint: NodeId,
}

/// All fused outputs of one forward pass, still on the tape.
#[derive(Clone, Debug)]
pub struct BehaviorRepresentations {
    pub per_behavior: Vec<BehaviorNodes>,
}

impl BehaviorRepresentations {
    pub fn num_behaviors(&self) -> usize {
        self.per_behavior.len()
    }

    pub fn behavior(&self, k: usize) -> &BehaviorNodes {
        &self.per_behavior[k]
    }
}

/// Relation set for behavior `k` (0-based) under the in-behavior mode.
pub fn relation_set(in_mode: InMode, k: usize, num_behaviors: usize) -> Vec<usize> {
    match in_mode {
        InMode::Full => (0..=k).collect(),
        InMode::Strict => vec![k],
        InMode::None => (0..num_behaviors).collect(),
    }
}

/// One propagation layer for behavior `k`.
///
/// Per-relation self loops: `E' = sum_{k' in S} (P_{k'} E + E)`; with the
/// `once` switch the identity term is added a single time:
/// `E' = sum_{k' in S} P_{k'} E + E`.
pub fn propagate_layer(
    tape: &mut Tape,
    embedding: NodeId,
    k: usize,
    graphs: &GraphSet,
    cfg: &CogcnConfig,
) -> Result<NodeId> {
    if k >= graphs.graphs.len() {
        return Err(CopfError::Config(format!(
            "behavior index {k} out of range (K = {})",
            graphs.graphs.len()
        )));
    }
    let relations = relation_set(cfg.in_mode, k, graphs.graphs.len());
    let mut terms = Vec::with_capacity(relations.len() + 1);
    for k_prime in relations {
        let propagated = tape.spmm(&graphs.graphs[k_prime].operator, embedding)?;
        match cfg.self_loop_mode {
            SelfLoopMode::PerRelation => {
                terms.push(tape.add(propagated, embedding)?);
            }
            SelfLoopMode::Once => terms.push(propagated),
        }
    }
    if cfg.self_loop_mode == SelfLoopMode::Once {
        terms.push(embedding);
    }
    tape.sum_nodes(&terms)
}

/// Seed for behavior `k + 1` from the upstream final-layer outputs.
///
/// `full`: sum of all upstream outputs plus the initial embedding;
/// `strict`: the most recent upstream output plus the initial embedding;
/// `none`: the initial embedding alone.
pub fn transfer_between_behaviors(
    tape: &mut Tape,
    last_layer_outputs: &[NodeId],
    initial: NodeId,
    pre_mode: PreMode,
) -> Result<NodeId> {
    match pre_mode {
        PreMode::Full => {
            let mut terms = last_layer_outputs.to_vec();
            terms.push(initial);
            tape.sum_nodes(&terms)
        }
        PreMode::Strict => {
            let last = *last_layer_outputs
                .last()
                .ok_or_else(|| CopfError::Usage("transfer needs an upstream output".into()))?;
            tape.add(last, initial)
        }
        PreMode::None => Ok(initial),
    }
}

/// Elementwise sum over layer outputs 0..=L.
pub fn fuse_layers(tape: &mut Tape, intermediates: &[NodeId]) -> Result<NodeId> {
    tape.sum_nodes(intermediates)
}

/// Output of the full fusion pass, including per-layer intermediates for
/// verification against the dense reference.
pub struct CogcnForward {
    pub reps: BehaviorRepresentations,
    /// `intermediates[k][l]` is the layer-l joint matrix of behavior k.
    pub intermediates: Vec<Vec<NodeId>>,
}

/// Run the fusion stack for all behaviors from an initial joint matrix
/// (user embedding rows stacked over item embedding rows).
pub fn forward_all(
    tape: &mut Tape,
    initial: NodeId,
    graphs: &GraphSet,
    cfg: &CogcnConfig,
) -> Result<CogcnForward> {
    let num_behaviors = graphs.graphs.len();
    let num_users = graphs.num_users;
    let num_items = graphs.num_items;

    let mut intermediates: Vec<Vec<NodeId>> = Vec::with_capacity(num_behaviors);
    let mut fused: Vec<NodeId> = Vec::with_capacity(num_behaviors);
    let mut last_layers: Vec<NodeId> = Vec::with_capacity(num_behaviors);
    let mut seed = initial;

    for k in 0..num_behaviors {
        let mut layers = Vec::with_capacity(cfg.layers + 1);
        layers.push(seed);
        for _ in 0..cfg.layers {
            let next = propagate_layer(tape, *layers.last().unwrap(), k, graphs, cfg)?;
            layers.push(next);
        }
        last_layers.push(*layers.last().unwrap());
        fused.push(fuse_layers(tape, &layers)?);
        intermediates.push(layers);
        if k + 1 < num_behaviors {
            seed = transfer_between_behaviors(tape, &last_layers, initial, cfg.pre_mode)?;
        }
    }

    let per_behavior = match cfg.post_mode {
        PostMode::Decoupled => fused
            .iter()
            .map(|&joint| split_joint(tape, joint, num_users, num_items))
            .collect::<Result<Vec<_>>>()?,
        PostMode::Fused => {
            let total = tape.sum_nodes(&fused)?;
            let mean = tape.scale(total, 1.0 / num_behaviors as f64);
            let shared = split_joint(tape, mean, num_users, num_items)?;
            vec![shared; num_behaviors]
        }
    };

    Ok(CogcnForward { reps: BehaviorRepresentations { per_behavior }, intermediates })
}

fn split_joint(
    tape: &mut Tape,
    joint: NodeId,
    num_users: usize,
    num_items: usize,
) -> Result<BehaviorNodes> {
    let user = tape.slice_rows(joint, 0, num_users)?;
    let item = tape.slice_rows(joint, num_users, num_items)?;
    Ok(BehaviorNodes { user, item, joint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DegreeMode;
    use crate::data::{build_graphs, InteractionSet};
    use crate::tensor::DenseMatrix;

    fn tiny_set(edges_per_behavior: Vec<Vec<(u32, u32)>>, m: usize, n: usize) -> InteractionSet {
        let behaviors: Vec<String> = (0..edges_per_behavior.len())
            .map(|i| format!("b{i}"))
            .collect();
        let timestamps = edges_per_behavior
            .iter()
            .map(|edges| vec![None; edges.len()])
            .collect();
        InteractionSet {
            user_count: m,
            item_count: n,
            behaviors,
            edges: edges_per_behavior,
            timestamps,
            user_keys: (0..m).map(|i| format!("u{i}")).collect(),
            item_keys: (0..n).map(|i| format!("v{i}")).collect(),
        }
    }

    fn cfg(layers: usize) -> CogcnConfig {
        CogcnConfig { layers, dim: 2, ..CogcnConfig::default() }
    }

    #[test]
    fn one_edge_propagation_adds_neighbor_and_self() {
        let set = tiny_set(vec![vec![(0, 0)]], 1, 1);
        let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let out = propagate_layer(&mut tape, e, 0, &graphs, &cfg(1)).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), &[1.0, 1.0]);
        assert_eq!(v.row(1), &[1.0, 1.0]);
    }

    #[test]
    fn second_behavior_counts_self_per_relation() {
        // behavior 0 has the edge, behavior 1 is empty; with in_mode = full
        // and per-relation self loops, behavior 1 sees the self term twice.
        let set = tiny_set(vec![vec![(0, 0)], vec![]], 1, 1);
        let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let out = propagate_layer(&mut tape, e, 1, &graphs, &cfg(1)).unwrap();
        assert_eq!(tape.value(out).row(0), &[2.0, 1.0]);

        let once = CogcnConfig { self_loop_mode: SelfLoopMode::Once, ..cfg(1) };
        let mut tape2 = Tape::new();
        let e2 = tape2.constant(
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let out2 = propagate_layer(&mut tape2, e2, 1, &graphs, &once).unwrap();
        assert_eq!(tape2.value(out2).row(0), &[1.0, 1.0]);
    }

    #[test]
    fn transfer_modes() {
        let mut tape = Tape::new();
        let l1 = tape.constant(DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l2 = tape.constant(DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let init = tape.constant(DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap());

        let full = transfer_between_behaviors(&mut tape, &[l1, l2], init, PreMode::Full).unwrap();
        assert_eq!(tape.value(full).row(0), &[2.0, 2.0]);

        let strict =
            transfer_between_behaviors(&mut tape, &[l1, l2], init, PreMode::Strict).unwrap();
        assert_eq!(tape.value(strict).row(0), &[1.0, 2.0]);

        let none = transfer_between_behaviors(&mut tape, &[l1, l2], init, PreMode::None).unwrap();
        assert_eq!(tape.value(none).row(0), &[1.0, 1.0]);

        // single upstream: full and strict coincide
        let f1 = transfer_between_behaviors(&mut tape, &[l1], init, PreMode::Full).unwrap();
        let s1 = transfer_between_behaviors(&mut tape, &[l1], init, PreMode::Strict).unwrap();
        assert!(tape.value(f1).bits_eq(tape.value(s1)));
    }

    #[test]
    fn fuse_layers_sums_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = tape.constant(DenseMatrix::from_rows(&[vec![2.0, 1.0]]).unwrap());
        let c = tape.constant(DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let fused = fuse_layers(&mut tape, &[a, b, c]).unwrap();
        assert_eq!(tape.value(fused).row(0), &[3.0, 2.0]);

        // degenerate depth: a single layer list returns its own values
        let only = fuse_layers(&mut tape, &[a]).unwrap();
        assert!(tape.value(only).bits_eq(tape.value(a)));
    }

    #[test]
    fn forward_is_linear_in_the_embedding() {
        let set = tiny_set(vec![vec![(0, 0), (1, 1)], vec![(0, 1)]], 2, 2);
        let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
        let base = DenseMatrix::from_rows(&[
            vec![0.3, -0.2],
            vec![0.7, 0.1],
            vec![-0.5, 0.9],
            vec![0.2, 0.4],
        ])
        .unwrap();

        let mut tape = Tape::new();
        let e = tape.constant(base.clone());
        let out = forward_all(&mut tape, e, &graphs, &cfg(2)).unwrap();

        let mut tape2 = Tape::new();
        let scaled = tape2.constant(base.scale(3.0));
        let out2 = forward_all(&mut tape2, scaled, &graphs, &cfg(2)).unwrap();

        for (a, b) in out
            .reps
            .per_behavior
            .iter()
            .zip(&out2.reps.per_behavior)
        {
            let left = tape.value(a.joint).scale(3.0);
            let right = tape2.value(b.joint);
            assert!(left.max_abs_diff(right) < 1e-12);
        }
    }

    #[test]
    fn zero_embeddings_stay_zero() {
        let set = tiny_set(vec![vec![(0, 0)], vec![(1, 1)]], 2, 2);
        let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(DenseMatrix::zeros(4, 3));
        let out = forward_all(&mut tape, e, &graphs, &cfg(2)).unwrap();
        for b in &out.reps.per_behavior {
            assert!(tape.value(b.joint).values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_behavior_runs_without_transfer() {
        let set = tiny_set(vec![vec![(0, 0), (1, 1)]], 2, 2);
        let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.5, 0.5],
        ]).unwrap());
        let out = forward_all(&mut tape, e, &graphs, &cfg(1)).unwrap();
        assert_eq!(out.reps.num_behaviors(), 1);
        assert_eq!(out.intermediates[0].len(), 2);
    }

    #[test]
    fn downstream_edits_cannot_reach_upstream_outputs() {
        let base_edges = vec![vec![(0, 0), (1, 1)], vec![(0, 1)], vec![(1, 0)]];
        let mut edited_edges = base_edges.clone();
        edited_edges[2] = vec![(0, 0), (1, 1), (0, 1)];

        let emb = DenseMatrix::from_rows(&[
            vec![0.11, -0.7],
            vec![0.35, 0.21],
            vec![-0.44, 0.9],
            vec![0.6, -0.13],
        ])
        .unwrap();

        let run = |edges: Vec<Vec<(u32, u32)>>| {
            let set = tiny_set(edges, 2, 2);
            let graphs = build_graphs(&set, DegreeMode::PerBehavior).unwrap();
            let mut tape = Tape::new();
            let e = tape.constant(emb.clone());
            let out = forward_all(&mut tape, e, &graphs, &cfg(2)).unwrap();
            out.reps
                .per_behavior
                .iter()
                .map(|b| tape.value(b.joint).clone())
                .collect::<Vec<_>>()
        };

        let base = run(base_edges);
        let edited = run(edited_edges);
        // behaviors 0 and 1 are bitwise invariant to behavior-2 edits
        assert!(base[0].bits_eq(&edited[0]));
        assert!(base[1].bits_eq(&edited[1]));
        assert!(!base[2].bits_eq(&edited[2]));
    }
}
