//! Interaction ingestion, id mapping, per-behavior graph operators, and the
//! leave-one-out split.
//!
//! Input files carry one record per line, `user<TAB>item[<TAB>timestamp]`
//! (comma works as the separator too); `#` starts a comment line. Duplicate
//! (user, item) pairs within a behavior collapse to the record with the
//! smallest timestamp, ties and missing timestamps resolved by file
//! position. External ids map to contiguous integers by first appearance
//! across all files, in behavior order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::DegreeMode;
use crate::error::{CopfError, Result};
use crate::tensor::{SparseMatrix, SpmmOperator};

pub const SNAPSHOT_FORMAT: &str = "copf-dataset/v1";

/// One parsed input line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub behavior: String,
    pub timestamp: Option<i64>,
}

/// Deduplicated interactions with contiguous ids. Behavior `K - 1` is the
/// target behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSet {
    pub user_count: usize,
    pub item_count: usize,
    pub behaviors: Vec<String>,
    /// Per behavior, sorted by (user, item).
    pub edges: Vec<Vec<(u32, u32)>>,
    /// Parallel to `edges`.
    pub timestamps: Vec<Vec<Option<i64>>>,
    /// External keys, indexed by internal id.
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
}

impl InteractionSet {
    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    pub fn target_behavior(&self) -> usize {
        self.behaviors.len() - 1
    }

    pub fn edge_count(&self, behavior: usize) -> usize {
        self.edges[behavior].len()
    }

    pub fn total_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Sorted item lists per user for one behavior.
    pub fn adjacency(&self, behavior: usize) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.user_count];
        for &(u, v) in &self.edges[behavior] {
            adj[u as usize].push(v);
        }
        for items in &mut adj {
            items.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, behavior: usize, u: u32, v: u32) -> bool {
        self.edges[behavior].binary_search(&(u, v)).is_ok()
    }
}

/// Load and dedup interaction files, one per behavior, in behavior order.
pub fn load_interactions(
    files: &[(String, PathBuf)],
    behavior_order: &[String],
) -> Result<InteractionSet> {
    for (name, path) in files {
        if !behavior_order.contains(name) {
            return Err(CopfError::Data(format!(
                "unknown behavior name {name:?} for file {}",
                path.display()
            )));
        }
    }
    let mut ordered_files = Vec::new();
    for name in behavior_order {
        let path = files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.clone())
            .ok_or_else(|| {
                CopfError::Data(format!("no input file given for behavior {name:?}"))
            })?;
        ordered_files.push((name.clone(), path));
    }

    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut item_ids: HashMap<String, u32> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut edges = Vec::new();
    let mut timestamps = Vec::new();

    for (behavior, path) in &ordered_files {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CopfError::Data(format!("cannot read {} for behavior {behavior:?}: {e}", path.display()))
        })?;
        // (user, item) -> (dedup key, timestamp); key (ts-or-max, position)
        // keeps the earliest-timestamp record, ties by file position.
        let mut best: HashMap<(u32, u32), ((i64, usize), Option<i64>)> = HashMap::new();
        let mut order = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let record = parse_line(line).map_err(|msg| {
                CopfError::Data(format!("{}:{}: {msg}", path.display(), line_no + 1))
            })?;
            let u = *user_ids.entry(record.0.clone()).or_insert_with(|| {
                user_keys.push(record.0.clone());
                (user_keys.len() - 1) as u32
            });
            let v = *item_ids.entry(record.1.clone()).or_insert_with(|| {
                item_keys.push(record.1.clone());
                (item_keys.len() - 1) as u32
            });
            let key = (record.2.unwrap_or(i64::MAX), line_no);
            match best.get_mut(&(u, v)) {
                None => {
                    best.insert((u, v), (key, record.2));
                    order.push((u, v));
                }
                Some(entry) => {
                    if key < entry.0 {
                        *entry = (key, record.2);
                    }
                }
            }
        }
        order.sort_unstable();
        let ts: Vec<Option<i64>> = order.iter().map(|uv| best[uv].1).collect();
        edges.push(order);
        timestamps.push(ts);
    }

    let target = behavior_order.len() - 1;
    if edges[target].is_empty() {
        return Err(CopfError::Data(format!(
            "target behavior {:?} has no interactions ({})",
            behavior_order[target],
            ordered_files[target].1.display()
        )));
    }

    Ok(InteractionSet {
        user_count: user_keys.len(),
        item_count: item_keys.len(),
        behaviors: behavior_order.to_vec(),
        edges,
        timestamps,
        user_keys,
        item_keys,
    })
}

fn parse_line(line: &str) -> std::result::Result<(String, String, Option<i64>), String> {
    let fields: Vec<&str> = if line.contains('\t') {
        line.split('\t').collect()
    } else {
        line.split(',').collect()
    };
    let fields: Vec<&str> = fields.iter().map(|f| f.trim()).collect();
    if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
        return Err(format!("expected user<TAB>item[<TAB>timestamp], got {line:?}"));
    }
    let ts = if fields.len() == 3 && !fields[2].is_empty() {
        Some(
            fields[2]
                .parse::<i64>()
                .map_err(|_| format!("bad timestamp {:?}", fields[2]))?,
        )
    } else {
        None
    };
    Ok((fields[0].to_string(), fields[1].to_string(), ts))
}

// ---- graphs ----

/// Symmetric block adjacency over the joint user+item node set and its
/// row-normalized propagation operator.
#[derive(Debug)]
pub struct BehaviorGraph {
    pub adjacency: SparseMatrix,
    pub operator: Rc<SpmmOperator>,
}

#[derive(Debug)]
pub struct GraphSet {
    pub graphs: Vec<BehaviorGraph>,
    pub num_users: usize,
    pub num_items: usize,
}

impl GraphSet {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }
}

/// Build the graph for one behavior: user `u` connects to node `M + v`,
/// rows are degree-normalized, zero-degree rows stay all-zero. The identity
/// (self) term is applied at propagation time, not here.
pub fn build_behavior_graph(
    set: &InteractionSet,
    behavior: usize,
    degree_mode: DegreeMode,
) -> Result<BehaviorGraph> {
    if behavior >= set.num_behaviors() {
        return Err(CopfError::Config(format!(
            "behavior index {behavior} out of range (K = {})",
            set.num_behaviors()
        )));
    }
    let n = set.user_count + set.item_count;
    let mut triplets = Vec::with_capacity(set.edges[behavior].len() * 2);
    for &(u, v) in &set.edges[behavior] {
        let (u, v) = (u as usize, set.user_count + v as usize);
        triplets.push((u, v, 1.0));
        triplets.push((v, u, 1.0));
    }
    let adjacency = SparseMatrix::from_triplets(n, n, triplets)?;

    let degrees: Vec<f64> = match degree_mode {
        DegreeMode::PerBehavior => adjacency.row_sums(),
        DegreeMode::Joint => {
            let mut totals = vec![0.0; n];
            for k in 0..set.num_behaviors() {
                for &(u, v) in &set.edges[k] {
                    totals[u as usize] += 1.0;
                    totals[set.user_count + v as usize] += 1.0;
                }
            }
            totals
        }
    };

    let mut normalized = Vec::with_capacity(adjacency.nnz());
    for r in 0..n {
        for (c, v) in adjacency.row_entries(r) {
            let d = degrees[r];
            if d > 0.0 {
                normalized.push((r, c, v / d));
            }
        }
    }
    let operator = SparseMatrix::from_triplets(n, n, normalized)?;
    Ok(BehaviorGraph { adjacency, operator: Rc::new(SpmmOperator::new(operator)) })
}

pub fn build_graphs(set: &InteractionSet, degree_mode: DegreeMode) -> Result<GraphSet> {
    let graphs = (0..set.num_behaviors())
        .map(|k| build_behavior_graph(set, k, degree_mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphSet { graphs, num_users: set.user_count, num_items: set.item_count })
}

// ---- split ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPair {
    pub user: u32,
    pub item: u32,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: InteractionSet,
    pub test: Vec<TestPair>,
}

/// Hold out one target-behavior interaction per eligible user: the one with
/// the latest timestamp; among tied (or missing) timestamps, uniformly at
/// random under the seed. Users with a single target interaction keep it in
/// training and are excluded from the test set.
pub fn leave_one_out_split(set: &InteractionSet, seed: u64) -> Result<Split> {
    let target = set.target_behavior();
    if set.edges[target].is_empty() {
        return Err(CopfError::Data("target behavior has no edges to split".into()));
    }
    let mut per_user: Vec<Vec<(u32, Option<i64>)>> = vec![Vec::new(); set.user_count];
    for (&(u, v), &ts) in set.edges[target].iter().zip(&set.timestamps[target]) {
        per_user[u as usize].push((v, ts));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for (u, items) in per_user.iter().enumerate() {
        if items.len() < 2 {
            continue;
        }
        // None sorts below any concrete timestamp, so unknown times stay in
        // training when a dated edge exists.
        let max_ts = items.iter().map(|&(_, ts)| ts).max().unwrap();
        let candidates: Vec<u32> = items
            .iter()
            .filter(|&&(_, ts)| ts == max_ts)
            .map(|&(v, _)| v)
            .collect();
        let chosen = if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.gen_range(0..candidates.len())]
        };
        test.push(TestPair { user: u as u32, item: chosen });
    }
    if test.is_empty() {
        return Err(CopfError::Data(
            "no user has two or more target interactions; cannot build a test set".into(),
        ));
    }

    let train = remove_test_pairs(set, &test);
    Ok(Split { train, test })
}

fn remove_test_pairs(set: &InteractionSet, test: &[TestPair]) -> InteractionSet {
    let target = set.target_behavior();
    let mut train = set.clone();
    let held: std::collections::HashSet<(u32, u32)> =
        test.iter().map(|p| (p.user, p.item)).collect();
    let mut edges = Vec::with_capacity(set.edges[target].len() - test.len());
    let mut ts = Vec::with_capacity(edges.capacity());
    for (&e, &t) in set.edges[target].iter().zip(&set.timestamps[target]) {
        if !held.contains(&e) {
            edges.push(e);
            ts.push(t);
        }
    }
    train.edges[target] = edges;
    train.timestamps[target] = ts;
    train
}

// ---- snapshot ----

/// On-disk form of a prepared dataset: the full interaction set plus the
/// held-out pairs, versioned with a format tag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub format: String,
    pub split_seed: u64,
    pub interactions: InteractionSet,
    pub test: Vec<TestPair>,
}

impl DatasetSnapshot {
    pub fn new(interactions: InteractionSet, split: &Split, split_seed: u64) -> Self {
        DatasetSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            split_seed,
            interactions,
            test: split.test.clone(),
        }
    }

    pub fn split(&self) -> Split {
        Split {
            train: remove_test_pairs(&self.interactions, &self.test),
            test: self.test.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CopfError::Data(format!("cannot read snapshot {}: {e}", path.display())))?;
        let snapshot: DatasetSnapshot = serde_json::from_str(&text)
            .map_err(|e| CopfError::Data(format!("bad snapshot {}: {e}", path.display())))?;
        if snapshot.format != SNAPSHOT_FORMAT {
            return Err(CopfError::Data(format!(
                "snapshot format {:?} not supported (expected {SNAPSHOT_FORMAT:?})",
                snapshot.format
            )));
        }
        Ok(snapshot)
    }

    /// Content hash identifying the dataset in manifests and reports.
    pub fn dataset_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("snapshot serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
