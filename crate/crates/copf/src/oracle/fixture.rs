//! Desk-scale fixtures: explicit dense adjacency and parameter values,
//! committed as data files so the engine and the reference read identical
//! inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::data::InteractionSet;
use crate::error::{CopfError, Result};
use crate::model::{ModelParams, TripleBatch};
use crate::tensor::params::InitScheme;
use crate::tensor::{DenseMatrix, ParameterStore};

pub const FIXTURE_FORMAT: &str = "copf-fixture/v1";

/// Nested-vec matrix used only on the reference side.
pub type Mat = Vec<Vec<f64>>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseFixture {
    pub format: String,
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub layers: usize,
    pub behaviors: Vec<String>,
    /// Per behavior: dense M x N interaction block of 0/1 entries.
    pub interactions: Vec<Mat>,
    pub user_embedding: Mat,
    pub item_embedding: Mat,
    /// K x 2d shared gate weights.
    pub gate_w: Mat,
    /// Length-K gate bias.
    pub gate_b: Vec<f64>,
    /// Per behavior: initial d-vector of the fitting propagation.
    pub r_init: Mat,
    /// Per layer: d x d transform.
    pub w_layers: Vec<Mat>,
}

impl DenseFixture {
    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DenseFixture> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CopfError::Data(format!("cannot read fixture {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<DenseFixture> {
        let fixture: DenseFixture = serde_json::from_str(text)
            .map_err(|e| CopfError::Data(format!("bad fixture: {e}")))?;
        if fixture.format != FIXTURE_FORMAT {
            return Err(CopfError::Data(format!(
                "fixture format {:?} not supported (expected {FIXTURE_FORMAT:?})",
                fixture.format
            )));
        }
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n, d, k) = (self.num_users, self.num_items, self.dim, self.num_behaviors());
        let shape_of = |mat: &Mat| (mat.len(), mat.first().map_or(0, Vec::len));
        let checks = [
            (shape_of(&self.user_embedding), (m, d), "user_embedding"),
            (shape_of(&self.item_embedding), (n, d), "item_embedding"),
            (shape_of(&self.gate_w), (k, 2 * d), "gate_w"),
            (shape_of(&self.r_init), (k, d), "r_init"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(CopfError::Data(format!(
                    "fixture {name}: shape {got:?} != {want:?}"
                )));
            }
        }
        if self.gate_b.len() != k {
            return Err(CopfError::Data("fixture gate_b: wrong length".into()));
        }
        if self.interactions.len() != k
            || self.interactions.iter().any(|b| shape_of(b) != (m, n))
        {
            return Err(CopfError::Data("fixture interactions: wrong shape".into()));
        }
        if self.w_layers.len() != self.layers
            || self.w_layers.iter().any(|w| shape_of(w) != (d, d))
        {
            return Err(CopfError::Data("fixture w_layers: wrong shape".into()));
        }
        Ok(())
    }

    /// Edges of the nonzero interaction entries, as the engine ingests them.
    pub fn to_interaction_set(&self) -> InteractionSet {
        let mut edges = Vec::with_capacity(self.num_behaviors());
        for block in &self.interactions {
            let mut list = Vec::new();
            for (u, row) in block.iter().enumerate() {
                for (v, &b) in row.iter().enumerate() {
                    if b != 0.0 {
                        list.push((u as u32, v as u32));
                    }
                }
            }
            edges.push(list);
        }
        let timestamps = edges.iter().map(|e| vec![None; e.len()]).collect();
        InteractionSet {
            user_count: self.num_users,
            item_count: self.num_items,
            behaviors: self.behaviors.clone(),
            edges,
            timestamps,
            user_keys: (0..self.num_users).map(|i| format!("u{i}")).collect(),
            item_keys: (0..self.num_items).map(|i| format!("v{i}")).collect(),
        }
    }

    /// Install the fixture's explicit values into an engine parameter
    /// store, matching the registration order the model uses.
    pub fn to_store(&self, cfg: &EngineConfig) -> Result<(ParameterStore, ModelParams)> {
        let mut store = ParameterStore::new();
        let user_embedding = store.add_with_init(
            "user_embedding",
            dense_from(&self.user_embedding)?,
            InitScheme::Explicit,
        )?;
        let item_embedding = store.add_with_init(
            "item_embedding",
            dense_from(&self.item_embedding)?,
            InitScheme::Explicit,
        )?;
        let mut gate_w = Vec::new();
        let mut gate_b = Vec::new();
        let mut r_init = Vec::new();
        let mut w_layers = Vec::new();
        if cfg.dfme.head == crate::config::HeadMode::Dfme {
            gate_w.push(store.add("gate_w_0", dense_from(&self.gate_w)?)?);
            let bias =
                DenseMatrix::from_values(self.gate_b.len(), 1, self.gate_b.clone())?;
            gate_b.push(store.add("gate_b_0", bias)?);
            if cfg.dfme.fitting_on {
                for (k, row) in self.r_init.iter().enumerate() {
                    r_init.push(store.add(
                        &format!("fitting_r_{k}"),
                        DenseMatrix::from_values(1, self.dim, row.clone())?,
                    )?);
                }
                for (l, w) in self.w_layers.iter().enumerate() {
                    w_layers.push(store.add(&format!("fitting_w_{l}"), dense_from(w)?)?);
                }
            }
        }
        Ok((
            store,
            ModelParams { user_embedding, item_embedding, gate_w, gate_b, r_init, w_layers },
        ))
    }

    /// Copy engine-store values back into a fixture clone (used to evaluate
    /// the reference loss at perturbed parameters).
    pub fn with_store_values(&self, store: &ParameterStore) -> DenseFixture {
        let mut out = self.clone();
        let copy_mat = |name: &str, rows: usize, cols: usize| -> Option<Mat> {
            let id = store.id(name)?;
            let v = store.value(id);
            debug_assert_eq!(v.shape(), (rows, cols));
            Some((0..rows).map(|r| v.row(r).to_vec()).collect())
        };
        if let Some(m) = copy_mat("user_embedding", self.num_users, self.dim) {
            out.user_embedding = m;
        }
        if let Some(m) = copy_mat("item_embedding", self.num_items, self.dim) {
            out.item_embedding = m;
        }
        if let Some(m) = copy_mat("gate_w_0", self.num_behaviors(), 2 * self.dim) {
            out.gate_w = m;
        }
        if let Some(id) = store.id("gate_b_0") {
            out.gate_b = store.value(id).values().to_vec();
        }
        for k in 0..self.num_behaviors() {
            if let Some(id) = store.id(&format!("fitting_r_{k}")) {
                out.r_init[k] = store.value(id).values().to_vec();
            }
        }
        for l in 0..self.layers {
            if let Some(m) = copy_mat(&format!("fitting_w_{l}"), self.dim, self.dim) {
                out.w_layers[l] = m;
            }
        }
        out
    }

    /// Training triples derived from the adjacency alone: for every
    /// observed (u, s) in edge order, the negative is the smallest item id
    /// the user has not interacted with under that behavior; saturated
    /// users contribute nothing. Both the engine and the reference use this
    /// rule, so fixtures stay pure data.
    pub fn derived_triples(&self) -> TripleBatch {
        let set = self.to_interaction_set();
        let mut batches = Vec::with_capacity(self.num_behaviors());
        for k in 0..self.num_behaviors() {
            let mut batch = Vec::new();
            for &(u, s) in &set.edges[k] {
                let neg = (0..self.num_items as u32)
                    .find(|&t| self.interactions[k][u as usize][t as usize] == 0.0);
                if let Some(t) = neg {
                    batch.push((u, s, t));
                }
            }
            batches.push(batch);
        }
        batches
    }

    /// Random fixture with the stated shape: sparse-ish random 0/1 blocks
    /// (every behavior keeps at least one edge) and small random parameter
    /// values, all drawn from the seed.
    pub fn random(
        seed: u64,
        num_users: usize,
        num_items: usize,
        num_behaviors: usize,
        dim: usize,
        layers: usize,
    ) -> DenseFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut interactions = Vec::with_capacity(num_behaviors);
        for _ in 0..num_behaviors {
            let mut block = vec![vec![0.0; num_items]; num_users];
            loop {
                for row in &mut block {
                    for cell in row.iter_mut() {
                        *cell = if rng.gen_bool(0.35) { 1.0 } else { 0.0 };
                    }
                }
                let edges: usize = block
                    .iter()
                    .map(|r| r.iter().filter(|&&b| b != 0.0).count())
                    .sum();
                // keep at least one edge and one admissible negative
                let saturated = block.iter().all(|r| r.iter().all(|&b| b != 0.0));
                if edges > 0 && !saturated {
                    break;
                }
            }
            interactions.push(block);
        }
        fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect()
        }
        let user_embedding = mat(&mut rng, num_users, dim);
        let item_embedding = mat(&mut rng, num_items, dim);
        let gate_w = mat(&mut rng, num_behaviors, 2 * dim);
        let gate_b = (0..num_behaviors).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let r_init = mat(&mut rng, num_behaviors, dim);
        let w_layers = (0..layers).map(|_| mat(&mut rng, dim, dim)).collect();
        DenseFixture {
            format: FIXTURE_FORMAT.to_string(),
            num_users,
            num_items,
            dim,
            layers,
            behaviors: (0..num_behaviors).map(|k| format!("b{k}")).collect(),
            interactions,
            user_embedding,
            item_embedding,
            gate_w,
            gate_b,
            r_init,
            w_layers,
        }
    }
}

fn dense_from(mat: &Mat) -> Result<DenseMatrix> {
    DenseMatrix::from_rows(mat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_fixture_roundtrips_and_validates() {
        let fixture = DenseFixture::random(3, 4, 5, 2, 3, 2);
        fixture.validate().unwrap();
        let json = serde_json::to_string(&fixture).unwrap();
        let back = DenseFixture::from_json(&json).unwrap();
        assert_eq!(back.user_embedding, fixture.user_embedding);
    }

    #[test]
    fn derived_triples_use_smallest_free_item() {
        let mut fixture = DenseFixture::random(5, 2, 3, 1, 2, 1);
        fixture.interactions[0] = vec![vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]];
        let triples = fixture.derived_triples();
        // u0: edges (0,0) and (0,2), free item 1; u1 saturated.
        assert_eq!(triples[0], vec![(0, 0, 1), (0, 2, 1)]);
    }

    #[test]
    fn store_installation_matches_model_layout() {
        let fixture = DenseFixture::random(7, 3, 3, 2, 4, 2);
        let cfg = EngineConfig::default();
        let (store, ids) = fixture.to_store(&cfg).unwrap();
        assert_eq!(store.name(ids.user_embedding), "user_embedding");
        assert_eq!(ids.r_init.len(), 2);
        assert_eq!(ids.w_layers.len(), 2);
        assert_eq!(store.value(ids.gate_w[0]).shape(), (2, 8));
        let back = fixture.with_store_values(&store);
        assert_eq!(back.user_embedding, fixture.user_embedding);
    }
}
