//! Named trainable parameters with gradient and optimizer-moment slots.

use serde::{Deserialize, Serialize};

use crate::error::{CopfError, Result};
use crate::tensor::dense::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Initialization scheme tag, kept with the parameter for reproducibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    XavierUniform,
    Zeros,
    Explicit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
    pub init: InitScheme,
    /// Adam first/second moment buffers, persisted across steps.
    pub moment1: DenseMatrix,
    pub moment2: DenseMatrix,
}

/// All trainable arrays, in a fixed registration order. Registration order
/// is part of the determinism contract: seeds draw initial values in this
/// order, and reductions over the store iterate in it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: DenseMatrix) -> Result<ParamId> {
        self.add_with_init(name, value, InitScheme::Explicit)
    }

    pub fn add_with_init(
        &mut self,
        name: &str,
        value: DenseMatrix,
        init: InitScheme,
    ) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(CopfError::Usage(format!("duplicate parameter name {name}")));
        }
        let (rows, cols) = value.shape();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: DenseMatrix::zeros(rows, cols),
            init,
            moment1: DenseMatrix::zeros(rows, cols),
            moment2: DenseMatrix::zeros(rows, cols),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseMatrix {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseMatrix {
        &mut self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Gradients are zeroed at the start of every optimization step.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Xavier-uniform values on [-limit, limit], limit = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    rows: usize,
    cols: usize,
    rng: &mut impl rand::Rng,
) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    DenseMatrix::from_values(rows, cols, values).expect("xavier shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.add("w", DenseMatrix::zeros(1, 1)).unwrap();
        assert!(store.add("w", DenseMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn xavier_respects_limit_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = xavier_uniform(8, 8, &mut rng);
        let limit = (6.0 / 16.0_f64).sqrt();
        assert!(m.values().iter().all(|v| v.abs() < limit));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let m2 = xavier_uniform(8, 8, &mut rng2);
        assert!(m.bits_eq(&m2));
    }
}
