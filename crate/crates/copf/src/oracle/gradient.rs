//! Central-difference gradients of the reference loss, entry by entry over
//! the fixture's parameter arrays, or over an injected perturbation of the
//! fused target representations (a node-level sensitivity probe).

use crate::config::EngineConfig;
use crate::error::Result;
use crate::model::TripleBatch;
use crate::oracle::dense::Mat;
use crate::oracle::fixture::DenseFixture;
use crate::oracle::forward::{oracle_loss, LossSelect};

/// Per-array numeric gradient tables.
pub struct GradientTable {
    pub per_param: Vec<(String, Vec<f64>)>,
}

impl GradientTable {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.per_param
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn max_abs(&self, name: &str) -> f64 {
        self.get(name)
            .map(|g| g.iter().fold(0.0f64, |a, &v| a.max(v.abs())))
            .unwrap_or(0.0)
    }
}

/// The names and entry counts of every perturbable array, in the engine's
/// registration order.
pub fn param_names(fixture: &DenseFixture, cfg: &EngineConfig) -> Vec<(String, usize)> {
    let d = fixture.dim;
    let k = fixture.num_behaviors();
    let mut names = vec![
        ("user_embedding".to_string(), fixture.num_users * d),
        ("item_embedding".to_string(), fixture.num_items * d),
    ];
    if cfg.dfme.head == crate::config::HeadMode::Dfme {
        names.push(("gate_w_0".to_string(), k * 2 * d));
        names.push(("gate_b_0".to_string(), k));
        if cfg.dfme.fitting_on {
            for i in 0..k {
                names.push((format!("fitting_r_{i}"), d));
            }
            for l in 0..fixture.layers {
                names.push((format!("fitting_w_{l}"), d * d));
            }
        }
    }
    names
}

fn entry_mut<'a>(fixture: &'a mut DenseFixture, name: &str, index: usize) -> &'a mut f64 {
    let d = fixture.dim;
    if name == "user_embedding" {
        return &mut fixture.user_embedding[index / d][index % d];
    }
    if name == "item_embedding" {
        return &mut fixture.item_embedding[index / d][index % d];
    }
    if name == "gate_w_0" {
        return &mut fixture.gate_w[index / (2 * d)][index % (2 * d)];
    }
    if name == "gate_b_0" {
        return &mut fixture.gate_b[index];
    }
    if let Some(k) = name.strip_prefix("fitting_r_") {
        let k: usize = k.parse().expect("behavior index");
        return &mut fixture.r_init[k][index];
    }
    if let Some(l) = name.strip_prefix("fitting_w_") {
        let l: usize = l.parse().expect("layer index");
        return &mut fixture.w_layers[l][index / d][index % d];
    }
    panic!("unknown parameter array {name}");
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every entry of
/// every parameter array. With `sg_active`, stop-gradient slots evaluate
/// from the unperturbed fixture, matching the tape's semantics.
#[allow(clippy::too_many_arguments)]
pub fn numerical_gradient(
    fixture: &DenseFixture,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
    select: LossSelect,
    sg_active: bool,
    h: f64,
) -> Result<GradientTable> {
    let mut per_param = Vec::new();
    for (name, count) in param_names(fixture, cfg) {
        let mut grads = Vec::with_capacity(count);
        for index in 0..count {
            let mut plus = fixture.clone();
            *entry_mut(&mut plus, &name, index) += h;
            let f_plus = oracle_loss(&plus, fixture, cfg, lambdas, triples, select, sg_active, None)?;
            let mut minus = fixture.clone();
            *entry_mut(&mut minus, &name, index) -= h;
            let f_minus =
                oracle_loss(&minus, fixture, cfg, lambdas, triples, select, sg_active, None)?;
            grads.push((f_plus - f_minus) / (2.0 * h));
        }
        per_param.push((name, grads));
    }
    Ok(GradientTable { per_param })
}

/// Central differences with respect to an additive perturbation of the
/// fused target representations, evaluated at zero: the sensitivity of the
/// loss to the target-representation nodes themselves.
#[allow(clippy::too_many_arguments)]
pub fn numerical_rep_gradient(
    fixture: &DenseFixture,
    cfg: &EngineConfig,
    lambdas: &[f64],
    triples: &TripleBatch,
    select: LossSelect,
    sg_active: bool,
    h: f64,
) -> Result<(Mat, Mat)> {
    let d = fixture.dim;
    let mut grad_user = vec![vec![0.0; d]; fixture.num_users];
    let mut grad_item = vec![vec![0.0; d]; fixture.num_items];
    let mut delta_user = vec![vec![0.0; d]; fixture.num_users];
    let mut delta_item = vec![vec![0.0; d]; fixture.num_items];

    let probe = |du: &mut Mat, di: &mut Mat, r: usize, c: usize, on_user: bool| -> Result<f64> {
        let slot = if on_user { &mut du[r][c] } else { &mut di[r][c] };
        *slot = h;
        let plus = oracle_loss(
            fixture, fixture, cfg, lambdas, triples, select, sg_active, Some((du, di)),
        )?;
        let slot = if on_user { &mut du[r][c] } else { &mut di[r][c] };
        *slot = -h;
        let minus = oracle_loss(
            fixture, fixture, cfg, lambdas, triples, select, sg_active, Some((du, di)),
        )?;
        let slot = if on_user { &mut du[r][c] } else { &mut di[r][c] };
        *slot = 0.0;
        Ok((plus - minus) / (2.0 * h))
    };

    for r in 0..fixture.num_users {
        for c in 0..d {
            grad_user[r][c] = probe(&mut delta_user, &mut delta_item, r, c, true)?;
        }
    }
    for r in 0..fixture.num_items {
        for c in 0..d {
            grad_item[r][c] = probe(&mut delta_user, &mut delta_item, r, c, false)?;
        }
    }
    Ok((grad_user, grad_item))
}
