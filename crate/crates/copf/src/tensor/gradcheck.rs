//! Central-difference verification of analytic gradients.
//!
//! For every parameter entry the numeric estimate is
//! `(f(theta + h) - f(theta - h)) / 2h`. Errors are relative with an
//! absolute fallback: entries are compared as
//! `|a - n| / max(|a|, |n|, ABS_FLOOR)`, so near-zero gradient pairs (for
//! example the gradient of a constant-sum softmax) pass on absolute
//! grounds instead of dividing by zero.

use crate::error::{CopfError, Result};
use crate::tensor::params::ParameterStore;

/// Denominator floor; differences below `ABS_FLOOR * tol` always pass.
pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// Name of the worst-offending parameter, for failure messages.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Check `grad_fn`'s analytic gradients against central differences of
/// `loss_fn` for every entry of every parameter in the store.
///
/// `loss_fn` must be a deterministic pure evaluation; it is invoked twice
/// at the base point and any bitwise disagreement is reported as a
/// verification error. Parameter values are restored bitwise afterwards.
pub fn finite_diff_check<L, G>(
    loss_fn: L,
    grad_fn: G,
    store: &mut ParameterStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&ParameterStore) -> Result<f64>,
    G: FnOnce(&mut ParameterStore) -> Result<()>,
{
    if h <= 0.0 {
        return Err(CopfError::Usage(format!("finite_diff_check: h must be > 0, got {h}")));
    }
    let base_a = loss_fn(store)?;
    let base_b = loss_fn(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(CopfError::Verification(format!(
            "loss_fn is not deterministic: {base_a} vs {base_b}"
        )));
    }

    store.zero_grads();
    grad_fn(store)?;
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.grad(id).values().to_vec())
        .collect();

    let mut per_param = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        let n_entries = store.value(*id).len();
        let mut check = ParamCheck {
            name: store.name(*id).to_string(),
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for e in 0..n_entries {
            let original = store.value(*id).values()[e];
            store.value_mut(*id).values_mut()[e] = original + h;
            let plus = loss_fn(store)?;
            store.value_mut(*id).values_mut()[e] = original - h;
            let minus = loss_fn(store)?;
            store.value_mut(*id).values_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi][e];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        per_param.push(check);
    }

    let max_rel_error = per_param
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, max_rel_error, tolerance: tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dense::DenseMatrix;
    use crate::tensor::tape::Tape;

    #[test]
    fn linear_loss_is_exact() {
        // exactly representable values and a power-of-two step keep the
        // central difference of a linear function free of rounding
        let mut store = ParameterStore::new();
        store
            .add("theta", DenseMatrix::from_values(1, 3, vec![0.25, -0.5, 2.0]).unwrap())
            .unwrap();
        let loss = |s: &ParameterStore| -> Result<f64> {
            Ok(s.value(s.id("theta").unwrap()).sum_all())
        };
        let grad = |s: &mut ParameterStore| -> Result<()> {
            let id = s.id("theta").unwrap();
            let mut tape = Tape::new();
            let t = tape.param(s, id);
            let l = tape.sum_all(t);
            tape.backward(l)?;
            tape.write_grads(s);
            Ok(())
        };
        let h = 2.0_f64.powi(-17);
        let report = finite_diff_check(loss, grad, &mut store, h, 1e-4).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn constant_sum_softmax_passes_on_absolute_fallback() {
        let mut store = ParameterStore::new();
        store
            .add("theta", DenseMatrix::from_values(1, 4, vec![0.1, 0.4, -0.2, 0.9]).unwrap())
            .unwrap();
        let loss = |s: &ParameterStore| -> Result<f64> {
            let mut tape = Tape::new();
            let t = tape.param(s, s.id("theta").unwrap());
            let soft = tape.softmax_rows(t);
            let l = tape.sum_all(soft);
            Ok(tape.value(l).scalar_value())
        };
        let grad = |s: &mut ParameterStore| -> Result<()> {
            let id = s.id("theta").unwrap();
            let mut tape = Tape::new();
            let t = tape.param(s, id);
            let soft = tape.softmax_rows(t);
            let l = tape.sum_all(soft);
            tape.backward(l)?;
            tape.write_grads(s);
            Ok(())
        };
        let report = finite_diff_check(loss, grad, &mut store, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "max rel {}", report.max_rel_error);
        // softmax rows sum to one, so the true gradient is the zero vector
        assert!(report.per_param[0].max_abs_analytic < 1e-12);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut store = ParameterStore::new();
        store.add("theta", DenseMatrix::scalar(1.0)).unwrap();
        let counter = Cell::new(0.0);
        let loss = |_: &ParameterStore| -> Result<f64> {
            counter.set(counter.get() + 1.0);
            Ok(counter.get())
        };
        let err = finite_diff_check(loss, |_| Ok(()), &mut store, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, CopfError::Verification(_)));
    }
}
