use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, multiplied by `max(1, |loss|)`, so that near-zero
    /// gradients are compared absolutely at the resolution of the loss.
    pub floor: f64,
    /// Checks at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Analytic gradients of `f` for every parameter it loads.
pub fn analytic_gradients<F>(f: &F, store: &ParameterStore) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    check_finite(tape.scalar(loss))?;
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, var) in tape.params() {
        let g = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape()));
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Compares analytic gradients of `f` with central finite differences.
pub fn grad_check<F>(f: F, store: &ParameterStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, store)?;
    grad_check_against(f, store, &analytic, cfg)
}

/// Finite-difference comparison against caller-supplied gradients.
pub fn grad_check_against<F>(
    f: F,
    store: &ParameterStore,
    analytic: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        let v = tape.scalar(loss);
        check_finite(v)?;
        Ok(v)
    };
    let floor = cfg.floor * eval(store)?.abs().max(1.0);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: cfg.tol,
    };
    for (name, grad) in analytic {
        let len = grad.len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(limit) if limit < len => (0..limit).map(|i| i * len / limit).collect(),
            _ => (0..len).collect(),
        };
        for idx in coords {
            let original = work.value(name)?.data()[idx];
            work.get_mut(name)?.value.data_mut()[idx] = original + cfg.h;
            let plus = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[idx] = original - cfg.h;
            let minus = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}
