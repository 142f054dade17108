//! Symmetric InfoNCE between two views, for flows and for flow groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau_n: f64,
    pub tau_g: f64,
    /// Added to row norms before cosine normalization; 0 rejects zero rows.
    pub cosine_eps: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau_n: 0.5,
            tau_g: 0.5,
            cosine_eps: 0.0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_n > 0.0) || !(self.tau_g > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(self.cosine_eps >= 0.0) {
            return Err(Error::config("cosine_eps must be non-negative"));
        }
        Ok(())
    }
}

/// `(1/2N) Σ_i [ℓ(a_i, b_i) + ℓ(b_i, a_i)]` where
/// `ℓ(a_i, b_i) = -log(exp(cos(a_i, b_i)/τ) / Σ_t exp(cos(a_i, b_t)/τ))`.
pub fn symmetric_info_nce(tape: &mut Tape, a: Var, b: Var, tau: f64, eps: f64) -> Result<Var> {
    let (n, d) = tape.value(a).dims2()?;
    if tape.value(b).dims2()? != (n, d) {
        return Err(Error::shape(format!(
            "views differ in shape: {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let an = tape.l2_normalize_rows(a, eps)?;
    let bn = tape.l2_normalize_rows(b, eps)?;
    let bt = tape.transpose(bn)?;
    let sim = tape.matmul(an, bt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let rows = tape.logsumexp_rows(sim);
    let rows = tape.sum(rows);
    let sim_t = tape.transpose(sim)?;
    let cols = tape.logsumexp_rows(sim_t);
    let cols = tape.sum(cols);
    let diag = tape.diag(sim)?;
    let diag = tape.sum(diag);
    let diag = tape.scale(diag, 2.0);
    let both = tape.add(rows, cols)?;
    let total = tape.sub(both, diag)?;
    Ok(tape.scale(total, 1.0 / (2.0 * n as f64)))
}

/// Flow-level loss over projected node embeddings of the two views.
pub fn node_node_loss(tape: &mut Tape, v1: Var, v2: Var, cfg: &ContrastConfig) -> Result<Var> {
    symmetric_info_nce(tape, v1, v2, cfg.tau_n, cfg.cosine_eps)
}

/// Group-level loss over projected hyperedge embeddings of the two views.
pub fn group_group_loss(tape: &mut Tape, e1: Var, e2: Var, cfg: &ContrastConfig) -> Result<Var> {
    symmetric_info_nce(tape, e1, e2, cfg.tau_g, cfg.cosine_eps)
}

/// Loss value for plain tensors.
pub fn info_nce_value(a: &Tensor, b: &Tensor, tau: f64, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(a.clone());
    let b = tape.constant(b.clone());
    let l = symmetric_info_nce(&mut tape, a, b, tau, eps)?;
    Ok(tape.scalar(l))
}
