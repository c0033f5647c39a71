//! Energy functions `E(v, h; θ)` for energy-based latent variable models.
//!
//! Models are stateless architecture descriptions; parameters travel as
//! ordered lists of tensors (or graph nodes) whose layout each model defines
//! through [`EnergyModel::param_shapes`].

mod deep;
mod grbm;

pub use deep::{mlp, DeepEblvm};
pub use grbm::{binary_states, Grbm, GrbmConditionals, GrbmParams, GrbmVars};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Grbm,
    Deep,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Grbm => "grbm",
            ModelKind::Deep => "deep",
        }
    }
}

/// An energy over visible rows `v: [n, d_v]` and latent rows `h: [n, d_h]`.
pub trait EnergyModel {
    fn kind(&self) -> ModelKind;
    fn visible_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    fn init(&self, rng: &mut Rng) -> Vec<Tensor>;

    /// Per-row energies, shape `[n]`.
    fn energy(&self, theta: &[Var], v: &Var, h: &Var) -> Var;

    /// Free energy `-log p̃(v)` with latents marginalized, when tractable.
    fn free_energy(&self, _theta: &[Var], _v: &Var) -> Option<Var> {
        None
    }

    fn as_grbm(&self) -> Option<&Grbm> {
        None
    }

    /// Checks a parameter list against the model layout.
    fn check_params(&self, theta: &[Tensor]) -> Result<()> {
        check_shapes("model parameters", &self.param_shapes(), theta)
    }
}

pub(crate) fn check_shapes(what: &str, expected: &[Vec<usize>], got: &[Tensor]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::shape(format!(
            "{what}: expected {} tensors, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (i, (e, g)) in expected.iter().zip(got).enumerate() {
        if e.as_slice() != g.shape() {
            return Err(Error::shape(format!(
                "{what}: tensor {i} has shape {:?}, expected {:?}",
                g.shape(),
                e
            )));
        }
        if !g.is_finite() {
            return Err(Error::Domain(format!("{what}: tensor {i} has non-finite entries")));
        }
    }
    Ok(())
}

/// Checks that `x` is a `[n, dim]` batch.
pub(crate) fn check_rows(what: &str, x: &[usize], dim: usize) -> Result<()> {
    if x.len() != 2 || x[1] != dim {
        return Err(Error::shape(format!("{what}: expected [n, {dim}], got {x:?}")));
    }
    Ok(())
}

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * crate::rng::uniform(rng) - 1.0) * limit)
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub fn params_to_vars(params: &[Tensor], requires_grad: bool) -> Vec<Var> {
    params
        .iter()
        .map(|t| Var::leaf(t.clone(), requires_grad))
        .collect()
}
