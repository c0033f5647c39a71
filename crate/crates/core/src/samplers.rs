//! Block Gibbs sampling for the GRBM, the CD-k gradient estimator, and
//! (annealed) Langevin dynamics driven by a score function.

use crate::autodiff::{grad, Tensor};
use crate::error::{Error, Result};
use crate::models::{params_to_vars, GrbmParams, GrbmVars};
use crate::rng::{self, Rng};

/// Langevin aborts once any chain's norm exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// `sweeps` full `v → h → v` Gibbs sweeps from `v0 [n, d_v]`.
/// Returns the final `(v, h)`.
pub fn gibbs_grbm(params: &GrbmParams, v0: &Tensor, sweeps: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if sweeps == 0 {
        return Err(Error::Config("Gibbs sampling needs at least one sweep".into()));
    }
    let cond = params.conditionals();
    let mut v = v0.clone();
    let mut h = Tensor::zeros(&[v0.rows(), params.model().d_h]);
    for _ in 0..sweeps {
        h = cond.sample_hidden(&v, rng)?;
        v = cond.sample_visible(&h, rng)?;
    }
    Ok((v, h))
}

/// Visible states recorded every `thin` sweeps after `burn_in` sweeps.
pub fn gibbs_chain(
    params: &GrbmParams,
    v0: &Tensor,
    burn_in: usize,
    samples: usize,
    thin: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    if thin == 0 {
        return Err(Error::Config("thinning interval must be at least 1".into()));
    }
    let mut v = if burn_in > 0 { gibbs_grbm(params, v0, burn_in, rng)?.0 } else { v0.clone() };
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        v = gibbs_grbm(params, &v, thin, rng)?.0;
        out.push(v.clone());
    }
    Ok(out)
}

/// `∇θ mean_i F(x_i)`, ordered like [`GrbmParams::to_tensors`].
pub fn mean_free_energy_grad(params: &GrbmParams, x: &Tensor) -> Result<Vec<Tensor>> {
    crate::models::check_rows("points", x.shape(), params.model().d_v)?;
    let theta = params_to_vars(&params.to_tensors(), true);
    let f = GrbmVars::new(&theta).free_energy(&crate::autodiff::Var::constant(x.clone())).mean();
    Ok(grad(&f, &theta, false)?.into_iter().map(|g| g.value().clone()).collect())
}

/// Descent direction for the negative log-likelihood from data and model samples:
/// `∇θ mean F(data) - ∇θ mean F(samples)`.
pub fn cd_gradient_from_samples(params: &GrbmParams, data: &Tensor, samples: &Tensor) -> Result<Vec<Tensor>> {
    let pos = mean_free_energy_grad(params, data)?;
    let neg = mean_free_energy_grad(params, samples)?;
    Ok(pos.iter().zip(&neg).map(|(p, n)| p.sub(n)).collect())
}

#[derive(Clone, Debug)]
pub struct CdEstimate {
    pub grad: Vec<Tensor>,
    /// `mean F(data) - mean F(negatives)`
    pub free_energy_gap: f64,
    pub negatives: Tensor,
}

/// CD-k, or PCD-k when `chains` is given: negatives come from `k` sweeps
/// started at the batch or at the persistent chains, which are advanced in place.
pub fn cd_k_grad(
    params: &GrbmParams,
    batch: &Tensor,
    k: usize,
    rng: &mut Rng,
    chains: Option<&mut Tensor>,
) -> Result<CdEstimate> {
    let start = match &chains {
        Some(c) => (*c).clone(),
        None => batch.clone(),
    };
    let negatives = if k == 0 { start } else { gibbs_grbm(params, &start, k, rng)?.0 };
    if let Some(c) = chains {
        *c = negatives.clone();
    }
    let grad = cd_gradient_from_samples(params, batch, &negatives)?;
    let mean_f = |x: &Tensor| (0..x.rows()).map(|i| params.free_energy_value(x.row(i))).sum::<f64>() / x.rows() as f64;
    Ok(CdEstimate {
        grad,
        free_energy_gap: mean_f(batch) - mean_f(&negatives),
        negatives,
    })
}

/// Step length, steps per temperature, and a geometric temperature ladder
/// from `t_hi` down to `t_lo` with `levels` rungs.
#[derive(Clone, Debug, PartialEq)]
pub struct LangevinSchedule {
    pub step: f64,
    pub n_steps: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub levels: usize,
}

impl LangevinSchedule {
    pub fn plain(step: f64, n_steps: usize) -> Self {
        LangevinSchedule {
            step,
            n_steps,
            t_lo: 1.0,
            t_hi: 1.0,
            levels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("Langevin step must be positive, got {}", self.step)));
        }
        if self.n_steps == 0 || self.levels == 0 {
            return Err(Error::Config("Langevin needs at least one step and one temperature".into()));
        }
        if !(self.t_lo > 0.0 && self.t_lo <= self.t_hi && self.t_hi.is_finite()) {
            return Err(Error::Config(format!(
                "temperature range must satisfy 0 < t_lo <= t_hi, got [{}, {}]",
                self.t_lo, self.t_hi
            )));
        }
        Ok(())
    }

    /// Temperatures from hottest to coldest; a single rung is `t_lo`.
    pub fn temperatures(&self) -> Vec<f64> {
        if self.levels == 1 {
            return vec![self.t_lo];
        }
        let ratio = (self.t_lo / self.t_hi).ln();
        (0..self.levels)
            .map(|k| self.t_hi * (ratio * k as f64 / (self.levels - 1) as f64).exp())
            .collect()
    }
}

/// Score of the target at a batch `[n, d]` of states.
pub type ScoreFn<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

fn langevin_steps(
    score: &ScoreFn<'_>,
    x: &mut Tensor,
    step: f64,
    n_steps: usize,
    inv_temp: f64,
    rng: &mut Rng,
) -> Result<()> {
    let noise_scale = step.sqrt();
    for it in 0..n_steps {
        let s = score(x)?;
        if s.shape() != x.shape() {
            return Err(Error::shape(format!("score returned {:?} for states {:?}", s.shape(), x.shape())));
        }
        let z = rng::normal_tensor(x.shape(), rng);
        for ((xk, sk), zk) in x.data_mut().iter_mut().zip(s.data()).zip(z.data()) {
            *xk += 0.5 * step * (sk * inv_temp) + noise_scale * zk;
        }
        for r in 0..x.rows() {
            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(Error::Numeric {
                    op: "Langevin dynamics".into(),
                    context: format!("chain {r} reached norm {norm:e} at step {it}"),
                });
            }
        }
    }
    Ok(())
}

/// Unadjusted Langevin: `x ← x + (step/2)·score(x) + √step·ε`.
pub fn langevin(score: &ScoreFn<'_>, x0: &Tensor, step: f64, n_steps: usize, rng: &mut Rng) -> Result<Tensor> {
    LangevinSchedule::plain(step, n_steps).validate()?;
    let mut x = x0.clone();
    langevin_steps(score, &mut x, step, n_steps, 1.0, rng)?;
    Ok(x)
}

/// Langevin over the geometric temperature ladder, `n_steps` per rung, with
/// the score divided by the rung's temperature.
pub fn annealed_langevin(score: &ScoreFn<'_>, x0: &Tensor, schedule: &LangevinSchedule, rng: &mut Rng) -> Result<Tensor> {
    schedule.validate()?;
    let mut x = x0.clone();
    for t in schedule.temperatures() {
        langevin_steps(score, &mut x, schedule.step, schedule.n_steps, 1.0 / t, rng)?;
    }
    Ok(x)
}
