//! Score-matching objectives and the bi-level losses built on them.
//!
//! Every objective is written against a per-row log-density closure
//! `w ↦ log p̃(w)` of shape `[n]`; the score is its gradient in `w`, taken
//! with the graph retained so losses stay differentiable in the parameters.
//! Randomness is drawn up front into [`ObjectiveNoise`] so that the same
//! noise can be replayed across several evaluations.

use crate::autodiff::{grad, Tensor, Var, HESSIAN_DIM_LIMIT};
use crate::error::{Error, Result};
use crate::models::{binary_states, check_rows, EnergyModel};
use crate::posteriors::Posterior;
use crate::rng::{self, Rng};

/// Largest latent dimension for which enumeration over `{0,1}^d_h` is allowed.
pub const ENUMERATE_LATENT_LIMIT: usize = 10;

/// Per-row log-density `[n]` of a batch `[n, d]`.
pub type LogDensity<'a> = dyn Fn(&Var) -> Var + 'a;

/// Discrete prior over noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePrior {
    levels: Vec<f64>,
    weights: Vec<f64>,
}

impl NoisePrior {
    pub fn new(levels: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("noise prior has no levels".into()));
        }
        if levels.len() != weights.len() {
            return Err(Error::Config(format!(
                "noise prior has {} levels but {} weights",
                levels.len(),
                weights.len()
            )));
        }
        if levels.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Domain("noise levels must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "noise prior weights must be nonnegative and sum to 1, got {total}"
            )));
        }
        Ok(NoisePrior { levels, weights })
    }

    /// `count` geometrically spaced levels from `lo` to `hi` with equal weights.
    pub fn geometric(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("noise prior has no levels".into()));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Domain(format!("invalid noise range [{lo}, {hi}]")));
        }
        let levels = if count == 1 {
            vec![lo]
        } else {
            let r = (hi / lo).ln() / (count - 1) as f64;
            (0..count).map(|k| lo * (r * k as f64).exp()).collect()
        };
        NoisePrior::new(levels, vec![1.0 / count as f64; count])
    }

    pub fn point(sigma: f64) -> Result<Self> {
        NoisePrior::new(vec![sigma], vec![1.0])
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        if self.levels.len() == 1 {
            return self.levels[0];
        }
        self.levels[rng::categorical(&self.weights, rng)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreObjective {
    /// Exact Hessian trace.
    Sm,
    /// Rademacher slicing with `directions` draws per point.
    Ssm { directions: usize },
    Dsm { sigma: f64 },
    /// Noise level drawn per point from `prior`; target anchored at `sigma0`.
    Mdsm { prior: NoisePrior, sigma0: f64 },
}

/// Noise consumed by one objective evaluation, aligned with batch rows.
#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveNoise {
    None,
    /// Slicing directions, each `[n, d]`.
    Directions(Vec<Tensor>),
    /// Perturbation `ṽ = v + σ_i ε_i` with `eps: [n, d]` and per-row `sigmas`.
    Perturbation { eps: Tensor, sigmas: Vec<f64> },
}

impl ObjectiveNoise {
    /// Repeats every row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> ObjectiveNoise {
        match self {
            ObjectiveNoise::None => ObjectiveNoise::None,
            ObjectiveNoise::Directions(d) => {
                ObjectiveNoise::Directions(d.iter().map(|u| u.repeat_rows(times)).collect())
            }
            ObjectiveNoise::Perturbation { eps, sigmas } => ObjectiveNoise::Perturbation {
                eps: eps.repeat_rows(times),
                sigmas: sigmas
                    .iter()
                    .flat_map(|s| std::iter::repeat_n(*s, times))
                    .collect(),
            },
        }
    }
}

impl ScoreObjective {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScoreObjective::Sm => Ok(()),
            ScoreObjective::Ssm { directions } => {
                if *directions == 0 {
                    Err(Error::Config("SSM needs at least one direction".into()))
                } else {
                    Ok(())
                }
            }
            ScoreObjective::Dsm { sigma } => positive("DSM sigma", *sigma),
            ScoreObjective::Mdsm { sigma0, .. } => positive("MDSM anchor sigma0", *sigma0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreObjective::Sm => "sm",
            ScoreObjective::Ssm { .. } => "ssm",
            ScoreObjective::Dsm { .. } => "dsm",
            ScoreObjective::Mdsm { .. } => "mdsm",
        }
    }

    pub fn draw_noise(&self, n: usize, d: usize, rng: &mut Rng) -> ObjectiveNoise {
        match self {
            ScoreObjective::Sm => ObjectiveNoise::None,
            ScoreObjective::Ssm { directions } => ObjectiveNoise::Directions(
                (0..*directions)
                    .map(|_| rng::rademacher_tensor(&[n, d], rng))
                    .collect(),
            ),
            ScoreObjective::Dsm { sigma } => ObjectiveNoise::Perturbation {
                eps: rng::normal_tensor(&[n, d], rng),
                sigmas: vec![*sigma; n],
            },
            ScoreObjective::Mdsm { prior, .. } => {
                let sigmas = (0..n).map(|_| prior.sample(rng)).collect();
                ObjectiveNoise::Perturbation {
                    eps: rng::normal_tensor(&[n, d], rng),
                    sigmas,
                }
            }
        }
    }

    /// Points at which the score is evaluated: the perturbed batch for the
    /// denoising objectives, the batch itself otherwise.
    pub fn eval_points(&self, batch: &Tensor, noise: &ObjectiveNoise) -> Result<Tensor> {
        match noise {
            ObjectiveNoise::Perturbation { eps, sigmas } => {
                check_noise_rows(batch, eps, sigmas)?;
                Ok(perturb(batch, eps, sigmas))
            }
            _ => Ok(batch.clone()),
        }
    }

    /// Per-row objective values `[n]`.
    pub fn per_point(
        &self,
        log_density: &LogDensity<'_>,
        batch: &Tensor,
        noise: &ObjectiveNoise,
    ) -> Result<Var> {
        self.validate()?;
        if batch.rank() != 2 {
            return Err(Error::shape(format!("batch must be [n, d], got {:?}", batch.shape())));
        }
        match (self, noise) {
            (ScoreObjective::Sm, _) => sm_per_point(log_density, batch),
            (ScoreObjective::Ssm { .. }, ObjectiveNoise::Directions(dirs)) => {
                ssm_per_point(log_density, batch, dirs)
            }
            (ScoreObjective::Dsm { .. }, ObjectiveNoise::Perturbation { eps, sigmas }) => {
                check_noise_rows(batch, eps, sigmas)?;
                let targets: Vec<f64> = sigmas.iter().map(|s| -1.0 / s).collect();
                denoising_per_point(log_density, batch, eps, sigmas, &targets)
            }
            (ScoreObjective::Mdsm { sigma0, .. }, ObjectiveNoise::Perturbation { eps, sigmas }) => {
                check_noise_rows(batch, eps, sigmas)?;
                let targets: Vec<f64> = sigmas.iter().map(|s| -(s / sigma0) / sigma0).collect();
                denoising_per_point(log_density, batch, eps, sigmas, &targets)
            }
            _ => Err(Error::Contract(format!(
                "noise does not match the {} objective",
                self.name()
            ))),
        }
    }

    /// Batch mean of [`ScoreObjective::per_point`].
    pub fn loss(
        &self,
        log_density: &LogDensity<'_>,
        batch: &Tensor,
        noise: &ObjectiveNoise,
    ) -> Result<Var> {
        Ok(self.per_point(log_density, batch, noise)?.mean())
    }
}

fn positive(what: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive, got {x}")))
    }
}

fn check_noise_rows(batch: &Tensor, eps: &Tensor, sigmas: &[f64]) -> Result<()> {
    if eps.shape() != batch.shape() || sigmas.len() != batch.rows() {
        return Err(Error::shape(format!(
            "perturbation noise {:?} ({} levels) does not match batch {:?}",
            eps.shape(),
            sigmas.len(),
            batch.shape()
        )));
    }
    Ok(())
}

fn perturb(batch: &Tensor, eps: &Tensor, sigmas: &[f64]) -> Tensor {
    let d = batch.cols();
    let mut out = batch.clone();
    for (k, x) in out.data_mut().iter_mut().enumerate() {
        *x += sigmas[k / d] * eps.data()[k];
    }
    out
}

/// `(w, ∇_w log p̃(w))` with `w` a fresh leaf holding `points`.
fn score_at(log_density: &LogDensity<'_>, points: &Tensor) -> Result<(Var, Var)> {
    let w = Var::param(points.clone());
    let lp = log_density(&w);
    if lp.shape() != [points.rows()] {
        return Err(Error::shape(format!(
            "log-density returned {:?} for {} rows",
            lp.shape(),
            points.rows()
        )));
    }
    let s = grad(&lp.sum(), std::slice::from_ref(&w), true)?.remove(0);
    Ok((w, s))
}

fn half_sq_norm(s: &Var) -> Var {
    s.square().sum_axis(1).scale(0.5)
}

fn sm_per_point(log_density: &LogDensity<'_>, batch: &Tensor) -> Result<Var> {
    let d = batch.cols();
    if d > HESSIAN_DIM_LIMIT {
        return Err(Error::size(
            "exact score matching dimension (use SSM above this)",
            d,
            HESSIAN_DIM_LIMIT,
        ));
    }
    let (w, s) = score_at(log_density, batch)?;
    let mut trace: Option<Var> = None;
    for i in 0..d {
        let col = grad(&s.slice(1, i, 1).sum(), std::slice::from_ref(&w), true)?.remove(0);
        let diag = col.slice(1, i, 1);
        trace = Some(match trace {
            Some(t) => t.add(&diag),
            None => diag,
        });
    }
    let trace = match trace {
        Some(t) => t.reshape(&[batch.rows()]),
        None => Var::constant(Tensor::zeros(&[batch.rows()])),
    };
    Ok(half_sq_norm(&s).add(&trace))
}

fn ssm_per_point(log_density: &LogDensity<'_>, batch: &Tensor, dirs: &[Tensor]) -> Result<Var> {
    if dirs.is_empty() {
        return Err(Error::Config("SSM needs at least one direction".into()));
    }
    if let Some(u) = dirs.iter().find(|u| u.shape() != batch.shape()) {
        return Err(Error::shape(format!(
            "slicing direction {:?} does not match batch {:?}",
            u.shape(),
            batch.shape()
        )));
    }
    let (w, s) = score_at(log_density, batch)?;
    let mut slice_term: Option<Var> = None;
    for u in dirs {
        let u = Var::constant(u.clone());
        let hu = grad(&s.mul(&u).sum(), std::slice::from_ref(&w), true)?.remove(0);
        let t = hu.mul(&u).sum_axis(1);
        slice_term = Some(match slice_term {
            Some(acc) => acc.add(&t),
            None => t,
        });
    }
    let slice_term = slice_term.expect("nonempty directions").scale(1.0 / dirs.len() as f64);
    Ok(half_sq_norm(&s).add(&slice_term))
}

/// `||s(ṽ_i) - c_i ε_i||²` with `ṽ_i = v_i + σ_i ε_i`.
fn denoising_per_point(
    log_density: &LogDensity<'_>,
    batch: &Tensor,
    eps: &Tensor,
    sigmas: &[f64],
    target_scale: &[f64],
) -> Result<Var> {
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("noise level must be positive, got {s}")));
    }
    let points = perturb(batch, eps, sigmas);
    let (_, s) = score_at(log_density, &points)?;
    let d = batch.cols();
    let mut target = eps.clone();
    for (k, x) in target.data_mut().iter_mut().enumerate() {
        *x *= target_scale[k / d];
    }
    Ok(s.sub(&Var::constant(target)).square().sum_axis(1))
}

pub fn sm_loss(log_density: &LogDensity<'_>, batch: &Tensor) -> Result<Var> {
    ScoreObjective::Sm.loss(log_density, batch, &ObjectiveNoise::None)
}

pub fn ssm_loss(
    log_density: &LogDensity<'_>,
    batch: &Tensor,
    n_directions: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let obj = ScoreObjective::Ssm {
        directions: n_directions,
    };
    obj.validate()?;
    let noise = obj.draw_noise(batch.rows(), batch.cols(), rng);
    obj.loss(log_density, batch, &noise)
}

pub fn dsm_loss(
    log_density: &LogDensity<'_>,
    batch: &Tensor,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let obj = ScoreObjective::Dsm { sigma };
    obj.validate()?;
    let noise = obj.draw_noise(batch.rows(), batch.cols(), rng);
    obj.loss(log_density, batch, &noise)
}

pub fn mdsm_loss(
    log_density: &LogDensity<'_>,
    batch: &Tensor,
    prior: &NoisePrior,
    sigma0: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let obj = ScoreObjective::Mdsm {
        prior: prior.clone(),
        sigma0,
    };
    obj.validate()?;
    let noise = obj.draw_noise(batch.rows(), batch.cols(), rng);
    obj.loss(log_density, batch, &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// One reparameterized draw per point.
    Sample,
    /// Exact expectation over `{0,1}^d_h`.
    Enumerate,
}

/// All randomness of one bi-level iteration: objective noise plus the base
/// noise of the latent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationNoise {
    pub objective: ObjectiveNoise,
    /// `[n, d_h]`
    pub latent: Tensor,
}

impl IterationNoise {
    pub fn draw(
        objective: &ScoreObjective,
        posterior: &dyn Posterior,
        batch: &Tensor,
        rng: &mut Rng,
    ) -> IterationNoise {
        let objective = objective.draw_noise(batch.rows(), batch.cols(), rng);
        let latent = posterior.draw_noise(batch.rows(), rng);
        IterationNoise { objective, latent }
    }
}

/// The pieces shared by the upper and lower bi-level losses.
#[derive(Clone, Copy)]
pub struct BiLevelSetup<'a> {
    pub model: &'a dyn EnergyModel,
    pub posterior: &'a dyn Posterior,
    pub objective: &'a ScoreObjective,
    pub mode: LatentMode,
}

/// Batch with every row repeated over all latent states, and the matching
/// states tiled: row `i·S + s` pairs point `i` with state `s`.
struct Enumerated {
    batch: Tensor,
    noise: ObjectiveNoise,
    states: Var,
    points: Tensor,
}

impl BiLevelSetup<'_> {
    fn check(&self, theta: &[Var], phi: &[Var], batch: &Tensor, noise: &IterationNoise) -> Result<()> {
        let d_v = self.model.visible_dim();
        let d_h = self.model.latent_dim();
        check_rows("batch", batch.shape(), d_v)?;
        if self.posterior.visible_dim() != d_v || self.posterior.latent_dim() != d_h {
            return Err(Error::shape(format!(
                "posterior maps {} -> {}, model needs {d_v} -> {d_h}",
                self.posterior.visible_dim(),
                self.posterior.latent_dim()
            )));
        }
        if theta.len() != self.model.param_shapes().len() || phi.len() != self.posterior.param_shapes().len() {
            return Err(Error::shape("parameter count does not match the model or posterior"));
        }
        if noise.latent.shape() != [batch.rows(), d_h] {
            return Err(Error::shape(format!(
                "latent noise {:?} does not match batch of {} rows",
                noise.latent.shape(),
                batch.rows()
            )));
        }
        if self.mode == LatentMode::Enumerate {
            if !self.posterior.is_discrete() {
                return Err(Error::Unsupported(
                    "enumeration needs a posterior over binary latents".into(),
                ));
            }
            if d_h > ENUMERATE_LATENT_LIMIT {
                return Err(Error::size("enumerated latent dimension", d_h, ENUMERATE_LATENT_LIMIT));
            }
        }
        self.objective.validate()
    }

    fn enumerate(&self, batch: &Tensor, noise: &IterationNoise) -> Result<Enumerated> {
        let states = binary_states(self.model.latent_dim());
        let s = states.rows();
        let batch_rep = batch.repeat_rows(s);
        let noise_rep = noise.objective.repeat_rows(s);
        let points = self.objective.eval_points(&batch_rep, &noise_rep)?;
        Ok(Enumerated {
            batch: batch_rep,
            noise: noise_rep,
            states: Var::constant(states.tile_rows(batch.rows())),
            points,
        })
    }

    /// Objective value under the surrogate score
    /// `∇_v [log p̃(v, h; θ) - log q(h | v; φ)]` with `h` held fixed.
    pub fn upper_loss(
        &self,
        theta: &[Var],
        phi: &[Var],
        batch: &Tensor,
        noise: &IterationNoise,
    ) -> Result<Var> {
        self.check(theta, phi, batch, noise)?;
        let surrogate = |h: Var| {
            move |w: &Var| {
                self.model
                    .energy(theta, w, &h)
                    .add(&self.posterior.log_density(phi, &h, w))
                    .neg()
            }
        };
        match self.mode {
            LatentMode::Sample => {
                let points = self.objective.eval_points(batch, &noise.objective)?;
                let h = self
                    .posterior
                    .sample(phi, &Var::constant(points), &noise.latent);
                let f = surrogate(h);
                self.objective.loss(&f, batch, &noise.objective)
            }
            LatentMode::Enumerate => {
                let e = self.enumerate(batch, noise)?;
                let weights = self
                    .posterior
                    .log_density(phi, &e.states, &Var::constant(e.points.clone()))
                    .exp();
                let f = surrogate(e.states.clone());
                let per = self.objective.per_point(&f, &e.batch, &e.noise)?;
                Ok(weights.mul(&per).sum().scale(1.0 / batch.rows() as f64))
            }
        }
    }

    /// `E_q[log q(h | v) - log p̃(v, h)]` averaged over the evaluation points.
    pub fn lower_kl_loss(
        &self,
        theta: &[Var],
        phi: &[Var],
        batch: &Tensor,
        noise: &IterationNoise,
    ) -> Result<Var> {
        self.check(theta, phi, batch, noise)?;
        match self.mode {
            LatentMode::Sample => {
                let points = Var::constant(self.objective.eval_points(batch, &noise.objective)?);
                let h = self.posterior.sample(phi, &points, &noise.latent);
                Ok(self
                    .posterior
                    .log_density(phi, &h, &points)
                    .add(&self.model.energy(theta, &points, &h))
                    .mean())
            }
            LatentMode::Enumerate => {
                let e = self.enumerate(batch, noise)?;
                let points = Var::constant(e.points);
                let lq = self.posterior.log_density(phi, &e.states, &points);
                let energy = self.model.energy(theta, &points, &e.states);
                Ok(lq
                    .exp()
                    .mul(&lq.add(&energy))
                    .sum()
                    .scale(1.0 / batch.rows() as f64))
            }
        }
    }

    /// `½ E_q ||∇_h log q(h | v) - ∇_h log p̃(v, h)||²` with one draw per point.
    pub fn lower_fisher_loss(
        &self,
        theta: &[Var],
        phi: &[Var],
        batch: &Tensor,
        noise: &IterationNoise,
    ) -> Result<Var> {
        if self.posterior.is_discrete() {
            return Err(Error::Unsupported(
                "the Fisher lower-level divergence needs continuous latents".into(),
            ));
        }
        let setup = BiLevelSetup {
            mode: LatentMode::Sample,
            ..*self
        };
        setup.check(theta, phi, batch, noise)?;
        let points = Var::constant(self.objective.eval_points(batch, &noise.objective)?);
        let mut h = self.posterior.sample(phi, &points, &noise.latent);
        if !h.requires_grad() {
            h = Var::param(h.value().clone());
        }
        let energy = self.model.energy(theta, &points, &h).sum();
        let grad_e = grad(&energy, std::slice::from_ref(&h), true)?.remove(0);
        let score_q = self.posterior.score_h(phi, &h, &points)?;
        Ok(half_sq_norm(&score_q.add(&grad_e)).mean())
    }
}

#[cfg(test)]
mod tests;
