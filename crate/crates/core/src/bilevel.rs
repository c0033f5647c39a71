//! Alternating bi-level optimization: inner posterior updates, unrolled
//! lower-level gradient steps, the surrogate outer gradient, Adam, the
//! gradient-bias probe and the training loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{grad, live_nodes, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{params_to_vars, EnergyModel, GrbmParams, GrbmVars};
use crate::objectives::{BiLevelSetup, IterationNoise, LatentMode, ScoreObjective};
use crate::posteriors::Posterior;
use crate::rng;

/// Largest flattened φ for which the dense implicit reference gradient is formed.
pub const IMPLICIT_DIM_LIMIT: usize = 2048;

/// Default cap on live graph nodes while unrolling.
pub const DEFAULT_NODE_CAP: usize = 20_000_000;

/// Upper loss `J(θ, φ)` and lower loss `G(θ, φ)` as scalar graph nodes.
pub trait BilevelProblem {
    fn upper(&self, theta: &[Var], phi: &[Var]) -> Result<Var>;
    fn lower(&self, theta: &[Var], phi: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerDivergence {
    Kl,
    Fisher,
}

/// The score-matching bi-level problem on one minibatch with fixed noise.
pub struct BismProblem<'a> {
    pub setup: BiLevelSetup<'a>,
    pub divergence: LowerDivergence,
    pub batch: &'a Tensor,
    pub noise: &'a IterationNoise,
}

impl BilevelProblem for BismProblem<'_> {
    fn upper(&self, theta: &[Var], phi: &[Var]) -> Result<Var> {
        self.setup.upper_loss(theta, phi, self.batch, self.noise)
    }

    fn lower(&self, theta: &[Var], phi: &[Var]) -> Result<Var> {
        match self.divergence {
            LowerDivergence::Kl => self.setup.lower_kl_loss(theta, phi, self.batch, self.noise),
            LowerDivergence::Fisher => self.setup.lower_fisher_loss(theta, phi, self.batch, self.noise),
        }
    }
}

/// Quadratic bi-level toy with `φ ∈ R^p`, `θ ∈ R^q`:
/// `G = ½(φ - Bθ)ᵀA(φ - Bθ)`, `J = ½||φ - m||² + (λ/2)||θ||²`.
/// The lower solution `φ*(θ) = Bθ` is affine, so every quantity has a closed form.
#[derive(Clone, Debug)]
pub struct QuadraticToy {
    /// `[p, p]`, symmetric positive definite
    pub a: Tensor,
    /// `[p, q]`
    pub b: Tensor,
    /// `[p]`
    pub m: Tensor,
    pub lambda: f64,
}

impl QuadraticToy {
    pub fn optimum(&self, theta: &Tensor) -> Tensor {
        self.b.matmul(&theta.reshape(&[theta.numel(), 1])).reshape(&[self.m.numel()])
    }

    /// `d/dθ J(θ, φ*(θ)) = Bᵀ(Bθ - m) + λθ`.
    pub fn exact_hypergrad(&self, theta: &Tensor) -> Tensor {
        let r = self.optimum(theta).sub(&self.m);
        self.b
            .matmul_t(&r.reshape(&[r.numel(), 1]), true, false)
            .reshape(&[theta.numel()])
            .add(&theta.scale(self.lambda))
    }
}

impl BilevelProblem for QuadraticToy {
    fn upper(&self, theta: &[Var], phi: &[Var]) -> Result<Var> {
        let fit = phi[0].sub(&Var::constant(self.m.clone())).square().sum().scale(0.5);
        Ok(fit.add(&theta[0].square().sum().scale(0.5 * self.lambda)))
    }

    fn lower(&self, theta: &[Var], phi: &[Var]) -> Result<Var> {
        let q = theta[0].numel();
        let p = phi[0].numel();
        let bt = Var::constant(self.b.clone())
            .matmul(&theta[0].reshape(&[q, 1]))
            .reshape(&[p]);
        let d = phi[0].sub(&bt);
        let ad = Var::constant(self.a.clone())
            .matmul(&d.reshape(&[p, 1]))
            .reshape(&[p]);
        Ok(d.mul(&ad).sum().scale(0.5))
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "Adam tensor {i}: parameter {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mk, gk) in m.iter_mut().zip(g) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.v[i].data_mut();
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for (k, x) in params[i].data_mut().iter_mut().enumerate() {
                *x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut Adam, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerOptimizer {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

fn check_finite_grads(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            op: format!("{what} gradient"),
            context: String::new(),
        });
    }
    Ok(())
}

/// `(G(θ, φ), ∂G/∂φ)` with θ held constant.
pub fn lower_grad(problem: &dyn BilevelProblem, theta: &[Tensor], phi: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let th = params_to_vars(theta, false);
    let ph = params_to_vars(phi, true);
    let g = problem.lower(&th, &ph)?;
    let grads: Vec<Tensor> = grad(&g, &ph, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect();
    check_finite_grads(&grads, "lower-level")?;
    Ok((g.item(), grads))
}

/// `k` optimizer steps on the lower loss for one fixed batch and noise.
/// Returns the loss observed before each step.
pub fn inner_update(
    problem: &dyn BilevelProblem,
    theta: &[Tensor],
    phi: &mut [Tensor],
    k: usize,
    alpha: f64,
    optimizer: InnerOptimizer,
    adam: &mut Adam,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(k);
    for step in 0..k {
        let (loss, grads) = lower_grad(problem, theta, phi)
            .map_err(|e| e.with_numeric_context(format!("inner step {step}")))?;
        losses.push(loss);
        match optimizer {
            InnerOptimizer::Adam => adam.step(phi, &grads, alpha)?,
            InnerOptimizer::Sgd => {
                for (p, g) in phi.iter_mut().zip(&grads) {
                    *p = p.sub(&g.scale(alpha));
                }
            }
        }
    }
    Ok(losses)
}

/// `N` plain gradient steps `φ̂ⁿ = φ̂ⁿ⁻¹ - α ∂G/∂φ` from the constant `φ⁰`,
/// recorded so the result is differentiable in `theta`.
pub fn unroll(
    problem: &dyn BilevelProblem,
    theta: &[Var],
    phi0: &[Tensor],
    n: usize,
    alpha: f64,
    node_cap: usize,
) -> Result<Vec<Var>> {
    let mut phi = params_to_vars(phi0, true);
    for step in 0..n {
        let g = problem.lower(theta, &phi)?;
        let grads = grad(&g, &phi, true).map_err(|e| e.with_numeric_context(format!("unroll step {step}")))?;
        phi = phi
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.sub(&g.scale(alpha)))
            .collect();
        let live = live_nodes();
        if live > node_cap {
            return Err(Error::Resource(format!(
                "unrolling step {step} holds {live} graph nodes, cap is {node_cap}"
            )));
        }
    }
    Ok(phi)
}

#[derive(Clone, Debug)]
pub struct Surrogate {
    /// `J(θ, φ̂ᴺ)`
    pub upper: f64,
    /// `d J(θ, φ̂ᴺ(θ)) / dθ`, direct and through-unroll terms together.
    pub grad: Vec<Tensor>,
    pub phi_n: Vec<Tensor>,
}

pub fn surrogate_grad(
    problem: &dyn BilevelProblem,
    theta: &[Tensor],
    phi0: &[Tensor],
    n: usize,
    alpha: f64,
    node_cap: usize,
) -> Result<Surrogate> {
    let th = params_to_vars(theta, true);
    let phi_n = unroll(problem, &th, phi0, n, alpha, node_cap)?;
    let j = problem.upper(&th, &phi_n)?;
    let grads: Vec<Tensor> = grad(&j, &th, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect();
    check_finite_grads(&grads, "surrogate")?;
    Ok(Surrogate {
        upper: j.item(),
        grad: grads,
        phi_n: phi_n.iter().map(|v| v.value().clone()).collect(),
    })
}

/// `J(θ, φ̂ᴺ(θ))` without the outer gradient.
pub fn surrogate_value(
    problem: &dyn BilevelProblem,
    theta: &[Tensor],
    phi0: &[Tensor],
    n: usize,
    alpha: f64,
) -> Result<f64> {
    let th = params_to_vars(theta, false);
    let phi_n = unroll(problem, &th, phi0, n, alpha, usize::MAX)?;
    Ok(problem.upper(&th, &phi_n)?.item())
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.numel();
            let out = Tensor::from_vec(t.shape(), flat[off..off + n].to_vec());
            off += n;
            out
        })
        .collect()
}

fn dot_vars(a: &[Var], b: &[Tensor]) -> Var {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.mul(&Var::constant(y.clone())).sum())
        .reduce(|s, t| s.add(&t))
        .unwrap_or_else(|| Var::scalar(0.0))
}

/// Implicit-function hypergradient at a lower-level stationary point:
/// `∂J/∂θ - (∂²G/∂θ∂φ) H⁻¹ ∂J/∂φ` with `H = ∂²G/∂φ²` formed densely.
pub fn implicit_hypergrad(problem: &dyn BilevelProblem, theta: &[Tensor], phi_star: &[Tensor]) -> Result<Vec<Tensor>> {
    let dim: usize = phi_star.iter().map(|t| t.numel()).sum();
    if dim > IMPLICIT_DIM_LIMIT {
        return Err(Error::size("posterior parameter count for the implicit gradient", dim, IMPLICIT_DIM_LIMIT));
    }
    let th = params_to_vars(theta, true);
    let ph = params_to_vars(phi_star, true);
    let g = problem.lower(&th, &ph)?;
    let g_phi = grad(&g, &ph, true)?;

    let mut hess = DMatrix::<f64>::zeros(dim, dim);
    let mut unit = vec![0.0; dim];
    for k in 0..dim {
        unit[k] = 1.0;
        let col = grad(&dot_vars(&g_phi, &unflatten(&unit, phi_star)), &ph, true)?;
        unit[k] = 0.0;
        let col: Vec<Tensor> = col.iter().map(|v| v.value().clone()).collect();
        for (r, x) in flatten(&col).into_iter().enumerate() {
            hess[(r, k)] = x;
        }
    }
    let hess = (&hess + hess.transpose()) * 0.5;

    let j = problem.upper(&th, &ph)?;
    let inputs: Vec<Var> = th.iter().chain(&ph).cloned().collect();
    let jg: Vec<Tensor> = grad(&j, &inputs, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect();
    let (j_theta, j_phi) = jg.split_at(th.len());

    let rhs = DVector::from_vec(flatten(j_phi));
    let x = hess
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("lower-level Hessian is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "implicit solve".into(),
            context: String::new(),
        });
    }
    let x = unflatten(x.as_slice(), phi_star);
    let cross: Vec<Tensor> = grad(&dot_vars(&g_phi, &x), &th, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect();
    Ok(j_theta.iter().zip(&cross).map(|(a, c)| a.sub(c)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub n_values: Vec<usize>,
    /// Inner optimizer steps producing `φ⁰`.
    pub k: usize,
    pub alpha: f64,
    pub optimizer: InnerOptimizer,
    /// Plain-GD step used inside the unroll.
    pub unroll_alpha: f64,
    /// Plain-GD refinement steps approximating `φ̂*`.
    pub k_star: usize,
    pub star_alpha: f64,
    pub node_cap: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_values: vec![0, 1, 5, 10, 20],
            k: 5,
            alpha: 1e-3,
            optimizer: InnerOptimizer::Adam,
            unroll_alpha: 1e-3,
            k_star: 2000,
            star_alpha: 1e-3,
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    /// `(N, ||surrogate gradient - reference||₂)`
    pub rows: Vec<(usize, f64)>,
    pub phi0: Vec<Tensor>,
    pub phi_star: Vec<Tensor>,
    pub reference: Vec<Tensor>,
    /// `||∂G/∂φ||₂` at the refined `φ̂*`.
    pub star_grad_norm: f64,
    pub warning: Option<String>,
}

fn norm_all(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.norm().powi(2)).sum::<f64>().sqrt()
}

/// Plain gradient descent on the lower loss; reports whether the loss ever rose.
pub fn refine_lower(
    problem: &dyn BilevelProblem,
    theta: &[Tensor],
    phi: &[Tensor],
    steps: usize,
    alpha: f64,
) -> Result<(Vec<Tensor>, f64, Option<String>)> {
    let mut phi = phi.to_vec();
    let mut prev = f64::INFINITY;
    let mut rises = 0usize;
    let mut first_rise = None;
    for step in 0..steps {
        let (loss, grads) = lower_grad(problem, theta, &phi)?;
        if loss > prev {
            rises += 1;
            first_rise.get_or_insert(step);
        }
        prev = loss;
        for (p, g) in phi.iter_mut().zip(&grads) {
            *p = p.sub(&g.scale(alpha));
        }
    }
    let (_, grads) = lower_grad(problem, theta, &phi)?;
    let warning = first_rise.map(|s| {
        format!("lower loss increased on {rises} of {steps} refinement steps (first at step {s}); reference may be inaccurate")
    });
    Ok((phi, norm_all(&grads), warning))
}

/// Distance of the surrogate gradient from the implicit reference gradient
/// at the refined lower solution, for each unroll length.
pub fn gradient_bias_probe(
    problem: &dyn BilevelProblem,
    theta: &[Tensor],
    phi: &[Tensor],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut phi0 = phi.to_vec();
    let mut adam = Adam::new(phi);
    inner_update(problem, theta, &mut phi0, cfg.k, cfg.alpha, cfg.optimizer, &mut adam)?;
    let (phi_star, star_grad_norm, warning) = refine_lower(problem, theta, &phi0, cfg.k_star, cfg.star_alpha)?;
    let reference = implicit_hypergrad(problem, theta, &phi_star)?;
    let mut rows = Vec::with_capacity(cfg.n_values.len());
    for &n in &cfg.n_values {
        let s = surrogate_grad(problem, theta, &phi0, n, cfg.unroll_alpha, cfg.node_cap)?;
        let diff: Vec<Tensor> = s.grad.iter().zip(&reference).map(|(a, b)| a.sub(b)).collect();
        rows.push((n, norm_all(&diff)));
    }
    Ok(ProbeReport {
        rows,
        phi0,
        phi_star,
        reference,
        star_grad_norm,
        warning,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// Bi-level score matching with a variational posterior.
    BiLevel,
    /// Score matching on the closed-form marginal (GRBM only).
    Marginal,
    /// Contrastive divergence with `k` Gibbs sweeps; persistent chains for PCD.
    Cd { k: usize, persistent: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub objective: ScoreObjective,
    pub lower: LowerDivergence,
    pub latent_mode: LatentMode,
    pub k: usize,
    pub n: usize,
    /// Inner learning rate.
    pub alpha: f64,
    /// Unroll step; defaults to `alpha`.
    pub unroll_alpha: Option<f64>,
    /// Outer learning rate.
    pub beta: f64,
    /// Scale `beta` by `1/√t`.
    pub lr_decay: bool,
    pub inner_optimizer: InnerOptimizer,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub node_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::BiLevel,
            objective: ScoreObjective::Dsm { sigma: 0.05 },
            lower: LowerDivergence::Kl,
            latent_mode: LatentMode::Sample,
            k: 5,
            n: 5,
            alpha: 1e-3,
            unroll_alpha: None,
            beta: 1e-3,
            lr_decay: false,
            inner_optimizer: InnerOptimizer::Adam,
            batch_size: 100,
            max_iters: 1000,
            seed: 0,
            eval_every: 100,
            node_cap: DEFAULT_NODE_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64, allow_zero: bool| {
            if x.is_finite() && (x > 0.0 || (allow_zero && x == 0.0)) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        positive("alpha", self.alpha, false)?;
        if let Some(a) = self.unroll_alpha {
            positive("unroll_alpha", a, false)?;
        }
        // β = 0 freezes θ, which is a legitimate diagnostic setting
        positive("beta", self.beta, true)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Method::Cd { k: 0, .. } = self.method {
            return Err(Error::Config("CD needs at least one Gibbs sweep".into()));
        }
        self.objective.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn unroll_step(&self) -> f64 {
        self.unroll_alpha.unwrap_or(self.alpha)
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iter: u64,
    pub theta: Vec<Tensor>,
    pub phi: Vec<Tensor>,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
    /// Persistent Gibbs chains for PCD.
    pub chains: Option<Tensor>,
}

impl TrainState {
    pub fn new(theta: Vec<Tensor>, phi: Vec<Tensor>) -> Self {
        TrainState {
            iter: 0,
            opt_theta: Adam::new(&theta),
            opt_phi: Adam::new(&phi),
            theta,
            phi,
            chains: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub test_ll: Option<f64>,
    pub test_fisher: Option<f64>,
    pub posterior_fisher: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub wall_seconds: f64,
    /// Mean training loss over the iterations since the previous row.
    pub upper_loss: f64,
    /// Mean lower loss at `φ⁰` over the same window, for bi-level training.
    pub lower_loss: Option<f64>,
    pub test_ll: Option<f64>,
    pub test_fisher: Option<f64>,
    pub posterior_fisher: Option<f64>,
}

/// Hooks called at every metrics row.
pub trait TrainObserver {
    fn evaluate(&mut self, _state: &TrainState) -> Result<EvalMetrics> {
        Ok(EvalMetrics::default())
    }

    fn record(&mut self, _row: &MetricsRow, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
}

/// A training error together with the last state that passed all checks.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_valid: TrainState,
    pub rows: Vec<MetricsRow>,
}

/// RNG stream ids at or above this value are per-iteration noise; lower ids
/// are per-epoch shuffles.
const NOISE_STREAM_BASE: u64 = 1 << 48;

struct StepLosses {
    upper: f64,
    lower: Option<f64>,
}

pub fn train(
    model: &dyn EnergyModel,
    posterior: Option<&dyn Posterior>,
    data: &Tensor,
    init: TrainState,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> std::result::Result<TrainOutcome, Box<TrainFailure>> {
    let mut rows = Vec::new();
    let fail = |error: Error, state: &TrainState, rows: Vec<MetricsRow>| {
        Box::new(TrainFailure {
            error,
            last_valid: state.clone(),
            rows,
        })
    };
    if let Err(e) = check_train_inputs(model, posterior, data, &init, config) {
        return Err(fail(e, &init, rows));
    }
    let mut batches = match crate::data::BatchIterator::starting_at(data, config.batch_size, config.seed, init.iter) {
        Ok(b) => b,
        Err(e) => return Err(fail(e, &init, rows)),
    };
    let start = Instant::now();
    let mut state = init;
    let (mut upper_sum, mut lower_sum, mut window) = (0.0, 0.0, 0u64);
    while state.iter < config.max_iters {
        let t = state.iter + 1;
        let batch = batches.next_batch();
        let mut next = state.clone();
        let step = train_step(model, posterior, &batch, &mut next, config, t)
            .and_then(|l| {
                if next.theta.iter().chain(&next.phi).all(|p| p.is_finite()) && l.upper.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::Numeric {
                        op: "parameter update".into(),
                        context: String::new(),
                    })
                }
            })
            .map_err(|e| e.with_numeric_context(format!("iteration {t}")));
        let losses = match step {
            Ok(l) => l,
            Err(e) => return Err(fail(e, &state, rows)),
        };
        next.iter = t;
        state = next;
        upper_sum += losses.upper;
        lower_sum += losses.lower.unwrap_or(0.0);
        window += 1;
        if t.is_multiple_of(config.eval_every) || t == config.max_iters {
            let metrics = match observer.evaluate(&state) {
                Ok(m) => m,
                Err(e) => return Err(fail(e, &state, rows)),
            };
            let row = MetricsRow {
                iter: t,
                wall_seconds: start.elapsed().as_secs_f64(),
                upper_loss: upper_sum / window as f64,
                lower_loss: losses.lower.map(|_| lower_sum / window as f64),
                test_ll: metrics.test_ll,
                test_fisher: metrics.test_fisher,
                posterior_fisher: metrics.posterior_fisher,
            };
            if let Err(e) = observer.record(&row, &state) {
                return Err(fail(e, &state, rows));
            }
            rows.push(row);
            (upper_sum, lower_sum, window) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome { state, rows })
}

fn check_train_inputs(
    model: &dyn EnergyModel,
    posterior: Option<&dyn Posterior>,
    data: &Tensor,
    state: &TrainState,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    crate::models::check_rows("training data", data.shape(), model.visible_dim())?;
    model.check_params(&state.theta)?;
    match (&config.method, posterior) {
        (Method::BiLevel, None) => Err(Error::Config("bi-level training needs a posterior".into())),
        (Method::BiLevel, Some(p)) => p.check_params(&state.phi),
        (Method::Marginal, _) if model.as_grbm().is_none() => Err(Error::Unsupported(
            "marginal score matching needs a closed-form free energy".into(),
        )),
        (Method::Cd { .. }, _) if model.as_grbm().is_none() => {
            Err(Error::Unsupported("CD training is implemented for the GRBM only".into()))
        }
        _ => Ok(()),
    }
}

fn train_step(
    model: &dyn EnergyModel,
    posterior: Option<&dyn Posterior>,
    batch: &Tensor,
    state: &mut TrainState,
    config: &TrainConfig,
    t: u64,
) -> Result<StepLosses> {
    let mut rng = rng::stream(config.seed, NOISE_STREAM_BASE + t);
    let beta = if config.lr_decay {
        config.beta / (t as f64).sqrt()
    } else {
        config.beta
    };
    match &config.method {
        Method::BiLevel => {
            let posterior = posterior.expect("checked before training");
            let noise = IterationNoise::draw(&config.objective, posterior, batch, &mut rng);
            let problem = BismProblem {
                setup: BiLevelSetup {
                    model,
                    posterior,
                    objective: &config.objective,
                    mode: config.latent_mode,
                },
                divergence: config.lower,
                batch,
                noise: &noise,
            };
            let losses = inner_update(
                &problem,
                &state.theta,
                &mut state.phi,
                config.k,
                config.alpha,
                config.inner_optimizer,
                &mut state.opt_phi,
            )?;
            let lower = match losses.last() {
                Some(l) => *l,
                None => lower_grad(&problem, &state.theta, &state.phi)?.0,
            };
            let s = surrogate_grad(&problem, &state.theta, &state.phi, config.n, config.unroll_step(), config.node_cap)?;
            state.opt_theta.step(&mut state.theta, &s.grad, beta)?;
            Ok(StepLosses {
                upper: s.upper,
                lower: Some(lower),
            })
        }
        Method::Marginal => {
            let theta = params_to_vars(&state.theta, true);
            let noise = config.objective.draw_noise(batch.rows(), batch.cols(), &mut rng);
            let log_p = |w: &Var| GrbmVars::new(&theta).free_energy(w).neg();
            let loss = config.objective.loss(&log_p, batch, &noise)?;
            let grads: Vec<Tensor> = grad(&loss, &theta, false)?
                .into_iter()
                .map(|v| v.value().clone())
                .collect();
            check_finite_grads(&grads, "marginal")?;
            state.opt_theta.step(&mut state.theta, &grads, beta)?;
            Ok(StepLosses {
                upper: loss.item(),
                lower: None,
            })
        }
        Method::Cd { k, persistent } => {
            let params = GrbmParams::from_tensors(&state.theta)?;
            if *persistent && state.chains.is_none() {
                state.chains = Some(batch.clone());
            }
            let chains = if *persistent { state.chains.as_mut() } else { None };
            let est = crate::samplers::cd_k_grad(&params, batch, *k, &mut rng, chains)?;
            check_finite_grads(&est.grad, "CD")?;
            state.opt_theta.step(&mut state.theta, &est.grad, beta)?;
            Ok(StepLosses {
                upper: est.free_energy_gap,
                lower: None,
            })
        }
    }
}
