//! Amortized variational posteriors `q(h | v; φ)`.
//!
//! Both families are reparameterized: a draw is a deterministic function of
//! `(φ, v)` and base noise produced by [`Posterior::draw_noise`], so one noise
//! tensor can be shared between every evaluation in an iteration.

use crate::autodiff::{sigmoid, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{check_rows, check_shapes, glorot};
use crate::rng::{self, Rng};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorKind {
    Bernoulli,
    Gaussian,
}

impl PosteriorKind {
    pub fn tag(self) -> &'static str {
        match self {
            PosteriorKind::Bernoulli => "bernoulli",
            PosteriorKind::Gaussian => "gaussian",
        }
    }
}

pub trait Posterior {
    fn kind(&self) -> PosteriorKind;
    fn visible_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    fn init(&self, rng: &mut Rng) -> Vec<Tensor>;

    /// Base noise for `n` reparameterized draws, shape `[n, d_h]`.
    fn draw_noise(&self, n: usize, rng: &mut Rng) -> Tensor;

    /// Reparameterized draw for each row of `v`, shape `[n, d_h]`.
    fn sample(&self, phi: &[Var], v: &Var, noise: &Tensor) -> Var;

    /// `log q(h | v)` per row, shape `[n]`.
    fn log_density(&self, phi: &[Var], h: &Var, v: &Var) -> Var;

    /// `∇_h log q(h | v)` per row, where the family has a density in `h`.
    fn score_h(&self, _phi: &[Var], _h: &Var, _v: &Var) -> Result<Var> {
        Err(Error::Unsupported(format!(
            "{} posterior has no score in h",
            self.kind().tag()
        )))
    }

    /// Whether the support is `{0,1}^d_h` and can be enumerated.
    fn is_discrete(&self) -> bool {
        false
    }

    fn check_params(&self, phi: &[Tensor]) -> Result<()> {
        check_shapes("posterior parameters", &self.param_shapes(), phi)
    }
}

/// Factorized Bernoulli `q(h_j = 1 | v) = sigmoid(A v + a)_j`, sampled with
/// the binary Concrete relaxation at temperature `τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliPosterior {
    pub d_v: usize,
    pub d_h: usize,
    pub temperature: f64,
}

impl BernoulliPosterior {
    pub fn new(d_v: usize, d_h: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(BernoulliPosterior {
            d_v,
            d_h,
            temperature,
        })
    }

    /// `A v + a` per row, shape `[n, d_h]`.
    pub fn logits(&self, phi: &[Var], v: &Var) -> Var {
        v.matmul_t(&phi[0], false, true).add(&phi[1])
    }
}

impl Posterior for BernoulliPosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Bernoulli
    }

    fn visible_dim(&self) -> usize {
        self.d_v
    }

    fn latent_dim(&self) -> usize {
        self.d_h
    }

    fn param_names(&self) -> Vec<String> {
        vec!["A".into(), "a".into()]
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.d_h, self.d_v], vec![self.d_h]]
    }

    fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        vec![glorot(self.d_h, self.d_v, rng), Tensor::zeros(&[self.d_h])]
    }

    fn draw_noise(&self, n: usize, rng: &mut Rng) -> Tensor {
        rng::logistic_tensor(&[n, self.d_h], rng)
    }

    fn sample(&self, phi: &[Var], v: &Var, noise: &Tensor) -> Var {
        concrete_from_logits(&self.logits(phi, v), self.temperature, noise)
    }

    fn log_density(&self, phi: &[Var], h: &Var, v: &Var) -> Var {
        multilinear_log_mass(h, &self.logits(phi, v))
    }

    fn is_discrete(&self) -> bool {
        true
    }
}

/// `Σ_j h_j l_j - softplus(l_j)`: the Bernoulli log-mass with logits `l`,
/// extended multilinearly to `h ∈ [0,1]^d_h`.
fn multilinear_log_mass(h: &Var, logits: &Var) -> Var {
    h.mul(logits).sub(&logits.softplus()).sum_axis(1)
}

/// Binary Concrete draw `sigmoid((l + L) / τ)` with logistic noise `L`.
pub fn concrete_from_logits(logits: &Var, temperature: f64, noise: &Tensor) -> Var {
    logits
        .add(&Var::constant(noise.clone()))
        .scale(1.0 / temperature)
        .sigmoid()
}

/// `sigmoid(A v + a)` for each row of `v: [n, d_v]`.
pub fn bernoulli_probs(v: &Tensor, phi: &[Tensor]) -> Result<Tensor> {
    let post = bernoulli_layout(v, phi)?;
    let l = v.matmul_t(&phi[0], false, true);
    let n = v.rows();
    let mut out = l.into_data();
    for r in 0..n {
        for j in 0..post.d_h {
            out[r * post.d_h + j] = sigmoid(out[r * post.d_h + j] + phi[1].data()[j]);
        }
    }
    Ok(Tensor::matrix(n, post.d_h, out))
}

fn bernoulli_layout(v: &Tensor, phi: &[Tensor]) -> Result<BernoulliPosterior> {
    if phi.len() != 2 || phi[0].rank() != 2 {
        return Err(Error::shape("Bernoulli posterior expects (A [d_h, d_v], a [d_h])"));
    }
    let post = BernoulliPosterior {
        d_v: phi[0].cols(),
        d_h: phi[0].rows(),
        temperature: DEFAULT_TEMPERATURE,
    };
    post.check_params(phi)?;
    check_rows("visible batch", v.shape(), post.d_v)?;
    Ok(post)
}

fn check_open_unit(p: &Tensor) -> Result<()> {
    if let Some(x) = p.data().iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
        return Err(Error::Domain(format!(
            "Bernoulli probability {x} is not strictly inside (0, 1)"
        )));
    }
    Ok(())
}

/// Binary Concrete relaxation of Bernoulli probabilities; differentiable
/// through `probs`.
pub fn sample_concrete(probs: &Var, temperature: f64, rng: &mut Rng) -> Result<Var> {
    check_open_unit(probs.value())?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = probs.ln().sub(&probs.neg().add_scalar(1.0).ln());
    let noise = rng::logistic_tensor(probs.shape(), rng);
    Ok(concrete_from_logits(&logits, temperature, &noise))
}

/// `Σ_j h_j log p_j + (1 - h_j) log(1 - p_j)` per row with `p = bernoulli_probs(v, φ)`.
pub fn bernoulli_log_density(h: &Tensor, v: &Tensor, phi: &[Tensor]) -> Result<Tensor> {
    let p = bernoulli_probs(v, phi)?;
    check_rows("latent batch", h.shape(), p.cols())?;
    if h.rows() != p.rows() {
        return Err(Error::shape(format!(
            "{} latent rows for {} visible rows",
            h.rows(),
            p.rows()
        )));
    }
    check_open_unit(&p)?;
    let n = p.rows();
    let out = (0..n)
        .map(|r| {
            h.row(r)
                .iter()
                .zip(p.row(r))
                .map(|(h, p)| h * p.ln() + (1.0 - h) * (-p).ln_1p())
                .sum()
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Diagonal Gaussian `N(μ(v), diag(exp(2ρ(v))))` with an MLP trunk and two affine heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaussianPosterior {
    pub d_v: usize,
    pub d_h: usize,
    pub hidden: Vec<usize>,
}

impl GaussianPosterior {
    /// Three tanh layers of width 128.
    pub fn new(d_v: usize, d_h: usize) -> Self {
        GaussianPosterior {
            d_v,
            d_h,
            hidden: vec![128, 128, 128],
        }
    }

    /// `(μ, ρ)` per row, each `[n, d_h]`.
    pub fn forward(&self, phi: &[Var], v: &Var) -> (Var, Var) {
        let k = self.hidden.len();
        assert_eq!(phi.len(), 2 * k + 4, "Gaussian posterior parameter count");
        let mut x = v.clone();
        for l in 0..k {
            x = x.matmul(&phi[2 * l]).add(&phi[2 * l + 1]).tanh();
        }
        let mu = x.matmul(&phi[2 * k]).add(&phi[2 * k + 1]);
        let rho = x.matmul(&phi[2 * k + 2]).add(&phi[2 * k + 3]);
        (mu, rho)
    }

    fn trunk_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.d_v)
    }
}

impl Posterior for GaussianPosterior {
    fn kind(&self) -> PosteriorKind {
        PosteriorKind::Gaussian
    }

    fn visible_dim(&self) -> usize {
        self.d_v
    }

    fn latent_dim(&self) -> usize {
        self.d_h
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.hidden.len() {
            names.push(format!("trunk.{l}.W"));
            names.push(format!("trunk.{l}.b"));
        }
        for head in ["mu", "rho"] {
            names.push(format!("{head}.W"));
            names.push(format!("{head}.b"));
        }
        names
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.d_v;
        for &w in &self.hidden {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![w]);
            fan_in = w;
        }
        for _ in 0..2 {
            shapes.push(vec![self.trunk_width(), self.d_h]);
            shapes.push(vec![self.d_h]);
        }
        shapes
    }

    fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.param_shapes()
            .iter()
            .map(|s| match s.as_slice() {
                [fan_in, fan_out] => glorot(*fan_in, *fan_out, rng),
                _ => Tensor::zeros(s),
            })
            .collect()
    }

    fn draw_noise(&self, n: usize, rng: &mut Rng) -> Tensor {
        rng::normal_tensor(&[n, self.d_h], rng)
    }

    fn sample(&self, phi: &[Var], v: &Var, noise: &Tensor) -> Var {
        let (mu, rho) = self.forward(phi, v);
        mu.add(&rho.exp().mul(&Var::constant(noise.clone())))
    }

    fn log_density(&self, phi: &[Var], h: &Var, v: &Var) -> Var {
        let (mu, rho) = self.forward(phi, v);
        let z = h.sub(&mu).mul(&rho.neg().exp());
        z.square()
            .scale(-0.5)
            .sub(&rho)
            .sum_axis(1)
            .add_scalar(-(self.d_h as f64) * HALF_LN_2PI)
    }

    fn score_h(&self, phi: &[Var], h: &Var, v: &Var) -> Result<Var> {
        let (mu, rho) = self.forward(phi, v);
        Ok(h.sub(&mu).mul(&rho.scale(-2.0).exp()).neg())
    }
}

/// Reparameterized Gaussian draw for each row of `v`.
pub fn gaussian_sample(
    post: &GaussianPosterior,
    v: &Tensor,
    phi: &[Var],
    rng: &mut Rng,
) -> Result<Var> {
    check_rows("visible batch", v.shape(), post.d_v)?;
    let noise = post.draw_noise(v.rows(), rng);
    Ok(post.sample(phi, &Var::constant(v.clone()), &noise))
}

/// `∇_h log q(h | v) = -(h - μ(v)) / exp(2ρ(v))` per row.
pub fn gaussian_score_h(
    post: &GaussianPosterior,
    h: &Tensor,
    v: &Tensor,
    phi: &[Tensor],
) -> Result<Tensor> {
    post.check_params(phi)?;
    check_rows("visible batch", v.shape(), post.d_v)?;
    check_rows("latent batch", h.shape(), post.d_h)?;
    if h.rows() != v.rows() {
        return Err(Error::shape("latent and visible row counts differ"));
    }
    let phi: Vec<Var> = phi.iter().cloned().map(Var::constant).collect();
    let s = post.score_h(&phi, &Var::constant(h.clone()), &Var::constant(v.clone()))?;
    Ok(s.value().clone())
}
