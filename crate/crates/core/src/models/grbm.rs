//! Gaussian restricted Boltzmann machine.
//!
//! `E(v, h) = ||v - b||² / (2σ²) - cᵀh - vᵀWh / σ` with `σ` stored as `log σ`.
//! Latents may be binary or relaxed to `[0, 1]`.

use super::{check_rows, check_shapes, EnergyModel, ModelKind};
use crate::autodiff::{sigmoid, softplus, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grbm {
    pub d_v: usize,
    pub d_h: usize,
}

/// Typed view of GRBM parameters θ = (σ, W, b, c).
#[derive(Clone, Debug, PartialEq)]
pub struct GrbmParams {
    pub log_sigma: f64,
    /// `[d_v, d_h]`
    pub w: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl GrbmParams {
    pub fn new(sigma: f64, w: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        let p = GrbmParams {
            log_sigma: sigma.ln(),
            w,
            b,
            c,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_tensors(theta: &[Tensor]) -> Result<Self> {
        if theta.len() != 4 {
            return Err(Error::shape(format!("GRBM expects 4 tensors, got {}", theta.len())));
        }
        let p = GrbmParams {
            log_sigma: theta[0].item(),
            w: theta[1].clone(),
            b: theta[2].clone(),
            c: theta[3].clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::scalar(self.log_sigma),
            self.w.clone(),
            self.b.clone(),
            self.c.clone(),
        ]
    }

    fn validate(&self) -> Result<()> {
        let model = self.model();
        check_shapes("GRBM parameters", &model.param_shapes(), &self.to_tensors())
    }

    pub fn model(&self) -> Grbm {
        Grbm {
            d_v: self.b.numel(),
            d_h: self.c.numel(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Pre-activations `c + Wᵀv / σ` of one visible vector.
    fn hidden_logits(&self, v: &[f64]) -> Vec<f64> {
        let Grbm { d_v, d_h } = self.model();
        let inv_s = 1.0 / self.sigma();
        (0..d_h)
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..d_v {
                    acc += v[i] * self.w.data()[i * d_h + j];
                }
                self.c.data()[j] + acc * inv_s
            })
            .collect()
    }

    /// Energy of a single `(v, h)` pair, plain arithmetic.
    pub fn energy_value(&self, v: &[f64], h: &[f64]) -> f64 {
        let Grbm { d_v, d_h } = self.model();
        let s = self.sigma();
        let quad: f64 = v
            .iter()
            .zip(self.b.data())
            .map(|(x, b)| (x - b) * (x - b))
            .sum::<f64>()
            / (2.0 * s * s);
        let lin: f64 = self.c.data().iter().zip(h).map(|(c, h)| c * h).sum();
        let mut bil = 0.0;
        for i in 0..d_v {
            for j in 0..d_h {
                bil += v[i] * self.w.data()[i * d_h + j] * h[j];
            }
        }
        quad - lin - bil / s
    }

    /// Free energy `-log Σ_h exp(-E(v, h))` of a single vector, closed form.
    pub fn free_energy_value(&self, v: &[f64]) -> f64 {
        let s = self.sigma();
        let quad: f64 = v
            .iter()
            .zip(self.b.data())
            .map(|(x, b)| (x - b) * (x - b))
            .sum::<f64>()
            / (2.0 * s * s);
        quad - self.hidden_logits(v).into_iter().map(softplus).sum::<f64>()
    }

    /// Marginal score `∇_v log p̃(v)` of a single vector.
    pub fn score_value(&self, v: &[f64]) -> Vec<f64> {
        let Grbm { d_v, d_h } = self.model();
        let s = self.sigma();
        let p: Vec<f64> = self.hidden_logits(v).into_iter().map(sigmoid).collect();
        (0..d_v)
            .map(|i| {
                let wp: f64 = (0..d_h).map(|j| self.w.data()[i * d_h + j] * p[j]).sum();
                -(v[i] - self.b.data()[i]) / (s * s) + wp / s
            })
            .collect()
    }

    /// Exact posterior `p(h_j = 1 | v)` for each row of `v: [n, d_v]`.
    pub fn true_posterior(&self, v: &Tensor) -> Result<Tensor> {
        let Grbm { d_v, d_h } = self.model();
        check_rows("visible batch", v.shape(), d_v)?;
        let n = v.rows();
        let mut out = Vec::with_capacity(n * d_h);
        for r in 0..n {
            out.extend(self.hidden_logits(v.row(r)).into_iter().map(sigmoid));
        }
        Ok(Tensor::matrix(n, d_h, out))
    }

    /// Unnormalized log marginal mass of each binary latent state, in
    /// [`binary_states`] order, without the `(d_v/2)·log(2πσ²)` constant:
    /// `cᵀh + (||b + σWh||² - ||b||²) / (2σ²)`.
    pub fn latent_log_weights(&self) -> Vec<f64> {
        let Grbm { d_v, d_h } = self.model();
        let s = self.sigma();
        let b = self.b.data();
        let b_sq: f64 = b.iter().map(|x| x * x).sum();
        (0..1usize << d_h)
            .map(|k| {
                let bit = |j: usize| ((k >> j) & 1) as f64;
                let lin: f64 = (0..d_h).map(|j| self.c.data()[j] * bit(j)).sum();
                let m_sq: f64 = (0..d_v)
                    .map(|i| {
                        let wh: f64 = (0..d_h).map(|j| self.w.data()[i * d_h + j] * bit(j)).sum();
                        let m = b[i] + s * wh;
                        m * m
                    })
                    .sum();
                lin + (m_sq - b_sq) / (2.0 * s * s)
            })
            .collect()
    }

    pub fn conditionals(&self) -> GrbmConditionals<'_> {
        GrbmConditionals { params: self }
    }

    /// Posterior parameters `(A, a)` of a Bernoulli posterior that equals the
    /// exact GRBM posterior: `A = Wᵀ / σ`, `a = c`.
    pub fn exact_posterior_params(&self) -> Vec<Tensor> {
        vec![self.w.transpose().scale(1.0 / self.sigma()), self.c.clone()]
    }
}

/// The two block conditionals of a GRBM.
pub struct GrbmConditionals<'a> {
    params: &'a GrbmParams,
}

impl GrbmConditionals<'_> {
    /// Bernoulli probabilities of `h | v`, shape `[n, d_h]`.
    pub fn hidden_probs(&self, v: &Tensor) -> Result<Tensor> {
        self.params.true_posterior(v)
    }

    /// Mean `b + σWh` of `v | h` for each row of `h: [n, d_h]`; the covariance is `σ²I`.
    pub fn visible_mean(&self, h: &Tensor) -> Result<Tensor> {
        let Grbm { d_v, d_h } = self.params.model();
        check_rows("latent batch", h.shape(), d_h)?;
        let s = self.params.sigma();
        let wh = h.matmul_t(&self.params.w, false, true);
        let n = h.rows();
        let mut out = wh.into_data();
        for r in 0..n {
            for i in 0..d_v {
                out[r * d_v + i] = self.params.b.data()[i] + s * out[r * d_v + i];
            }
        }
        Ok(Tensor::matrix(n, d_v, out))
    }

    pub fn visible_variance(&self) -> f64 {
        let s = self.params.sigma();
        s * s
    }

    pub fn sample_hidden(&self, v: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let p = self.hidden_probs(v)?;
        let data = p
            .data()
            .iter()
            .map(|&q| if rng::uniform(rng) < q { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(p.shape(), data))
    }

    pub fn sample_visible(&self, h: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let mean = self.visible_mean(h)?;
        let s = self.params.sigma();
        let data = mean.data().iter().map(|m| m + s * rng::normal(rng)).collect();
        Ok(Tensor::from_vec(mean.shape(), data))
    }
}

/// GRBM parameters as graph nodes.
pub struct GrbmVars<'a> {
    pub log_sigma: &'a Var,
    pub w: &'a Var,
    pub b: &'a Var,
    pub c: &'a Var,
}

impl<'a> GrbmVars<'a> {
    pub fn new(theta: &'a [Var]) -> Self {
        assert_eq!(theta.len(), 4, "GRBM expects 4 parameter nodes");
        GrbmVars {
            log_sigma: &theta[0],
            w: &theta[1],
            b: &theta[2],
            c: &theta[3],
        }
    }

    fn inv_sigma(&self) -> Var {
        self.log_sigma.neg().exp()
    }

    fn quadratic(&self, v: &Var) -> Var {
        let inv_s = self.inv_sigma();
        v.sub(self.b)
            .square()
            .sum_axis(1)
            .mul(&inv_s.square())
            .scale(0.5)
    }

    pub fn energy(&self, v: &Var, h: &Var) -> Var {
        let inv_s = self.inv_sigma();
        let lin = h.mul(self.c).sum_axis(1);
        let bil = v.matmul(self.w).mul(h).sum_axis(1).mul(&inv_s);
        self.quadratic(v).sub(&lin).sub(&bil)
    }

    /// `c + vᵀW / σ` for each row.
    pub fn hidden_logits(&self, v: &Var) -> Var {
        v.matmul(self.w).mul(&self.inv_sigma()).add(self.c)
    }

    pub fn free_energy(&self, v: &Var) -> Var {
        self.quadratic(v)
            .sub(&self.hidden_logits(v).softplus().sum_axis(1))
    }
}

impl Grbm {
    pub fn new(d_v: usize, d_h: usize) -> Self {
        Grbm { d_v, d_h }
    }

    /// Energy of one `(v, h)` pair as a graph value.
    pub fn energy_of(&self, v: &Tensor, h: &Tensor, params: &GrbmParams) -> Result<f64> {
        if v.numel() != self.d_v || h.numel() != self.d_h || params.model() != *self {
            return Err(Error::shape(format!(
                "GRBM({}, {}) got v {:?}, h {:?}",
                self.d_v,
                self.d_h,
                v.shape(),
                h.shape()
            )));
        }
        Ok(params.energy_value(v.data(), h.data()))
    }
}

impl EnergyModel for Grbm {
    fn kind(&self) -> ModelKind {
        ModelKind::Grbm
    }

    fn visible_dim(&self) -> usize {
        self.d_v
    }

    fn latent_dim(&self) -> usize {
        self.d_h
    }

    fn param_names(&self) -> Vec<String> {
        ["log_sigma", "W", "b", "c"].iter().map(|s| s.to_string()).collect()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![], vec![self.d_v, self.d_h], vec![self.d_v], vec![self.d_h]]
    }

    fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        let w = rng::normal_tensor(&[self.d_v, self.d_h], rng).scale(0.1);
        vec![
            Tensor::scalar(0.0),
            w,
            Tensor::zeros(&[self.d_v]),
            Tensor::zeros(&[self.d_h]),
        ]
    }

    fn energy(&self, theta: &[Var], v: &Var, h: &Var) -> Var {
        GrbmVars::new(theta).energy(v, h)
    }

    fn free_energy(&self, theta: &[Var], v: &Var) -> Option<Var> {
        Some(GrbmVars::new(theta).free_energy(v))
    }

    fn as_grbm(&self) -> Option<&Grbm> {
        Some(self)
    }
}

/// All binary latent configurations `{0,1}^d_h` as rows `[2^d_h, d_h]`;
/// bit `j` of the row index gives `h_j`.
pub fn binary_states(d_h: usize) -> Tensor {
    let s = 1usize << d_h;
    let mut out = Vec::with_capacity(s * d_h);
    for k in 0..s {
        for j in 0..d_h {
            out.push(((k >> j) & 1) as f64);
        }
    }
    Tensor::matrix(s, d_h, out)
}
