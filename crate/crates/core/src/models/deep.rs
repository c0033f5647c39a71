//! Deep EBLVM: an MLP feature net `g1`, an additive coupling shifted by a
//! latent MLP `t`, and a head `||ELU(affine(concat(z + t(h), h)))||²`.

use super::{glorot, EnergyModel, ModelKind};
use crate::autodiff::{Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeepEblvm {
    pub d_v: usize,
    pub d_h: usize,
    pub feature_hidden: Vec<usize>,
    pub coupling_hidden: Vec<usize>,
    pub head_width: usize,
}

impl DeepEblvm {
    /// The desk-scale shape: `g1` with three tanh layers of 128, `t` with one of 64, head width 64.
    pub fn new(d_v: usize, d_h: usize) -> Self {
        DeepEblvm {
            d_v,
            d_h,
            feature_hidden: vec![128, 128, 128],
            coupling_hidden: vec![64],
            head_width: 64,
        }
    }

    fn feature_dims(&self) -> Vec<usize> {
        let mut d = vec![self.d_v];
        d.extend(&self.feature_hidden);
        d.push(self.d_h);
        d
    }

    fn coupling_dims(&self) -> Vec<usize> {
        let mut d = vec![self.d_h];
        d.extend(&self.coupling_hidden);
        d.push(self.d_h);
        d
    }

    fn layer_counts(&self) -> (usize, usize) {
        (self.feature_hidden.len() + 1, self.coupling_hidden.len() + 1)
    }

    /// Splits θ into (g1 layers, t layers, head layer), each as `(W, b)`.
    fn split<'a>(&self, theta: &'a [Var]) -> (Vec<(&'a Var, &'a Var)>, Vec<(&'a Var, &'a Var)>, (&'a Var, &'a Var)) {
        let (nf, nt) = self.layer_counts();
        assert_eq!(theta.len(), 2 * (nf + nt + 1), "deep EBLVM parameter count");
        let pairs: Vec<(&Var, &Var)> = theta.chunks(2).map(|p| (&p[0], &p[1])).collect();
        (pairs[..nf].to_vec(), pairs[nf..nf + nt].to_vec(), pairs[nf + nt])
    }

    /// `g1(v)`, shape `[n, d_h]`.
    pub fn features(&self, theta: &[Var], v: &Var) -> Var {
        mlp(v, &self.split(theta).0)
    }

    /// Energy with the coupling shift replaced by zero.
    pub fn energy_uncoupled(&self, theta: &[Var], v: &Var, h: &Var) -> Var {
        let (g1, _, head) = self.split(theta);
        head_energy(&mlp(v, &g1), h, head)
    }
}

/// Affine layers with tanh between them; the last layer is linear.
pub fn mlp(x: &Var, layers: &[(&Var, &Var)]) -> Var {
    let mut y = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        y = y.matmul(w).add(b);
        if i + 1 < layers.len() {
            y = y.tanh();
        }
    }
    y
}

fn head_energy(y: &Var, h: &Var, (w, b): (&Var, &Var)) -> Var {
    Var::concat(&[y.clone(), h.clone()], 1)
        .matmul(w)
        .add(b)
        .elu()
        .square()
        .sum_axis(1)
}

fn layer_shapes(dims: &[usize], out: &mut Vec<Vec<usize>>) {
    for w in dims.windows(2) {
        out.push(vec![w[0], w[1]]);
        out.push(vec![w[1]]);
    }
}

impl EnergyModel for DeepEblvm {
    fn kind(&self) -> ModelKind {
        ModelKind::Deep
    }

    fn visible_dim(&self) -> usize {
        self.d_v
    }

    fn latent_dim(&self) -> usize {
        self.d_h
    }

    fn param_names(&self) -> Vec<String> {
        let (nf, nt) = self.layer_counts();
        let mut names = Vec::new();
        for i in 0..nf {
            names.push(format!("g1.{i}.W"));
            names.push(format!("g1.{i}.b"));
        }
        for i in 0..nt {
            names.push(format!("t.{i}.W"));
            names.push(format!("t.{i}.b"));
        }
        names.push("g3.W".into());
        names.push("g3.b".into());
        names
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        layer_shapes(&self.feature_dims(), &mut shapes);
        layer_shapes(&self.coupling_dims(), &mut shapes);
        layer_shapes(&[2 * self.d_h, self.head_width], &mut shapes);
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

    fn energy(&self, theta: &[Var], v: &Var, h: &Var) -> Var {
        let (g1, t, head) = self.split(theta);
        let y = mlp(v, &g1).add(&mlp(h, &t));
        head_energy(&y, h, head)
    }
}
