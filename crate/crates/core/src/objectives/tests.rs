use super::*;
use crate::autodiff::{grad2, grad_values};
use crate::models::{params_to_vars, Grbm, GrbmParams, GrbmVars, ModelKind};
use crate::posteriors::{BernoulliPosterior, GaussianPosterior};

fn std_normal(w: &Var) -> Var {
    w.square().sum_axis(1).scale(-0.5)
}

fn random_grbm(d_v: usize, d_h: usize, seed: u64) -> GrbmParams {
    let mut r = rng::seeded(seed);
    GrbmParams::new(
        0.6 + 0.5 * rng::uniform(&mut r),
        rng::normal_tensor(&[d_v, d_h], &mut r),
        rng::normal_tensor(&[d_v], &mut r).scale(0.5),
        rng::normal_tensor(&[d_h], &mut r).scale(0.5),
    )
    .unwrap()
}

fn marginal(theta: &[Var]) -> impl Fn(&Var) -> Var + '_ {
    move |w: &Var| GrbmVars::new(theta).free_energy(w).neg()
}

/// All `2^d` sign patterns, each broadcast to `n` rows.
fn all_sign_directions(n: usize, d: usize) -> Vec<Tensor> {
    (0..1usize << d)
        .map(|k| {
            let row: Vec<f64> = (0..d).map(|j| if (k >> j) & 1 == 1 { 1.0 } else { -1.0 }).collect();
            Tensor::from_vec(&[n, d], row.repeat(n))
        })
        .collect()
}

#[test]
fn sm_standard_normal() {
    let origin = Tensor::zeros(&[1, 2]);
    assert!((sm_loss(&std_normal, &origin).unwrap().item() + 2.0).abs() < 1e-12);
    let batch = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.5]);
    let per = ScoreObjective::Sm
        .per_point(&std_normal, &batch, &ObjectiveNoise::None)
        .unwrap();
    for r in 0..2 {
        let sq: f64 = batch.row(r).iter().map(|x| x * x).sum();
        assert!((per.value().data()[r] - (0.5 * sq - 3.0)).abs() < 1e-12);
    }
}

#[test]
fn sm_quadratic_minimized_at_batch_mean() {
    let batch = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, -1.0, 0.0, 4.0]);
    let mean = Tensor::vector(vec![1.0, 1.0]);
    let at = |m: &Tensor| {
        let m = Var::param(m.clone());
        let mm = m.clone();
        let f = move |w: &Var| w.sub(&mm).square().sum_axis(1).scale(-0.5);
        let loss = sm_loss(&f, &batch).unwrap();
        let g = grad_values(&loss, &[m]).unwrap().remove(0);
        (loss.item(), g)
    };
    let (l0, g0) = at(&mean);
    assert!(g0.norm() < 1e-12);
    for delta in [[0.1, 0.0], [0.0, -0.3], [0.2, 0.2]] {
        let (l1, _) = at(&mean.add(&Tensor::vector(delta.to_vec())));
        assert!(l1 > l0);
    }
}

#[test]
fn sm_dimension_limit() {
    let batch = Tensor::zeros(&[1, HESSIAN_DIM_LIMIT + 1]);
    assert!(matches!(sm_loss(&std_normal, &batch), Err(Error::Size { .. })));
}

#[test]
fn full_rademacher_set_reproduces_exact_trace() {
    for d in 1..=4 {
        let p = random_grbm(d, 3, 10 + d as u64);
        let theta = params_to_vars(&p.to_tensors(), false);
        let f = marginal(&theta);
        let batch = rng::normal_tensor(&[5, d], &mut rng::seeded(d as u64));
        let sm = ScoreObjective::Sm
            .per_point(&f, &batch, &ObjectiveNoise::None)
            .unwrap();
        let dirs = ObjectiveNoise::Directions(all_sign_directions(5, d));
        let ssm = ScoreObjective::Ssm { directions: 1 << d }
            .per_point(&f, &batch, &dirs)
            .unwrap();
        assert!(sm.value().max_abs_diff(ssm.value()) < 1e-10, "d={d}");
    }
}

#[test]
fn ssm_basis_direction_gives_hessian_diagonal() {
    let p = random_grbm(3, 2, 20);
    let theta = params_to_vars(&p.to_tensors(), false);
    let f = marginal(&theta);
    let x = Tensor::matrix(1, 3, vec![0.2, -0.4, 0.9]);
    let w = Var::param(x.clone());
    let hess = grad2(&f(&w).sum(), &w).unwrap();
    let s = p.score_value(x.data());
    let half: f64 = 0.5 * s.iter().map(|v| v * v).sum::<f64>();
    for i in 0..3 {
        let mut e = vec![0.0; 3];
        e[i] = 1.0;
        let dirs = ObjectiveNoise::Directions(vec![Tensor::matrix(1, 3, e)]);
        let v = ScoreObjective::Ssm { directions: 1 }
            .per_point(&f, &x, &dirs)
            .unwrap()
            .item();
        assert!((v - half - hess.get2(i, i)).abs() < 1e-10);
    }
}

#[test]
fn ssm_is_deterministic_under_seed() {
    let batch = rng::normal_tensor(&[4, 3], &mut rng::seeded(1));
    let a = ssm_loss(&std_normal, &batch, 2, &mut rng::seeded(5)).unwrap().item();
    let b = ssm_loss(&std_normal, &batch, 2, &mut rng::seeded(5)).unwrap().item();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(ssm_loss(&std_normal, &batch, 0, &mut rng::seeded(5)).is_err());
}

#[test]
fn dsm_examples() {
    let mut r = rng::seeded(6);
    let batch = rng::normal_tensor(&[6, 2], &mut r);
    assert!(matches!(dsm_loss(&std_normal, &batch, 0.0, &mut r), Err(Error::Domain(_))));
    assert!(matches!(dsm_loss(&std_normal, &batch, -1.0, &mut r), Err(Error::Domain(_))));
    for _ in 0..10 {
        assert!(dsm_loss(&std_normal, &batch, 0.3, &mut r).unwrap().item() >= 0.0);
    }

    // The regression target is the score of N(ṽ | v, σ²I).
    let sigma = 0.7;
    let obj = ScoreObjective::Dsm { sigma };
    let noise = obj.draw_noise(6, 2, &mut r);
    let pts = obj.eval_points(&batch, &noise).unwrap();
    let ObjectiveNoise::Perturbation { eps, .. } = &noise else {
        unreachable!()
    };
    let gauss_score = batch.sub(&pts).scale(1.0 / (sigma * sigma));
    assert!(gauss_score.max_abs_diff(&eps.scale(-1.0 / sigma)) < 1e-12);

    // A model equal to the perturbation kernel around its single data point.
    let v0 = Tensor::vector(vec![0.5, -1.5]);
    let single = Tensor::from_vec(&[1, 2], v0.data().to_vec());
    let kernel = |w: &Var| {
        w.sub(&Var::constant(v0.clone()))
            .square()
            .sum_axis(1)
            .scale(-0.5 / (sigma * sigma))
    };
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let many = single.repeat_rows(n);
    let noise = obj.draw_noise(n, 2, &mut r);
    for x in obj.per_point(&kernel, &many, &noise).unwrap().value().data() {
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
    assert!(mean.abs() <= 2.0 * se + 1e-12);
}

#[test]
fn mdsm_examples() {
    let mut r = rng::seeded(7);
    let batch = rng::normal_tensor(&[8, 3], &mut r);
    let point = NoisePrior::point(0.4).unwrap();
    let a = mdsm_loss(&std_normal, &batch, &point, 0.4, &mut rng::seeded(3)).unwrap();
    let b = dsm_loss(&std_normal, &batch, 0.4, &mut rng::seeded(3)).unwrap();
    assert_eq!(a.item().to_bits(), b.item().to_bits());

    let prior = NoisePrior::geometric(0.05, 2.0, 10).unwrap();
    assert_eq!(prior.levels().len(), 10);
    assert!((prior.levels()[9] - 2.0).abs() < 1e-12);
    for _ in 0..10 {
        assert!(mdsm_loss(&std_normal, &batch, &prior, 0.1, &mut r).unwrap().item() >= 0.0);
    }
    assert!(matches!(NoisePrior::new(vec![], vec![]), Err(Error::Config(_))));
    assert!(matches!(NoisePrior::geometric(0.1, 1.0, 0), Err(Error::Config(_))));
    assert!(NoisePrior::new(vec![0.1, 1.0], vec![0.5, 0.6]).is_err());
}

#[test]
fn mdsm_matches_stratified_recomputation() {
    let prior = NoisePrior::new(vec![0.1, 1.0], vec![0.3, 0.7]).unwrap();
    let sigma0 = 0.2;
    let obj = ScoreObjective::Mdsm {
        prior: prior.clone(),
        sigma0,
    };
    let mut r = rng::seeded(8);
    let per_level = 50;
    let batch = rng::normal_tensor(&[2 * per_level, 2], &mut r);
    let eps = rng::normal_tensor(&[2 * per_level, 2], &mut r);
    let sigmas: Vec<f64> = (0..2 * per_level).map(|i| if i < per_level { 0.1 } else { 1.0 }).collect();
    let noise = ObjectiveNoise::Perturbation {
        eps: eps.clone(),
        sigmas: sigmas.clone(),
    };
    let per = obj.per_point(&std_normal, &batch, &noise).unwrap();
    // standard normal score at ṽ is -ṽ; target is -σ ε / σ₀²
    let level_mean = |lo: usize, s: f64| -> f64 {
        (lo..lo + per_level)
            .map(|i| {
                (0..2)
                    .map(|j| {
                        let vt = batch.get2(i, j) + s * eps.get2(i, j);
                        let diff = -vt + s * eps.get2(i, j) / (sigma0 * sigma0);
                        diff * diff
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / per_level as f64
    };
    let lo_mean = (0..per_level).map(|i| per.value().data()[i]).sum::<f64>() / per_level as f64;
    let hi_mean = (per_level..2 * per_level).map(|i| per.value().data()[i]).sum::<f64>() / per_level as f64;
    assert!((lo_mean - level_mean(0, 0.1)).abs() < 1e-10);
    assert!((hi_mean - level_mean(per_level, 1.0)).abs() < 1e-10);
    let mixture = 0.3 * lo_mean + 0.7 * hi_mean;
    let expect = 0.3 * level_mean(0, 0.1) + 0.7 * level_mean(per_level, 1.0);
    assert!((mixture - expect).abs() < 1e-10);
}

fn objectives() -> Vec<ScoreObjective> {
    vec![
        ScoreObjective::Sm,
        ScoreObjective::Ssm { directions: 2 },
        ScoreObjective::Dsm { sigma: 0.3 },
        ScoreObjective::Mdsm {
            prior: NoisePrior::geometric(0.1, 1.0, 4).unwrap(),
            sigma0: 0.1,
        },
    ]
}

#[test]
fn upper_loss_reduces_to_marginal_without_coupling() {
    let mut p = random_grbm(2, 3, 30);
    p.w = Tensor::zeros(&[2, 3]);
    let model = Grbm::new(2, 3);
    let post = BernoulliPosterior::new(2, 3, 0.1).unwrap();
    let theta = params_to_vars(&p.to_tensors(), false);
    let mut phi_t = post.init(&mut rng::seeded(1));
    phi_t[0] = Tensor::zeros(&[3, 2]);
    let phi = params_to_vars(&phi_t, false);
    let batch = rng::normal_tensor(&[5, 2], &mut rng::seeded(2));
    for obj in objectives() {
        let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(3));
        let m = obj.loss(&marginal(&theta), &batch, &noise.objective).unwrap().item();
        for mode in [LatentMode::Sample, LatentMode::Enumerate] {
            let setup = BiLevelSetup {
                model: &model,
                posterior: &post,
                objective: &obj,
                mode,
            };
            let u = setup.upper_loss(&theta, &phi, &batch, &noise).unwrap().item();
            assert!((u - m).abs() < 1e-10, "{} {mode:?}: {u} vs {m}", obj.name());
        }
    }
}

#[test]
fn upper_loss_with_exact_posterior_equals_marginal_loss() {
    for seed in 0..5 {
        let p = random_grbm(3, 4, 40 + seed);
        let model = Grbm::new(3, 4);
        let post = BernoulliPosterior::new(3, 4, 0.1).unwrap();
        let theta = params_to_vars(&p.to_tensors(), false);
        let phi = params_to_vars(&p.exact_posterior_params(), false);
        let batch = rng::normal_tensor(&[6, 3], &mut rng::seeded(seed));
        for obj in objectives() {
            let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(9 + seed));
            let setup = BiLevelSetup {
                model: &model,
                posterior: &post,
                objective: &obj,
                mode: LatentMode::Enumerate,
            };
            let u = setup.upper_loss(&theta, &phi, &batch, &noise).unwrap().item();
            let m = obj.loss(&marginal(&theta), &batch, &noise.objective).unwrap().item();
            assert!((u - m).abs() < 1e-8, "{}: {u} vs {m}", obj.name());
        }
    }
}

#[test]
fn sample_mode_is_unbiased_for_enumeration() {
    let p = random_grbm(2, 2, 50);
    let model = Grbm::new(2, 2);
    // near-zero temperature so relaxed draws sit on the vertices
    let post = BernoulliPosterior::new(2, 2, 1e-4).unwrap();
    let theta = params_to_vars(&p.to_tensors(), false);
    let phi = params_to_vars(&post.init(&mut rng::seeded(2)), false);
    let batch = Tensor::matrix(1, 2, vec![0.3, -0.8]);
    let obj = ScoreObjective::Sm;
    let mk = |mode| BiLevelSetup {
        model: &model,
        posterior: &post,
        objective: &obj,
        mode,
    };
    let mut r = rng::seeded(4);
    let exact = mk(LatentMode::Enumerate)
        .upper_loss(&theta, &phi, &batch, &IterationNoise::draw(&obj, &post, &batch, &mut r))
        .unwrap()
        .item();
    let n = 10_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let noise = IterationNoise::draw(&obj, &post, &batch, &mut r);
        let x = mk(LatentMode::Sample)
            .upper_loss(&theta, &phi, &batch, &noise)
            .unwrap()
            .item();
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
}

fn fd_check(f: &dyn Fn(&[Tensor]) -> f64, params: &[Tensor], analytic: &[Tensor], tol: f64) {
    let eps = 1e-5;
    for (k, t) in params.iter().enumerate() {
        let mut fd = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut a = params.to_vec();
            let mut b = params.to_vec();
            a[k].data_mut()[i] += eps;
            b[k].data_mut()[i] -= eps;
            fd[i] = (f(&a) - f(&b)) / (2.0 * eps);
        }
        let fd = Tensor::from_vec(t.shape(), fd);
        let err = analytic[k].sub(&fd).norm() / fd.norm().max(1e-8);
        assert!(err < tol, "tensor {k}: rel err {err}");
    }
}

#[test]
fn upper_loss_gradients_match_finite_differences() {
    let p = random_grbm(2, 2, 60);
    let model = Grbm::new(2, 2);
    let post = BernoulliPosterior::new(2, 2, 0.1).unwrap();
    let theta0 = p.to_tensors();
    let phi0 = post.init(&mut rng::seeded(5));
    let batch = rng::normal_tensor(&[4, 2], &mut rng::seeded(6));
    for obj in objectives() {
        let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(7));
        let setup = BiLevelSetup {
            model: &model,
            posterior: &post,
            objective: &obj,
            mode: LatentMode::Enumerate,
        };
        let value = |th: &[Tensor], ph: &[Tensor]| {
            setup
                .upper_loss(&params_to_vars(th, false), &params_to_vars(ph, false), &batch, &noise)
                .unwrap()
                .item()
        };
        let theta = params_to_vars(&theta0, true);
        let phi = params_to_vars(&phi0, true);
        let loss = setup.upper_loss(&theta, &phi, &batch, &noise).unwrap();
        let inputs: Vec<Var> = theta.iter().chain(&phi).cloned().collect();
        let g = grad_values(&loss, &inputs).unwrap();
        fd_check(&|th| value(th, &phi0), &theta0, &g[..4], 1e-4);
        fd_check(&|ph| value(&theta0, ph), &phi0, &g[4..], 1e-4);
    }
}

fn kl_setup<'a>(model: &'a Grbm, post: &'a BernoulliPosterior, obj: &'a ScoreObjective) -> BiLevelSetup<'a> {
    BiLevelSetup {
        model,
        posterior: post,
        objective: obj,
        mode: LatentMode::Enumerate,
    }
}

#[test]
fn lower_kl_at_exact_posterior_is_free_energy() {
    let p = random_grbm(3, 4, 70);
    let model = Grbm::new(3, 4);
    let post = BernoulliPosterior::new(3, 4, 0.1).unwrap();
    let obj = ScoreObjective::Sm;
    let setup = kl_setup(&model, &post, &obj);
    let theta = params_to_vars(&p.to_tensors(), false);
    let phi = params_to_vars(&p.exact_posterior_params(), false);
    let batch = rng::normal_tensor(&[5, 3], &mut rng::seeded(1));
    for r in 0..5 {
        let row = batch.slice(0, r, 1);
        let noise = IterationNoise::draw(&obj, &post, &row, &mut rng::seeded(2));
        let kl = setup.lower_kl_loss(&theta, &phi, &row, &noise).unwrap().item();
        assert!((kl - p.free_energy_value(row.data())).abs() < 1e-10);
    }
}

#[test]
fn lower_kl_is_minimized_at_exact_posterior() {
    let p = random_grbm(3, 3, 80);
    let model = Grbm::new(3, 3);
    let post = BernoulliPosterior::new(3, 3, 0.1).unwrap();
    let obj = ScoreObjective::Sm;
    let setup = kl_setup(&model, &post, &obj);
    let theta = params_to_vars(&p.to_tensors(), false);
    let star = p.exact_posterior_params();
    let batch = rng::normal_tensor(&[4, 3], &mut rng::seeded(1));
    let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(2));
    let phi = params_to_vars(&star, true);
    let best = setup.lower_kl_loss(&theta, &phi, &batch, &noise).unwrap();
    let g = grad_values(&best, &phi).unwrap();
    assert!(g.iter().map(|t| t.norm()).sum::<f64>() < 1e-8);
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let moved: Vec<Tensor> = star
            .iter()
            .map(|t| t.add(&rng::normal_tensor(t.shape(), &mut r).scale(0.3)))
            .collect();
        let v = setup
            .lower_kl_loss(&theta, &params_to_vars(&moved, false), &batch, &noise)
            .unwrap()
            .item();
        assert!(v >= best.item());
    }
}

#[test]
fn lower_kl_sample_mode_is_deterministic() {
    let p = random_grbm(2, 3, 90);
    let model = Grbm::new(2, 3);
    let post = BernoulliPosterior::new(2, 3, 0.1).unwrap();
    let obj = ScoreObjective::Dsm { sigma: 0.2 };
    let setup = BiLevelSetup {
        model: &model,
        posterior: &post,
        objective: &obj,
        mode: LatentMode::Sample,
    };
    let theta = params_to_vars(&p.to_tensors(), false);
    let phi = params_to_vars(&post.init(&mut rng::seeded(1)), false);
    let batch = rng::normal_tensor(&[5, 2], &mut rng::seeded(2));
    let run = || {
        let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(3));
        setup.lower_kl_loss(&theta, &phi, &batch, &noise).unwrap().item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn enumeration_limits() {
    let model = Grbm::new(2, 11);
    let post = BernoulliPosterior::new(2, 11, 0.1).unwrap();
    let obj = ScoreObjective::Sm;
    let setup = kl_setup(&model, &post, &obj);
    let theta = params_to_vars(&model_init(&model), false);
    let phi = params_to_vars(&post.init(&mut rng::seeded(1)), false);
    let batch = Tensor::zeros(&[1, 2]);
    let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(2));
    assert!(matches!(
        setup.upper_loss(&theta, &phi, &batch, &noise),
        Err(Error::Size { .. })
    ));
    assert!(matches!(
        setup.lower_kl_loss(&theta, &phi, &batch, &noise),
        Err(Error::Size { .. })
    ));
    assert!(matches!(
        setup.lower_fisher_loss(&theta, &phi, &batch, &noise),
        Err(Error::Unsupported(_))
    ));
}

fn model_init(m: &dyn EnergyModel) -> Vec<Tensor> {
    m.init(&mut rng::seeded(0))
}

/// `E(v, h) = ½||h - vM - m||²`: the latent conditional is `N(vM + m, I)`.
struct JointGaussian {
    d_v: usize,
    d_h: usize,
}

impl EnergyModel for JointGaussian {
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
        vec!["M".into(), "m".into()]
    }
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.d_v, self.d_h], vec![self.d_h]]
    }
    fn init(&self, rng: &mut Rng) -> Vec<Tensor> {
        vec![rng::normal_tensor(&[self.d_v, self.d_h], rng), rng::normal_tensor(&[self.d_h], rng)]
    }
    fn energy(&self, theta: &[Var], v: &Var, h: &Var) -> Var {
        h.sub(&v.matmul(&theta[0])).sub(&theta[1]).square().sum_axis(1).scale(0.5)
    }
}

/// Linear Gaussian posterior with `μ = vWμ + bμ`, `ρ = vWρ + bρ`.
fn linear_gaussian(d_v: usize, d_h: usize) -> GaussianPosterior {
    GaussianPosterior {
        d_v,
        d_h,
        hidden: vec![],
    }
}

#[test]
fn lower_fisher_vanishes_for_exact_gaussian_conditional() {
    let model = JointGaussian { d_v: 3, d_h: 2 };
    let theta_t = model_init(&model);
    let post = linear_gaussian(3, 2);
    let phi_t = vec![
        theta_t[0].clone(),
        theta_t[1].clone(),
        Tensor::zeros(&[3, 2]),
        Tensor::zeros(&[2]),
    ];
    let obj = ScoreObjective::Sm;
    let setup = BiLevelSetup {
        model: &model,
        posterior: &post,
        objective: &obj,
        mode: LatentMode::Sample,
    };
    let batch = rng::normal_tensor(&[7, 3], &mut rng::seeded(1));
    let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(2));
    let v = setup
        .lower_fisher_loss(&params_to_vars(&theta_t, false), &params_to_vars(&phi_t, true), &batch, &noise)
        .unwrap()
        .item();
    assert!(v.abs() < 1e-10);
}

#[test]
fn lower_fisher_one_dimensional_mean_gap() {
    let model = JointGaussian { d_v: 1, d_h: 1 };
    let post = linear_gaussian(1, 1);
    let obj = ScoreObjective::Sm;
    let setup = BiLevelSetup {
        model: &model,
        posterior: &post,
        objective: &obj,
        mode: LatentMode::Sample,
    };
    let batch = rng::normal_tensor(&[9, 1], &mut rng::seeded(3));
    let mut r = rng::seeded(4);
    for (mu_p, mu_q) in [(0.0, 1.0), (1.5, -0.5), (2.0, 2.0)] {
        let theta = vec![Tensor::zeros(&[1, 1]), Tensor::vector(vec![mu_p])];
        let phi = vec![
            Tensor::zeros(&[1, 1]),
            Tensor::vector(vec![mu_q]),
            Tensor::zeros(&[1, 1]),
            Tensor::zeros(&[1]),
        ];
        let noise = IterationNoise::draw(&obj, &post, &batch, &mut r);
        let v = setup
            .lower_fisher_loss(&params_to_vars(&theta, false), &params_to_vars(&phi, false), &batch, &noise)
            .unwrap()
            .item();
        let gap: f64 = mu_q - mu_p;
        assert!((v - 0.5 * gap * gap).abs() < 1e-10);
        assert!(v >= 0.0);
    }
}

#[test]
fn lower_fisher_is_nonnegative_and_differentiable() {
    let model = JointGaussian { d_v: 2, d_h: 2 };
    let post = GaussianPosterior {
        d_v: 2,
        d_h: 2,
        hidden: vec![4],
    };
    let obj = ScoreObjective::Dsm { sigma: 0.1 };
    let setup = BiLevelSetup {
        model: &model,
        posterior: &post,
        objective: &obj,
        mode: LatentMode::Sample,
    };
    let theta_t = model_init(&model);
    let phi_t = post.init(&mut rng::seeded(5));
    let batch = rng::normal_tensor(&[6, 2], &mut rng::seeded(6));
    let noise = IterationNoise::draw(&obj, &post, &batch, &mut rng::seeded(7));
    let value = |ph: &[Tensor]| {
        setup
            .lower_fisher_loss(&params_to_vars(&theta_t, false), &params_to_vars(ph, false), &batch, &noise)
            .unwrap()
            .item()
    };
    assert!(value(&phi_t) >= 0.0);
    let phi = params_to_vars(&phi_t, true);
    let loss = setup
        .lower_fisher_loss(&params_to_vars(&theta_t, false), &phi, &batch, &noise)
        .unwrap();
    let g = grad_values(&loss, &phi).unwrap();
    fd_check(&value, &phi_t, &g, 1e-5);
}

#[test]
fn noise_mismatch_is_a_contract_error() {
    let batch = Tensor::zeros(&[2, 2]);
    let r = ScoreObjective::Dsm { sigma: 0.1 }.per_point(&std_normal, &batch, &ObjectiveNoise::None);
    assert!(matches!(r, Err(Error::Contract(_))));
}
