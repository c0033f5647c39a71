//! Property tests over the public API.

use bism::autodiff::{Tensor, Var};
use bism::bilevel::Adam;
use bism::cli::{Checkpoint, ExperimentConfig};
use bism::data::BatchIterator;
use bism::eval::{DensityGrid, GridSpec};
use bism::models::{binary_states, params_to_vars, GrbmParams, GrbmVars, ModelKind};
use bism::objectives::{ObjectiveNoise, ScoreObjective};
use bism::posteriors::{sample_concrete, PosteriorKind};
use bism::rng;
use bism::samplers::LangevinSchedule;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), Just(f64::MIN_POSITIVE), Just(1e300)]
}

fn tensor(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..=max_rank).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(finite(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

fn grbm(d_v: usize, d_h: usize, seed: u64) -> GrbmParams {
    let mut r = rng::seeded(seed);
    GrbmParams::new(
        0.4 + rng::uniform(&mut r),
        rng::normal_tensor(&[d_v, d_h], &mut r),
        rng::normal_tensor(&[d_v], &mut r),
        rng::normal_tensor(&[d_h], &mut r),
    )
    .unwrap()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_bytes_round_trip(
        deep in any::<bool>(),
        post in 0usize..3,
        d_v in 1usize..50,
        d_h in 1usize..50,
        temperature in finite(),
        iter in any::<u64>(),
        entries in prop::collection::vec(("[a-z_.]{1,12}", tensor(3)), 0..5),
    ) {
        let ckpt = Checkpoint {
            model: if deep { ModelKind::Deep } else { ModelKind::Grbm },
            posterior: [None, Some(PosteriorKind::Bernoulli), Some(PosteriorKind::Gaussian)][post],
            d_v,
            d_h,
            temperature,
            iter,
            entries,
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn truncated_checkpoint_is_rejected(cut in 0usize..200, extra in any::<u8>()) {
        let ckpt = Checkpoint {
            model: ModelKind::Grbm,
            posterior: Some(PosteriorKind::Bernoulli),
            d_v: 2,
            d_h: 4,
            temperature: 0.1,
            iter: 7,
            entries: vec![("theta.w".into(), Tensor::from_vec(&[2, 4], vec![1.5; 8]))],
        };
        let bytes = ckpt.to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        let mut longer = bytes.clone();
        longer.push(extra);
        prop_assert!(Checkpoint::from_bytes(&longer).is_err());
    }

    #[test]
    fn config_toml_round_trip(
        d_h in 1usize..20,
        k in 0usize..20,
        n in 0usize..20,
        alpha in 1e-6..1.0f64,
        seed in any::<u32>(),
        objective in prop::sample::select(vec!["sm", "ssm", "dsm", "mdsm"]),
    ) {
        let text = format!(
            "[model]\nkind = \"grbm\"\nd_v = 2\nd_h = {d_h}\n\n[objective]\nkind = \"{objective}\"\n\n\
             [trainer]\nK = {k}\nN = {n}\nalpha = {alpha:e}\nseed = {seed}\n\n[paths]\ndata = \"x.txt\"\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(cfg.trainer.k, k);
        prop_assert_eq!(cfg.trainer.n, n);
        prop_assert_eq!(cfg.trainer.alpha, alpha);
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn free_energy_is_negative_log_sum_over_latents(
        d_v in 1usize..5,
        d_h in 1usize..9,
        seed in any::<u64>(),
        scale in 0.0..4.0f64,
    ) {
        let p = grbm(d_v, d_h, seed);
        let v = rng::normal_tensor(&[d_v], &mut rng::stream(seed, 1)).scale(scale);
        let states = binary_states(d_h);
        let neg_e: Vec<f64> = (0..states.rows()).map(|s| -p.energy_value(v.data(), states.row(s))).collect();
        let f = p.free_energy_value(v.data());
        prop_assert!((f + logsumexp(&neg_e)).abs() <= 1e-10 * (1.0 + f.abs()));
    }

    #[test]
    fn sliced_over_all_sign_directions_equals_full(seed in any::<u64>(), rows in 1usize..8) {
        let p = grbm(2, 3, seed);
        let theta = params_to_vars(&p.to_tensors(), false);
        let log_density = |v: &Var| GrbmVars::new(&theta).free_energy(v).neg();
        let batch = rng::normal_tensor(&[rows, 2], &mut rng::stream(seed, 2));
        let dirs: Vec<Tensor> = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]
            .iter()
            .map(|d| Tensor::from_vec(&[rows, 2], d.repeat(rows)))
            .collect();
        let sm = ScoreObjective::Sm.loss(&log_density, &batch, &ObjectiveNoise::None).unwrap().item();
        let ssm = ScoreObjective::Ssm { directions: 4 }
            .loss(&log_density, &batch, &ObjectiveNoise::Directions(dirs))
            .unwrap()
            .item();
        prop_assert!((sm - ssm).abs() <= 1e-10 * (1.0 + sm.abs()));
    }

    #[test]
    fn batch_iterator_resumes_at_any_index(
        rows in 1usize..40,
        batch in 1usize..10,
        seed in any::<u64>(),
        index in 0u64..60,
    ) {
        prop_assume!(batch <= rows);
        let points = Tensor::from_vec(&[rows, 1], (0..rows).map(|i| i as f64).collect());
        let mut from_start = BatchIterator::new(&points, batch, seed).unwrap();
        for _ in 0..index {
            from_start.next_batch();
        }
        let mut resumed = BatchIterator::starting_at(&points, batch, seed, index).unwrap();
        for _ in 0..5 {
            prop_assert_eq!(from_start.next_batch(), resumed.next_batch());
        }
    }

    #[test]
    fn grid_text_round_trip(
        nx in 1usize..6,
        ny in 1usize..6,
        lo in -10.0..0.0f64,
        width in 0.1..10.0f64,
        seed in any::<u64>(),
    ) {
        let spec = GridSpec { xmin: lo, xmax: lo + width, ymin: lo * 0.5, ymax: lo * 0.5 + width, nx, ny };
        let grid = DensityGrid::evaluate(spec, &|pts: &Tensor| {
            let mut r = rng::seeded(seed);
            Ok((0..pts.rows()).map(|_| 1e3 * rng::normal(&mut r)).collect())
        })
        .unwrap();
        let back = DensityGrid::from_text(&grid.to_text()).unwrap();
        prop_assert_eq!(back.spec, grid.spec);
        prop_assert_eq!(back.log_density, grid.log_density);
    }

    #[test]
    fn langevin_temperatures_decrease_between_the_ends(
        t_lo in 1e-3..10.0f64,
        span in 1.0..1e3f64,
        levels in 1usize..30,
    ) {
        let s = LangevinSchedule { step: 0.01, n_steps: 1, t_lo, t_hi: t_lo * span, levels };
        let ts = s.temperatures();
        prop_assert_eq!(ts.len(), levels);
        prop_assert!(ts.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!((ts[levels - 1] - t_lo).abs() <= 1e-9 * t_lo);
        if levels > 1 {
            prop_assert!((ts[0] - t_lo * span).abs() <= 1e-9 * t_lo * span);
        }
    }

    #[test]
    fn adam_leaves_params_alone_under_zero_gradients(
        values in prop::collection::vec(-1e3..1e3f64, 1..10),
        steps in 1usize..20,
        lr in 1e-6..1.0f64,
    ) {
        let mut params = vec![Tensor::vector(values.clone())];
        let zeros = vec![Tensor::zeros(&[values.len()])];
        let mut adam = Adam::new(&params);
        for _ in 0..steps {
            adam.step(&mut params, &zeros, lr).unwrap();
        }
        prop_assert_eq!(params[0].data(), &values[..]);
    }

    #[test]
    fn concrete_samples_stay_in_the_unit_interval(
        probs in prop::collection::vec(1e-6..(1.0 - 1e-6), 1..20),
        temperature in 0.01..5.0f64,
        seed in any::<u64>(),
    ) {
        let p = Var::constant(Tensor::vector(probs));
        let h = sample_concrete(&p, temperature, &mut rng::seeded(seed)).unwrap();
        prop_assert!(h.value().data().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
