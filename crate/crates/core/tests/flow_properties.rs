mod common;

use common::{linear_gaussian, numeric_log_det, rand_tensor, trapezoid_mass};
use mbil_core::flow::{fit_density, soft_clamp, DensityFitConfig, FlowConfig, FlowModel};
use mbil_core::math::LN_2PI;
use mbil_core::rng;
use mbil_core::{Tape, Tensor};

fn small(d: usize, c: usize) -> FlowConfig {
    FlowConfig {
        hidden: 16,
        ..FlowConfig::new(d, c)
    }
}

fn random_flow(d: usize, c: usize, seed: u64) -> FlowModel {
    let mut f = FlowModel::new(small(d, c), seed).unwrap();
    f.randomize_coupling_outputs(seed, 0.3);
    f
}

fn trained_flow(d: usize, c: usize, seed: u64) -> FlowModel {
    let (xs, cs, _) = linear_gaussian(512, d, c, 0.3, seed);
    let cfg = DensityFitConfig {
        steps: 150,
        batch_size: 64,
        seed,
        ..DensityFitConfig::default()
    };
    fit_density(FlowModel::new(small(d, c), seed).unwrap(), &xs, &cs, &cfg)
        .unwrap()
        .0
        .into_inner()
}

fn max_round_trip(flow: &FlowModel, n: usize, seed: u64) -> f64 {
    let d = flow.config.x_dim;
    let mut rng = rng::seeded(seed, 5);
    let x = rand_tensor(&mut rng, &[n, d], -3.0, 3.0);
    let c = rand_tensor(&mut rng, &[n, flow.config.c_dim], -2.0, 2.0);
    let (z, _) = flow.forward_map(&x, &c).unwrap();
    let back = flow.inverse(&z, &c).unwrap();
    let e1 = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let xz = flow.inverse(&x, &c).unwrap();
    let (zz, _) = flow.forward_map(&xz, &c).unwrap();
    let e2 = x.data().iter().zip(zz.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    e1.max(e2)
}

#[test]
fn round_trip_random_and_trained() {
    for d in [1, 2, 4, 8] {
        let r = max_round_trip(&random_flow(d, 3, d as u64), 1000, 1);
        assert!(r < 1e-6, "random d={d}: {r:e}");
        let t = max_round_trip(&trained_flow(d, 3, d as u64), 1000, 2);
        assert!(t < 1e-6, "trained d={d}: {t:e}");
    }
}

#[test]
fn logdet_matches_numerical_jacobian() {
    for d in [2, 4] {
        let flow = random_flow(d, 2, 10 + d as u64);
        let mut rng = rng::seeded(3, 3);
        for _ in 0..100 {
            let x = rand_tensor(&mut rng, &[1, d], -2.0, 2.0);
            let c = rand_tensor(&mut rng, &[1, 2], -1.0, 1.0);
            let (_, ld) = flow.forward_map(&x, &c).unwrap();
            let num = numeric_log_det(&flow, x.data(), c.data(), 1e-5);
            assert!((ld[0] - num).abs() < 1e-3, "d={d}: analytic {} numeric {num}", ld[0]);
        }
    }
}

#[test]
fn density_integrates_to_one() {
    for d in [1, 2] {
        let flow = trained_flow(d, 2, 20 + d as u64);
        let mut rng = rng::seeded(4, 4);
        for _ in 0..5 {
            let c: Vec<f64> = (0..2).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
            let n = if d == 1 { 2001 } else { 301 };
            let mass = trapezoid_mass(&flow, &c, -7.0, 7.0, n);
            assert!((mass - 1.0).abs() < 0.02, "d={d} c={c:?}: mass {mass}");
        }
    }
}

#[test]
fn identity_flow_is_standard_normal() {
    let flow = FlowModel::new(FlowConfig::new(3, 2), 0).unwrap();
    let x = Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
    let c = Tensor::matrix(2, 2, vec![5.0, -5.0, 0.1, 0.2]).unwrap();
    let (z, ld) = flow.forward_map(&x, &c).unwrap();
    assert_eq!(z.data(), x.data());
    assert_eq!(ld, vec![0.0, 0.0]);
    let lp = flow.log_prob(&x, &c).unwrap();
    assert!((lp[0] + 1.5 * LN_2PI).abs() < 1e-12);
    assert!((lp[1] + 1.5 * LN_2PI + 0.5 * 5.25).abs() < 1e-12);
}

#[test]
fn rigged_constant_block() {
    let flow = FlowModel::new(FlowConfig::new(2, 1), 0).unwrap();
    let block = flow.blocks[0].clone();
    let mut store = flow.store.clone();
    let (raw_s, t) = (1.3, -0.4);
    store.get_mut(block.subnet_a.output_layer().bias).data_mut().copy_from_slice(&[raw_s, t]);
    let s = soft_clamp(raw_s, block.clamp_limit);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Tensor::matrix(1, 2, vec![0.7, -1.1]).unwrap());
    let ci = tape.constant(Tensor::zeros(&[1, flow.config.cond_width]));
    let (y, ld) = block.forward(&mut tape, &p, x, ci).unwrap();
    let y = tape.value(y).data().to_vec();
    assert_eq!(y[0], 0.7);
    assert!((y[1] - (-1.1 * s.exp() + t)).abs() < 1e-15);
    assert!((tape.item(ld) - s).abs() < 1e-15);
    let yv = tape.constant(Tensor::matrix(1, 2, y.clone()).unwrap());
    let back = block.inverse(&mut tape, &p, yv, ci).unwrap();
    let back = tape.value(back).data().to_vec();
    assert!((back[1] - (y[1] - t) * (-s).exp()).abs() < 1e-15);
    assert!((back[1] + 1.1).abs() < 1e-12);
}

#[test]
fn clamp_bounds_every_scale() {
    let mut f = random_flow(4, 2, 9);
    f.randomize_coupling_outputs(3, 50.0);
    let mut rng = rng::seeded(1, 1);
    let x = rand_tensor(&mut rng, &[64, 4], -3.0, 3.0);
    let c = rand_tensor(&mut rng, &[64, 2], -3.0, 3.0);
    let (_, ld) = f.forward_map(&x, &c).unwrap();
    // 4 blocks × 4 coordinates, each scale in [-2, 2]
    assert!(ld.iter().all(|v| v.abs() <= 4.0 * 4.0 * 2.0));
    // saturated scales with translations small enough to keep digits
    let mut g = random_flow(4, 2, 9);
    g.randomize_coupling_outputs(3, 2.0);
    assert!(max_round_trip(&g, 256, 7) < 1e-6);
}

#[test]
fn identity_samples_are_standard_normal() {
    let flow = FlowModel::new(FlowConfig::new(2, 1), 0).unwrap();
    let s = flow.sample(&[0.3], 100_000, 11).unwrap();
    for j in 0..2 {
        let m = (0..s.rows()).map(|r| s.row(r)[j]).sum::<f64>() / s.rows() as f64;
        assert!(m.abs() < 0.02, "dim {j}: mean {m}");
    }
    assert_eq!(flow.sample(&[0.3], 1, 5).unwrap(), flow.sample(&[0.3], 1, 5).unwrap());
}

#[test]
fn repeated_point_with_noise_trains() {
    let xs = Tensor::matrix(32, 2, [0.5, -0.5].repeat(32)).unwrap();
    let cs = Tensor::matrix(32, 1, vec![1.0; 32]).unwrap();
    let cfg = DensityFitConfig {
        steps: 200,
        batch_size: 32,
        ..DensityFitConfig::default()
    };
    let (_, rep) = fit_density(FlowModel::new(small(2, 1), 0).unwrap(), &xs, &cs, &cfg).unwrap();
    assert!(rep.step_nll.iter().all(|v| v.is_finite()));
    let head: f64 = rep.step_nll[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = rep.step_nll[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn zero_noise_still_trains_on_continuous_data() {
    let (xs, cs, _) = linear_gaussian(256, 2, 1, 0.3, 1);
    let cfg = DensityFitConfig {
        steps: 50,
        batch_size: 32,
        noise_sigma: 0.0,
        ..DensityFitConfig::default()
    };
    let (_, rep) = fit_density(FlowModel::new(small(2, 1), 0).unwrap(), &xs, &cs, &cfg).unwrap();
    assert!(rep.final_train_nll.is_finite());
}

#[test]
fn trained_samples_match_conditional_mean() {
    let (xs, cs, _) = linear_gaussian(4000, 2, 1, 0.3, 3);
    let cfg = DensityFitConfig {
        steps: 1500,
        batch_size: 128,
        seed: 3,
        ..DensityFitConfig::default()
    };
    let (flow, _) = fit_density(FlowModel::new(small(2, 1), 3).unwrap(), &xs, &cs, &cfg).unwrap();
    // linear_gaussian with c_dim = 1: A = [0, 0.5 sin 0.7], b = [-0.2, 0.1]
    let c = 0.5;
    let truth = [-0.2, 0.1 + 0.5 * (0.7f64).sin() * c];
    let n = 20_000;
    let s = flow.sample(&[c], n, 1).unwrap();
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|r| s.row(r)[j]).collect();
        let (m, sd) = mbil_core::math::mean_std(&col);
        let se = sd / (n as f64).sqrt();
        // model error on top of 3 standard errors of Monte Carlo noise
        assert!((m - truth[j]).abs() < 3.0 * se + 0.02, "dim {j}: {m} vs {}", truth[j]);
    }
}

#[test]
fn cosine_decay_starts_at_the_base_rate() {
    let (xs, cs, _) = linear_gaussian(256, 2, 1, 0.3, 4);
    let fit = |steps, cosine_decay| {
        let cfg = DensityFitConfig {
            steps,
            batch_size: 32,
            cosine_decay,
            ..DensityFitConfig::default()
        };
        let (f, _) = fit_density(FlowModel::new(small(2, 1), 0).unwrap(), &xs, &cs, &cfg).unwrap();
        f.store.flat()
    };
    assert_eq!(fit(1, true), fit(1, false));
    assert_ne!(fit(5, true), fit(5, false));
}
