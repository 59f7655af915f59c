use mbil_core::data::{Action, ActionSpace, Actions};
use mbil_core::policy::{Policy, PolicyLossKind};
use mbil_core::{rng, Tensor};

fn gaussian(dim: usize, seed: u64) -> Policy {
    Policy::for_space(3, &ActionSpace::Continuous { dim, low: -5.0, high: 5.0 }, 16, seed)
}

#[test]
fn categorical_probabilities_sum_to_one() {
    let p = Policy::for_space(4, &ActionSpace::Discrete { n: 5 }, 16, 1);
    let Policy::Categorical(c) = &p else { unreachable!() };
    let mut r = rng::seeded(1, 1);
    for _ in 0..200 {
        let s: Vec<f64> = (0..4).map(|_| rng::uniform(&mut r, -10.0, 10.0)).collect();
        let probs = c.probs(&s).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let via_log: f64 = (0..5).map(|a| p.log_prob(&s, &Action::Discrete(a)).unwrap().exp()).sum();
        assert!((via_log - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gaussian_density_integrates_to_one() {
    let p = gaussian(1, 2);
    let Policy::Gaussian(g) = &p else { unreachable!() };
    for s in [[0.0, 0.0, 0.0], [1.0, -2.0, 0.5], [3.0, 3.0, -3.0]] {
        let (m, sd) = g.mean_and_std(&s).unwrap();
        let (lo, hi, n) = (m[0] - 8.0 * sd[0], m[0] + 8.0 * sd[0], 4001);
        let h = (hi - lo) / (n - 1) as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * p.log_prob(&s, &Action::Continuous(vec![lo + i as f64 * h])).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
    }
}

#[test]
fn gaussian_log_prob_matches_closed_form() {
    let p = gaussian(2, 3);
    let Policy::Gaussian(g) = &p else { unreachable!() };
    let s = [0.2, -0.4, 1.0];
    let (m, sd) = g.mean_and_std(&s).unwrap();
    let a = [0.3, -1.7];
    let want: f64 = (0..2)
        .map(|j| {
            let z = (a[j] - m[j]) / sd[j];
            -0.5 * z * z - sd[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum();
    let got = p.log_prob(&s, &Action::Continuous(a.to_vec())).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn mse_ignores_log_std_but_nll_does_not() {
    let mut p = gaussian(2, 4);
    let mut r = rng::seeded(2, 2);
    let states = Tensor::matrix(16, 3, (0..48).map(|_| rng::normal(&mut r)).collect()).unwrap();
    let actions = Actions::Continuous(Tensor::matrix(16, 2, (0..32).map(|_| rng::normal(&mut r)).collect()).unwrap());
    let mse = p.bc_loss(&states, &actions, PolicyLossKind::Mse).unwrap();
    let nll = p.bc_loss(&states, &actions, PolicyLossKind::Nll).unwrap();
    let Policy::Gaussian(g) = &mut p else { unreachable!() };
    let bias = g.log_std_head.bias;
    for v in g.store.get_mut(bias).data_mut() {
        *v += 0.7;
    }
    assert_eq!(p.bc_loss(&states, &actions, PolicyLossKind::Mse).unwrap(), mse);
    assert!((p.bc_loss(&states, &actions, PolicyLossKind::Nll).unwrap() - nll).abs() > 1e-3);
}

#[test]
fn categorical_sampling_frequencies() {
    let p = Policy::for_space(2, &ActionSpace::Discrete { n: 4 }, 16, 5);
    let Policy::Categorical(c) = &p else { unreachable!() };
    let s = [0.5, -1.5];
    let probs = c.probs(&s).unwrap();
    let n = 100_000;
    let states = Tensor::matrix(n, 2, s.repeat(n)).unwrap();
    let mut r = rng::seeded(9, 9);
    let mut counts = [0usize; 4];
    for a in p.act_batch(&states, false, &mut r).unwrap() {
        let Action::Discrete(i) = a else { unreachable!() };
        counts[i] += 1;
    }
    for i in 0..4 {
        let f = counts[i] as f64 / n as f64;
        assert!((f - probs[i]).abs() < 0.01, "action {i}: {f} vs {}", probs[i]);
    }
}

#[test]
fn gaussian_sampling_moments() {
    let p = gaussian(2, 6);
    let Policy::Gaussian(g) = &p else { unreachable!() };
    let s = [1.0, 0.0, -1.0];
    let (m, sd) = g.mean_and_std(&s).unwrap();
    let n = 100_000;
    let states = Tensor::matrix(n, 3, s.repeat(n)).unwrap();
    let draws = p.act_batch(&states, false, &mut rng::seeded(4, 4)).unwrap();
    for j in 0..2 {
        let col: Vec<f64> = draws
            .iter()
            .map(|a| match a {
                Action::Continuous(v) => v[j],
                _ => unreachable!(),
            })
            .collect();
        let (mean, std) = mbil_core::math::mean_std(&col);
        assert!((mean - m[j]).abs() < 4.0 * sd[j] / (n as f64).sqrt());
        assert!((std / sd[j] - 1.0).abs() < 0.01);
    }
}

#[test]
fn mode_is_argmax_and_mean() {
    let p = Policy::for_space(2, &ActionSpace::Discrete { n: 3 }, 8, 7);
    let Policy::Categorical(c) = &p else { unreachable!() };
    let probs = c.probs(&[0.1, 0.2]).unwrap();
    let best = (0..3).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    assert_eq!(p.mode(&[0.1, 0.2]).unwrap(), Action::Discrete(best));
    let q = gaussian(2, 8);
    let Policy::Gaussian(g) = &q else { unreachable!() };
    let (m, _) = g.mean_and_std(&[0.0; 3]).unwrap();
    assert_eq!(q.mode(&[0.0; 3]).unwrap(), Action::Continuous(m));
}

#[test]
fn sampling_is_seeded() {
    let p = gaussian(2, 9);
    assert_eq!(p.sample(&[0.0; 3], 3).unwrap(), p.sample(&[0.0; 3], 3).unwrap());
    assert_ne!(p.sample(&[0.0; 3], 3).unwrap(), p.sample(&[0.0; 3], 4).unwrap());
}

#[test]
fn mismatched_state_width_is_an_error() {
    let p = gaussian(2, 1);
    assert!(p.log_prob(&[0.0; 2], &Action::Continuous(vec![0.0; 2])).is_err());
}
