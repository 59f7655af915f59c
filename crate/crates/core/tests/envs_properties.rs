use mbil_core::data::Action;
use mbil_core::envs::gridworld::{
    state_action_balance_error, state_balance_check, state_balance_error, state_chain, to_f64, Prob, DEFAULT_EPSILON,
    N_ACTIONS,
};
use mbil_core::envs::{generate_demonstrations, Environment, Expert, GridExpert, GridWorld, PointMass, PointMassExpert};
use mbil_core::eval::{evaluate_expert, EvalConfig};
use mbil_core::rng;

fn zero() -> Prob {
    Prob::from_integer(0)
}

#[test]
fn transition_rows_sum_to_one_exactly() {
    for (w, h) in [(3, 3), (5, 5), (4, 2)] {
        let g = GridWorld::new(w, h, Prob::new(1, 10));
        for row in g.transition_table().iter().flatten() {
            assert_eq!(row.iter().copied().sum::<Prob>(), Prob::from_integer(1));
        }
    }
}

#[test]
fn slip_probabilities() {
    let g = GridWorld::new(5, 5, Prob::new(1, 10));
    let s = g.index((2, 2));
    assert_eq!(g.transition_prob(s, 0, g.index((1, 2))), Prob::new(9, 10));
    assert_eq!(g.transition_prob(s, 0, g.index((2, 1))), Prob::new(1, 20));
    assert_eq!(g.transition_prob(s, 0, g.index((2, 3))), Prob::new(1, 20));
    let lt = g
        .transition_logpdf(&g.encode((2, 2)), &Action::Discrete(0), &g.encode((1, 2)))
        .unwrap();
    assert!((lt.log_density - (-0.1053605156578263)).abs() < 1e-12);
    let far = g
        .transition_logpdf(&g.encode((2, 2)), &Action::Discrete(0), &g.encode((4, 4)))
        .unwrap();
    assert_eq!(far.log_density, f64::NEG_INFINITY);
}

#[test]
fn deterministic_grid_moves_up() {
    let g = GridWorld::new(5, 5, zero());
    for seed in 0..20 {
        let step = mbil_core::envs::env_step(&g, &g.encode((2, 2)), &Action::Discrete(0), seed).unwrap();
        assert_eq!(step.next, g.encode((1, 2)));
        assert_eq!(step.reward, -1.0);
        assert!(!step.done);
    }
}

#[test]
fn grid_step_frequencies_match_slip_model() {
    let g = GridWorld::new(5, 5, Prob::new(1, 10));
    let mut r = rng::seeded(1, 1);
    let n = 100_000;
    let mut up = 0;
    for _ in 0..n {
        let st = g.step(&g.encode((2, 2)), &Action::Discrete(0), &mut r).unwrap();
        up += (st.next == g.encode((1, 2))) as usize;
    }
    assert!((up as f64 / n as f64 - 0.9).abs() < 0.005);
}

#[test]
fn invalid_actions_are_errors() {
    let g = GridWorld::default();
    let mut r = rng::seeded(0, 0);
    assert!(g.step(&g.encode((0, 0)), &Action::Discrete(4), &mut r).is_err());
    let p = PointMass::default();
    assert!(p.step(&[0.0, 0.0], &Action::Continuous(vec![1.5, 0.0]), &mut r).is_err());
    assert!(p.step(&[0.0, 0.0], &Action::Discrete(0), &mut r).is_err());
}

#[test]
fn pointmass_noiseless_step_is_mean() {
    let p = PointMass {
        sigma: 0.0,
        ..PointMass::default()
    };
    let st = mbil_core::envs::env_step(&p, &[0.3, -0.2], &Action::Continuous(vec![0.5, 1.0]), 4).unwrap();
    assert_eq!(st.next, vec![0.3 + 0.5 * 0.1, -0.2 + 1.0 * 0.1]);
}

#[test]
fn pointmass_logpdf_at_mean() {
    let p = PointMass::default();
    let s = [0.1, 0.2];
    let a = Action::Continuous(vec![0.4, -0.3]);
    let m = p.mean_next(&s, &[0.4, -0.3]);
    let lt = p.transition_logpdf(&s, &a, &m).unwrap();
    let want = -(2.0 * std::f64::consts::PI * 0.01f64).ln();
    assert!((lt.log_density - want).abs() < 1e-12);
    assert!((lt.log_density - 2.7672932).abs() < 1e-6);
    assert!(lt.exact);
    assert!(!p.transition_logpdf(&s, &a, &[2.0, 0.0]).unwrap().exact);
}

#[test]
fn pointmass_logpdf_integrates_to_one() {
    let p = PointMass::default();
    let s = [0.2, -0.1];
    let a = Action::Continuous(vec![0.5, 0.5]);
    let m = p.mean_next(&s, &[0.5, 0.5]);
    let n = 201;
    let half = 6.0 * p.sigma;
    let h = 2.0 * half / (n - 1) as f64;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            let x = [m[0] - half + i as f64 * h, m[1] - half + j as f64 * h];
            mass += w(i) * w(j) * p.transition_logpdf(&s, &a, &x).unwrap().log_density.exp();
        }
    }
    mass *= h * h;
    assert!((mass - 1.0).abs() < 0.02, "mass {mass}");
}

#[test]
fn gridworld_expert_near_optimal() {
    let g = GridWorld::default();
    let expert = GridExpert::optimal(&g, DEFAULT_EPSILON);
    let (v, _) = g.value_iteration();
    let optimum = g.start_average(&v);
    let exact = g.start_average(&g.evaluate_policy(&expert.table()));
    assert!(exact <= optimum + 1e-9);
    let stats = evaluate_expert(&g, &expert, &EvalConfig::new(300, g.horizon, 0)).unwrap();
    assert!(
        (stats.mean - optimum).abs() <= 0.05 * optimum.abs(),
        "expert {} vs optimum {optimum} (exact ε-greedy {exact})",
        stats.mean
    );
}

#[test]
fn pointmass_expert_reaches_goal() {
    let env = PointMass::default();
    let expert = PointMassExpert::new(env.clone());
    let mut r = rng::seeded(3, 3);
    let episodes = 500;
    let mut reached = 0;
    for _ in 0..episodes {
        let mut s = env.reset(&mut r);
        for _ in 0..100 {
            if s.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.1 {
                reached += 1;
                break;
            }
            let a = expert.act(&s, &mut r).unwrap();
            s = env.step(&s, &a, &mut r).unwrap().next;
        }
    }
    assert!(reached as f64 >= 0.95 * episodes as f64, "{reached}/{episodes}");
}

#[test]
fn expert_action_distributions_normalize() {
    let g = GridWorld::default();
    let e = GridExpert::optimal(&g, DEFAULT_EPSILON);
    for s in 0..g.n_states() {
        let st = g.encode(g.cell(s));
        let total: f64 = (0..N_ACTIONS).map(|a| e.logpdf(&st, &Action::Discrete(a)).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((0..N_ACTIONS).all(|a| to_f64(e.prob(s, a)) >= 0.05 / 4.0));
    }
}

#[test]
fn demonstrations_carry_no_rewards_and_respect_horizon() {
    let g = GridWorld::default();
    let e = GridExpert::optimal(&g, DEFAULT_EPSILON);
    let d = generate_demonstrations(&g, &e, 20, 50, 1).unwrap();
    assert_eq!(d.trajectories.len(), 20);
    assert!(d.trajectories.iter().all(|t| !t.is_empty() && t.len() <= 50));
    assert_eq!(d, generate_demonstrations(&g, &e, 20, 50, 1).unwrap());
    let p = PointMass::default();
    let d = generate_demonstrations(&p, &PointMassExpert::new(p.clone()), 1, 100, 0).unwrap();
    assert_eq!(d.trajectories[0].len(), 100);
}

#[test]
fn state_balance_is_exact() {
    for (w, h) in [(3, 3), (5, 5)] {
        let g = GridWorld::new(w, h, Prob::new(1, 10));
        assert_eq!(state_balance_check(&GridExpert::optimal(&g, DEFAULT_EPSILON)), zero());
    }
}

#[test]
fn state_action_balance_is_exact_at_3x3() {
    let g = GridWorld::new(3, 3, Prob::new(1, 10));
    let table = GridExpert::optimal(&g, DEFAULT_EPSILON).table();
    let (err, checked) = state_action_balance_error(&g, &table, &table);
    assert_eq!(err, zero());
    assert!(checked > 0);
}

#[test]
fn perturbed_policy_breaks_balance() {
    let g = GridWorld::new(3, 3, Prob::new(1, 10));
    let table = GridExpert::optimal(&g, DEFAULT_EPSILON).table();
    let mut other = table.clone();
    other[0][0] += Prob::new(1, 100);
    other[0][1] -= Prob::new(1, 100);
    let chain = state_chain(&g, &table);
    assert!(state_balance_error(&g, &chain, &other) > zero());
    assert!(state_action_balance_error(&g, &table, &other).0 > zero());
}
