mod common;

use common::GridOracle;
use mbil_core::bc::train_bc_pairs;
use mbil_core::data::{ActionSpace, BatchIter};
use mbil_core::envs::gridworld::{Prob, DEFAULT_EPSILON};
use mbil_core::envs::{generate_demonstrations, Environment, Expert, GridExpert, GridWorld, PointMass, PointMassExpert};
use mbil_core::mbil::{
    balance_residual, build_tuples, density_inputs, fit_densities, log_density_gap, mbil_objective, objective_tape,
    train_policy, ConditionalDensity, DensityEstimator, DensitySettings, MbilConfig, PolicyTrainConfig,
};
use mbil_core::policy::{Policy, PolicyLossKind};
use mbil_core::tabular::TabularDensity;
use mbil_core::{Error, Tape, Tensor};

/// Zero log-density everywhere.
struct Flat;

impl ConditionalDensity for Flat {
    fn log_density(&self, x: &Tensor, _c: &Tensor) -> mbil_core::Result<Vec<f64>> {
        Ok(vec![0.0; x.rows()])
    }
}

/// `log π(a' | s')` of a fixed policy, read off the chain inputs.
struct PolicyChain<'a>(&'a Policy, usize);

impl ConditionalDensity for PolicyChain<'_> {
    fn log_density(&self, x: &Tensor, _c: &Tensor) -> mbil_core::Result<Vec<f64>> {
        let d = self.1;
        (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let a = mbil_core::data::Action::Continuous(row[d..].to_vec());
                self.0.log_prob(&row[..d], &a)
            })
            .collect()
    }
}

fn pointmass_data(n: usize, seed: u64) -> mbil_core::data::Dataset {
    let env = PointMass::default();
    generate_demonstrations(&env, &PointMassExpert::new(env.clone()), n, 30, seed).unwrap()
}

fn quick(iterations: usize) -> PolicyTrainConfig {
    PolicyTrainConfig {
        iterations,
        batch_size: 32,
        hidden: 16,
        eval_every: 0,
        ..PolicyTrainConfig::default()
    }
}

#[test]
fn residual_examples() {
    assert_eq!(balance_residual(-2.0, -1.2, -0.8), 0.0);
    assert!((balance_residual(0.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
    assert!((balance_residual(-1.0, -3.0, 0.5) - 2.25).abs() < 1e-15);
}

#[test]
fn alpha_zero_is_scaled_bc() {
    let d = pointmass_data(3, 1);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let policy = Policy::for_space(2, &space, 16, 3);
    let batch = BatchIter::new(&b.tuples, &b.pairs, 32, 0).unwrap().next().unwrap();
    for beta in [1.0, 0.5, 3.0] {
        for kind in [PolicyLossKind::Nll, PolicyLossKind::Mse] {
            let total = mbil_objective(&batch, &policy, &Flat, &Flat, &space, 0.0, 0.0, beta, kind).unwrap();
            let bc = policy.bc_loss(&batch.pairs.states, &batch.pairs.actions, kind).unwrap();
            assert_eq!(total, beta * bc);
        }
    }
}

#[test]
fn beta_zero_with_perfect_balance_is_zero() {
    let d = pointmass_data(3, 2);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let policy = Policy::for_space(2, &space, 16, 4);
    let batch = BatchIter::new(&b.tuples, &b.pairs, 32, 1).unwrap().next().unwrap();
    let chain = PolicyChain(&policy, 2);
    let v = mbil_objective(&batch, &policy, &chain, &Flat, &space, 0.0, 1.0, 0.0, PolicyLossKind::Nll).unwrap();
    assert_eq!(v, 0.0);
    let off = mbil_objective(&batch, &policy, &chain, &Flat, &space, 0.3, 1.0, 0.0, PolicyLossKind::Nll).unwrap();
    assert!((off - 0.09).abs() < 1e-12);
}

#[test]
fn dynamics_term_is_nonnegative() {
    let d = pointmass_data(4, 3);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let policy = Policy::for_space(2, &space, 16, 5);
    let gaps: Vec<f64> = (0..b.tuples.len()).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    for batch in BatchIter::new(&b.tuples, &b.pairs, 16, 2).unwrap().take(50) {
        let g: Vec<f64> = batch.tuple_idx.iter().map(|&i| gaps[i]).collect();
        let mut tape = Tape::new();
        let p = policy.store().bind(&mut tape, false);
        let terms = objective_tape(&mut tape, &policy, &p, &batch, &g, 1.0, 1.0, PolicyLossKind::Nll).unwrap();
        assert!(tape.item(terms.dynamics.unwrap()) >= 0.0);
    }
}

#[test]
fn mbil_at_alpha_zero_reproduces_bc_bit_for_bit() {
    for (d, seed) in [(pointmass_data(2, 4), 7), (grid_data(3, 3, 5), 8)] {
        let b = build_tuples(&d).unwrap();
        let space = d.env.action_space;
        let train = PolicyTrainConfig { seed, ..quick(200) };
        let cfg = MbilConfig {
            alpha: 0.0,
            beta: 1.0,
            train,
            ..MbilConfig::default()
        };
        let gaps = vec![1.5; b.tuples.len()];
        let (m, mr) = train_policy(&b, &space, &gaps, &cfg, None).unwrap();
        let (bc, br) = train_bc_pairs(&b.pairs, &space, &train, None).unwrap();
        assert_eq!(m.store(), bc.store());
        let pol = |r: &mbil_core::mbil::TrainReport| r.records.iter().map(|x| x.policy_loss).collect::<Vec<_>>();
        assert_eq!(pol(&mr), pol(&br));
    }
}

#[test]
fn objective_decreases_early() {
    let d = pointmass_data(5, 6);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let gaps = log_density_gap(&b.tuples, &space, &PolicyChainExpert, &Flat, 0.0).unwrap();
    let cfg = MbilConfig {
        alpha: 0.1,
        beta: 1.0,
        train: quick(100),
        ..MbilConfig::default()
    };
    let (_, rep) = train_policy(&b, &space, &gaps, &cfg, None).unwrap();
    let mean = |r: &[mbil_core::mbil::IterationRecord]| r.iter().map(|x| x.total_loss).sum::<f64>() / r.len() as f64;
    assert!(mean(&rep.records[90..]) < mean(&rep.records[..10]));
}

/// True chain `log π_D(a'|s') + log T(s'|s,a)` on PointMass.
struct PolicyChainExpert;

impl ConditionalDensity for PolicyChainExpert {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> mbil_core::Result<Vec<f64>> {
        use mbil_core::data::Action;
        let env = PointMass::default();
        let e = PointMassExpert::new(env.clone());
        (0..x.rows())
            .map(|r| {
                let (xr, cr) = (x.row(r), c.row(r));
                let t = env.transition_logpdf(&cr[..2], &Action::Continuous(cr[2..].to_vec()), &xr[..2])?;
                Ok(e.logpdf(&xr[..2], &Action::Continuous(xr[2..].to_vec()))? + t.log_density)
            })
            .collect()
    }
}

fn grid_data(w: usize, n: usize, seed: u64) -> mbil_core::data::Dataset {
    let g = GridWorld::new(w, w, Prob::new(1, 10));
    generate_demonstrations(&g, &GridExpert::optimal(&g, DEFAULT_EPSILON), n, 50, seed).unwrap()
}

#[test]
fn frozen_densities_are_untouched_by_policy_training() {
    let d = grid_data(3, 30, 9);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let settings = DensitySettings {
        estimator: DensityEstimator::Flow,
        hidden: 8,
        fit: mbil_core::flow::DensityFitConfig {
            steps: 20,
            batch_size: 32,
            ..DensitySettings::default().fit
        },
        ..DensitySettings::default()
    };
    let dens = fit_densities(&b.tuples, &space, &settings, 0).unwrap();
    let before = dens.clone();
    let gaps = dens.gaps(&b.tuples, &space).unwrap();
    let cfg = MbilConfig {
        train: quick(50),
        density: settings,
        ..MbilConfig::default()
    };
    train_policy(&b, &space, &gaps, &cfg, None).unwrap();
    assert_eq!(dens, before);
    assert_eq!(dens.gaps(&b.tuples, &space).unwrap(), gaps);
    assert_eq!(fit_densities(&b.tuples, &space, &settings, 0).unwrap(), before);
}

#[test]
fn oracle_densities_balance_exactly_on_demonstrations() {
    let g = GridWorld::new(3, 3, Prob::new(1, 10));
    let expert = GridExpert::optimal(&g, DEFAULT_EPSILON);
    let d = generate_demonstrations(&g, &expert, 50, 50, 1).unwrap();
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    let chain = GridOracle { expert: expert.clone(), kernel: false };
    let kernel = GridOracle { expert: expert.clone(), kernel: true };
    let inp = density_inputs(&b.tuples, &space).unwrap();
    let p = chain.log_density(&inp.chain_x, &inp.cond).unwrap();
    let t = kernel.log_density(&inp.kernel_x, &inp.cond).unwrap();
    for i in 0..b.tuples.len() {
        let s2 = b.tuples.next_states.row(i);
        let mbil_core::data::Actions::Discrete(a2) = &b.tuples.next_actions else { unreachable!() };
        let pi = expert.logpdf(s2, &mbil_core::data::Action::Discrete(a2[i])).unwrap();
        assert!(balance_residual(p[i], pi, t[i]) < 1e-25);
    }
}

#[test]
fn tabular_estimates_recover_oracle_at_3x3() {
    let g = GridWorld::new(3, 3, Prob::new(1, 10));
    let expert = GridExpert::optimal(&g, DEFAULT_EPSILON);
    let d = generate_demonstrations(&g, &expert, 3000, 50, 2).unwrap();
    let b = build_tuples(&d).unwrap();
    let space = ActionSpace::Discrete { n: 4 };
    let settings = DensitySettings {
        estimator: DensityEstimator::Tabular,
        ..DensitySettings::default()
    };
    let dens = fit_densities(&b.tuples, &space, &settings, 0).unwrap();
    let hat = dens.gaps(&b.tuples, &space).unwrap();
    let truth = log_density_gap(
        &b.tuples,
        &space,
        &GridOracle { expert: expert.clone(), kernel: false },
        &GridOracle { expert, kernel: true },
        0.0,
    )
    .unwrap();
    let err = hat.iter().zip(&truth).map(|(h, t)| (h - t).abs()).sum::<f64>() / hat.len() as f64;
    assert!(err < 0.05, "mean gap error {err}");
}

/// `-∞` at one row, zero elsewhere.
struct HoleAt(usize);

impl ConditionalDensity for HoleAt {
    fn log_density(&self, x: &Tensor, _c: &Tensor) -> mbil_core::Result<Vec<f64>> {
        Ok((0..x.rows()).map(|r| if r == self.0 { f64::NEG_INFINITY } else { 0.0 }).collect())
    }
}

#[test]
fn non_finite_gap_names_the_tuple() {
    let d = grid_data(3, 5, 3);
    let b = build_tuples(&d).unwrap();
    let space = d.env.action_space;
    assert!(b.tuples.len() > 4);
    for (chain, kernel) in [(HoleAt(4), HoleAt(usize::MAX)), (HoleAt(usize::MAX), HoleAt(4))] {
        match log_density_gap(&b.tuples, &space, &chain, &kernel, 0.0) {
            Err(Error::NonFiniteDensity { index }) => assert_eq!(index, 4),
            other => panic!("{other:?}"),
        }
    }
    // a tabular chain that never saw a transition gives -inf as well
    let inp = density_inputs(&b.tuples, &space).unwrap();
    let keep: Vec<usize> = (1..b.tuples.len()).collect();
    let chain = TabularDensity::fit(&inp.chain_x.select_rows(&keep), &inp.cond.select_rows(&keep)).unwrap();
    let lp = chain.log_prob(&inp.chain_x, &inp.cond);
    assert!(lp.iter().skip(1).all(|v| v.is_finite()));
}

#[test]
fn invalid_weights_are_rejected() {
    for (a, b) in [(-1.0, 1.0), (0.0, 0.0), (f64::NAN, 1.0)] {
        let cfg = MbilConfig { alpha: a, beta: b, ..MbilConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
