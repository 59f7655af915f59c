//! Markov balance-based imitation learning.
//!
//! Expert data satisfies `P(s', a' | s, a) = π_D(a' | s') · T(s' | s, a)`
//! for the state-action chain `P` and the transition kernel `T`. After
//! fitting `P̂` and `T̂` by maximum likelihood and freezing them, the policy
//! minimizes
//!
//! ```text
//! α · mean_B [log P̂(s',a'|s,a) - log π_θ(a'|s') - log T̂(s'|s,a)]² + β · L_BC(π_θ)
//! ```
//!
//! over batches drawn with replacement from the demonstration buffer.
//! Because the density models are frozen, `log P̂ - log T̂` is evaluated once
//! per tuple before the policy loop starts.

use alloc::vec::Vec;

use crate::adam::{AdamConfig, AdamState};
use crate::data::{ActionSpace, Actions, Batch, BatchIter, Dataset, PairBuffer, TupleBuffer};
use crate::error::{Error, Result};
use crate::flow::{self, DensityFitConfig, FitReport, FlowConfig, FlowModel, Frozen};
use crate::math::{self, LN_2PI};
use crate::nn::{self, Bound};
use crate::policy::{Policy, PolicyLossKind};
use crate::rng;
use crate::tabular::TabularDensity;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(log P̂ - log π - log T̂)²`.
pub fn balance_residual(p_log: f64, pi_log: f64, t_log: f64) -> f64 {
    let r = p_log - pi_log - t_log;
    r * r
}

/// Demonstrations rearranged for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffers {
    /// `(s_t, a_t, s_{t+1}, a_{t+1})` for every `t` with a successor in the
    /// same trajectory.
    pub tuples: TupleBuffer,
    /// Every `(s_t, a_t)`, including each trajectory's last pair.
    pub pairs: PairBuffer,
}

pub fn build_tuples(dataset: &Dataset) -> Result<Buffers> {
    if dataset.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = dataset.env.state_dim;
    let (mut s, mut a, mut s2, mut a2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut ps, mut pa) = (Vec::new(), Vec::new());
    for tr in &dataset.trajectories {
        if tr.is_empty() {
            return Err(Error::InvalidState("trajectory without (s, a) pairs".into()));
        }
        for t in 0..tr.len() {
            ps.extend_from_slice(&tr.states[t]);
            pa.push(tr.actions[t].clone());
            if t + 1 < tr.len() {
                s.extend_from_slice(&tr.states[t]);
                a.push(tr.actions[t].clone());
                s2.extend_from_slice(&tr.states[t + 1]);
                a2.push(tr.actions[t + 1].clone());
            }
        }
    }
    let n_pairs = pa.len();
    let pairs = PairBuffer {
        states: Tensor::matrix(n_pairs, dim, ps)?,
        actions: Actions::from_slice(&pa)?,
    };
    let n = a.len();
    let empty_actions = || match dataset.env.action_space {
        ActionSpace::Discrete { .. } => Actions::Discrete(Vec::new()),
        ActionSpace::Continuous { dim, .. } => Actions::Continuous(Tensor::new(alloc::vec![0, dim], Vec::new()).unwrap_or_else(|_| Tensor::zeros(&[1, dim]))),
    };
    let tuples = if n == 0 {
        TupleBuffer {
            states: empty_states(dim),
            actions: empty_actions(),
            next_states: empty_states(dim),
            next_actions: empty_actions(),
        }
    } else {
        TupleBuffer {
            states: Tensor::matrix(n, dim, s)?,
            actions: Actions::from_slice(&a)?,
            next_states: Tensor::matrix(n, dim, s2)?,
            next_actions: Actions::from_slice(&a2)?,
        }
    };
    Ok(Buffers { tuples, pairs })
}

fn empty_states(dim: usize) -> Tensor {
    // zero-row tensors are not constructible; an empty buffer is signalled by
    // its action list, and these states are never read
    Tensor::zeros(&[1, dim])
}

/// Something that evaluates `log p(x_r | c_r)` row by row.
pub trait ConditionalDensity {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>>;
}

impl ConditionalDensity for FlowModel {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        self.log_prob(x, c)
    }
}

impl ConditionalDensity for TabularDensity {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        Ok(self.log_prob(x, c))
    }
}

impl<T: ConditionalDensity> ConditionalDensity for Frozen<T> {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        (**self).log_density(x, c)
    }
}

/// Inputs of the two density models for a set of tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityInputs {
    /// `(s', enc(a'))`
    pub chain_x: Tensor,
    /// `(s, enc(a))`, shared by both models.
    pub cond: Tensor,
    /// `s'`
    pub kernel_x: Tensor,
}

fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.rows() * (ca + cb));
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::matrix(a.rows(), ca + cb, data)
}

pub fn density_inputs(tuples: &TupleBuffer, space: &ActionSpace) -> Result<DensityInputs> {
    if tuples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = tuples.actions.features(space)?;
    let a2 = tuples.next_actions.features(space)?;
    Ok(DensityInputs {
        chain_x: hcat(&tuples.next_states, &a2)?,
        cond: hcat(&tuples.states, &a)?,
        kernel_x: tuples.next_states.clone(),
    })
}

/// `log P̂(s',a'|s,a) - log T̂(s'|s,a) + offset` for every tuple.
pub fn log_density_gap(
    tuples: &TupleBuffer,
    space: &ActionSpace,
    chain: &impl ConditionalDensity,
    kernel: &impl ConditionalDensity,
    offset: f64,
) -> Result<Vec<f64>> {
    let inp = density_inputs(tuples, space)?;
    let p = chain.log_density(&inp.chain_x, &inp.cond)?;
    let t = kernel.log_density(&inp.kernel_x, &inp.cond)?;
    p.iter()
        .zip(&t)
        .enumerate()
        .map(|(index, (p, t))| {
            let g = p - t + offset;
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::NonFiniteDensity { index })
            }
        })
        .collect()
}

/// Log-mass correction for one-hot action coordinates smoothed by Gaussian
/// noise of std `sigma`: the smoothed density at a one-hot vertex is
/// `P(a') · N(0; 0, σ² I_n)`, so adding `(n/2) · ln(2πσ²)` recovers `ln P(a')`.
pub fn onehot_log_mass_offset(n_actions: usize, sigma: f64) -> f64 {
    if sigma > 0.0 {
        0.5 * n_actions as f64 * (LN_2PI + 2.0 * math::ln(sigma))
    } else {
        0.0
    }
}

/// Loss nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub dynamics: Option<Var>,
    pub policy: Var,
}

/// Builds `α · dynamics + β · policy` on `tape`. `gaps[r]` is
/// `log P̂ - log T̂` for tuple row `r` of `batch`. A weight of exactly zero
/// drops its term from the total (the term is still evaluated for logging).
#[allow(clippy::too_many_arguments)]
pub fn objective_tape(
    tape: &mut Tape,
    policy: &Policy,
    params: &Bound,
    batch: &Batch,
    gaps: &[f64],
    alpha: f64,
    beta: f64,
    kind: PolicyLossKind,
) -> Result<ObjectiveTerms> {
    let s = tape.constant(batch.pairs.states.clone());
    let pol = policy.bc_loss_tape(tape, params, s, &batch.pairs.actions, kind)?;
    let dynamics = if batch.tuples.is_empty() {
        None
    } else {
        if gaps.len() != batch.tuples.len() {
            return Err(Error::Shape {
                op: "mbil_objective",
                lhs: alloc::vec![gaps.len()],
                rhs: alloc::vec![batch.tuples.len()],
            });
        }
        let s2 = tape.constant(batch.tuples.next_states.clone());
        let lp = policy.log_prob_tape(tape, params, s2, &batch.tuples.next_actions)?;
        let g = tape.constant(Tensor::matrix(gaps.len(), 1, gaps.to_vec())?);
        let r = tape.sub(g, lp)?;
        let r2 = tape.square(r)?;
        Some(tape.mean(r2)?)
    };
    let weighted_pol = if beta == 0.0 { None } else { Some(tape.scale(pol, beta)?) };
    let weighted_dyn = match dynamics {
        Some(d) if alpha != 0.0 => Some(tape.scale(d, alpha)?),
        _ => None,
    };
    let total = match (weighted_dyn, weighted_pol) {
        (Some(d), Some(p)) => tape.add(d, p)?,
        (Some(d), None) => d,
        (None, Some(p)) => p,
        (None, None) => tape.scale(pol, 0.0)?,
    };
    Ok(ObjectiveTerms {
        total,
        dynamics,
        policy: pol,
    })
}

/// Value of the objective on `batch`, evaluating both density models on the fly.
#[allow(clippy::too_many_arguments)]
pub fn mbil_objective(
    batch: &Batch,
    policy: &Policy,
    chain: &impl ConditionalDensity,
    kernel: &impl ConditionalDensity,
    space: &ActionSpace,
    offset: f64,
    alpha: f64,
    beta: f64,
    kind: PolicyLossKind,
) -> Result<f64> {
    let gaps = if batch.tuples.is_empty() {
        Vec::new()
    } else {
        log_density_gap(&batch.tuples, space, chain, kernel, offset)?
    };
    let mut tape = Tape::new();
    let p = policy.store().bind(&mut tape, false);
    let terms = objective_tape(&mut tape, policy, &p, batch, &gaps, alpha, beta, kind)?;
    Ok(tape.item(terms.total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Selection {
    /// Parameters after the last iteration.
    Final,
    /// Parameters at the best periodic evaluation.
    Best,
}

/// Settings shared by MBIL and standalone behavior cloning.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolicyTrainConfig {
    pub loss: PolicyLossKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub hidden: usize,
    pub seed: u64,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
    pub selection: Selection,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            loss: PolicyLossKind::Nll,
            iterations: 5000,
            batch_size: 64,
            adam: AdamConfig::with_lr(1e-3),
            hidden: nn::DEFAULT_HIDDEN,
            seed: 0,
            eval_every: 500,
            selection: Selection::Final,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DensityEstimator {
    Flow,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DensitySettings {
    pub estimator: DensityEstimator,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub fit: DensityFitConfig,
    /// Apply [`onehot_log_mass_offset`] for discrete actions under a flow.
    pub onehot_correction: bool,
}

impl Default for DensitySettings {
    fn default() -> Self {
        Self {
            estimator: DensityEstimator::Flow,
            blocks: flow::DEFAULT_BLOCKS,
            hidden: nn::DEFAULT_HIDDEN,
            clamp: flow::DEFAULT_CLAMP,
            fit: DensityFitConfig::default(),
            onehot_correction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MbilConfig {
    pub alpha: f64,
    pub beta: f64,
    pub train: PolicyTrainConfig,
    pub density: DensitySettings,
}

impl Default for MbilConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 1.0,
            train: PolicyTrainConfig::default(),
            density: DensitySettings::default(),
        }
    }
}

impl MbilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) {
            return Err(Error::Config(alloc::format!(
                "need alpha, beta >= 0 with alpha + beta > 0 (got {}, {})",
                self.alpha,
                self.beta
            )));
        }
        self.train.validate()?;
        self.density.fit.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: usize,
    /// `NaN` when the buffer has no tuples.
    pub dynamics_loss: f64,
    pub policy_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    /// Number of completed updates when the evaluation ran.
    pub iteration: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    /// Iteration count of the returned parameters.
    pub selected_iteration: usize,
}

/// Mean and standard deviation of evaluation returns for a policy snapshot.
pub type Evaluator<'a> = dyn FnMut(&Policy) -> Result<(f64, f64)> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub enum DensityModel {
    Flow(Frozen<FlowModel>),
    Tabular(TabularDensity),
}

impl ConditionalDensity for DensityModel {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        match self {
            DensityModel::Flow(f) => f.log_density(x, c),
            DensityModel::Tabular(t) => t.log_density(x, c),
        }
    }
}

/// `P̂(s',a'|s,a)` and `T̂(s'|s,a)` after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Densities {
    pub chain: DensityModel,
    pub kernel: DensityModel,
    pub chain_fit: Option<FitReport>,
    pub kernel_fit: Option<FitReport>,
    /// Added to every `log P̂ - log T̂`.
    pub offset: f64,
}

impl Densities {
    pub fn gaps(&self, tuples: &TupleBuffer, space: &ActionSpace) -> Result<Vec<f64>> {
        log_density_gap(tuples, space, &self.chain, &self.kernel, self.offset)
    }
}

/// Fits `P̂` on `(x = (s', a'), c = (s, a))` and `T̂` on `(x = s', c = (s, a))`.
pub fn fit_densities(tuples: &TupleBuffer, space: &ActionSpace, settings: &DensitySettings, seed: u64) -> Result<Densities> {
    let inp = density_inputs(tuples, space)?;
    match settings.estimator {
        DensityEstimator::Tabular => Ok(Densities {
            chain: DensityModel::Tabular(TabularDensity::fit(&inp.chain_x, &inp.cond)?),
            kernel: DensityModel::Tabular(TabularDensity::fit(&inp.kernel_x, &inp.cond)?),
            chain_fit: None,
            kernel_fit: None,
            offset: 0.0,
        }),
        DensityEstimator::Flow => {
            let make = |x_dim: usize| FlowConfig {
                blocks: settings.blocks,
                hidden: settings.hidden,
                clamp: settings.clamp,
                ..FlowConfig::new(x_dim, inp.cond.cols())
            };
            let chain_cfg = DensityFitConfig {
                seed: seed.wrapping_mul(2).wrapping_add(rng::stream::DENSITY_P),
                ..settings.fit
            };
            let kernel_cfg = DensityFitConfig {
                seed: seed.wrapping_mul(2).wrapping_add(rng::stream::DENSITY_T),
                ..settings.fit
            };
            let chain = FlowModel::new(make(inp.chain_x.cols()), chain_cfg.seed)?;
            let kernel = FlowModel::new(make(inp.kernel_x.cols()), kernel_cfg.seed)?;
            let (chain, chain_fit) = flow::fit_density(chain, &inp.chain_x, &inp.cond, &chain_cfg)?;
            let (kernel, kernel_fit) = flow::fit_density(kernel, &inp.kernel_x, &inp.cond, &kernel_cfg)?;
            let offset = match *space {
                ActionSpace::Discrete { n } if settings.onehot_correction => {
                    onehot_log_mass_offset(n, settings.fit.noise_sigma)
                }
                _ => 0.0,
            };
            Ok(Densities {
                chain: DensityModel::Flow(chain),
                kernel: DensityModel::Flow(kernel),
                chain_fit: Some(chain_fit),
                kernel_fit: Some(kernel_fit),
                offset,
            })
        }
    }
}

fn should_eval(cfg: &PolicyTrainConfig, done: usize) -> bool {
    cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.iterations)
}

/// Shared policy-optimization loop. `step_loss` builds the scalar loss for
/// one iteration and returns `(total, dynamics, policy)` nodes.
pub(crate) fn run_policy_loop(
    mut policy: Policy,
    cfg: &PolicyTrainConfig,
    mut evaluator: Option<&mut Evaluator<'_>>,
    mut step_loss: impl FnMut(&mut Tape, &Policy, &Bound, usize) -> Result<(Var, Option<Var>, Var, Vec<usize>)>,
) -> Result<(Policy, TrainReport)> {
    let mut adam = AdamState::new(cfg.adam, policy.store().numel());
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Policy, usize)> = None;
    for it in 0..cfg.iterations {
        let mut tape = Tape::new();
        let params = policy.store().bind(&mut tape, true);
        let (total, dynamics, pol, batch) = match step_loss(&mut tape, &policy, &params, it) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step: it, batch: Vec::new() }),
            Err(e) => return Err(e),
        };
        let total_value = tape.item(total);
        if !total_value.is_finite() {
            return Err(Error::Diverged { step: it, batch });
        }
        report.records.push(IterationRecord {
            iteration: it,
            dynamics_loss: dynamics.map_or(f64::NAN, |d| tape.item(d)),
            policy_loss: tape.item(pol),
            total_loss: total_value,
        });
        tape.backward(total)?;
        let grads = params.flat_grad(&tape);
        adam.step_store(policy.store_mut(), &grads)
            .map_err(|_| Error::Diverged { step: it, batch })?;
        let done = it + 1;
        if let Some(eval) = evaluator.as_deref_mut() {
            if should_eval(cfg, done) {
                let (mean, std) = eval(&policy)?;
                report.evals.push(EvalRecord {
                    iteration: done,
                    mean,
                    std,
                });
                if cfg.selection == Selection::Best && best.as_ref().is_none_or(|(m, _, _)| mean > *m) {
                    best = Some((mean, policy.clone(), done));
                }
            }
        }
    }
    report.selected_iteration = cfg.iterations;
    if let Some((_, p, it)) = best {
        report.selected_iteration = it;
        policy = p;
    }
    Ok((policy, report))
}

/// Policy optimization against frozen densities given per-tuple gaps.
pub fn train_policy(
    buffers: &Buffers,
    space: &ActionSpace,
    gaps: &[f64],
    config: &MbilConfig,
    evaluator: Option<&mut Evaluator<'_>>,
) -> Result<(Policy, TrainReport)> {
    config.validate()?;
    if gaps.len() != buffers.tuples.len() {
        return Err(Error::Shape {
            op: "train_policy",
            lhs: alloc::vec![gaps.len()],
            rhs: alloc::vec![buffers.tuples.len()],
        });
    }
    let cfg = &config.train;
    let policy = Policy::for_space(buffers.pairs.states.cols(), space, cfg.hidden, cfg.seed);
    let mut batches = BatchIter::new(&buffers.tuples, &buffers.pairs, cfg.batch_size, cfg.seed)?;
    run_policy_loop(policy, cfg, evaluator, |tape, policy, params, _| {
        let batch = batches.next().expect("batch stream is endless");
        let batch_gaps: Vec<f64> = batch.tuple_idx.iter().map(|&i| gaps[i]).collect();
        let terms = objective_tape(tape, policy, params, &batch, &batch_gaps, config.alpha, config.beta, cfg.loss)?;
        Ok((terms.total, terms.dynamics, terms.policy, batch.pair_idx))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbilOutcome {
    pub policy: Policy,
    pub report: TrainReport,
    pub densities: Densities,
}

/// Full pipeline: tuples, density fitting, frozen gaps, policy optimization.
pub fn train(dataset: &Dataset, config: &MbilConfig, evaluator: Option<&mut Evaluator<'_>>) -> Result<MbilOutcome> {
    config.validate()?;
    dataset.validate()?;
    let buffers = build_tuples(dataset)?;
    if buffers.tuples.is_empty() {
        return Err(Error::Config(
            "no (s, a, s', a') tuples: every trajectory has a single pair".into(),
        ));
    }
    let space = dataset.env.action_space;
    let densities = fit_densities(&buffers.tuples, &space, &config.density, config.train.seed)?;
    let gaps = densities.gaps(&buffers.tuples, &space)?;
    let (policy, report) = train_policy(&buffers, &space, &gaps, config, evaluator)?;
    Ok(MbilOutcome {
        policy,
        report,
        densities,
    })
}
