//! Categorical and diagonal-Gaussian policies with behavior-cloning losses.

use alloc::vec::Vec;

use crate::data::{Action, ActionSpace, Actions};
use crate::error::{Error, Result};
use crate::math::LN_2PI;
use crate::nn::{Bound, Linear, Mlp, OutputActivation, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PolicyLossKind {
    /// Mean negative log-likelihood of the expert action.
    Nll,
    /// Mean squared error between the policy mean and the expert action.
    Mse,
}

/// Softmax over a finite action set.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicy {
    pub store: ParamStore,
    pub net: Mlp,
    pub state_dim: usize,
    pub n_actions: usize,
}

impl CategoricalPolicy {
    pub fn new(state_dim: usize, n_actions: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::two_hidden(&mut store, "policy", state_dim, hidden, n_actions, OutputActivation::Softmax, rng);
        Self {
            store,
            net,
            state_dim,
            n_actions,
        }
    }

    /// `[B, |A|]` log-probabilities.
    fn log_probs(&self, tape: &mut Tape, p: &Bound, states: Var) -> Result<Var> {
        let h = self.net.trunk(tape, p, states)?;
        let logits = self.net.output_layer().forward(tape, p, h)?;
        tape.log_softmax(logits)
    }

    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let s = tape.constant(Tensor::matrix(1, state.len(), state.to_vec())?);
        let probs = self.net.forward(&mut tape, &p, s)?;
        Ok(tape.value(probs).data().to_vec())
    }
}

/// Diagonal Gaussian with separate mean and log-std heads on a shared trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub store: ParamStore,
    /// Two ReLU layers; the heads read its (rectified) output.
    pub trunk: Mlp,
    pub mean_head: Linear,
    pub log_std_head: Linear,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let trunk = Mlp::new(
            &mut store,
            "trunk",
            &[state_dim, hidden, hidden],
            OutputActivation::Identity,
            rng,
        );
        let mean_head = Linear::new(&mut store, "mean", hidden, action_dim, rng);
        let log_std_head = Linear::new(&mut store, "log_std", hidden, action_dim, rng);
        Self {
            store,
            trunk,
            mean_head,
            log_std_head,
            state_dim,
            action_dim,
        }
    }

    /// `(mean, clamped log_std)`, both `[B, action_dim]`.
    pub fn heads(&self, tape: &mut Tape, p: &Bound, states: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, p, states)?;
        let h = tape.relu(h)?;
        let mean = self.mean_head.forward(tape, p, h)?;
        let raw = self.log_std_head.forward(tape, p, h)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok((mean, log_std))
    }

    pub fn mean_and_std(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let s = tape.constant(Tensor::matrix(1, state.len(), state.to_vec())?);
        let (m, ls) = self.heads(&mut tape, &p, s)?;
        let std = tape.value(ls).data().iter().map(|&l| crate::math::exp(l)).collect();
        Ok((tape.value(m).data().to_vec(), std))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Categorical(CategoricalPolicy),
    Gaussian(GaussianPolicy),
}

impl Policy {
    /// Fresh policy for `space`, seeded.
    pub fn for_space(state_dim: usize, space: &ActionSpace, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, rng::stream::POLICY_INIT);
        match *space {
            ActionSpace::Discrete { n } => Policy::Categorical(CategoricalPolicy::new(state_dim, n, hidden, &mut rng)),
            ActionSpace::Continuous { dim, .. } => {
                Policy::Gaussian(GaussianPolicy::new(state_dim, dim, hidden, &mut rng))
            }
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Policy::Categorical(p) => &p.store,
            Policy::Gaussian(p) => &p.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Policy::Categorical(p) => &mut p.store,
            Policy::Gaussian(p) => &mut p.store,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Categorical(p) => p.state_dim,
            Policy::Gaussian(p) => p.state_dim,
        }
    }

    /// Width of the hidden layers.
    pub fn hidden(&self) -> usize {
        match self {
            Policy::Categorical(p) => p.net.layers[0].out_dim,
            Policy::Gaussian(p) => p.trunk.layers[0].out_dim,
        }
    }

    pub fn action_space_dim(&self) -> usize {
        match self {
            Policy::Categorical(p) => p.n_actions,
            Policy::Gaussian(p) => p.action_dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Policy::Categorical(_) => "categorical",
            Policy::Gaussian(_) => "gaussian",
        }
    }

    fn check_states(&self, tape: &Tape, states: Var) -> Result<()> {
        let t = tape.value(states);
        if t.cols() != self.state_dim() {
            return Err(Error::Shape {
                op: "policy",
                lhs: t.shape().to_vec(),
                rhs: alloc::vec![self.state_dim()],
            });
        }
        Ok(())
    }

    /// Per-row `log π(a_r | s_r)` as a `[B, 1]` node.
    pub fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, states: Var, actions: &Actions) -> Result<Var> {
        self.check_states(tape, states)?;
        match (self, actions) {
            (Policy::Categorical(c), Actions::Discrete(idx)) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= c.n_actions) {
                    return Err(Error::ActionIndex {
                        index: bad,
                        n: c.n_actions,
                    });
                }
                let lp = c.log_probs(tape, p, states)?;
                tape.gather(lp, idx)
            }
            (Policy::Gaussian(g), Actions::Continuous(a)) => {
                if a.cols() != g.action_dim {
                    return Err(Error::Shape {
                        op: "gaussian_log_prob",
                        lhs: a.shape().to_vec(),
                        rhs: alloc::vec![g.action_dim],
                    });
                }
                let (mean, log_std) = g.heads(tape, p, states)?;
                let av = tape.constant(a.clone());
                let diff = tape.sub(av, mean)?;
                let nls = tape.neg(log_std)?;
                let inv_std = tape.exp(nls)?;
                let z = tape.mul(diff, inv_std)?;
                let z2 = tape.square(z)?;
                let half = tape.scale(z2, -0.5)?;
                let t = tape.sub(half, log_std)?;
                let t = tape.add_scalar(t, -0.5 * LN_2PI)?;
                tape.sum_last(t)
            }
            _ => Err(Error::Unsupported("action kind does not match the policy".into())),
        }
    }

    /// Scalar behavior-cloning loss on a batch.
    pub fn bc_loss_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        states: Var,
        actions: &Actions,
        kind: PolicyLossKind,
    ) -> Result<Var> {
        match kind {
            PolicyLossKind::Nll => {
                let lp = self.log_prob_tape(tape, p, states, actions)?;
                let m = tape.mean(lp)?;
                tape.neg(m)
            }
            PolicyLossKind::Mse => {
                let (Policy::Gaussian(g), Actions::Continuous(a)) = (self, actions) else {
                    return Err(Error::Unsupported(
                        "mse behavior cloning is only defined for Gaussian policies".into(),
                    ));
                };
                self.check_states(tape, states)?;
                let (mean, _) = g.heads(tape, p, states)?;
                let av = tape.constant(a.clone());
                let d = tape.sub(mean, av)?;
                let sq = tape.square(d)?;
                tape.mean(sq)
            }
        }
    }

    pub fn log_prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store().bind(&mut tape, false);
        let s = tape.constant(Tensor::matrix(1, state.len(), state.to_vec())?);
        let a = Actions::from_slice(core::slice::from_ref(action))?;
        let lp = self.log_prob_tape(&mut tape, &p, s, &a)?;
        Ok(tape.item(lp))
    }

    pub fn bc_loss(&self, states: &Tensor, actions: &Actions, kind: PolicyLossKind) -> Result<f64> {
        if states.rows() == 0 || actions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut tape = Tape::new();
        let p = self.store().bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let l = self.bc_loss_tape(&mut tape, &p, s, actions, kind)?;
        Ok(tape.item(l))
    }

    /// Actions for every row of `states`: the mode when `deterministic`
    /// (argmax / mean), otherwise a draw from `π(· | s)`.
    pub fn act_batch(&self, states: &Tensor, deterministic: bool, rng: &mut Rng) -> Result<Vec<Action>> {
        let mut tape = Tape::new();
        let p = self.store().bind(&mut tape, false);
        let s = tape.constant(states.clone());
        self.check_states(&tape, s)?;
        match self {
            Policy::Categorical(c) => {
                let lp = c.log_probs(&mut tape, &p, s)?;
                let lp = tape.value(lp);
                (0..lp.rows())
                    .map(|r| {
                        let row = lp.row(r);
                        let a = if deterministic {
                            argmax(row)
                        } else {
                            let u = rng::uniform(rng, 0.0, 1.0);
                            let mut acc = 0.0;
                            let mut pick = row.len() - 1;
                            for (i, &l) in row.iter().enumerate() {
                                acc += crate::math::exp(l);
                                if u < acc {
                                    pick = i;
                                    break;
                                }
                            }
                            pick
                        };
                        Ok(Action::Discrete(a))
                    })
                    .collect()
            }
            Policy::Gaussian(g) => {
                let (m, ls) = g.heads(&mut tape, &p, s)?;
                let (m, ls) = (tape.value(m), tape.value(ls));
                (0..m.rows())
                    .map(|r| {
                        let a = m
                            .row(r)
                            .iter()
                            .zip(ls.row(r))
                            .map(|(&mu, &l)| {
                                if deterministic {
                                    mu
                                } else {
                                    mu + crate::math::exp(l) * rng::normal(rng)
                                }
                            })
                            .collect();
                        Ok(Action::Continuous(a))
                    })
                    .collect()
            }
        }
    }

    pub fn sample(&self, state: &[f64], seed: u64) -> Result<Action> {
        let mut rng = rng::seeded(seed, rng::stream::SAMPLE);
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        Ok(self.act_batch(&s, false, &mut rng)?.remove(0))
    }

    pub fn mode(&self, state: &[f64]) -> Result<Action> {
        let mut rng = rng::seeded(0, 0);
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        Ok(self.act_batch(&s, true, &mut rng)?.remove(0))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
