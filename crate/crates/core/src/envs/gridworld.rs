//! Slippery grid with an absorbing goal, exact in rational arithmetic.
//!
//! Actions are `0 = up, 1 = down, 2 = left, 3 = right`; states are
//! `[row, col]`. An action moves in its intended direction with probability
//! `1 - p_slip` and in each perpendicular direction with `p_slip / 2`.
//! Moves into a wall leave the agent in place. Every step from a non-goal
//! cell costs `-1`; the goal is absorbing and the episode ends on entry.

use alloc::vec;
use alloc::vec::Vec;

use num_rational::Ratio;

use super::{Environment, Expert, Step, TransitionDensity};
use crate::data::{Action, ActionSpace, EnvDescriptor};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};

pub type Prob = Ratio<i64>;

pub const N_ACTIONS: usize = 4;
pub const DEFAULT_EPSILON: Prob = Ratio::new_raw(1, 20);

const MOVES: [(isize, isize); N_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn perpendicular(a: usize) -> [usize; 2] {
    if a < 2 {
        [2, 3]
    } else {
        [0, 1]
    }
}

pub fn to_f64(p: Prob) -> f64 {
    *p.numer() as f64 / *p.denom() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub p_slip: Prob,
    pub goal: (usize, usize),
    pub horizon: usize,
}

impl Default for GridWorld {
    fn default() -> Self {
        Self::new(5, 5, Ratio::new(1, 10))
    }
}

/// `[s][a][s']` transition probabilities.
pub type TransitionTable = Vec<Vec<Vec<Prob>>>;
/// `[s][a]` action probabilities.
pub type PolicyTable = Vec<Vec<Prob>>;

impl GridWorld {
    /// Goal in the bottom-right corner.
    pub fn new(width: usize, height: usize, p_slip: Prob) -> Self {
        Self {
            width,
            height,
            p_slip,
            goal: (height - 1, width - 1),
            horizon: 50,
        }
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.width + cell.1
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn goal_index(&self) -> usize {
        self.index(self.goal)
    }

    pub fn encode(&self, cell: (usize, usize)) -> Vec<f64> {
        vec![cell.0 as f64, cell.1 as f64]
    }

    pub fn decode(&self, state: &[f64]) -> Result<(usize, usize)> {
        let bad = || Error::InvalidState(alloc::format!("{state:?} is not a cell of a {}x{} grid", self.height, self.width));
        if state.len() != 2 {
            return Err(bad());
        }
        let (r, c) = (state[0], state[1]);
        if libm::trunc(r) != r || libm::trunc(c) != c || r < 0.0 || c < 0.0 {
            return Err(bad());
        }
        let (r, c) = (r as usize, c as usize);
        if r >= self.height || c >= self.width {
            return Err(bad());
        }
        Ok((r, c))
    }

    fn action_index(&self, action: &Action) -> Result<usize> {
        match action {
            Action::Discrete(a) if *a < N_ACTIONS => Ok(*a),
            Action::Discrete(a) => Err(Error::ActionIndex {
                index: *a,
                n: N_ACTIONS,
            }),
            Action::Continuous(_) => Err(Error::ActionRange("grid actions are discrete".into())),
        }
    }

    /// Cell reached by moving in direction `dir`, staying put at walls.
    pub fn moved(&self, cell: (usize, usize), dir: usize) -> (usize, usize) {
        let (dr, dc) = MOVES[dir];
        let r = cell.0 as isize + dr;
        let c = cell.1 as isize + dc;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            cell
        } else {
            (r as usize, c as usize)
        }
    }

    /// `(direction, probability)` of every slip outcome of `action`.
    pub fn outcomes(&self, action: usize) -> [(usize, Prob); 3] {
        let half = self.p_slip / 2;
        let [p1, p2] = perpendicular(action);
        [(action, Prob::from_integer(1) - self.p_slip), (p1, half), (p2, half)]
    }

    pub fn transition_table(&self) -> TransitionTable {
        let n = self.n_states();
        let zero = Prob::from_integer(0);
        let mut t = vec![vec![vec![zero; n]; N_ACTIONS]; n];
        for s in 0..n {
            for a in 0..N_ACTIONS {
                if s == self.goal_index() {
                    t[s][a][s] = Prob::from_integer(1);
                    continue;
                }
                for (dir, p) in self.outcomes(a) {
                    let dest = self.index(self.moved(self.cell(s), dir));
                    t[s][a][dest] += p;
                }
            }
        }
        t
    }

    /// Optimal state values (negative expected steps to goal) and greedy
    /// actions; ties go to the lowest action index.
    pub fn value_iteration(&self) -> (Vec<f64>, Vec<usize>) {
        let t = self.transition_table();
        let n = self.n_states();
        let g = self.goal_index();
        let mut v = vec![0.0; n];
        loop {
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if s == g {
                    continue;
                }
                let best = (0..N_ACTIONS)
                    .map(|a| -1.0 + (0..n).map(|s2| to_f64(t[s][a][s2]) * v[s2]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta < 1e-12 {
                break;
            }
        }
        let greedy = (0..n)
            .map(|s| {
                let q: Vec<f64> = (0..N_ACTIONS)
                    .map(|a| -1.0 + (0..n).map(|s2| to_f64(t[s][a][s2]) * v[s2]).sum::<f64>())
                    .collect();
                let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                q.iter().position(|&x| x >= best - 1e-9).unwrap_or(0)
            })
            .collect();
        (v, greedy)
    }

    /// Expected return of a tabular policy from every state (iterative evaluation).
    pub fn evaluate_policy(&self, policy: &PolicyTable) -> Vec<f64> {
        let t = self.transition_table();
        let n = self.n_states();
        let g = self.goal_index();
        let mut v = vec![0.0; n];
        loop {
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if s == g {
                    continue;
                }
                let mut x = -1.0;
                for a in 0..N_ACTIONS {
                    let pa = to_f64(policy[s][a]);
                    if pa == 0.0 {
                        continue;
                    }
                    x += pa * (0..n).map(|s2| to_f64(t[s][a][s2]) * v[s2]).sum::<f64>();
                }
                delta = delta.max((x - v[s]).abs());
                v[s] = x;
            }
            if delta < 1e-12 {
                break;
            }
        }
        v
    }

    /// Mean of `values` over the reset distribution (uniform on non-goal cells).
    pub fn start_average(&self, values: &[f64]) -> f64 {
        let g = self.goal_index();
        let (sum, n) = values
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != g)
            .fold((0.0, 0), |(a, n), (_, v)| (a + v, n + 1));
        sum / n as f64
    }
}

impl Environment for GridWorld {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            name: "gridworld".into(),
            state_dim: 2,
            action_space: ActionSpace::Discrete { n: N_ACTIONS },
            horizon: self.horizon,
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let n = self.n_states() - 1;
        let mut k = rng::index(rng, n);
        if k >= self.goal_index() {
            k += 1;
        }
        self.encode(self.cell(k))
    }

    fn step(&self, state: &[f64], action: &Action, rng: &mut Rng) -> Result<Step> {
        let cell = self.decode(state)?;
        let a = self.action_index(action)?;
        if cell == self.goal {
            return Ok(Step {
                next: self.encode(cell),
                reward: 0.0,
                done: true,
            });
        }
        let u = rng::uniform(rng, 0.0, 1.0);
        let [(d0, p0), (d1, p1), (d2, _)] = self.outcomes(a);
        let dir = if u < to_f64(p0) {
            d0
        } else if u < to_f64(p0 + p1) {
            d1
        } else {
            d2
        };
        let next = self.moved(cell, dir);
        Ok(Step {
            next: self.encode(next),
            reward: -1.0,
            done: next == self.goal,
        })
    }

    /// Exact `log T`; infeasible moves give `-∞`.
    fn transition_logpdf(&self, state: &[f64], action: &Action, next: &[f64]) -> Result<TransitionDensity> {
        let s = self.index(self.decode(state)?);
        let s2 = self.index(self.decode(next)?);
        let a = self.action_index(action)?;
        let p = self.transition_prob(s, a, s2);
        let log_density = if *p.numer() == 0 {
            f64::NEG_INFINITY
        } else {
            math::ln(to_f64(p))
        };
        Ok(TransitionDensity {
            log_density,
            exact: true,
        })
    }
}

impl GridWorld {
    pub fn transition_prob(&self, s: usize, a: usize, s2: usize) -> Prob {
        if s == self.goal_index() {
            return Prob::from_integer((s2 == s) as i64);
        }
        let cell = self.cell(s);
        let mut p = Prob::from_integer(0);
        for (dir, q) in self.outcomes(a) {
            if self.index(self.moved(cell, dir)) == s2 {
                p += q;
            }
        }
        p
    }
}

/// ε-greedy version of a deterministic greedy policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GridExpert {
    pub grid: GridWorld,
    pub greedy: Vec<usize>,
    pub epsilon: Prob,
}

impl GridExpert {
    pub fn optimal(grid: &GridWorld, epsilon: Prob) -> Self {
        let (_, greedy) = grid.value_iteration();
        Self {
            grid: grid.clone(),
            greedy,
            epsilon,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> Prob {
        let base = self.epsilon / N_ACTIONS as i64;
        if self.greedy[s] == a {
            base + Prob::from_integer(1) - self.epsilon
        } else {
            base
        }
    }

    pub fn table(&self) -> PolicyTable {
        (0..self.grid.n_states())
            .map(|s| (0..N_ACTIONS).map(|a| self.prob(s, a)).collect())
            .collect()
    }
}

impl Expert for GridExpert {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Result<Action> {
        let s = self.grid.index(self.grid.decode(state)?);
        let u = rng::uniform(rng, 0.0, 1.0);
        let mut acc = 0.0;
        for a in 0..N_ACTIONS {
            acc += to_f64(self.prob(s, a));
            if u < acc {
                return Ok(Action::Discrete(a));
            }
        }
        Ok(Action::Discrete(N_ACTIONS - 1))
    }

    fn logpdf(&self, state: &[f64], action: &Action) -> Result<f64> {
        let s = self.grid.index(self.grid.decode(state)?);
        let a = self.grid.action_index(action)?;
        Ok(math::ln(to_f64(self.prob(s, a))))
    }
}

/// `P(s' | s)` of the chain induced by `generator`, built by enumerating
/// every (action, slip outcome) event rather than from the transition table.
pub fn state_chain(grid: &GridWorld, generator: &PolicyTable) -> Vec<Vec<Prob>> {
    let n = grid.n_states();
    let mut p = vec![vec![Prob::from_integer(0); n]; n];
    for s in 0..n {
        if s == grid.goal_index() {
            p[s][s] = Prob::from_integer(1);
            continue;
        }
        for (a, &pa) in generator[s].iter().enumerate() {
            for (dir, q) in grid.outcomes(a) {
                let dest = grid.index(grid.moved(grid.cell(s), dir));
                p[s][dest] += pa * q;
            }
        }
    }
    p
}

/// `max |P(s'|s) - Σ_a π(a|s) T(s'|s,a)|` over all state pairs.
pub fn state_balance_error(grid: &GridWorld, chain: &[Vec<Prob>], policy: &PolicyTable) -> Prob {
    let t = grid.transition_table();
    let n = grid.n_states();
    let mut worst = Prob::from_integer(0);
    for s in 0..n {
        for s2 in 0..n {
            let mut rhs = Prob::from_integer(0);
            for a in 0..N_ACTIONS {
                rhs += policy[s][a] * t[s][a][s2];
            }
            let d = chain[s][s2] - rhs;
            let d = if d < Prob::from_integer(0) { -d } else { d };
            if d > worst {
                worst = d;
            }
        }
    }
    worst
}

/// State-only balance check of the expert: zero exactly when `P` is the chain
/// the expert generates.
pub fn state_balance_check(expert: &GridExpert) -> Prob {
    let table = expert.table();
    let chain = state_chain(&expert.grid, &table);
    state_balance_error(&expert.grid, &chain, &table)
}

/// `P(s', a' | s, a)` of the state-action chain, enumerated event by event.
pub fn state_action_chain(grid: &GridWorld, generator: &PolicyTable) -> Vec<Vec<Vec<Vec<Prob>>>> {
    let n = grid.n_states();
    let zero = Prob::from_integer(0);
    let mut p = vec![vec![vec![vec![zero; N_ACTIONS]; n]; N_ACTIONS]; n];
    for s in 0..n {
        for a in 0..N_ACTIONS {
            let events: Vec<(usize, Prob)> = if s == grid.goal_index() {
                vec![(s, Prob::from_integer(1))]
            } else {
                grid.outcomes(a)
                    .iter()
                    .map(|&(dir, q)| (grid.index(grid.moved(grid.cell(s), dir)), q))
                    .collect()
            };
            for (dest, q) in events {
                for a2 in 0..N_ACTIONS {
                    p[s][a][dest][a2] += q * generator[dest][a2];
                }
            }
        }
    }
    p
}

/// `max |P(s',a'|s,a) - π(a'|s') T(s'|s,a)|` over all feasible tuples
/// (those with `T(s'|s,a) > 0`), plus the number of tuples checked.
pub fn state_action_balance_error(grid: &GridWorld, generator: &PolicyTable, policy: &PolicyTable) -> (Prob, usize) {
    let chain = state_action_chain(grid, generator);
    let t = grid.transition_table();
    let n = grid.n_states();
    let zero = Prob::from_integer(0);
    let mut worst = zero;
    let mut checked = 0;
    for s in 0..n {
        for a in 0..N_ACTIONS {
            for s2 in 0..n {
                if t[s][a][s2] == zero {
                    continue;
                }
                for a2 in 0..N_ACTIONS {
                    checked += 1;
                    let d = chain[s][a][s2][a2] - policy[s2][a2] * t[s][a][s2];
                    let d = if d < zero { -d } else { d };
                    if d > worst {
                        worst = d;
                    }
                }
            }
        }
    }
    (worst, checked)
}
