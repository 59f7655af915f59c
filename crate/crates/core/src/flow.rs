//! Conditional normalizing flow built from GLOW-style double affine couplings.
//!
//! The conditioning input `c` goes through an encoder to `c̃`; each block `i`
//! has its own adapter `c̃ → c'_i`. A block transforms one half of `x` with a
//! scale and shift predicted from the other half and `c'_i`, then transforms
//! the other half from the updated first one. Scales are soft-clamped with
//! `s_max · (2/π) · atan(s / s_max)`, so each block is bi-Lipschitz and the
//! log-determinant is just the sum of the clamped scales.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, Range};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::math::{self, LN_2PI, PI};
use crate::nn::{self, Bound, Mlp, OutputActivation, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCKS: usize = 4;
pub const DEFAULT_CLAMP: f64 = 2.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowConfig {
    pub x_dim: usize,
    pub c_dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
    /// Width of `c̃` and of every `c'_i`.
    pub cond_width: usize,
}

impl FlowConfig {
    pub fn new(x_dim: usize, c_dim: usize) -> Self {
        Self {
            x_dim,
            c_dim,
            blocks: DEFAULT_BLOCKS,
            hidden: nn::DEFAULT_HIDDEN,
            clamp: DEFAULT_CLAMP,
            cond_width: c_dim.max(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.c_dim == 0 || self.blocks == 0 || self.hidden == 0 || self.cond_width == 0 {
            return Err(Error::Config(alloc::format!("degenerate flow dimensions: {self:?}")));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Config("clamp limit must be positive".into()));
        }
        Ok(())
    }

    /// `(first, second)` halves: the first takes the extra dimension when odd.
    pub fn split(&self) -> (Range<usize>, Range<usize>) {
        let h = self.x_dim.div_ceil(2);
        (0..h, h..self.x_dim)
    }
}

/// Soft clamp of a raw scale exponent into `(-limit, limit)`.
pub fn soft_clamp(raw: f64, limit: f64) -> f64 {
    limit * (2.0 / PI) * math::atan(raw / limit)
}

fn soft_clamp_tape(tape: &mut Tape, raw: Var, limit: f64) -> Result<Var> {
    let r = tape.scale(raw, 1.0 / limit)?;
    let a = tape.atan(r)?;
    tape.scale(a, limit * 2.0 / PI)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub index: usize,
    /// Coordinates that condition the first affine step.
    pub cond: Range<usize>,
    /// Coordinates transformed by the first affine step.
    pub target: Range<usize>,
    pub subnet_a: Mlp,
    /// Absent when `x_dim == 1`: the single coordinate is transformed from `c'_i` alone.
    pub subnet_b: Option<Mlp>,
    pub clamp_limit: f64,
}

struct Affine {
    scale: Var,
    shift: Var,
}

impl CouplingBlock {
    fn new(store: &mut ParamStore, cfg: &FlowConfig, index: usize, rng: &mut Rng) -> Self {
        let name = alloc::format!("block{index}");
        if cfg.x_dim == 1 {
            let subnet_a = Mlp::two_hidden(
                store,
                &alloc::format!("{name}.a"),
                cfg.cond_width,
                cfg.hidden,
                2,
                OutputActivation::Identity,
                rng,
            );
            return Self {
                index,
                cond: 0..0,
                target: 0..1,
                subnet_a,
                subnet_b: None,
                clamp_limit: cfg.clamp,
            };
        }
        let (first, second) = cfg.split();
        // halves swap roles on odd blocks
        let (cond, target) = if index.is_multiple_of(2) { (first, second) } else { (second, first) };
        let subnet_a = Mlp::two_hidden(
            store,
            &alloc::format!("{name}.a"),
            cond.len() + cfg.cond_width,
            cfg.hidden,
            2 * target.len(),
            OutputActivation::Identity,
            rng,
        );
        let subnet_b = Mlp::two_hidden(
            store,
            &alloc::format!("{name}.b"),
            target.len() + cfg.cond_width,
            cfg.hidden,
            2 * cond.len(),
            OutputActivation::Identity,
            rng,
        );
        Self {
            index,
            cond,
            target,
            subnet_a,
            subnet_b: Some(subnet_b),
            clamp_limit: cfg.clamp,
        }
    }

    fn subnets(&self) -> impl Iterator<Item = &Mlp> {
        core::iter::once(&self.subnet_a).chain(self.subnet_b.as_ref())
    }

    fn affine(&self, tape: &mut Tape, p: &Bound, net: &Mlp, input: Var, width: usize) -> Result<Affine> {
        let out = net.forward(tape, p, input)?;
        let raw = tape.slice(out, 0, width)?;
        let scale = soft_clamp_tape(tape, raw, self.clamp_limit)?;
        let shift = tape.slice(out, width, width)?;
        Ok(Affine { scale, shift })
    }

    fn apply(tape: &mut Tape, x: Var, a: &Affine) -> Result<Var> {
        let e = tape.exp(a.scale)?;
        let m = tape.mul(x, e)?;
        tape.add(m, a.shift)
    }

    fn unapply(tape: &mut Tape, y: Var, a: &Affine) -> Result<Var> {
        let d = tape.sub(y, a.shift)?;
        let ns = tape.neg(a.scale)?;
        let e = tape.exp(ns)?;
        tape.mul(d, e)
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let w = tape.value(x).cols();
        let expected = self.cond.len() + self.target.len();
        if w != expected {
            return Err(Error::Shape {
                op: "coupling",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![expected],
            });
        }
        Ok(())
    }

    /// `x: [B, d]`, `ci: [B, w]` → `(y: [B, d], logdet: [B, 1])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, ci: Var) -> Result<(Var, Var)> {
        self.check_width(tape, x)?;
        let Some(subnet_b) = &self.subnet_b else {
            let a = self.affine(tape, p, &self.subnet_a, ci, 1)?;
            let y = Self::apply(tape, x, &a)?;
            let ld = tape.sum_last(a.scale)?;
            return Ok((y, ld));
        };
        let u = tape.slice(x, self.cond.start, self.cond.len())?;
        let v = tape.slice(x, self.target.start, self.target.len())?;
        let h = tape.concat(&[u, ci])?;
        let a1 = self.affine(tape, p, &self.subnet_a, h, self.target.len())?;
        let v2 = Self::apply(tape, v, &a1)?;
        let h2 = tape.concat(&[v2, ci])?;
        let a2 = self.affine(tape, p, subnet_b, h2, self.cond.len())?;
        let u2 = Self::apply(tape, u, &a2)?;
        let y = if self.cond.start == 0 {
            tape.concat(&[u2, v2])?
        } else {
            tape.concat(&[v2, u2])?
        };
        let l1 = tape.sum_last(a1.scale)?;
        let l2 = tape.sum_last(a2.scale)?;
        let ld = tape.add(l1, l2)?;
        Ok((y, ld))
    }

    /// Exact inverse of [`CouplingBlock::forward`].
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var, ci: Var) -> Result<Var> {
        self.check_width(tape, y)?;
        let Some(subnet_b) = &self.subnet_b else {
            let a = self.affine(tape, p, &self.subnet_a, ci, 1)?;
            return Self::unapply(tape, y, &a);
        };
        let u2 = tape.slice(y, self.cond.start, self.cond.len())?;
        let v2 = tape.slice(y, self.target.start, self.target.len())?;
        let h2 = tape.concat(&[v2, ci])?;
        let a2 = self.affine(tape, p, subnet_b, h2, self.cond.len())?;
        let u = Self::unapply(tape, u2, &a2)?;
        let h = tape.concat(&[u, ci])?;
        let a1 = self.affine(tape, p, &self.subnet_a, h, self.target.len())?;
        let v = Self::unapply(tape, v2, &a1)?;
        if self.cond.start == 0 {
            tape.concat(&[u, v])
        } else {
            tape.concat(&[v, u])
        }
    }
}

/// Conditional density `p(x | c)` with exact likelihood and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub adapters: Vec<Mlp>,
    pub blocks: Vec<CouplingBlock>,
}

impl FlowModel {
    /// Random hidden layers, zero output layers in every coupling subnet: the
    /// fresh flow is the identity map and `p(x | c)` is standard normal.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, rng::stream::FLOW_INIT);
        let mut store = ParamStore::new();
        let encoder = Mlp::two_hidden(
            &mut store,
            "encoder",
            config.c_dim,
            config.hidden,
            config.cond_width,
            OutputActivation::Identity,
            &mut rng,
        );
        let mut adapters = Vec::with_capacity(config.blocks);
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            adapters.push(Mlp::two_hidden(
                &mut store,
                &alloc::format!("adapter{i}"),
                config.cond_width,
                config.hidden,
                config.cond_width,
                OutputActivation::Identity,
                &mut rng,
            ));
            blocks.push(CouplingBlock::new(&mut store, &config, i, &mut rng));
        }
        let mut model = Self {
            config,
            store,
            encoder,
            adapters,
            blocks,
        };
        model.zero_coupling_outputs();
        Ok(model)
    }

    pub fn zero_coupling_outputs(&mut self) {
        for b in &self.blocks {
            for net in b.subnets() {
                net.output_layer().zero(&mut self.store);
            }
        }
    }

    /// Fills every coupling output layer with uniform values in `±scale`.
    pub fn randomize_coupling_outputs(&mut self, seed: u64, scale: f64) {
        let mut rng = rng::seeded(seed, rng::stream::FLOW_INIT + 100);
        for b in &self.blocks {
            for net in b.subnets() {
                let l = net.output_layer();
                for id in [l.weight, l.bias] {
                    for v in self.store.get_mut(id).data_mut() {
                        *v = rng::uniform(&mut rng, -scale, scale);
                    }
                }
            }
        }
    }

    fn check_inputs(&self, x: &Tensor, c: &Tensor) -> Result<()> {
        if x.cols() != self.config.x_dim || c.cols() != self.config.c_dim || x.rows() != c.rows() {
            return Err(Error::Shape {
                op: "flow",
                lhs: x.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn conditions(&self, tape: &mut Tape, p: &Bound, c: Var) -> Result<Vec<Var>> {
        let ct = self.encoder.forward(tape, p, c)?;
        self.adapters.iter().map(|a| a.forward(tape, p, ct)).collect()
    }

    /// `x → z`, with per-row log-determinant `[B, 1]`.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, x: Var, c: Var) -> Result<(Var, Var)> {
        let cis = self.conditions(tape, p, c)?;
        let mut h = x;
        let mut total: Option<Var> = None;
        for (block, &ci) in self.blocks.iter().zip(&cis) {
            let (y, ld) = block.forward(tape, p, h, ci)?;
            h = y;
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld)?,
            });
        }
        Ok((h, total.expect("at least one block")))
    }

    /// Per-row `log p(x | c)` as a `[B, 1]` node.
    pub fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, x: Var, c: Var) -> Result<Var> {
        let (z, ld) = self.forward_tape(tape, p, x, c)?;
        let sq = tape.square(z)?;
        let ss = tape.sum_last(sq)?;
        let base = tape.scale(ss, -0.5)?;
        let base = tape.add_scalar(base, -0.5 * LN_2PI * self.config.x_dim as f64)?;
        tape.add(base, ld)
    }

    /// `log p(x_r | c_r)` for every row.
    pub fn log_prob(&self, x: &Tensor, c: &Tensor) -> Result<Vec<f64>> {
        self.check_inputs(x, c)?;
        for t in [x, c] {
            if let Some(index) = t.first_non_finite() {
                return Err(Error::NonFinite { op: "log_prob", index });
            }
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let lp = self.log_prob_tape(&mut tape, &p, xv, cv)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// `x → (z, logdet)` without gradients.
    pub fn forward_map(&self, x: &Tensor, c: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_inputs(x, c)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let (z, ld) = self.forward_tape(&mut tape, &p, xv, cv)?;
        Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
    }

    /// `z → x`.
    pub fn inverse(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.check_inputs(z, c)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(c.clone());
        let cis = self.conditions(&mut tape, &p, cv)?;
        let mut h = zv;
        for (block, &ci) in self.blocks.iter().zip(&cis).rev() {
            h = block.inverse(&mut tape, &p, h, ci)?;
        }
        Ok(tape.value(h).clone())
    }

    /// `n` draws from `p(· | c)` for a single conditioning vector.
    pub fn sample(&self, c: &[f64], n: usize, seed: u64) -> Result<Tensor> {
        let mut rng = rng::seeded(seed, rng::stream::SAMPLE);
        let d = self.config.x_dim;
        let z: Vec<f64> = (0..n * d).map(|_| rng::normal(&mut rng)).collect();
        let z = Tensor::matrix(n, d, z)?;
        let mut cs = Vec::with_capacity(n * c.len());
        for _ in 0..n {
            cs.extend_from_slice(c);
        }
        let cs = Tensor::matrix(n, c.len(), cs)?;
        self.inverse(&z, &cs)
    }
}

/// Read-only wrapper for a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T>(T);

impl<T> Frozen<T> {
    pub fn new(inner: T) -> Self {
        Self(inner)
    }

    pub fn into_inner(self) -> T {
        self.0
    }
}

impl<T> Deref for Frozen<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DensityFitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub adam: AdamConfig,
    /// Anneal the learning rate from `adam.learning_rate` to zero along a
    /// half cosine over the run.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for DensityFitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            adam: AdamConfig::with_lr(1e-3),
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl DensityFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("density batch_size must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean negative log-likelihood of each step's noisy batch.
    pub step_nll: Vec<f64>,
    /// Mean NLL over the clean training set after the last step.
    pub final_train_nll: f64,
}

fn add_noise(t: &mut Tensor, sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        for v in t.data_mut() {
            *v += sigma * rng::normal(rng);
        }
    }
}

/// Maximum-likelihood fit of `p(x | c)` on rows of `(xs, cs)`, with fresh
/// Gaussian noise of std `noise_sigma` on both `x` and `c` at every step.
///
/// `noise_sigma = 0` is allowed; on degenerate (repeated-point) data the
/// likelihood is then unbounded and training can blow up.
pub fn fit_density(
    mut model: FlowModel,
    xs: &Tensor,
    cs: &Tensor,
    config: &DensityFitConfig,
) -> Result<(Frozen<FlowModel>, FitReport)> {
    config.validate()?;
    model.check_inputs(xs, cs)?;
    let n = xs.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng::seeded(config.seed, rng::stream::DENSITY_P);
    let mut adam = AdamState::new(config.adam, model.store.numel());
    let mut step_nll = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng::index(&mut rng, n)).collect();
        let mut xb = xs.select_rows(&idx);
        let mut cb = cs.select_rows(&idx);
        add_noise(&mut xb, config.noise_sigma, &mut rng);
        add_noise(&mut cb, config.noise_sigma, &mut rng);
        let diverged = || Error::Diverged {
            step,
            batch: idx.clone(),
        };
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let xv = tape.constant(xb);
        let cv = tape.constant(cb);
        let lp = model.log_prob_tape(&mut tape, &p, xv, cv).map_err(|_| diverged())?;
        let m = tape.mean(lp).map_err(|_| diverged())?;
        let loss = tape.neg(m).map_err(|_| diverged())?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(diverged());
        }
        tape.backward(loss)?;
        let grads = p.flat_grad(&tape);
        if config.cosine_decay {
            let frac = step as f64 / config.steps as f64;
            adam.config.learning_rate = 0.5 * config.adam.learning_rate * (1.0 + libm::cos(core::f64::consts::PI * frac));
        }
        adam.step_store(&mut model.store, &grads).map_err(|_| diverged())?;
        step_nll.push(value);
    }
    let lp = model.log_prob(xs, cs)?;
    let final_train_nll = -lp.iter().sum::<f64>() / n as f64;
    Ok((
        Frozen::new(model),
        FitReport {
            step_nll,
            final_train_nll,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng::normal(rng)).collect()).unwrap()
    }

    #[test]
    fn identity_flow_density_at_origin() {
        let m = FlowModel::new(FlowConfig::new(2, 3), 0).unwrap();
        let lp = m
            .log_prob(&Tensor::zeros(&[1, 2]), &Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap())
            .unwrap();
        assert!((lp[0] + 1.837_877_1).abs() < 1e-6);
    }

    #[test]
    fn identity_flow_one_dim() {
        let m = FlowModel::new(FlowConfig::new(1, 2), 0).unwrap();
        let lp = m
            .log_prob(&Tensor::matrix(1, 1, vec![1.0]).unwrap(), &Tensor::zeros(&[1, 2]))
            .unwrap();
        assert!((lp[0] + 1.418_938_5).abs() < 1e-6);
    }

    #[test]
    fn odd_split_sizes() {
        let cfg = FlowConfig::new(5, 1);
        assert_eq!(cfg.split(), (0..3, 3..5));
    }

    #[test]
    fn clamp_is_bounded() {
        for raw in [-1e6, -3.0, 0.0, 0.5, 1e6] {
            let s = soft_clamp(raw, 2.0);
            assert!(s.abs() < 2.0);
        }
        assert_eq!(soft_clamp(0.0, 2.0), 0.0);
    }

    #[test]
    fn roundtrip_random_parameters() {
        let mut rng = rng::seeded(1, 0);
        for d in [1, 2, 3, 4] {
            let mut m = FlowModel::new(FlowConfig::new(d, 2), d as u64).unwrap();
            m.randomize_coupling_outputs(d as u64, 0.3);
            let x = rows(&mut rng, 20, d);
            let c = rows(&mut rng, 20, 2);
            let (z, _) = m.forward_map(&x, &c).unwrap();
            let back = m.inverse(&z, &c).unwrap();
            for (a, b) in x.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let m = FlowModel::new(FlowConfig::new(2, 2), 0).unwrap();
        assert!(m.log_prob(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let m = FlowModel::new(FlowConfig::new(1, 1), 0).unwrap();
        let x = Tensor::matrix(1, 1, vec![f64::NAN]).unwrap();
        assert!(m.log_prob(&x, &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn sample_is_deterministic_per_seed() {
        let mut m = FlowModel::new(FlowConfig::new(2, 1), 0).unwrap();
        m.randomize_coupling_outputs(3, 0.2);
        let a = m.sample(&[0.5], 1, 11).unwrap();
        let b = m.sample(&[0.5], 1, 11).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn bad_fit_config_rejected() {
        let cfg = DensityFitConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DensityFitConfig {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
