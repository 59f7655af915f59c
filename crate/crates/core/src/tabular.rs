//! Counting estimator of `p(x | c)` for discrete data.
//!
//! Used in place of a flow on discrete environments to separate density
//! error from algorithm error. Vectors are keyed after rounding to 1e-6.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

type Key = Vec<i64>;

fn key(row: &[f64]) -> Key {
    row.iter().map(|v| libm::round(v * 1e6) as i64).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularDensity {
    joint: BTreeMap<(Key, Key), u64>,
    marginal: BTreeMap<Key, u64>,
    support: BTreeSet<Key>,
}

impl TabularDensity {
    pub fn fit(xs: &Tensor, cs: &Tensor) -> Result<Self> {
        if xs.rows() != cs.rows() {
            return Err(Error::Shape {
                op: "tabular_fit",
                lhs: xs.shape().to_vec(),
                rhs: cs.shape().to_vec(),
            });
        }
        let mut t = Self::default();
        for r in 0..xs.rows() {
            let (kx, kc) = (key(xs.row(r)), key(cs.row(r)));
            *t.joint.entry((kc.clone(), kx.clone())).or_default() += 1;
            *t.marginal.entry(kc).or_default() += 1;
            t.support.insert(kx);
        }
        Ok(t)
    }

    /// `ln n(c, x) - ln n(c)`; uniform over the observed support when `c`
    /// was never seen, `-∞` when `x` never followed a seen `c`.
    pub fn log_prob_row(&self, x: &[f64], c: &[f64]) -> f64 {
        let kc = key(c);
        match self.marginal.get(&kc) {
            None => -math::ln(self.support.len().max(1) as f64),
            Some(&n) => {
                let k = self.joint.get(&(kc, key(x))).copied().unwrap_or(0);
                if k == 0 {
                    f64::NEG_INFINITY
                } else {
                    math::ln(k as f64) - math::ln(n as f64)
                }
            }
        }
    }

    pub fn log_prob(&self, xs: &Tensor, cs: &Tensor) -> Vec<f64> {
        (0..xs.rows()).map(|r| self.log_prob_row(xs.row(r), cs.row(r))).collect()
    }
}
