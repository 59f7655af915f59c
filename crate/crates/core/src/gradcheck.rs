//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`], so near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input and flat entry of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.item(out))
}

/// Compares the tape gradient of the scalar `f(inputs)` with
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every entry of every input.
pub fn check_gradient(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad_slice(v).map_or_else(|| alloc::vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let mut res = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (k, g) in grads.iter().enumerate() {
        for (i, &analytic) in g.iter().enumerate() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval(&work, &f)?;
            work[k].data_mut()[i] = x0 - h;
            let down = eval(&work, &f)?;
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(analytic, numeric);
            res.checked += 1;
            if e > res.max_rel_error || res.checked == 1 {
                res.max_rel_error = e;
                res.worst = (k, i);
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    Ok(res)
}

/// [`check_gradient`] with respect to every tensor of `store`.
pub fn check_store_gradient(
    store: &ParamStore,
    h: f64,
    f: impl Fn(&mut Tape, &Bound) -> Result<Var>,
) -> Result<GradCheck> {
    let inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    check_gradient(&inputs, h, |tape, vars| f(tape, &Bound::from_vars(vars.to_vec())))
}
