//! Independent numerical oracles shared by integration tests.
#![allow(dead_code)]

use mbil_core::flow::FlowModel;
use mbil_core::rng::{self, Rng};
use mbil_core::Tensor;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(rng, lo, hi)).collect()).unwrap()
}

/// `log |det A|` by LU with partial pivoting; `a` is row-major `d × d`.
pub fn log_abs_det(mut a: Vec<f64>, d: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..d {
                a.swap(piv * d + k, col * d + k);
            }
        }
        let p = a[col * d + col];
        acc += p.abs().ln();
        for r in col + 1..d {
            let f = a[r * d + col] / p;
            for k in col..d {
                a[r * d + k] -= f * a[col * d + k];
            }
        }
    }
    acc
}

/// `log |det ∂z/∂x|` of the flow map at one point, by central differences.
pub fn numeric_log_det(flow: &FlowModel, x: &[f64], c: &[f64], h: f64) -> f64 {
    let d = x.len();
    let mut rows = Vec::with_capacity(2 * d * d);
    let mut cs = Vec::new();
    for j in 0..d {
        for sign in [1.0, -1.0] {
            let mut xp = x.to_vec();
            xp[j] += sign * h;
            rows.extend(xp);
            cs.extend_from_slice(c);
        }
    }
    let xs = Tensor::matrix(2 * d, d, rows).unwrap();
    let cs = Tensor::matrix(2 * d, c.len(), cs).unwrap();
    let (z, _) = flow.forward_map(&xs, &cs).unwrap();
    // J[i][j] = ∂z_i/∂x_j
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let (up, down) = (z.row(2 * j), z.row(2 * j + 1));
        for i in 0..d {
            jac[i * d + j] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac, d)
}

/// Trapezoid integral of `exp(log p(x | c))` over `[lo, hi]^d`, `d ∈ {1, 2}`.
pub fn trapezoid_mass(flow: &FlowModel, c: &[f64], lo: f64, hi: f64, n: usize) -> f64 {
    let d = flow.config.x_dim;
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let w = |i: usize| if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
    let points: Vec<(Vec<f64>, f64)> = match d {
        1 => (0..n).map(|i| (vec![grid[i]], w(i))).collect(),
        2 => (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (vec![grid[i], grid[j]], w(i) * w(j)))
            .collect(),
        _ => panic!("trapezoid_mass supports d = 1, 2"),
    };
    let mut total = 0.0;
    for chunk in points.chunks(4096) {
        let xs = Tensor::matrix(chunk.len(), d, chunk.iter().flat_map(|p| p.0.clone()).collect()).unwrap();
        let mut cs = Vec::with_capacity(chunk.len() * c.len());
        for _ in chunk {
            cs.extend_from_slice(c);
        }
        let cs = Tensor::matrix(chunk.len(), c.len(), cs).unwrap();
        let lp = flow.log_prob(&xs, &cs).unwrap();
        total += chunk.iter().zip(lp).map(|(p, l)| p.1 * l.exp()).sum::<f64>();
    }
    total * step.powi(d as i32)
}

/// `x = A c + b + N(0, σ² I)` with fixed `A`, `b`: rows of `(x, c)` and the
/// true conditional log-density of each row.
pub fn linear_gaussian(n: usize, d: usize, c_dim: usize, sigma: f64, seed: u64) -> (Tensor, Tensor, Vec<f64>) {
    let mut rng = rng::seeded(seed, 321);
    let a: Vec<f64> = (0..d * c_dim).map(|k| 0.5 * ((k as f64) * 0.7).sin()).collect();
    let b: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 0.2).collect();
    let (mut xs, mut cs, mut lp) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let c: Vec<f64> = (0..c_dim).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let mut l = 0.0;
        for i in 0..d {
            let m = b[i] + (0..c_dim).map(|k| a[i * c_dim + k] * c[k]).sum::<f64>();
            let x = m + sigma * rng::normal(&mut rng);
            l += mbil_core::math::normal_logpdf(x, m, sigma);
            xs.push(x);
        }
        cs.extend(c);
        lp.push(l);
    }
    (
        Tensor::matrix(n, d, xs).unwrap(),
        Tensor::matrix(n, c_dim, cs).unwrap(),
        lp,
    )
}

/// Exact `P(s',a'|s,a) = π_D(a'|s') T(s'|s,a)` and `T(s'|s,a)` on a grid,
/// evaluated on the `(s, onehot a)` encoding used by the density models.
pub struct GridOracle {
    pub expert: mbil_core::envs::GridExpert,
    /// Evaluate the kernel instead of the chain.
    pub kernel: bool,
}

impl GridOracle {
    fn argmax(v: &[f64]) -> usize {
        v.iter().position(|&x| x == 1.0).expect("one-hot action")
    }
}

impl mbil_core::mbil::ConditionalDensity for GridOracle {
    fn log_density(&self, x: &Tensor, c: &Tensor) -> mbil_core::Result<Vec<f64>> {
        use mbil_core::envs::{Environment, Expert};
        use mbil_core::data::Action;
        let g = &self.expert.grid;
        (0..x.rows())
            .map(|r| {
                let (xr, cr) = (x.row(r), c.row(r));
                let a = Action::Discrete(Self::argmax(&cr[2..]));
                let t = g.transition_logpdf(&cr[..2], &a, &xr[..2])?.log_density;
                if self.kernel {
                    Ok(t)
                } else {
                    let a2 = Action::Discrete(Self::argmax(&xr[2..]));
                    Ok(self.expert.logpdf(&xr[..2], &a2)? + t)
                }
            })
            .collect()
    }
}
