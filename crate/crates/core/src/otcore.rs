//! Balanced entropic optimal transport between a patch support (rows) and a
//! prompt set (columns), both with uniform marginals.
//!
//! The solver works on dual potentials in the log domain:
//!
//! ```text
//! g_j = ε log b_j − ε LSE_i((f_i − C_ij) / ε)
//! T_ij = exp((f_i + g_j − C_ij) / ε)
//! ```
//!
//! The column potential is always recomputed in closed form from the row
//! potential, so column sums of the returned plan equal `1/N` up to rounding.
//! The row potential is moved either by a damped Newton step on the
//! semi-dual (default) or by the classic row update
//! `f_i = ε log a_i − ε LSE_j((g_j − C_ij) / ε)`. Plain alternation can need
//! thousands of iterations on small-ε instances with near-tied costs; Newton
//! settles those in a handful. The stopping test is the L1 marginal violation
//! over rows and columns.
//!
//! With `unroll_grad` set and a tracked cost, the plan is recorded on the tape
//! as one node whose backward pass replays the executed iterations in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{logsumexp, CustomBackward, Mat, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Differentiate through the iterations; otherwise the plan is a constant.
    pub unroll_grad: bool,
    #[serde(default)]
    pub update: DualUpdate,
}

/// How the row potential is updated between closed-form column updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualUpdate {
    /// Damped Newton ascent on the semi-dual. Quadratic convergence.
    #[default]
    Newton,
    /// Classic alternating row/column updates. Linear convergence.
    Alternating,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
            unroll_grad: true,
            update: DualUpdate::Newton,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`sinkhorn_plan`]. `plan` is tracked when gradients are unrolled.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Mat,
    pub iterations_used: usize,
    pub final_violation: f64,
    pub converged: bool,
}

/// `C = 1 − sim`. Entries of `sim` must lie in `[−1, 1]` (unit rows dotted
/// with unit rows).
pub fn cost_from_sim(tape: &Tape, sim: &Mat) -> Result<Mat> {
    if let Some(v) = sim.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
        return Err(Error::Contract(format!(
            "similarity {v} outside [-1, 1]; inputs were not normalized"
        )));
    }
    cost_from_raw_sim(tape, sim)
}

/// `C = 1 − sim` without the range check, for unnormalized features.
pub fn cost_from_raw_sim(tape: &Tape, sim: &Mat) -> Result<Mat> {
    tape.affine(sim, -1.0, 1.0)
}

/// `‖T1 − 1/K‖₁ + ‖Tᵀ1 − 1/N‖₁`
pub fn marginal_violation(plan: &Mat) -> f64 {
    let a = 1.0 / plan.rows() as f64;
    let b = 1.0 / plan.cols() as f64;
    let rows: f64 = plan.row_sums().iter().map(|s| (s - a).abs()).sum();
    let cols: f64 = plan.col_sums().iter().map(|s| (s - b).abs()).sum();
    rows + cols
}

/// Potentials, cost, and marginals of one solve.
struct Problem<'a> {
    cost: &'a Mat,
    eps: f64,
    a: f64,
    b: f64,
}

impl Problem<'_> {
    fn k(&self) -> usize {
        self.cost.rows()
    }

    fn n(&self) -> usize {
        self.cost.cols()
    }

    /// `f_i = ε log a − ε LSE_j((g_j − C_ij)/ε)`: rows become exact.
    fn row_update(&self, g: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        let mut scratch = vec![0.0; self.n()];
        (0..self.k())
            .map(|i| {
                for (j, s) in scratch.iter_mut().enumerate() {
                    *s = (g[j] - self.cost.get(i, j)) / eps;
                }
                eps * self.a.ln() - eps * logsumexp(&scratch)
            })
            .collect()
    }

    /// `g_j = ε log b − ε LSE_i((f_i − C_ij)/ε)`: columns become exact.
    fn col_update(&self, f: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        let mut scratch = vec![0.0; self.k()];
        (0..self.n())
            .map(|j| {
                for (i, s) in scratch.iter_mut().enumerate() {
                    *s = (f[i] - self.cost.get(i, j)) / eps;
                }
                eps * self.b.ln() - eps * logsumexp(&scratch)
            })
            .collect()
    }

    /// [`Self::col_update`] and the resulting plan from one pass of
    /// exponentials.
    fn col_update_with_plan(&self, f: &[f64]) -> (Vec<f64>, Mat) {
        let (k, n) = (self.k(), self.n());
        let eps = self.eps;
        let mut plan = Mat::zeros(k, n);
        let mut g = Vec::with_capacity(n);
        let mut x = vec![0.0; k];
        let data = plan.data_mut();
        for j in 0..n {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = (f[i] - self.cost.get(i, j)) / eps;
            }
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for xi in x.iter_mut() {
                *xi = (*xi - max).exp();
                sum += *xi;
            }
            for (i, xi) in x.iter().enumerate() {
                data[i * n + j] = self.b * xi / sum;
            }
            g.push(eps * self.b.ln() - eps * (max + sum.ln()));
        }
        (g, plan)
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> Mat {
        Mat::from_fn(self.k(), self.n(), |i, j| {
            ((f[i] + g[j] - self.cost.get(i, j)) / self.eps).exp()
        })
    }

    /// Dual objective with `g` eliminated (the `−ε Σ T` term is constant).
    fn semi_dual(&self, f: &[f64], g: &[f64]) -> f64 {
        self.a * f.iter().sum::<f64>() + self.b * g.iter().sum::<f64>()
    }

    /// Reduced Hessian of the negated semi-dual over `f_0..f_{K-2}`, plus
    /// `mu·I`, factored for solves. `f_{K-1}` is pinned since the objective
    /// is invariant to `f + c·1`.
    fn reduced_system<'p>(&self, plan: &'p Mat, mu: f64) -> Option<ReducedSystem<'p>> {
        ReducedSystem::new(plan, mu, self.eps, self.b)
    }

    /// VJP of the column-normalized plan `T(f, C)` (with `g = G(f)`): adds into
    /// `f_bar` and `c_bar`.
    fn plan_vjp(&self, plan: &Mat, t_bar: &Mat, f_bar: &mut [f64], c_bar: &mut Mat) {
        let (k, n) = plan.shape();
        let eps = self.eps;
        let cb = c_bar.data_mut();
        for j in 0..n {
            let inner: f64 = (0..k)
                .map(|l| plan.get(l, j) * t_bar.get(l, j))
                .sum::<f64>()
                / self.b;
            for i in 0..k {
                let x_bar = plan.get(i, j) * (t_bar.get(i, j) - inner);
                f_bar[i] += x_bar / eps;
                cb[i * n + j] -= x_bar / eps;
            }
        }
    }
}

/// Lower Cholesky factor of an `m x m` row-major matrix; `None` if it is
/// not numerically positive definite.
fn cholesky(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for p in 0..j {
                s -= l[i * m + p] * l[j * m + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = rhs.len();
    let mut y = rhs.to_vec();
    for i in 0..m {
        for p in 0..i {
            y[i] -= l[i * m + p] * y[p];
        }
        y[i] /= l[i * m + i];
    }
    for i in (0..m).rev() {
        for p in i + 1..m {
            y[i] -= l[p * m + i] * y[p];
        }
        y[i] /= l[i * m + i];
    }
    y
}

/// `A = (D − U Uᵀ/b)/ε` with `D = diag(rowsum_i + μ·ε)` and `U` the first
/// `K − 1` plan rows. Solved through the `N x N` capacitance matrix
/// `S = b·I − Uᵀ D⁻¹ U` (Woodbury), so a solve costs `O(K·N²)`.
struct ReducedSystem<'p> {
    plan: &'p Mat,
    eps: f64,
    d: Vec<f64>,
    s_chol: Vec<f64>,
}

impl<'p> ReducedSystem<'p> {
    fn new(plan: &'p Mat, mu: f64, eps: f64, b: f64) -> Option<Self> {
        let (k, n) = plan.shape();
        let m = k - 1;
        let d: Vec<f64> = plan.row_sums()[..m].iter().map(|r| r + mu * eps).collect();
        if d.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let mut s = vec![0.0; n * n];
        for (i, di) in d.iter().enumerate() {
            let u = plan.row(i);
            for p in 0..n {
                for q in 0..=p {
                    s[p * n + q] -= u[p] * u[q] / di;
                }
            }
        }
        for p in 0..n {
            s[p * n + p] += b;
            for q in 0..p {
                s[q * n + p] = s[p * n + q];
            }
        }
        let s_chol = cholesky(&s, n)?;
        Some(Self {
            plan,
            eps,
            d,
            s_chol,
        })
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.plan.cols();
        let y: Vec<f64> = rhs
            .iter()
            .zip(&self.d)
            .map(|(r, d)| self.eps * r / d)
            .collect();
        let mut w = vec![0.0; n];
        for (i, yi) in y.iter().enumerate() {
            for (wj, u) in w.iter_mut().zip(self.plan.row(i)) {
                *wj += u * yi;
            }
        }
        let z = cholesky_solve(&self.s_chol, &w);
        let x: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, yi)| {
                let uz: f64 = self.plan.row(i).iter().zip(&z).map(|(u, z)| u * z).sum();
                yi + uz / self.d[i]
            })
            .collect();
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

/// Damping schedule tried in order until a step improves the objective.
const DAMPING: [f64; 14] = [
    0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3, 1e4,
];

struct NewtonStep {
    f: Vec<f64>,
    g: Vec<f64>,
    plan: Mat,
    violation: f64,
    mu: f64,
}

fn newton_step(
    p: &Problem,
    f: &[f64],
    g: &[f64],
    plan: &Mat,
    violation: f64,
) -> Option<NewtonStep> {
    let m = p.k() - 1;
    let rs = plan.row_sums();
    let grad: Vec<f64> = rs[..m].iter().map(|s| p.a - s).collect();
    let j_old = p.semi_dual(f, g);
    let slack = 1e-12 * (1.0 + j_old.abs());
    for mu in DAMPING {
        let Some(delta) = p.reduced_system(plan, mu).and_then(|sys| sys.solve(&grad)) else {
            continue;
        };
        let mut f_new = f.to_vec();
        for (x, d) in f_new.iter_mut().zip(&delta) {
            *x += d;
        }
        let (g_new, plan_new) = p.col_update_with_plan(&f_new);
        if !plan_new.all_finite() {
            continue;
        }
        let v_new = marginal_violation(&plan_new);
        let j_new = p.semi_dual(&f_new, &g_new);
        if j_new > j_old || (j_new >= j_old - slack && v_new < violation) {
            return Some(NewtonStep {
                f: f_new,
                g: g_new,
                plan: plan_new,
                violation: v_new,
                mu,
            });
        }
    }
    None
}

/// Solves the balanced entropic problem for `cost` (K x N).
///
/// Non-convergence is not an error: the last iterate comes back with
/// `converged = false`.
pub fn sinkhorn_plan(tape: &Tape, cost: &Mat, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (k, n) = cost.shape();
    if k == 0 || n == 0 {
        return Err(Error::Size(format!("empty cost matrix {k}x{n}")));
    }
    let problem = Problem {
        cost,
        eps: cfg.epsilon,
        a: 1.0 / k as f64,
        b: 1.0 / n as f64,
    };
    let record = cfg.unroll_grad && cost.is_tracked();
    let (plan, iters, violation, rule): (Mat, usize, f64, Option<Box<dyn CustomBackward>>) =
        match cfg.update {
            DualUpdate::Newton => {
                let (plan, iters, violation, history) = solve_newton(&problem, cfg, record);
                let rule = record.then(|| {
                    Box::new(UnrolledNewton {
                        cost: cost.detach(),
                        eps: cfg.epsilon,
                        steps: history,
                        plan_final: plan.clone(),
                    }) as Box<dyn CustomBackward>
                });
                (plan, iters, violation, rule)
            }
            DualUpdate::Alternating => {
                let (plan, iters, violation, history) = solve_alternating(&problem, cfg, record);
                let rule = record.then(|| {
                    Box::new(UnrolledAlternating {
                        cost: cost.detach(),
                        eps: cfg.epsilon,
                        history,
                    }) as Box<dyn CustomBackward>
                });
                (plan, iters, violation, rule)
            }
        };
    let plan = plan.checked("sinkhorn_plan")?;
    let plan = match rule {
        Some(rule) => tape.custom(&[cost], plan, rule),
        None => plan,
    };
    Ok(TransportPlan {
        plan,
        iterations_used: iters,
        final_violation: violation,
        converged: violation <= cfg.tol,
    })
}

/// Per executed step: the plan before it and the damping used.
type NewtonHistory = Vec<(Mat, f64)>;
/// `(f, g)` potentials before each alternating sweep.
type AlternatingHistory = Vec<(Vec<f64>, Vec<f64>)>;

fn solve_newton(
    p: &Problem,
    cfg: &SinkhornConfig,
    record: bool,
) -> (Mat, usize, f64, NewtonHistory) {
    let mut f = vec![0.0; p.k()];
    let (mut g, mut plan) = p.col_update_with_plan(&f);
    let mut violation = marginal_violation(&plan);
    let mut history = Vec::new();
    let mut iters = 0;
    while violation > cfg.tol && iters < cfg.max_iters && p.k() > 1 {
        let Some(step) = newton_step(p, &f, &g, &plan, violation) else {
            break;
        };
        iters += 1;
        if record {
            history.push((plan, step.mu));
        }
        f = step.f;
        g = step.g;
        plan = step.plan;
        violation = step.violation;
    }
    (plan, iters, violation, history)
}

fn solve_alternating(
    p: &Problem,
    cfg: &SinkhornConfig,
    record: bool,
) -> (Mat, usize, f64, AlternatingHistory) {
    let mut g = vec![0.0; p.n()];
    let mut history = Vec::new();
    let mut violation = f64::INFINITY;
    let mut plan = Mat::zeros(p.k(), p.n());
    let mut iters = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let f = p.row_update(&g);
        g = p.col_update(&f);
        plan = p.plan(&f, &g);
        violation = marginal_violation(&plan);
        if record {
            history.push((f, g.clone()));
        }
        if violation <= cfg.tol {
            break;
        }
    }
    (plan, iters, violation, history)
}

/// Reverse pass through the executed Newton steps `f ← f + Δ(f, C)`.
struct UnrolledNewton {
    cost: Mat,
    eps: f64,
    steps: NewtonHistory,
    plan_final: Mat,
}

impl CustomBackward for UnrolledNewton {
    fn backward(&self, grad_out: &Mat) -> Result<Vec<Mat>> {
        let (k, n) = self.cost.shape();
        let p = Problem {
            cost: &self.cost,
            eps: self.eps,
            a: 1.0 / k as f64,
            b: 1.0 / n as f64,
        };
        let mut c_bar = Mat::zeros(k, n);
        let mut f_bar = vec![0.0; k];
        p.plan_vjp(&self.plan_final, grad_out, &mut f_bar, &mut c_bar);

        let m = k - 1;
        for (plan, mu) in self.steps.iter().rev() {
            // f_next = f + [Δ; 0], Δ = A⁻¹ r, A = H + μI, r_i = a − rowsum_i
            let rs = plan.row_sums();
            let lost = || Error::Degenerate("Newton system lost definiteness in backward".into());
            let sys = p.reduced_system(plan, *mu).ok_or_else(lost)?;
            let r: Vec<f64> = rs[..m].iter().map(|s| p.a - s).collect();
            let delta = sys.solve(&r).ok_or_else(lost)?;
            let r_bar = sys.solve(&f_bar[..m]).ok_or_else(lost)?;
            // Ā = −r̄ Δᵀ on the reduced block, zero elsewhere. Its symmetric
            // part enters each column through Σ_l Δ_l T_lj and Σ_l r̄_l T_lj.
            let mut delta_t = vec![0.0; n];
            let mut rbar_t = vec![0.0; n];
            for l in 0..m {
                for j in 0..n {
                    delta_t[j] += delta[l] * plan.get(l, j);
                    rbar_t[j] += r_bar[l] * plan.get(l, j);
                }
            }
            let t_bar = Mat::from_fn(k, n, |i, j| {
                if i >= m {
                    return 0.0;
                }
                let sym = -r_bar[i] * delta_t[j] - delta[i] * rbar_t[j];
                -r_bar[i] + (-r_bar[i] * delta[i] - sym / p.b) / p.eps
            });
            p.plan_vjp(plan, &t_bar, &mut f_bar, &mut c_bar);
        }
        Ok(vec![c_bar.checked("sinkhorn backward")?])
    }
}

/// Reverse pass through executed alternating updates.
struct UnrolledAlternating {
    cost: Mat,
    eps: f64,
    history: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CustomBackward for UnrolledAlternating {
    fn backward(&self, grad_out: &Mat) -> Result<Vec<Mat>> {
        let (k, n) = self.cost.shape();
        let eps = self.eps;
        let c = &self.cost;
        let inv_a = k as f64;
        let inv_b = n as f64;
        let mut c_bar = Mat::zeros(k, n);
        let (f_last, g_last) = self.history.last().expect("at least one iteration");

        let mut f_bar = vec![0.0; k];
        let mut g_bar = vec![0.0; n];
        {
            let cb = c_bar.data_mut();
            for i in 0..k {
                for j in 0..n {
                    let t = ((f_last[i] + g_last[j] - c.get(i, j)) / eps).exp();
                    let q = grad_out.get(i, j) * t / eps;
                    cb[i * n + j] -= q;
                    f_bar[i] += q;
                    g_bar[j] += q;
                }
            }
        }

        let zeros = vec![0.0; n];
        for t in (0..self.history.len()).rev() {
            let (f, g) = &self.history[t];
            let g_prev = if t == 0 {
                &zeros
            } else {
                &self.history[t - 1].1
            };
            let cb = c_bar.data_mut();
            // g = G(f, C): dg_j/df_i = −w_ij, dg_j/dC_ij = w_ij
            for i in 0..k {
                for j in 0..n {
                    let w = ((f[i] + g[j] - c.get(i, j)) / eps).exp() * inv_b;
                    f_bar[i] -= g_bar[j] * w;
                    cb[i * n + j] += g_bar[j] * w;
                }
            }
            // f = F(g_prev, C): df_i/dg_j = −u_ij, df_i/dC_ij = u_ij
            let mut g_prev_bar = vec![0.0; n];
            for i in 0..k {
                for j in 0..n {
                    let u = ((f[i] + g_prev[j] - c.get(i, j)) / eps).exp() * inv_a;
                    g_prev_bar[j] -= f_bar[i] * u;
                    cb[i * n + j] += f_bar[i] * u;
                }
            }
            g_bar = g_prev_bar;
            f_bar.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(vec![c_bar.checked("sinkhorn backward")?])
    }
}

/// `φ = Σ_uv T_uv · sim_uv`, as a 1x1 matrix.
pub fn transport_score(tape: &Tape, plan: &TransportPlan, sim: &Mat) -> Result<Mat> {
    tape.sum(&tape.hadamard(&plan.plan, sim)?)
}

/// Exact uniform-marginal OT on a square instance: `(1/K) min_π Σ_i C[i, π(i)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub cost: f64,
    pub permutation: Vec<usize>,
}

pub const ORACLE_MAX_SIZE: usize = 8;

/// Enumerates all `K!` permutations in lexicographic order; ties keep the
/// first (lexicographically smallest) one.
pub fn exact_matching_oracle(cost: &Mat) -> Result<Matching> {
    let (k, n) = cost.shape();
    if k != n {
        return Err(Error::Size(format!(
            "oracle needs a square matrix, got {k}x{n}"
        )));
    }
    if k == 0 || k > ORACLE_MAX_SIZE {
        return Err(Error::Size(format!(
            "oracle supports 1..={ORACLE_MAX_SIZE} rows, got {k}"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = Matching {
        cost: f64::INFINITY,
        permutation: perm.clone(),
    };
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        let c = total / k as f64;
        if c < best.cost {
            best = Matching {
                cost: c,
                permutation: perm.clone(),
            };
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
