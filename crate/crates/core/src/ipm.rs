//! Primal-dual interior-point method for sparse problems of the form
//!
//! ```text
//! minimize f(x)  subject to  c(x) = 0,  l ≤ x ≤ u
//! ```
//!
//! Bounds are handled by a logarithmic barrier with a monotone barrier
//! parameter. Each iteration solves the full primal-dual system
//!
//! ```text
//! [ W + Σ + δw·I    Jᵀ   ] [dx]     [ ∇f + Jᵀy - μ/(x-l) + μ/(u-x) ]
//! [ J             -δc·I  ] [dy] = - [ c                             ]
//! ```
//!
//! by a symmetric indefinite LDLᵀ factorization. The shift `δw` is raised
//! until the factor has exactly `m` negative pivots. Steps are globalized by
//! a filter line search on the pair (constraint violation, barrier objective)
//! with a second-order correction. Objective and constraints are scaled from
//! gradients at the starting point; the optimality error is measured on the
//! scaled problem.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{norm_inf, sym_matvec, LdlFactor, LdlSymbolic};

/// Problem callbacks. Hessian entries are in the lower triangle (`row >= col`).
pub trait Nlp {
    fn num_vars(&self) -> usize;
    fn num_cons(&self) -> usize;
    /// Lower and upper bounds; use infinities for missing bounds.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn initial_point(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn constraints(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian_structure(&self) -> Vec<(usize, usize)>;
    fn jacobian_values(&self, x: &[f64]) -> Vec<f64>;
    fn hessian_structure(&self) -> Vec<(usize, usize)>;
    /// `obj_factor·∇²f + Σ y_i ∇²c_i`.
    fn hessian_values(&self, x: &[f64], obj_factor: f64, y: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpmOptions {
    /// Scaled optimality error at which the solve stops.
    pub tol: f64,
    /// Unscaled constraint violation required at termination.
    pub constraint_tol: f64,
    pub max_iterations: usize,
    pub mu_init: f64,
    /// Largest gradient entry after automatic scaling.
    pub max_gradient: f64,
    /// Barrier parameter the solve must reach before it stops. Defaults to
    /// `tol / 10`; smaller values remove the bias that inactive bounds put
    /// on weakly determined variables.
    pub final_barrier: Option<f64>,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            tol: 1e-4,
            constraint_tol: 1e-4,
            max_iterations: 300,
            mu_init: 0.1,
            max_gradient: 100.0,
            final_barrier: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IpmStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub objective: f64,
    pub constraint_violation: f64,
    pub dual_infeasibility: f64,
    pub mu: f64,
    pub step: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmResult {
    pub x: Vec<f64>,
    /// Constraint multipliers of the unscaled problem.
    pub y: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    pub status: IpmStatus,
    pub iterations: usize,
    /// Scaled optimality error `E₀` at the returned point.
    pub kkt_error: f64,
    pub constraint_violation: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
    pub trace: Vec<IterationLog>,
}

const BOUND_PUSH: f64 = 1e-2;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO: f64 = 1e-4;
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const GAMMA_ALPHA: f64 = 0.05;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;
const STATIC_SHIFT: f64 = 1e-9;
const REFINEMENT_STEPS: usize = 10;
const DW_FIRST: f64 = 1e-4;
const DW_MIN: f64 = 1e-20;
const DW_MAX: f64 = 1e40;
const S_MAX: f64 = 100.0;

/// Scaled view of an [`Nlp`].
struct Scaled<'a> {
    nlp: &'a dyn Nlp,
    obj: f64,
    cons: Vec<f64>,
    jac_rows: Vec<usize>,
}

impl Scaled<'_> {
    fn f(&self, x: &[f64]) -> f64 {
        self.obj * self.nlp.objective(x)
    }
    fn g(&self, x: &[f64]) -> Vec<f64> {
        self.nlp
            .gradient(x)
            .into_iter()
            .map(|v| v * self.obj)
            .collect()
    }
    fn c(&self, x: &[f64]) -> Vec<f64> {
        self.nlp
            .constraints(x)
            .into_iter()
            .zip(&self.cons)
            .map(|(v, s)| v * s)
            .collect()
    }
    fn jac(&self, x: &[f64]) -> Vec<f64> {
        self.nlp
            .jacobian_values(x)
            .into_iter()
            .zip(&self.jac_rows)
            .map(|(v, &r)| v * self.cons[r])
            .collect()
    }
    fn hess(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let ys: Vec<f64> = y.iter().zip(&self.cons).map(|(a, s)| a * s).collect();
        self.nlp.hessian_values(x, self.obj, &ys)
    }
}

/// Primal-dual system in lower-triangle form with its symbolic LDLᵀ
/// analysis (AMD order) computed once.
struct Kkt {
    n: usize,
    m: usize,
    entries: Vec<(usize, usize)>,
    symbolic: LdlSymbolic,
    hess_lower: Vec<(usize, usize)>,
}

impl Kkt {
    fn new(n: usize, m: usize, hess_lower: Vec<(usize, usize)>, jac: &[(usize, usize)]) -> Self {
        let mut entries: Vec<(usize, usize)> = (0..n + m).map(|i| (i, i)).collect();
        entries.extend(hess_lower.iter().map(|&(r, c)| (r.max(c), r.min(c))));
        entries.extend(jac.iter().map(|&(r, c)| (n + r, c)));
        let symbolic = LdlSymbolic::new(n + m, &entries);
        Kkt {
            n,
            m,
            entries,
            symbolic,
            hess_lower,
        }
    }

    /// Entry values: `diag` on the primal diagonal, `-dc` on the dual one.
    fn values(&self, diag: &[f64], dc: f64, hess: &[f64], jac: &[f64]) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.entries.len());
        vals.extend_from_slice(&diag[..self.n]);
        vals.extend(std::iter::repeat(-dc).take(self.m));
        vals.extend_from_slice(&hess[..self.hess_lower.len()]);
        vals.extend_from_slice(jac);
        vals
    }

    /// Factors the matrix plus a small quasi-definite shift, which keeps
    /// every pivot nonzero in the fixed order.
    fn factor(&self, values: &[f64]) -> Option<LdlFactor> {
        let mut shifted = values.to_vec();
        for (i, v) in shifted.iter_mut().take(self.n + self.m).enumerate() {
            *v += if i < self.n {
                STATIC_SHIFT
            } else {
                -STATIC_SHIFT
            };
        }
        self.symbolic.factor(&shifted).ok()
    }

    /// Solves with the unshifted matrix by iterative refinement. Returns the
    /// solution and the relative residual.
    fn solve(&self, factor: &LdlFactor, values: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
        let dim = self.n + self.m;
        let bnorm = norm_inf(b).max(f64::MIN_POSITIVE);
        let mut x = factor.solve(b);
        let mut rel = f64::INFINITY;
        for _ in 0..REFINEMENT_STEPS {
            let kx = sym_matvec(dim, &self.entries, values, &x);
            let r: Vec<f64> = b.iter().zip(&kx).map(|(bi, ki)| bi - ki).collect();
            let next = norm_inf(&r) / bnorm;
            if !(next < rel) {
                break;
            }
            rel = next;
            if rel < 1e-14 {
                break;
            }
            for (xi, d) in x.iter_mut().zip(factor.solve(&r)) {
                *xi += d;
            }
        }
        (x, rel)
    }
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    fn has_lower(&self, i: usize) -> bool {
        self.lower[i].is_finite()
    }
    fn has_upper(&self, i: usize) -> bool {
        self.upper[i].is_finite()
    }
    fn barrier(&self, x: &[f64], mu: f64) -> f64 {
        let mut b = 0.0;
        for (i, &xi) in x.iter().enumerate() {
            if self.has_lower(i) {
                b -= mu * (xi - self.lower[i]).ln();
            }
            if self.has_upper(i) {
                b -= mu * (self.upper[i] - xi).ln();
            }
        }
        b
    }
    /// Largest step in `(0, 1]` keeping `x + α·dx` a fraction `tau` inside the bounds.
    fn max_step(&self, x: &[f64], dx: &[f64], tau: f64) -> f64 {
        let mut alpha: f64 = 1.0;
        for i in 0..x.len() {
            if dx[i] < 0.0 && self.has_lower(i) {
                alpha = alpha.min(-tau * (x[i] - self.lower[i]) / dx[i]);
            }
            if dx[i] > 0.0 && self.has_upper(i) {
                alpha = alpha.min(tau * (self.upper[i] - x[i]) / dx[i]);
            }
        }
        alpha
    }
}

fn max_step_positive(z: &[f64], dz: &[f64], tau: f64) -> f64 {
    z.iter().zip(dz).fold(1.0f64, |a, (&zi, &di)| {
        if di < 0.0 && zi > 0.0 {
            a.min(-tau * zi / di)
        } else {
            a
        }
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// Pushes a starting point strictly inside its bounds.
fn push_inside(x: &mut [f64], b: &Bounds) -> Result<()> {
    for i in 0..x.len() {
        let (l, u) = (b.lower[i], b.upper[i]);
        if l.is_finite() && u.is_finite() && !(l < u) {
            return Err(Error::InfeasibleBoxes(format!(
                "variable {i} has lower bound {l} not below upper bound {u}"
            )));
        }
        let width = if l.is_finite() && u.is_finite() {
            u - l
        } else {
            f64::INFINITY
        };
        if l.is_finite() {
            let p = (BOUND_PUSH * l.abs().max(1.0)).min(BOUND_PUSH * width);
            x[i] = x[i].max(l + p);
        }
        if u.is_finite() {
            let p = (BOUND_PUSH * u.abs().max(1.0)).min(BOUND_PUSH * width);
            x[i] = x[i].min(u - p);
        }
    }
    Ok(())
}

struct Point {
    x: Vec<f64>,
    y: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

struct Errors {
    dual: f64,
    primal: f64,
    compl: f64,
    scaled_dual: f64,
    scaled_compl: f64,
}

impl Errors {
    fn total(&self) -> f64 {
        self.scaled_dual.max(self.primal).max(self.scaled_compl)
    }
}

pub fn solve(nlp: &dyn Nlp, options: &IpmOptions) -> Result<IpmResult> {
    let (n, m) = (nlp.num_vars(), nlp.num_cons());
    let (lower, upper) = nlp.bounds();
    if lower.len() != n || upper.len() != n {
        return Err(Error::dims(
            "variable bounds",
            n,
            lower.len().min(upper.len()),
        ));
    }
    let bounds = Bounds { lower, upper };
    let mut x = nlp.initial_point();
    if x.len() != n {
        return Err(Error::dims("initial point", n, x.len()));
    }
    push_inside(&mut x, &bounds)?;

    let jac_pattern = nlp.jacobian_structure();
    let hess_pattern = nlp.hessian_structure();
    let jac_rows: Vec<usize> = jac_pattern.iter().map(|&(r, _)| r).collect();

    // Gradient-based scaling at the starting point.
    let g0 = nlp.gradient(&x);
    let gmax = norm_inf(&g0);
    let obj = if gmax > options.max_gradient {
        options.max_gradient / gmax
    } else {
        1.0
    };
    let mut row_max = vec![0.0f64; m];
    for (&(r, _), v) in jac_pattern.iter().zip(nlp.jacobian_values(&x)) {
        row_max[r] = row_max[r].max(v.abs());
    }
    let cons: Vec<f64> = row_max
        .iter()
        .map(|&g| {
            if g > options.max_gradient {
                options.max_gradient / g
            } else {
                1.0
            }
        })
        .collect();
    let sp = Scaled {
        nlp,
        obj,
        cons,
        jac_rows,
    };
    let kkt = Kkt::new(n, m, hess_pattern, &jac_pattern);
    let jt_mul = |vals: &[f64], y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (k, &(r, c)) in jac_pattern.iter().enumerate() {
            out[c] += vals[k] * y[r];
        }
        out
    };

    let nb = (0..n).filter(|&i| bounds.has_lower(i)).count()
        + (0..n).filter(|&i| bounds.has_upper(i)).count();
    let mut pt = Point {
        x,
        y: vec![0.0; m],
        zl: vec![0.0; n],
        zu: vec![0.0; n],
    };
    let mu_min = options
        .final_barrier
        .unwrap_or(options.tol / 10.0)
        .min(options.tol / 10.0);
    // Least-squares constraint multipliers; a starting point that is already
    // nearly optimal also starts with a small barrier parameter.
    let mut mu = options.mu_init;
    {
        let g = sp.g(&pt.x);
        let c = sp.c(&pt.x);
        let jv = sp.jac(&pt.x);
        let mut rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        rhs.extend(std::iter::repeat(0.0).take(m));
        let vals = kkt.values(&vec![1.0; n], 0.0, &vec![0.0; kkt.hess_lower.len()], &jv);
        if let Some(f) = kkt.factor(&vals) {
            let (sol, rel) = kkt.solve(&f, &vals, &rhs);
            let y = &sol[n..];
            if rel < 1e-6 && norm_inf(y) <= 1e3 {
                pt.y = y.to_vec();
            }
        }
        let jty = jt_mul(&jv, &pt.y);
        let dual: Vec<f64> = (0..n).map(|i| g[i] + jty[i]).collect();
        let e = norm_inf(&dual).max(norm_inf(&c));
        mu = mu.min(0.1 * e).max(mu_min);
    }
    // Bound multipliers start on the central path.
    for i in 0..n {
        if bounds.has_lower(i) {
            pt.zl[i] = mu / (pt.x[i] - bounds.lower[i]);
        }
        if bounds.has_upper(i) {
            pt.zu[i] = mu / (bounds.upper[i] - pt.x[i]);
        }
    }
    let mut filter: Vec<(f64, f64)> = Vec::new();
    let theta_init = norm1(&sp.c(&pt.x));
    let mut dw_last = 0.0f64;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Point, Errors, f64)> = None;

    let errors = |pt: &Point, g: &[f64], c: &[f64], jv: &[f64], mu: f64| -> Errors {
        let jty = jt_mul(jv, &pt.y);
        let dual: Vec<f64> = (0..n)
            .map(|i| g[i] + jty[i] - pt.zl[i] + pt.zu[i])
            .collect();
        let mut compl: f64 = 0.0;
        for i in 0..n {
            if bounds.has_lower(i) {
                compl = compl.max((pt.zl[i] * (pt.x[i] - bounds.lower[i]) - mu).abs());
            }
            if bounds.has_upper(i) {
                compl = compl.max((pt.zu[i] * (bounds.upper[i] - pt.x[i]) - mu).abs());
            }
        }
        let zsum = norm1(&pt.zl) + norm1(&pt.zu);
        let s_d = (S_MAX.max((norm1(&pt.y) + zsum) / ((m + nb).max(1) as f64))) / S_MAX;
        let s_c = (S_MAX.max(zsum / (nb.max(1) as f64))) / S_MAX;
        let dual_inf = norm_inf(&dual);
        Errors {
            dual: dual_inf,
            primal: norm_inf(c),
            compl,
            scaled_dual: dual_inf / s_d,
            scaled_compl: compl / s_c,
        }
    };

    let mut status = IpmStatus::MaxIterations;
    let mut stalled = 0usize;
    let mut iterations = 0usize;
    for it in 0..=options.max_iterations {
        iterations = it;
        let f = sp.f(&pt.x);
        let g = sp.g(&pt.x);
        let c = sp.c(&pt.x);
        let jv = sp.jac(&pt.x);
        let e0 = errors(&pt, &g, &c, &jv, 0.0);
        let unscaled_viol = norm_inf(&nlp.constraints(&pt.x));
        let total = e0.total();
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((
                total,
                Point {
                    x: pt.x.clone(),
                    y: pt.y.clone(),
                    zl: pt.zl.clone(),
                    zu: pt.zu.clone(),
                },
                Errors { ..e0 },
                f / sp.obj,
            ));
        }
        debug!(
            "ipm {it:3}: f {:.6e} inf_pr {:.2e} inf_du {:.2e} compl {:.2e} mu {:.1e}",
            f / sp.obj,
            e0.primal,
            e0.scaled_dual,
            e0.scaled_compl,
            mu
        );
        if total <= options.tol && unscaled_viol <= options.constraint_tol && mu <= mu_min {
            status = IpmStatus::Converged;
            break;
        }
        if it == options.max_iterations {
            break;
        }
        // Barrier update.
        loop {
            let emu = errors(&pt, &g, &c, &jv, mu).total();
            if emu > KAPPA_EPS * mu || mu <= mu_min {
                break;
            }
            mu = mu_min.max((0.2 * mu).min(mu.powf(1.5)));
            filter.clear();
        }
        let tau = (1.0 - mu).max(0.99);

        // Barrier gradient and Σ.
        let mut sigma = vec![0.0; n];
        let mut grad_phi = g.clone();
        for i in 0..n {
            if bounds.has_lower(i) {
                let s = pt.x[i] - bounds.lower[i];
                sigma[i] += pt.zl[i] / s;
                grad_phi[i] -= mu / s;
            }
            if bounds.has_upper(i) {
                let s = bounds.upper[i] - pt.x[i];
                sigma[i] += pt.zu[i] / s;
                grad_phi[i] += mu / s;
            }
        }
        let jty = jt_mul(&jv, &pt.y);
        let mut rhs: Vec<f64> = (0..n).map(|i| -(grad_phi[i] + jty[i])).collect();
        rhs.extend(c.iter().map(|v| -v));
        let hv = sp.hess(&pt.x, &pt.y);

        // Raise the primal shift until the inertia is (n, m, 0); a shift on
        // the dual block handles rank-deficient constraint Jacobians.
        let mut dw = 0.0f64;
        let mut dc = 0.0f64;
        let mut attempt = 0usize;
        let next_dw = |dw: f64| {
            if dw == 0.0 {
                if dw_last == 0.0 {
                    DW_FIRST
                } else {
                    DW_MIN.max(dw_last / 3.0)
                }
            } else if dw_last == 0.0 {
                100.0 * dw
            } else {
                8.0 * dw
            }
        };
        let (values, factor, sol) = loop {
            attempt += 1;
            let diag: Vec<f64> = sigma.iter().map(|s| s + dw).collect();
            let values = kkt.values(&diag, dc, &hv, &jv);
            match kkt.factor(&values) {
                None => {
                    dc = 1e-8 * mu.powf(0.25);
                    dw = next_dw(dw);
                }
                Some(f) if f.inertia().negative > m => dw = next_dw(dw),
                Some(f) => {
                    let (sol, rel) = kkt.solve(&f, &values, &rhs);
                    if rel < 1e-8 && sol.iter().all(|v| v.is_finite()) {
                        break (values, f, sol);
                    }
                    if dc == 0.0 {
                        dc = 1e-8 * mu.powf(0.25);
                    } else {
                        dw = next_dw(dw);
                    }
                }
            }
            if dw > DW_MAX || attempt > 60 {
                return Err(Error::SingularKkt);
            }
        };
        if dw > 0.0 {
            dw_last = dw;
        }
        let dx = sol[..n].to_vec();
        let dy = sol[n..].to_vec();
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        for i in 0..n {
            if bounds.has_lower(i) {
                let s = pt.x[i] - bounds.lower[i];
                dzl[i] = mu / s - pt.zl[i] - pt.zl[i] / s * dx[i];
            }
            if bounds.has_upper(i) {
                let s = bounds.upper[i] - pt.x[i];
                dzu[i] = mu / s - pt.zu[i] + pt.zu[i] / s * dx[i];
            }
        }

        // Filter line search on (violation, barrier objective).
        let theta0 = norm1(&c);
        let phi0 = f + bounds.barrier(&pt.x, mu);
        let slope = dot(&grad_phi, &dx);
        let theta_max = 1e4 * theta_init.max(1.0);
        let theta_min = 1e-4 * theta_init.max(1.0);
        let alpha_max = bounds.max_step(&pt.x, &dx, tau);
        let alpha_min = if slope < 0.0 {
            GAMMA_ALPHA
                * GAMMA_THETA
                    .min(GAMMA_PHI * theta0 / -slope)
                    .min(theta0.powf(S_THETA) / (-slope).powf(S_PHI))
        } else {
            GAMMA_ALPHA * GAMMA_THETA
        };
        let trial = |x: &[f64], alpha: f64| -> Option<(f64, f64, bool)> {
            let ct = sp.c(x);
            let (theta, phi) = (norm1(&ct), sp.f(x) + bounds.barrier(x, mu));
            if !(theta.is_finite() && phi.is_finite()) || theta > theta_max {
                return None;
            }
            if filter.iter().any(|&(ft, fp)| theta >= ft && phi >= fp) {
                return None;
            }
            let switching = slope < 0.0 && alpha * (-slope).powf(S_PHI) > theta0.powf(S_THETA);
            if switching && theta0 <= theta_min {
                (phi <= phi0 + ARMIJO * alpha * slope).then_some((theta, phi, true))
            } else {
                (theta <= (1.0 - GAMMA_THETA) * theta0 || phi <= phi0 - GAMMA_PHI * theta0)
                    .then_some((theta, phi, false))
            }
        };
        let mut alpha = alpha_max;
        let mut accepted: Option<(Vec<f64>, f64, bool)> = None;
        let mut first = true;
        while alpha >= alpha_min.min(alpha_max) {
            let xt: Vec<f64> = pt.x.iter().zip(&dx).map(|(a, d)| a + alpha * d).collect();
            if let Some((_, _, f_type)) = trial(&xt, alpha) {
                accepted = Some((xt, alpha, f_type));
                break;
            }
            let ct = sp.c(&xt);
            if first && norm1(&ct) >= theta0 {
                // Second-order correction of the full step.
                let mut rhs_soc = rhs.clone();
                for (r, (a, b)) in rhs_soc[n..].iter_mut().zip(c.iter().zip(&ct)) {
                    *r = -(alpha * a + b);
                }
                let (soc, _) = kkt.solve(&factor, &values, &rhs_soc);
                let dsoc = &soc[..n];
                let a_soc = bounds.max_step(&pt.x, dsoc, tau);
                let xs: Vec<f64> = pt.x.iter().zip(dsoc).map(|(a, d)| a + a_soc * d).collect();
                if let Some((_, _, f_type)) = trial(&xs, alpha) {
                    accepted = Some((xs, alpha, f_type));
                    break;
                }
            }
            first = false;
            alpha *= 0.5;
        }
        let (xn, step) = match accepted {
            Some((x, a, f_type)) => {
                stalled = 0;
                if !f_type {
                    filter.push(((1.0 - GAMMA_THETA) * theta0, phi0 - GAMMA_PHI * theta0));
                }
                (x, a)
            }
            None => {
                // No acceptable point: take a short step and start a new filter.
                stalled += 1;
                if stalled >= 10 && e0.primal > options.constraint_tol {
                    return Err(Error::InfeasibleDetected(format!(
                        "no progress on constraint violation {:.3e} after {stalled} rejected steps",
                        e0.primal
                    )));
                }
                filter.clear();
                let a = alpha.max(alpha_min).min(alpha_max);
                (pt.x.iter().zip(&dx).map(|(x, d)| x + a * d).collect(), a)
            }
        };
        let alpha_z =
            max_step_positive(&pt.zl, &dzl, tau).min(max_step_positive(&pt.zu, &dzu, tau));
        // Multipliers follow the dual step so that a short primal step does
        // not freeze a poor curvature model.
        for i in 0..m {
            pt.y[i] += alpha_z * dy[i];
        }
        for i in 0..n {
            pt.zl[i] += alpha_z * dzl[i];
            pt.zu[i] += alpha_z * dzu[i];
        }
        pt.x = xn;
        // Keep bound multipliers close to their central values.
        for i in 0..n {
            if bounds.has_lower(i) {
                let central = mu / (pt.x[i] - bounds.lower[i]);
                pt.zl[i] = pt.zl[i].clamp(central / KAPPA_SIGMA, central * KAPPA_SIGMA);
            }
            if bounds.has_upper(i) {
                let central = mu / (bounds.upper[i] - pt.x[i]);
                pt.zu[i] = pt.zu[i].clamp(central / KAPPA_SIGMA, central * KAPPA_SIGMA);
            }
        }
        debug!("ipm {it:3}: step {step:.2e} dual step {alpha_z:.2e} dw {dw:.1e} dc {dc:.1e}");
        trace.push(IterationLog {
            iteration: it,
            objective: f / sp.obj,
            constraint_violation: unscaled_viol,
            dual_infeasibility: e0.scaled_dual,
            mu,
            step,
            regularization: dw,
        });
    }

    let (kkt_error, point, errs, objective) = if status == IpmStatus::Converged {
        let f = nlp.objective(&pt.x);
        let e = errors(&pt, &sp.g(&pt.x), &sp.c(&pt.x), &sp.jac(&pt.x), 0.0);
        (e.total(), pt, e, f)
    } else {
        let (t, p, e, f) = best.expect("at least one iterate");
        (t, p, e, f)
    };
    info!("interior point: {status:?} after {iterations} iterations, error {kkt_error:.3e}");
    let y = point
        .y
        .iter()
        .zip(&sp.cons)
        .map(|(v, s)| v * s / sp.obj)
        .collect();
    let constraint_violation = norm_inf(&nlp.constraints(&point.x));
    Ok(IpmResult {
        x: point.x,
        y,
        z_lower: point.zl.iter().map(|v| v / sp.obj).collect(),
        z_upper: point.zu.iter().map(|v| v / sp.obj).collect(),
        objective,
        status,
        iterations,
        kkt_error,
        constraint_violation,
        dual_infeasibility: errs.dual,
        complementarity: errs.compl,
        trace,
    })
}
