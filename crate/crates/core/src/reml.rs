//! Penalized likelihood maximization and smoothing-parameter selection by
//! restricted maximum likelihood.
//!
//! The inner problem maximizes `l(beta) - extra(beta) - beta' S beta / 2`
//! by damped Newton steps; the outer problem maximizes the Laplace
//! approximate REML criterion over `ln lambda` with a box-constrained BFGS
//! using finite-difference gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};
use crate::linalg::{self, EIGEN_REL_TOL};

/// One smoothing-parameter block `lambda_j * S_j` placed at `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBlock {
    pub offset: usize,
    pub matrix: DMatrix<f64>,
}

impl PenaltyBlock {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// An objective that the REML machinery can optimize.
pub trait PenalizedModel: Sync {
    fn n_params(&self) -> usize;

    fn penalties(&self) -> &[PenaltyBlock];

    /// Unpenalized log-likelihood.
    fn loglik(&self, beta: &DVector<f64>) -> Result<f64>;

    /// Additional non-quadratic penalty subtracted from the likelihood.
    fn extra_penalty(&self, _beta: &DVector<f64>) -> Result<f64> {
        Ok(0.0)
    }

    /// Gradient of `loglik - extra_penalty`.
    fn gradient(&self, beta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Negative Hessian of `loglik - extra_penalty`.
    fn neg_hessian(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
        fd_neg_hessian(self, beta)
    }

    fn differentiable(&self) -> bool {
        true
    }

    /// Number of softest Hessian directions along which the Gaussian factor
    /// of the Laplace approximation is replaced by a one-dimensional
    /// quadrature. Models with sign or rotation symmetries have degenerate
    /// critical points where the quadratic approximation fails.
    fn soft_directions(&self) -> usize {
        0
    }

    /// Places within `band` (relative) of a gradient discontinuity of
    /// `extra_penalty`. Models without kinks return nothing.
    fn kinks(&self, _beta: &DVector<f64>, _band: f64) -> Result<Vec<Kink>> {
        Ok(Vec::new())
    }

    fn objective(&self, beta: &DVector<f64>) -> Result<f64> {
        Ok(self.loglik(beta)? - self.extra_penalty(beta)?)
    }
}

/// A surface `value(beta) = 0` across which the objective gradient jumps by
/// `jump * normal` when `value` goes from positive to negative.
#[derive(Debug, Clone)]
pub struct Kink {
    /// Signed, scale-free distance to the kink.
    pub value: f64,
    /// Gradient of `value`.
    pub normal: DVector<f64>,
    pub jump: f64,
}

/// Kinks closer than this (relative) are treated as sitting on the surface.
const KINK_BAND: f64 = 1e-4;

/// Central differences of the analytic gradient, one column per parameter,
/// step `1e-5 * (1 + |beta_i|)`.
pub fn fd_neg_hessian<M: PenalizedModel + ?Sized>(model: &M, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    fd_neg_hessian_of(|b| model.gradient(b), beta)
}

/// Negative Jacobian of a gradient function by central differences.
pub fn fd_neg_hessian_of<G>(gradient: G, beta: &DVector<f64>) -> Result<DMatrix<f64>>
where
    G: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let p = beta.len();
    let cols: Vec<Result<DVector<f64>>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let h = 1e-5 * (1.0 + beta[i].abs());
            let mut up = beta.clone();
            up[i] += h;
            let mut dn = beta.clone();
            dn[i] -= h;
            Ok((gradient(&dn)? - gradient(&up)?) / (2.0 * h))
        })
        .collect();
    let mut h = DMatrix::zeros(p, p);
    for (i, c) in cols.into_iter().enumerate() {
        h.set_column(i, &c?);
    }
    linalg::symmetrize(&mut h);
    Ok(h)
}

/// Central finite-difference gradient of any scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, rel_step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = rel_step * (1.0 + x[i].abs());
        let mut up = x.clone();
        up[i] += h;
        let mut dn = x.clone();
        dn[i] -= h;
        g[i] = (f(&up)? - f(&dn)?) / (2.0 * h);
    }
    Ok(g)
}

/// `S_lambda` assembled into a `p x p` matrix.
pub fn penalty_matrix(blocks: &[PenaltyBlock], lambda: &[f64], p: usize) -> Result<DMatrix<f64>> {
    check_lambda(blocks, lambda)?;
    let mut s = DMatrix::zeros(p, p);
    for (b, &l) in blocks.iter().zip(lambda) {
        let k = b.dim();
        if b.offset + k > p {
            return invalid_input("penalty block exceeds the parameter vector");
        }
        let mut view = s.view_mut((b.offset, b.offset), (k, k));
        view += &b.matrix * l;
    }
    Ok(s)
}

/// `beta' S_lambda beta`.
pub fn penalty_quadratic(blocks: &[PenaltyBlock], lambda: &[f64], beta: &DVector<f64>) -> Result<f64> {
    check_lambda(blocks, lambda)?;
    let mut total = 0.0;
    for (b, &l) in blocks.iter().zip(lambda) {
        let k = b.dim();
        if b.offset + k > beta.len() {
            return invalid_input("penalty block exceeds the parameter vector");
        }
        let part = beta.rows(b.offset, k);
        total += l * (part.transpose() * &b.matrix * part)[0];
    }
    Ok(total)
}

fn check_lambda(blocks: &[PenaltyBlock], lambda: &[f64]) -> Result<()> {
    if blocks.len() != lambda.len() {
        return invalid_input(format!("{} penalty blocks but {} smoothing parameters", blocks.len(), lambda.len()));
    }
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return invalid_input("smoothing parameters must be finite and non-negative");
    }
    Ok(())
}

/// `log|S_lambda|_+` and the null-space dimension `Mp`, using the block
/// structure so that the value is exact in `ln lambda`.
pub fn log_pdet_penalty(blocks: &[PenaltyBlock], lambda: &[f64], p: usize) -> Result<(f64, usize)> {
    check_lambda(blocks, lambda)?;
    let mut logdet = 0.0;
    let mut rank = 0;
    for (b, &l) in blocks.iter().zip(lambda) {
        if l == 0.0 {
            continue;
        }
        let (ld, nulls) = linalg::log_pdet(&b.matrix);
        let r = b.dim() - nulls;
        logdet += ld + r as f64 * l.ln();
        rank += r;
    }
    Ok((logdet, p - rank))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    pub max_iter: usize,
    /// Convergence when `|grad| <= grad_tol * (1 + |l_p|)`.
    pub grad_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct InnerFit {
    pub beta: DVector<f64>,
    /// Negative Hessian of the penalized objective.
    pub neg_hessian: DMatrix<f64>,
    /// Penalized objective at `beta`.
    pub value: f64,
    pub loglik: f64,
    pub extra_penalty: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct PenalizedEval {
    value: f64,
    loglik: f64,
    extra: f64,
}

fn eval_penalized<M: PenalizedModel + ?Sized>(model: &M, s: &DMatrix<f64>, beta: &DVector<f64>) -> Result<PenalizedEval> {
    let loglik = model.loglik(beta)?;
    let extra = model.extra_penalty(beta)?;
    let quad = (beta.transpose() * s * beta)[0];
    let value = loglik - extra - 0.5 * quad;
    if !value.is_finite() {
        return Err(Error::NotPositiveDefinite("non-finite penalized objective".into()));
    }
    Ok(PenalizedEval { value, loglik, extra })
}

/// Newton direction with eigenvalues of `h` floored so that the step is an
/// ascent direction.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let (vals, vecs) = linalg::sym_eigen_sorted(h);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * top).max(1e-12);
    let proj = vecs.transpose() * g;
    let scaled = DVector::from_iterator(proj.len(), proj.iter().zip(vals.iter()).map(|(c, v)| c / v.abs().max(floor)));
    vecs * scaled
}

/// The gradient with every kink treated as inactive, and the smallest
/// element of the generalized gradient (each jump weighted in `[0, 1]`).
fn kink_gradients(g: &DVector<f64>, kinks: &[Kink]) -> (DVector<f64>, DVector<f64>) {
    if kinks.is_empty() {
        return (g.clone(), g.clone());
    }
    let mut smooth = g.clone();
    for k in kinks.iter().filter(|k| k.value < 0.0) {
        smooth -= &k.normal * k.jump;
    }
    let cols: Vec<DVector<f64>> = kinks.iter().map(|k| &k.normal * k.jump).collect();
    let mut weight = vec![0.0; kinks.len()];
    let mut r = smooth.clone();
    for _ in 0..100 {
        let mut moved = 0.0f64;
        for (j, c) in cols.iter().enumerate() {
            let cc = c.norm_squared();
            if cc == 0.0 {
                continue;
            }
            let old = weight[j];
            let new = (old - r.dot(c) / cc).clamp(0.0, 1.0);
            if new != old {
                r += c * (new - old);
                weight[j] = new;
                moved = moved.max((new - old).abs());
            }
        }
        if moved < 1e-12 {
            break;
        }
    }
    (smooth, r)
}

/// Newton step that keeps the given kinks on their surfaces to first order.
/// Kinks whose multiplier falls outside the subdifferential are released to
/// the side they prefer.
fn constrained_direction(h: &DMatrix<f64>, g_smooth: &DVector<f64>, kinks: &[Kink]) -> Option<DVector<f64>> {
    let (vals, vecs) = linalg::sym_eigen_sorted(h);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * top).max(1e-12);
    let inv_vals = DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v.abs().max(floor)));
    let solve = |b: &DVector<f64>| -> DVector<f64> { &vecs * (vecs.transpose() * b).component_mul(&inv_vals) };
    let mut held: Vec<usize> = (0..kinks.len()).collect();
    let mut grad = g_smooth.clone();
    loop {
        if held.is_empty() {
            return Some(solve(&grad));
        }
        let k = held.len();
        let mut n = DMatrix::zeros(grad.len(), k);
        for (c, &i) in held.iter().enumerate() {
            n.set_column(c, &kinks[i].normal);
        }
        let hin = DMatrix::from_columns(&(0..k).map(|c| solve(&n.column(c).into_owned())).collect::<Vec<_>>());
        let hig = solve(&grad);
        let schur = n.transpose() * &hin;
        let v = DVector::from_iterator(k, held.iter().map(|&i| kinks[i].value));
        let rhs = -v - n.transpose() * &hig;
        let nu = schur.lu().solve(&rhs)?;
        // multiplier as a fraction of the jump
        let mut worst: Option<(usize, f64)> = None;
        for (c, &i) in held.iter().enumerate() {
            let frac = nu[c] / kinks[i].jump;
            let excess = if frac < 0.0 { -frac } else if frac > 1.0 { frac - 1.0 } else { 0.0 };
            if excess > 1e-9 && worst.is_none_or(|(_, e)| excess > e) {
                worst = Some((c, excess));
            }
        }
        match worst {
            None => return Some(hig + hin * nu),
            Some((c, _)) => {
                let i = held.remove(c);
                if nu[c] > kinks[i].jump {
                    grad += &kinks[i].normal * kinks[i].jump;
                }
            }
        }
    }
}

/// One damped step: constrained onto nearby kinks when there are any, else
/// eigen-floored Newton, else scaled gradient ascent.
fn newton_iteration<M: PenalizedModel + ?Sized>(
    model: &M,
    s: &DMatrix<f64>,
    beta: &DVector<f64>,
    cur: &PenalizedEval,
    g: &DVector<f64>,
    g_smooth: &DVector<f64>,
    kinks: &[Kink],
) -> Result<Option<(DVector<f64>, PenalizedEval)>> {
    let h = model.neg_hessian(beta)? + s;
    if !kinks.is_empty() {
        if let Some(dir) = constrained_direction(&h, g_smooth, kinks) {
            let mut t = 1.0;
            while t > 1e-10 {
                let trial = beta + &dir * t;
                if let Ok(e) = eval_penalized(model, s, &trial) {
                    if e.value > cur.value {
                        return Ok(Some((trial, e)));
                    }
                }
                t *= 0.5;
            }
        }
    }
    for dir in [newton_direction(&h, g), g / (1.0 + h.diagonal().amax())] {
        let slope = g.dot(&dir);
        let mut t = 1.0;
        while t > 1e-12 {
            let trial = beta + &dir * t;
            if let Ok(e) = eval_penalized(model, s, &trial) {
                if e.value >= cur.value + 1e-4 * t * slope && e.value > cur.value - 1e-12 * cur.value.abs() {
                    return Ok(Some((trial, e)));
                }
            }
            t *= 0.5;
        }
    }
    Ok(None)
}

const MAX_SADDLE_ESCAPES: usize = 5;

/// A point with stationary gradient but negative curvature is a saddle (for
/// example a warp component sitting at zero). Step along the most negative
/// curvature direction, trying both signs and shrinking lengths.
fn escape_saddle<M: PenalizedModel + ?Sized>(
    model: &M,
    s: &DMatrix<f64>,
    h: &DMatrix<f64>,
    beta: &DVector<f64>,
    cur: &PenalizedEval,
) -> Option<(DVector<f64>, PenalizedEval)> {
    let (vals, vecs) = linalg::sym_eigen_sorted(h);
    let (idx, low) = vals.iter().enumerate().fold((0, f64::INFINITY), |m, (i, v)| if *v < m.1 { (i, *v) } else { m });
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if low >= -1e-8 * top.max(1.0) {
        return None;
    }
    let dir = vecs.column(idx).into_owned();
    let mut t = 1.0;
    while t > 1e-6 {
        let mut best: Option<(DVector<f64>, PenalizedEval)> = None;
        for sign in [1.0, -1.0] {
            let trial = beta + &dir * (sign * t);
            if let Ok(e) = eval_penalized(model, s, &trial) {
                if e.value > cur.value + 1e-13 * (1.0 + cur.value.abs())
                    && best.as_ref().is_none_or(|(_, b)| e.value > b.value)
                {
                    best = Some((trial, e));
                }
            }
        }
        if best.is_some() {
            return best;
        }
        t *= 0.5;
    }
    None
}

/// Maximize the penalized objective for fixed `lambda`, starting at `beta0`.
pub fn inner_fit<M: PenalizedModel + ?Sized>(
    model: &M,
    lambda: &[f64],
    beta0: &DVector<f64>,
    opts: &InnerOptions,
) -> Result<InnerFit> {
    let p = model.n_params();
    if beta0.len() != p {
        return invalid_input(format!("start vector has length {}, model expects {p}", beta0.len()));
    }
    let s = penalty_matrix(model.penalties(), lambda, p)?;
    let mut beta = beta0.clone();
    let mut cur = eval_penalized(model, &s, &beta)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;
    let mut at_kink;
    let mut escapes = 0;
    let mut final_hessian = None;
    loop {
        let g = model.gradient(&beta)? - &s * &beta;
        let kinks = model.kinks(&beta, KINK_BAND)?;
        let (g_smooth, g_eff) = kink_gradients(&g, &kinks);
        grad_norm = g_eff.norm();
        at_kink = !kinks.is_empty();
        if grad_norm <= opts.grad_tol * (1.0 + cur.value.abs()) {
            converged = true;
        } else if iterations < opts.max_iter {
            iterations += 1;
            match newton_iteration(model, &s, &beta, &cur, &g, &g_smooth, &kinks)? {
                Some((b, e)) => {
                    let gain = e.value - cur.value;
                    beta = b;
                    cur = e;
                    if gain.abs() > 1e-14 * (1.0 + cur.value.abs()) {
                        continue;
                    }
                    // no further progress is representable
                    let g = model.gradient(&beta)? - &s * &beta;
                    let kinks = model.kinks(&beta, KINK_BAND)?;
                    grad_norm = kink_gradients(&g, &kinks).1.norm();
                    at_kink = !kinks.is_empty();
                }
                None => {}
            }
            converged = grad_norm <= 1e3 * opts.grad_tol * (1.0 + cur.value.abs());
        }
        if converged {
            let h = model.neg_hessian(&beta)? + &s;
            if escapes < MAX_SADDLE_ESCAPES {
                if let Some((b, e)) = escape_saddle(model, &s, &h, &beta, &cur) {
                    escapes += 1;
                    beta = b;
                    cur = e;
                    converged = false;
                    continue;
                }
            }
            final_hessian = Some(h);
        }
        break;
    }
    if at_kink {
        log::debug!("inner optimum lies on a kink of the extra penalty");
    }
    if !converged {
        log::warn!("inner Newton stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    let neg_hessian = match final_hessian {
        Some(h) => h,
        None => model.neg_hessian(&beta)? + &s,
    };
    Ok(InnerFit {
        beta,
        neg_hessian,
        value: cur.value,
        loglik: cur.loglik,
        extra_penalty: cur.extra,
        grad_norm,
        iterations,
        converged,
    })
}

/// The REML criterion at one `lambda`, with its parts.
#[derive(Debug, Clone)]
pub struct RemlEval {
    pub reml: f64,
    pub inner: InnerFit,
    pub log_det_penalty: f64,
    pub log_det_hessian: f64,
    pub null_dim: usize,
    /// False when the Hessian needed eigenvalue flooring.
    pub hessian_pd: bool,
    /// Log ratio of quadrature to Gaussian integrals along soft directions.
    pub soft_correction: f64,
}

/// `log|H|`, flooring eigenvalues at `1e-12` when `H` is not positive definite.
pub fn log_det_hessian(h: &DMatrix<f64>) -> (f64, bool) {
    if let Some(c) = h.clone().cholesky() {
        return (linalg::chol_logdet(&c), true);
    }
    let (vals, _) = linalg::sym_eigen_sorted(h);
    (vals.iter().map(|v| v.max(1e-12).ln()).sum(), false)
}

/// Sum over the `count` softest eigen-directions `u` of `H` of
/// `ln(int exp(l_p(b + s u) - l_p(b)) ds) - ln(sqrt(2 pi / h_u))`, where `h_u`
/// is the eigenvalue as floored by [`log_det_hessian`]. Zero for an exactly
/// quadratic objective. Directions whose integral cannot be bracketed are
/// left to the Gaussian factor.
fn soft_direction_correction<M: PenalizedModel + ?Sized>(
    model: &M,
    s: &DMatrix<f64>,
    inner: &InnerFit,
    count: usize,
) -> f64 {
    if count == 0 {
        return 0.0;
    }
    let (vals, vecs) = linalg::sym_eigen_sorted(&inner.neg_hessian);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|a, b| vals[*a].total_cmp(&vals[*b]));
    let pd = inner.neg_hessian.clone().cholesky().is_some();
    let mut total = 0.0;
    for &k in order.iter().take(count) {
        let h = if pd { vals[k] } else { vals[k].max(1e-12) };
        let u = vecs.column(k).into_owned();
        let rel = |t: f64| -> f64 {
            match eval_penalized(model, s, &(&inner.beta + &u * t)) {
                Ok(e) => e.value - inner.value,
                Err(_) => f64::NEG_INFINITY,
            }
        };
        if let Some(log_int) = log_line_integral(&rel, 1.0 / h.max(1e-300).sqrt()) {
            total += log_int - 0.5 * (2.0 * std::f64::consts::PI / h).ln();
        }
    }
    total
}

/// `ln int exp(f(t)) dt` for `f(0) = 0` decaying on both sides, by Simpson's
/// rule over the region where `f > -40`.
fn log_line_integral(f: &dyn Fn(f64) -> f64, scale: f64) -> Option<f64> {
    const DROP: f64 = -40.0;
    let start = scale.clamp(1e-8, 10.0);
    let mut ends = [0.0; 2];
    for (side, sign) in [1.0, -1.0].into_iter().enumerate() {
        let mut t = start;
        if f(sign * t) < DROP {
            while t > 1e-12 && f(sign * t * 0.5) < DROP {
                t *= 0.5;
            }
        } else {
            let mut doublings = 0;
            while f(sign * t) >= DROP {
                t *= 2.0;
                doublings += 1;
                if doublings > 60 || t > 1e4 {
                    return None;
                }
            }
        }
        ends[side] = sign * t;
    }
    let (a, b) = (ends[1], ends[0]);
    let n = 800;
    let h = (b - a) / n as f64;
    let mut sum = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let v = f(a + h * i as f64);
        if v.is_finite() {
            sum += w * v.exp();
        }
    }
    let integral = sum * h / 3.0;
    (integral > 0.0 && integral.is_finite()).then(|| integral.ln())
}

pub fn reml_criterion<M: PenalizedModel + ?Sized>(
    model: &M,
    lambda: &[f64],
    beta0: &DVector<f64>,
    opts: &InnerOptions,
) -> Result<RemlEval> {
    let inner = inner_fit(model, lambda, beta0, opts)?;
    let (log_det_penalty, null_dim) = log_pdet_penalty(model.penalties(), lambda, model.n_params())?;
    let (log_det_hessian, hessian_pd) = log_det_hessian(&inner.neg_hessian);
    if !hessian_pd {
        log::warn!("negative Hessian is not positive definite; Laplace approximation degraded");
    }
    let s = penalty_matrix(model.penalties(), lambda, model.n_params())?;
    let soft_correction = soft_direction_correction(model, &s, &inner, model.soft_directions());
    let reml = inner.value + 0.5 * log_det_penalty - 0.5 * log_det_hessian
        + 0.5 * null_dim as f64 * (2.0 * std::f64::consts::PI).ln()
        + soft_correction;
    Ok(RemlEval { reml, inner, log_det_penalty, log_det_hessian, null_dim, hessian_pd, soft_correction })
}

/// Effective degrees of freedom `tr(H^-1 H0)` with `H0 = H - S_lambda`.
/// Negative curvature in `H0` (a likelihood locally convex along some
/// direction) is dropped first, so the result stays in `[0, p]`.
pub fn effective_dof(neg_hessian: &DMatrix<f64>, penalty: &DMatrix<f64>) -> f64 {
    let mut h0 = neg_hessian - penalty;
    linalg::symmetrize(&mut h0);
    let (vals, vecs) = linalg::sym_eigen_sorted(&h0);
    if vals.iter().all(|v| *v >= 0.0) {
        let (inv, _) = linalg::spd_inverse(neg_hessian);
        return neg_hessian.nrows() as f64 - (inv * penalty).trace();
    }
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0)));
    let h0_plus = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    let (inv, _) = linalg::spd_inverse(&(&h0_plus + penalty));
    (inv * h0_plus).trace()
}

pub fn compute_aic(loglik: f64, edf: f64) -> f64 {
    -2.0 * loglik + 2.0 * edf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptions {
    pub inner: InnerOptions,
    /// Box on `log10 lambda`.
    pub log10_lambda_bounds: (f64, f64),
    pub max_iter: usize,
    /// Convergence on the projected gradient of REML w.r.t. `ln lambda`.
    pub grad_tol: f64,
    /// Finite-difference step in `ln lambda`.
    pub fd_step: f64,
    /// Largest step in `ln lambda` per iteration.
    pub max_step: f64,
    pub initial_log_lambda: Option<Vec<f64>>,
    /// Common `log10 lambda` values tried for every block before the
    /// quasi-Newton run when no start is given; the best becomes the start.
    pub initial_scan: Vec<f64>,
    /// Restart from `ln lambda = -2` and `2` when the first run ends on a bound.
    pub multi_start: bool,
    /// Allow non-differentiable objectives (strict fold penalty). The REML
    /// criterion is then not a valid Laplace approximation.
    pub force_nondifferentiable: bool,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            inner: InnerOptions::default(),
            log10_lambda_bounds: (-8.0, 10.0),
            max_iter: 100,
            grad_tol: 1e-3,
            fd_step: 1e-3,
            max_step: 5.0,
            initial_log_lambda: None,
            initial_scan: vec![-2.0, 0.0, 2.0, 4.0, 6.0],
            multi_start: true,
            force_nondifferentiable: false,
        }
    }
}

/// Result of a REML fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemlFit {
    pub beta: DVector<f64>,
    pub lambda: Vec<f64>,
    pub log_lambda: Vec<f64>,
    /// Negative Hessian of the penalized objective at `beta`.
    pub neg_hessian: DMatrix<f64>,
    pub reml: f64,
    pub loglik: f64,
    pub penalized_value: f64,
    pub extra_penalty: f64,
    pub edf: f64,
    pub aic: f64,
    pub null_dim: usize,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

impl RemlFit {
    /// Coefficients plus smoothing parameters.
    pub fn parameter_count(&self) -> usize {
        self.beta.len() + self.lambda.len()
    }
}

struct OuterRun {
    rho: DVector<f64>,
    eval: RemlEval,
    iters: usize,
    inner_iters: usize,
    converged: bool,
    notes: Vec<String>,
}

/// Select `lambda` by maximizing REML, then report the fit at the optimum.
pub fn outer_optimize<M: PenalizedModel + ?Sized>(
    model: &M,
    beta0: &DVector<f64>,
    opts: &OuterOptions,
) -> Result<RemlFit> {
    if !model.differentiable() && !opts.force_nondifferentiable {
        return Err(Error::NonDifferentiable(
            "the objective is not differentiable (strict fold penalty); REML is invalid unless forced".into(),
        ));
    }
    let m = model.penalties().len();
    let ln10 = std::f64::consts::LN_10;
    let lo = opts.log10_lambda_bounds.0 * ln10;
    let hi = opts.log10_lambda_bounds.1 * ln10;
    if lo >= hi {
        return invalid_input("empty smoothing-parameter box");
    }
    let mut diagnostics = vec![format!(
        "inner: max_iter={} grad_tol={:e}; outer: max_iter={} grad_tol={:e} fd_step={:e} log10 lambda in [{}, {}]",
        opts.inner.max_iter,
        opts.inner.grad_tol,
        opts.max_iter,
        opts.grad_tol,
        opts.fd_step,
        opts.log10_lambda_bounds.0,
        opts.log10_lambda_bounds.1
    )];
    if !model.differentiable() {
        diagnostics.push("non-differentiable objective forced; REML value is not a valid Laplace approximation".into());
    }

    let run = if m == 0 {
        let eval = reml_criterion(model, &[], beta0, &opts.inner)?;
        let inner_iters = eval.inner.iterations;
        let converged = eval.inner.converged;
        OuterRun { rho: DVector::zeros(0), eval, iters: 0, inner_iters, converged, notes: Vec::new() }
    } else {
        let start = match &opts.initial_log_lambda {
            Some(v) if v.len() == m => DVector::from_iterator(m, v.iter().map(|x| x.clamp(lo, hi))),
            Some(_) => return invalid_input("initial log lambda has the wrong length"),
            None => scan_start(model, beta0, m, lo, hi, opts)?,
        };
        let mut best = bfgs_run(model, beta0, start, lo, hi, opts)?;
        let on_bound = best.rho.iter().any(|r| (r - lo).abs() < 1e-8 || (r - hi).abs() < 1e-8);
        if on_bound && opts.multi_start {
            best.notes.push("first run ended on a bound; restarting from ln lambda = -2 and 2".into());
            for s in [-2.0, 2.0] {
                match bfgs_run(model, beta0, DVector::from_element(m, s), lo, hi, opts) {
                    Ok(r) if r.eval.reml > best.eval.reml + 1e-8 => {
                        let mut notes = std::mem::take(&mut best.notes);
                        notes.push(format!("restart from {s} improved REML to {}", r.eval.reml));
                        let prior_inner = best.inner_iters;
                        best = r;
                        best.inner_iters += prior_inner;
                        best.notes.splice(0..0, notes);
                    }
                    Ok(r) => best.inner_iters += r.inner_iters,
                    Err(e) => best.notes.push(format!("restart from {s} failed: {e}")),
                }
            }
        }
        best
    };

    let lambda: Vec<f64> = run.rho.iter().map(|r| r.exp()).collect();
    let s = penalty_matrix(model.penalties(), &lambda, model.n_params())?;
    let edf = effective_dof(&run.eval.inner.neg_hessian, &s);
    diagnostics.extend(run.notes);
    if !run.eval.hessian_pd {
        diagnostics.push("negative Hessian not positive definite at the optimum".into());
    }
    if !run.eval.inner.converged {
        diagnostics.push(format!("inner fit not converged, gradient norm {:.3e}", run.eval.inner.grad_norm));
    }
    let inner = run.eval.inner;
    Ok(RemlFit {
        aic: compute_aic(inner.loglik, edf),
        edf,
        beta: inner.beta,
        log_lambda: run.rho.iter().copied().collect(),
        lambda,
        neg_hessian: inner.neg_hessian,
        reml: run.eval.reml,
        loglik: inner.loglik,
        penalized_value: inner.value,
        extra_penalty: inner.extra_penalty,
        null_dim: run.eval.null_dim,
        inner_iters: run.inner_iters,
        outer_iters: run.iters,
        converged: run.converged && inner.converged,
        diagnostics,
    })
}

/// Best common `ln lambda` among the scan values, preferring evaluations
/// whose Hessian is positive definite (a floored determinant inflates REML).
fn scan_start<M: PenalizedModel + ?Sized>(
    model: &M,
    beta0: &DVector<f64>,
    m: usize,
    lo: f64,
    hi: f64,
    opts: &OuterOptions,
) -> Result<DVector<f64>> {
    let mut best: Option<(bool, f64, f64)> = None;
    for l10 in &opts.initial_scan {
        let rho = (l10 * std::f64::consts::LN_10).clamp(lo, hi);
        let lambda = vec![rho.exp(); m];
        let Ok(e) = reml_criterion(model, &lambda, beta0, &opts.inner) else { continue };
        let key = (e.hessian_pd && e.inner.converged, e.reml);
        if best.is_none_or(|(pd, r, _)| (key.0, key.1) > (pd, r)) {
            best = Some((key.0, key.1, rho));
        }
    }
    Ok(DVector::from_element(m, best.map_or(0.0, |b| b.2)))
}

fn bfgs_run<M: PenalizedModel + ?Sized>(
    model: &M,
    beta0: &DVector<f64>,
    start: DVector<f64>,
    lo: f64,
    hi: f64,
    opts: &OuterOptions,
) -> Result<OuterRun> {
    let m = start.len();
    let mut inner_iters = 0usize;
    let mut evaluate = |rho: &DVector<f64>, warm: &DVector<f64>| -> Result<RemlEval> {
        let lambda: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        let e = reml_criterion(model, &lambda, warm, &opts.inner)?;
        inner_iters += e.inner.iterations;
        Ok(e)
    };

    let mut rho = start;
    let mut cur = evaluate(&rho, beta0)?;
    let mut notes = Vec::new();

    // Gradient of -REML in ln lambda; one-sided at the box edges.
    let grad = |rho: &DVector<f64>,
                cur: &RemlEval,
                evaluate: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> Result<RemlEval>|
     -> Result<DVector<f64>> {
        let mut g = DVector::zeros(m);
        for i in 0..m {
            let h = opts.fd_step;
            let up_ok = rho[i] + h <= hi;
            let dn_ok = rho[i] - h >= lo;
            let at = |delta: f64, evaluate: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> Result<RemlEval>| {
                let mut r = rho.clone();
                r[i] += delta;
                evaluate(&r, &cur.inner.beta).map(|e| -e.reml)
            };
            g[i] = match (up_ok, dn_ok) {
                (true, true) => (at(h, evaluate)? - at(-h, evaluate)?) / (2.0 * h),
                (true, false) => (at(h, evaluate)? + cur.reml) / h,
                _ => (-cur.reml - at(-h, evaluate)?) / h,
            };
        }
        Ok(g)
    };

    let mut g = grad(&rho, &cur, &mut evaluate)?;
    let mut binv = DMatrix::<f64>::identity(m, m);
    let mut curvature_known = false;
    let mut converged = false;
    let mut iters = 0;
    while iters < opts.max_iter {
        let free: Vec<bool> = (0..m)
            .map(|i| !((rho[i] <= lo + 1e-12 && g[i] > 0.0) || (rho[i] >= hi - 1e-12 && g[i] < 0.0)))
            .collect();
        let pg = DVector::from_iterator(m, (0..m).map(|i| if free[i] { g[i] } else { 0.0 }));
        if pg.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        iters += 1;
        let mut d = -(&binv * &pg);
        for i in 0..m {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if !curvature_known || d.dot(&pg) >= 0.0 {
            // no usable curvature yet: unit step in the steepest direction
            binv = DMatrix::identity(m, m);
            curvature_known = false;
            d = -&pg / pg.amax();
        }
        let big = d.amax();
        if big > opts.max_step {
            d *= opts.max_step / big;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let trial = (&rho + &d * t).map(|r| r.clamp(lo, hi));
            let moved = &trial - &rho;
            if moved.amax() < 1e-12 {
                break;
            }
            if let Ok(e) = evaluate(&trial, &cur.inner.beta) {
                if -e.reml <= -cur.reml + 1e-4 * g.dot(&moved) {
                    next = Some((trial, e));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, e)) = next else {
            if pg.amax() <= 10.0 * opts.grad_tol {
                converged = true;
                break;
            }
            // REML is not smooth here (typically the inner optimum switches
            // branch); finish with a derivative-free compass search
            notes.push(format!(
                "outer line search stalled with projected gradient {:.3e}; finished by compass search",
                pg.amax()
            ));
            let (r, e, steps) = compass_search(rho, cur, lo, hi, 0.1 * opts.fd_step, opts.max_iter, &mut evaluate)?;
            rho = r;
            cur = e;
            iters += steps;
            converged = steps < opts.max_iter;
            break;
        };
        let s = &trial - &rho;
        let gain = e.reml - cur.reml;
        rho = trial;
        cur = e;
        let g_new = grad(&rho, &cur, &mut evaluate)?;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if !curvature_known {
                binv = DMatrix::identity(m, m) * (sy / y.norm_squared());
                curvature_known = true;
            }
            let r = 1.0 / sy;
            let ident = DMatrix::<f64>::identity(m, m);
            let left = &ident - &s * y.transpose() * r;
            let right = &ident - &y * s.transpose() * r;
            binv = left * &binv * right + &s * s.transpose() * r;
        } else {
            curvature_known = false;
        }
        g = g_new;
        if gain.abs() <= 1e-12 * (1.0 + cur.reml.abs()) && s.amax() < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        notes.push(format!("outer optimizer stopped after {iters} iterations"));
    }
    Ok(OuterRun { rho, eval: cur, iters, inner_iters, converged, notes })
}

/// Coordinate pattern search on REML in `ln lambda`, halving the step from
/// one down to `min_step`.
fn compass_search(
    mut rho: DVector<f64>,
    mut cur: RemlEval,
    lo: f64,
    hi: f64,
    min_step: f64,
    max_moves: usize,
    evaluate: &mut dyn FnMut(&DVector<f64>, &DVector<f64>) -> Result<RemlEval>,
) -> Result<(DVector<f64>, RemlEval, usize)> {
    let mut step = 1.0;
    let mut moves = 0;
    while step >= min_step && moves < max_moves {
        let mut improved = false;
        for i in 0..rho.len() {
            for sign in [1.0, -1.0] {
                let mut trial = rho.clone();
                trial[i] = (trial[i] + sign * step).clamp(lo, hi);
                if trial[i] == rho[i] {
                    continue;
                }
                if let Ok(e) = evaluate(&trial, &cur.inner.beta) {
                    if e.reml > cur.reml + 1e-10 * (1.0 + cur.reml.abs()) {
                        rho = trial;
                        cur = e;
                        improved = true;
                        moves += 1;
                        break;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((rho, cur, moves))
}

/// Null-space dimension of `S_lambda` counted from eigenvalues directly.
pub fn null_dim_by_eigen(s: &DMatrix<f64>) -> usize {
    let (vals, _) = linalg::sym_eigen_sorted(s);
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    vals.iter().filter(|v| v.abs() <= EIGEN_REL_TOL * top.max(f64::MIN_POSITIVE)).count()
}
