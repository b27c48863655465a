//! Entropic optimal transport between discrete measures with squared
//! Euclidean cost.

use std::cmp::Ordering;

use jkoflow_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted point masses `Σ a_i δ_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: PointCloud,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: PointCloud, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if weights.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        check_weights(&weights, WEIGHT_SUM_TOL)?;
        Ok(Self { points, weights })
    }

    pub fn uniform(points: PointCloud) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        Ok(Self {
            points,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights
            .iter()
            .all(|&a| (a - w).abs() <= WEIGHT_SUM_TOL)
    }
}

fn check_weights(w: &[f64], tol: f64) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornOptions {
    /// Largest allowed absolute violation of either marginal.
    pub marginal_tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            marginal_tol: 1e-6,
            max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// The `n × m` coupling.
    pub coupling: Tensor,
    /// `⟨P, C⟩ − ε H(P)`.
    pub cost: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// `C_ij = ‖x_i − y_j‖²`.
pub fn pairwise_sq_cost(x: &PointCloud, y: &PointCloud) -> Result<Tensor> {
    y.check_dim(x.dim())?;
    let mut c = Vec::with_capacity(x.len() * y.len());
    for xi in x.points() {
        for yj in y.points() {
            c.push(xi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(Tensor::matrix(x.len(), y.len(), c)?)
}

fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn ln_weights(w: &[f64]) -> Vec<f64> {
    w.iter().map(|v| v.ln()).collect()
}

fn check_problem(a: &[f64], b: &[f64], cost: &Tensor, eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    if cost.shape() != [a.len(), b.len()] {
        return Err(Error::invalid(format!(
            "cost shape {:?} does not match weights ({}, {})",
            cost.shape(),
            a.len(),
            b.len()
        )));
    }
    check_weights(a, 1e-9)?;
    check_weights(b, 1e-9)
}

/// Decreasing regularization levels ending at `eps`, starting near the
/// largest cost so warm-started potentials never have far to travel.
fn eps_schedule(c: &[f64], eps: f64) -> Vec<f64> {
    let cmax = c.iter().fold(0.0_f64, |m, &v| m.max(v));
    let mut out = Vec::new();
    let mut e = cmax;
    while e > eps {
        out.push(e);
        e *= 0.5;
    }
    out.push(eps);
    out
}

/// Coarse stages stop at this marginal error; only the last stage uses the
/// caller's tolerance.
const STAGE_TOL: f64 = 1e-3;

struct Solved {
    /// Regularization the potentials belong to; below the target only
    /// when the budget ran out during a coarse stage.
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    converged: bool,
    err: f64,
}

/// Log-domain Sinkhorn iterations on the dual potentials, with
/// ε-scaling warm starts.
///
/// Stops once the largest marginal violation is at most
/// `opts.marginal_tol`; hitting `opts.max_iter` first returns the current
/// iterate with `converged = false`.
pub fn sinkhorn(
    a: &[f64],
    b: &[f64],
    cost: &Tensor,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    check_problem(a, b, cost, eps)?;
    let (la, lb) = (ln_weights(a), ln_weights(b));
    let c = cost.data();
    let s = solve(a, &la, &lb, c, eps, opts);
    finish(
        &la,
        &lb,
        c,
        &s.f,
        &s.g,
        s.eps,
        s.iterations,
        s.converged,
        s.err,
    )
}

fn solve(a: &[f64], la: &[f64], lb: &[f64], c: &[f64], eps: f64, opts: &SinkhornOptions) -> Solved {
    let (n, m) = (la.len(), lb.len());
    let update_g = |f: &[f64], e: f64| -> Vec<f64> {
        (0..m)
            .map(|j| -e * logsumexp((0..n).map(|i| la[i] + (f[i] - c[i * m + j]) / e)))
            .collect()
    };
    let update_f = |g: &[f64], e: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let row = &c[i * m..(i + 1) * m];
                -e * logsumexp((0..m).map(|j| lb[j] + (g[j] - row[j]) / e))
            })
            .collect()
    };

    let schedule = eps_schedule(c, eps);
    let last = schedule.len() - 1;
    let mut f = vec![0.0; n];
    let mut g = update_g(&f, schedule[0]);
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    for (k, &e) in schedule.iter().enumerate() {
        let tol = if k == last {
            opts.marginal_tol
        } else {
            STAGE_TOL.max(opts.marginal_tol)
        };
        if k > 0 {
            g = update_g(&f, e);
        }
        loop {
            iterations += 1;
            // Columns are exact after a g-update; the row sums of the
            // current plan fall out of the next f-update.
            let f_new = update_f(&g, e);
            err = (0..n)
                .map(|i| a[i] * (((f[i] - f_new[i]) / e).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            if err <= tol && (k == last || iterations < opts.max_iter) {
                break;
            }
            if iterations >= opts.max_iter || !err.is_finite() {
                return Solved {
                    eps: e,
                    f,
                    g,
                    iterations,
                    converged: false,
                    err,
                };
            }
            f = f_new;
            g = update_g(&f, e);
        }
    }
    Solved {
        eps,
        f,
        g,
        iterations,
        converged: true,
        err,
    }
}

/// Symmetric problem `W_ε(μ, μ)` by averaged fixed-point updates, which
/// keep `f = g`.
fn sinkhorn_symmetric(
    a: &[f64],
    cost: &Tensor,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    check_problem(a, a, cost, eps)?;
    let n = a.len();
    let la = ln_weights(a);
    let c = cost.data();
    let schedule = eps_schedule(c, eps);
    let last = schedule.len() - 1;
    let mut f = vec![0.0; n];
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let mut converged = true;
    let mut stage_eps = eps;
    'stages: for (k, &e) in schedule.iter().enumerate() {
        stage_eps = e;
        let tol = if k == last {
            opts.marginal_tol
        } else {
            STAGE_TOL.max(opts.marginal_tol)
        };
        loop {
            iterations += 1;
            let ft: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &c[i * n..(i + 1) * n];
                    -e * logsumexp((0..n).map(|j| la[j] + (f[j] - row[j]) / e))
                })
                .collect();
            err = (0..n)
                .map(|i| a[i] * (((f[i] - ft[i]) / e).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            if err <= tol && (k == last || iterations < opts.max_iter) {
                break;
            }
            if iterations >= opts.max_iter || !err.is_finite() {
                converged = false;
                break 'stages;
            }
            for (fi, ti) in f.iter_mut().zip(&ft) {
                *fi = 0.5 * (*fi + ti);
            }
        }
    }
    finish(&la, &la, c, &f, &f, stage_eps, iterations, converged, err)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    la: &[f64],
    lb: &[f64],
    c: &[f64],
    f: &[f64],
    g: &[f64],
    eps: f64,
    iterations: usize,
    converged: bool,
    marginal_error: f64,
) -> Result<SinkhornResult> {
    let (n, m) = (la.len(), lb.len());
    let mut p = Vec::with_capacity(n * m);
    let mut cost = 0.0;
    for i in 0..n {
        for j in 0..m {
            let cij = c[i * m + j];
            let lp = la[i] + lb[j] + (f[i] + g[j] - cij) / eps;
            let pij = lp.exp();
            if pij > 0.0 {
                cost += pij * cij + eps * pij * (lp - 1.0);
            }
            p.push(pij);
        }
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("sinkhorn cost".into()));
    }
    Ok(SinkhornResult {
        coupling: Tensor::matrix(n, m, p)?,
        cost,
        f: f.to_vec(),
        g: g.to_vec(),
        iterations,
        converged,
        marginal_error,
    })
}

/// `W_ε(μ, ν)` between two measures.
///
/// The pair is solved in a canonical orientation, so swapping the
/// arguments returns the transposed plan and the same cost.
pub fn entropic_ot(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    if canonical_order(mu, nu) == Ordering::Greater {
        let r = entropic_ot(nu, mu, eps, opts)?;
        return Ok(SinkhornResult {
            coupling: transpose(&r.coupling),
            f: r.g,
            g: r.f,
            ..r
        });
    }
    if mu == nu {
        return self_ot(mu, eps, opts);
    }
    let c = pairwise_sq_cost(mu.points(), nu.points())?;
    sinkhorn(mu.weights(), nu.weights(), &c, eps, opts)
}

fn canonical_order(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Ordering {
    let key = |m: &DiscreteMeasure| (m.len(), m.points().dim());
    key(mu).cmp(&key(nu)).then_with(|| {
        let a = mu.points().data().iter().chain(mu.weights());
        let b = nu.points().data().iter().chain(nu.weights());
        a.zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let d = t.data();
    let out = (0..c)
        .flat_map(|j| (0..r).map(move |i| d[i * c + j]))
        .collect();
    Tensor::matrix(c, r, out).expect("transposed plan is finite")
}

fn self_ot(mu: &DiscreteMeasure, eps: f64, opts: &SinkhornOptions) -> Result<SinkhornResult> {
    let c = pairwise_sq_cost(mu.points(), mu.points())?;
    sinkhorn_symmetric(mu.weights(), &c, eps, opts)
}

/// The three entropic problems behind a Sinkhorn divergence.
#[derive(Debug, Clone)]
pub struct DivergenceParts {
    pub value: f64,
    pub cross: SinkhornResult,
    pub self_mu: SinkhornResult,
    pub self_nu: SinkhornResult,
}

impl DivergenceParts {
    pub fn converged(&self) -> bool {
        self.cross.converged && self.self_mu.converged && self.self_nu.converged
    }
}

pub fn sinkhorn_divergence_parts(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<DivergenceParts> {
    let cross = entropic_ot(mu, nu, eps, opts)?;
    let self_mu = self_ot(mu, eps, opts)?;
    let self_nu = self_ot(nu, eps, opts)?;
    let value = cross.cost - 0.5 * (self_mu.cost + self_nu.cost);
    Ok(DivergenceParts {
        value,
        cross,
        self_mu,
        self_nu,
    })
}

/// `W̄_ε(μ, ν) = W_ε(μ, ν) − ½(W_ε(μ, μ) + W_ε(ν, ν))`.
pub fn sinkhorn_divergence(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<f64> {
    let parts = sinkhorn_divergence_parts(mu, nu, eps, opts)?;
    if !parts.converged() {
        log::warn!("sinkhorn divergence evaluated with an unconverged subproblem");
    }
    Ok(parts.value)
}

/// Envelope gradient of `W̄_ε(μ, ν)` with respect to the points of `μ`,
/// holding every optimal coupling fixed.
pub fn divergence_grad_from_parts(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    parts: &DivergenceParts,
) -> Result<Tensor> {
    if !parts.converged() {
        let worst = [&parts.cross, &parts.self_mu, &parts.self_nu]
            .into_iter()
            .find(|r| !r.converged)
            .expect("some subproblem is unconverged");
        return Err(Error::NotConverged {
            iterations: worst.iterations,
            marginal_error: worst.marginal_error,
        });
    }
    let (x, y) = (mu.points(), nu.points());
    let (n, m, d) = (x.len(), y.len(), x.dim());
    let p = parts.cross.coupling.data();
    let q = parts.self_mu.coupling.data();
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let xi = x.point(i);
        let gi = &mut grad[i * d..(i + 1) * d];
        for j in 0..m {
            let w = 2.0 * p[i * m + j];
            for (g, (a, b)) in gi.iter_mut().zip(xi.iter().zip(y.point(j))) {
                *g += w * (a - b);
            }
        }
        for k in 0..n {
            let w = q[i * n + k] + q[k * n + i];
            for (g, (a, b)) in gi.iter_mut().zip(xi.iter().zip(x.point(k))) {
                *g -= w * (a - b);
            }
        }
    }
    Ok(Tensor::matrix(n, d, grad)?)
}

/// Value and position gradient of the Sinkhorn divergence in one pass.
pub fn sinkhorn_divergence_with_grad(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<(f64, Tensor)> {
    let parts = sinkhorn_divergence_parts(mu, nu, eps, opts)?;
    let g = divergence_grad_from_parts(mu, nu, &parts)?;
    Ok((parts.value, g))
}

/// `n × d` gradient of `W̄_ε(μ, ν)` with respect to the points of `μ`.
pub fn sinkhorn_grad_positions(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<Tensor> {
    sinkhorn_divergence_with_grad(mu, nu, eps, opts).map(|(_, g)| g)
}

/// Exact squared 2-Wasserstein distance between two uniform clouds of
/// equal size `n ≤ 8`, by enumerating every assignment.
pub fn exact_w2_small(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    let n = mu.len();
    if nu.len() != n {
        return Err(Error::invalid(format!(
            "exact W2 needs equal sizes, got {n} and {}",
            nu.len()
        )));
    }
    if n > 8 {
        return Err(Error::invalid(format!(
            "exact W2 limited to 8 points, got {n}"
        )));
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return Err(Error::invalid("exact W2 needs uniform weights"));
    }
    let c = pairwise_sq_cost(mu.points(), nu.points())?;
    let c = c.data();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| {
        p.iter()
            .enumerate()
            .map(|(i, &j)| c[i * n + j])
            .sum::<f64>()
    };
    let mut best = total(&perm);
    // Heap's algorithm, iterative form.
    let mut stack = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(total(&perm));
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac(p: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(PointCloud::new(p.len(), p.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn logsumexp_handles_all_neg_inf() {
        assert_eq!(
            logsumexp([f64::NEG_INFINITY; 2].into_iter()),
            f64::NEG_INFINITY
        );
        assert!((logsumexp([0.0, 0.0].into_iter()) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn self_problem_of_single_atom() {
        let r = self_ot(&dirac(&[0.0, 0.0]), 1.0, &SinkhornOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.cost + 1.0).abs() < 1e-12);
    }

    #[test]
    fn heap_enumeration_visits_all() {
        // Only one assignment has zero cost; it must be found from any order.
        let x = PointCloud::new(1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = PointCloud::new(1, vec![4.0, 2.0, 0.0, 3.0, 1.0]).unwrap();
        let w = exact_w2_small(
            &DiscreteMeasure::uniform(x).unwrap(),
            &DiscreteMeasure::uniform(y).unwrap(),
        )
        .unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(sinkhorn(&[1.0], &[1.0], &c, 0.0, &SinkhornOptions::default()).is_err());
        assert!(sinkhorn(&[0.5], &[1.0], &c, 1.0, &SinkhornOptions::default()).is_err());
        assert!(
            DiscreteMeasure::new(PointCloud::new(1, vec![0.0, 1.0]).unwrap(), vec![0.7, 0.2])
                .is_err()
        );
    }
}
