//! One JKO proximal step solved over input-convex potentials.

use jkoflow_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::energy::{constant_params, Potential};
use crate::error::{Error, Result};
use crate::icnn::{convexity_penalty_var, transport_map, IcnnParams};
use crate::optim::{Adam, AdamConfig, VarAdam};

/// How latent ICNN weights are kept nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityMode {
    /// Clamp after every update.
    Projection,
    /// Add `λ Σ ‖max(−W^z, 0)‖²` to the objective instead.
    Penalty { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JkoConfig {
    pub tau: f64,
    /// `ℓ` in `T(x) = ∇ψ(x) + ℓx`.
    pub strong_convexity: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub min_iters: usize,
    pub max_iters: usize,
    /// Stop once the average gradient norm falls below this (after
    /// `min_iters`).
    pub tol: f64,
    pub unroll: bool,
    /// Start each step from the previous step's solution instead of `θ⁰`.
    pub warm_start: bool,
    pub convexity: ConvexityMode,
}

impl Default for JkoConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            strong_convexity: 0.0,
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            min_iters: 50,
            max_iters: 100,
            tol: 1.0,
            unroll: true,
            warm_start: false,
            convexity: ConvexityMode::Projection,
        }
    }
}

impl JkoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.strong_convexity >= 0.0) {
            return Err(Error::invalid("strong convexity must be nonnegative"));
        }
        if self.min_iters > self.max_iters {
            return Err(Error::invalid(format!(
                "min_iters {} exceeds max_iters {}",
                self.min_iters, self.max_iters
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let ConvexityMode::Penalty { lambda } = self.convexity {
            if !(lambda >= 0.0) {
                return Err(Error::invalid("penalty weight must be nonnegative"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn projects(&self) -> bool {
        matches!(self.convexity, ConvexityMode::Projection)
    }
}

#[derive(Debug, Clone)]
pub struct JkoStepResult {
    pub next: PointCloud,
    pub theta: IcnnParams,
    /// Objective value before each update, plus the final one.
    pub trace: Vec<f64>,
    pub metric: f64,
    /// Number of Adam updates taken.
    pub iterations: usize,
    pub converged: bool,
}

/// `J(T#ν) + (1/2τ) mean ‖x − T(x)‖²` on the tape.
pub fn jko_objective(
    theta: &[Var],
    theta0: &IcnnParams,
    energy: &dyn Potential,
    xi: &[Var],
    nu: &Var,
    cfg: &JkoConfig,
) -> Result<Var> {
    let icnn = theta0.config();
    let t = transport_map(icnn, theta, nu, cfg.strong_convexity)?;
    let j = energy.eval_with(xi, &t)?.mean()?;
    let prox = nu.sub(&t)?.row_sq_norm()?.mean()?.scale(0.5 / cfg.tau)?;
    let mut f = j.add(&prox)?;
    if let ConvexityMode::Penalty { lambda } = cfg.convexity {
        f = f.add(&convexity_penalty_var(icnn, theta, lambda)?)?;
    }
    Ok(f)
}

/// Objective value at fixed parameters.
pub fn jko_objective_value(theta: &IcnnParams, energy: &dyn Potential, nu: &PointCloud, cfg: &JkoConfig) -> Result<f64> {
    let tape = Tape::new();
    let th: Vec<Var> = theta.blocks().iter().map(|b| tape.constant(b.clone())).collect();
    let xi = constant_params(&tape, energy);
    let x = tape.constant(nu.to_tensor());
    Ok(jko_objective(&th, theta, energy, &xi, &x, cfg)?.item())
}

/// `Σ_i ‖g_i‖₂ / Σ_i |g_i|` over parameter blocks.
pub fn convergence_metric(grads: &[Tensor]) -> f64 {
    let count: usize = grads.iter().map(Tensor::len).sum();
    if count == 0 {
        return 0.0;
    }
    grads.iter().map(|g| g.sq_norm().sqrt()).sum::<f64>() / count as f64
}

fn check_inputs(energy: &dyn Potential, nu: &PointCloud, theta0: &IcnnParams, cfg: &JkoConfig) -> Result<()> {
    cfg.validate()?;
    if nu.is_empty() {
        return Err(Error::EmptyCloud);
    }
    nu.check_dim(theta0.config().input_dim)?;
    nu.check_dim(energy.input_dim())
}

fn non_finite(iter: usize, e: Error) -> Error {
    match e {
        Error::Autodiff(inner) => Error::NonFinite(format!("jko objective at inner iteration {iter}: {inner}")),
        other => other,
    }
}

/// Solves one step with `E` held fixed, on a fresh tape per iteration.
pub fn jko_step(energy: &dyn Potential, nu: &PointCloud, theta0: &IcnnParams, cfg: &JkoConfig) -> Result<JkoStepResult> {
    check_inputs(energy, nu, theta0, cfg)?;
    let mut theta: Vec<Tensor> = theta0.blocks().to_vec();
    let mut adam = Adam::new(cfg.adam(), &theta);
    let mask = theta0.config().latent_mask();
    let mut trace = Vec::new();
    let mut k = 0;
    let (metric, converged) = loop {
        let tape = Tape::new();
        let th: Vec<Var> = theta.iter().map(|b| tape.leaf(b.clone())).collect();
        let xi = constant_params(&tape, energy);
        let x = tape.constant(nu.to_tensor());
        let f = jko_objective(&th, theta0, energy, &xi, &x, cfg).map_err(|e| non_finite(k, e))?;
        let refs: Vec<&Var> = th.iter().collect();
        let grads = tape.backward(&f, &refs).map_err(|e| non_finite(k, e.into()))?;
        trace.push(f.item());
        let metric = convergence_metric(&grads);
        if k >= cfg.min_iters && metric < cfg.tol {
            break (metric, true);
        }
        if k >= cfg.max_iters {
            break (metric, false);
        }
        adam.step(&mut theta, &grads)?;
        if cfg.projects() {
            for (b, &latent) in theta.iter_mut().zip(&mask) {
                if latent {
                    *b = b.map(|v| v.max(0.0));
                }
            }
        }
        k += 1;
    };
    if !converged {
        log::debug!("jko step stopped at max_iters with metric {metric:e}");
    }
    let theta = IcnnParams::from_blocks(*theta0.config(), theta)?;
    let next = theta.pushforward(nu, cfg.strong_convexity)?;
    Ok(JkoStepResult {
        next,
        theta,
        trace,
        metric,
        iterations: k,
        converged,
    })
}

/// A JKO step whose every inner update is recorded on the tape.
pub struct TapeStep {
    /// `T_θ*(ν)` as an `[n, d]` variable.
    pub next: Var,
    pub theta: Vec<Var>,
    pub trace: Vec<f64>,
    pub metric: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Unrolled JKO step: `ρ_next` is differentiable with respect to the
/// energy parameters `xi` (and `nu`, if tracked).
pub fn jko_step_on_tape(
    energy: &dyn Potential,
    xi: &[Var],
    nu: &Var,
    theta0: &IcnnParams,
    cfg: &JkoConfig,
) -> Result<TapeStep> {
    let cloud = PointCloud::from_tensor(nu.value())?;
    check_inputs(energy, &cloud, theta0, cfg)?;
    let tape = nu.tape();
    let mut theta: Vec<Var> = theta0.blocks().iter().map(|b| tape.leaf(b.clone())).collect();
    let mut adam = VarAdam::new(cfg.adam(), &theta);
    let mask = theta0.config().latent_mask();
    let mut trace = Vec::new();
    let mut k = 0;
    let (metric, converged) = loop {
        let f = jko_objective(&theta, theta0, energy, xi, nu, cfg).map_err(|e| non_finite(k, e))?;
        let refs: Vec<&Var> = theta.iter().collect();
        let grads = tape.grad(&f, &refs, true).map_err(|e| non_finite(k, e.into()))?;
        trace.push(f.item());
        let values: Vec<Tensor> = grads.iter().map(|g| g.value().clone()).collect();
        let metric = convergence_metric(&values);
        if k >= cfg.min_iters && metric < cfg.tol {
            break (metric, true);
        }
        if k >= cfg.max_iters {
            break (metric, false);
        }
        theta = adam.step(&theta, &grads)?;
        if cfg.projects() {
            for (b, &latent) in theta.iter_mut().zip(&mask) {
                if latent {
                    *b = b.relu()?;
                }
            }
        }
        k += 1;
    };
    let next = transport_map(theta0.config(), &theta, nu, cfg.strong_convexity)?;
    Ok(TapeStep {
        next,
        theta,
        trace,
        metric,
        iterations: k,
        converged,
    })
}
