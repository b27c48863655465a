//! Bilevel fitting of the energy: every transition runs a differentiable
//! JKO step (or a forward step) and takes one Adam step on the energy
//! parameters against the Sinkhorn divergence to the next snapshot.

use jkoflow_autodiff::{AdError, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dataset::SnapshotDataset;
use crate::energy::{energy_sizes, Mlp, Potential};
use crate::error::{Error, Result};
use crate::forward::{forward_step, forward_step_on_tape};
use crate::icnn::{IcnnConfig, IcnnParams};
use crate::jko::{jko_step, jko_step_on_tape, JkoConfig};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::ot::{sinkhorn_divergence_with_grad, DiscreteMeasure, SinkhornOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Jkonet,
    Forward,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Jkonet => "jkonet",
            ModelKind::Forward => "forward",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jkonet" => Ok(ModelKind::Jkonet),
            "forward" => Ok(ModelKind::Forward),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub teacher_forcing: bool,
    pub clip_norm: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub energy_hidden: usize,
    pub icnn_width: usize,
    pub icnn_depth: usize,
    pub icnn_beta: f64,
    pub jko: JkoConfig,
    pub sinkhorn: SinkhornOptions,
    /// Outer steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 250,
            epochs: 100,
            teacher_forcing: false,
            clip_norm: 10.0,
            epsilon: 1.0,
            seed: 0,
            energy_hidden: 64,
            icnn_width: 64,
            icnn_depth: 4,
            icnn_beta: 0.2,
            jko: JkoConfig::default(),
            sinkhorn: SinkhornOptions::default(),
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        self.jko.validate()
    }

    pub fn icnn(&self, input_dim: usize) -> IcnnConfig {
        IcnnConfig {
            input_dim,
            hidden_width: self.icnn_width,
            depth: self.icnn_depth,
            beta: self.icnn_beta,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }

    fn energy_seed(&self) -> u64 {
        self.seed
    }

    fn icnn_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn batch_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// A fitted (or freshly initialized) energy together with everything
/// needed to roll it forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub energy: Mlp,
    pub config: TrainConfig,
    pub fitted: bool,
    /// Outer updates applied so far.
    pub steps: usize,
    /// Inner solution of the most recent JKO step, if any.
    pub last_theta: Option<IcnnParams>,
}

pub type JkonetModel = Model;
pub type ForwardModel = Model;

impl Model {
    pub fn new(kind: ModelKind, input_dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let energy = Mlp::init(&energy_sizes(input_dim, config.energy_hidden), config.energy_seed())?;
        Ok(Self {
            kind,
            energy,
            config,
            fitted: false,
            steps: 0,
            last_theta: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.energy.input_dim()
    }

    /// `θ⁰`, the inner initialization every JKO step starts from.
    pub fn theta0(&self) -> Result<IcnnParams> {
        IcnnParams::init(self.config.icnn(self.input_dim()), self.config.icnn_seed())
    }
}

/// One logged outer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub trajectory: usize,
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

/// Gradient of the Sinkhorn loss for one transition.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub loss: f64,
    /// Clipped gradient, one tensor per energy block.
    pub grads: Vec<Tensor>,
    pub pre_clip_norm: f64,
    pub prediction: PointCloud,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    /// Inner solution `θ*` for JKO steps.
    pub theta: Option<IcnnParams>,
}

/// `∇_ξ W̄_ε(ρ_next(ξ), μ_next)` for a single transition from `nu`.
///
/// The divergence gradient with respect to the predicted positions is
/// taken with the couplings fixed and pulled back through the unrolled
/// inner loop.
pub fn outer_gradient(
    kind: ModelKind,
    energy: &dyn Potential,
    theta0: &IcnnParams,
    nu: &PointCloud,
    target: &PointCloud,
    cfg: &TrainConfig,
) -> Result<OuterStep> {
    if kind == ModelKind::Jkonet && !cfg.jko.unroll {
        return Err(Error::invalid("outer gradient needs the unrolled inner loop"));
    }
    let tape = Tape::new();
    let xi: Vec<Var> = energy.blocks().iter().map(|b| tape.leaf(b.clone())).collect();
    let x = tape.constant(nu.to_tensor());
    let (next, inner_iterations, inner_converged, theta) = match kind {
        ModelKind::Jkonet => {
            let s = jko_step_on_tape(energy, &xi, &x, theta0, &cfg.jko)?;
            let blocks = s.theta.iter().map(|v| v.value().clone()).collect();
            let theta = IcnnParams::from_blocks(*theta0.config(), blocks)?;
            (s.next, s.iterations, s.converged, Some(theta))
        }
        ModelKind::Forward => (forward_step_on_tape(energy, &xi, &x)?, 0, true, None),
    };
    let prediction = PointCloud::from_tensor(next.value())?;
    let (loss, g) = sinkhorn_divergence_with_grad(
        &DiscreteMeasure::uniform(prediction.clone())?,
        &DiscreteMeasure::uniform(target.clone())?,
        cfg.epsilon,
        &cfg.sinkhorn,
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("sinkhorn loss".into()));
    }
    let pulled = next.mul(&tape.constant(g))?.sum()?;
    let refs: Vec<&Var> = xi.iter().collect();
    let mut grads = tape.backward(&pulled, &refs)?;
    let pre_clip_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    Ok(OuterStep {
        loss,
        grads,
        pre_clip_norm,
        prediction,
        inner_iterations,
        inner_converged,
        theta,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome<P> {
    pub energy: P,
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best_energy: P,
    pub log: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
    pub last_theta: Option<IcnnParams>,
}

fn check_data(data: &[SnapshotDataset], dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("no trajectories to train on"));
    }
    for ds in data {
        if ds.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: ds.dim(),
            });
        }
        if ds.transitions() == 0 {
            return Err(Error::invalid(format!("trajectory {:?} has no transitions", ds.manifest().name)));
        }
        if ds.snapshots().iter().any(PointCloud::is_empty) {
            return Err(Error::EmptyCloud);
        }
    }
    Ok(())
}

fn batch(cloud: &PointCloud, size: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    if size >= cloud.len() {
        return cloud.clone();
    }
    cloud.select(&sample(rng, cloud.len(), size).into_vec())
}

/// The outer loop for any potential; `on_step` sees the parameters after
/// every update and may stop training by returning an error.
pub fn fit<P, F>(kind: ModelKind, init: P, data: &[SnapshotDataset], cfg: &TrainConfig, mut on_step: F) -> Result<FitOutcome<P>>
where
    P: Potential + Clone,
    F: FnMut(&P, &StepLog) -> Result<()>,
{
    cfg.validate()?;
    let dim = init.input_dim();
    check_data(data, dim)?;
    let theta0 = IcnnParams::init(cfg.icnn(dim), cfg.icnn_seed())?;
    let mut energy = init;
    let mut blocks = energy.blocks().to_vec();
    let mut adam = Adam::new(cfg.adam(), &blocks);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed());
    let mut log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut best: Option<(f64, P)> = None;
    let mut theta_start = theta0.clone();
    let mut last_theta = None;

    for epoch in 0..cfg.epochs {
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for (trajectory, ds) in data.iter().enumerate() {
            let snaps = ds.snapshots();
            let mut rollout: Option<PointCloud> = None;
            for t in 0..ds.transitions() {
                let nu = match (&rollout, cfg.teacher_forcing || t == 0) {
                    (Some(prev), false) => prev.clone(),
                    _ => batch(&snaps[t], cfg.batch_size, &mut rng),
                };
                let target = batch(&snaps[t + 1], cfg.batch_size, &mut rng);
                let step = match outer_gradient(kind, &energy, &theta_start, &nu, &target, cfg) {
                    Ok(s) => s,
                    // No trustworthy gradient; without a prediction the rest
                    // of an un-forced rollout is undefined too.
                    Err(Error::NotConverged { iterations, marginal_error }) => {
                        log::warn!(
                            "epoch {epoch}, trajectory {trajectory}, t {t}: sinkhorn unconverged after {iterations} \
                             iterations (marginal error {marginal_error:e}); update skipped"
                        );
                        if cfg.teacher_forcing {
                            continue;
                        }
                        break;
                    }
                    Err(Error::NonFinite(what)) => {
                        return Err(Error::NonFinite(format!("{what} (epoch {epoch}, trajectory {trajectory}, t {t})")))
                    }
                    Err(Error::Autodiff(AdError::NonFinite { op })) => {
                        return Err(Error::NonFinite(format!("{op} (epoch {epoch}, trajectory {trajectory}, t {t})")))
                    }
                    Err(e) => return Err(e),
                };
                adam.step(&mut blocks, &step.grads)?;
                energy.set_blocks(blocks.clone())?;
                let entry = StepLog {
                    step: log.len() + 1,
                    epoch,
                    trajectory,
                    t,
                    loss: step.loss,
                    grad_norm: step.pre_clip_norm,
                    inner_iterations: step.inner_iterations,
                    inner_converged: step.inner_converged,
                };
                log::debug!(
                    "step {} epoch {epoch} t {t}: loss {:.6} |g| {:.3e} inner {}{}",
                    entry.step,
                    entry.loss,
                    entry.grad_norm,
                    entry.inner_iterations,
                    if entry.inner_converged { "" } else { " (max)" }
                );
                on_step(&energy, &entry)?;
                epoch_total += step.loss;
                epoch_count += 1;
                log.push(entry);
                if let Some(theta) = step.theta {
                    if cfg.jko.warm_start {
                        theta_start = theta.clone();
                    }
                    last_theta = Some(theta);
                }
                rollout = Some(step.prediction);
            }
        }
        let mean = epoch_total / epoch_count as f64;
        epoch_losses.push(mean);
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, energy.clone()));
        }
    }
    let best_energy = best.map_or_else(|| energy.clone(), |(_, e)| e);
    Ok(FitOutcome {
        energy,
        best_energy,
        log,
        epoch_losses,
        last_theta,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Model,
    pub log: Vec<StepLog>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a model of `kind` from a fresh initialization.
pub fn train<F>(kind: ModelKind, data: &[SnapshotDataset], cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&Model, &StepLog) -> Result<()>,
{
    let dim = data.first().map(SnapshotDataset::dim).ok_or_else(|| Error::invalid("no trajectories to train on"))?;
    let mut model = Model::new(kind, dim, cfg.clone())?;
    let init = model.energy.clone();
    let mut snapshot = model.clone();
    let out = fit(kind, init, data, cfg, |energy, entry| {
        snapshot.energy = energy.clone();
        snapshot.steps = entry.step;
        snapshot.fitted = true;
        on_step(&snapshot, entry)
    })?;
    model.steps = out.log.len();
    model.fitted = true;
    model.last_theta = out.last_theta;
    let mut best = model.clone();
    model.energy = out.energy;
    best.energy = out.best_energy;
    Ok(TrainOutcome {
        model,
        best,
        log: out.log,
        epoch_losses: out.epoch_losses,
    })
}

pub fn train_jkonet(data: &[SnapshotDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(ModelKind::Jkonet, data, cfg, |_, _| Ok(()))
}

pub fn train_forward(data: &[SnapshotDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(ModelKind::Forward, data, cfg, |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// Condition every step on the true previous snapshot.
    OneStep,
    /// Roll out from `μ₀` on the model's own predictions.
    AllSteps,
}

/// A single model step from `cloud`.
pub fn model_step(model: &Model, cloud: &PointCloud, theta0: &IcnnParams) -> Result<(PointCloud, Option<IcnnParams>)> {
    match model.kind {
        ModelKind::Jkonet => {
            let r = jko_step(&model.energy, cloud, theta0, &model.config.jko)?;
            Ok((r.next, Some(r.theta)))
        }
        ModelKind::Forward => Ok((forward_step(&model.energy, cloud)?, None)),
    }
}

/// `[ρ₀, …, ρ_T]` with `ρ₀ = μ₀`. One-step mode needs `truths` holding at
/// least `μ₀, …, μ_{T−1}`.
pub fn predict_trajectory(
    model: &Model,
    mu0: &PointCloud,
    steps: usize,
    mode: PredictMode,
    truths: Option<&[PointCloud]>,
) -> Result<Vec<PointCloud>> {
    mu0.check_dim(model.input_dim())?;
    if mode == PredictMode::OneStep {
        let have = truths.map_or(0, <[PointCloud]>::len);
        if have < steps {
            return Err(Error::invalid(format!(
                "one-step prediction over {steps} transitions needs {steps} conditioning snapshots, got {have}"
            )));
        }
    }
    if !model.fitted {
        log::warn!("predicting with an untrained model");
    }
    let warm = model.config.jko.warm_start;
    let mut theta = match (&model.last_theta, warm) {
        (Some(th), true) => th.clone(),
        _ => model.theta0()?,
    };
    let mut out = vec![mu0.clone()];
    for t in 0..steps {
        let input = match mode {
            PredictMode::AllSteps => &out[t],
            PredictMode::OneStep => &truths.expect("checked above")[t],
        };
        let (next, th) = model_step(model, input, &theta)?;
        if let (Some(th), true) = (th, warm) {
            theta = th;
        }
        out.push(next);
    }
    Ok(out)
}
