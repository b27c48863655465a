//! Synthetic snapshot datasets: Euler-Maruyama flows under a potential
//! and Gaussian populations moved along fixed curves.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cloud::PointCloud;
use crate::dataset::{GeneratorInfo, SnapshotDataset};
use crate::energy::GridSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StyblinskiForm {
    /// `Ψ(x) = Σ_i (3x_i³ − 32x_i + 5)²`. Blows up under the default step
    /// size from every starting point.
    #[default]
    Printed,
    /// `Ψ(x) = ½ Σ_i (x_i⁴ − 16x_i² + 5x_i)`.
    Classical,
}

/// The potential `Φ` whose negative gradient is the drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriftSpec {
    /// `Φ(x) = c‖x‖²`.
    Quadratic { coefficient: f64 },
    Styblinski { form: StyblinskiForm },
    /// Bilinear interpolation of tabulated 2-D values, laid out like
    /// [`GridSpec::points`]. Points outside the grid use the nearest cell.
    Grid { grid: GridSpec, values: Vec<f64> },
}

impl DriftSpec {
    pub fn quadratic() -> Self {
        DriftSpec::Quadratic { coefficient: 1.0 }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DriftSpec::Quadratic { coefficient } if !coefficient.is_finite() => {
                Err(Error::invalid("quadratic coefficient must be finite"))
            }
            DriftSpec::Grid { grid, values } => {
                if dim != 2 {
                    return Err(Error::DimensionMismatch { expected: 2, got: dim });
                }
                if grid.resolution < 2 || !(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min) {
                    return Err(Error::invalid("grid needs resolution ≥ 2 and nonempty bounds"));
                }
                if values.len() != grid.resolution * grid.resolution {
                    return Err(Error::invalid(format!(
                        "grid of resolution {} needs {} values, got {}",
                        grid.resolution,
                        grid.resolution * grid.resolution,
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("grid potential values".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `∇Φ(x)` written into `out`.
    pub fn potential_gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            DriftSpec::Quadratic { coefficient } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = 2.0 * coefficient * v;
                }
            }
            DriftSpec::Styblinski { form } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = match form {
                        StyblinskiForm::Printed => 2.0 * (3.0 * v.powi(3) - 32.0 * v + 5.0) * (9.0 * v * v - 32.0),
                        StyblinskiForm::Classical => 2.0 * v.powi(3) - 16.0 * v + 2.5,
                    };
                }
            }
            DriftSpec::Grid { grid, values } => {
                let g = grid_gradient(grid, values, x[0], x[1]);
                out[0] = g[0];
                out[1] = g[1];
            }
        }
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.potential_gradient(x, out);
        for o in out.iter_mut() {
            *o = -*o;
        }
    }
}

fn grid_gradient(grid: &GridSpec, values: &[f64], x: f64, y: f64) -> [f64; 2] {
    let n = grid.resolution;
    let hx = (grid.x_max - grid.x_min) / (n - 1) as f64;
    let hy = (grid.y_max - grid.y_min) / (n - 1) as f64;
    let cell = |u: f64| (u.floor().max(0.0) as usize).min(n - 2);
    let (u, v) = ((x - grid.x_min) / hx, (y - grid.y_min) / hy);
    let (i, j) = (cell(u), cell(v));
    let (s, t) = ((u - i as f64).clamp(0.0, 1.0), (v - j as f64).clamp(0.0, 1.0));
    // x index varies slowest.
    let at = |a: usize, b: usize| values[a * n + b];
    let (f00, f01, f10, f11) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
    let dx = ((f10 - f00) * (1.0 - t) + (f11 - f01) * t) / hx;
    let dy = ((f01 - f00) * (1.0 - s) + (f11 - f10) * s) / hy;
    [dx, dy]
}

/// `X ← X + drift(X)·dt + N(0, sd²)·√dt`, recording the initial cloud and
/// the cloud after every step.
pub fn euler_maruyama(drift: &DriftSpec, x0: &PointCloud, dt: f64, sd: f64, n_steps: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    if !(sd >= 0.0) {
        return Err(Error::invalid("sd must be nonnegative"));
    }
    drift.validate(x0.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x0.dim();
    let noise = sd * dt.sqrt();
    let mut out = vec![x0.clone()];
    let mut data = x0.data().to_vec();
    let mut g = vec![0.0; d];
    for step in 0..n_steps {
        for p in data.chunks_exact_mut(d) {
            drift.drift(p, &mut g);
            for (v, gk) in p.iter_mut().zip(&g) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += gk * dt + noise * z;
            }
        }
        let cloud = PointCloud::new(d, data.clone()).map_err(|_| {
            Error::NonFinite(format!("Euler-Maruyama diverged at step {} of {n_steps}", step + 1))
        })?;
        out.push(cloud);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Quadratic,
    Styblinski,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialOptions {
    pub dim: usize,
    /// Initial cloud is `init_scale · N(0, I) + offset`.
    pub init_scale: f64,
    pub offset: Vec<f64>,
    pub styblinski_form: StyblinskiForm,
}

impl Default for PotentialOptions {
    fn default() -> Self {
        Self {
            dim: 2,
            init_scale: 1.5,
            offset: vec![0.0, 0.0],
            styblinski_form: StyblinskiForm::default(),
        }
    }
}

impl PotentialKind {
    pub fn name(&self) -> &'static str {
        match self {
            PotentialKind::Quadratic => "quadratic",
            PotentialKind::Styblinski => "styblinski",
        }
    }

    /// `(dt, sd, t_end)` for the kind.
    pub fn schedule(&self) -> (f64, f64, f64) {
        match self {
            PotentialKind::Quadratic => (0.25, 0.2, 1.0),
            PotentialKind::Styblinski => (0.06, 0.4, 0.5),
        }
    }

    /// `⌊t/dt⌋`, guarded against rounding just below an integer.
    pub fn steps(&self) -> usize {
        let (dt, _, t) = self.schedule();
        (t / dt + 1e-9).floor() as usize
    }
}

impl std::str::FromStr for PotentialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(PotentialKind::Quadratic),
            "styblinski" => Ok(PotentialKind::Styblinski),
            other => Err(Error::invalid(format!("unknown potential kind {other:?}"))),
        }
    }
}

pub fn make_potential_dataset(kind: PotentialKind, n_points: usize, seed: u64, opts: &PotentialOptions) -> Result<SnapshotDataset> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be at least 1"));
    }
    if opts.offset.len() != opts.dim {
        return Err(Error::DimensionMismatch {
            expected: opts.dim,
            got: opts.offset.len(),
        });
    }
    let (dt, sd, _) = kind.schedule();
    let n_steps = kind.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_points * opts.dim);
    for _ in 0..n_points {
        for off in &opts.offset {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(opts.init_scale * z + off);
        }
    }
    let x0 = PointCloud::new(opts.dim, data)?;
    let drift = match kind {
        PotentialKind::Quadratic => DriftSpec::quadratic(),
        PotentialKind::Styblinski => DriftSpec::Styblinski {
            form: opts.styblinski_form,
        },
    };
    let snapshots = euler_maruyama(&drift, &x0, dt, sd, n_steps, seed.wrapping_add(1))?;
    let timestamps = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let generator = GeneratorInfo {
        kind: kind.name().into(),
        params: json!({
            "n_points": n_points,
            "dt": dt,
            "sd": sd,
            "n_steps": n_steps,
            "drift": drift,
            "init_scale": opts.init_scale,
            "offset": opts.offset,
        }),
    };
    SnapshotDataset::new(kind.name(), snapshots, timestamps, generator, seed, "train")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Semicircle,
    Spiral,
    Line,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    /// Fresh samples around the training centers.
    Val,
    /// Shifted centers for the line task, fresh samples otherwise.
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

pub const WAYPOINTS: usize = 100;
pub const TRAJECTORY_SD: f64 = 0.5;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

impl TrajectoryKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::Semicircle => "semicircle",
            TrajectoryKind::Spiral => "spiral",
            TrajectoryKind::Line => "line",
        }
    }

    pub fn transitions(&self) -> usize {
        match self {
            TrajectoryKind::Semicircle => 5,
            TrajectoryKind::Spiral => 10,
            TrajectoryKind::Line => 2,
        }
    }

    /// The 100 points of the curve.
    pub fn waypoints(&self, split: Split) -> Vec<[f64; 2]> {
        let polar = |r: Vec<f64>, theta: Vec<f64>| -> Vec<[f64; 2]> {
            r.iter().zip(&theta).map(|(r, t)| [r * t.cos(), r * t.sin()]).collect()
        };
        match self {
            TrajectoryKind::Semicircle => polar(vec![10.0; WAYPOINTS], linspace(2.0 * PI, 0.0, WAYPOINTS)),
            TrajectoryKind::Spiral => polar(linspace(10.0, 1.0, WAYPOINTS), linspace(2.75 * PI, 0.0, WAYPOINTS)),
            TrajectoryKind::Line => {
                let (a, b) = if split == Split::Test { (-5.0, 7.5) } else { (-10.0, -2.5) };
                linspace(a, b, WAYPOINTS).into_iter().map(|x| [x, 0.0]).collect()
            }
        }
    }

    /// Snapshot centers at waypoint indices `round(k·99/T)`.
    pub fn centers(&self, split: Split) -> Vec<[f64; 2]> {
        let w = self.waypoints(split);
        let t = self.transitions();
        (0..=t)
            .map(|k| w[((k * (WAYPOINTS - 1)) as f64 / t as f64).round() as usize])
            .collect()
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semicircle" => Ok(TrajectoryKind::Semicircle),
            "spiral" => Ok(TrajectoryKind::Spiral),
            "line" => Ok(TrajectoryKind::Line),
            other => Err(Error::invalid(format!("unknown trajectory kind {other:?}"))),
        }
    }
}

/// `n_points` isotropic Gaussian samples with standard deviation `sd`
/// around each snapshot center.
pub fn make_trajectory_dataset(kind: TrajectoryKind, n_points: usize, sd: f64, seed: u64, split: Split) -> Result<SnapshotDataset> {
    if n_points == 0 {
        return Err(Error::invalid("n_points must be at least 1"));
    }
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(Error::invalid("sd must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let centers = kind.centers(split);
    let snapshots = centers
        .iter()
        .map(|c| {
            let mut data = Vec::with_capacity(2 * n_points);
            for _ in 0..n_points {
                for ck in c {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(ck + sd * z);
                }
            }
            PointCloud::new(2, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let timestamps = (0..centers.len()).map(|k| k as f64).collect();
    let generator = GeneratorInfo {
        kind: kind.name().into(),
        params: json!({
            "n_points": n_points,
            "sd": sd,
            "centers": centers,
        }),
    };
    SnapshotDataset::new(kind.name(), snapshots, timestamps, generator, seed, split.name())
}

/// Shifts `⌈fraction·n⌉` uniformly chosen points of every snapshot by an
/// independent `U[−noise_scale, noise_scale]` offset per coordinate.
pub fn corrupt(ds: &SnapshotDataset, fraction: f64, noise_scale: f64, seed: u64) -> Result<SnapshotDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("fraction must lie in [0, 1]"));
    }
    if !(noise_scale >= 0.0) || !noise_scale.is_finite() {
        return Err(Error::invalid("noise_scale must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ds.dim();
    let snapshots = ds
        .snapshots()
        .iter()
        .map(|cloud| {
            let n = cloud.len();
            let count = ((fraction * n as f64).ceil() as usize).min(n);
            let mut data = cloud.data().to_vec();
            let mut chosen = sample(&mut rng, n, count).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                for v in &mut data[i * d..(i + 1) * d] {
                    if noise_scale > 0.0 {
                        *v += rng.random_range(-noise_scale..=noise_scale);
                    }
                }
            }
            PointCloud::new(d, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ds.with_snapshots(snapshots)?;
    let params = &mut out.manifest_mut().generator.params;
    if !params.is_object() {
        *params = json!({});
    }
    params["corruption"] = json!({
        "fraction": fraction,
        "noise_scale": noise_scale,
        "seed": seed,
        "distribution": "uniform",
    });
    Ok(out)
}
