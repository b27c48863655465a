//! Per-point scalar potentials: the energy MLP `E_ξ`, a quadratic test
//! potential, and evaluation over point clouds.

use jkoflow_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.1;
pub const ENERGY_HIDDEN: usize = 64;

/// A differentiable map from points to scalars, evaluated from a list of
/// parameter blocks so that the parameters can live on a tape.
pub trait Potential {
    fn input_dim(&self) -> usize;

    /// Current parameter values, in the order `eval_with` expects them.
    fn blocks(&self) -> &[Tensor];

    /// Replaces every parameter block; shapes must be unchanged.
    fn set_blocks(&mut self, blocks: Vec<Tensor>) -> Result<()>;

    /// Values at the rows of `x` as an `[n, 1]` variable.
    fn eval_with(&self, params: &[Var], x: &Var) -> Result<Var>;
}

pub(crate) fn check_blocks(expected: &[Tensor], got: &[Tensor]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter blocks, got {}",
            expected.len(),
            got.len()
        )));
    }
    for (i, (e, g)) in expected.iter().zip(got).enumerate() {
        if e.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "parameter block {i} has shape {:?}, expected {:?}",
                g.shape(),
                e.shape()
            )));
        }
    }
    Ok(())
}

/// Constant copies of a potential's parameters on `tape`.
pub fn constant_params(tape: &Tape, p: &dyn Potential) -> Vec<Var> {
    p.blocks().iter().map(|b| tape.constant(b.clone())).collect()
}

/// Values of `p` at every row of `cloud`.
pub fn eval_points(p: &dyn Potential, cloud: &PointCloud) -> Result<Vec<f64>> {
    cloud.check_dim(p.input_dim())?;
    if cloud.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let params = constant_params(&tape, p);
    let x = tape.constant(cloud.to_tensor());
    Ok(p.eval_with(&params, &x)?.value().data().to_vec())
}

/// `∇_x p` at every row of `cloud`.
pub fn gradient_points(p: &dyn Potential, cloud: &PointCloud) -> Result<PointCloud> {
    cloud.check_dim(p.input_dim())?;
    if cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let tape = Tape::new();
    let params = constant_params(&tape, p);
    let x = tape.leaf(cloud.to_tensor());
    let s = p.eval_with(&params, &x)?.sum()?;
    let g = tape.backward(&s, &[&x])?.remove(0);
    PointCloud::from_tensor(&g)
}

/// `E(x)` at a single point.
pub fn energy_eval(p: &dyn Potential, x: &[f64]) -> Result<f64> {
    let c = PointCloud::new(x.len().max(1), x.to_vec())?;
    Ok(eval_points(p, &c)?[0])
}

/// Empirical mean of `E` over the rows of `cloud`.
pub fn energy_of_measure(p: &dyn Potential, cloud: &PointCloud) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let v = eval_points(p, cloud)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Fully connected network with softplus hidden activations and a linear
/// output layer. Blocks alternate weight `[in, out]` and bias `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    blocks: Vec<Tensor>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let blocks = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(&[w[0], w[1]]), Tensor::zeros(&[1, w[1]])])
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            blocks,
        })
    }

    /// Weights drawn i.i.d. normal with standard deviation 0.1, biases zero.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for w in m.blocks.iter_mut().step_by(2) {
            let data = (0..w.len()).map(|_| normal.sample(&mut rng)).collect();
            *w = Tensor::new(w.shape().to_vec(), data)?;
        }
        Ok(m)
    }

    pub fn from_blocks(sizes: &[usize], blocks: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        m.set_blocks(blocks)?;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn block_names(&self) -> Vec<String> {
        (0..self.sizes.len() - 1)
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(Tensor::len).sum()
    }
}

impl Potential for Mlp {
    fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    fn set_blocks(&mut self, blocks: Vec<Tensor>) -> Result<()> {
        check_blocks(&self.blocks, &blocks)?;
        self.blocks = blocks;
        Ok(())
    }

    fn eval_with(&self, params: &[Var], x: &Var) -> Result<Var> {
        if params.len() != self.blocks.len() {
            return Err(Error::invalid("wrong number of parameter blocks"));
        }
        if x.value().cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.value().cols(),
            });
        }
        let layers = params.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            h = h.matmul(&params[2 * l])?.add(&params[2 * l + 1])?;
            if l + 1 < layers {
                h = h.softplus()?;
            }
        }
        Ok(h)
    }
}

/// The energy network `E_ξ`.
pub type EnergyParams = Mlp;

pub fn energy_sizes(input_dim: usize, hidden: usize) -> Vec<usize> {
    vec![input_dim, hidden, hidden, 1]
}

/// `d → 64 → 64 → 1` energy network.
pub fn init_energy(input_dim: usize, seed: u64) -> Result<EnergyParams> {
    Mlp::init(&energy_sizes(input_dim, ENERGY_HIDDEN), seed)
}

/// `E(x) = c‖x‖²` with the single parameter `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPotential {
    dim: usize,
    blocks: Vec<Tensor>,
}

impl QuadraticPotential {
    pub fn new(dim: usize, coefficient: f64) -> Self {
        Self {
            dim,
            blocks: vec![Tensor::full(&[1, 1], coefficient)],
        }
    }

    pub fn coefficient(&self) -> f64 {
        self.blocks[0].item()
    }
}

impl Potential for QuadraticPotential {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    fn set_blocks(&mut self, blocks: Vec<Tensor>) -> Result<()> {
        check_blocks(&self.blocks, &blocks)?;
        self.blocks = blocks;
        Ok(())
    }

    fn eval_with(&self, params: &[Var], x: &Var) -> Result<Var> {
        Ok(x.row_sq_norm()?.mul(&params[0])?)
    }
}

/// Rectangular sampling region for grid exports.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        Self {
            x_min: -half_width,
            x_max: half_width,
            y_min: -half_width,
            y_max: half_width,
            resolution,
        }
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    /// Grid nodes, x varying slowest.
    pub fn points(&self) -> Result<PointCloud> {
        if self.resolution == 0 || !(self.x_min <= self.x_max) || !(self.y_min <= self.y_max) {
            return Err(Error::invalid("grid needs positive resolution and ordered bounds"));
        }
        let xs = Self::axis(self.x_min, self.x_max, self.resolution);
        let ys = Self::axis(self.y_min, self.y_max, self.resolution);
        let data = xs.iter().flat_map(|&x| ys.iter().flat_map(move |&y| [x, y])).collect();
        PointCloud::new(2, data)
    }
}

/// `(x, y, E(x, y))` rows over a regular grid; two-dimensional potentials only.
pub fn energy_grid(p: &dyn Potential, grid: &GridSpec) -> Result<Vec<[f64; 3]>> {
    if p.input_dim() != 2 {
        return Err(Error::invalid(format!(
            "grid export needs a 2-dimensional potential, got {}",
            p.input_dim()
        )));
    }
    let pts = grid.points()?;
    let vals = eval_points(p, &pts)?;
    Ok(pts.points().zip(vals).map(|(q, v)| [q[0], q[1], v]).collect())
}

/// Grid node with the smallest value.
pub fn grid_argmin(rows: &[[f64; 3]]) -> Option<[f64; 2]> {
    rows.iter()
        .min_by(|a, b| a[2].total_cmp(&b[2]))
        .map(|r| [r[0], r[1]])
}
