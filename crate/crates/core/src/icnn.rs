//! Input-convex network `ψ_θ` and its gradient map.
//!
//! Layer `l` computes `z_{l+1} = a_l(x W^x_l + z_l W^z_l + b_l)` with
//! `a_0` the squared leaky-relu and every later `a_l` the leaky-relu. With
//! all `W^z_l ≥ 0` the output is convex in `x`.

use jkoflow_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::energy::INIT_STD;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcnnConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of layers, the last of which has width 1.
    pub depth: usize,
    /// Leaky-relu slope for negative inputs.
    pub beta: f64,
}

impl Default for IcnnConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_width: 64,
            depth: 4,
            beta: 0.2,
        }
    }
}

impl IcnnConfig {
    pub fn new(input_dim: usize, hidden_width: usize, depth: usize) -> Self {
        Self {
            input_dim,
            hidden_width,
            depth,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 || self.depth == 0 {
            return Err(Error::invalid("icnn dimensions must be positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("leaky slope must be in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    /// Output width of each layer.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| if l + 1 == self.depth { 1 } else { self.hidden_width })
            .collect()
    }

    /// Shapes of the parameter blocks: per layer `W^x`, then `W^z` (from
    /// the second layer on), then `b`.
    pub fn block_shapes(&self) -> Vec<[usize; 2]> {
        let w = self.widths();
        let mut out = Vec::new();
        for l in 0..self.depth {
            out.push([self.input_dim, w[l]]);
            if l > 0 {
                out.push([w[l - 1], w[l]]);
            }
            out.push([1, w[l]]);
        }
        out
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.depth {
            out.push(format!("wx{l}"));
            if l > 0 {
                out.push(format!("wz{l}"));
            }
            out.push(format!("b{l}"));
        }
        out
    }

    /// Which blocks hold latent weights `W^z`.
    pub fn latent_mask(&self) -> Vec<bool> {
        self.block_names().iter().map(|n| n.starts_with("wz")).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.block_shapes().iter().map(|s| s[0] * s[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcnnParams {
    config: IcnnConfig,
    blocks: Vec<Tensor>,
}

/// Normal(0, 0.1²) weights with latent weights clamped at zero, zero biases.
pub fn init_icnn(input_dim: usize, hidden_width: usize, depth: usize, seed: u64) -> Result<IcnnParams> {
    IcnnParams::init(IcnnConfig::new(input_dim, hidden_width, depth), seed)
}

impl IcnnParams {
    pub fn init(config: IcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let blocks = config
            .block_shapes()
            .into_iter()
            .zip(config.block_names())
            .map(|(s, name)| {
                let n = s[0] * s[1];
                let data = if name.starts_with('b') {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(s.to_vec(), data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut p = Self { config, blocks };
        p.project_nonnegative();
        Ok(p)
    }

    pub fn zeros(config: IcnnConfig) -> Result<Self> {
        config.validate()?;
        let blocks = config.block_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, blocks })
    }

    pub fn from_blocks(config: IcnnConfig, blocks: Vec<Tensor>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        crate::energy::check_blocks(&p.blocks, &blocks)?;
        p.blocks = blocks;
        Ok(p)
    }

    pub fn config(&self) -> &IcnnConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Tensor] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Tensor> {
        self.blocks
    }

    /// Clamps every latent weight at zero; other blocks are untouched.
    pub fn project_nonnegative(&mut self) {
        for (b, latent) in self.blocks.iter_mut().zip(self.config.latent_mask()) {
            if latent {
                *b = b.map(|v| v.max(0.0));
            }
        }
    }

    pub fn projected(&self) -> Self {
        let mut p = self.clone();
        p.project_nonnegative();
        p
    }

    /// `λ Σ_l ‖max(−W^z_l, 0)‖²_F`.
    pub fn convexity_penalty(&self, lambda: f64) -> f64 {
        self.blocks
            .iter()
            .zip(self.config.latent_mask())
            .filter(|(_, latent)| *latent)
            .map(|(b, _)| b.data().iter().map(|v| v.min(0.0).powi(2)).sum::<f64>())
            .sum::<f64>()
            * lambda
    }

    pub fn is_convex(&self) -> bool {
        self.blocks
            .iter()
            .zip(self.config.latent_mask())
            .all(|(b, latent)| !latent || b.data().iter().all(|&v| v >= 0.0))
    }

    /// `ψ_θ` at every row of `cloud`.
    pub fn forward(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        cloud.check_dim(self.config.input_dim)?;
        let tape = Tape::new();
        let params = self.constants(&tape);
        let x = tape.constant(cloud.to_tensor());
        Ok(icnn_forward(&self.config, &params, &x)?.value().data().to_vec())
    }

    /// `∇ψ_θ(x) + ℓx` at every row of `cloud`.
    pub fn gradient_map(&self, cloud: &PointCloud, ell: f64) -> Result<PointCloud> {
        cloud.check_dim(self.config.input_dim)?;
        if cloud.is_empty() {
            return Ok(cloud.clone());
        }
        let tape = Tape::new();
        let params = self.constants(&tape);
        let x = tape.leaf(cloud.to_tensor());
        let s = icnn_forward(&self.config, &params, &x)?.sum()?;
        let g = tape.backward(&s, &[&x])?.remove(0);
        let t = g.zip_map(x.value(), "gradient_map", |gi, xi| gi + ell * xi)?;
        PointCloud::from_tensor(&t)
    }

    /// Image of `cloud` under the gradient map; same number of rows.
    pub fn pushforward(&self, cloud: &PointCloud, ell: f64) -> Result<PointCloud> {
        self.gradient_map(cloud, ell)
    }

    fn constants(&self, tape: &Tape) -> Vec<Var> {
        self.blocks.iter().map(|b| tape.constant(b.clone())).collect()
    }
}

/// `ψ_θ` at the rows of `x`, as an `[n, 1]` variable.
pub fn icnn_forward(cfg: &IcnnConfig, params: &[Var], x: &Var) -> Result<Var> {
    let expected = cfg.block_shapes().len();
    if params.len() != expected {
        return Err(Error::invalid(format!("expected {expected} icnn blocks, got {}", params.len())));
    }
    if x.value().cols() != cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.input_dim,
            got: x.value().cols(),
        });
    }
    let mut it = params.iter();
    let mut next = || it.next().expect("block count checked");
    let (wx, b) = (next(), next());
    let mut z = x.matmul(wx)?.add(b)?.sq_leaky_relu(cfg.beta)?;
    for _ in 1..cfg.depth {
        let (wx, wz, b) = (next(), next(), next());
        z = x.matmul(wx)?.add(&z.matmul(wz)?)?.add(b)?.leaky_relu(cfg.beta)?;
    }
    Ok(z)
}

/// `T(x) = ∇ψ_θ(x) + ℓx` on the tape, differentiable with respect to the
/// parameters (and to `x` when it is tracked).
pub fn transport_map(cfg: &IcnnConfig, params: &[Var], x: &Var, ell: f64) -> Result<Var> {
    let tape = x.tape();
    let xl = if x.requires_grad() {
        x.clone()
    } else {
        tape.leaf(x.value().clone())
    };
    let s = icnn_forward(cfg, params, &xl)?.sum()?;
    let g = tape.grad(&s, &[&xl], true)?.remove(0);
    if ell == 0.0 {
        return Ok(g);
    }
    Ok(g.add(&xl.scale(ell)?)?)
}

/// `λ Σ_l ‖max(−W^z_l, 0)‖²_F` on the tape.
pub fn convexity_penalty_var(cfg: &IcnnConfig, params: &[Var], lambda: f64) -> Result<Var> {
    let tape = params[0].tape();
    let mut total = tape.scalar(0.0);
    for (p, latent) in params.iter().zip(cfg.latent_mask()) {
        if latent {
            total = total.add(&p.neg()?.relu()?.square()?.sum()?)?;
        }
    }
    Ok(total.scale(lambda)?)
}
