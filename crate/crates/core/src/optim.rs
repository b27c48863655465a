//! Adam over plain tensors and over tape variables, and global-norm
//! clipping.

use jkoflow_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    fn bias_corrections(&self, t: i32) -> (f64, f64) {
        (1.0 / (1.0 - self.beta1.powi(t)), 1.0 / (1.0 - self.beta2.powi(t)))
    }
}

/// Adam state for a list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("adam block count changed"));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let (c1, c2) = self.cfg.bias_corrections(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::invalid("gradient shape differs from parameter"));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi);
                let update = (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
                data[i] -= lr * update;
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Adam whose updates are recorded on the tape, so the final parameters
/// can be differentiated with respect to anything the gradients depend on.
pub struct VarAdam {
    cfg: AdamConfig,
    m: Vec<Var>,
    v: Vec<Var>,
    t: i32,
}

impl VarAdam {
    pub fn new(cfg: AdamConfig, params: &[Var]) -> Self {
        let zeros: Vec<Var> = params
            .iter()
            .map(|p| p.tape().constant(Tensor::zeros(p.shape())))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &[Var], grads: &[Var]) -> Result<Vec<Var>> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("adam block count changed"));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let (c1, c2) = self.cfg.bias_corrections(self.t);
        let mut out = Vec::with_capacity(params.len());
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            let m = self.m[k].scale(beta1)?.add(&g.scale(1.0 - beta1)?)?;
            let v = self.v[k].scale(beta2)?.add(&g.square()?.scale(1.0 - beta2)?)?;
            let update = m.scale(c1)?.div(&v.scale(c2)?.sqrt()?.add_scalar(eps)?)?;
            out.push(p.sub(&update.scale(lr)?)?);
            self.m[k] = m;
            self.v[k] = v;
        }
        Ok(out)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}
