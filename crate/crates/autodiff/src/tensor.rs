//! Dense row-major `f64` arrays.
//!
//! Tensors are immutable values once built. Arithmetic on them lives on
//! [`crate::Var`]; the helpers here are the raw kernels the tape calls.

use crate::error::{AdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the data length and that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        let t = Self { shape, data };
        if !t.is_finite() {
            return Err(AdError::NonFinite { op: "Tensor::new" });
        }
        Ok(t)
    }

    /// A `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A single row vector of shape `[1, n]`.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    /// A rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a rank-2 tensor (1 for a scalar).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a rank-2 tensor (1 for a scalar).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(AdError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub(crate) fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(AdError::Rank {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// `op(a) · op(b)` where `op` optionally transposes its argument.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.rank2("matmul")?;
    let (br, bc) = b.rank2("matmul")?;
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(AdError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides above describe exactly the row-major buffers of
        // `a`, `b` and `out`, whose lengths are ar*ac, br*bc and m*n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa as isize,
                csa as isize,
                b.data.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// Expands `t` to `target` along singleton axes; a scalar expands to anything.
pub(crate) fn broadcast(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    if t.is_scalar() {
        return Ok(Tensor::full(target, t.data[0]));
    }
    let (r0, c0) = t.rank2("broadcast")?;
    let mismatch = || AdError::ShapeMismatch {
        op: "broadcast",
        lhs: t.shape.clone(),
        rhs: target.to_vec(),
    };
    if target.len() != 2 {
        return Err(mismatch());
    }
    let (r, c) = (target[0], target[1]);
    if !(r0 == r || r0 == 1) || !(c0 == c || c0 == 1) {
        return Err(mismatch());
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let si = if r0 == 1 { 0 } else { i };
        for j in 0..c {
            let sj = if c0 == 1 { 0 } else { j };
            out.push(t.data[si * c0 + sj]);
        }
    }
    Ok(Tensor::from_raw(vec![r, c], out))
}

pub(crate) fn sum_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rank2("sum_rows")?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(&t.data[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Ok(Tensor::from_raw(vec![1, c], out))
}

pub(crate) fn sum_cols(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rank2("sum_cols")?;
    let out = (0..r).map(|i| t.data[i * c..(i + 1) * c].iter().sum()).collect();
    Ok(Tensor::from_raw(vec![r, 1], out))
}

pub(crate) fn row_sq_norm(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rank2("row_sq_norm")?;
    let out = (0..r)
        .map(|i| t.data[i * c..(i + 1) * c].iter().map(|v| v * v).sum())
        .collect();
    Ok(Tensor::from_raw(vec![r, 1], out))
}

pub(crate) fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.rank2("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data[i * c + j];
        }
    }
    Ok(Tensor::from_raw(vec![c, r], out))
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn leaky_relu(x: f64, beta: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        beta * x
    }
}

/// Derivative of leaky-relu; the kink takes the right derivative.
pub(crate) fn leaky_slope(x: f64, beta: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length_and_finiteness() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(AdError::DataLength { expected: 4, got: 3, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(AdError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![1., 0., -1., 2., 0.5, 1.]).unwrap();
        let ab = matmul(&a, &b, false, false).unwrap();
        assert_eq!(ab.shape(), &[2, 2]);
        assert_eq!(ab.data(), &[0.5, 7.0, 2.0, 16.0]);
        let at = transpose(&a).unwrap();
        let bt = transpose(&b).unwrap();
        assert_eq!(matmul(&at, &b, true, false).unwrap(), ab);
        assert_eq!(matmul(&a, &bt, false, true).unwrap(), ab);
        assert_eq!(matmul(&at, &bt, true, true).unwrap(), ab);
    }

    #[test]
    fn broadcast_rules() {
        let row = Tensor::row(vec![1., 2.]).unwrap();
        let b = broadcast(&row, &[3, 2]).unwrap();
        assert_eq!(b.data(), &[1., 2., 1., 2., 1., 2.]);
        let col = Tensor::matrix(2, 1, vec![1., 2.]).unwrap();
        assert_eq!(broadcast(&col, &[2, 3]).unwrap().data(), &[1., 1., 1., 2., 2., 2.]);
        assert!(broadcast(&row, &[3, 3]).is_err());
        assert_eq!(broadcast(&Tensor::scalar(4.0), &[2, 2]).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn stable_softplus_and_sigmoid() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0).is_finite());
    }
}
