//! Dense row-major `f64` arrays.
//!
//! Volumetric tensors are laid out channels-first: `(C, D, H, W)` with `W`
//! varying fastest. Kernels use `(out, in, kd, kh, kw)`.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the extent product and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Internal constructor for buffers that are finite and sized by construction.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Returns the `(C, D, H, W)` extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::Shape(format!(
                "expected (C, D, H, W), got {:?}",
                self.shape
            ))),
        }
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "extents must be nonempty and positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Draws i.i.d. `N(mu, sigma^2)` entries.
pub fn gaussian_init(shape: &[usize], mu: f64, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Param(format!(
            "gaussian init needs finite mu and sigma >= 0, got mu={mu}, sigma={sigma}"
        )));
    }
    check_shape(shape)?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(mu, sigma)).collect();
    Ok(Tensor::from_raw(shape.to_vec(), data))
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "inner product")?;
    Ok(dot(&a.data, &b.data))
}

/// `alpha * x + y`, elementwise.
pub fn axpy(alpha: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.same_shape(y, "axpy")?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(xv, yv)| alpha * xv + yv)
        .collect();
    let out = Tensor::from_raw(x.shape.clone(), data);
    out.ensure_finite("axpy result")?;
    Ok(out)
}

/// Sequential left-to-right dot product; the fixed order keeps results
/// reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
