//! Dense f64 arrays and a small reverse-mode tape over them.
//!
//! `Tensor` is a plain value: a shape and a contiguous row-major buffer.
//! Differentiable computation goes through [`Graph`], which records every
//! operation and replays it backwards on [`Graph::backward`].

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// `self + c * other`, the axpy update used by the integrators.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "axpy", |a, b| a + c * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Slice `i` along the leading axis.
    pub fn index(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Split along the leading axis, the inverse of [`Tensor::stack`].
    pub fn unstack(&self) -> Vec<Tensor> {
        (0..self.shape[0]).map(|i| self.index(i)).collect()
    }

    /// Average pooling over the two trailing (spatial) axes.
    pub fn avg_pool(&self, factor: usize) -> Result<Tensor> {
        let (lead, h, w) = self.split_spatial("avg_pool")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::config(format!(
                "pool factor {factor} does not divide grid {h}x{w}"
            )));
        }
        let mut out = vec![0.0; lead * (h / factor) * (w / factor)];
        kernels::avg_pool(&self.data, lead, h, w, factor, &mut out);
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = h / factor;
        shape[n - 1] = w / factor;
        Ok(Tensor { shape, data: out })
    }

    /// Nearest-neighbour upsampling over the two trailing axes.
    pub fn upsample(&self, factor: usize) -> Result<Tensor> {
        let (lead, h, w) = self.split_spatial("upsample")?;
        if factor == 0 {
            return Err(Error::config("upsample factor must be positive"));
        }
        let mut out = vec![0.0; lead * h * w * factor * factor];
        kernels::upsample(&self.data, lead, h, w, factor, &mut out);
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = h * factor;
        shape[n - 1] = w * factor;
        Ok(Tensor { shape, data: out })
    }

    pub(crate) fn split_spatial(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.shape.len() < 2 {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let n = self.shape.len();
        let (h, w) = (self.shape[n - 2], self.shape[n - 1]);
        Ok((self.data.len() / (h * w).max(1), h, w))
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn add_elementwise() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn avg_pool_of_ones() {
        let t = Tensor::full(&[4, 4], 1.0);
        let p = t.avg_pool(2).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stack_roundtrip() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }
}
