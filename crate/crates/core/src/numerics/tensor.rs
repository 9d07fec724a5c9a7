use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::numerics::Real;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(skip)]
    grad: Option<Vec<T>>,
    #[serde(default)]
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        ensure_arg!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        ensure_arg!(
            shape.iter().product::<usize>() == data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None, requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        ensure_arg!(grad.len() == self.data.len(), "gradient length {} != {}", grad.len(), self.data.len());
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `grad` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, grad: &[T]) -> Result<()> {
        ensure_arg!(grad.len() == self.data.len(), "gradient length {} != {}", grad.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        ensure_arg!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element type conversion through f64.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Slice `index` along the leading axis.
    pub fn outer(&self, index: usize) -> Result<Tensor<T>> {
        ensure_arg!(self.rank() >= 1 && index < self.shape[0], "outer index {index} out of range");
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::new(&shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        ensure_arg!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        ensure_arg!(items.iter().all(|t| t.shape == inner), "stack requires equal shapes");
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&shape, data)
    }
}

/// Deterministic FNV-1a digest of a set of tensors' shapes and bit patterns.
pub fn digest<'a, T: Real>(tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for t in tensors {
        for &d in &t.shape {
            feed(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            feed(&v.to_f64_lossy().to_bits().to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[0, 3], vec![]).is_err());
        assert_eq!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn non_finite_detected() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(t.check_finite("x").is_err());
    }

    #[test]
    fn digest_sensitive_to_single_bit() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[1] = f32::from_bits(2.0f32.to_bits() + 1);
        assert_ne!(digest([&a]), digest([&b]));
        assert_eq!(digest([&a]), digest([&a.clone()]));
    }
}
