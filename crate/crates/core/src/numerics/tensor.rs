use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// A tensor with an empty shape is a scalar holding one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    /// Marks the tensor as a gradient-carrying leaf, allocating a zeroed grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the grad buffer. No-op for tensors without one.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} vs {}", g.len(), delta.len()),
            ));
        }
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let mut out = Self::new(shape, self.data.clone())?;
        out.grad = self.grad.clone();
        Ok(out)
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grad_buffer_follows_shape() {
        let mut t = Tensor::zeros(&[2, 2]).with_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0, 8.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
