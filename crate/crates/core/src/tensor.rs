//! Dense 64-bit real tensors.
//!
//! Values are stored row-major. A tensor is plain data unless an op on a
//! [`crate::tape::Tape`] produced it, in which case `node` points at the
//! recorded operation so gradients can flow back through it.

use crate::error::{Error, Result};

/// Handle of a recorded tape node: (tape id, node index).
pub(crate) type NodeRef = (u64, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Build a tensor from external data. Rejects NaN/Inf and any
    /// shape/length disagreement.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {}",
                values[pos], pos
            )));
        }
        Ok(Tensor { shape, values, requires_grad: false, node: None })
    }

    /// Internal constructor for op results; skips the finiteness check so
    /// divergence shows up in loss monitoring instead of a panic deep in
    /// the math.
    pub(crate) fn computed(shape: Vec<usize>, values: Vec<f64>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values, requires_grad: node.is_some(), node }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false, node: None }
    }

    /// Mark this tensor as a trainable leaf. Takes effect when it is bound
    /// to a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::NotScalar { op: "item", shape: self.shape.clone() });
        }
        Ok(self.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Whether an op on some tape produced this tensor.
    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Number of rows when interpreted as a matrix ([r, c] or [n] as 1×n).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_agreement_enforced() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::InvalidTensor(_))
        ));
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        let err = Tensor::from_vec(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(err.to_string().contains("index 1"));
        assert!(Tensor::from_vec(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn scalar_and_item() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 2.5);
        let m = Tensor::zeros(&[2, 2]);
        assert!(m.item().is_err());
    }

    #[test]
    fn row_access() {
        let t = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }
}
