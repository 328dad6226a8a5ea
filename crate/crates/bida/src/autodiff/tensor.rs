use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

/// Panic payload raised when a primitive produces NaN or Inf. The CLI maps
/// it to its numeric-failure exit code; tests downcast it.
#[derive(Debug, Clone)]
pub struct NumericFailure {
    pub op: &'static str,
    pub detail: String,
}

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite value out of `{}`: {}", self.op, self.detail)
    }
}

pub(crate) struct TensorInner {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// (graph generation, node id) when this tensor was produced by a
    /// recorded op. Stale generations are ignored by backward.
    pub(crate) node: Cell<Option<(u64, usize)>>,
}

/// Shape-tagged dense 64-bit tensor, row-major. Cheap to clone (shared
/// storage). Leaves created with [`Tensor::param`] accumulate gradients.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl Tensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            values.len(),
            "tensor shape {:?} implies {} values, got {}",
            shape,
            numel,
            values.len()
        );
        assert!(shape.iter().all(|&e| e > 0), "tensor extents must be positive: {:?}", shape);
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    /// Non-trainable tensor (inputs, labels, detached activations).
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, false)
    }

    /// Trainable leaf: backward accumulates d(loss)/d(leaf) into its grad slot.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::build(shape.to_vec(), values, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n])
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[], vec![v])
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::build(shape, values, requires_grad)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.values.borrow()[0]
    }

    /// Overwrite storage in place (optimizer / EMA / oracle perturbations).
    /// Length must match; the graph never aliases leaf storage.
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    pub fn nudge_value(&self, index: usize, delta: f64) {
        self.inner.values.borrow_mut()[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// New tensor with copied storage, no grad tracking (teacher weights,
    /// frozen soft labels).
    pub fn detached(&self) -> Tensor {
        Tensor::constant(self.shape(), self.to_vec())
    }

    /// Trainable copy with fresh storage (checkpoint load, model cloning).
    pub fn cloned_param(&self) -> Tensor {
        Tensor::param(self.shape(), self.to_vec())
    }

    /// Two tensors sharing one storage cell.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.inner.values.borrow();
        let head: Vec<f64> = v.iter().take(6).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, grad={}, head={:?}{})",
            self.inner.shape,
            self.inner.requires_grad,
            head,
            if v.len() > 6 { ", ..." } else { "" }
        )
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_numel() {
        let t = Tensor::constant(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    #[should_panic(expected = "implies 6 values")]
    fn shape_value_mismatch_panics() {
        let _ = Tensor::constant(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulates_with_add() {
        let t = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.0, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.0, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.25).item(), 4.25);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }
}
