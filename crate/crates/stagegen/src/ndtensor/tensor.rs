use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Scalar element of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checking, metrics linear algebra).
pub trait Real:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + fmt::Debug + fmt::Display + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Propagates an upstream gradient to the parents of a node. The closure
/// captures whatever forward values it needs.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// N-dimensional value-with-gradient container; the unit of all
/// differentiable compute. Image tensors are laid out `N×C×H×W`, row-major.
///
/// Cloning is cheap (shared handle). Nodes created by ops record their
/// parents; [`Tensor::backward`] walks that graph in reverse creation order.
pub struct Tensor<T: Real = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Real> Tensor<T> {
    fn new(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Tensor::new(shape.into(), data, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Tensor::new(shape.into(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Result of an op. Tracks parents only when some parent tracks
    /// gradients, so inference graphs on frozen inputs stay flat.
    ///
    /// In debug/test builds, asserts the forward produced only finite values.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        #[cfg(debug_assertions)]
        if data.iter().any(|v| !v.is_finite()) {
            // Non-finite outputs are only legitimate when an input was
            // already non-finite (e.g. training divergence, which the loss
            // check aborts on); from finite inputs they are an op bug.
            let upstream_bad = parents
                .iter()
                .any(|p| p.data().iter().any(|v| !v.is_finite()));
            assert!(upstream_bad, "op produced a non-finite value from finite inputs");
        }
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor::new(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Used by the optimizer to update
    /// parameters in place between passes; must not be called while a graph
    /// built on this tensor is still to be replayed.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor with {} elements", data.len());
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// New leaf with the same data and no gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), self.len());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep seeded with ones (the usual call on a scalar loss).
    pub fn backward(&self) {
        self.backward_with(vec![T::one(); self.len()]);
    }

    /// Reverse-mode sweep with an explicit seed gradient.
    ///
    /// Node ids increase monotonically at creation and parents are always
    /// older than children, so visiting reachable nodes in descending id
    /// order is a valid reverse topological order.
    pub fn backward_with(&self, seed: Vec<T>) {
        assert_eq!(seed.len(), self.len(), "seed gradient shape mismatch");
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        while let Some(t) = stack.pop() {
            if seen.insert(t.id()) {
                for p in &t.inner.parents {
                    if p.requires_grad() {
                        stack.push(p.clone());
                    }
                }
                nodes.push(t);
            }
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));
        self.accumulate_grad(&seed);
        for node in &nodes {
            if let Some(bk) = &node.inner.backward {
                let upstream = node.inner.grad.borrow().clone();
                if let Some(g) = upstream {
                    bk(&g);
                }
            }
        }
    }

    /// Shared-buffer identity, used to verify parameters are not aliased.
    pub fn same_buffer(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_and_access() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert!(!t.requires_grad());
        assert_eq!(t.data()[4], 5.0);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::from_vec(vec![2, 2], vec![1.0f32]);
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let p = Tensor::<f64>::param(vec![3], vec![0.0; 3]);
        p.accumulate_grad(&[1.0, 2.0, 3.0]);
        p.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(p.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn detach_copies_data_and_drops_tracking() {
        let p = Tensor::<f32>::param(vec![2], vec![1.0, 2.0]);
        let d = p.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), vec![1.0, 2.0]);
        assert!(!d.same_buffer(&p));
    }

    #[test]
    fn backward_through_shared_parent_sums_both_paths() {
        // y = x + x  =>  dy/dx = 2
        let x = Tensor::<f64>::param(vec![1], vec![3.0]);
        let y = crate::ndtensor::add(&x, &x).unwrap();
        y.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }
}
