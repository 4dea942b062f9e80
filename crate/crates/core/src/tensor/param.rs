use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use super::{sc, Scalar, Tensor};
use crate::rng::{self, Rng};

pub(crate) struct ParamInner<T> {
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

/// A trainable parameter shared between a model and the tapes that use it.
///
/// Gradients accumulate into the parameter itself when a tape that binds it
/// runs backward, so an optimizer can read `grad()` without touching tapes.
pub struct Param<T = f32> {
    name: String,
    pub(crate) inner: Rc<RefCell<ParamInner<T>>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = vec![T::zero(); value.numel()];
        Param { name: name.into(), inner: Rc::new(RefCell::new(ParamInner { value, grad })) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |p| &p.value)
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor<T>> {
        RefMut::map(self.inner.borrow_mut(), |p| &mut p.value)
    }

    pub fn grad(&self) -> Ref<'_, Vec<T>> {
        Ref::map(self.inner.borrow(), |p| &p.grad)
    }

    pub fn grad_mut(&self) -> RefMut<'_, Vec<T>> {
        RefMut::map(self.inner.borrow_mut(), |p| &mut p.grad)
    }

    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grad.iter_mut() {
            *g = T::zero();
        }
    }

    /// Truncated-normal init (resample outside 2 std).
    pub fn normal(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let z = rng::normal_vec(rng, 1, std)[0] as f64;
            if z.abs() <= 2.0 * std {
                data.push(sc::<T>(z));
            }
        }
        Param::new(name, Tensor::new(shape, data).expect("normal init shape"))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Param::new(name, Tensor::full(shape, T::one()))
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.numel()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }
}

impl<T> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param { name: self.name.clone(), inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, shape {:?})", self.name, self.shape())
    }
}
