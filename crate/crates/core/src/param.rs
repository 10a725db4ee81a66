use crate::error::Result;
use crate::tensor::{Element, Shape, Tensor};

/// A trainable buffer and its gradient accumulator of identical shape.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Result<Self> {
        let grad = Tensor::zeros(value.shape())?;
        Ok(Param { value, grad })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Param::new(Tensor::zeros(shape)?)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Payload bytes of value and gradient together.
    pub fn bytes(&self) -> u64 {
        self.value.payload_bytes() + self.grad.payload_bytes()
    }
}

/// A parameter paired with its name inside the owning layer.
pub type Named<'a, T> = (&'static str, &'a Param<T>);
pub type NamedMut<'a, T> = (&'static str, &'a mut Param<T>);
