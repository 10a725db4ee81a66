use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Multiscale split: channels `[k, c)` leave the flow as a latent part,
/// channels `[0, k)` continue. Volume-preserving; inversion needs the part
/// back.
#[derive(Debug, Clone, Copy)]
pub struct FactorOut {
    channels: usize,
}

impl FactorOut {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::shape(format!("factor-out needs an even channel count >= 2, got {channels}")));
        }
        Ok(FactorOut { channels })
    }

    pub fn split_point(&self) -> usize {
        self.channels / 2
    }

    pub fn kept_shape(&self, input: Shape) -> Shape {
        input.with_c(self.split_point())
    }

    pub fn factored_shape(&self, input: Shape) -> Shape {
        input.with_c(self.channels - self.split_point())
    }

    /// Returns `(kept, factored)`.
    pub fn split<T: Element>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.shape().c != self.channels {
            return Err(Error::shape(format!(
                "factor-out expects {} channels, got {}",
                self.channels,
                x.shape().c
            )));
        }
        x.channel_split(self.split_point())
    }

    pub fn merge<T: Element>(&self, kept: &Tensor<T>, factored: &Tensor<T>) -> Result<Tensor<T>> {
        if kept.shape().c + factored.shape().c != self.channels {
            return Err(Error::shape(format!(
                "factor-out merge expects {} channels in total, got {} + {}",
                self.channels,
                kept.shape().c,
                factored.shape().c
            )));
        }
        Tensor::channel_concat(kept, factored)
    }
}
