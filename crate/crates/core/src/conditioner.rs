//! The non-invertible network inside a coupling layer:
//! `conv3x3 -> ReLU -> conv3x3`, with a hand-written backward pass that
//! recomputes the hidden activation from the input instead of keeping it.

use crate::error::{Error, Result};
use crate::param::{Named, NamedMut, Param};
use crate::tensor::{
    conv3x3, conv3x3_backward, conv3x3_param_grads, conv3x3_relu_input_grad_inplace, Element, Rng, Tensor, Unary,
};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub struct CondNet<T: Element> {
    pub conv1_weight: Param<T>,
    pub conv1_bias: Param<T>,
    pub conv2_weight: Param<T>,
    pub conv2_bias: Param<T>,
    c_in: usize,
    hidden: usize,
    c_out: usize,
}

/// Hidden activations of one forward evaluation.
#[derive(Debug)]
pub struct CondActivations<T: Element> {
    /// ReLU output; its sign pattern equals that of the pre-activation.
    pub hidden: Tensor<T>,
}

impl<T: Element> CondNet<T> {
    /// He-initialized first conv, zero second conv: the network outputs zeros
    /// until trained.
    pub fn new(c_in: usize, hidden: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        if c_in == 0 || hidden == 0 || c_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "conditioner widths must be positive, got {c_in}/{hidden}/{c_out}"
            )));
        }
        let std = (2.0 / (9.0 * c_in as f64)).sqrt();
        let mut w1 = Tensor::randn((hidden, c_in, 3, 3), rng)?;
        w1.map_inplace(Unary::Scale(std));
        Ok(CondNet {
            conv1_weight: Param::new(w1)?,
            conv1_bias: Param::zeros((1, hidden, 1, 1))?,
            conv2_weight: Param::zeros((c_out, hidden, 3, 3))?,
            conv2_bias: Param::zeros((1, c_out, 1, 1))?,
            c_in,
            hidden,
            c_out,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, x1: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, _) = self.forward_with_activations(x1)?;
        Ok(out)
    }

    /// Forward pass that also hands back the hidden activation, for callers
    /// that cache it (the store-all engine).
    pub fn forward_with_activations(&self, x1: &Tensor<T>) -> Result<(Tensor<T>, CondActivations<T>)> {
        self.check_input(x1)?;
        let mut hidden = conv3x3(x1, &self.conv1_weight.value, &self.conv1_bias.value)?;
        hidden.map_inplace(Unary::Relu);
        let out = conv3x3(&hidden, &self.conv2_weight.value, &self.conv2_bias.value)?;
        Ok((out, CondActivations { hidden }))
    }

    fn hidden_activation(&self, x1: &Tensor<T>) -> Result<CondActivations<T>> {
        let mut hidden = conv3x3(x1, &self.conv1_weight.value, &self.conv1_bias.value)?;
        hidden.map_inplace(Unary::Relu);
        Ok(CondActivations { hidden })
    }

    /// Returns `dL/dx1` and adds parameter gradients into the gradient
    /// buffers. `x1` must be the input of the matching forward call; the
    /// hidden activation is recomputed from it.
    pub fn backward(&mut self, x1: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x1)?;
        let acts = self.hidden_activation(x1)?;
        self.backward_cached(x1, acts, dy)
    }

    /// [`CondNet::backward`] with the hidden activation supplied by the caller.
    pub fn backward_cached(&mut self, x1: &Tensor<T>, acts: CondActivations<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x1)?;
        let want = x1.shape().with_c(self.c_out);
        if dy.shape() != want {
            return Err(Error::shape(format!(
                "conditioner upstream gradient must be {want}, got {}",
                dy.shape()
            )));
        }
        let mut hidden = acts.hidden;
        let (dw2, db2) = conv3x3_param_grads(&hidden, &self.conv2_weight.value, dy)?;
        self.conv2_weight.grad.add_assign(&dw2)?;
        self.conv2_bias.grad.add_assign(&db2)?;
        drop((dw2, db2));
        // the activation buffer becomes the gated hidden gradient
        conv3x3_relu_input_grad_inplace(&self.conv2_weight.value, dy, &mut hidden)?;
        let dh = hidden;

        let (dx1, dw1, db1) = conv3x3_backward(x1, &self.conv1_weight.value, &dh)?;
        self.conv1_weight.grad.add_assign(&dw1)?;
        self.conv1_bias.grad.add_assign(&db1)?;
        Ok(dx1)
    }

    fn check_input(&self, x1: &Tensor<T>) -> Result<()> {
        if x1.shape().c != self.c_in {
            return Err(Error::shape(format!(
                "conditioner expects {} channels, got {}",
                self.c_in,
                x1.shape().c
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<Named<'_, T>> {
        vec![
            ("conv1.weight", &self.conv1_weight),
            ("conv1.bias", &self.conv1_bias),
            ("conv2.weight", &self.conv2_weight),
            ("conv2.bias", &self.conv2_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        vec![
            ("conv1.weight", &mut self.conv1_weight),
            ("conv1.bias", &mut self.conv1_bias),
            ("conv2.weight", &mut self.conv2_weight),
            ("conv2.bias", &mut self.conv2_bias),
        ]
    }
}
