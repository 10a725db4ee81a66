//! Invertible layers.
//!
//! Every layer maps `x -> (y, logdet)` with `logdet` holding one entry per
//! sample, inverts `y -> x`, and backpropagates from its OUTPUT: the
//! recompute-mode [`InvertibleLayer::backward`] receives `(dy, y, dlogdet)`,
//! rebuilds `x` by inversion and returns it alongside `dx` so the caller can
//! continue the walk without inverting twice.
//!
//! The scalar being differentiated is
//! `L = <dy, y> + sum_n dlogdet[n] * logdet[n]`; for the negative
//! log-likelihood `dlogdet[n] = -1`.

mod actnorm;
mod coupling;
mod factor;
mod haar;
mod inv1x1;
mod lu;

pub use actnorm::{ActNorm, ActNormSaved};
pub use coupling::{Coupling, CouplingKind, CouplingSaved, SCALE_CLAMP};
pub use factor::FactorOut;
pub use haar::{haar_forward, haar_inverse, HaarSqueeze, HaarSaved};
pub use inv1x1::{Inv1x1Conv, Inv1x1Saved};
pub use lu::{log_abs_det, LuFactors};

use crate::error::{Error, Result};
use crate::param::{Named, NamedMut};
use crate::tensor::{Element, Shape, Tensor};

/// Common contract of the bijective layers.
pub trait InvertibleLayer<T: Element> {
    /// What the store-all engine keeps per layer between forward and backward.
    type Saved;

    fn output_shape(&self, input: Shape) -> Result<Shape>;

    fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)>;

    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>>;

    /// Forward pass that keeps `x` (and any intermediates) for backward.
    fn forward_saving(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Self::Saved)>;

    /// Rebuilds the backward state from the output alone.
    fn recompute(&self, y: &Tensor<T>) -> Result<Self::Saved>;

    /// Returns `(dx, x)`; parameter gradients are accumulated.
    fn backward_saved(&mut self, saved: Self::Saved, dy: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)>;

    /// Recompute-mode backward: `x` is rebuilt from `y` by inversion.
    fn backward(&mut self, dy: &Tensor<T>, y: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        check_same(dy.shape(), y.shape(), "upstream gradient")?;
        let saved = self.recompute(y)?;
        self.backward_saved(saved, dy, dlogdet)
    }

    fn params(&self) -> Vec<Named<'_, T>>;

    fn params_mut(&mut self) -> Vec<NamedMut<'_, T>>;
}

pub(crate) fn check_same(got: Shape, want: Shape, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what} must be {want}, got {got}")));
    }
    Ok(())
}

pub(crate) fn check_dlogdet<T: Element>(dlogdet: &[T], n: usize) -> Result<()> {
    if dlogdet.len() != n {
        return Err(Error::shape(format!(
            "dlogdet needs {n} entries, got {}",
            dlogdet.len()
        )));
    }
    Ok(())
}

/// Left-to-right sum, the reduction order used for every logdet weight.
pub(crate) fn ordered_sum<T: Element>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b)
}

/// Gradient-sign fault injection for exercising the verification suite.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP: Cell<bool> = const { Cell::new(false) };
    }

    /// While set, ActNorm negates the bias gradient it accumulates on this
    /// thread.
    pub fn set_flip_grad_sign(on: bool) {
        FLIP.with(|f| f.set(on));
    }

    pub(crate) fn flip_grad_sign() -> bool {
        FLIP.with(|f| f.get())
    }
}
