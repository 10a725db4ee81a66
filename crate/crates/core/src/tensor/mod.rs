//! Dense NCHW tensors with metered payloads.
//!
//! Layout is row-major with `w` fastest: element `(n, c, h, w)` lives at
//! `((n * C + c) * H + h) * W + w`. Coupling layers partition along `c`, which
//! makes a channel split two contiguous copies per sample.

mod conv;
mod element;
pub mod io;
mod rng;

use std::fmt;
use std::sync::Arc;

pub use conv::{
    conv3x3, conv3x3_backward, conv3x3_param_grads, conv3x3_relu_input_grad_inplace, pixel_matmul, pixel_matmul_into,
};
pub use element::{DType, Element};
pub use rng::Rng;

use crate::bench::meter::{self, MemoryMeter};
use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape { n, c, h, w };
        s.checked_numel()?;
        Ok(s)
    }

    fn checked_numel(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("zero dimension in {self}")));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or_else(|| Error::shape(format!("element count of {self} overflows")))
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Shape {
        Shape { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Shape {
        Shape { n, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Elementwise unary kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Tanh,
    Relu,
    Neg,
    Recip,
    Scale(f64),
    Add(f64),
}

/// Elementwise binary kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// A dense 4-D array whose payload is charged to a [`MemoryMeter`].
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Vec<T>,
    meter: Arc<MemoryMeter>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "{shape} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::wrap(shape, data))
    }

    // Caller guarantees `data.len() == shape.numel()`.
    fn wrap(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        let meter = meter::current();
        meter.record_alloc(payload_bytes::<T>(data.len()));
        Tensor { shape, data, meter }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        Ok(Self::wrap(shape, vec![value; numel]))
    }

    /// i.i.d. standard-normal entries.
    pub fn randn(shape: impl Into<Shape>, rng: &mut Rng) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.checked_numel()?;
        let data = (0..numel).map(|_| T::from_f64(rng.normal())).collect();
        Ok(Self::wrap(shape, data))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn payload_bytes(&self) -> u64 {
        payload_bytes::<T>(self.data.len())
    }

    /// Same payload reinterpreted under a new shape with equal element count.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel()? != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {} to {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Slice of the `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &mut self.data[off..off + p]
    }

    /// Elements of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, op: Unary) -> Tensor<T> {
        let f = unary_fn::<T>(op);
        self.map_with(f)
    }

    pub fn map_with(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Self::wrap(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_inplace(&mut self, op: Unary) {
        let f = unary_fn::<T>(op);
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn zip(&self, other: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
        self.zip_with(other, binary_fn::<T>(op))
    }

    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.expect_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::wrap(self.shape, data))
    }

    pub fn zip_inplace(&mut self, other: &Tensor<T>, op: Binary) -> Result<()> {
        self.expect_same_shape(other)?;
        let f = binary_fn::<T>(op);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = f(*a, b));
        Ok(())
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.zip_inplace(other, Binary::Add)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Channels `[0, k)` and `[k, c)`.
    pub fn channel_split(&self, k: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.shape;
        if k == 0 || k >= s.c {
            return Err(Error::shape(format!("split point {k} outside [1, {})", s.c)));
        }
        let p = s.plane();
        let mut lo = Vec::with_capacity(s.n * k * p);
        let mut hi = Vec::with_capacity(s.n * (s.c - k) * p);
        for sample in self.data.chunks_exact(s.sample_len()) {
            lo.extend_from_slice(&sample[..k * p]);
            hi.extend_from_slice(&sample[k * p..]);
        }
        Ok((
            Self::wrap(s.with_c(k), lo),
            Self::wrap(s.with_c(s.c - k), hi),
        ))
    }

    /// Copy of channels `[start, end)`.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if start >= end || end > s.c {
            return Err(Error::shape(format!("channel range {start}..{end} outside {s}")));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * (end - start) * p);
        for sample in self.data.chunks_exact(s.sample_len()) {
            data.extend_from_slice(&sample[start * p..end * p]);
        }
        Ok(Self::wrap(s.with_c(end - start), data))
    }

    /// Inverse of [`Tensor::channel_split`].
    pub fn channel_concat(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape(format!("cannot concat {sa} with {sb}")));
        }
        let out_shape = sa.with_c(sa.c + sb.c);
        let mut data = Vec::with_capacity(out_shape.numel());
        for (ca, cb) in a
            .data
            .chunks_exact(sa.sample_len())
            .zip(b.data.chunks_exact(sb.sample_len()))
        {
            data.extend_from_slice(ca);
            data.extend_from_slice(cb);
        }
        Ok(Self::wrap(out_shape, data))
    }

    /// Per-sample sum of all elements, accumulated left to right.
    pub fn sum_per_sample(&self) -> Vec<T> {
        self.data
            .chunks_exact(self.shape.sample_len())
            .map(|s| s.iter().fold(T::zero(), |acc, &v| acc + v))
            .collect()
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-for-element conversion to another dtype.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::wrap(
            self.shape,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::wrap(self.shape, self.data.clone())
    }
}

impl<T: Element> Drop for Tensor<T> {
    fn drop(&mut self) {
        self.meter.record_release(payload_bytes::<T>(self.data.len()));
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("head", &preview)
            .finish()
    }
}

fn payload_bytes<T: Element>(len: usize) -> u64 {
    (len * std::mem::size_of::<T>()) as u64
}

fn unary_fn<T: Element>(op: Unary) -> Box<dyn Fn(T) -> T> {
    match op {
        Unary::Exp => Box::new(|v: T| v.exp()),
        Unary::Tanh => Box::new(|v: T| v.tanh()),
        Unary::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
        Unary::Neg => Box::new(|v: T| -v),
        Unary::Recip => Box::new(|v: T| v.recip()),
        Unary::Scale(a) => {
            let a = T::from_f64(a);
            Box::new(move |v: T| v * a)
        }
        Unary::Add(a) => {
            let a = T::from_f64(a);
            Box::new(move |v: T| v + a)
        }
    }
}

fn binary_fn<T: Element>(op: Binary) -> fn(T, T) -> T {
    match op {
        Binary::Add => |a, b| a + b,
        Binary::Sub => |a, b| a - b,
        Binary::Mul => |a, b| a * b,
        Binary::Div => |a, b| a / b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn metered<R>(f: impl FnOnce(&MemoryMeter) -> R) -> R {
        let m = Arc::new(MemoryMeter::new());
        let _g = MemoryMeter::enter(&m);
        f(&m)
    }

    fn t(shape: (usize, usize, usize, usize), v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn zeros_and_full() {
        let z = Tensor::<f32>::zeros((1, 1, 2, 2)).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::<f32>::full((1, 2, 1, 1), 3.5).unwrap();
        assert_eq!(f.data(), &[3.5, 3.5]);
    }

    #[test]
    fn zeros_charges_meter() {
        metered(|m| {
            let before = m.live();
            let z = Tensor::<f32>::zeros((2, 3, 4, 4)).unwrap();
            assert_eq!(z.len(), 96);
            assert_eq!(m.live() - before, 384);
            drop(z);
            assert_eq!(m.live(), before);
        });
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(Tensor::<f32>::zeros((0, 1, 1, 1)).is_err());
        assert!(Tensor::<f32>::zeros((usize::MAX, 2, 2, 2)).is_err());
        assert!(Tensor::<f32>::from_vec((1, 1, 1, 2), vec![1.0]).is_err());
    }

    #[test]
    fn randn_is_deterministic_and_standard() {
        let a = Tensor::<f32>::randn((1, 1, 1, 64), &mut Rng::new(7)).unwrap();
        let b = Tensor::<f32>::randn((1, 1, 1, 64), &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);

        let x = Tensor::<f64>::randn((1, 1, 100, 100), &mut Rng::new(0)).unwrap();
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(var > 0.9 && var < 1.1, "var {var}");

        let one = Tensor::<f32>::randn((1, 1, 1, 1), &mut Rng::new(1)).unwrap();
        assert!(one.data()[0].is_finite());
    }

    #[test]
    fn elementwise_kernels() {
        assert_eq!(t((1, 1, 1, 1), &[0.0]).map(Unary::Exp).data(), &[1.0]);
        assert_eq!(t((1, 1, 1, 2), &[-1.0, 2.0]).map(Unary::Relu).data(), &[0.0, 2.0]);
        let a = t((1, 1, 1, 2), &[1.0, 2.0]);
        let b = t((1, 1, 1, 2), &[3.0, 4.0]);
        assert_eq!(a.zip(&b, Binary::Mul).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(a.zip(&b, Binary::Sub).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(a.map(Unary::Scale(2.0)).data(), &[2.0, 4.0]);
        assert_eq!(a.map(Unary::Add(1.0)).data(), &[2.0, 3.0]);
        assert_eq!(a.map(Unary::Recip).data(), &[1.0, 0.5]);
        assert_eq!(a.map(Unary::Neg).data(), &[-1.0, -2.0]);
        assert!(a.zip(&t((1, 1, 2, 1), &[1.0, 1.0]), Binary::Add).is_err());
    }

    #[test]
    fn split_and_concat() {
        let x = t((1, 3, 1, 1), &[1.0, 2.0, 3.0]);
        let (a, b) = x.channel_split(1).unwrap();
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(b.data(), &[2.0, 3.0]);
        assert!(x.channel_split(0).is_err());
        assert!(x.channel_split(3).is_err());

        let a = Tensor::<f32>::zeros((1, 1, 2, 2)).unwrap();
        let b = Tensor::<f32>::zeros((1, 3, 2, 2)).unwrap();
        assert_eq!(Tensor::channel_concat(&a, &b).unwrap().shape(), Shape::from((1, 4, 2, 2)));
        let c = Tensor::<f32>::zeros((1, 3, 2, 1)).unwrap();
        assert!(Tensor::channel_concat(&a, &c).is_err());
    }

    proptest! {
        #[test]
        fn split_concat_round_trip(n in 1usize..3, c in 2usize..6, hw in 1usize..4, seed in any::<u64>()) {
            let x = Tensor::<f32>::randn((n, c, hw, hw), &mut Rng::new(seed)).unwrap();
            for k in 1..c {
                let (a, b) = x.channel_split(k).unwrap();
                prop_assert_eq!(&Tensor::channel_concat(&a, &b).unwrap(), &x);
            }
        }

        #[test]
        fn dropped_results_leave_meter_balanced(seed in any::<u64>()) {
            metered(|m| {
                let base = m.live();
                {
                    let x = Tensor::<f32>::randn((2, 4, 3, 3), &mut Rng::new(seed)).unwrap();
                    let y = x.map(Unary::Tanh);
                    let (a, b) = y.channel_split(2).unwrap();
                    let _z = Tensor::channel_concat(&b, &a).unwrap().zip(&x, Binary::Add).unwrap();
                    let _c = x.clone().reshape((1, 8, 3, 3)).unwrap();
                }
                assert_eq!(m.live(), base);
            });
        }
    }

    #[test]
    fn cross_thread_release_credits_origin_meter() {
        let m = Arc::new(MemoryMeter::new());
        let x = {
            let _g = MemoryMeter::enter(&m);
            Tensor::<f64>::zeros((1, 1, 4, 4)).unwrap()
        };
        assert_eq!(m.live(), 128);
        std::thread::spawn(move || drop(x)).join().unwrap();
        assert_eq!(m.live(), 0);
    }
}
