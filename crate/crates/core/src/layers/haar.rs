//! Orthonormal 2x2 Haar squeeze.
//!
//! Each input channel's 2x2 block `(x00, x01, x10, x11)` becomes four
//! coefficients
//!
//! ```text
//! a = (x00 + x01 + x10 + x11) / 2
//! h = (x00 - x01 + x10 - x11) / 2
//! v = (x00 + x01 - x10 - x11) / 2
//! d = (x00 - x01 - x10 + x11) / 2
//! ```
//!
//! Output channels are grouped by subband, `[a_0..a_C | h_0..h_C | v_0..v_C | d_0..d_C]`,
//! so a later channel split keeps coarse content and factors out detail.

use super::{check_dlogdet, check_same, InvertibleLayer};
use crate::error::{Error, Result};
use crate::param::{Named, NamedMut};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, Default)]
pub struct HaarSqueeze;

#[derive(Debug)]
pub struct HaarSaved<T: Element> {
    pub x: Tensor<T>,
}

fn squeezed(s: Shape) -> Result<Shape> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape(format!("haar squeeze needs even spatial dims, got {s}")));
    }
    Ok(Shape { n: s.n, c: 4 * s.c, h: s.h / 2, w: s.w / 2 })
}

pub fn haar_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let out = squeezed(s)?;
    let half = T::from_f64(0.5);
    let mut y = Tensor::zeros(out)?;
    let (oh, ow) = (out.h, out.w);
    let plane = out.plane();
    let band_stride = s.c * plane;
    for n in 0..s.n {
        for c in 0..s.c {
            let xp = x.plane(n, c);
            let base = (n * out.c + c) * plane;
            let yd = y.data_mut();
            for i in 0..oh {
                let r0 = &xp[2 * i * s.w..][..s.w];
                let r1 = &xp[(2 * i + 1) * s.w..][..s.w];
                for j in 0..ow {
                    let (x00, x01, x10, x11) = (r0[2 * j], r0[2 * j + 1], r1[2 * j], r1[2 * j + 1]);
                    let coef = [
                        (x00 + x01 + x10 + x11) * half,
                        (x00 - x01 + x10 - x11) * half,
                        (x00 + x01 - x10 - x11) * half,
                        (x00 - x01 - x10 + x11) * half,
                    ];
                    for (band, v) in coef.into_iter().enumerate() {
                        yd[base + band * band_stride + i * ow + j] = v;
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn haar_inverse<T: Element>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let s = y.shape();
    if s.c % 4 != 0 {
        return Err(Error::shape(format!("haar inverse needs channels divisible by 4, got {s}")));
    }
    let c_in = s.c / 4;
    let out = Shape { n: s.n, c: c_in, h: 2 * s.h, w: 2 * s.w };
    let half = T::from_f64(0.5);
    let mut x = Tensor::zeros(out)?;
    for n in 0..s.n {
        for c in 0..c_in {
            let a = y.plane(n, c);
            let h = y.plane(n, c_in + c);
            let v = y.plane(n, 2 * c_in + c);
            let d = y.plane(n, 3 * c_in + c);
            let xp = x.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let k = i * s.w + j;
                    let (a, h, v, d) = (a[k], h[k], v[k], d[k]);
                    xp[2 * i * out.w + 2 * j] = (a + h + v + d) * half;
                    xp[2 * i * out.w + 2 * j + 1] = (a - h + v - d) * half;
                    xp[(2 * i + 1) * out.w + 2 * j] = (a + h - v - d) * half;
                    xp[(2 * i + 1) * out.w + 2 * j + 1] = (a - h - v + d) * half;
                }
            }
        }
    }
    Ok(x)
}

impl<T: Element> InvertibleLayer<T> for HaarSqueeze {
    type Saved = HaarSaved<T>;

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        squeezed(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        Ok((haar_forward(x)?, vec![T::zero(); x.shape().n]))
    }

    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        haar_inverse(y)
    }

    fn forward_saving(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Self::Saved)> {
        let (y, logdet) = self.forward(&x)?;
        Ok((y, logdet, HaarSaved { x }))
    }

    fn recompute(&self, y: &Tensor<T>) -> Result<Self::Saved> {
        Ok(HaarSaved { x: haar_inverse(y)? })
    }

    fn backward_saved(&mut self, saved: Self::Saved, dy: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        check_same(dy.shape(), squeezed(saved.x.shape())?, "haar upstream gradient")?;
        check_dlogdet(dlogdet, dy.shape().n)?;
        // orthogonal: the adjoint is the inverse
        Ok((haar_inverse(dy)?, saved.x))
    }

    fn params(&self) -> Vec<Named<'_, T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        Vec::new()
    }
}
