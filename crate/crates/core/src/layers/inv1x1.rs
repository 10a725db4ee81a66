use std::sync::OnceLock;

use super::lu::LuFactors;
use super::{check_dlogdet, check_same, ordered_sum, InvertibleLayer};
use crate::error::{Error, Result};
use crate::param::{Named, NamedMut, Param};
use crate::tensor::{pixel_matmul, pixel_matmul_into, Element, Rng, Shape, Tensor};

/// Invertible 1x1 convolution: every pixel's channel vector is multiplied by
/// a dense square matrix `W`.
///
/// `W` is stored directly; its LU factors are computed on first use and
/// dropped whenever the parameters are handed out mutably.
#[derive(Debug)]
pub struct Inv1x1Conv<T: Element> {
    pub weight: Param<T>,
    factors: OnceLock<Factorized>,
}

#[derive(Debug, Clone)]
struct Factorized {
    lu: LuFactors,
    // row-major W^{-1}
    inverse: Vec<f64>,
}

#[derive(Debug)]
pub struct Inv1x1Saved<T: Element> {
    pub x: Tensor<T>,
}

impl<T: Element> Clone for Inv1x1Conv<T> {
    fn clone(&self) -> Self {
        Inv1x1Conv {
            weight: self.weight.clone(),
            factors: OnceLock::new(),
        }
    }
}

impl<T: Element> Inv1x1Conv<T> {
    /// Random orthogonal `W` (QR of a Gaussian matrix with `diag(R) > 0`), so
    /// the layer starts volume-preserving.
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        let q = random_orthogonal(channels, rng);
        let w = Tensor::from_vec((channels, channels, 1, 1), q.into_iter().map(T::from_f64).collect())?;
        Self::with_weight(w)
    }

    pub fn with_weight(weight: Tensor<T>) -> Result<Self> {
        let s = weight.shape();
        if s.n != s.c || s.h != 1 || s.w != 1 {
            return Err(Error::shape(format!("1x1 weight must be (c, c, 1, 1), got {s}")));
        }
        let layer = Inv1x1Conv {
            weight: Param::new(weight)?,
            factors: OnceLock::new(),
        };
        layer.factorized()?;
        Ok(layer)
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let mut w = Tensor::zeros((channels, channels, 1, 1))?;
        for i in 0..channels {
            w.data_mut()[i * channels + i] = T::one();
        }
        Self::with_weight(w)
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape().c
    }

    fn factorized(&self) -> Result<&Factorized> {
        if let Some(f) = self.factors.get() {
            return Ok(f);
        }
        let c = self.channels();
        let w: Vec<f64> = self.weight.value.data().iter().map(|v| v.as_f64()).collect();
        let lu = LuFactors::factorize(&w, c)?;
        let inverse = lu.inverse();
        let _ = self.factors.set(Factorized { lu, inverse });
        Ok(self.factors.get().expect("just set"))
    }

    /// `log|det W|`.
    pub fn log_abs_det(&self) -> Result<f64> {
        Ok(self.factorized()?.lu.log_abs_det())
    }

    fn check_channels(&self, s: Shape) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::shape(format!(
                "1x1 conv has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        Ok(())
    }

    fn logdet(&self, s: Shape) -> Result<Vec<T>> {
        let per = T::from_f64(s.plane() as f64 * self.log_abs_det()?);
        Ok(vec![per; s.n])
    }
}

impl<T: Element> InvertibleLayer<T> for Inv1x1Conv<T> {
    type Saved = Inv1x1Saved<T>;

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check_channels(input)?;
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        self.check_channels(x.shape())?;
        let logdet = self.logdet(x.shape())?;
        Ok((pixel_matmul(x, &self.weight.value)?, logdet))
    }

    /// Solves `W x = y` at every pixel with the cached LU factors.
    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let s = y.shape();
        self.check_channels(s)?;
        let f = self.factorized()?;
        let c = s.c;
        let plane = s.plane();
        let mut x = Tensor::zeros(s)?;
        let mut b = vec![0.0f64; c];
        let mut scratch = vec![0.0f64; c];
        let (yd, xd) = (y.data(), x.data_mut());
        for n in 0..s.n {
            let base = n * c * plane;
            for p in 0..plane {
                for (i, bv) in b.iter_mut().enumerate() {
                    *bv = yd[base + i * plane + p].as_f64();
                }
                f.lu.solve_in_place(&mut b, &mut scratch);
                for (i, &bv) in b.iter().enumerate() {
                    xd[base + i * plane + p] = T::from_f64(bv);
                }
            }
        }
        Ok(x)
    }

    fn forward_saving(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Self::Saved)> {
        let (y, logdet) = self.forward(&x)?;
        Ok((y, logdet, Inv1x1Saved { x }))
    }

    fn recompute(&self, y: &Tensor<T>) -> Result<Self::Saved> {
        Ok(Inv1x1Saved { x: self.inverse(y)? })
    }

    fn backward_saved(&mut self, saved: Self::Saved, dy: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = saved.x;
        let s = x.shape();
        check_same(dy.shape(), s, "1x1 conv upstream gradient")?;
        check_dlogdet(dlogdet, s.n)?;
        let c = s.c;
        let dx = pixel_matmul_into(dy, self.weight.value.data(), true)?;

        let weight = ordered_sum(dlogdet).as_f64() * s.plane() as f64;
        let inv = self.factorized()?.inverse.clone();
        let grad = self.weight.grad.data_mut();
        for o in 0..c {
            for i in 0..c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    for (&g, &xv) in dy.plane(n, o).iter().zip(x.plane(n, i)) {
                        acc = acc + g * xv;
                    }
                }
                // d log|det W| / dW = W^{-T}
                acc = acc + T::from_f64(weight * inv[i * c + o]);
                grad[o * c + i] = grad[o * c + i] + acc;
            }
        }
        Ok((dx, x))
    }

    fn params(&self) -> Vec<Named<'_, T>> {
        vec![("weight", &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        self.factors = OnceLock::new();
        vec![("weight", &mut self.weight)]
    }
}

/// Row-major orthogonal matrix from modified Gram-Schmidt on the columns of a
/// Gaussian matrix; the implied `R` has a positive diagonal.
pub(crate) fn random_orthogonal(c: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let a: Vec<f64> = (0..c * c).map(|_| rng.normal()).collect();
        let mut q = a.clone();
        let mut ok = true;
        for j in 0..c {
            for k in 0..j {
                let dot: f64 = (0..c).map(|i| q[i * c + k] * q[i * c + j]).sum();
                for i in 0..c {
                    q[i * c + j] -= dot * q[i * c + k];
                }
            }
            let norm = (0..c).map(|i| q[i * c + j].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..c {
                q[i * c + j] /= norm;
            }
        }
        if ok {
            return q;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let mut l = Inv1x1Conv::<f64>::identity(3).unwrap();
        let x = Tensor::randn((2, 3, 2, 2), &mut Rng::new(0)).unwrap();
        let (y, ld) = l.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, vec![0.0, 0.0]);
    }

    #[test]
    fn doubled_identity_logdet() {
        let w = Tensor::from_vec((2, 2, 1, 1), vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let mut l = Inv1x1Conv::<f64>::with_weight(w).unwrap();
        let x = Tensor::randn((1, 2, 4, 4), &mut Rng::new(1)).unwrap();
        let (_, ld) = l.forward(&x).unwrap();
        assert!((ld[0] - 16.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_init() {
        let q = random_orthogonal(5, &mut Rng::new(2));
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..5).map(|k| q[k * 5 + i] * q[k * 5 + j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let l = Inv1x1Conv::<f64>::new(5, &mut Rng::new(2)).unwrap();
        assert!(l.log_abs_det().unwrap().abs() < 1e-12);
    }

    #[test]
    fn singular_weight_rejected() {
        let w = Tensor::<f64>::from_vec((2, 2, 1, 1), vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(Inv1x1Conv::with_weight(w), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn logdet_only_gradient_closed_form() {
        let mut rng = Rng::new(3);
        let w = Tensor::from_vec((2, 2, 1, 1), vec![1.5, 0.3, -0.2, 0.8]).unwrap();
        let mut l = Inv1x1Conv::<f64>::with_weight(w).unwrap();
        let x = Tensor::randn((3, 2, 2, 2), &mut rng).unwrap();
        let (y, _) = l.forward(&x).unwrap();
        let dy = Tensor::zeros(y.shape()).unwrap();
        let (dx, _) = l.backward(&dy, &y, &[-1.0, -1.0, -1.0]).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        // -n*h*w * W^{-T} with det = 1.5*0.8 + 0.06 = 1.26
        let det = 1.26;
        let inv_t = [0.8 / det, 0.2 / det, -0.3 / det, 1.5 / det];
        for (g, e) in l.weight.grad.data().iter().zip(inv_t) {
            assert!((g - (-12.0 * e)).abs() < 1e-12, "{g} vs {}", -12.0 * e);
        }
    }

    #[test]
    fn mutable_access_drops_factorization() {
        let mut l = Inv1x1Conv::<f64>::identity(2).unwrap();
        assert!(l.log_abs_det().unwrap().abs() < 1e-15);
        l.params_mut()[0].1.value.data_mut()[0] = 3.0;
        assert!((l.log_abs_det().unwrap() - 3f64.ln()).abs() < 1e-15);
    }
}
