use super::{check_dlogdet, check_same, fault, ordered_sum, InvertibleLayer};
use crate::error::{Error, Result};
use crate::param::{Named, NamedMut, Param};
use crate::tensor::{Element, Shape, Tensor};

/// Per-channel affine map `y = s_c * x + b_c`, initialized from the first
/// batch it sees so that batch comes out with zero mean and unit variance.
#[derive(Debug, Clone)]
pub struct ActNorm<T: Element> {
    pub scale: Param<T>,
    pub bias: Param<T>,
    initialized: bool,
}

#[derive(Debug)]
pub struct ActNormSaved<T: Element> {
    pub x: Tensor<T>,
}

impl<T: Element> ActNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(ActNorm {
            scale: Param::new(Tensor::full((1, channels, 1, 1), T::one())?)?,
            bias: Param::zeros((1, channels, 1, 1))?,
            initialized: false,
        })
    }

    /// An already-initialized layer with the given scale and bias.
    pub fn with_params(scale: &[T], bias: &[T]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::shape("actnorm scale and bias lengths differ"));
        }
        let c = scale.len();
        Ok(ActNorm {
            scale: Param::new(Tensor::from_vec((1, c, 1, 1), scale.to_vec())?)?,
            bias: Param::new(Tensor::from_vec((1, c, 1, 1), bias.to_vec())?)?,
            initialized: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn set_initialized(&mut self, on: bool) {
        self.initialized = on;
    }

    /// Sets `s = 1/std`, `b = -mean/std` per channel from `x` (population
    /// statistics over batch and space).
    pub fn data_init(&mut self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        self.check_channels(s)?;
        let count = (s.n * s.plane()) as f64;
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += x.plane(n, c).iter().fold(0.0, |a, &v| a + v.as_f64());
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += x.plane(n, c).iter().fold(0.0, |a, &v| {
                    let d = v.as_f64() - mean;
                    a + d * d
                });
            }
            let var = sq / count;
            if !(var > 1e-12) || !var.is_finite() {
                return Err(Error::DegenerateChannel { channel: c });
            }
            let std = var.sqrt();
            self.scale.value.data_mut()[c] = T::from_f64(1.0 / std);
            self.bias.value.data_mut()[c] = T::from_f64(-mean / std);
        }
        self.initialized = true;
        Ok(())
    }

    fn check_channels(&self, s: Shape) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::shape(format!(
                "actnorm has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        Ok(())
    }

    fn logdet(&self, s: Shape) -> Vec<T> {
        let hw = T::from_f64(s.plane() as f64);
        let per = hw * ordered_sum(&self.scale.value.data().iter().map(|v| v.abs().ln()).collect::<Vec<_>>());
        vec![per; s.n]
    }
}

impl<T: Element> InvertibleLayer<T> for ActNorm<T> {
    type Saved = ActNormSaved<T>;

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check_channels(input)?;
        Ok(input)
    }

    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let s = y.shape();
        self.check_channels(s)?;
        let mut x = Tensor::zeros(s)?;
        for n in 0..s.n {
            for c in 0..s.c {
                let (sc, b) = (self.scale.value.data()[c], self.bias.value.data()[c]);
                for (xv, &yv) in x.plane_mut(n, c).iter_mut().zip(y.plane(n, c)) {
                    *xv = (yv - b) / sc;
                }
            }
        }
        Ok(x)
    }

    fn forward_saving(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Self::Saved)> {
        let (y, logdet) = self.forward(&x)?;
        Ok((y, logdet, ActNormSaved { x }))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let s = x.shape();
        self.check_channels(s)?;
        if !self.initialized {
            self.data_init(x)?;
        }
        let mut y = Tensor::zeros(s)?;
        for n in 0..s.n {
            for c in 0..s.c {
                let (sc, b) = (self.scale.value.data()[c], self.bias.value.data()[c]);
                for (yv, &xv) in y.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                    *yv = sc * xv + b;
                }
            }
        }
        Ok((y, self.logdet(s)))
    }

    fn recompute(&self, y: &Tensor<T>) -> Result<Self::Saved> {
        Ok(ActNormSaved { x: self.inverse(y)? })
    }

    fn backward_saved(&mut self, saved: Self::Saved, dy: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let x = saved.x;
        let s = x.shape();
        check_same(dy.shape(), s, "actnorm upstream gradient")?;
        check_dlogdet(dlogdet, s.n)?;
        let weight = ordered_sum(dlogdet) * T::from_f64(s.plane() as f64);
        let flip = fault::flip_grad_sign();
        let mut dx = Tensor::zeros(s)?;
        for c in 0..s.c {
            let sc = self.scale.value.data()[c];
            let mut ds = T::zero();
            let mut db = T::zero();
            for n in 0..s.n {
                let g = dy.plane(n, c);
                for ((dxv, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(g).zip(x.plane(n, c)) {
                    *dxv = sc * gv;
                    ds = ds + gv * xv;
                    db = db + gv;
                }
            }
            ds = ds + weight / sc;
            if flip {
                db = -db;
            }
            let gs = self.scale.grad.data_mut();
            gs[c] = gs[c] + ds;
            let gb = self.bias.grad.data_mut();
            gb[c] = gb[c] + db;
        }
        Ok((dx, x))
    }

    fn params(&self) -> Vec<Named<'_, T>> {
        vec![("scale", &self.scale), ("bias", &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        vec![("scale", &mut self.scale), ("bias", &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn identity_params() {
        let mut a = ActNorm::<f64>::with_params(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        let x = Tensor::randn((2, 2, 3, 3), &mut Rng::new(0)).unwrap();
        let (y, ld) = a.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, vec![0.0, 0.0]);
    }

    #[test]
    fn reciprocal_scales_cancel() {
        let mut a = ActNorm::<f64>::with_params(&[2.0, 0.5], &[0.0, 0.0]).unwrap();
        let x = Tensor::randn((1, 2, 3, 3), &mut Rng::new(1)).unwrap();
        let (_, ld) = a.forward(&x).unwrap();
        assert!(ld[0].abs() < 1e-15);
    }

    #[test]
    fn data_init_standardizes_first_batch() {
        let mut rng = Rng::new(2);
        let mut x = Tensor::<f32>::randn((8, 3, 4, 4), &mut rng).unwrap();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = *v * 3.0 + (i % 7) as f32;
        }
        let mut a = ActNorm::new(3).unwrap();
        assert!(!a.is_initialized());
        let (y, ld) = a.forward(&x).unwrap();
        assert!(a.is_initialized());
        assert!(ld.iter().all(|&v| v == ld[0]));
        let s = y.shape();
        for c in 0..3 {
            let vals: Vec<f64> = (0..s.n).flat_map(|n| y.plane(n, c).iter().map(|&v| v as f64)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
            assert!(a.scale.value.data()[c] != 0.0);
        }
    }

    #[test]
    fn degenerate_channel_rejected() {
        let mut a = ActNorm::<f64>::new(2).unwrap();
        let mut x = Tensor::randn((2, 2, 2, 2), &mut Rng::new(3)).unwrap();
        for n in 0..2 {
            x.plane_mut(n, 1).fill(4.0);
        }
        assert!(matches!(a.forward(&x), Err(Error::DegenerateChannel { channel: 1 })));
    }

    #[test]
    fn uninitialized_inverse_fails() {
        let a = ActNorm::<f64>::new(2).unwrap();
        assert!(matches!(a.inverse(&Tensor::zeros((1, 2, 1, 1)).unwrap()), Err(Error::Uninitialized)));
    }
}
