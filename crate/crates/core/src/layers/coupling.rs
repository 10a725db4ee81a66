//! Affine and additive coupling.
//!
//! The input splits at `k = c/2` into `(x1, x2)`. `x1` passes through
//! unchanged and feeds the conditioner, which produces the transform of `x2`:
//!
//! - affine: `(r, t) = net(x1)`, `s = A * tanh(r / A)`, `y2 = exp(s) * x2 + t`,
//!   `logdet = sum(s)`;
//! - additive: `t = net(x1)`, `y2 = x2 + t`, `logdet = 0`.
//!
//! The clamp `A` keeps every scale inside `[exp(-A), exp(A)]`.

use serde::{Deserialize, Serialize};

use super::{check_dlogdet, check_same, InvertibleLayer};
use crate::conditioner::{CondActivations, CondNet};
use crate::error::{Error, Result};
use crate::param::{Named, NamedMut};
use crate::tensor::{Element, Rng, Shape, Tensor};

pub const SCALE_CLAMP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Affine,
    Additive,
}

impl std::str::FromStr for CouplingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" => Ok(CouplingKind::Affine),
            "additive" => Ok(CouplingKind::Additive),
            other => Err(format!("unknown coupling `{other}` (expected affine or additive)")),
        }
    }
}

impl std::fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CouplingKind::Affine => "affine",
            CouplingKind::Additive => "additive",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Coupling<T: Element> {
    kind: CouplingKind,
    channels: usize,
    pub cond: CondNet<T>,
}

#[derive(Debug)]
pub struct CouplingSaved<T: Element> {
    pub x: Tensor<T>,
    /// Clamped log-scale `s`, affine only.
    pub scale: Option<Tensor<T>>,
    /// Conditioner hidden activation, store-all mode only.
    pub hidden: Option<CondActivations<T>>,
}

impl<T: Element> Coupling<T> {
    pub fn new(kind: CouplingKind, channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::shape(format!("coupling needs an even channel count >= 2, got {channels}")));
        }
        let k = channels / 2;
        let c_out = match kind {
            CouplingKind::Affine => 2 * (channels - k),
            CouplingKind::Additive => channels - k,
        };
        Ok(Coupling {
            kind,
            channels,
            cond: CondNet::new(k, hidden, c_out, rng)?,
        })
    }

    pub fn affine(channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(CouplingKind::Affine, channels, hidden, rng)
    }

    pub fn additive(channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(CouplingKind::Additive, channels, hidden, rng)
    }

    pub fn kind(&self) -> CouplingKind {
        self.kind
    }

    pub fn split_point(&self) -> usize {
        self.channels / 2
    }

    fn check_channels(&self, s: Shape) -> Result<()> {
        if s.c != self.channels {
            return Err(Error::shape(format!(
                "coupling has {} channels, input has {}",
                self.channels, s.c
            )));
        }
        Ok(())
    }

    /// Shared forward; returns the log-scale and hidden activation on request.
    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Vec<T>, Option<Tensor<T>>, Option<CondActivations<T>>)> {
        let s = x.shape();
        self.check_channels(s)?;
        let k = self.split_point();
        let m = s.c - k;
        let x1 = x.channel_slice(0, k)?;
        let (out, acts) = if keep {
            let (o, a) = self.cond.forward_with_activations(&x1)?;
            (o, Some(a))
        } else {
            (self.cond.forward(&x1)?, None)
        };
        drop(x1);

        let mut y = x.clone();
        let mut logdet = vec![T::zero(); s.n];
        let mut scale = match (self.kind, keep) {
            (CouplingKind::Affine, true) => Some(Tensor::zeros(s.with_c(m))?),
            _ => None,
        };
        let alpha = T::from_f64(SCALE_CLAMP);
        for (n, ld) in logdet.iter_mut().enumerate() {
            for j in 0..m {
                match self.kind {
                    CouplingKind::Affine => {
                        let (r, t) = (out.plane(n, j), out.plane(n, m + j));
                        let y2 = y.plane_mut(n, k + j);
                        let mut acc = T::zero();
                        for ((yv, &rv), &tv) in y2.iter_mut().zip(r).zip(t) {
                            let sv = alpha * (rv / alpha).tanh();
                            *yv = sv.exp() * *yv + tv;
                            acc = acc + sv;
                        }
                        *ld = *ld + acc;
                        if let Some(st) = scale.as_mut() {
                            for (sv, &rv) in st.plane_mut(n, j).iter_mut().zip(r) {
                                *sv = alpha * (rv / alpha).tanh();
                            }
                        }
                    }
                    CouplingKind::Additive => {
                        let t = out.plane(n, j);
                        for (yv, &tv) in y.plane_mut(n, k + j).iter_mut().zip(t) {
                            *yv = *yv + tv;
                        }
                    }
                }
            }
        }
        Ok((y, logdet, scale, acts))
    }

    fn inverse_impl(&self, y: &Tensor<T>, keep_scale: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let s = y.shape();
        self.check_channels(s)?;
        let k = self.split_point();
        let m = s.c - k;
        let y1 = y.channel_slice(0, k)?;
        let out = self.cond.forward(&y1)?;
        drop(y1);

        let mut x = y.clone();
        let mut scale = match (self.kind, keep_scale) {
            (CouplingKind::Affine, true) => Some(Tensor::zeros(s.with_c(m))?),
            _ => None,
        };
        let alpha = T::from_f64(SCALE_CLAMP);
        for n in 0..s.n {
            for j in 0..m {
                match self.kind {
                    CouplingKind::Affine => {
                        let (r, t) = (out.plane(n, j), out.plane(n, m + j));
                        for ((xv, &rv), &tv) in x.plane_mut(n, k + j).iter_mut().zip(r).zip(t) {
                            let sv = alpha * (rv / alpha).tanh();
                            *xv = (*xv - tv) * (-sv).exp();
                        }
                        if let Some(st) = scale.as_mut() {
                            for (sv, &rv) in st.plane_mut(n, j).iter_mut().zip(r) {
                                *sv = alpha * (rv / alpha).tanh();
                            }
                        }
                    }
                    CouplingKind::Additive => {
                        let t = out.plane(n, j);
                        for (xv, &tv) in x.plane_mut(n, k + j).iter_mut().zip(t) {
                            *xv = *xv - tv;
                        }
                    }
                }
            }
        }
        Ok((x, scale))
    }
}

impl<T: Element> InvertibleLayer<T> for Coupling<T> {
    type Saved = CouplingSaved<T>;

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check_channels(input)?;
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (y, logdet, _, _) = self.forward_impl(x, false)?;
        Ok((y, logdet))
    }

    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.inverse_impl(y, false)?.0)
    }

    fn forward_saving(&mut self, x: Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Self::Saved)> {
        let (y, logdet, scale, hidden) = self.forward_impl(&x, true)?;
        Ok((y, logdet, CouplingSaved { x, scale, hidden }))
    }

    fn recompute(&self, y: &Tensor<T>) -> Result<Self::Saved> {
        let (x, scale) = self.inverse_impl(y, true)?;
        Ok(CouplingSaved { x, scale, hidden: None })
    }

    fn backward_saved(&mut self, saved: Self::Saved, dy: &Tensor<T>, dlogdet: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let CouplingSaved { x, scale, hidden } = saved;
        let s = x.shape();
        check_same(dy.shape(), s, "coupling upstream gradient")?;
        check_dlogdet(dlogdet, s.n)?;
        let k = self.split_point();
        let m = s.c - k;

        let mut dx = dy.clone();
        let dout = match self.kind {
            CouplingKind::Affine => {
                let scale = scale.ok_or_else(|| Error::InvalidArgument("affine backward needs the log-scale".into()))?;
                let alpha = T::from_f64(SCALE_CLAMP);
                let mut dout = Tensor::zeros(s.with_c(2 * m))?;
                for (n, &dl) in dlogdet.iter().enumerate() {
                    for j in 0..m {
                        let sc = scale.plane(n, j);
                        let x2 = x.plane(n, k + j);
                        let dr = dout.plane_mut(n, j);
                        for (((drv, &sv), &xv), &gv) in dr.iter_mut().zip(sc).zip(x2).zip(dy.plane(n, k + j)) {
                            let e = sv.exp();
                            let ds = gv * xv * e + dl;
                            let th = sv / alpha;
                            *drv = ds * (T::one() - th * th);
                        }
                        dout.plane_mut(n, m + j).copy_from_slice(dy.plane(n, k + j));
                        for (dxv, &sv) in dx.plane_mut(n, k + j).iter_mut().zip(sc) {
                            *dxv = *dxv * sv.exp();
                        }
                    }
                }
                drop(scale);
                dout
            }
            CouplingKind::Additive => dy.channel_slice(k, s.c)?,
        };

        let x1 = x.channel_slice(0, k)?;
        let dcond = match hidden {
            Some(acts) => self.cond.backward_cached(&x1, acts, &dout)?,
            None => self.cond.backward(&x1, &dout)?,
        };
        drop((x1, dout));
        for n in 0..s.n {
            for j in 0..k {
                for (dxv, &gv) in dx.plane_mut(n, j).iter_mut().zip(dcond.plane(n, j)) {
                    *dxv = *dxv + gv;
                }
            }
        }
        Ok((dx, x))
    }

    fn params(&self) -> Vec<Named<'_, T>> {
        self.cond.params()
    }

    fn params_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        self.cond.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::meter::MemoryMeter;
    use crate::layers::lu::log_abs_det;
    use std::sync::Arc;

    fn perturbed(rng: &mut Rng, kind: CouplingKind, c: usize) -> Coupling<f64> {
        perturbed_wide(rng, kind, c, 4)
    }

    fn perturbed_wide(rng: &mut Rng, kind: CouplingKind, c: usize, hidden: usize) -> Coupling<f64> {
        let mut l = Coupling::<f64>::new(kind, c, hidden, rng).unwrap();
        for (_, p) in l.params_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        l
    }

    fn dense_logdet(l: &mut Coupling<f64>, x: &Tensor<f64>) -> f64 {
        let d = x.len();
        let eps = 1e-6;
        let base = l.forward(x).unwrap().0;
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let yp = l.forward(&xp).unwrap().0;
            for i in 0..d {
                jac[i * d + j] = (yp.data()[i] - base.data()[i]) / eps;
            }
        }
        log_abs_det(&jac, d).unwrap()
    }

    fn objective(l: &mut Coupling<f64>, x: &Tensor<f64>, dy: &Tensor<f64>, dl: &[f64]) -> f64 {
        let (y, ld) = l.forward(x).unwrap();
        let inner: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        inner + ld.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn fresh_layer_is_identity() {
        let mut rng = Rng::new(0);
        for kind in [CouplingKind::Affine, CouplingKind::Additive] {
            let mut l = Coupling::<f32>::new(kind, 4, 8, &mut rng).unwrap();
            let x = Tensor::randn((2, 4, 3, 3), &mut rng).unwrap();
            let (y, ld) = l.forward(&x).unwrap();
            assert_eq!(y, x);
            assert_eq!(ld, vec![0.0, 0.0]);
            let dy = Tensor::randn(x.shape(), &mut rng).unwrap();
            let (dx, _) = l.backward(&dy, &y, &[0.0, 0.0]).unwrap();
            assert_eq!(dx, dy);
        }
    }

    #[test]
    fn affine_logdet_matches_dense_jacobian() {
        let mut rng = Rng::new(1);
        let mut l = perturbed(&mut rng, CouplingKind::Affine, 2);
        let x = Tensor::randn((1, 2, 3, 3), &mut rng).unwrap();
        let analytic = l.forward(&x).unwrap().1[0];
        let dense = dense_logdet(&mut l, &x);
        assert!(analytic.abs() > 0.1);
        assert!((analytic - dense).abs() / dense.abs() < 1e-3, "{analytic} vs {dense}");
    }

    #[test]
    fn affine_round_trip_f32() {
        let mut rng = Rng::new(2);
        let l64 = perturbed(&mut rng, CouplingKind::Affine, 4);
        let mut l = Coupling::<f32> {
            kind: l64.kind,
            channels: 4,
            cond: Coupling::<f32>::affine(4, 4, &mut rng).unwrap().cond,
        };
        for ((_, dst), (_, src)) in l.params_mut().into_iter().zip(l64.params()) {
            dst.value = src.value.cast();
        }
        let x = Tensor::randn((2, 4, 4, 4), &mut rng).unwrap();
        let (y, _) = l.forward(&x).unwrap();
        assert!(l.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn additive_volume_preserving_round_trip() {
        let mut rng = Rng::new(3);
        let mut l = perturbed(&mut rng, CouplingKind::Additive, 4);
        let x = Tensor::randn((2, 4, 4, 4), &mut rng).unwrap();
        let (y, ld) = l.forward(&x).unwrap();
        assert!(ld.iter().all(|&v| v == 0.0));
        assert!(y.max_abs_diff(&x).unwrap() > 1e-3);
        assert!(l.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        for kind in [CouplingKind::Affine, CouplingKind::Additive] {
            let mut l = perturbed(&mut rng, kind, 2);
            let x = Tensor::randn((1, 2, 3, 3), &mut rng).unwrap();
            let dy = Tensor::randn(x.shape(), &mut rng).unwrap();
            let dl = [-1.0];
            let (y, _) = l.forward(&x).unwrap();
            let (dx, _) = l.backward(&dy, &y, &dl).unwrap();
            let h = 1e-5;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (objective(&mut l, &xp, &dy, &dl) - objective(&mut l, &xm, &dy, &dl)) / (2.0 * h);
                assert!(rel(dx.data()[i], fd) < 1e-4, "{kind} dx[{i}]: {} vs {fd}", dx.data()[i]);
            }
            let grads: Vec<Vec<f64>> = l.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();
            for (pi, g) in grads.iter().enumerate() {
                for (j, &gj) in g.iter().enumerate() {
                    let mut probe = |delta: f64| {
                        let mut ps = l.params_mut();
                        ps[pi].1.value.data_mut()[j] += delta;
                        drop(ps);
                        objective(&mut l, &x, &dy, &dl)
                    };
                    let up = probe(h);
                    let down = probe(-2.0 * h);
                    probe(h);
                    let fd = (up - down) / (2.0 * h);
                    assert!(rel(gj, fd) < 1e-4, "{kind} param {pi}[{j}]: {gj} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn backward_needs_only_output() {
        let mut rng = Rng::new(5);
        let mut a = perturbed(&mut rng, CouplingKind::Affine, 4);
        let mut b = a.clone();
        let x = Tensor::randn((2, 4, 4, 4), &mut rng).unwrap();
        let dy = Tensor::randn(x.shape(), &mut rng).unwrap();
        let (y, _, saved) = a.forward_saving(x.clone()).unwrap();
        let (dx_kept, _) = a.backward_saved(saved, &dy, &[-1.0, -1.0]).unwrap();
        drop(x);
        let (dx, _) = b.backward(&dy, &y, &[-1.0, -1.0]).unwrap();
        assert!(dx.max_abs_diff(&dx_kept).unwrap() < 1e-12);
        for ((_, p), (_, q)) in a.params().iter().zip(b.params()) {
            assert!(p.grad.max_abs_diff(&q.grad).unwrap() < 1e-12);
        }
    }

    #[test]
    fn backward_peak_bounded_by_forward_peak() {
        let meter = Arc::new(MemoryMeter::new());
        let _g = MemoryMeter::enter(&meter);
        let mut rng = Rng::new(6);
        let mut l = perturbed_wide(&mut rng, CouplingKind::Affine, 4, 32);
        let x = Tensor::randn((2, 4, 8, 8), &mut rng).unwrap();
        let base = meter.live();
        meter.reset();
        let (y, _) = l.forward(&x).unwrap();
        let fwd = meter.peak() - base;
        let dy = Tensor::randn(x.shape(), &mut rng).unwrap();
        drop(x);
        let base = meter.live();
        meter.reset();
        let out = l.backward(&dy, &y, &[-1.0, -1.0]).unwrap();
        let bwd = meter.peak() - base;
        drop(out);
        assert!((bwd as f64) <= 1.5 * fwd as f64, "backward {bwd} vs forward {fwd}");
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(Coupling::<f32>::affine(3, 4, &mut Rng::new(0)).is_err());
        let mut l = Coupling::<f32>::affine(4, 4, &mut Rng::new(0)).unwrap();
        assert!(l.forward(&Tensor::zeros((1, 2, 2, 2)).unwrap()).is_err());
    }
}
