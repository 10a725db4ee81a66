//! Test-side oracles, written independently of the library's own checks.

#![allow(dead_code)]

use std::sync::Arc;

use revflow::bench::meter::MemoryMeter;
use revflow::flow::{FlowConfig, FlowModel};
use revflow::layers::InvertibleLayer;
use revflow::{Element, Rng, Tensor};

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn logabsdet(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs())).unwrap();
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        let piv = a[k * n + k];
        assert!(piv != 0.0, "singular Jacobian");
        acc += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i * n + k] / piv;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of a map on flat vectors, row-major
/// `(outputs, inputs)`.
pub fn jacobian(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> (Vec<f64>, usize) {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let mut xp = x.to_vec();
        xp[j] += h;
        let mut xm = x.to_vec();
        xm[j] -= h;
        let (yp, ym) = (f(&xp), f(&xm));
        cols.push(yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let m = cols[0].len();
    let mut jac = vec![0.0; m * d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..m {
            jac[i * d + j] = col[i];
        }
    }
    (jac, m)
}

/// Central difference of a scalar function along coordinate `i`.
pub fn partial(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero entries.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn tensor_like(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

pub fn jitter<'a, T: Element + 'a>(
    params: impl IntoIterator<Item = &'a mut revflow::param::Param<T>>,
    amp: f64,
    rng: &mut Rng,
) {
    for p in params {
        // weight matrices are (out, in, ..): keep the perturbation's operator
        // norm independent of width
        let s = p.value.shape();
        let amp = if s.n > 1 { amp / (s.c as f64).sqrt() } else { amp };
        for v in p.value.data_mut() {
            *v = *v + T::from_f64(amp * rng.normal());
        }
    }
}

/// Fresh model, ActNorm initialized on `x`, then every parameter jittered.
pub fn busy_model<T: Element>(cfg: FlowConfig, x: &Tensor<T>, amp: f64, rng: &mut Rng) -> FlowModel<T> {
    let mut m = FlowModel::<T>::new(cfg, rng).unwrap();
    drop(m.forward(x).unwrap());
    jitter(m.params_mut().into_iter().map(|(_, p)| p), amp, rng);
    m
}

pub fn layer_loss<L: InvertibleLayer<f64>>(l: &mut L, x: &Tensor<f64>, dy: &Tensor<f64>, dl: &[f64]) -> f64 {
    let (y, ld) = l.forward(x).unwrap();
    dot(&y, dy) + ld.iter().zip(dl).map(|(a, b)| a * b).sum::<f64>()
}

/// Worst relative error over the input gradient and every parameter
/// gradient of `layer` for `L = <dy, y> + sum(dl * logdet)`.
pub fn layer_grad_error<L: InvertibleLayer<f64>>(layer: &mut L, x: &Tensor<f64>, rng: &mut Rng) -> f64 {
    const H: f64 = 1e-5;
    let (y, _) = layer.forward(x).unwrap();
    let dy = Tensor::randn(y.shape(), rng).unwrap();
    let dl: Vec<f64> = (0..x.shape().n).map(|_| rng.normal()).collect();
    for (_, p) in layer.params_mut() {
        p.zero_grad();
    }
    let (dx, _) = layer.backward(&dy, &y, &dl).unwrap();
    let mut worst: f64 = 0.0;
    let xs = x.data().to_vec();
    for i in 0..xs.len() {
        let fd = partial(&xs, i, H, |v| layer_loss(layer, &tensor_like(x, v), &dy, &dl));
        worst = worst.max(rel(dx.data()[i], fd));
    }
    let grads: Vec<Vec<f64>> = layer.params().iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    for (pi, g) in grads.iter().enumerate() {
        let base = layer.params()[pi].1.value.data().to_vec();
        for j in 0..g.len() {
            let fd = partial(&base, j, H, |v| {
                layer.params_mut()[pi].1.value.data_mut().copy_from_slice(v);
                layer_loss(layer, x, &dy, &dl)
            });
            layer.params_mut()[pi].1.value.data_mut().copy_from_slice(&base);
            worst = worst.max(rel(g[j], fd));
        }
    }
    worst
}

/// Runs `f` under a private meter; returns its result, the live bytes left
/// behind and the peak. `R` should hold no tensors.
pub fn metered<R>(f: impl FnOnce() -> R) -> (R, u64, u64) {
    let meter = Arc::new(MemoryMeter::new());
    let out = {
        let _scope = MemoryMeter::enter(&meter);
        f()
    };
    (out, meter.live(), meter.peak())
}

pub fn report(id: u32, what: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {id} ({what}): {} [{detail}]", if pass { "PASS" } else { "FAIL" });
}
