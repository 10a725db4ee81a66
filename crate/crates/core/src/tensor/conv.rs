//! Direct-loop 3x3 convolution (zero padding 1, stride 1) and the per-pixel
//! channel mixing used by 1x1 convolutions. No scratch buffers are allocated
//! beyond the metered output tensors.

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Valid `(dst_start, src_start, len)` ranges along one axis for offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize, usize) {
    if d < 0 {
        let s = (-d) as usize;
        (s, 0, len.saturating_sub(s))
    } else {
        let s = d as usize;
        (0, s, len.saturating_sub(s))
    }
}

fn check_conv_args<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize)> {
    let ws = weight.shape();
    if ws.h != 3 || ws.w != 3 {
        return Err(Error::shape(format!("conv3x3 weight must be (c_out, c_in, 3, 3), got {ws}")));
    }
    if ws.c != x.shape().c {
        return Err(Error::shape(format!(
            "conv3x3 expects {} input channels, got {}",
            ws.c,
            x.shape().c
        )));
    }
    Ok((ws.n, ws.c))
}

/// Cross-correlation `y[o] = b[o] + sum_c w[o, c] * x[c]` over 3x3 windows.
pub fn conv3x3<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_out, c_in) = check_conv_args(x, weight)?;
    if bias.len() != c_out {
        return Err(Error::shape(format!("conv3x3 bias needs {c_out} entries, got {}", bias.len())));
    }
    let s = x.shape();
    let (h, w) = (s.h, s.w);
    let mut y = Tensor::zeros(s.with_c(c_out))?;
    let wd = weight.data();
    for n in 0..s.n {
        for o in 0..c_out {
            let yp = y.plane_mut(n, o);
            yp.fill(bias.data()[o]);
            for c in 0..c_in {
                let xp = x.plane(n, c);
                for ki in 0..3 {
                    let (ydst, xsrc, rows) = span(h, ki as isize - 1);
                    for kj in 0..3 {
                        let wv = wd[((o * c_in + c) * 3 + ki) * 3 + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        let (jd, js, cols) = span(w, kj as isize - 1);
                        for r in 0..rows {
                            let yrow = &mut yp[(ydst + r) * w + jd..][..cols];
                            let xrow = &xp[(xsrc + r) * w + js..][..cols];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv = *yv + wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of a scalar loss through [`conv3x3`] given upstream `dy`:
/// returns `(dx, dweight, dbias)`.
pub fn conv3x3_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c_out, c_in) = check_conv_args(x, weight)?;
    let s = x.shape();
    if dy.shape() != s.with_c(c_out) {
        return Err(Error::shape(format!(
            "conv3x3 upstream gradient must be {}, got {}",
            s.with_c(c_out),
            dy.shape()
        )));
    }
    let (h, w) = (s.h, s.w);
    let mut dx = Tensor::zeros(s)?;
    let mut dw = Tensor::zeros(weight.shape())?;
    let mut db = Tensor::zeros((1, c_out, 1, 1))?;
    let wd = weight.data();

    for n in 0..s.n {
        for o in 0..c_out {
            let gp = dy.plane(n, o);
            let acc = gp.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[o] = db.data()[o] + acc;
            for c in 0..c_in {
                let xp = x.plane(n, c);
                for ki in 0..3 {
                    let (ydst, xsrc, rows) = span(h, ki as isize - 1);
                    for kj in 0..3 {
                        let (jd, js, cols) = span(w, kj as isize - 1);
                        let widx = ((o * c_in + c) * 3 + ki) * 3 + kj;
                        let mut g = T::zero();
                        for r in 0..rows {
                            let grow = &gp[(ydst + r) * w + jd..][..cols];
                            let xrow = &xp[(xsrc + r) * w + js..][..cols];
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                g = g + gv * xv;
                            }
                        }
                        dw.data_mut()[widx] = dw.data()[widx] + g;

                        let wv = wd[widx];
                        if wv == T::zero() {
                            continue;
                        }
                        let dxp = dx.plane_mut(n, c);
                        for r in 0..rows {
                            let grow = &gp[(ydst + r) * w + jd..][..cols];
                            let dxrow = &mut dxp[(xsrc + r) * w + js..][..cols];
                            for (dv, &gv) in dxrow.iter_mut().zip(grow) {
                                *dv = *dv + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Weight and bias gradients of [`conv3x3`] without the input gradient.
pub fn conv3x3_param_grads<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c_out, c_in) = check_conv_args(x, weight)?;
    let s = x.shape();
    check_upstream(s, c_out, dy)?;
    let (h, w) = (s.h, s.w);
    let mut dw = Tensor::zeros(weight.shape())?;
    let mut db = Tensor::zeros((1, c_out, 1, 1))?;
    for n in 0..s.n {
        for o in 0..c_out {
            let gp = dy.plane(n, o);
            let acc = gp.iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[o] = db.data()[o] + acc;
            for c in 0..c_in {
                let xp = x.plane(n, c);
                for ki in 0..3 {
                    let (ydst, xsrc, rows) = span(h, ki as isize - 1);
                    for kj in 0..3 {
                        let (jd, js, cols) = span(w, kj as isize - 1);
                        let widx = ((o * c_in + c) * 3 + ki) * 3 + kj;
                        let mut g = T::zero();
                        for r in 0..rows {
                            let grow = &gp[(ydst + r) * w + jd..][..cols];
                            let xrow = &xp[(xsrc + r) * w + js..][..cols];
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                g = g + gv * xv;
                            }
                        }
                        dw.data_mut()[widx] = dw.data()[widx] + g;
                    }
                }
            }
        }
    }
    Ok((dw, db))
}

/// Input gradient of [`conv3x3`] fused with a ReLU gate, computed in place:
/// on entry `act` holds the post-ReLU activation that fed the convolution, on
/// return it holds `dL/d(pre-activation)`. Works one plane at a time with a
/// single metered plane of scratch.
pub fn conv3x3_relu_input_grad_inplace<T: Element>(
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    act: &mut Tensor<T>,
) -> Result<()> {
    let (c_out, c_in) = check_conv_args(act, weight)?;
    let s = act.shape();
    check_upstream(s, c_out, dy)?;
    let (h, w) = (s.h, s.w);
    let wd = weight.data();
    let mut scratch = Tensor::<T>::zeros((1, 1, h, w))?;
    for n in 0..s.n {
        for c in 0..c_in {
            let acc = scratch.data_mut();
            acc.fill(T::zero());
            for o in 0..c_out {
                let gp = dy.plane(n, o);
                for ki in 0..3 {
                    let (ydst, xsrc, rows) = span(h, ki as isize - 1);
                    for kj in 0..3 {
                        let (jd, js, cols) = span(w, kj as isize - 1);
                        let wv = wd[((o * c_in + c) * 3 + ki) * 3 + kj];
                        if wv == T::zero() {
                            continue;
                        }
                        for r in 0..rows {
                            let grow = &gp[(ydst + r) * w + jd..][..cols];
                            let arow = &mut acc[(xsrc + r) * w + js..][..cols];
                            for (dv, &gv) in arow.iter_mut().zip(grow) {
                                *dv = *dv + wv * gv;
                            }
                        }
                    }
                }
            }
            for (a, &g) in act.plane_mut(n, c).iter_mut().zip(scratch.data()) {
                *a = if *a > T::zero() { g } else { T::zero() };
            }
        }
    }
    Ok(())
}

fn check_upstream<T: Element>(s: Shape, c_out: usize, dy: &Tensor<T>) -> Result<()> {
    if dy.shape() != s.with_c(c_out) {
        return Err(Error::shape(format!(
            "conv3x3 upstream gradient must be {}, got {}",
            s.with_c(c_out),
            dy.shape()
        )));
    }
    Ok(())
}

/// Per-pixel matrix product `y[n, :, h, w] = W x[n, :, h, w]` with `W`
/// stored as a `(c, c, 1, 1)` tensor.
pub fn pixel_matmul<T: Element>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 || ws.n != ws.c {
        return Err(Error::shape(format!("pixel_matmul weight must be (c, c, 1, 1), got {ws}")));
    }
    pixel_matmul_into(x, weight.data(), false)
}

/// [`pixel_matmul`] against a row-major `c x c` matrix, optionally transposed.
pub fn pixel_matmul_into<T: Element>(x: &Tensor<T>, mat: &[T], transpose: bool) -> Result<Tensor<T>> {
    let s: Shape = x.shape();
    let c = s.c;
    if mat.len() != c * c {
        return Err(Error::shape(format!(
            "pixel_matmul needs a {c}x{c} matrix, got {} entries",
            mat.len()
        )));
    }
    let mut y = Tensor::zeros(s)?;
    for n in 0..s.n {
        for o in 0..c {
            let yp = y.plane_mut(n, o);
            for i in 0..c {
                let m = if transpose { mat[i * c + o] } else { mat[o * c + i] };
                for (yv, &xv) in yp.iter_mut().zip(x.plane(n, i)) {
                    *yv = *yv + m * xv;
                }
            }
        }
    }
    Ok(y)
}
