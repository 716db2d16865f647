//! 2-d convolution and transposed convolution via im2col and gemm.
//!
//! Layouts: activations are `[batch, channels, height, width]`, convolution
//! weights `[out, in, k, k]`, transposed-convolution weights `[in, out, k, k]`.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Result, SelicError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[c, h, w]` image into `[c * k * k, oh * ow]` columns.
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, cols: &mut [F]) {
    let k = g.kernel;
    let np = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * np..][..np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[c, h, w]`, accumulating.
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize, x: &mut [F]) {
    let k = g.kernel;
    let np = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * np..][..np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_weight(w: &[usize], dim0: usize, dim1: Option<usize>, k: usize, what: &str) -> Result<()> {
    let ok = w.len() == 4 && w[0] == dim0 && dim1.is_none_or(|d| w[1] == d) && w[2] == k && w[3] == k;
    if ok {
        Ok(())
    } else {
        Err(SelicError::Shape(format!("{what}: weight shape {w:?} incompatible with input")))
    }
}

pub fn conv2d<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>, g: ConvGeom) -> Result<Tensor<F>> {
    let (bn, cin, h, wd) = x.dims4()?;
    let cout = w.shape()[0];
    check_weight(w.shape(), cout, Some(cin), g.kernel, "conv2d")?;
    let (oh, ow) = match (g.out_len(h), g.out_len(wd)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(SelicError::Shape(format!("conv2d: input {h}x{wd} smaller than kernel"))),
    };
    let kk = cin * g.kernel * g.kernel;
    let np = oh * ow;
    let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * np] };
    for bi in 0..bn {
        let xin = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let col: &[F] = if g.is_pointwise() {
            xin
        } else {
            im2col(xin, cin, h, wd, g, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[bi * cout * np..(bi + 1) * cout * np];
        gemm(false, false, cout, kk, np, w.data(), col, dst, false);
        add_bias(dst, b.data(), np);
    }
    Ok(out)
}

fn add_bias<F: Scalar>(dst: &mut [F], bias: &[F], np: usize) {
    for (co, &bv) in bias.iter().enumerate() {
        for v in &mut dst[co * np..(co + 1) * np] {
            *v += bv;
        }
    }
}

fn bias_grad<F: Scalar>(dy: &[F], channels: usize, np: usize, db: &mut [F]) {
    for co in 0..channels {
        db[co] += dy[co * np..(co + 1) * np].iter().copied().sum::<F>();
    }
}

pub struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Tensor<F>,
    pub db: Tensor<F>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    g: ConvGeom,
    need_dx: bool,
) -> Result<ConvGrads<F>> {
    let (bn, cin, h, wd) = x.dims4()?;
    let (_, cout, oh, ow) = dy.dims4()?;
    let kk = cin * g.kernel * g.kernel;
    let np = oh * ow;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); kk * np] };
    let mut dcols = vec![F::zero(); kk * np];
    for bi in 0..bn {
        let xin = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let dyb = &dy.data()[bi * cout * np..(bi + 1) * cout * np];
        let col: &[F] = if g.is_pointwise() {
            xin
        } else {
            im2col(xin, cin, h, wd, g, oh, ow, &mut cols);
            &cols
        };
        gemm(false, true, cout, np, kk, dyb, col, dw.data_mut(), true);
        bias_grad(dyb, cout, np, db.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if g.is_pointwise() {
                gemm(true, false, kk, cout, np, w.data(), dyb, dxb, true);
            } else {
                gemm(true, false, kk, cout, np, w.data(), dyb, &mut dcols, false);
                col2im(&dcols, cin, h, wd, g, oh, ow, dxb);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

pub fn conv_transpose2d_out_len(n: usize, g: ConvGeom, out_pad: usize) -> Option<usize> {
    ((n - 1) * g.stride + g.kernel + out_pad).checked_sub(2 * g.pad)
}

pub fn conv_transpose2d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    g: ConvGeom,
    out_pad: usize,
) -> Result<Tensor<F>> {
    let (bn, cin, h, wd) = x.dims4()?;
    check_weight(w.shape(), cin, None, g.kernel, "conv_transpose2d")?;
    let cout = w.shape()[1];
    let (oh, ow) = tconv_dims(h, wd, g, out_pad)?;
    let kk = cout * g.kernel * g.kernel;
    let np = h * wd;
    let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
    let mut cols = vec![F::zero(); kk * np];
    for bi in 0..bn {
        let xin = &x.data()[bi * cin * np..(bi + 1) * cin * np];
        gemm(true, false, kk, cin, np, w.data(), xin, &mut cols, false);
        let dst = &mut out.data_mut()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        col2im(&cols, cout, oh, ow, g, h, wd, dst);
        add_bias(dst, b.data(), oh * ow);
    }
    Ok(out)
}

fn tconv_dims(h: usize, w: usize, g: ConvGeom, out_pad: usize) -> Result<(usize, usize)> {
    let dims = conv_transpose2d_out_len(h, g, out_pad).zip(conv_transpose2d_out_len(w, g, out_pad));
    match dims {
        Some((oh, ow)) if g.out_len(oh) == Some(h) && g.out_len(ow) == Some(w) => Ok((oh, ow)),
        _ => Err(SelicError::Shape(format!("conv_transpose2d: invalid geometry for {h}x{w}"))),
    }
}

pub fn conv_transpose2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    g: ConvGeom,
    need_dx: bool,
) -> Result<ConvGrads<F>> {
    let (bn, cin, h, wd) = x.dims4()?;
    let (_, cout, oh, ow) = dy.dims4()?;
    let kk = cout * g.kernel * g.kernel;
    let np = h * wd;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcols = vec![F::zero(); kk * np];
    for bi in 0..bn {
        let xin = &x.data()[bi * cin * np..(bi + 1) * cin * np];
        let dyb = &dy.data()[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
        im2col(dyb, cout, oh, ow, g, h, wd, &mut dcols);
        gemm(false, true, cin, np, kk, xin, &dcols, dw.data_mut(), true);
        bias_grad(dyb, cout, oh * ow, db.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * np..(bi + 1) * cin * np];
            gemm(false, false, cin, kk, np, w.data(), &dcols, dxb, true);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (bn, cin, h, wd) = x.dims4().unwrap();
        let cout = w.shape()[0];
        let (oh, ow) = (g.out_len(h).unwrap(), g.out_len(wd).unwrap());
        let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
        let k = g.kernel;
        for bi in 0..bn {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * scale).sin()).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for g in [
            ConvGeom { kernel: 3, stride: 1, pad: 1 },
            ConvGeom { kernel: 3, stride: 2, pad: 1 },
            ConvGeom { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = seq(&[2, 3, 6, 8], 0.3);
            let w = seq(&[4, 3, g.kernel, g.kernel], 0.7);
            let b = seq(&[4], 1.3);
            let got = conv2d(&x, &w, &b, g).unwrap();
            let want = conv_naive(&x, &w, &b, g);
            assert_eq!(got.shape(), want.shape());
            for (p, q) in got.data().iter().zip(want.data()) {
                assert!((p - q).abs() < 1e-10, "{g:?}");
            }
        }
    }

    #[test]
    fn stride2_halves_and_tconv_doubles() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = seq(&[1, 2, 8, 12], 0.1);
        let y = conv2d(&x, &seq(&[5, 2, 3, 3], 0.2), &seq(&[5], 0.3), g).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 6]);
        let z = conv_transpose2d(&y, &seq(&[5, 2, 3, 3], 0.4), &seq(&[2], 0.5), g, 1).unwrap();
        assert_eq!(z.shape(), &[1, 2, 8, 12]);
    }

    /// <conv(x), u> == <x, conv^T(u)>: the transposed convolution is the
    /// exact adjoint of the strided convolution with the same weights.
    #[test]
    fn tconv_is_adjoint_of_conv() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = seq(&[1, 3, 8, 6], 0.17);
        let w = seq(&[4, 3, 3, 3], 0.29);
        let zero_out = Tensor::zeros(&[4]);
        let zero_in = Tensor::zeros(&[3]);
        let y = conv2d(&x, &w, &zero_out, g).unwrap();
        let u = seq(y.shape(), 0.41);
        // Transposed-conv weights are indexed [in=4, out=3, k, k], same storage.
        let xt = conv_transpose2d(&u, &w, &zero_in, g, 1).unwrap();
        assert_eq!(xt.shape(), x.shape());
        assert!((dot(&y, &u) - dot(&x, &xt)).abs() < 1e-9);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = seq(&[2, 2, 6, 6], 0.23);
        let w = seq(&[3, 2, 3, 3], 0.31);
        let b = seq(&[3], 0.5);
        let y = conv2d(&x, &w, &b, g).unwrap();
        let u = seq(y.shape(), 0.77);
        let grads = conv2d_backward(&x, &w, &u, g, true).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| dot(&conv2d(x, w, &b, g).unwrap(), &u);
        let eps = 1e-6;
        for i in [0, 7, 30, 53] {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
            assert!((fd - grads.dw.data()[i]).abs() < 1e-6);
        }
        for i in [0, 13, 71, 143] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
            assert!((fd - grads.dx.as_ref().unwrap().data()[i]).abs() < 1e-6);
        }
        let want_db: f64 = u.data()[..9].iter().sum::<f64>() + u.data()[27..36].iter().sum::<f64>();
        assert!((grads.db.data()[0] - want_db).abs() < 1e-9);
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = seq(&[1, 3, 3, 4], 0.19);
        let w = seq(&[3, 2, 3, 3], 0.37);
        let b = seq(&[2], 0.5);
        let y = conv_transpose2d(&x, &w, &b, g, 1).unwrap();
        let u = seq(y.shape(), 0.53);
        let grads = conv_transpose2d_backward(&x, &w, &u, g, true).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| dot(&conv_transpose2d(x, w, &b, g, 1).unwrap(), &u);
        let eps = 1e-6;
        for i in [0, 5, 22, 53] {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
            assert!((fd - grads.dw.data()[i]).abs() < 1e-6);
        }
        for i in [0, 11, 35] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
            assert!((fd - grads.dx.as_ref().unwrap().data()[i]).abs() < 1e-6);
        }
    }
}
