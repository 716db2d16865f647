//! Quality metrics, rate-distortion points and the Bjontegaard delta rate.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SelicError};
use crate::image::ImagePlane;

/// Header comment identifying the curve CSV schema.
pub const CURVE_SCHEMA: &str = "# selic rd-curve v1";

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SelicError::Shape(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.is_empty() {
        return Err(SelicError::InvalidInput("empty images".into()));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` with MSE on the 8-bit scale; `+inf` when equal.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 255.0;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// Renders a PSNR value, using `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Smallest side accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIDE: usize = (SSIM_WINDOW - 1) * 16;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Plane of `h x w` values, row-major.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable valid Gaussian filtering; a dimension shorter than the
    /// window is left unfiltered.
    fn blur(&self, win: &[f64]) -> Plane {
        let k = win.len();
        let mut cur = self.clone();
        if cur.h >= k {
            let oh = cur.h - k + 1;
            let mut v = vec![0.0; oh * cur.w];
            for y in 0..oh {
                for (t, &wt) in win.iter().enumerate() {
                    let row = &cur.v[(y + t) * cur.w..(y + t + 1) * cur.w];
                    for (o, &r) in v[y * cur.w..(y + 1) * cur.w].iter_mut().zip(row) {
                        *o += wt * r;
                    }
                }
            }
            cur = Plane { h: oh, w: cur.w, v };
        }
        if cur.w >= k {
            let ow = cur.w - k + 1;
            let mut v = vec![0.0; cur.h * ow];
            for y in 0..cur.h {
                let row = &cur.v[y * cur.w..(y + 1) * cur.w];
                for x in 0..ow {
                    v[y * ow + x] = win.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
                }
            }
            cur = Plane { h: cur.h, w: ow, v };
        }
        cur
    }

    /// 2x2 average pooling, dropping an odd last row or column.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx];
                v.push(0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)));
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(x: &Plane, y: &Plane, win: &[f64]) -> (f64, f64) {
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mx = x.blur(win);
    let my = y.blur(win);
    let sxx = x.map2(x, |a, b| a * b).blur(win);
    let syy = y.map2(y, |a, b| a * b).blur(win);
    let sxy = x.map2(y, |a, b| a * b).blur(win);
    let n = mx.v.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        cs += c;
        ssim += (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1) * c;
    }
    (ssim / n as f64, cs / n as f64)
}

/// Five-scale MS-SSIM with an 11-tap Gaussian window (sigma 1.5), constants
/// K1 = 0.01 and K2 = 0.03, data range 1. Computed per colour channel and
/// averaged.
pub fn ms_ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(SelicError::InvalidInput(format!(
            "MS-SSIM needs both sides >= {MS_SSIM_MIN_SIDE}px, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let mut x = Plane { h, w, v: a.channel(c).iter().map(|&v| v as f64).collect() };
        let mut y = Plane { h, w, v: b.channel(c).iter().map(|&v| v as f64).collect() };
        let mut value = 1.0;
        for (level, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&x, &y, &win);
            if level + 1 == MS_SSIM_WEIGHTS.len() {
                value *= ssim.max(0.0).powf(wt);
            } else {
                value *= cs.max(0.0).powf(wt);
                x = x.downsample();
                y = y.downsample();
            }
        }
        total += value;
    }
    Ok(total / 3.0)
}

/// Mean rate and quality of one codec operating point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    /// `NaN` when the images were too small to measure.
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by rate and rejects duplicate or non-positive rates.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.iter().any(|p| !(p.bpp > 0.0) || !p.psnr_db.is_finite()) {
            return Err(SelicError::Data("curve points need bpp > 0 and finite PSNR".into()));
        }
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(SelicError::Data("curve rates must be strictly increasing".into()));
        }
        Ok(Self { label: label.into(), points })
    }

    /// Reads a curve CSV (`label,bpp,psnr_db,ms_ssim`; `#` lines ignored).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| SelicError::Data(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| SelicError::Data(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| SelicError::Data(format!("{}: missing column `{name}`", path.display())))
        };
        let (cb, cp) = (col("bpp")?, col("psnr_db")?);
        let (cl, cm) = (headers.iter().position(|h| h == "label"), headers.iter().position(|h| h == "ms_ssim"));
        let mut label = None;
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SelicError::Data(e.to_string()))?;
            let num = |c: usize| -> Result<f64> {
                let s = rec.get(c).unwrap_or("");
                s.parse::<f64>().map_err(|_| SelicError::Data(format!("{} row {}: bad number `{s}`", path.display(), i + 1)))
            };
            if label.is_none() {
                label = cl.and_then(|c| rec.get(c)).map(str::to_string);
            }
            let ms = match cm.and_then(|c| rec.get(c)) {
                Some(s) if !s.is_empty() => s.parse().unwrap_or(f64::NAN),
                _ => f64::NAN,
            };
            points.push(RdPoint { bpp: num(cb)?, psnr_db: num(cp)?, ms_ssim: ms });
        }
        let label = label.unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string());
        Self::new(label, points)
    }
}

/// Writes points as a curve CSV; each row carries its own label.
pub fn write_curve_csv(path: &Path, rows: &[(String, RdPoint)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{CURVE_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| SelicError::Io(std::io::Error::other(e));
    w.write_record(["label", "bpp", "psnr_db", "ms_ssim"]).map_err(err)?;
    for (label, p) in rows {
        w.write_record([label.clone(), p.bpp.to_string(), format_db(p.psnr_db), fmt_opt(p.ms_ssim)]).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt_opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// Least-squares cubic in `t = (x - c) / s`; returns coefficients
/// `[a0, a1, a2, a3]`.
fn cubic_fit(xs: &[f64], ys: &[f64], c: f64, s: f64) -> Result<[f64; 4]> {
    let v = DMatrix::from_fn(xs.len(), 4, |i, j| ((xs[i] - c) / s).powi(j as i32));
    let y = DVector::from_column_slice(ys);
    let sol = v
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| SelicError::Data(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn cubic_integral(a: &[f64; 4], t: f64) -> f64 {
    a[0] * t + a[1] * t * t / 2.0 + a[2] * t.powi(3) / 3.0 + a[3] * t.powi(4) / 4.0
}

/// Bjontegaard delta rate in percent: fit `log10(rate)` as a cubic in PSNR
/// for each curve, integrate both over the shared PSNR range and convert
/// the mean log-rate difference back to a relative rate. Negative means
/// `test` needs fewer bits than `anchor` for the same quality.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    for c in [test, anchor] {
        if c.points.len() < 4 {
            return Err(SelicError::Data(format!("curve `{}` has {} points; BD-rate needs 4", c.label, c.points.len())));
        }
    }
    let range = |c: &RdCurve| {
        c.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr_db), hi.max(p.psnr_db)))
    };
    let ((tl, th), (al, ah)) = (range(test), range(anchor));
    let (lo, hi) = (tl.max(al), th.min(ah));
    if !(hi > lo) {
        return Err(SelicError::Data("PSNR ranges of the two curves do not overlap".into()));
    }
    let (c, s) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    let fit = |curve: &RdCurve| {
        let xs: Vec<f64> = curve.points.iter().map(|p| p.psnr_db).collect();
        let ys: Vec<f64> = curve.points.iter().map(|p| p.bpp.log10()).collect();
        cubic_fit(&xs, &ys, c, s)
    };
    let (pt, pa) = (fit(test)?, fit(anchor)?);
    // Integrate over t in [-1, 1]; the common factor s cancels in the mean.
    let mean = |p: &[f64; 4]| (cubic_integral(p, 1.0) - cubic_integral(p, -1.0)) / 2.0;
    let diff = mean(&pt) - mean(&pa);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let a = ImagePlane::from_fn(8, 8, |_, _, _| 0.5);
        let b = ImagePlane::from_fn(8, 8, |_, _, _| 0.5 + 1.0 / 255.0);
        let want = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert!(psnr(&a, &ImagePlane::zeros(8, 9)).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn ms_ssim_identity_and_size_guard() {
        let a = ImagePlane::from_fn(160, 176, |c, y, x| ((x * 3 + y * 7 + c) % 17) as f32 / 17.0);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = ImagePlane::zeros(159, 300);
        assert!(matches!(ms_ssim(&small, &small), Err(SelicError::InvalidInput(_))));
    }

    #[test]
    fn curve_needs_increasing_rates() {
        let p = |b| RdPoint { bpp: b, psnr_db: 30.0, ms_ssim: f64::NAN };
        assert!(RdCurve::new("a", vec![p(0.2), p(0.1)]).is_ok());
        assert!(RdCurve::new("a", vec![p(0.2), p(0.2)]).is_err());
        assert!(RdCurve::new("a", vec![p(0.0)]).is_err());
    }
}
