//! Photometric loss, SSIM, feature sampling and the dense feature
//! reprojection loss.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RelativeTransform};
use crate::image::{DepthMap, Image};

pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;
/// Minimum fraction of source pixels that must reproject into the target.
pub const MIN_VALID_FRACTION: f64 = 0.01;
/// Feature residual norms below this give no gradient. The norm has no
/// derivative at zero, and rounding in the reprojection otherwise turns an
/// exact match into a unit-length gradient of random direction.
const NORM_DEAD_ZONE: f64 = 1e-9;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights of the photometric term and of the three pose-stage terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: DEFAULT_LAMBDA_DSSIM,
            lambda0: 0.6,
            lambda1: 0.2,
            lambda2: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dssim", self.lambda_dssim),
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable zero-padded Gaussian blur of one plane. The operator is
/// symmetric, so it is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let r = win.len() / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let xx = x as isize + k as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += wk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += wk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_with_gradient(a: &Image, b: &Image) -> Result<(f64, Image)> {
    ssim_impl(a, b, true).map(|(s, g)| (s, g.unwrap()))
}

fn ssim_impl(a: &Image, b: &Image, grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::InvalidInput("ssim of an empty image".into()));
    }
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let n = (w * h * ch) as f64;
    let win = gaussian_window();
    let mut total = 0.0;
    let mut g_img = grad.then(|| Image::zeros(w, h, ch));
    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|i| a.data()[i * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data()[i * ch + c]).collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        // Symmetric products so that ssim(a, b) == ssim(b, a) bit for bit.
        let mx = blur(&x, w, h, &win);
        let my = blur(&y, w, h, &win);
        let exx = blur(&sq(&x, &x), w, h, &win);
        let eyy = blur(&sq(&y, &y), w, h, &win);
        let exy = blur(&sq(&x, &y), w, h, &win);
        let mut g_my = vec![0.0; w * h];
        let mut g_eyy = vec![0.0; w * h];
        let mut g_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if grad {
                let q = b1 * b2;
                g_my[i] = (2.0 * mx[i] * a2 - 2.0 * mx[i] * a1) / q - s * 2.0 * my[i] / b1
                    + s * 2.0 * my[i] / b2;
                g_exy[i] = 2.0 * a1 / q;
                g_eyy[i] = -s / b2;
            }
        }
        if let Some(g) = g_img.as_mut() {
            let bm = blur(&g_my, w, h, &win);
            let be = blur(&g_eyy, w, h, &win);
            let bx = blur(&g_exy, w, h, &win);
            for i in 0..w * h {
                g.data_mut()[i * ch + c] = (bm[i] + 2.0 * y[i] * be[i] + x[i] * bx[i]) / n;
            }
        }
    }
    Ok((total / n, g_img))
}

/// `(1 - lambda) * mean|a - b| + lambda * (1 - ssim(a, b))`.
pub fn photometric_loss(target: &Image, rendered: &Image, lambda_dssim: f64) -> Result<f64> {
    target.check_same_shape(rendered)?;
    let l1 = l1_mean(target, rendered);
    if lambda_dssim == 0.0 {
        return Ok(l1);
    }
    Ok((1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(target, rendered)?))
}

/// Photometric loss and its gradient with respect to `rendered`.
pub fn photometric_loss_with_gradient(
    target: &Image,
    rendered: &Image,
    lambda_dssim: f64,
) -> Result<(f64, Image)> {
    target.check_same_shape(rendered)?;
    let n = target.len() as f64;
    let l1 = l1_mean(target, rendered);
    let mut grad = rendered.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        *g = (1.0 - lambda_dssim)
            * if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
            / n;
    }
    if lambda_dssim == 0.0 {
        return Ok((l1, grad));
    }
    let (s, gs) = ssim_with_gradient(target, rendered)?;
    for (g, v) in grad.data_mut().iter_mut().zip(gs.data()) {
        *g -= lambda_dssim * v;
    }
    Ok(((1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s), grad))
}

fn l1_mean(a: &Image, b: &Image) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Dense per-pixel descriptor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    /// Whether each location vector has unit L2 norm.
    pub normalized: bool,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{} values", width * height * channels),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature value at index {i}"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            normalized,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c) as f32);
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
            normalized: false,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn vector(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copy with every location vector scaled to unit length (zero vectors are kept).
    pub fn l2_normalized(&self) -> FeatureMap {
        let mut out = self.clone();
        for v in out.data.chunks_mut(self.channels) {
            let n = v
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        out.normalized = true;
        out
    }

    /// Bilinear resampling (aligned corners) onto another grid.
    pub fn resized(&self, width: usize, height: usize) -> FeatureMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = if width > 1 {
            (self.width - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let sy = if height > 1 {
            (self.height - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let mut buf = vec![0.0; self.channels];
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            for x in 0..width {
                sample_into(self, x as f64 * sx, y as f64 * sy, &mut buf, None);
                data.extend(buf.iter().map(|&v| v as f32));
            }
        }
        let out = FeatureMap {
            width,
            height,
            channels: self.channels,
            data,
            normalized: false,
        };
        if self.normalized {
            out.l2_normalized()
        } else {
            out
        }
    }
}

/// Bilinear sample at `uv`; `None` outside `[0, W-1] x [0, H-1]`.
pub fn bilinear_sample(f: &FeatureMap, uv: &Vector2<f64>) -> Option<Vec<f64>> {
    let mut out = vec![0.0; f.channels];
    sample_into(f, uv.x, uv.y, &mut out, None).then_some(out)
}

/// Writes the sample into `out` and, when requested, the derivatives with
/// respect to `u` and `v` into `duv` (`2 * C` values, `u` block first).
fn sample_into(f: &FeatureMap, u: f64, v: f64, out: &mut [f64], duv: Option<&mut [f64]>) -> bool {
    let (w, h) = (f.width, f.height);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return false;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = u - x0 as f64;
    let b = v - y0 as f64;
    let (f00, f10, f01, f11) = (
        f.vector(x0, y0),
        f.vector(x1, y0),
        f.vector(x0, y1),
        f.vector(x1, y1),
    );
    for c in 0..f.channels {
        let (p00, p10, p01, p11) = (f00[c] as f64, f10[c] as f64, f01[c] as f64, f11[c] as f64);
        out[c] =
            (1.0 - a) * (1.0 - b) * p00 + a * (1.0 - b) * p10 + (1.0 - a) * b * p01 + a * b * p11;
    }
    if let Some(d) = duv {
        let ch = f.channels;
        for c in 0..ch {
            let (p00, p10, p01, p11) = (f00[c] as f64, f10[c] as f64, f01[c] as f64, f11[c] as f64);
            d[c] = (1.0 - b) * (p10 - p00) + b * (p11 - p01);
            d[ch + c] = (1.0 - a) * (p01 - p00) + a * (p11 - p10);
        }
    }
    true
}

/// Value and pose gradient of the feature reprojection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss {
    pub value: f64,
    /// With respect to `[qw, qx, qy, qz, tx, ty, tz]` of the relative transform.
    pub grad: [f64; 7],
    pub valid: usize,
    pub total: usize,
}

/// Mean L2 distance between `f_i` on its own pixel grid and `f_next` sampled
/// where each pixel lands after lifting with `depth_i`, moving by `t` (which
/// maps camera `i+1` coordinates into camera `i`) and projecting with `k`.
///
/// Depth values `<= 0` mark pixels without geometry. The gradient treats
/// depth as constant.
pub fn feature_reprojection_loss(
    f_i: &FeatureMap,
    f_next: &FeatureMap,
    depth_i: &DepthMap,
    k: &Intrinsics,
    t: &RelativeTransform,
) -> Result<FeatureLoss> {
    feature_reprojection_loss_masked(f_i, f_next, depth_i, k, t, None)
}

/// Relative depth disagreement above which a reprojected pixel counts as
/// hidden in the second view.
pub const OCCLUSION_TOLERANCE: f64 = 0.05;

/// Like [`feature_reprojection_loss`], but a pixel is also dropped when
/// `visible` (depth seen from camera `i+1`) disagrees with the reprojected
/// depth by more than [`OCCLUSION_TOLERANCE`] at the nearest pixel.
pub fn feature_reprojection_loss_masked(
    f_i: &FeatureMap,
    f_next: &FeatureMap,
    depth_i: &DepthMap,
    k: &Intrinsics,
    t: &RelativeTransform,
    visible: Option<&DepthMap>,
) -> Result<FeatureLoss> {
    let (w, h) = (depth_i.width(), depth_i.height());
    if depth_i.channels() != 1 {
        return Err(Error::shape("single-channel depth", depth_i.shape_string()));
    }
    for f in [f_i, f_next] {
        if f.width != w || f.height != h {
            return Err(Error::shape(
                format!("{w}x{h} feature map"),
                format!("{}x{}", f.width, f.height),
            ));
        }
    }
    if f_i.channels != f_next.channels {
        return Err(Error::shape(
            format!("{} channels", f_i.channels),
            format!("{} channels", f_next.channels),
        ));
    }
    if k.width != w || k.height != h {
        return Err(Error::shape(
            format!("{w}x{h} intrinsics"),
            format!("{}x{}", k.width, k.height),
        ));
    }
    if let Some(v) = visible {
        if v.width() != w || v.height() != h || v.channels() != 1 {
            return Err(Error::shape(
                format!("{w}x{h}x1 visibility depth"),
                v.shape_string(),
            ));
        }
    }
    let ch = f_i.channels;
    let rot = t.rotation_matrix();
    let rt = rot.transpose();
    let mut sample = vec![0.0; ch];
    let mut duv = vec![0.0; 2 * ch];
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut g_rot = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    for y in 0..h {
        for x in 0..w {
            let d = depth_i.get(x, y, 0);
            if !(d > 0.0) {
                continue;
            }
            let p = Vector3::new(
                (x as f64 - k.cx) / k.fx * d,
                (y as f64 - k.cy) / k.fy * d,
                d,
            );
            let rel = p - t.translation;
            let q = rt * rel;
            if !(q.z > 0.0) {
                continue;
            }
            let u = k.fx * q.x / q.z + k.cx;
            let v = k.fy * q.y / q.z + k.cy;
            if let Some(vis) = visible {
                let (px, py) = (u.round(), v.round());
                if !(px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64) {
                    continue;
                }
                let z = vis.get(px as usize, py as usize, 0);
                if !(z > 0.0) || (z - q.z).abs() > OCCLUSION_TOLERANCE * q.z {
                    continue;
                }
            }
            if !sample_into(f_next, u, v, &mut sample, Some(&mut duv)) {
                continue;
            }
            valid += 1;
            let src = f_i.vector(x, y);
            let mut r2 = 0.0;
            for c in 0..ch {
                let r = src[c] as f64 - sample[c];
                sample[c] = r;
                r2 += r * r;
            }
            let dist = r2.sqrt();
            sum += dist;
            if dist < NORM_DEAD_ZONE {
                continue;
            }
            // d dist / d(u, v); the residual is src - sample.
            let (mut gu, mut gv) = (0.0, 0.0);
            for c in 0..ch {
                gu -= sample[c] / dist * duv[c];
                gv -= sample[c] / dist * duv[ch + c];
            }
            let z2 = q.z * q.z;
            let g_q = Vector3::new(
                gu * k.fx / q.z,
                gv * k.fy / q.z,
                -(gu * k.fx * q.x + gv * k.fy * q.y) / z2,
            );
            g_rot += rel * g_q.transpose();
            g_t -= rot * g_q;
        }
    }
    let total = w * h;
    if (valid as f64) < MIN_VALID_FRACTION * total as f64 || valid == 0 {
        return Err(Error::DegenerateOverlap { valid, total });
    }
    let n = valid as f64;
    let gq = t.rotation.matrix_vjp(&(g_rot / n));
    Ok(FeatureLoss {
        value: sum / n,
        grad: [gq[0], gq[1], gq[2], gq[3], g_t.x / n, g_t.y / n, g_t.z / n],
        valid,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraPose, Quaternion};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        Image::from_fn(w, h, c, |_, _, _| rng.random())
    }

    /// Straight 2D-window SSIM with the same zero padding.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let win = gaussian_window();
        let r = SSIM_RADIUS as isize;
        let (w, h, ch) = (a.width() as isize, a.height() as isize, a.channels());
        let mut total = 0.0;
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w || yy >= h {
                                continue;
                            }
                            let wt = win[(dx + r) as usize] * win[(dy + r) as usize];
                            let p = a.get(xx as usize, yy as usize, c);
                            let q = b.get(xx as usize, yy as usize, c);
                            mx += wt * p;
                            my += wt * q;
                            exx += wt * p * p;
                            eyy += wt * q * q;
                            exy += wt * p * q;
                        }
                    }
                    let vx = exx - mx * mx;
                    let vy = eyy - my * my;
                    let cxy = exy - mx * my;
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                }
            }
        }
        total / (a.len() as f64)
    }

    #[test]
    fn ssim_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 20, 17, 3);
        let b = random_image(&mut rng, 20, 17, 3);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-8);
        assert!(ssim(&a, &Image::zeros(3, 3, 3)).is_err());
    }

    #[test]
    fn photometric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16, 3);
        assert_eq!(LossWeights::default().lambda_dssim, 0.2);
        assert!(photometric_loss(&a, &a, 0.2).unwrap().abs() < 1e-12);
        let zeros = Image::zeros(8, 8, 3);
        let ones = Image::filled(8, 8, 3, 1.0);
        assert_eq!(photometric_loss(&zeros, &ones, 0.0).unwrap(), 1.0);
        let w = LossWeights::default();
        assert!((w.lambda0 + w.lambda1 + w.lambda2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn photometric_gradient_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 14, 12, 3);
        let b = random_image(&mut rng, 14, 12, 3);
        let (_, g) = photometric_loss_with_gradient(&a, &b, 0.2).unwrap();
        let eps = 1e-6;
        for idx in [0, 7, 100, 311, 503] {
            let mut p = b.clone();
            let mut m = b.clone();
            p.data_mut()[idx] += eps;
            m.data_mut()[idx] -= eps;
            let fd = (photometric_loss(&a, &p, 0.2).unwrap()
                - photometric_loss(&a, &m, 0.2).unwrap())
                / (2.0 * eps);
            assert!(
                (g.data()[idx] - fd).abs() <= 1e-3 * fd.abs().max(1e-6),
                "{idx}: {} vs {fd}",
                g.data()[idx]
            );
        }
    }

    #[test]
    fn bilinear_examples() {
        let f = FeatureMap::from_fn(4, 3, 2, |x, y, c| (x * 10 + y * 100 + c) as f64);
        assert_eq!(
            bilinear_sample(&f, &Vector2::new(2.0, 1.0)).unwrap(),
            vec![120.0, 121.0]
        );
        let mid = bilinear_sample(&f, &Vector2::new(1.5, 0.5)).unwrap();
        assert_relative_eq!(mid[0], (10.0 + 20.0 + 110.0 + 120.0) / 4.0, epsilon = 1e-5);
        assert_eq!(
            bilinear_sample(&f, &Vector2::new(3.0, 2.0)).unwrap(),
            vec![230.0, 231.0]
        );
        assert!(bilinear_sample(&f, &Vector2::new(3.01, 1.0)).is_none());
        assert!(bilinear_sample(&f, &Vector2::new(1.0, -0.01)).is_none());
    }

    fn smooth_features(w: usize, h: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..c)
            .map(|_| {
                (
                    rng.random_range(0.05..0.25),
                    rng.random_range(0.05..0.25),
                    rng.random_range(0.0..6.0),
                )
            })
            .collect();
        FeatureMap::from_fn(w, h, c, |x, y, ch| {
            let (a, b, p) = waves[ch];
            (a * x as f64 + b * y as f64 + p).sin()
        })
    }

    fn plane_depth(w: usize, h: usize, d: f64) -> DepthMap {
        Image::filled(w, h, 1, d)
    }

    #[test]
    fn identity_transform_gives_zero_loss() {
        let f = smooth_features(24, 20, 4, 9);
        let k = Intrinsics::centered(24.0, 24, 20).unwrap();
        let l = feature_reprojection_loss(
            &f,
            &f,
            &plane_depth(24, 20, 2.0),
            &k,
            &CameraPose::identity(),
        )
        .unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid, 24 * 20);
    }

    #[test]
    fn too_little_overlap_is_an_error() {
        let f = smooth_features(16, 16, 2, 1);
        let k = Intrinsics::centered(16.0, 16, 16).unwrap();
        let far = CameraPose::new(Quaternion::IDENTITY, Vector3::new(50.0, 0.0, 0.0)).unwrap();
        let err =
            feature_reprojection_loss(&f, &f, &plane_depth(16, 16, 2.0), &k, &far).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateOverlap {
                valid: 0,
                total: 256
            }
        ));
    }

    #[test]
    fn pose_gradient_matches_central_differences() {
        let (w, h) = (32, 28);
        let f_i = smooth_features(w, h, 5, 4);
        let f_n = smooth_features(w, h, 5, 8);
        let k = Intrinsics::centered(32.0, w, h).unwrap();
        // Depth only in the interior so that the valid set is stable under small perturbations.
        let depth = Image::from_fn(w, h, 1, |x, y, _| {
            if (8..24).contains(&x) && (8..20).contains(&y) {
                2.0 + 0.01 * x as f64 + 0.02 * y as f64
            } else {
                0.0
            }
        });
        let t = CameraPose::new(
            Quaternion::new(1.0, 0.02, -0.03, 0.01),
            Vector3::new(0.05, -0.03, 0.02),
        )
        .unwrap();
        let l = feature_reprojection_loss(&f_i, &f_n, &depth, &k, &t).unwrap();
        let eps = 1e-6;
        for i in 0..7 {
            let eval = |delta: f64| {
                let mut p = t.to_params();
                p[i] += delta;
                feature_reprojection_loss(&f_i, &f_n, &depth, &k, &CameraPose::from_params(&p))
                    .unwrap()
                    .value
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(
                (l.grad[i] - fd).abs() <= 1e-3 * fd.abs().max(1e-4),
                "{i}: {} vs {fd}",
                l.grad[i]
            );
        }
    }

    proptest! {
        #[test]
        fn photometric_is_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 12, 3);
            let b = random_image(&mut rng, 12, 12, 3);
            prop_assert!(photometric_loss(&a, &b, 0.2).unwrap() > 0.0);
        }

        #[test]
        fn orthogonal_channel_mixing_preserves_loss(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (20, 16);
            let f_i = smooth_features(w, h, 3, seed);
            let f_n = smooth_features(w, h, 3, seed + 1);
            let k = Intrinsics::centered(20.0, w, h).unwrap();
            let depth = Image::from_fn(w, h, 1, |_, _, _| rng.random_range(1.5..3.0));
            let t = CameraPose::new(Quaternion::new(1.0, 0.01, 0.02, -0.01), Vector3::new(0.03, 0.0, -0.02)).unwrap();
            let q = Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random()).to_matrix().unwrap();
            let mix = |f: &FeatureMap| FeatureMap::from_fn(w, h, 3, |x, y, c| {
                let v = f.vector(x, y);
                (0..3).map(|j| q[(c, j)] * v[j] as f64).sum()
            });
            let a = feature_reprojection_loss(&f_i, &f_n, &depth, &k, &t).unwrap().value;
            let b = feature_reprojection_loss(&mix(&f_i), &mix(&f_n), &depth, &k, &t).unwrap().value;
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
