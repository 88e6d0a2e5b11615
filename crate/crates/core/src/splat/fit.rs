//! Per-frame Gaussian fitting against a single image with known depth.

use nalgebra::Vector3;

use super::{logit, render, Gaussian, GaussianSet, Rasterizer, RenderAdjoint};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics};
use crate::image::{DepthMap, Image};
use crate::losses::{photometric_loss_with_gradient, DEFAULT_LAMBDA_DSSIM};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iters: usize,
    /// Pixel stride of the initial point sampling.
    pub stride: usize,
    /// Upper bound on the number of Gaussians; the grid is coarsened to fit.
    pub budget: usize,
    /// Initial scale as a multiple of the back-projected sample spacing.
    pub scale_factor: f64,
    pub initial_opacity: f64,
    pub lambda_dssim: f64,
    /// Stop as soon as the photometric loss drops below this value.
    pub loss_threshold: f64,
    /// Centre learning rate relative to the median scene depth.
    pub lr_center: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            stride: 4,
            budget: 4096,
            scale_factor: 0.6,
            initial_opacity: 0.5,
            lambda_dssim: DEFAULT_LAMBDA_DSSIM,
            loss_threshold: 1e-4,
            lr_center: 5e-4,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-2,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidInput("fit stride must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidInput(
                "gaussian budget must be positive".into(),
            ));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::InvalidInput(format!(
                "initial opacity must lie in (0, 1), got {}",
                self.initial_opacity
            )));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::InvalidInput("scale factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub gaussians: GaussianSet,
    /// Photometric loss before each step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
}

fn check_inputs(image: &Image, depth: &DepthMap, k: &Intrinsics) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("RGB image", image.shape_string()));
    }
    if depth.channels() != 1 || depth.width() != image.width() || depth.height() != image.height() {
        return Err(Error::shape(
            format!("{}x{}x1 depth", image.width(), image.height()),
            depth.shape_string(),
        ));
    }
    if k.width != image.width() || k.height != image.height() {
        return Err(Error::shape(
            format!("{}x{} intrinsics", image.width(), image.height()),
            format!("{}x{}", k.width, k.height),
        ));
    }
    Ok(())
}

/// Back-projects a strided pixel grid into the camera frame of the image.
pub fn init_gaussians(
    image: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    cfg: &FitConfig,
) -> Result<GaussianSet> {
    cfg.validate()?;
    check_inputs(image, depth, k)?;
    let (w, h) = (image.width(), image.height());
    let valid = depth
        .data()
        .iter()
        .filter(|d| **d > 0.0 && d.is_finite())
        .count();
    if valid == 0 {
        return Err(Error::InvalidInput("depth map has no valid pixels".into()));
    }
    let mut stride = cfg.stride;
    while valid.div_ceil(stride * stride) > cfg.budget {
        stride += 1;
    }
    let mut gaussians = Vec::new();
    for y in (stride / 2..h).step_by(stride) {
        for x in (stride / 2..w).step_by(stride) {
            let d = depth.get(x, y, 0);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let center = k.unproject(&nalgebra::Vector2::new(x as f64, y as f64), d)?;
            let p = image.pixel(x, y);
            gaussians.push(Gaussian {
                center,
                scale: Vector3::repeat(cfg.scale_factor * stride as f64 * d / k.fx),
                rotation: crate::geometry::Quaternion::IDENTITY,
                opacity_logit: logit(cfg.initial_opacity),
                color: Vector3::new(p[0], p[1], p[2]).map(|v| v.clamp(0.0, 1.0)),
            });
        }
    }
    if gaussians.len() > cfg.budget {
        gaussians.truncate(cfg.budget);
    }
    if gaussians.is_empty() {
        // Valid depth exists but the grid missed it; fall back to the valid pixels themselves.
        for (i, &d) in depth.data().iter().enumerate() {
            if d > 0.0 && d.is_finite() && gaussians.len() < cfg.budget {
                let (x, y) = (i % w, i / w);
                let p = image.pixel(x, y);
                gaussians.push(Gaussian {
                    center: k.unproject(&nalgebra::Vector2::new(x as f64, y as f64), d)?,
                    scale: Vector3::repeat(cfg.scale_factor * d / k.fx),
                    rotation: crate::geometry::Quaternion::IDENTITY,
                    opacity_logit: logit(cfg.initial_opacity),
                    color: Vector3::new(p[0], p[1], p[2]).map(|v| v.clamp(0.0, 1.0)),
                });
            }
        }
    }
    Ok(GaussianSet::new(gaussians))
}

/// Initializes from `depth` and optimizes all Gaussian parameters against
/// `image` as seen from the identity pose.
pub fn fit_gaussians(
    image: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let init = init_gaussians(image, depth, k, cfg)?;
    fit_from(init, image, k, cfg)
}

/// Optimizes an existing set against `image`.
pub fn fit_from(
    init: GaussianSet,
    image: &Image,
    k: &Intrinsics,
    cfg: &FitConfig,
) -> Result<FitReport> {
    let pose = CameraPose::identity();
    let n = init.len();
    let mut valid_depths: Vec<f64> = init.iter().map(|g| g.center.z).collect();
    valid_depths.sort_by(f64::total_cmp);
    let median_depth = valid_depths.get(n / 2).copied().unwrap_or(1.0);

    let mut params = Vec::with_capacity(14 * n);
    for g in init.iter() {
        let mut a = g.to_array();
        for s in &mut a[3..6] {
            *s = s.ln();
        }
        params.extend_from_slice(&a);
    }
    let lr_of = |i: usize| match i % 14 {
        0..=2 => cfg.lr_center * median_depth,
        3..=5 => cfg.lr_log_scale,
        6..=9 => cfg.lr_rotation,
        10 => cfg.lr_opacity,
        _ => cfg.lr_color,
    };
    let unpack = |params: &[f64]| {
        GaussianSet::new(
            params
                .chunks_exact(14)
                .map(|c| {
                    let mut a: [f64; 14] = c.try_into().unwrap();
                    for s in &mut a[3..6] {
                        *s = s.exp();
                    }
                    Gaussian::from_array(&a)
                })
                .collect(),
        )
    };

    let mut adam = Adam::new(params.len());
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut grads = vec![0.0; params.len()];
    let mut set = init;
    let mut stopped = false;
    for it in 0..cfg.iters {
        let raster = Rasterizer::new(&set, &pose, k);
        let out = raster.forward();
        let (loss, g_color) = photometric_loss_with_gradient(image, &out.color, cfg.lambda_dssim)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "photometric loss became {loss} at fit iteration {it}"
            )));
        }
        losses.push(loss);
        if loss < cfg.loss_threshold {
            stopped = true;
            break;
        }
        let g = raster.backward(&RenderAdjoint {
            color: Some(g_color),
            ..Default::default()
        });
        for (i, gauss) in set.iter().enumerate() {
            let mut a = g.gaussians.to_array(i);
            for d in 0..3 {
                a[3 + d] *= gauss.scale[d];
            }
            grads[14 * i..14 * i + 14].copy_from_slice(&a);
        }
        adam.step(&mut params, &grads, lr_of);
        for c in params.chunks_exact_mut(14) {
            let qn = (c[6] * c[6] + c[7] * c[7] + c[8] * c[8] + c[9] * c[9]).sqrt();
            if qn > 0.0 {
                c[6..10].iter_mut().for_each(|v| *v /= qn);
            } else {
                c[6..10].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
            c[11..14].iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        set = unpack(&params);
    }
    let final_loss = match (stopped, losses.last()) {
        (true, Some(&l)) => l,
        _ => {
            photometric_loss_with_gradient(image, &render(&set, &pose, k).color, cfg.lambda_dssim)?
                .0
        }
    };
    let iterations = losses.len();
    Ok(FitReport {
        gaussians: set,
        losses,
        final_loss,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn zero_iterations_returns_initialization() {
        let image = Image::filled(16, 16, 3, 0.5);
        let depth = Image::filled(16, 16, 1, 2.0);
        let k = Intrinsics::centered(16.0, 16, 16).unwrap();
        let cfg = FitConfig {
            iters: 0,
            ..Default::default()
        };
        let init = init_gaussians(&image, &depth, &k, &cfg).unwrap();
        let fit = fit_gaussians(&image, &depth, &k, &cfg).unwrap();
        assert_eq!(fit.gaussians, init);
        assert_eq!(init.len(), 16);
        let g = init.gaussians[0];
        assert!((g.opacity() - 0.5).abs() < 1e-12);
        assert_eq!(g.color, Vector3::repeat(0.5));
    }

    #[test]
    fn invalid_depth_is_rejected() {
        let image = Image::filled(8, 8, 3, 0.5);
        let k = Intrinsics::centered(8.0, 8, 8).unwrap();
        let err =
            fit_gaussians(&image, &Image::zeros(8, 8, 1), &k, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn flat_gray_converges() {
        let image = Image::filled(32, 32, 3, 0.5);
        let depth = Image::filled(32, 32, 1, 2.0);
        let k = Intrinsics::centered(32.0, 32, 32).unwrap();
        let cfg = FitConfig {
            iters: 200,
            loss_threshold: 0.0,
            ..Default::default()
        };
        let fit = fit_gaussians(&image, &depth, &k, &cfg).unwrap();
        assert!(fit.final_loss < 0.01, "loss {}", fit.final_loss);
    }

    #[test]
    fn budget_coarsens_the_grid() {
        let image = Image::filled(32, 32, 3, 0.5);
        let depth = Image::filled(32, 32, 1, 2.0);
        let k = Intrinsics::centered(32.0, 32, 32).unwrap();
        let cfg = FitConfig {
            budget: 20,
            ..Default::default()
        };
        let init = init_gaussians(&image, &depth, &k, &cfg).unwrap();
        assert!(init.len() <= 20 && init.len() >= 9);
    }

    #[test]
    fn self_reconstruction() {
        let k = Intrinsics::centered(64.0, 64, 64).unwrap();
        let scene = crate::io::synthetic::random_scene(7, 150, 3.0);
        let out = render(&scene, &CameraPose::identity(), &k);
        let depth = out.normalized_depth(0.5);
        let fit = fit_gaussians(
            &out.color,
            &depth,
            &k,
            &FitConfig {
                loss_threshold: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let back = render(&fit.gaussians, &CameraPose::identity(), &k);
        let p = psnr(&out.color, &back.color).unwrap();
        assert!(p > 30.0, "psnr {p}");
    }
}
