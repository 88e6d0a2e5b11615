//! Gaussian scene representation and its differentiable splat renderer.

mod fit;
mod format;
mod raster;

pub use fit::{fit_gaussians, init_gaussians, FitConfig, FitReport};
pub use format::{read_gaussians, write_gaussians, GSPT_MAGIC, GSPT_VERSION};
pub use raster::{
    render, render_with_gradients, GaussianGradients, Rasterizer, RenderAdjoint, RenderGradients,
    RenderOutput,
};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::geometry::{CameraPose, Intrinsics, Quaternion};

/// Gaussians closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Gaussians whose projected centre lies outside the image by more than
/// this fraction of the image size on any side are culled. Without it a
/// Gaussian just in front of the camera plane but far off-axis projects to
/// a splat that can cover the whole frame.
pub const FRUSTUM_GUARD: f64 = 0.15;
/// Minimum eigenvalue of a projected covariance, in squared pixels.
pub const COV2D_FLOOR: f64 = 0.1;
/// Upper clamp on per-splat alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Splat support radius in standard deviations. Beyond it the Gaussian
/// contributes less than `exp(-32)`, so truncation introduces no visible
/// discontinuity in the loss.
pub const SUPPORT_SIGMA: f64 = 8.0;

/// Anisotropic 3D Gaussian with a flat (degree-0) colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vector3<f64>,
    pub rotation: Quaternion,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn isotropic(center: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            center,
            scale: Vector3::repeat(scale),
            rotation: Quaternion::IDENTITY,
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.normalize_or_identity().unit_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    /// Parameters in storage order: centre, scale, rotation (w, x, y, z),
    /// opacity logit, colour.
    pub fn to_array(&self) -> [f64; 14] {
        let q = self.rotation;
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.scale.x,
            self.scale.y,
            self.scale.z,
            q.w,
            q.x,
            q.y,
            q.z,
            self.opacity_logit,
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    pub fn from_array(a: &[f64; 14]) -> Self {
        Self {
            center: Vector3::new(a[0], a[1], a[2]),
            scale: Vector3::new(a[3], a[4], a[5]),
            rotation: Quaternion::new(a[6], a[7], a[8], a[9]),
            opacity_logit: a[10],
            color: Vector3::new(a[11], a[12], a[13]),
        }
    }

    /// Same Gaussian expressed in another frame: `pose` maps its current
    /// coordinates into the new ones.
    pub fn transformed(&self, pose: &CameraPose) -> Gaussian {
        Gaussian {
            center: pose.transform_point(&self.center),
            rotation: pose.rotation.mul(&self.rotation),
            ..*self
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ordered collection of Gaussians. Order carries no meaning: the renderer
/// sorts by depth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn transformed(&self, pose: &CameraPose) -> GaussianSet {
        GaussianSet {
            gaussians: self.gaussians.iter().map(|g| g.transformed(pose)).collect(),
        }
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2d {
    pub mean: Vector2<f64>,
    /// Screen-space covariance after the eigenvalue floor.
    pub cov: Matrix2<f64>,
    /// Camera-space z of the centre.
    pub depth: f64,
    pub opacity: f64,
}

/// Projects one Gaussian with the local-affine approximation
/// `J W Sigma W^T J^T`. Returns `None` for Gaussians culled by the near
/// plane or the frustum guard band.
pub fn project_gaussian(g: &Gaussian, pose: &CameraPose, k: &Intrinsics) -> Option<Splat2d> {
    let view = ViewTransform::new(pose);
    Projection::compute(g, &view, k).map(|p| Splat2d {
        mean: p.mean,
        cov: p.cov,
        depth: p.cam.z,
        opacity: p.opacity,
    })
}

/// World-to-camera part of a camera-to-world pose.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ViewTransform {
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
}

impl ViewTransform {
    pub fn new(pose: &CameraPose) -> Self {
        Self {
            rotation: pose.rotation_matrix().transpose(),
            origin: pose.translation,
        }
    }
}

/// Projection intermediates kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Projection {
    pub cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub gauss_rot: Matrix3<f64>,
    pub cov3: Matrix3<f64>,
    pub floor_shift: f64,
    pub cov_raw: Matrix2<f64>,
    pub cov: Matrix2<f64>,
    /// Inverse covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub mean: Vector2<f64>,
    pub opacity: f64,
}

impl Projection {
    pub fn compute(g: &Gaussian, view: &ViewTransform, k: &Intrinsics) -> Option<Projection> {
        let cam = view.rotation * (g.center - view.origin);
        if !(cam.z > NEAR_PLANE) {
            return None;
        }
        let mean = Vector2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy);
        let (w, h) = (k.width as f64, k.height as f64);
        let (gx, gy) = (FRUSTUM_GUARD * w, FRUSTUM_GUARD * h);
        if !(mean.x > -0.5 - gx
            && mean.x < w - 0.5 + gx
            && mean.y > -0.5 - gy
            && mean.y < h - 0.5 + gy)
        {
            return None;
        }
        let q = g.rotation.normalize().ok()?;
        let gauss_rot = q.unit_matrix();
        let s2 = g.scale.component_mul(&g.scale);
        let cov3 = gauss_rot * Matrix3::from_diagonal(&s2) * gauss_rot.transpose();
        let (x, y, z) = (cam.x, cam.y, cam.z);
        let jac = Matrix2x3::new(
            k.fx / z,
            0.0,
            -k.fx * x / (z * z),
            0.0,
            k.fy / z,
            -k.fy * y / (z * z),
        );
        let m = jac * view.rotation;
        let mut cov_raw = m * cov3 * m.transpose();
        // Exact symmetry keeps the renderer invariant to evaluation order.
        let off = 0.5 * (cov_raw[(0, 1)] + cov_raw[(1, 0)]);
        cov_raw[(0, 1)] = off;
        cov_raw[(1, 0)] = off;
        let floor_shift = (COV2D_FLOOR - min_eigenvalue(&cov_raw)).max(0.0);
        let cov = cov_raw + Matrix2::identity() * floor_shift;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
        Some(Projection {
            cam,
            jac,
            gauss_rot,
            cov3,
            floor_shift,
            cov_raw,
            cov,
            conic,
            mean,
            opacity: g.opacity(),
        })
    }
}

pub(crate) fn min_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let half_diff = 0.5 * (a - c);
    0.5 * (a + c) - (half_diff * half_diff + b * b).sqrt()
}

/// Gradient of [`min_eigenvalue`] with respect to `(a, b, c)` where `b` is
/// the (single) off-diagonal value.
pub(crate) fn min_eigenvalue_grad(m: &Matrix2<f64>) -> [f64; 3] {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let half_diff = 0.5 * (a - c);
    let r = (half_diff * half_diff + b * b).sqrt();
    if r < 1e-300 {
        return [0.5, 0.0, 0.5];
    }
    [0.5 - 0.5 * half_diff / r, -b / r, 0.5 + 0.5 * half_diff / r]
}
