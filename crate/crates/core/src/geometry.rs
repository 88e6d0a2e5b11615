//! Rigid-body poses, unit quaternions and the pinhole camera.
//!
//! Poses are camera-to-world: a point `x_cam` in camera coordinates maps to
//! `R * x_cam + t` in world coordinates. Cameras are right-handed with +z
//! pointing into the scene, +x to the right and +y down the image.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    /// Rotation vector (axis times angle).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        Self::from_axis_angle(v, v.norm())
    }

    /// Converts an orthonormal matrix with determinant +1.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        // Shepperd's method: pivot on the largest diagonal term.
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize_or_identity()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput(format!("quaternion has norm {n}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub(crate) fn normalize_or_identity(&self) -> Self {
        self.normalize().unwrap_or(Self::IDENTITY)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * other`.
    pub fn mul(&self, o: &Quaternion) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.normalize_or_identity();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        2.0 * v.atan2(q.w.abs())
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        Ok(self.normalize()?.unit_matrix())
    }

    /// Rotation matrix assuming `self` already has unit norm.
    pub(crate) fn unit_matrix(&self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Pulls a gradient with respect to the rotation matrix back to the raw
    /// (unnormalized) quaternion components `[w, x, y, z]`.
    pub fn matrix_vjp(&self, grad: &Matrix3<f64>) -> [f64; 4] {
        let n = self.norm();
        if !(n > 0.0) {
            return [0.0; 4];
        }
        let (w, x, y, z) = (self.w / n, self.x / n, self.y / n, self.z / n);
        let g = |r: usize, c: usize| grad[(r, c)];
        let dw = 2.0
            * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
        let dx = 2.0
            * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
                + z * g(2, 0)
                + w * g(2, 1)
                - 2.0 * x * g(2, 2));
        let dy = 2.0
            * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
                - w * g(2, 0)
                + z * g(2, 1)
                - 2.0 * y * g(2, 2));
        let dz = 2.0
            * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
                + y * g(1, 2)
                + x * g(2, 0)
                + y * g(2, 1));
        // Project out the radial direction killed by normalization.
        let unit = [w, x, y, z];
        let d = [dw, dx, dy, dz];
        let radial: f64 = unit.iter().zip(&d).map(|(u, g)| u * g).sum();
        std::array::from_fn(|i| (d[i] - unit[i] * radial) / n)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

/// Relative motion `T_i = P_i^-1 P_{i+1}` between adjacent cameras. It maps
/// camera-(i+1) coordinates into camera-i coordinates.
pub type RelativeTransform = CameraPose;

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, normalizing the rotation. Quaternions already unit to
    /// within 1e-12 are kept bit-for-bit so that text round trips are exact.
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Result<Self> {
        let n = rotation.norm();
        let rotation = if (n - 1.0).abs() <= 1e-12 {
            rotation
        } else {
            rotation.normalize()?
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: Quaternion::from_matrix(r),
            translation: t,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.normalize_or_identity().unit_matrix()
    }

    /// Rigid composition `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        let rotation = self.rotation.mul(&other.rotation).normalize_or_identity();
        let translation = self.rotation_matrix() * other.translation + self.translation;
        CameraPose {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation_matrix().transpose();
        CameraPose {
            rotation: self.rotation.conjugate().normalize_or_identity(),
            translation: -(rt * self.translation),
        }
    }

    /// Camera coordinates to world coordinates.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// World coordinates to camera coordinates.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix().transpose() * (p - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (radians) and translation norm of `self^-1 * other`.
    pub fn distance(&self, other: &CameraPose) -> (f64, f64) {
        let d = relative_pose(self, other);
        (d.rotation.angle(), d.translation.norm())
    }

    /// Parameter vector `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.rotation;
        let t = self.translation;
        [q.w, q.x, q.y, q.z, t.x, t.y, t.z]
    }

    /// Inverse of [`CameraPose::to_params`]; the quaternion part is kept as
    /// given (the renderer normalizes it internally).
    pub fn from_params(p: &[f64; 7]) -> Self {
        Self {
            rotation: Quaternion::new(p[0], p[1], p[2], p[3]),
            translation: Vector3::new(p[4], p[5], p[6]),
        }
    }

    /// TUM-ordered text line `index tx ty tz qx qy qz qw`.
    pub fn format_line(&self, index: usize) -> String {
        let t = self.translation;
        let q = self.rotation;
        format!(
            "{index} {} {} {} {} {} {} {}",
            t.x, t.y, t.z, q.x, q.y, q.z, q.w
        )
    }

    pub fn parse_line(line: &str) -> Result<(usize, CameraPose)> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::InvalidInput(format!(
                "pose line needs 8 fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let index = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::InvalidInput(format!("bad frame index {:?}: {e}", fields[0])))?;
        let mut v = [0.0; 7];
        for (slot, field) in v.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {field:?}: {e}")))?;
        }
        let pose = CameraPose::new(
            Quaternion::new(v[6], v[3], v[4], v[5]),
            Vector3::new(v[0], v[1], v[2]),
        )?;
        Ok((index, pose))
    }
}

/// `T = a^-1 * b`, so that `a.compose(&T) == b`.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> RelativeTransform {
    a.inverse().compose(b)
}

/// Pinhole intrinsics in pixels. Pixel centres sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centred principal point with equal focal lengths.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depth must be positive, got {depth}"
            )));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Same camera at a different resolution.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arb_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| Quaternion::new(w, x, y, z).normalize().unwrap())
    }

    fn arb_pose() -> impl Strategy<Value = CameraPose> {
        (arb_quat(), -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(q, x, y, z)| CameraPose {
            rotation: q,
            translation: Vector3::new(x, y, z),
        })
    }

    fn assert_pose_eq(a: &CameraPose, b: &CameraPose, tol: f64) {
        assert_relative_eq!(a.translation, b.translation, epsilon = tol);
        assert_relative_eq!(a.rotation_matrix(), b.rotation_matrix(), epsilon = tol);
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        assert_eq!(
            Quaternion::IDENTITY.to_matrix().unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let m = Quaternion::new(h, 0.0, 0.0, h).to_matrix().unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(m, expected, epsilon = 1e-12);
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        assert!(matches!(
            Quaternion::new(0.0, 0.0, 0.0, 0.0).to_matrix(),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn project_examples() {
        let k = Intrinsics::new(64.0, 64.0, 32.0, 32.0, 64, 64).unwrap();
        assert_eq!(
            k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::new(32.0, 32.0)
        );
        assert_eq!(k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap().x, 64.0);
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
        assert_eq!(
            k.unproject(&Vector2::new(32.0, 32.0), 1.0).unwrap(),
            Vector3::new(0.0, 0.0, 1.0)
        );
        assert!(k.unproject(&Vector2::new(3.0, 3.0), 0.0).is_err());
    }

    #[test]
    fn project_unproject_on_pixel_grid() {
        let k = Intrinsics::new(50.0, 55.0, 15.5, 16.0, 32, 32).unwrap();
        for v in 0..32 {
            for u in 0..32 {
                let px = Vector2::new(u as f64, v as f64);
                let back = k.project(&k.unproject(&px, 2.5).unwrap()).unwrap();
                assert_relative_eq!(back, px, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
    }

    #[test]
    fn relative_pose_trivial_cases() {
        let x = CameraPose::new(
            Quaternion::new(0.9, 0.1, -0.3, 0.2),
            Vector3::new(1.0, 2.0, 3.0),
        )
        .unwrap();
        assert_pose_eq(&relative_pose(&CameraPose::identity(), &x), &x, 1e-12);
        assert_pose_eq(&relative_pose(&x, &x), &CameraPose::identity(), 1e-12);
    }

    #[test]
    fn trajectory_line_round_trip() {
        let p = CameraPose::new(
            Quaternion::new(0.3, 0.1, -0.9, 0.2),
            Vector3::new(0.1, -2.5e-7, 3.0),
        )
        .unwrap();
        let line = p.format_line(7);
        let (index, back) = CameraPose::parse_line(&line).unwrap();
        assert_eq!(index, 7);
        assert_eq!(back, p);
        assert!(CameraPose::parse_line("1 2 3").is_err());
    }

    #[test]
    fn matrix_vjp_matches_finite_differences() {
        let q = Quaternion::new(0.7, -0.2, 0.4, 0.9);
        let g = Matrix3::new(0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 0.2, 0.9, -0.4);
        let f = |q: Quaternion| q.to_matrix().unwrap().component_mul(&g).sum();
        let analytic = q.matrix_vjp(&g);
        let eps = 1e-6;
        for i in 0..4 {
            let mut a = q.to_array();
            let mut b = q.to_array();
            a[i] += eps;
            b[i] -= eps;
            let fd = (f(Quaternion::from_array(a)) - f(Quaternion::from_array(b))) / (2.0 * eps);
            assert_relative_eq!(analytic[i], fd, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn rotation_matrices_are_orthonormal(q in arb_quat()) {
            let m = q.to_matrix().unwrap();
            prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn from_matrix_inverts_to_matrix(q in arb_quat()) {
            let back = Quaternion::from_matrix(&q.unit_matrix());
            prop_assert!((back.unit_matrix() - q.unit_matrix()).abs().max() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.to_homogeneous() - r.to_homogeneous()).abs().max() < 1e-9);
        }

        #[test]
        fn compose_matches_homogeneous_product(a in arb_pose(), b in arb_pose()) {
            // Independent route: build 4x4 matrices directly from the quaternion formula.
            let h = |p: &CameraPose| {
                let Quaternion { w, x, y, z } = p.rotation;
                let t = p.translation;
                Matrix4::new(
                    w*w + x*x - y*y - z*z, 2.0*(x*y - w*z), 2.0*(x*z + w*y), t.x,
                    2.0*(x*y + w*z), w*w - x*x + y*y - z*z, 2.0*(y*z - w*x), t.y,
                    2.0*(x*z - w*y), 2.0*(y*z + w*x), w*w - x*x - y*y + z*z, t.z,
                    0.0, 0.0, 0.0, 1.0,
                )
            };
            let via_compose = a.compose(&b).to_homogeneous();
            prop_assert!((via_compose - h(&a) * h(&b)).abs().max() < 1e-9);
        }

        #[test]
        fn pose_times_inverse_is_identity(p in arb_pose()) {
            let e = p.compose(&p.inverse());
            prop_assert!((e.to_homogeneous() - Matrix4::identity()).abs().max() < 1e-9);
            prop_assert!((p.compose(&CameraPose::identity()).to_homogeneous() - p.to_homogeneous()).abs().max() < 1e-12);
        }

        #[test]
        fn relative_pose_round_trips(p in arb_pose(), t in arb_pose()) {
            let next = p.compose(&t);
            let rel = relative_pose(&p, &next);
            prop_assert!((rel.to_homogeneous() - t.to_homogeneous()).abs().max() < 1e-9);
            prop_assert!((p.compose(&rel).to_homogeneous() - next.to_homogeneous()).abs().max() < 1e-9);
        }

        #[test]
        fn unproject_then_project(u in 0.0..64.0f64, v in 0.0..48.0f64, d in 0.05..50.0f64) {
            let k = Intrinsics::new(60.0, 58.0, 31.0, 23.5, 64, 48).unwrap();
            let p = k.unproject(&Vector2::new(u, v), d).unwrap();
            prop_assert!((p.z - d).abs() < 1e-12);
            let px = k.project(&p).unwrap();
            prop_assert!((px - Vector2::new(u, v)).norm() < 1e-9);
            let back = k.unproject(&px, p.z).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
