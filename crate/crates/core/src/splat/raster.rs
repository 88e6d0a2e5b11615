//! Exact per-pixel front-to-back compositing with a global depth sort, and
//! its reverse-mode derivative.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use super::{
    min_eigenvalue_grad, GaussianSet, Projection, ViewTransform, ALPHA_MAX, SUPPORT_SIGMA,
};
use crate::geometry::{CameraPose, Intrinsics};
use crate::image::{DepthMap, Image};

/// Colour, expected depth and accumulated alpha of a render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: DepthMap,
    pub alpha: Image,
}

impl RenderOutput {
    /// Depth divided by accumulated alpha; pixels with alpha below
    /// `min_alpha` are marked invalid (0).
    pub fn normalized_depth(&self, min_alpha: f64) -> DepthMap {
        let mut out = self.depth.clone();
        for (d, &a) in out.data_mut().iter_mut().zip(self.alpha.data()) {
            *d = if a >= min_alpha && a > 0.0 {
                *d / a
            } else {
                0.0
            };
        }
        out
    }
}

/// Per-pixel adjoints of a scalar loss with respect to the render outputs.
/// Missing images mean the loss does not depend on that output.
#[derive(Debug, Clone, Default)]
pub struct RenderAdjoint {
    pub color: Option<Image>,
    pub depth: Option<Image>,
    pub alpha: Option<Image>,
}

/// Gradients with respect to every Gaussian parameter, indexed like the input set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub center: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    /// With respect to the raw quaternion `[w, x, y, z]`.
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    /// Gradient of Gaussian `i` in [`super::Gaussian::to_array`] order.
    pub fn to_array(&self, i: usize) -> [f64; 14] {
        let (c, s, q, o, col) = (
            self.center[i],
            self.scale[i],
            self.rotation[i],
            self.opacity_logit[i],
            self.color[i],
        );
        [
            c.x, c.y, c.z, s.x, s.y, s.z, q[0], q[1], q[2], q[3], o, col.x, col.y, col.z,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub gaussians: GaussianGradients,
    /// With respect to `[qw, qx, qy, qz, tx, ty, tz]` of the camera pose.
    pub pose: [f64; 7],
}

/// Render of `set` seen from the camera-to-world `pose`.
pub fn render(set: &GaussianSet, pose: &CameraPose, k: &Intrinsics) -> RenderOutput {
    Rasterizer::new(set, pose, k).forward()
}

/// Reverse-mode gradients of a loss whose output adjoints are `adjoint`.
pub fn render_with_gradients(
    set: &GaussianSet,
    pose: &CameraPose,
    k: &Intrinsics,
    adjoint: &RenderAdjoint,
) -> RenderGradients {
    Rasterizer::new(set, pose, k).backward(adjoint)
}

/// Screen-space splat in compositing order.
#[derive(Debug, Clone, Copy)]
struct Splat {
    source: usize,
    mx: f64,
    my: f64,
    a: f64,
    b: f64,
    c: f64,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    x0: usize,
    x1: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

/// Projected and depth-sorted scene for one camera, reusable across a
/// forward and a backward pass.
pub struct Rasterizer<'a> {
    set: &'a GaussianSet,
    pose: CameraPose,
    view: ViewTransform,
    k: Intrinsics,
    projections: Vec<Option<Projection>>,
    splats: Vec<Splat>,
    /// For each image row, indices into `splats` (ascending, i.e. front to back).
    rows: Vec<Vec<u32>>,
}

impl<'a> Rasterizer<'a> {
    pub fn new(set: &'a GaussianSet, pose: &CameraPose, k: &Intrinsics) -> Self {
        let view = ViewTransform::new(pose);
        let projections: Vec<Option<Projection>> = set
            .gaussians
            .iter()
            .map(|g| Projection::compute(g, &view, k))
            .collect();

        let mut order: Vec<usize> = (0..set.len())
            .filter(|&i| projections[i].is_some())
            .collect();
        // Ties on depth fall back to the parameter bits so that input order never matters.
        order.sort_by(|&i, &j| {
            let di = projections[i].as_ref().map_or(0.0, |p| p.cam.z);
            let dj = projections[j].as_ref().map_or(0.0, |p| p.cam.z);
            di.total_cmp(&dj).then_with(|| {
                let (a, b) = (set.gaussians[i].to_array(), set.gaussians[j].to_array());
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
        });

        let (w, h) = (k.width, k.height);
        let mut splats = Vec::with_capacity(order.len());
        let mut rows = vec![Vec::new(); h];
        for &i in &order {
            let p = projections[i].as_ref().unwrap();
            let rx = SUPPORT_SIGMA * p.cov[(0, 0)].sqrt();
            let ry = SUPPORT_SIGMA * p.cov[(1, 1)].sqrt();
            let Some((x0, x1)) = pixel_span(p.mean.x - rx, p.mean.x + rx, w) else {
                continue;
            };
            let Some((y0, y1)) = pixel_span(p.mean.y - ry, p.mean.y + ry, h) else {
                continue;
            };
            let g = &set.gaussians[i];
            let idx = splats.len() as u32;
            splats.push(Splat {
                source: i,
                mx: p.mean.x,
                my: p.mean.y,
                a: p.conic[0],
                b: p.conic[1],
                c: p.conic[2],
                opacity: p.opacity,
                color: [g.color.x, g.color.y, g.color.z],
                depth: p.cam.z,
                x0,
                x1,
            });
            for row in &mut rows[y0..=y1] {
                row.push(idx);
            }
        }
        Self {
            set,
            pose: *pose,
            view,
            k: *k,
            projections,
            splats,
            rows,
        }
    }

    pub fn forward(&self) -> RenderOutput {
        let (w, h) = (self.k.width, self.k.height);
        let mut color = Image::zeros(w, h, 3);
        let mut depth = Image::zeros(w, h, 1);
        let mut alpha = Image::zeros(w, h, 1);
        for y in 0..h {
            let row = &self.rows[y];
            let py = y as f64;
            for x in 0..w {
                let px = x as f64;
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut d = 0.0;
                for &si in row {
                    let s = &self.splats[si as usize];
                    if x < s.x0 || x > s.x1 {
                        continue;
                    }
                    let Some((al, _, _)) = splat_alpha(s, px, py) else {
                        continue;
                    };
                    let wgt = al * t;
                    c[0] += s.color[0] * wgt;
                    c[1] += s.color[1] * wgt;
                    c[2] += s.color[2] * wgt;
                    d += s.depth * wgt;
                    t *= 1.0 - al;
                }
                let ci = color.index(x, y, 0);
                color.data_mut()[ci..ci + 3].copy_from_slice(&c);
                depth.set(x, y, 0, d);
                alpha.set(x, y, 0, 1.0 - t);
            }
        }
        RenderOutput {
            color,
            depth,
            alpha,
        }
    }

    pub fn backward(&self, adjoint: &RenderAdjoint) -> RenderGradients {
        let (w, h) = (self.k.width, self.k.height);
        let mut grads = vec![SplatGrad::default(); self.splats.len()];
        // (splat index, alpha, gaussian falloff, clamped, transmittance before)
        let mut stack: Vec<(u32, f64, f64, bool, f64)> = Vec::new();
        for y in 0..h {
            let row = &self.rows[y];
            let py = y as f64;
            for x in 0..w {
                let gc = adjoint.color.as_ref().map_or([0.0; 3], |im| {
                    let p = im.pixel(x, y);
                    [p[0], p[1], p[2]]
                });
                let gd = adjoint.depth.as_ref().map_or(0.0, |im| im.get(x, y, 0));
                let ga = adjoint.alpha.as_ref().map_or(0.0, |im| im.get(x, y, 0));
                if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 {
                    continue;
                }
                let px = x as f64;
                stack.clear();
                let mut t = 1.0;
                for &si in row {
                    let s = &self.splats[si as usize];
                    if x < s.x0 || x > s.x1 {
                        continue;
                    }
                    let Some((al, falloff, clamped)) = splat_alpha(s, px, py) else {
                        continue;
                    };
                    stack.push((si, al, falloff, clamped, t));
                    t *= 1.0 - al;
                }
                // Composites of everything behind the current splat.
                let mut rc = [0.0; 3];
                let mut rd = 0.0;
                let mut ra = 0.0;
                for &(si, al, falloff, clamped, t) in stack.iter().rev() {
                    let s = &self.splats[si as usize];
                    let g = &mut grads[si as usize];
                    let wgt = al * t;
                    for ch in 0..3 {
                        g.color[ch] += gc[ch] * wgt;
                    }
                    g.depth += gd * wgt;
                    let dalpha = t
                        * (gc[0] * (s.color[0] - rc[0])
                            + gc[1] * (s.color[1] - rc[1])
                            + gc[2] * (s.color[2] - rc[2])
                            + gd * (s.depth - rd)
                            + ga * (1.0 - ra));
                    for ch in 0..3 {
                        rc[ch] = s.color[ch] * al + (1.0 - al) * rc[ch];
                    }
                    rd = s.depth * al + (1.0 - al) * rd;
                    ra = al + (1.0 - al) * ra;
                    if clamped {
                        continue;
                    }
                    g.opacity += dalpha * falloff;
                    let dm = dalpha * (-0.5 * al);
                    let (dx, dy) = (px - s.mx, py - s.my);
                    g.mean[0] += dm * (-2.0 * (s.a * dx + s.b * dy));
                    g.mean[1] += dm * (-2.0 * (s.b * dx + s.c * dy));
                    g.conic[0] += dm * dx * dx;
                    g.conic[1] += dm * 2.0 * dx * dy;
                    g.conic[2] += dm * dy * dy;
                }
            }
        }
        self.chain(&grads)
    }

    /// Chains screen-space splat gradients back to Gaussian and pose parameters.
    fn chain(&self, grads: &[SplatGrad]) -> RenderGradients {
        let n = self.set.len();
        let mut out = GaussianGradients::zeros(n);
        let mut g_view_rot = Matrix3::zeros();
        let mut g_origin = Vector3::zeros();
        let k = &self.k;
        let w_rot = self.view.rotation;

        for (splat, g) in self.splats.iter().zip(grads) {
            let i = splat.source;
            let gauss = &self.set.gaussians[i];
            let p = self.projections[i].as_ref().unwrap();

            let o = p.opacity;
            out.opacity_logit[i] = g.opacity * o * (1.0 - o);
            out.color[i] = Vector3::new(g.color[0], g.color[1], g.color[2]);

            // conic = inverse(cov); cov = [[A, B], [B, C]].
            let (ca, cb, cc) = (p.cov[(0, 0)], p.cov[(0, 1)], p.cov[(1, 1)]);
            let det = ca * cc - cb * cb;
            let det2 = det * det;
            let [ga, gb, gc] = g.conic;
            let mut g_cov = [
                ga * (-cc * cc / det2) + gb * (cb * cc / det2) + gc * (-cb * cb / det2),
                ga * (2.0 * cb * cc / det2)
                    + gb * (-(ca * cc + cb * cb) / det2)
                    + gc * (2.0 * ca * cb / det2),
                ga * (-cb * cb / det2) + gb * (ca * cb / det2) + gc * (-ca * ca / det2),
            ];
            if p.floor_shift > 0.0 {
                // cov = cov_raw + (floor - lambda_min(cov_raw)) I
                let trace_grad = g_cov[0] + g_cov[2];
                let dl = min_eigenvalue_grad(&p.cov_raw);
                for (gv, d) in g_cov.iter_mut().zip(dl) {
                    *gv -= trace_grad * d;
                }
            }
            let g2 = Matrix2::new(g_cov[0], 0.5 * g_cov[1], 0.5 * g_cov[1], g_cov[2]);

            let m = p.jac * w_rot;
            let g_cov3 = m.transpose() * g2 * m;
            let g_m = 2.0 * g2 * m * p.cov3;
            let g_jac = g_m * w_rot.transpose();
            let mut g_w = p.jac.transpose() * g_m;

            let (x, y, z) = (p.cam.x, p.cam.y, p.cam.z);
            let (fx, fy) = (k.fx, k.fy);
            let (gmx, gmy) = (g.mean[0], g.mean[1]);
            let z2 = z * z;
            let z3 = z2 * z;
            let mut g_cam = Vector3::new(
                gmx * fx / z - g_jac[(0, 2)] * fx / z2,
                gmy * fy / z - g_jac[(1, 2)] * fy / z2,
                -gmx * fx * x / z2 - gmy * fy * y / z2 + g.depth,
            );
            g_cam.z += -g_jac[(0, 0)] * fx / z2 + g_jac[(0, 2)] * 2.0 * fx * x / z3
                - g_jac[(1, 1)] * fy / z2
                + g_jac[(1, 2)] * 2.0 * fy * y / z3;

            let rel = gauss.center - self.view.origin;
            g_w += g_cam * rel.transpose();
            let g_center = w_rot.transpose() * g_cam;
            out.center[i] = g_center;
            g_origin -= g_center;
            g_view_rot += g_w;

            let r = p.gauss_rot;
            let s = gauss.scale;
            let s2 = Matrix3::from_diagonal(&s.component_mul(&s));
            let g_r = 2.0 * g_cov3 * r * s2;
            let local = r.transpose() * g_cov3 * r;
            out.scale[i] = Vector3::new(
                2.0 * s.x * local[(0, 0)],
                2.0 * s.y * local[(1, 1)],
                2.0 * s.z * local[(2, 2)],
            );
            out.rotation[i] = gauss.rotation.matrix_vjp(&g_r);
        }

        // view rotation = R_pose^T
        let gq = self.pose.rotation.matrix_vjp(&g_view_rot.transpose());
        let pose = [
            gq[0], gq[1], gq[2], gq[3], g_origin.x, g_origin.y, g_origin.z,
        ];
        RenderGradients {
            gaussians: out,
            pose,
        }
    }

    /// Camera-space depth order of the drawn splats (for diagnostics and tests).
    pub fn draw_order(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.source).collect()
    }

    pub fn mean_of(&self, i: usize) -> Option<Vector2<f64>> {
        self.projections
            .get(i)
            .and_then(|p| p.as_ref())
            .map(|p| p.mean)
    }
}

/// Inclusive integer pixel range covering `[lo, hi]` clipped to `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if !(hi >= 0.0) || !(lo <= (n - 1) as f64) {
        return None;
    }
    let a = lo.max(0.0).ceil() as usize;
    let b = (hi.min((n - 1) as f64).floor() as usize).min(n - 1);
    (a <= b).then_some((a, b))
}

/// Alpha of splat `s` at pixel `(px, py)`: `(alpha, falloff, clamped)`.
#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, bool)> {
    let dx = px - s.mx;
    let dy = py - s.my;
    let m = s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy;
    if m > SUPPORT_SIGMA * SUPPORT_SIGMA {
        return None;
    }
    let falloff = (-0.5 * m).exp();
    let a = s.opacity * falloff;
    if a > ALPHA_MAX {
        Some((ALPHA_MAX, falloff, true))
    } else {
        Some((a, falloff, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use crate::splat::Gaussian;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(n: usize) -> Intrinsics {
        Intrinsics::centered(n as f64, n, n).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        let gaussians = (0..n)
            .map(|_| Gaussian {
                center: Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(2.5..4.0),
                ),
                scale: Vector3::new(
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                ),
                rotation: Quaternion::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                opacity_logit: rng.random_range(-2.0..1.0),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
            })
            .collect();
        GaussianSet::new(gaussians)
    }

    #[test]
    fn empty_set_renders_black() {
        let out = render(&GaussianSet::default(), &CameraPose::identity(), &camera(8));
        assert!(out.color.data().iter().all(|&v| v == 0.0));
        assert!(out.alpha.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_at_its_mean() {
        let k = camera(16);
        let g = Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.2,
            0.7,
            Vector3::new(0.2, 0.5, 0.9),
        );
        let out = render(&GaussianSet::new(vec![g]), &CameraPose::identity(), &k);
        let o = g.opacity();
        for c in 0..3 {
            assert_relative_eq!(out.color.get(8, 8, c), o * g.color[c], epsilon = 1e-12);
        }
        assert_relative_eq!(out.depth.get(8, 8, 0), o * 2.0, epsilon = 1e-12);
        assert_relative_eq!(out.alpha.get(8, 8, 0), o, epsilon = 1e-12);
    }

    #[test]
    fn two_gaussians_composite_front_to_back() {
        let k = camera(16);
        let front = Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.2,
            0.6,
            Vector3::new(1.0, 0.0, 0.0),
        );
        let back = Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 3.0),
            0.3,
            0.8,
            Vector3::new(0.0, 1.0, 0.0),
        );
        // Listed back first: the renderer must sort.
        let out = render(
            &GaussianSet::new(vec![back, front]),
            &CameraPose::identity(),
            &k,
        );
        let (a1, a2) = (front.opacity(), back.opacity());
        assert_relative_eq!(out.color.get(8, 8, 0), a1, epsilon = 1e-12);
        assert_relative_eq!(out.color.get(8, 8, 1), a2 * (1.0 - a1), epsilon = 1e-12);
        assert_relative_eq!(
            out.depth.get(8, 8, 0),
            2.0 * a1 + 3.0 * a2 * (1.0 - a1),
            epsilon = 1e-12
        );
    }

    #[test]
    fn opacity_is_clamped() {
        let k = camera(16);
        let g = Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.2,
            0.999,
            Vector3::new(1.0, 1.0, 1.0),
        );
        let out = render(&GaussianSet::new(vec![g]), &CameraPose::identity(), &k);
        assert_relative_eq!(out.alpha.get(8, 8, 0), ALPHA_MAX, epsilon = 1e-15);
    }

    #[test]
    fn permutation_invariance_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 40);
        let k = camera(32);
        let pose = CameraPose::identity();
        let reference = render(&set, &pose, &k);
        let mut shuffled = set.clone();
        shuffled.gaussians.reverse();
        shuffled.gaussians.swap(3, 17);
        assert_eq!(render(&shuffled, &pose, &k), reference);
    }

    #[test]
    fn adding_a_gaussian_never_decreases_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = random_set(&mut rng, 10);
        let k = camera(24);
        let before = render(&set, &CameraPose::identity(), &k).alpha;
        set.gaussians.extend(random_set(&mut rng, 1).gaussians);
        let after = render(&set, &CameraPose::identity(), &k).alpha;
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!(*b >= *a - 1e-15);
            assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn pose_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 25);
        let k = camera(32);
        let pose = CameraPose::new(
            Quaternion::new(0.99, 0.03, -0.05, 0.02),
            Vector3::new(0.05, -0.1, 0.2),
        )
        .unwrap();
        let a = render(&set, &pose, &k);
        let b = render(
            &set.transformed(&pose.inverse()),
            &CameraPose::identity(),
            &k,
        );
        for (x, y) in a.color.data().iter().zip(b.color.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.depth.data().iter().zip(b.depth.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn culled_gaussian_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut set = random_set(&mut rng, 5);
        set.gaussians.push(Gaussian::isotropic(
            Vector3::new(0.0, 0.0, -2.0),
            0.2,
            0.5,
            Vector3::new(1.0, 1.0, 1.0),
        ));
        let k = camera(16);
        let adj = RenderAdjoint {
            color: Some(Image::filled(16, 16, 3, 1.0)),
            ..Default::default()
        };
        let g = render_with_gradients(&set, &CameraPose::identity(), &k, &adj);
        assert_eq!(g.gaussians.to_array(5), [0.0; 14]);
    }

    fn weighted_loss(out: &RenderOutput, wc: &Image, wd: &Image) -> f64 {
        out.color
            .data()
            .iter()
            .zip(wc.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + out
                .depth
                .data()
                .iter()
                .zip(wd.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    #[test]
    fn opacity_gradient_matches_central_difference() {
        let k = camera(16);
        let g = Gaussian::isotropic(
            Vector3::new(0.1, -0.05, 2.0),
            0.25,
            0.4,
            Vector3::new(0.3, 0.6, 0.2),
        );
        let set = GaussianSet::new(vec![g]);
        let ones = Image::filled(16, 16, 3, 1.0);
        let adj = RenderAdjoint {
            color: Some(ones.clone()),
            ..Default::default()
        };
        let grad = render_with_gradients(&set, &CameraPose::identity(), &k, &adj);
        let loss = |logit: f64| {
            let mut s = set.clone();
            s.gaussians[0].opacity_logit = logit;
            render(&s, &CameraPose::identity(), &k)
                .color
                .data()
                .iter()
                .sum::<f64>()
        };
        let eps = 1e-4;
        let fd = (loss(g.opacity_logit + eps) - loss(g.opacity_logit - eps)) / (2.0 * eps);
        assert!((grad.gaussians.opacity_logit[0] - fd).abs() <= 1e-3 * fd.abs());
    }

    #[test]
    fn all_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = camera(24);
        for _ in 0..5 {
            let set = random_set(&mut rng, 8);
            let pose = CameraPose::new(
                Quaternion::new(
                    1.0,
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                ),
            )
            .unwrap();
            let wc = Image::from_fn(24, 24, 3, |_, _, _| rng.random_range(-1.0..1.0));
            let wd = Image::from_fn(24, 24, 1, |_, _, _| rng.random_range(-1.0..1.0));
            let adj = RenderAdjoint {
                color: Some(wc.clone()),
                depth: Some(wd.clone()),
                alpha: None,
            };
            let grad = render_with_gradients(&set, &pose, &k, &adj);
            let eps = 1e-4;
            for gi in 0..set.len() {
                let analytic = grad.gaussians.to_array(gi);
                for pi in 0..14 {
                    let eval = |delta: f64| {
                        let mut s = set.clone();
                        let mut a = s.gaussians[gi].to_array();
                        a[pi] += delta;
                        s.gaussians[gi] = Gaussian::from_array(&a);
                        weighted_loss(&render(&s, &pose, &k), &wc, &wd)
                    };
                    let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                    let err = (analytic[pi] - fd).abs();
                    assert!(
                        err <= 1e-3 * fd.abs().max(analytic[pi].abs()).max(1e-4),
                        "g{gi} p{pi}: {} vs {fd}",
                        analytic[pi]
                    );
                }
            }
            let params = pose.to_params();
            for pi in 0..7 {
                let eval = |delta: f64| {
                    let mut p = params;
                    p[pi] += delta;
                    weighted_loss(&render(&set, &CameraPose::from_params(&p), &k), &wc, &wd)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (grad.pose[pi] - fd).abs();
                assert!(
                    err <= 1e-3 * fd.abs().max(1e-4),
                    "pose {pi}: {} vs {fd}",
                    grad.pose[pi]
                );
            }
        }
    }
}
