//! Sparse mutual-nearest-neighbour matching on dense features and relative
//! pose initialization from the matches.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, RelativeTransform};
use crate::image::DepthMap;
use crate::losses::FeatureMap;
use crate::optim::exponential_decay;

pub const DEFAULT_SAMPLES: usize = 20;
pub const MIN_PAIRS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl SaliencyMask {
    pub fn all(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }
}

fn norms(f: &FeatureMap) -> Vec<f64> {
    f.data()
        .chunks_exact(f.channels())
        .map(|v| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt())
        .collect()
}

/// Marks locations whose feature norm reaches the `quantile` of all norms;
/// the top `ceil((1 - quantile) N)` locations are kept, plus anything tied
/// with the smallest of them.
pub fn saliency_mask(f: &FeatureMap, quantile: f64) -> Result<SaliencyMask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidInput(format!(
            "saliency quantile must lie in (0, 1), got {quantile}"
        )));
    }
    let n = norms(f);
    let mut sorted = n.clone();
    sorted.sort_by(f64::total_cmp);
    let keep = (((1.0 - quantile) * n.len() as f64).ceil() as usize).clamp(1, n.len());
    let threshold = sorted[n.len() - keep];
    Ok(SaliencyMask {
        width: f.width(),
        height: f.height(),
        mask: n.iter().map(|&v| v >= threshold).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Pixel in frame `i`.
    pub p: Vector2<f64>,
    /// Pixel in frame `i + 1`.
    pub q: Vector2<f64>,
    /// Cosine similarity of the two descriptors.
    pub score: f64,
}

pub type CorrespondenceSet = Vec<Correspondence>;

fn unit_vectors(f: &FeatureMap, idx: &[usize]) -> Vec<Vec<f64>> {
    let c = f.channels();
    idx.iter()
        .map(|&i| {
            let v: Vec<f64> = f.data()[i * c..(i + 1) * c]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.into_iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect()
}

/// Mutually nearest pairs under cosine similarity, restricted to the masked
/// locations. Ties go to the lowest linear index. Pairs are ordered by their
/// location in frame `i`.
pub fn best_buddies(
    f_i: &FeatureMap,
    f_next: &FeatureMap,
    mask_i: &SaliencyMask,
    mask_next: &SaliencyMask,
) -> Result<CorrespondenceSet> {
    if f_i.channels() != f_next.channels() {
        return Err(Error::shape(
            format!("{} channels", f_i.channels()),
            format!("{} channels", f_next.channels()),
        ));
    }
    for (f, m) in [(f_i, mask_i), (f_next, mask_next)] {
        if m.width != f.width() || m.height != f.height() {
            return Err(Error::shape(
                format!("{}x{} mask", f.width(), f.height()),
                format!("{}x{}", m.width, m.height),
            ));
        }
    }
    let ia: Vec<usize> = (0..mask_i.mask.len()).filter(|&i| mask_i.mask[i]).collect();
    let ib: Vec<usize> = (0..mask_next.mask.len())
        .filter(|&i| mask_next.mask[i])
        .collect();
    if ia.is_empty() || ib.is_empty() {
        return Err(Error::InvalidInput(
            "saliency mask selects no locations".into(),
        ));
    }
    let (va, vb) = (unit_vectors(f_i, &ia), unit_vectors(f_next, &ib));
    let mut best_for_a = vec![(f64::NEG_INFINITY, 0usize); ia.len()];
    let mut best_for_b = vec![(f64::NEG_INFINITY, 0usize); ib.len()];
    for (a, x) in va.iter().enumerate() {
        for (b, y) in vb.iter().enumerate() {
            let s: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            if s > best_for_a[a].0 {
                best_for_a[a] = (s, b);
            }
            if s > best_for_b[b].0 {
                best_for_b[b] = (s, a);
            }
        }
    }
    let pixel = |i: usize, w: usize| Vector2::new((i % w) as f64, (i / w) as f64);
    Ok(best_for_a
        .iter()
        .enumerate()
        .filter(|(a, (_, b))| best_for_b[*b].1 == *a)
        .map(|(a, &(s, b))| Correspondence {
            p: pixel(ia[a], f_i.width()),
            q: pixel(ib[b], f_next.width()),
            score: s,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Number of correspondences sampled for the fit.
    pub samples: usize,
    /// Pairs scoring below this are discarded before sampling.
    pub min_score: f64,
    pub saliency_quantile: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr_start: 1e-4,
            lr_end: 1e-5,
            samples: DEFAULT_SAMPLES,
            min_score: 0.6,
            saliency_quantile: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitResult {
    pub transform: RelativeTransform,
    /// Mean pixel residual on the sampled pairs before each step, then after the last.
    pub residuals: Vec<f64>,
    pub used: usize,
    /// Too few usable pairs; `transform` is the identity.
    pub fallback: bool,
}

impl InitResult {
    pub fn initial_residual(&self) -> f64 {
        self.residuals.first().copied().unwrap_or(0.0)
    }

    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }
}

/// A correspondence lifted into camera `i`.
#[derive(Debug, Clone, Copy)]
struct Lifted {
    point: Vector3<f64>,
    target: Vector2<f64>,
}

fn lift(cp: &[Correspondence], depth: &DepthMap, k: &Intrinsics) -> Vec<Lifted> {
    cp.iter()
        .filter_map(|c| {
            let (x, y) = (c.p.x.round(), c.p.y.round());
            if x < 0.0 || y < 0.0 || x >= depth.width() as f64 || y >= depth.height() as f64 {
                return None;
            }
            let d = depth.get(x as usize, y as usize, 0);
            let point = k.unproject(&c.p, d).ok()?;
            Some(Lifted { point, target: c.q })
        })
        .collect()
}

/// Mean pixel distance and its gradient with respect to `[q, t_scaled]`,
/// where the translation is expressed in units of `depth_scale`.
fn residual(
    pts: &[Lifted],
    k: &Intrinsics,
    params: &[f64; 7],
    depth_scale: f64,
    grad: bool,
) -> (f64, [f64; 7]) {
    let pose = pose_from(params, depth_scale);
    let rot = pose.rotation_matrix();
    let rt = rot.transpose();
    let mut sum = 0.0;
    let mut g_rot = Matrix3::zeros();
    let mut g_t = Vector3::zeros();
    let mut count = 0usize;
    for l in pts {
        let rel = l.point - pose.translation;
        let x = rt * rel;
        if !(x.z > 1e-6) {
            // Behind the camera: penalize by the distance to the optical centre.
            sum += (Vector2::new(k.cx, k.cy) - l.target).norm() + 1e3;
            count += 1;
            continue;
        }
        let u = Vector2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy);
        let d = u - l.target;
        let r = d.norm();
        sum += r;
        count += 1;
        if grad && r > 0.0 {
            let (gu, gv) = (d.x / r, d.y / r);
            let g_x = Vector3::new(
                gu * k.fx / x.z,
                gv * k.fy / x.z,
                -(gu * k.fx * x.x + gv * k.fy * x.y) / (x.z * x.z),
            );
            g_rot += rel * g_x.transpose();
            g_t -= rot * g_x;
        }
    }
    let n = count.max(1) as f64;
    let mut g = [0.0; 7];
    if grad {
        let gq = pose.rotation.matrix_vjp(&(g_rot / n));
        g = [
            gq[0],
            gq[1],
            gq[2],
            gq[3],
            g_t.x / n * depth_scale,
            g_t.y / n * depth_scale,
            g_t.z / n * depth_scale,
        ];
    }
    (sum / n, g)
}

fn pose_from(params: &[f64; 7], depth_scale: f64) -> CameraPose {
    let mut p = *params;
    for v in &mut p[4..] {
        *v *= depth_scale;
    }
    let mut pose = CameraPose::from_params(&p);
    pose.rotation = pose.rotation.normalize_or_identity();
    pose
}

/// Mean reprojection distance in pixels of `cp` under `t`.
pub fn reprojection_residual(
    cp: &[Correspondence],
    depth: &DepthMap,
    k: &Intrinsics,
    t: &RelativeTransform,
) -> Result<f64> {
    let pts = lift(cp, depth, k);
    if pts.is_empty() {
        return Err(Error::InvalidInput(
            "no correspondence has valid depth".into(),
        ));
    }
    Ok(residual(&pts, k, &t.to_params(), 1.0, false).0)
}

/// Gradient descent from the identity on the mean reprojection residual of
/// a random sample of the correspondences.
///
/// Translation is optimized in units of the mean sample depth, which puts
/// both parameter blocks on the same pixels-per-unit scale. A step that
/// would raise the residual is halved until it does not, so the residual
/// never increases.
pub fn init_relative_pose(
    cp: &[Correspondence],
    depth_i: &DepthMap,
    k: &Intrinsics,
    cfg: &InitConfig,
    seed: u64,
) -> Result<InitResult> {
    let good: Vec<Correspondence> = cp
        .iter()
        .copied()
        .filter(|c| c.score >= cfg.min_score)
        .collect();
    let lifted = lift(&good, depth_i, k);
    let n = cfg.samples.min(lifted.len());
    if n < MIN_PAIRS {
        log::warn!(
            "only {} usable correspondences; falling back to identity",
            lifted.len()
        );
        return Ok(InitResult {
            transform: CameraPose::identity(),
            residuals: Vec::new(),
            used: n,
            fallback: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, lifted.len(), n).into_vec();
    picks.sort_unstable();
    let pts: Vec<Lifted> = picks.iter().map(|&i| lifted[i]).collect();
    let depth_scale = pts.iter().map(|l| l.point.z).sum::<f64>() / pts.len() as f64;

    let mut params = CameraPose::identity().to_params();
    let (mut current, mut grad) = residual(&pts, k, &params, depth_scale, true);
    let mut residuals = vec![current];
    for it in 0..cfg.iters {
        let lr = exponential_decay(cfg.lr_start, cfg.lr_end, it, cfg.iters);
        let mut step = lr;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = params;
            for (p, g) in trial.iter_mut().zip(&grad) {
                *p -= step * g;
            }
            let qn = trial[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
            trial[..4].iter_mut().for_each(|v| *v /= qn);
            let (r, g) = residual(&pts, k, &trial, depth_scale, true);
            if r <= current {
                accepted = Some((trial, r, g));
                break;
            }
            step *= 0.5;
        }
        if let Some((p, r, g)) = accepted {
            params = p;
            current = r;
            grad = g;
        }
        residuals.push(current);
    }
    if !current.is_finite() {
        return Err(Error::Numerical("pose initialization diverged".into()));
    }
    Ok(InitResult {
        transform: pose_from(&params, depth_scale),
        residuals,
        used: n,
        fallback: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use crate::image::Image;
    use rand::Rng;

    /// Direct mutual-nearest-neighbour search over every location.
    fn brute_force(
        f: &FeatureMap,
        g: &FeatureMap,
        mf: &SaliencyMask,
        mg: &SaliencyMask,
    ) -> Vec<(usize, usize)> {
        let cos = |a: &[f32], b: &[f32]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
            let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                d / (na * nb)
            }
        };
        let loc = |m: &FeatureMap, i: usize| m.vector(i % m.width(), i / m.width()).to_vec();
        let best = |src: &FeatureMap, i: usize, dst: &FeatureMap, md: &SaliencyMask| {
            let mut b = None;
            let mut bs = f64::NEG_INFINITY;
            for j in 0..md.mask.len() {
                if md.mask[j] {
                    let s = cos(&loc(src, i), &loc(dst, j));
                    if s > bs {
                        bs = s;
                        b = Some(j);
                    }
                }
            }
            b.unwrap()
        };
        (0..mf.mask.len())
            .filter(|&i| mf.mask[i])
            .filter_map(|i| {
                let j = best(f, i, g, mg);
                (best(g, j, f, mf) == i).then_some((i, j))
            })
            .collect()
    }

    fn as_indices(cs: &[Correspondence], w_a: usize, w_b: usize) -> Vec<(usize, usize)> {
        cs.iter()
            .map(|c| {
                (
                    c.p.y as usize * w_a + c.p.x as usize,
                    c.q.y as usize * w_b + c.q.x as usize,
                )
            })
            .collect()
    }

    #[test]
    fn saliency_examples() {
        let uniform = FeatureMap::from_fn(4, 4, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        assert_eq!(saliency_mask(&uniform, 0.5).unwrap().count(), 16);
        let spike = FeatureMap::from_fn(5, 4, 2, |x, y, _| {
            if (x, y) == (3, 2) {
                5.0
            } else {
                0.1 * (x + y) as f64
            }
        });
        let m = saliency_mask(&spike, 0.99).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random = FeatureMap::from_fn(9, 7, 4, |_, _, _| rng.random_range(-1.0..1.0));
        for q in [0.1, 0.3, 0.5, 0.77, 0.9] {
            let expected = ((1.0 - q) * 63.0_f64).ceil() as usize;
            assert_eq!(saliency_mask(&random, q).unwrap().count(), expected);
        }
        assert!(saliency_mask(&random, 1.0).is_err());
    }

    #[test]
    fn identical_maps_match_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureMap::from_fn(6, 5, 8, |_, _, _| rng.random_range(-1.0..1.0));
        let m = saliency_mask(&f, 0.5).unwrap();
        let bb = best_buddies(&f, &f, &m, &m).unwrap();
        assert_eq!(bb.len(), m.count());
        for c in &bb {
            assert_eq!(c.p, c.q);
            assert!((c.score - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_built_three_by_three() {
        let a: Vec<f32> = vec![
            1., 0., 0., 1., 1., 1., -1., 0., 0., -1., 1., -1., 2., 1., 1., 2., 0.5, 0.5,
        ];
        let b: Vec<f32> = vec![
            0., 1., 1., 0., -1., -1., 1., 2., 2., 1., 0., -1., 1., 1., -1., 0., 0.5, -0.5,
        ];
        let fa = FeatureMap::new(3, 3, 2, a, false).unwrap();
        let fb = FeatureMap::new(3, 3, 2, b, false).unwrap();
        let m = SaliencyMask::all(3, 3);
        let bb = best_buddies(&fa, &fb, &m, &m).unwrap();
        assert_eq!(as_indices(&bb, 3, 3), brute_force(&fa, &fb, &m, &m));
        assert!(!bb.is_empty());
    }

    #[test]
    fn orthogonal_features_agree_with_oracle() {
        // One-hot descriptors: only locations sharing a channel can match.
        let fa = FeatureMap::from_fn(
            4,
            2,
            8,
            |x, y, c| if c == (x + 4 * y) % 8 { 1.0 } else { 0.0 },
        );
        let fb = FeatureMap::from_fn(
            4,
            2,
            8,
            |x, y, c| if c == (3 * x + y + 1) % 8 { 1.0 } else { 0.0 },
        );
        let m = SaliencyMask::all(4, 2);
        let bb = best_buddies(&fa, &fb, &m, &m).unwrap();
        assert_eq!(as_indices(&bb, 4, 4), brute_force(&fa, &fb, &m, &m));
    }

    #[test]
    fn random_maps_agree_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (w, h, c) = (
                rng.random_range(2..10),
                rng.random_range(2..10),
                rng.random_range(1..8),
            );
            let fa = FeatureMap::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0));
            let fb = FeatureMap::from_fn(w, h, c, |_, _, _| rng.random_range(-1.0..1.0));
            let (ma, mb) = (
                saliency_mask(&fa, 0.4).unwrap(),
                saliency_mask(&fb, 0.3).unwrap(),
            );
            let bb = best_buddies(&fa, &fb, &ma, &mb).unwrap();
            assert_eq!(as_indices(&bb, w, w), brute_force(&fa, &fb, &ma, &mb));
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let f = FeatureMap::from_fn(2, 2, 1, |_, _, _| 1.0);
        let none = SaliencyMask {
            width: 2,
            height: 2,
            mask: vec![false; 4],
        };
        assert!(best_buddies(&f, &f, &none, &SaliencyMask::all(2, 2)).is_err());
    }

    /// Random points in front of camera `i`, matched to their exact
    /// projections in camera `i + 1`.
    fn rig(seed: u64, t: &CameraPose) -> (Vec<Correspondence>, DepthMap, Intrinsics) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Intrinsics::centered(64.0, 64, 64).unwrap();
        let depth = Image::from_fn(64, 64, 1, |_, _, _| rng.random_range(2.5..3.5));
        let mut cp = Vec::new();
        while cp.len() < 40 {
            let p = Vector2::new(
                rng.random_range(8..56) as f64,
                rng.random_range(8..56) as f64,
            );
            let x = k
                .unproject(&p, depth.get(p.x as usize, p.y as usize, 0))
                .unwrap();
            let q = k.project(&t.inverse_transform_point(&x)).unwrap();
            cp.push(Correspondence { p, q, score: 1.0 });
        }
        (cp, depth, k)
    }

    fn five_degree_transform(seed: u64) -> CameraPose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        )
        .normalize();
        CameraPose::new(
            Quaternion::from_axis_angle(&axis, 5f64.to_radians()),
            dir * 0.1,
        )
        .unwrap()
    }

    #[test]
    fn static_rig_stays_at_identity() {
        let (cp, depth, k) = rig(1, &CameraPose::identity());
        let r = init_relative_pose(&cp, &depth, &k, &InitConfig::default(), 0).unwrap();
        let (angle, dist) = r.transform.distance(&CameraPose::identity());
        assert!(angle < 1e-4 && dist < 1e-4);
    }

    #[test]
    fn recovers_known_motion_monotonically() {
        for seed in 0..10 {
            let truth = five_degree_transform(seed);
            let (cp, depth, k) = rig(seed, &truth);
            let r = init_relative_pose(&cp, &depth, &k, &InitConfig::default(), seed).unwrap();
            assert!(!r.fallback);
            assert_eq!(r.used, 20);
            assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]));
            let all = reprojection_residual(&cp, &depth, &k, &r.transform).unwrap();
            assert!(
                r.final_residual() < 0.5 && all < 0.5,
                "seed {seed}: {} / {all}",
                r.final_residual()
            );
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let truth = five_degree_transform(3);
        let (cp, depth, k) = rig(3, &truth);
        let a = init_relative_pose(&cp, &depth, &k, &InitConfig::default(), 42).unwrap();
        let b = init_relative_pose(&cp, &depth, &k, &InitConfig::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_pairs_fall_back() {
        let (cp, depth, k) = rig(4, &CameraPose::identity());
        let r = init_relative_pose(&cp[..3], &depth, &k, &InitConfig::default(), 0).unwrap();
        assert!(r.fallback);
        assert_eq!(r.transform, CameraPose::identity());
        assert_eq!(DEFAULT_SAMPLES, 20);
    }
}
