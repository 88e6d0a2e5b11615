//! Random Gaussian scenes rendered along known camera paths.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::dataset::{Frame, SequenceDataset};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Quaternion};
use crate::image::DepthMap;
use crate::losses::FeatureMap;
use crate::splat::{logit, render, Gaussian, GaussianSet};

/// Alpha below which a rendered pixel is treated as background.
pub const SURFACE_ALPHA: f64 = 0.5;
pub const FREQ_LO: f64 = 0.7;
pub const FREQ_HI: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Cameras on a circle around the scene centre, looking inwards.
    Orbit,
    /// Constant sideways step with a constant yaw.
    Dolly,
    /// Independent random axis and direction per step.
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneLayout {
    /// Gaussians filling a ball in front of the first camera.
    Volume,
    /// Flat Gaussians tiling a lumpy closed surface, inside an enclosure.
    Shell,
    /// A dense fronto-parallel sheet of flat Gaussians.
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub gaussians: usize,
    /// Extra Gaussians tiling an enclosure around the scene (shell layout).
    pub backdrop: usize,
    pub trajectory: TrajectoryKind,
    pub layout: SceneLayout,
    pub frames: usize,
    /// Per-step rotation in degrees.
    pub rotation_deg: f64,
    /// Per-step translation in scene units. Orbits derive it from the angle.
    pub translation: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub feature_channels: usize,
    /// Distance from the first camera to the scene centre.
    pub depth: f64,
    /// Insert a held-out frame midway between consecutive training frames.
    pub holdout: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            gaussians: 300,
            backdrop: 2000,
            trajectory: TrajectoryKind::Orbit,
            layout: SceneLayout::Shell,
            frames: 10,
            rotation_deg: 8.0,
            translation: 0.1,
            width: 64,
            height: 64,
            focal: 64.0,
            feature_channels: 8,
            depth: 3.0,
            holdout: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "synthetic image size must be even and positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "rotation magnitude must be >= 0, got {}",
                self.rotation_deg
            )));
        }
        if !(self.translation >= 0.0 && self.translation.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "translation magnitude must be >= 0, got {}",
                self.translation
            )));
        }
        if self.frames < 2 {
            return Err(Error::InvalidInput(
                "a synthetic sequence needs at least 2 frames".into(),
            ));
        }
        if self.gaussians == 0 || self.feature_channels == 0 {
            return Err(Error::InvalidInput(
                "gaussian and feature channel counts must be positive".into(),
            ));
        }
        if !(self.focal > 0.0 && self.depth > 0.0) {
            return Err(Error::InvalidInput(
                "focal length and scene depth must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::centered(self.focal, self.width, self.height)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub dataset: SequenceDataset,
    pub scene: GaussianSet,
    pub features: FeatureField,
}

/// Random Fourier features of world position, identical for every view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    frequencies: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

impl FeatureField {
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let mut frequencies = Vec::with_capacity(channels);
        let mut phases = Vec::with_capacity(channels);
        for _ in 0..channels {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let mag = rng.random_range(FREQ_LO..FREQ_HI);
            frequencies.push(Vector3::from(dir) * mag);
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self {
            frequencies,
            phases,
        }
    }

    pub fn channels(&self) -> usize {
        self.frequencies.len()
    }

    pub fn eval(&self, x: &Vector3<f64>, c: usize) -> f64 {
        (self.frequencies[c].dot(x) + self.phases[c]).sin()
    }

    /// Features of the visible surface: zero wherever `depth` is invalid.
    pub fn render(&self, depth: &DepthMap, pose: &CameraPose, k: &Intrinsics) -> FeatureMap {
        let points: Vec<Option<Vector3<f64>>> = (0..depth.height())
            .flat_map(|y| (0..depth.width()).map(move |x| (x, y)))
            .map(|(x, y)| {
                let d = depth.get(x, y, 0);
                (d > 0.0)
                    .then(|| {
                        k.unproject(&nalgebra::Vector2::new(x as f64, y as f64), d)
                            .ok()
                    })
                    .flatten()
                    .map(|p| pose.transform_point(&p))
            })
            .collect();
        let w = depth.width();
        FeatureMap::from_fn(
            w,
            depth.height(),
            self.channels(),
            |x, y, c| match &points[y * w + x] {
                Some(p) => self.eval(p, c),
                None => 0.0,
            },
        )
    }
}

fn smooth_color(
    x: &Vector3<f64>,
    field: &[(Vector3<f64>, f64)],
    rng: &mut impl Rng,
) -> Vector3<f64> {
    Vector3::from_fn(|c, _| {
        let (w, p) = &field[c];
        (0.5 + 0.35 * (w.dot(x) + p).sin() + rng.random_range(-0.1..0.1)).clamp(0.05, 0.95)
    })
}

fn color_field(rng: &mut impl Rng) -> Vec<(Vector3<f64>, f64)> {
    (0..3)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            (
                Vector3::from(dir) * rng.random_range(1.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> Quaternion {
    let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    Quaternion::from_array(v)
        .normalize()
        .unwrap_or(Quaternion::IDENTITY)
}

fn volume_scene(n: usize, depth: f64, rng: &mut impl Rng) -> GaussianSet {
    let centre = Vector3::new(0.0, 0.0, depth);
    let radius = depth / 3.0;
    let colors = color_field(rng);
    let gaussians = (0..n)
        .map(|_| {
            let dir: [f64; 3] = UnitSphere.sample(rng);
            let r = radius * rng.random::<f64>().cbrt();
            let center = centre + Vector3::from(dir) * r;
            let scale = Vector3::from_fn(|_, _| radius * rng.random_range(0.05..0.14));
            Gaussian {
                center,
                scale,
                rotation: random_rotation(rng),
                opacity_logit: logit(rng.random_range(0.6..0.95)),
                color: smooth_color(&(center - centre), &colors, rng),
            }
        })
        .collect();
    GaussianSet::new(gaussians)
}

/// Low-order radial bumps that make a sphere lumpy and asymmetric.
struct Lumps {
    dirs: Vec<(Vector3<f64>, f64, f64)>,
}

impl Lumps {
    fn random(amplitude: f64, rng: &mut impl Rng) -> Self {
        let dirs = (0..4)
            .map(|_| {
                let d: [f64; 3] = UnitSphere.sample(rng);
                (
                    Vector3::from(d) * rng.random_range(1.0..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude,
                )
            })
            .collect();
        Self { dirs }
    }

    fn radius(&self, u: &Vector3<f64>) -> f64 {
        1.0 + self
            .dirs
            .iter()
            .map(|(w, p, a)| a * (w.dot(u) + p).sin())
            .sum::<f64>()
    }
}

/// Flat Gaussians tiling a sphere of radius `radius * lumps(u)` around
/// `centre`, each aligned with the sphere's radial direction.
fn tile_sphere(
    n: usize,
    centre: Vector3<f64>,
    radius: f64,
    lumps: &Lumps,
    colors: &[(Vector3<f64>, f64)],
    rng: &mut impl Rng,
) -> Vec<Gaussian> {
    let spacing = radius * (4.0 * std::f64::consts::PI / n as f64).sqrt();
    (0..n)
        .map(|i| {
            // Fibonacci lattice for even coverage.
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let r = (1.0 - z * z).sqrt();
            let normal = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let center = centre + normal * radius * lumps.radius(&normal);
            let s = spacing * rng.random_range(0.55..0.75);
            let align = nalgebra::Rotation3::rotation_between(&Vector3::z(), &normal).map_or(
                nalgebra::Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
                |r| r.into_inner(),
            );
            let spin = Quaternion::from_axis_angle(
                &Vector3::z(),
                rng.random_range(0.0..std::f64::consts::PI),
            );
            Gaussian {
                center,
                scale: Vector3::new(s, s * rng.random_range(0.7..1.0), s * 0.1),
                rotation: Quaternion::from_matrix(&align).mul(&spin),
                opacity_logit: logit(rng.random_range(0.85..0.95)),
                color: smooth_color(&(center - centre), colors, rng),
            }
        })
        .collect()
}

/// A lumpy closed surface around the scene centre, optionally inside a
/// textured enclosure so that no view sees empty background.
fn shell_scene(n: usize, backdrop: usize, depth: f64, rng: &mut impl Rng) -> GaussianSet {
    let centre = Vector3::new(0.0, 0.0, depth);
    let radius = depth / 3.0;
    let colors = color_field(rng);
    let lumps = Lumps::random(0.08, rng);
    let mut gaussians = tile_sphere(n, centre, radius, &lumps, &colors, rng);
    if backdrop > 0 {
        let far = Lumps::random(0.05, rng);
        let colors = color_field(rng);
        gaussians.extend(tile_sphere(
            backdrop,
            centre,
            2.5 * depth,
            &far,
            &colors,
            rng,
        ));
    }
    GaussianSet::new(gaussians)
}

/// A jittered grid of thin Gaussians on the plane `z = depth`, wide enough
/// to fill the view of a camera at the origin with focal/size of about one.
fn plane_scene(n: usize, depth: f64, rng: &mut impl Rng) -> GaussianSet {
    let side = (n as f64).sqrt().ceil().max(2.0) as usize;
    let half = depth * 0.8;
    let spacing = 2.0 * half / (side - 1) as f64;
    let colors = color_field(rng);
    let mut gaussians = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let center = Vector3::new(
                -half + spacing * i as f64,
                -half + spacing * j as f64,
                depth,
            );
            let s = spacing * rng.random_range(0.6..0.8);
            gaussians.push(Gaussian {
                center,
                scale: Vector3::new(s, s * rng.random_range(0.7..1.0), spacing * 0.02),
                rotation: Quaternion::from_axis_angle(
                    &Vector3::z(),
                    rng.random_range(0.0..std::f64::consts::PI),
                ),
                opacity_logit: logit(0.95),
                color: smooth_color(&center, &colors, rng),
            });
        }
    }
    GaussianSet::new(gaussians)
}

/// `n` random anisotropic Gaussians in a ball centred `depth` units in
/// front of the identity camera.
pub fn random_scene(seed: u64, n: usize, depth: f64) -> GaussianSet {
    volume_scene(n, depth, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn half_step(t: &CameraPose) -> CameraPose {
    let q = t.rotation;
    let angle = q.angle();
    let v = Vector3::new(q.x, q.y, q.z);
    let half = if v.norm() > 0.0 {
        Quaternion::from_axis_angle(&(v.normalize() * q.w.signum()), angle / 2.0)
    } else {
        Quaternion::IDENTITY
    };
    CameraPose {
        rotation: half,
        translation: t.translation / 2.0,
    }
}

/// Camera poses for `2m - 1` slots: even slots are training frames, odd
/// slots sit midway between them.
fn trajectory(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<CameraPose> {
    let theta = spec.rotation_deg.to_radians();
    let m = spec.frames;
    match spec.trajectory {
        TrajectoryKind::Orbit => {
            let centre = Vector3::new(0.0, 0.0, spec.depth);
            (0..2 * m - 1)
                .map(|s| {
                    let a = theta * s as f64 / 2.0;
                    let rotation = Quaternion::from_axis_angle(&Vector3::y(), -a);
                    let translation = centre + spec.depth * Vector3::new(a.sin(), 0.0, -a.cos());
                    CameraPose {
                        rotation,
                        translation,
                    }
                })
                .collect()
        }
        TrajectoryKind::Dolly | TrajectoryKind::RandomWalk => {
            let mut poses = vec![CameraPose::identity()];
            for _ in 1..m {
                let step = if spec.trajectory == TrajectoryKind::Dolly {
                    CameraPose {
                        rotation: Quaternion::from_axis_angle(&Vector3::y(), theta),
                        translation: Vector3::new(spec.translation, 0.0, 0.0),
                    }
                } else {
                    let axis: [f64; 3] = UnitSphere.sample(rng);
                    let dir: [f64; 3] = UnitSphere.sample(rng);
                    CameraPose {
                        rotation: Quaternion::from_axis_angle(&Vector3::from(axis), theta),
                        translation: Vector3::from(dir) * spec.translation,
                    }
                };
                let last = *poses.last().unwrap();
                poses.push(last.compose(&half_step(&step)));
                poses.push(last.compose(&step));
            }
            poses
        }
    }
}

/// Builds the scene, renders every frame under its ground-truth pose and
/// attaches exact depth and features.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = match spec.layout {
        SceneLayout::Volume => volume_scene(spec.gaussians, spec.depth, &mut rng),
        SceneLayout::Shell => shell_scene(spec.gaussians, spec.backdrop, spec.depth, &mut rng),
        SceneLayout::Plane => plane_scene(spec.gaussians, spec.depth, &mut rng),
    };
    let features = FeatureField::random(spec.feature_channels, &mut rng);
    let poses = trajectory(spec, &mut rng);
    let mut frames = Vec::new();
    for (slot, pose) in poses.iter().enumerate() {
        let holdout = slot % 2 == 1;
        if holdout && !spec.holdout {
            continue;
        }
        let out = render(&scene, pose, &k);
        let depth = out.normalized_depth(SURFACE_ALPHA);
        let feats = features.render(&depth, pose, &k);
        frames.push(Frame {
            index: slot,
            image: out.color,
            depth: Some(depth),
            features: Some(feats),
            gt_pose: Some(*pose),
            holdout,
        });
    }
    let mut metadata = serde_json::Map::new();
    metadata.insert(
        "synthetic".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    let dataset = SequenceDataset {
        intrinsics: k,
        frames,
        metadata,
    };
    dataset.validate()?;
    Ok(SyntheticScene {
        dataset,
        scene,
        features,
    })
}
