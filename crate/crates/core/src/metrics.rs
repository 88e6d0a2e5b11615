//! Image quality and trajectory accuracy metrics.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, CameraPose, Intrinsics, Quaternion, RelativeTransform};
use crate::image::{DepthMap, Image};

pub use crate::losses::ssim;

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::InvalidInput("psnr of an empty image".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Camera poses keyed by strictly increasing frame index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(usize, CameraPose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, CameraPose)>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidInput(format!(
                "trajectory indices must increase strictly ({} then {})",
                w[0].0, w[1].0
            )));
        }
        Ok(Self { entries })
    }

    /// Poses indexed `0..n`.
    pub fn from_poses(poses: Vec<CameraPose>) -> Self {
        Self {
            entries: poses.into_iter().enumerate().collect(),
        }
    }

    pub fn push(&mut self, index: usize, pose: CameraPose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if index <= last {
                return Err(Error::InvalidInput(format!(
                    "frame index {index} does not follow {last}"
                )));
            }
        }
        self.entries.push((index, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, CameraPose)] {
        &self.entries
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.entries.iter().map(|e| e.1).collect()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.1.center()).collect()
    }

    /// Sum of distances between consecutive camera centres.
    pub fn arc_length(&self) -> f64 {
        self.positions()
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# frame tx ty tz qx qy qz qw\n");
        for (i, p) in &self.entries {
            s.push_str(&p.format_line(*i));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            entries.push(CameraPose::parse_line(line)?);
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Applies `x -> s R x + t` to every camera, keeping orientations rigid.
    pub fn transformed(&self, sim: &Similarity) -> Trajectory {
        let q = Quaternion::from_matrix(&sim.rotation);
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(i, p)| {
                    (
                        *i,
                        CameraPose {
                            rotation: q.mul(&p.rotation).normalize_or_identity(),
                            translation: sim.apply(&p.translation),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Least-squares similarity mapping `src` points onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::shape(
            format!("{} points", src.len()),
            format!("{} points", dst.len()),
        ));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "alignment needs at least 3 positions, got {n}"
        )));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let spread = src.iter().map(|s| (s - mu_s).norm()).fold(0.0, f64::max);
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // nalgebra does not promise an order.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if !(var_s > 0.0)
        || sv[order[1]] <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE)
        || spread == 0.0
    {
        return Err(Error::DegenerateGeometry(
            "positions are collinear or coincident".into(),
        ));
    }
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the weakest direction.
        sign[(order[2], order[2])] = -1.0;
        sv[order[2]] = -sv[order[2]];
    }
    let rotation = u * sign * v_t;
    let scale = sv.sum() / var_s;
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Similarity aligning the camera centres of `est` onto those of `gt`.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    check_lengths(est, gt)?;
    umeyama(&est.positions(), &gt.positions())
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::shape(
            format!("{} poses", gt.len()),
            format!("{} poses", est.len()),
        ));
    }
    Ok(())
}

/// Position RMSE after similarity alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let sim = umeyama_align(est, gt)?;
    let (pe, pg) = (est.positions(), gt.positions());
    let sq: f64 = pe
        .iter()
        .zip(&pg)
        .map(|(e, g)| (sim.apply(e) - g).norm_squared())
        .sum();
    Ok((sq / pe.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rpe {
    /// Mean translation error of the per-step error motion, times 100.
    pub translation: f64,
    /// Mean rotation angle of the per-step error motion, in degrees.
    pub rotation_deg: f64,
}

/// Relative pose error over adjacent pairs.
pub fn rpe(est: &Trajectory, gt: &Trajectory) -> Result<Rpe> {
    check_lengths(est, gt)?;
    if est.len() < 2 {
        return Err(Error::InvalidInput(
            "relative pose error needs at least 2 poses".into(),
        ));
    }
    let (pe, pg) = (est.poses(), gt.poses());
    let mut t = 0.0;
    let mut r = 0.0;
    for i in 0..pe.len() - 1 {
        let e = relative_pose(&pg[i], &pg[i + 1])
            .inverse()
            .compose(&relative_pose(&pe[i], &pe[i + 1]));
        t += e.translation.norm();
        r += e.rotation.angle();
    }
    let n = (pe.len() - 1) as f64;
    Ok(Rpe {
        translation: 100.0 * t / n,
        rotation_deg: (r / n).to_degrees(),
    })
}

/// Mean pixel distance between the images of each valid-depth pixel of
/// camera `i` under two relative transforms `a` and `b` (both mapping camera
/// `i + 1` coordinates into camera `i`).
pub fn reprojection_error(
    depth: &DepthMap,
    k: &Intrinsics,
    a: &RelativeTransform,
    b: &RelativeTransform,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y, 0);
            if !(d > 0.0) {
                continue;
            }
            let p = k.unproject(&Vector2::new(x as f64, y as f64), d)?;
            if let (Ok(u), Ok(v)) = (
                k.project(&a.inverse_transform_point(&p)),
                k.project(&b.inverse_transform_point(&p)),
            ) {
                sum += (u - v).norm();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "no pixel with valid depth projects under both transforms".into(),
        ));
    }
    Ok(sum / n as f64)
}
