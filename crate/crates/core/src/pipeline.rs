//! Sequential pose estimation over an image sequence.
//!
//! Each training frame gets its own Gaussian set fitted in its camera frame.
//! For every adjacent pair the relative transform is initialized from sparse
//! feature matches and then refined against the next image with the fitted
//! set frozen. Poses accumulate as `P_{i+1} = P_i T_i` from `P_0 = I`.

use serde::{Deserialize, Serialize};

use crate::correspondence::{
    best_buddies, init_relative_pose, reprojection_residual, saliency_mask, InitConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{relative_pose, CameraPose, Intrinsics, RelativeTransform};
use crate::image::{DepthMap, Image};
use crate::io::dataset::SequenceDataset;
use crate::losses::{
    feature_reprojection_loss_masked, photometric_loss_with_gradient, FeatureMap, LossWeights,
};
use crate::metrics::{ate, psnr, reprojection_error, rpe, ssim, Rpe, Trajectory};
use crate::optim::{cosine_decay, Adam};
use crate::splat::{
    fit_gaussians, FitConfig, GaussianGradients, GaussianSet, Rasterizer, RenderAdjoint,
    RenderGradients,
};
use crate::wavelet::{frequency_loss, FrequencyBranch, FrequencyConfig};

/// Alpha below which rendered depth is not trusted for reprojection.
pub const DEPTH_MIN_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    pub iters: usize,
    pub lr: f64,
    pub lr_end: f64,
    /// Multiply the translation learning rate by the median depth of the
    /// frozen set, so both blocks move the image at a similar rate.
    pub depth_scaled_translation: bool,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 1e-3,
            lr_end: 1e-5,
            depth_scaled_translation: true,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidInput(
                "pose iterations must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_end > 0.0) {
            return Err(Error::InvalidInput(
                "pose learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fit: FitConfig,
    pub init: InitConfig,
    /// Skip correspondence initialization and start every pair at identity.
    pub use_init: bool,
    pub pose: PoseConfig,
    pub loss: LossWeights,
    pub freq: FrequencyConfig,
    /// Test-time pose prediction, photometric loss only.
    pub test: PoseConfig,
    /// Keep the per-iteration loss trace in the report.
    pub trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fit: FitConfig::default(),
            init: InitConfig::default(),
            use_init: true,
            pose: PoseConfig::default(),
            loss: LossWeights::default(),
            freq: FrequencyConfig::default(),
            test: PoseConfig::default(),
            trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.pose.validate()?;
        self.test.validate()?;
        self.loss.validate()?;
        self.freq.validate()?;
        if self.fit.iters == 0 || self.init.iters == 0 {
            return Err(Error::InvalidInput(
                "iteration counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss values at one pose-stage iteration. Terms with zero weight are not
/// evaluated and read as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub feat: f64,
    pub freq: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub n: usize,
    pub losses: LossTerms,
    pub branch: FrequencyBranch,
    pub high_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub transform: RelativeTransform,
    pub trace: Vec<TraceEntry>,
    /// Losses at the returned transform.
    pub final_losses: LossTerms,
}

/// Inputs of one pose-stage optimization, all on the pixel grid of `k`.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs<'a> {
    pub target: &'a Image,
    pub features_i: Option<&'a FeatureMap>,
    pub features_next: Option<&'a FeatureMap>,
    /// Depth rendered from the frozen set of frame `i`.
    pub depth_i: &'a DepthMap,
}

/// Value and gradients of the weighted pose objective at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub terms: LossTerms,
    pub branch: FrequencyBranch,
    pub high_weight: f64,
    /// With respect to the raw pose parameters `[qw, qx, qy, qz, tx, ty, tz]`.
    pub pose: [f64; 7],
    /// With respect to the Gaussians of the frozen set.
    pub gaussians: GaussianGradients,
    /// Pixels that entered the feature term, if it was evaluated.
    pub feature_valid: Option<usize>,
}

/// Total loss of rendering `set` under the relative pose `params` against
/// `input`, at anneal iteration `n`.
pub fn total_loss(
    set: &GaussianSet,
    k: &Intrinsics,
    input: &PairInputs,
    params: &[f64; 7],
    n: usize,
    weights: &LossWeights,
    freq: &FrequencyConfig,
) -> Result<TotalLoss> {
    let pose = CameraPose::from_params(params);
    let raster = Rasterizer::new(set, &pose, k);
    let out = raster.forward();
    let (rgb, mut adjoint) =
        photometric_loss_with_gradient(input.target, &out.color, weights.lambda_dssim)?;
    adjoint
        .data_mut()
        .iter_mut()
        .for_each(|g| *g *= weights.lambda0);
    let mut terms = LossTerms {
        rgb,
        feat: 0.0,
        freq: 0.0,
        total: weights.lambda0 * rgb,
    };
    let (mut branch, mut high_weight) = (freq.schedule.branch(n), freq.schedule.weight(n));
    if weights.lambda2 > 0.0 {
        let fl = frequency_loss(input.target, &out.color, n, freq)?;
        for (a, g) in adjoint.data_mut().iter_mut().zip(fl.grad.data()) {
            *a += weights.lambda2 * g;
        }
        terms.freq = fl.value;
        terms.total += weights.lambda2 * fl.value;
        branch = fl.branch;
        high_weight = fl.high_weight;
    }
    let RenderGradients {
        gaussians,
        pose: mut grad,
    } = raster.backward(&RenderAdjoint {
        color: Some(adjoint),
        ..Default::default()
    });
    let mut feature_valid = None;
    if weights.lambda1 > 0.0 {
        if let (Some(fi), Some(fj)) = (input.features_i, input.features_next) {
            let visible = out.normalized_depth(DEPTH_MIN_ALPHA);
            let fl =
                feature_reprojection_loss_masked(fi, fj, input.depth_i, k, &pose, Some(&visible))?;
            for (g, f) in grad.iter_mut().zip(fl.grad) {
                *g += weights.lambda1 * f;
            }
            terms.feat = fl.value;
            terms.total += weights.lambda1 * fl.value;
            feature_valid = Some(fl.valid);
        }
    }
    if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "pose objective is not finite at iteration {n}"
        )));
    }
    Ok(TotalLoss {
        terms,
        branch,
        high_weight,
        pose: grad,
        gaussians,
        feature_valid,
    })
}

/// Median camera-space depth of the Gaussian centres in front of the camera.
fn median_depth(set: &GaussianSet) -> f64 {
    let mut z: Vec<f64> = set
        .iter()
        .map(|g| g.center.z)
        .filter(|z| *z > 0.0)
        .collect();
    if z.is_empty() {
        return 1.0;
    }
    z.sort_by(f64::total_cmp);
    z[z.len() / 2]
}

/// Refines `t_init` by Adam on the raw pose parameters with `set` frozen.
/// The anneal counter `n` runs from 1 within this call.
pub fn estimate_relative_pose(
    set: &GaussianSet,
    k: &Intrinsics,
    input: &PairInputs,
    t_init: &RelativeTransform,
    weights: &LossWeights,
    freq: &FrequencyConfig,
    cfg: &PoseConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let mut params = t_init.to_params();
    let scale = if cfg.depth_scaled_translation {
        median_depth(set)
    } else {
        1.0
    };
    let mut adam = Adam::new(7);
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let n = it + 1;
        let l = total_loss(set, k, input, &params, n, weights, freq)?;
        trace.push(TraceEntry {
            n,
            losses: l.terms,
            branch: l.branch,
            high_weight: l.high_weight,
        });
        let grad = l.pose;
        let lr = cosine_decay(cfg.lr, cfg.lr_end, it, cfg.iters);
        adam.step(&mut params, &grad, |j| if j < 4 { lr } else { lr * scale });
        let q = CameraPose::from_params(&params).rotation.normalize()?;
        params[..4].copy_from_slice(&q.to_array());
    }
    let final_losses = total_loss(set, k, input, &params, cfg.iters, weights, freq)?.terms;
    Ok(PoseEstimate {
        transform: CameraPose::from_params(&params),
        trace,
        final_losses,
    })
}

/// Photometric-only pose of `target` relative to the camera of `set`,
/// starting from identity.
pub fn predict_relative_pose(
    set: &GaussianSet,
    k: &Intrinsics,
    target: &Image,
    cfg: &PipelineConfig,
) -> Result<RelativeTransform> {
    let weights = LossWeights {
        lambda0: 1.0,
        lambda1: 0.0,
        lambda2: 0.0,
        ..cfg.loss
    };
    let depth = Image::zeros(k.width, k.height, 1);
    let input = PairInputs {
        target,
        features_i: None,
        features_next: None,
        depth_i: &depth,
    };
    Ok(estimate_relative_pose(
        set,
        k,
        &input,
        &CameraPose::identity(),
        &weights,
        &cfg.freq,
        &cfg.test,
    )?
    .transform)
}

/// World pose of a held-out frame, optimized from the pose of the nearest
/// training frame whose fitted set is `set`.
pub fn predict_test_pose(
    set: &GaussianSet,
    nearest: &CameraPose,
    k: &Intrinsics,
    target: &Image,
    cfg: &PipelineConfig,
) -> Result<CameraPose> {
    Ok(nearest.compose(&predict_relative_pose(set, k, target, cfg)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub matches: usize,
    pub used: usize,
    pub fallback: bool,
    pub initial_residual: f64,
    pub final_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub from: usize,
    pub to: usize,
    pub fit_loss: f64,
    pub init: Option<InitSummary>,
    pub iterations: usize,
    pub final_losses: Option<LossTerms>,
    /// Mean correspondence residual in pixels under the estimated transform.
    pub residual_px: Option<f64>,
    /// Mean pixel displacement between reprojecting frame `from` with the
    /// estimated and with the true transform, using the dataset depth.
    pub flow_error_px: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
    /// Stage failure that forced an identity transform.
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceEntry>,
}

/// Everything kept after a sequence run.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub indices: Vec<usize>,
    pub fitted: Vec<GaussianSet>,
    /// Depth rendered from each fitted set in its own camera.
    pub depths: Vec<DepthMap>,
    pub trajectory: Trajectory,
    pub pairs: Vec<PairReport>,
}

impl SequenceState {
    /// Position in the training list of the frame nearest to `index`; ties go
    /// to the earlier frame.
    pub fn nearest(&self, index: usize) -> usize {
        let mut best = 0;
        for (j, &i) in self.indices.iter().enumerate() {
            if i.abs_diff(index) < self.indices[best].abs_diff(index) {
                best = j;
            }
        }
        best
    }
}

fn pair_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Correspondence-based initialization of the pair `(i, i+1)`.
fn initialize(
    fi: &FeatureMap,
    fj: &FeatureMap,
    depth_i: &DepthMap,
    k: &Intrinsics,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(
    RelativeTransform,
    InitSummary,
    Vec<crate::correspondence::Correspondence>,
)> {
    let mi = saliency_mask(fi, cfg.init.saliency_quantile)?;
    let mj = saliency_mask(fj, cfg.init.saliency_quantile)?;
    let cp = best_buddies(fi, fj, &mi, &mj)?;
    let r = init_relative_pose(&cp, depth_i, k, &cfg.init, seed)?;
    let summary = InitSummary {
        matches: cp.len(),
        used: r.used,
        fallback: r.fallback,
        initial_residual: r.initial_residual(),
        final_residual: r.final_residual(),
    };
    Ok((r.transform, summary, cp))
}

/// Per-frame Gaussian sets fitted to the training frames of a dataset.
#[derive(Debug, Clone)]
pub struct FittedFrames {
    pub fitted: Vec<GaussianSet>,
    /// Depth rendered from each fitted set in its own camera.
    pub depths: Vec<DepthMap>,
    pub fit_losses: Vec<f64>,
}

/// Fits one Gaussian set per training frame. Depends only on `cfg.fit`.
pub fn fit_frames(dataset: &SequenceDataset, cfg: &FitConfig) -> Result<FittedFrames> {
    cfg.validate()?;
    dataset.validate()?;
    let k = &dataset.intrinsics;
    let train = dataset.train_frames();
    let mut out = FittedFrames {
        fitted: Vec::with_capacity(train.len()),
        depths: Vec::with_capacity(train.len()),
        fit_losses: Vec::with_capacity(train.len()),
    };
    for f in &train {
        let depth = f
            .depth
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("frame {} has no depth map", f.index)))?;
        let report = fit_gaussians(&f.image, depth, k, cfg)?;
        log::info!(
            "frame {}: fitted {} gaussians, loss {:.5}",
            f.index,
            report.gaussians.len(),
            report.final_loss
        );
        out.depths.push(
            crate::splat::render(&report.gaussians, &CameraPose::identity(), k)
                .normalized_depth(DEPTH_MIN_ALPHA),
        );
        out.fit_losses.push(report.final_loss);
        out.fitted.push(report.gaussians);
    }
    Ok(out)
}

/// Runs fitting, initialization and pose refinement over the training frames.
pub fn run_sequence(dataset: &SequenceDataset, cfg: &PipelineConfig) -> Result<SequenceState> {
    cfg.validate()?;
    let frames = fit_frames(dataset, &cfg.fit)?;
    track(dataset, frames, cfg)
}

/// Initialization and pose refinement of every adjacent training pair
/// against sets fitted beforehand.
pub fn track(
    dataset: &SequenceDataset,
    frames: FittedFrames,
    cfg: &PipelineConfig,
) -> Result<SequenceState> {
    cfg.validate()?;
    dataset.validate()?;
    let k = &dataset.intrinsics;
    let train = dataset.train_frames();
    if frames.fitted.len() != train.len()
        || frames.depths.len() != train.len()
        || frames.fit_losses.len() != train.len()
    {
        return Err(Error::InvalidInput(format!(
            "{} fitted sets for {} training frames",
            frames.fitted.len(),
            train.len()
        )));
    }
    let FittedFrames {
        fitted,
        depths,
        fit_losses,
    } = frames;

    let mut poses = vec![CameraPose::identity()];
    let mut pairs = Vec::with_capacity(train.len() - 1);
    for i in 0..train.len() - 1 {
        let (a, b) = (train[i], train[i + 1]);
        let features = match (&a.features, &b.features) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        };
        let mut report = PairReport {
            from: a.index,
            to: b.index,
            fit_loss: fit_losses[i],
            init: None,
            iterations: 0,
            final_losses: None,
            residual_px: None,
            flow_error_px: None,
            rotation_error_deg: None,
            translation_error: None,
            failure: None,
            trace: Vec::new(),
        };
        let mut t_init = CameraPose::identity();
        let mut matches = Vec::new();
        if let Some((fi, fj)) = features {
            match initialize(fi, fj, &depths[i], k, cfg, pair_seed(cfg.seed, i)) {
                Ok((t, summary, cp)) => {
                    if cfg.use_init {
                        t_init = t;
                    }
                    report.init = Some(summary);
                    matches = cp;
                }
                Err(e) => log::warn!("pair {}-{}: initialization failed: {e}", a.index, b.index),
            }
        }
        let input = PairInputs {
            target: &b.image,
            features_i: features.map(|f| f.0),
            features_next: features.map(|f| f.1),
            depth_i: &depths[i],
        };
        let t = match estimate_relative_pose(
            &fitted[i], k, &input, &t_init, &cfg.loss, &cfg.freq, &cfg.pose,
        ) {
            Ok(est) => {
                report.iterations = est.trace.len();
                report.final_losses = Some(est.final_losses);
                if cfg.trace {
                    report.trace = est.trace;
                }
                est.transform
            }
            Err(e) => {
                log::warn!("pair {}-{}: pose stage failed: {e}", a.index, b.index);
                report.failure = Some(e.to_string());
                CameraPose::identity()
            }
        };
        report.residual_px = reprojection_residual(&matches, &depths[i], k, &t).ok();
        if let (Some(pa), Some(pb)) = (a.gt_pose, b.gt_pose) {
            let gt = relative_pose(&pa, &pb);
            report.flow_error_px = a
                .depth
                .as_ref()
                .and_then(|d| reprojection_error(d, k, &gt, &t).ok());
            let (r, d) = gt.distance(&t);
            report.rotation_error_deg = Some(r.to_degrees());
            report.translation_error = Some(d);
        }
        let next = poses[i].compose(&t);
        poses.push(next);
        pairs.push(report);
    }
    let trajectory = Trajectory::new(train.iter().map(|f| f.index).zip(poses).collect())?;
    Ok(SequenceState {
        indices: train.iter().map(|f| f.index).collect(),
        fitted,
        depths,
        trajectory,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub arc_length: f64,
    pub ate_fraction: f64,
    #[serde(flatten)]
    pub rpe: Rpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestViewReport {
    pub index: usize,
    pub nearest: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_nearest: f64,
    pub ssim_nearest: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub frames: usize,
    pub pairs: Vec<PairReport>,
    pub metrics: Option<PoseMetrics>,
    pub test_views: Vec<TestViewReport>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Trajectory error against the dataset's ground truth, if it has one.
pub fn pose_metrics(
    state: &SequenceState,
    dataset: &SequenceDataset,
) -> Result<Option<PoseMetrics>> {
    let Some(gt) = dataset.ground_truth() else {
        return Ok(None);
    };
    if gt.len() < 3 {
        return Ok(None);
    }
    let arc_length = gt.arc_length();
    let e = ate(&state.trajectory, &gt)?;
    Ok(Some(PoseMetrics {
        ate: e,
        arc_length,
        ate_fraction: if arc_length > 0.0 {
            e / arc_length
        } else {
            0.0
        },
        rpe: rpe(&state.trajectory, &gt)?,
    }))
}

/// Predicts every held-out frame's pose from its nearest training frame and
/// compares the render against rendering from that frame's pose unchanged.
pub fn evaluate_test_views(
    state: &SequenceState,
    dataset: &SequenceDataset,
    cfg: &PipelineConfig,
) -> Result<Vec<TestViewReport>> {
    let k = &dataset.intrinsics;
    let mut out = Vec::new();
    for f in dataset.test_frames() {
        let j = state.nearest(f.index);
        let set = &state.fitted[j];
        let t = predict_relative_pose(set, k, &f.image, cfg)?;
        let recovered = crate::splat::render(set, &t, k).color;
        let unchanged = crate::splat::render(set, &CameraPose::identity(), k).color;
        out.push(TestViewReport {
            index: f.index,
            nearest: state.indices[j],
            psnr: psnr(&f.image, &recovered)?,
            ssim: ssim(&f.image, &recovered)?,
            psnr_nearest: psnr(&f.image, &unchanged)?,
            ssim_nearest: ssim(&f.image, &unchanged)?,
        });
    }
    Ok(out)
}

pub fn build_report(
    state: &SequenceState,
    dataset: &SequenceDataset,
    test_views: Vec<TestViewReport>,
) -> Result<Report> {
    Ok(Report {
        frames: state.indices.len(),
        pairs: state.pairs.clone(),
        metrics: pose_metrics(state, dataset)?,
        test_views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use crate::io::synthetic::{generate_synthetic, SyntheticSpec, TrajectoryKind};
    use crate::splat::render;
    use nalgebra::Vector3;

    fn inputs<'a>(target: &'a Image, depth: &'a DepthMap) -> PairInputs<'a> {
        PairInputs {
            target,
            features_i: None,
            features_next: None,
            depth_i: depth,
        }
    }

    #[test]
    fn static_pair_stays_at_identity_with_zero_loss() {
        let spec = SyntheticSpec {
            rotation_deg: 0.0,
            translation: 0.0,
            frames: 2,
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let (a, b) = (&s.dataset.frames[0], &s.dataset.frames[1]);
        let depth = render(&s.scene, &CameraPose::identity(), &s.dataset.intrinsics)
            .normalized_depth(DEPTH_MIN_ALPHA);
        let input = PairInputs {
            target: &b.image,
            features_i: a.features.as_ref(),
            features_next: b.features.as_ref(),
            depth_i: &depth,
        };
        let before = s.scene.clone();
        let est = estimate_relative_pose(
            &s.scene,
            &s.dataset.intrinsics,
            &input,
            &CameraPose::identity(),
            &LossWeights::default(),
            &FrequencyConfig::default(),
            &PoseConfig {
                iters: 150,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s.scene, before);
        let (r, t) = est.transform.distance(&CameraPose::identity());
        assert!(r < 1e-4 && t < 1e-4, "{r} {t} {:?}", est.final_losses);
        let l = est.final_losses;
        assert!(l.rgb < 1e-4 && l.feat < 1e-4 && l.freq < 1e-4, "{l:?}");
    }

    #[test]
    fn trace_follows_the_anneal_schedule() {
        let spec = SyntheticSpec {
            frames: 2,
            width: 16,
            height: 16,
            focal: 16.0,
            gaussians: 40,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let depth = Image::zeros(16, 16, 1);
        let est = estimate_relative_pose(
            &s.scene,
            &s.dataset.intrinsics,
            &inputs(&s.dataset.frames[1].image, &depth),
            &CameraPose::identity(),
            &LossWeights {
                lambda1: 0.0,
                ..Default::default()
            },
            &FrequencyConfig::default(),
            &PoseConfig {
                iters: 210,
                ..Default::default()
            },
        )
        .unwrap();
        for e in &est.trace {
            let expect = if e.n <= 100 {
                FrequencyBranch::Low
            } else if e.n <= 200 {
                FrequencyBranch::Blend
            } else {
                FrequencyBranch::High
            };
            assert_eq!(e.branch, expect, "n = {}", e.n);
        }
        assert_eq!(est.trace[149].high_weight, 0.5);
    }

    #[test]
    fn test_frame_equal_to_training_frame_keeps_its_pose() {
        let spec = SyntheticSpec {
            frames: 2,
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let k = s.dataset.intrinsics;
        let nearest = CameraPose::new(
            Quaternion::from_axis_angle(&Vector3::x(), 0.1),
            Vector3::new(0.2, 0.0, 0.1),
        )
        .unwrap();
        let image = render(&s.scene, &CameraPose::identity(), &k).color;
        let p =
            predict_test_pose(&s.scene, &nearest, &k, &image, &PipelineConfig::default()).unwrap();
        let (r, t) = p.distance(&nearest);
        assert!(r < 1e-3 && t < 1e-3, "{r} {t}");
    }

    #[test]
    fn recovers_a_small_motion_with_the_true_scene() {
        let spec = SyntheticSpec {
            trajectory: TrajectoryKind::RandomWalk,
            frames: 2,
            rotation_deg: 2.0,
            translation: 0.05,
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let (a, b) = (&s.dataset.frames[0], &s.dataset.frames[1]);
        let depth = a.depth.clone().unwrap();
        let input = PairInputs {
            target: &b.image,
            features_i: a.features.as_ref(),
            features_next: b.features.as_ref(),
            depth_i: &depth,
        };
        let est = estimate_relative_pose(
            &s.scene,
            &s.dataset.intrinsics,
            &input,
            &CameraPose::identity(),
            &LossWeights::default(),
            &FrequencyConfig::default(),
            &PoseConfig::default(),
        )
        .unwrap();
        let gt = relative_pose(&a.gt_pose.unwrap(), &b.gt_pose.unwrap());
        let (r, t) = gt.distance(&est.transform);
        assert!(r.to_degrees() < 0.2 && t < 0.01, "{} {t}", r.to_degrees());
    }

    #[test]
    fn static_sequence_gives_identity_trajectory() {
        let spec = SyntheticSpec {
            rotation_deg: 0.0,
            translation: 0.0,
            frames: 2,
            width: 32,
            height: 32,
            focal: 32.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        let cfg = PipelineConfig {
            fit: FitConfig {
                iters: 50,
                ..Default::default()
            },
            pose: PoseConfig {
                iters: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let state = run_sequence(&s.dataset, &cfg).unwrap();
        for (_, p) in state.trajectory.entries() {
            let (r, t) = p.distance(&CameraPose::identity());
            assert!(r < 1e-3 && t < 1e-3, "{r} {t}");
        }
        assert_eq!(state.trajectory.entries()[0].1, CameraPose::identity());
    }

    #[test]
    fn config_round_trips_through_flat_text() {
        let mut c = PipelineConfig::default();
        c.pose.iters = 17;
        c.freq.weights.hh = 2.5;
        let text = crate::io::config::to_text(&c);
        assert_eq!(
            crate::io::config::apply(&PipelineConfig::default(), &text).unwrap(),
            c
        );
    }
}
