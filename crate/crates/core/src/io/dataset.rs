//! Image sequences on disk: a JSON manifest next to PNG images, depth maps,
//! feature maps and ground-truth poses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::formats::{
    load_depth_map, load_feature_map, load_png, save_depth_map, save_feature_map, save_png,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Quaternion};
use crate::image::{DepthMap, Image};
use crate::losses::FeatureMap;
use crate::metrics::Trajectory;

pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: Image,
    pub depth: Option<DepthMap>,
    pub features: Option<FeatureMap>,
    pub gt_pose: Option<CameraPose>,
    /// Held out from pose estimation and used for novel-view evaluation.
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    intrinsics: IntrinsicsEntry,
    frames: Vec<FrameEntry>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsEntry {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    index: usize,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    /// `[qw, qx, qy, qz, tx, ty, tz]`, camera to world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<[f64; 7]>,
    #[serde(default)]
    holdout: bool,
}

impl SequenceDataset {
    pub fn train_frames(&self) -> Vec<&Frame> {
        self.frames.iter().filter(|f| !f.holdout).collect()
    }

    pub fn test_frames(&self) -> Vec<&Frame> {
        self.frames.iter().filter(|f| f.holdout).collect()
    }

    /// Ground truth of the training frames, if every one has it.
    pub fn ground_truth(&self) -> Option<Trajectory> {
        let train = self.train_frames();
        let poses: Option<Vec<(usize, CameraPose)>> = train
            .iter()
            .map(|f| f.gt_pose.map(|p| (f.index, p)))
            .collect();
        poses.and_then(|p| Trajectory::new(p).ok())
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        k.validate()?;
        if k.width % 2 != 0 || k.height % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be even, got {}x{}",
                k.width, k.height
            )));
        }
        if self.train_frames().len() < 2 {
            return Err(Error::InvalidInput(
                "a sequence needs at least 2 training frames".into(),
            ));
        }
        for w in self.frames.windows(2) {
            if w[1].index <= w[0].index {
                return Err(Error::InvalidInput(format!(
                    "frame indices must increase ({} then {})",
                    w[0].index, w[1].index
                )));
            }
        }
        for f in &self.frames {
            let expect = |im: &Image, c: usize, what: &str| {
                if im.width() != k.width || im.height() != k.height || im.channels() != c {
                    Err(Error::shape(
                        format!("{}x{}x{c} {what} for frame {}", k.width, k.height, f.index),
                        im.shape_string(),
                    ))
                } else {
                    Ok(())
                }
            };
            expect(&f.image, 3, "image")?;
            if let Some(d) = &f.depth {
                expect(d, 1, "depth")?;
            }
        }
        Ok(())
    }

    /// Reads a dataset directory. Feature maps are resampled to the image
    /// grid at load time.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        let ie = &m.intrinsics;
        let intrinsics = Intrinsics::new(ie.fx, ie.fy, ie.cx, ie.cy, ie.width, ie.height)?;
        let mut frames = Vec::with_capacity(m.frames.len());
        for fe in &m.frames {
            let image = load_png(&dir.join(&fe.image))?;
            let depth = fe
                .depth
                .as_ref()
                .map(|p| load_depth_map(&dir.join(p)))
                .transpose()?;
            let features = fe
                .features
                .as_ref()
                .map(|p| {
                    load_feature_map(&dir.join(p)).map(|f| f.resized(image.width(), image.height()))
                })
                .transpose()?;
            let gt_pose = fe
                .pose
                .map(|p| {
                    CameraPose::new(
                        Quaternion::new(p[0], p[1], p[2], p[3]),
                        nalgebra::Vector3::new(p[4], p[5], p[6]),
                    )
                })
                .transpose()?;
            frames.push(Frame {
                index: fe.index,
                image,
                depth,
                features,
                gt_pose,
                holdout: fe.holdout,
            });
        }
        let ds = SequenceDataset {
            intrinsics,
            frames,
            metadata: m.metadata,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes images as 8-bit PNG, so a reload quantizes colours.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "depth", "features"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let image = format!("images/{:04}.png", f.index);
            save_png(&dir.join(&image), &f.image)?;
            let depth = f
                .depth
                .as_ref()
                .map(|d| {
                    let p = format!("depth/{:04}.dmap", f.index);
                    save_depth_map(&dir.join(&p), d).map(|_| p)
                })
                .transpose()?;
            let features = f
                .features
                .as_ref()
                .map(|m| {
                    let p = format!("features/{:04}.fmap", f.index);
                    save_feature_map(&dir.join(&p), m).map(|_| p)
                })
                .transpose()?;
            entries.push(FrameEntry {
                index: f.index,
                image,
                depth,
                features,
                pose: f.gt_pose.map(|p| p.to_params()),
                holdout: f.holdout,
            });
        }
        let k = &self.intrinsics;
        let m = Manifest {
            intrinsics: IntrinsicsEntry {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                width: k.width,
                height: k.height,
            },
            frames: entries,
            metadata: self.metadata.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        super::formats::write_text(&path, &(text + "\n"))?;
        if let Some(gt) = self.ground_truth() {
            gt.save(&dir.join("groundtruth.txt"))?;
        }
        Ok(())
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }
}
