//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for bad input or usage, 2 when the numerical method fails.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::correspondence::{best_buddies, saliency_mask};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Quaternion};
use crate::io::config;
use crate::io::formats::{load_png, save_depth_map, save_png, write_text};
use crate::io::markdown::markdown_table;
use crate::io::{generate_synthetic, SequenceDataset, SyntheticSpec};
use crate::metrics::Trajectory;
use crate::pipeline::{
    build_report, evaluate_test_views, pose_metrics, run_sequence, PipelineConfig, SequenceState,
    DEPTH_MIN_ALPHA,
};
use crate::splat::{fit_gaussians, read_gaussians, render, write_gaussians, GaussianSet};
use crate::wavelet::{dwt2, FilterPair};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(
    name = "splatpose",
    version,
    about = "Camera pose estimation with frozen Gaussian splats"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` file, or `default`.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground truth.
    Synth,
    /// Estimate the trajectory of a dataset.
    Fit { dataset: PathBuf },
    /// Compare a trajectory with the dataset's ground truth.
    EvalPose {
        dataset: PathBuf,
        /// Defaults to `<out>/trajectory.txt`.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Predict held-out poses and score their renders.
    EvalNvs {
        dataset: PathBuf,
        /// Output directory of a previous `fit`.
        run: PathBuf,
    },
    /// Fit one frame and render it from a pose relative to its camera.
    Render {
        dataset: PathBuf,
        #[arg(long)]
        frame: usize,
        /// `qw,qx,qy,qz,tx,ty,tz`, camera to source camera.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        pose: Option<Vec<f64>>,
    },
    /// Write the Haar bands of an image.
    DwtDump { image: PathBuf },
    /// Write the mutual nearest feature matches between a frame and the next.
    MatchDump {
        dataset: PathBuf,
        #[arg(long)]
        frame: usize,
    },
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn load_config<T: Serialize + DeserializeOwned>(base: T, source: &str) -> Result<T> {
    if source == "default" {
        return Ok(base);
    }
    let path = Path::new(source);
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    config::apply(&base, &text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Error::InvalidInput("--out <dir> is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = load_config(PipelineConfig::default(), &common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

fn gaussians_path(run: &Path, index: usize) -> PathBuf {
    run.join("gaussians").join(format!("{index:04}.gspt"))
}

fn save_set(path: &Path, set: &GaussianSet) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    write_gaussians(set, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
}

fn load_set(path: &Path) -> Result<GaussianSet> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    read_gaussians(&mut BufReader::new(file))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth => {
            let mut spec = load_config(SyntheticSpec::default(), &common.config)?;
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let out = out_dir(common)?;
            let scene = generate_synthetic(&spec)?;
            scene.dataset.save(&out)?;
            let file = out.join("scene.gspt");
            save_set(&file, &scene.scene)?;
            println!(
                "wrote {} frames to {}",
                scene.dataset.frames.len(),
                out.display()
            );
        }
        Command::Fit { dataset } => {
            let cfg = pipeline_config(common)?;
            let out = out_dir(common)?;
            let ds = SequenceDataset::load(dataset)?;
            let state = run_sequence(&ds, &cfg)?;
            state.trajectory.save(&out.join(TRAJECTORY_FILE))?;
            for (i, set) in state.indices.iter().zip(&state.fitted) {
                save_set(&gaussians_path(&out, *i), set)?;
            }
            let report = build_report(&state, &ds, Vec::new())?;
            write_text(&out.join(REPORT_FILE), &report.to_json())?;
            let rows: Vec<Vec<String>> = report
                .pairs
                .iter()
                .map(|p| {
                    let opt = |v: Option<f64>, digits: usize| {
                        v.map_or("-".to_string(), |x| format!("{x:.digits$}"))
                    };
                    vec![
                        format!("{}-{}", p.from, p.to),
                        opt(p.final_losses.as_ref().map(|l| l.total), 5),
                        opt(p.residual_px, 3),
                        opt(p.rotation_error_deg, 3),
                        opt(p.translation_error, 4),
                    ]
                })
                .collect();
            write_text(
                &out.join("pairs.md"),
                &markdown_table(
                    &["pair", "loss", "residual px", "rot err deg", "trans err"],
                    &rows,
                ),
            )?;
            println!(
                "estimated {} poses, wrote {}",
                state.trajectory.len(),
                out.display()
            );
        }
        Command::EvalPose {
            dataset,
            trajectory,
        } => {
            let out = out_dir(common)?;
            let ds = SequenceDataset::load(dataset)?;
            let path = trajectory
                .clone()
                .unwrap_or_else(|| out.join(TRAJECTORY_FILE));
            let est = Trajectory::load(&path)?;
            let state = SequenceState {
                indices: est.entries().iter().map(|e| e.0).collect(),
                fitted: Vec::new(),
                depths: Vec::new(),
                trajectory: est,
                pairs: Vec::new(),
            };
            let m = pose_metrics(&state, &ds)?.ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{} lacks ground truth for 3 or more frames",
                    dataset.display()
                ))
            })?;
            write_json(&out.join("pose_metrics.json"), &m)?;
            let row = vec![
                format!("{:.5}", m.ate),
                format!("{:.3}", 100.0 * m.ate_fraction),
                format!("{:.4}", m.rpe.translation),
                format!("{:.4}", m.rpe.rotation_deg),
            ];
            write_text(
                &out.join("pose_metrics.md"),
                &markdown_table(&["ATE", "ATE % arc", "RPE_t", "RPE_r deg"], &[row]),
            )?;
            println!(
                "ATE {:.5} ({:.3}% of arc), RPE_t {:.4}, RPE_r {:.4} deg",
                m.ate,
                100.0 * m.ate_fraction,
                m.rpe.translation,
                m.rpe.rotation_deg
            );
        }
        Command::EvalNvs { dataset, run } => {
            let cfg = pipeline_config(common)?;
            let out = out_dir(common)?;
            let ds = SequenceDataset::load(dataset)?;
            let trajectory = Trajectory::load(&run.join(TRAJECTORY_FILE))?;
            let indices: Vec<usize> = trajectory.entries().iter().map(|e| e.0).collect();
            let fitted = indices
                .iter()
                .map(|&i| load_set(&gaussians_path(run, i)))
                .collect::<Result<Vec<_>>>()?;
            let state = SequenceState {
                indices,
                fitted,
                depths: Vec::new(),
                trajectory,
                pairs: Vec::new(),
            };
            let views = evaluate_test_views(&state, &ds, &cfg)?;
            write_json(&out.join("nvs.json"), &views)?;
            let rows: Vec<Vec<String>> = views
                .iter()
                .map(|v| {
                    vec![
                        v.index.to_string(),
                        v.nearest.to_string(),
                        format!("{:.2}", v.psnr),
                        format!("{:.4}", v.ssim),
                        format!("{:.2}", v.psnr_nearest),
                        format!("{:.4}", v.ssim_nearest),
                    ]
                })
                .collect();
            write_text(
                &out.join("nvs.md"),
                &markdown_table(
                    &[
                        "frame",
                        "nearest",
                        "PSNR",
                        "SSIM",
                        "PSNR nearest",
                        "SSIM nearest",
                    ],
                    &rows,
                ),
            )?;
            println!("evaluated {} held-out views", views.len());
        }
        Command::Render {
            dataset,
            frame,
            pose,
        } => {
            let cfg = pipeline_config(common)?;
            let out = out_dir(common)?;
            let ds = SequenceDataset::load(dataset)?;
            let f = ds
                .frames
                .iter()
                .find(|f| f.index == *frame)
                .ok_or_else(|| {
                    Error::InvalidInput(format!("{} has no frame {frame}", dataset.display()))
                })?;
            let depth = f
                .depth
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("frame {frame} has no depth map")))?;
            let pose = match pose {
                Some(p) if p.len() != 7 => {
                    return Err(Error::InvalidInput(format!(
                        "--pose takes 7 comma-separated values, got {}",
                        p.len()
                    )))
                }
                Some(p) => CameraPose::new(
                    Quaternion::new(p[0], p[1], p[2], p[3]),
                    Vector3::new(p[4], p[5], p[6]),
                )?,
                None => CameraPose::identity(),
            };
            let fit = fit_gaussians(&f.image, depth, &ds.intrinsics, &cfg.fit)?;
            let r = render(&fit.gaussians, &pose, &ds.intrinsics);
            save_png(&out.join("color.png"), &r.color)?;
            save_depth_map(
                &out.join("depth.dmap"),
                &r.normalized_depth(DEPTH_MIN_ALPHA),
            )?;
            save_set(&out.join("gaussians.gspt"), &fit.gaussians)?;
            println!(
                "rendered frame {frame} ({} gaussians, fit loss {:.5})",
                fit.gaussians.len(),
                fit.final_loss
            );
        }
        Command::DwtDump { image } => {
            let out = out_dir(common)?;
            let im = load_png(image)?;
            let bands = dwt2(&im, &FilterPair::haar())?;
            let mut energies = serde_json::Map::new();
            for (name, band, offset) in [
                ("ll", &bands.ll, 0.0),
                ("lh", &bands.lh, 0.5),
                ("hl", &bands.hl, 0.5),
                ("hh", &bands.hh, 0.5),
            ] {
                // LL of a [0, 1] image lies in [0, 2].
                let scale = if offset == 0.0 { 0.5 } else { 1.0 };
                save_png(
                    &out.join(format!("{name}.png")),
                    &band.map(|v| (v * scale + offset).clamp(0.0, 1.0)),
                )?;
                energies.insert(
                    name.into(),
                    band.data().iter().map(|v| v * v).sum::<f64>().into(),
                );
            }
            let source: f64 = im.data().iter().map(|v| v * v).sum();
            energies.insert("image".into(), source.into());
            write_json(&out.join("bands.json"), &energies)?;
            println!("wrote bands of {}x{} image", im.width(), im.height());
        }
        Command::MatchDump { dataset, frame } => {
            let cfg = pipeline_config(common)?;
            let out = out_dir(common)?;
            let ds = SequenceDataset::load(dataset)?;
            let train = ds.train_frames();
            let pos = train
                .iter()
                .position(|f| f.index == *frame)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "{} has no training frame {frame}",
                        dataset.display()
                    ))
                })?;
            let next = train.get(pos + 1).ok_or_else(|| {
                Error::InvalidInput(format!("frame {frame} is the last training frame"))
            })?;
            let features = |f: &crate::io::Frame| {
                f.features.clone().ok_or_else(|| {
                    Error::InvalidInput(format!("frame {} has no feature map", f.index))
                })
            };
            let (fa, fb) = (features(train[pos])?, features(next)?);
            let q = cfg.init.saliency_quantile;
            let cp = best_buddies(&fa, &fb, &saliency_mask(&fa, q)?, &saliency_mask(&fb, q)?)?;
            let list: Vec<[f64; 5]> = cp
                .iter()
                .map(|c| [c.p.x, c.p.y, c.q.x, c.q.y, c.score])
                .collect();
            write_json(
                &out.join("matches.json"),
                &serde_json::json!({ "from": frame, "to": next.index, "matches": list }),
            )?;
            println!(
                "{} matches between frames {frame} and {}",
                cp.len(),
                next.index
            );
        }
    }
    Ok(())
}
