//! Reader for the KITTI odometry layout:
//!
//! ```text
//! root/poses/<seq>.txt               one 3×4 row-major pose of camera 0 per line
//! root/sequences/<seq>/calib.txt     projection matrices P0..P3
//! root/sequences/<seq>/image_2/*.png left color camera
//! root/sequences/<seq>/image_3/*.png right color camera
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use scalenet_core::geometry::{offset_trajectory, CameraId, CameraModel, PoseSE3, RigidTransform, Trajectory};

use crate::error::{Context, Error, Result};
use crate::manifest::{DatasetManifest, FrameRecord, Origin, Split};

const TRAIN: [&str; 8] = ["01", "03", "04", "05", "06", "07", "09", "10"];
const TEST: [&str; 3] = ["00", "02", "08"];

/// Training and test sequence ids.
pub fn kitti_split_presets() -> (Vec<&'static str>, Vec<&'static str>) {
    (TRAIN.to_vec(), TEST.to_vec())
}

fn image_dir(camera: CameraId) -> &'static str {
    match camera {
        CameraId::Left => "image_2",
        CameraId::Right => "image_3",
    }
}

fn projection_key(camera: CameraId) -> &'static str {
    match camera {
        CameraId::Left => "P2",
        CameraId::Right => "P3",
    }
}

/// Row-major 3×4 projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection(pub [f64; 12]);

impl Projection {
    fn intrinsics(&self) -> Matrix3<f64> {
        let p = &self.0;
        Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10])
    }

    /// Camera center relative to the reference camera: `-K⁻¹ p₄`.
    pub fn center_offset(&self) -> Result<Vector3<f64>> {
        let k_inv = self.intrinsics().try_inverse().ok_or_else(|| Error::data("singular projection matrix"))?;
        let p = &self.0;
        Ok(-(k_inv * Vector3::new(p[3], p[7], p[11])))
    }

    pub fn camera_model(&self, size: (usize, usize)) -> Result<CameraModel> {
        let p = &self.0;
        Ok(CameraModel::new(p[0], p[5], (p[2], p[6]), size)?)
    }
}

pub fn read_calibration(path: &Path, key: &str) -> Result<Projection> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    for (k, line) in text.lines().enumerate() {
        let Some((name, values)) = line.split_once(':') else {
            continue;
        };
        if name.trim() != key {
            continue;
        }
        let nums: Vec<f64> = values
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), k + 1)))?;
        let arr: [f64; 12] = nums
            .try_into()
            .map_err(|v: Vec<f64>| Error::data(format!("{}:{}: expected 12 values, found {}", path.display(), k + 1, v.len())))?;
        return Ok(Projection(arr));
    }
    Err(Error::data(format!("{}: no entry `{key}`", path.display())))
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .enumerate()
        .map(|(frame, (line, l))| {
            let bad = |msg: String| Error::data(format!("{}:{}: {msg}", path.display(), line + 1));
            let nums: Vec<f64> = l.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|e| bad(format!("{e}")))?;
            if nums.len() != 12 {
                return Err(bad(format!("expected 12 values, found {}", nums.len())));
            }
            PoseSE3::from_row_major_3x4(&nums, frame as u64).map_err(|e| bad(e.to_string()))
        })
        .collect()
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads the given sequences. Poses of each color camera are the camera-0
/// poses offset by that camera's center from the calibration.
pub fn read_kitti(root: &Path, sequence_ids: &[&str], cameras: &BTreeSet<CameraId>, split: Split) -> Result<DatasetManifest> {
    let mut frames = Vec::new();
    for &seq in sequence_ids {
        let pose_path = root.join("poses").join(format!("{seq}.txt"));
        if !pose_path.is_file() {
            return Err(Error::data(format!("sequence {seq}: no ground-truth poses at {}", pose_path.display())));
        }
        let seq_dir = root.join("sequences").join(seq);
        let base = Trajectory::new(seq, CameraId::Left, read_poses(&pose_path)?).context(format!("sequence {seq}"))?;
        for &camera in cameras {
            let images = list_images(&seq_dir.join(image_dir(camera)))?;
            if images.len() != base.len() {
                return Err(Error::data(format!(
                    "sequence {seq}: {} images in {} but {} poses",
                    images.len(),
                    image_dir(camera),
                    base.len()
                )));
            }
            let proj = read_calibration(&seq_dir.join("calib.txt"), projection_key(camera))?;
            let (w, h) = image::image_dimensions(&images[0]).map_err(|e| Error::data(format!("{}: {e}", images[0].display())))?;
            let model = proj.camera_model((w as usize, h as usize))?;
            let c = proj.center_offset()?;
            let traj = offset_trajectory(&base, &RigidTransform::from_translation(c.x, c.y, c.z))?;
            for (pose, path) in traj.poses.iter().zip(images) {
                frames.push(FrameRecord {
                    sequence_id: seq.to_string(),
                    camera_id: camera,
                    frame_index: pose.frame_index,
                    image_path: path.to_string_lossy().into_owned(),
                    pose: pose.to_row_major_3x4(),
                    timestamp: None,
                    source_camera: model,
                    weather_tag: None,
                    map_tag: None,
                });
            }
        }
    }
    Ok(DatasetManifest::new(split, Origin::Kitti, frames))
}
