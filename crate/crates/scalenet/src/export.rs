//! The simulator-export directory format.
//!
//! ```text
//! root/
//!   meta.json
//!   episodes/<episode>/poses.csv
//!   episodes/<episode>/images/<camera>/<frame:06>.png
//! ```
//!
//! `poses.csv` has one row per frame and camera with a row-major
//! camera-to-world rotation and the camera center in meters. Floats are
//! written in shortest round-trip form, so reading an export back gives the
//! exact values that were written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scalenet_core::geometry::{CameraId, CameraModel, RigidTransform};

use crate::error::{Context, Error, Result};
use crate::manifest::{DatasetManifest, FrameRecord, Origin, Split};

pub const EXPORT_VERSION: u32 = 1;

const POSE_HEADER: [&str; 16] = [
    "frame_index",
    "camera_id",
    "timestamp",
    "r00",
    "r01",
    "r02",
    "r10",
    "r11",
    "r12",
    "r20",
    "r21",
    "r22",
    "tx",
    "ty",
    "tz",
    "weather_tag",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraModel> for Intrinsics {
    fn from(c: &CameraModel) -> Self {
        Self {
            fx: c.focal_x,
            fy: c.focal_y,
            cx: c.principal_point.0,
            cy: c.principal_point.1,
            width: c.width(),
            height: c.height(),
        }
    }
}

impl Intrinsics {
    pub fn camera_model(&self) -> Result<CameraModel> {
        Ok(CameraModel::new(self.fx, self.fy, (self.cx, self.cy), (self.width, self.height))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub format_version: u32,
    pub map_tag: String,
    pub camera_models: BTreeMap<CameraId, Intrinsics>,
    /// Vehicle-from-camera transform of each camera, row-major 4×4.
    pub rig_offsets: BTreeMap<CameraId, [f64; 16]>,
}

impl ExportMeta {
    pub fn new(map_tag: impl Into<String>) -> Self {
        Self {
            format_version: EXPORT_VERSION,
            map_tag: map_tag.into(),
            camera_models: BTreeMap::new(),
            rig_offsets: BTreeMap::new(),
        }
    }

    pub fn add_camera(&mut self, id: CameraId, model: &CameraModel, mount: &RigidTransform) {
        self.camera_models.insert(id, model.into());
        self.rig_offsets.insert(id, mount.to_row_major_4x4());
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        crate::write_json(&root.join("meta.json"), self)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("meta.json");
        let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
        let meta: Self = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if meta.format_version != EXPORT_VERSION {
            return Err(Error::data(format!(
                "{}: format_version {} is not supported (expected {EXPORT_VERSION})",
                path.display(),
                meta.format_version
            )));
        }
        for (id, offset) in &meta.rig_offsets {
            RigidTransform::from_row_major_4x4(offset).context(format!("rig offset of camera {id}"))?;
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRow {
    pub frame_index: u64,
    pub camera_id: CameraId,
    pub timestamp: f64,
    /// Row-major 3×4 camera-to-world pose.
    pub pose: [f64; 12],
    pub weather_tag: String,
}

pub fn episode_dir(root: &Path, episode: &str) -> PathBuf {
    root.join("episodes").join(episode)
}

pub fn image_path(root: &Path, episode: &str, camera: CameraId, frame: u64) -> PathBuf {
    episode_dir(root, episode).join("images").join(camera.as_str()).join(format!("{frame:06}.png"))
}

pub fn write_poses(path: &Path, rows: &[PoseRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(POSE_HEADER).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.frame_index.to_string(), r.camera_id.to_string(), r.timestamp.to_string()];
        rec.extend(r.pose.iter().map(|v| v.to_string()));
        rec.push(r.weather_tag.clone());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRow>> {
    let where_ = |line: u64, msg: String| Error::data(format!("{}:{line}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::data(format!("{}: {other:?}", path.display())),
    })?;
    let header = r.headers().map_err(|e| where_(1, e.to_string()))?.clone();
    if header.iter().ne(POSE_HEADER) {
        return Err(where_(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| where_(line, e.to_string()))?;
        let num = |i: usize| -> Result<f64> { rec[i].trim().parse::<f64>().map_err(|e| where_(line, format!("column {}: {e}", POSE_HEADER[i]))) };
        let mut pose = [0.0; 12];
        for (i, v) in pose.iter_mut().enumerate() {
            *v = num(3 + i)?;
        }
        rows.push(PoseRow {
            frame_index: rec[0].trim().parse().map_err(|e| where_(line, format!("frame_index: {e}")))?,
            camera_id: rec[1].trim().parse().map_err(|e: scalenet_core::Error| where_(line, e.to_string()))?,
            timestamp: num(2)?,
            pose,
            weather_tag: rec[15].to_string(),
        });
    }
    Ok(rows)
}

/// Reads an export into a manifest. Each episode becomes its own sequence
/// (`<map_tag>/<episode>`), so pairs never span two episodes.
pub fn read_simulator_export(root: &Path, split: Split) -> Result<DatasetManifest> {
    let meta = ExportMeta::read(root)?;
    let episodes_dir = root.join("episodes");
    let mut episodes: Vec<String> = std::fs::read_dir(&episodes_dir)
        .map_err(Error::io(&episodes_dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    episodes.sort();
    let mut frames = Vec::new();
    for episode in &episodes {
        let rows = read_poses(&episode_dir(root, episode).join("poses.csv"))?;
        let mut by_camera: BTreeMap<CameraId, Vec<PoseRow>> = BTreeMap::new();
        for row in rows {
            by_camera.entry(row.camera_id).or_default().push(row);
        }
        for (camera, rows) in by_camera {
            let model = meta
                .camera_models
                .get(&camera)
                .ok_or_else(|| Error::data(format!("episode {episode}: camera {camera} missing from meta.json")))?
                .camera_model()?;
            for w in rows.windows(2) {
                if w[1].frame_index <= w[0].frame_index {
                    return Err(Error::data(format!(
                        "episode {episode} camera {camera}: frame index {} follows {}",
                        w[1].frame_index, w[0].frame_index
                    )));
                }
            }
            for row in rows {
                let path = image_path(root, episode, camera, row.frame_index);
                if !path.is_file() {
                    return Err(Error::data(format!("missing image {}", path.display())));
                }
                frames.push(FrameRecord {
                    sequence_id: format!("{}/{}", meta.map_tag, episode),
                    camera_id: camera,
                    frame_index: row.frame_index,
                    image_path: path.to_string_lossy().into_owned(),
                    pose: row.pose,
                    timestamp: Some(row.timestamp),
                    source_camera: model,
                    weather_tag: Some(row.weather_tag),
                    map_tag: Some(meta.map_tag.clone()),
                });
            }
        }
    }
    let manifest = DatasetManifest::new(split, Origin::SimulatorExport, frames);
    manifest.validate(false)?;
    manifest.trajectories()?;
    Ok(manifest)
}
