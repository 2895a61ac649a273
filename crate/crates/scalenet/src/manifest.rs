//! Dataset manifests: every frame of a dataset with its pose, camera and
//! image location, grouped into trajectories.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scalenet_core::geometry::{CameraId, CameraModel, PoseSE3, Trajectory};

use crate::error::{Context, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Kitti,
    SimulatorExport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub camera_id: CameraId,
    pub frame_index: u64,
    pub image_path: String,
    /// Camera-to-world pose, row-major 3×4.
    pub pose: [f64; 12],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    pub source_camera: CameraModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_tag: Option<String>,
}

impl FrameRecord {
    pub fn pose(&self) -> Result<PoseSE3> {
        let mut p = PoseSE3::from_row_major_3x4(&self.pose, self.frame_index).context(format!("frame {} of {}", self.frame_index, self.sequence_id))?;
        p.timestamp = self.timestamp;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub origin: Origin,
    pub frames: Vec<FrameRecord>,
}

/// A trajectory of a manifest together with the frames it came from.
#[derive(Debug, Clone)]
pub struct ManifestTrajectory {
    pub trajectory: Trajectory,
    /// Indices into [`DatasetManifest::frames`], one per pose.
    pub frames: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(split: Split, origin: Origin, frames: Vec<FrameRecord>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            split,
            origin,
            frames,
        }
    }

    /// Checks uniqueness, grouping and ordering; optionally that images exist.
    pub fn validate(&self, check_images: bool) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::data(format!("manifest version {} is not supported (expected {MANIFEST_VERSION})", self.format_version)));
        }
        let mut seen_groups = HashSet::new();
        let mut prev: Option<&FrameRecord> = None;
        for f in &self.frames {
            let same_group = prev.is_some_and(|p| p.sequence_id == f.sequence_id && p.camera_id == f.camera_id);
            if same_group {
                let p = prev.unwrap();
                if f.frame_index <= p.frame_index {
                    return Err(Error::data(format!(
                        "sequence {} camera {}: frame {} follows frame {}",
                        f.sequence_id, f.camera_id, f.frame_index, p.frame_index
                    )));
                }
            } else if !seen_groups.insert((f.sequence_id.clone(), f.camera_id)) {
                return Err(Error::data(format!("frames of sequence {} camera {} are not contiguous", f.sequence_id, f.camera_id)));
            }
            if check_images && !Path::new(&f.image_path).is_file() {
                return Err(Error::data(format!("missing image {}", f.image_path)));
            }
            prev = Some(f);
        }
        Ok(())
    }

    pub fn trajectories(&self) -> Result<Vec<ManifestTrajectory>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.frames.len() {
            let first = &self.frames[start];
            let end = start
                + self.frames[start..]
                    .iter()
                    .take_while(|f| f.sequence_id == first.sequence_id && f.camera_id == first.camera_id)
                    .count();
            let poses = self.frames[start..end].iter().map(FrameRecord::pose).collect::<Result<Vec<_>>>()?;
            out.push(ManifestTrajectory {
                trajectory: Trajectory::new(first.sequence_id.clone(), first.camera_id, poses).context(format!("sequence {}", first.sequence_id))?,
                frames: (start..end).collect(),
            });
            start = end;
        }
        Ok(out)
    }

    /// Distinct map tags in order of first appearance.
    pub fn map_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for tag in self.frames.iter().filter_map(|f| f.map_tag.as_ref()) {
            if !tags.contains(tag) {
                tags.push(tag.clone());
            }
        }
        tags
    }

    /// Keeps the frames accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&FrameRecord) -> bool) -> Self {
        Self {
            frames: self.frames.iter().filter(|f| keep(f)).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        m.validate(false)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_json(path, self)
    }
}
