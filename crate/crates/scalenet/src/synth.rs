//! Renders synthetic drives and writes them in the simulator-export format,
//! one export directory per map.

use std::path::{Path, PathBuf};

use scalenet_core::synthgen::{default_rig, generate_episode, map_preset, render_view, Episode, RenderOptions, RigCamera, MAP_COUNT};

use crate::error::{Error, Result};
use crate::export::{episode_dir, image_path, write_poses, ExportMeta, PoseRow};
use crate::images::write_png;

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// 1-based map indices.
    pub maps: Vec<usize>,
    /// Frames per map, split into episodes of `episode_frames`.
    pub frames_per_map: usize,
    pub episode_frames: usize,
    pub seed: u64,
    pub workers: usize,
    pub render: RenderOptions,
    pub rig: Vec<RigCamera>,
}

impl SynthOptions {
    /// Maps `1..=count` with the default rig.
    pub fn new(count: usize, frames_per_map: usize, seed: u64) -> Self {
        Self {
            maps: (1..=count).collect(),
            frames_per_map,
            episode_frames: 100,
            seed,
            workers: 1,
            render: RenderOptions::default(),
            rig: default_rig(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::config("no maps selected"));
        }
        if let Some(&m) = self.maps.iter().find(|&&m| m == 0 || m > MAP_COUNT) {
            return Err(Error::config(format!("map {m} does not exist; maps are 1..={MAP_COUNT}")));
        }
        if self.frames_per_map < 2 || self.episode_frames < 2 {
            return Err(Error::config("need at least two frames per map and per episode"));
        }
        if self.rig.is_empty() {
            return Err(Error::config("the rig has no cameras"));
        }
        Ok(())
    }
}

/// Episode lengths summing to `total`; a remainder too short for a pair is
/// folded into the previous episode.
pub fn episode_lengths(total: usize, per_episode: usize) -> Vec<usize> {
    let mut out = vec![per_episode; total / per_episode];
    let rest = total % per_episode;
    match out.last_mut() {
        Some(last) if rest < 2 => *last += rest,
        _ => out.push(rest),
    }
    out
}

/// Renders and writes every map; returns the export directories.
pub fn run_synthgen(out: &Path, opts: &SynthOptions) -> Result<Vec<PathBuf>> {
    opts.validate()?;
    opts.maps.iter().map(|&m| export_map(out, m, opts)).collect()
}

fn export_map(out: &Path, map_index: usize, opts: &SynthOptions) -> Result<PathBuf> {
    let map = map_preset(map_index)?;
    let root = out.join(&map.tag);
    let episodes = episode_lengths(opts.frames_per_map, opts.episode_frames)
        .into_iter()
        .enumerate()
        .map(|(k, frames)| generate_episode(&map, opts.seed, k, frames).map_err(Error::from));
    write_export(&root, &map.tag, episodes, opts)?;
    Ok(root)
}

/// Writes an export of the given episodes, named `ep000`, `ep001`, … in
/// order. Episodes are generated lazily so only one is held at a time.
pub fn write_export(root: &Path, map_tag: &str, episodes: impl IntoIterator<Item = Result<Episode>>, opts: &SynthOptions) -> Result<()> {
    let mut meta = ExportMeta::new(map_tag);
    for cam in &opts.rig {
        meta.add_camera(cam.id, &cam.model, &cam.mount);
    }
    meta.write(root)?;
    for (k, episode) in episodes.into_iter().enumerate() {
        write_episode(root, &format!("ep{k:03}"), &episode?, opts)?;
    }
    Ok(())
}

fn write_episode(root: &Path, name: &str, episode: &Episode, opts: &SynthOptions) -> Result<()> {
    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    for frame in 0..episode.drive.len() {
        for cam in &opts.rig {
            let pose = episode.drive.camera_pose(frame, &cam.mount);
            rows.push(PoseRow {
                frame_index: frame as u64,
                camera_id: cam.id,
                timestamp: pose.timestamp.unwrap_or(0.0),
                pose: pose.to_row_major_3x4(),
                weather_tag: episode.weather.tag.clone(),
            });
            jobs.push((image_path(root, name, cam.id, frame as u64), pose, cam.model));
        }
    }
    let render_one = |(path, pose, model): &(PathBuf, _, _)| -> Result<()> {
        let img = render_view(&episode.scene, pose, model, &episode.weather, &opts.render)?;
        write_png(path, &img)
    };
    let workers = opts.workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        jobs.iter().try_for_each(render_one)?;
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|part| scope.spawn(move || part.iter().try_for_each(render_one))).collect();
            handles.into_iter().try_for_each(|h| h.join().expect("render thread panicked"))
        })?;
    }
    write_poses(&episode_dir(root, name).join("poses.csv"), &rows)
}

/// Export directories under `root`: `root` itself when it holds a
/// `meta.json`, otherwise its subdirectories that do, sorted by name.
pub fn find_exports(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(format!("{}: no meta.json found", root.display())));
    }
    Ok(dirs)
}
