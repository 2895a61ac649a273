//! Turning manifests into model inputs: decoded and normalized frames,
//! training pairs and windows, and evaluation sequences.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use scalenet_core::evaluation::PairRecord;
use scalenet_core::geometry::{camera_center, CameraId, CameraModel};
use scalenet_core::imaging::{augment_pair, normalize, stack_pair, AugmentConfig, NormalizedImage, Rgb8Image};
use scalenet_core::sampling::{consecutive_pairs, duplicate_turns, enumerate_pairs, windows_over_pairs, Direction, PairIndex, PairSamplerConfig};
use scalenet_core::training::{BatchLoader, PairSample, PairSource, WindowSample, WindowSource};

use crate::error::{Error, Result};
use crate::images::read_rgb;
use crate::manifest::{DatasetManifest, FrameRecord};

/// How frames become network inputs: warped to `canonical`, then shrunk by
/// an integer `downsample` factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub canonical: CameraModel,
    pub downsample: usize,
}

impl InputSpec {
    pub fn full() -> Self {
        Self {
            canonical: CameraModel::canonical(),
            downsample: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            downsample: 4,
            ..Self::full()
        }
    }

    /// `(height, width)` of the network input.
    pub fn input_size(&self) -> (usize, usize) {
        (self.canonical.height() / self.downsample, self.canonical.width() / self.downsample)
    }

    pub fn validate(&self) -> Result<()> {
        self.canonical.validate()?;
        if self.downsample == 0 {
            return Err(Error::config("downsample factor must be positive"));
        }
        let (h, w) = self.input_size();
        if h == 0 || w == 0 {
            return Err(Error::config(format!("downsample factor {} leaves no pixels", self.downsample)));
        }
        Ok(())
    }
}

/// Frames of one or more manifests, decoded and normalized on first use.
/// Safe to read from many threads.
pub struct FrameStore {
    records: Vec<FrameRecord>,
    spec: InputSpec,
    cache: Vec<OnceLock<std::result::Result<Rgb8Image, String>>>,
}

impl FrameStore {
    pub fn new(records: Vec<FrameRecord>, spec: InputSpec) -> Result<Self> {
        spec.validate()?;
        let cache = (0..records.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { records, spec, cache })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, index: usize) -> &FrameRecord {
        &self.records[index]
    }

    pub fn spec(&self) -> &InputSpec {
        &self.spec
    }

    fn prepare(&self, index: usize) -> Result<Rgb8Image> {
        let rec = &self.records[index];
        let raw = read_rgb(std::path::Path::new(&rec.image_path))?;
        if (raw.width, raw.height) != rec.source_camera.image_size {
            return Err(Error::data(format!(
                "{}: image is {}x{} but the camera model says {}x{}",
                rec.image_path, raw.width, raw.height, rec.source_camera.image_size.0, rec.source_camera.image_size.1
            )));
        }
        let normalized = normalize(&raw, &rec.source_camera, &self.spec.canonical)?;
        Ok(normalized.downsample(self.spec.downsample).to_rgb8())
    }

    /// Normalized, downsampled frame.
    pub fn image(&self, index: usize) -> Result<NormalizedImage> {
        let cached = self.cache[index].get_or_init(|| self.prepare(index).map_err(|e| e.to_string()));
        match cached {
            Ok(img) => Ok(NormalizedImage::from_rgb8(img)),
            Err(e) => Err(Error::data(e.clone())),
        }
    }

    /// Stacked input of a pair, augmented when `augment` is enabled.
    pub fn pair_input(&self, a: usize, b: usize, augment: &AugmentConfig, seed: u64) -> Result<Vec<f32>> {
        let (ia, ib) = (self.image(a)?, self.image(b)?);
        let (ia, ib) = if augment.enabled { augment_pair(&ia, &ib, augment, seed) } else { (ia, ib) };
        Ok(stack_pair(&ia, &ib)?.data)
    }
}

/// A trajectory of the store: positions in the store of its frames.
#[derive(Debug, Clone)]
pub struct StoreTrajectory {
    pub trajectory: scalenet_core::geometry::Trajectory,
    pub frames: Vec<usize>,
}

impl StoreTrajectory {
    fn store_index(&self, frame_index: u64) -> usize {
        let pos = self.trajectory.poses.binary_search_by_key(&frame_index, |p| p.frame_index).expect("pair refers to a frame of its trajectory");
        self.frames[pos]
    }
}

/// Frames and trajectories of a set of manifests.
pub struct Dataset {
    pub store: FrameStore,
    pub trajectories: Vec<StoreTrajectory>,
}

impl Dataset {
    pub fn new(manifests: &[DatasetManifest], spec: InputSpec) -> Result<Self> {
        let mut records = Vec::new();
        let mut trajectories = Vec::new();
        for m in manifests {
            m.validate(true)?;
            let offset = records.len();
            for t in m.trajectories()? {
                trajectories.push(StoreTrajectory {
                    trajectory: t.trajectory,
                    frames: t.frames.iter().map(|k| k + offset).collect(),
                });
            }
            records.extend(m.frames.iter().cloned());
        }
        Ok(Self {
            store: FrameStore::new(records, spec)?,
            trajectories,
        })
    }

    /// Training pairs with turning pairs duplicated.
    pub fn training_pairs(&self, cfg: &PairSamplerConfig) -> Result<Vec<LabelledPair>> {
        let mut out = Vec::new();
        for t in &self.trajectories {
            let pairs = duplicate_turns(&enumerate_pairs(&t.trajectory, cfg)?, cfg)?;
            out.extend(pairs.into_iter().map(|p| LabelledPair::new(t, p)));
        }
        Ok(out)
    }

    /// Windows of consecutive pairs; windows whose target pair is turning
    /// are duplicated like training pairs.
    pub fn training_windows(&self, cfg: &PairSamplerConfig, length: usize, direction: Direction) -> Result<Vec<LabelledWindow>> {
        scalenet_core::sampling::validate_window_length(length, direction)?;
        let mut out = Vec::new();
        for t in &self.trajectories {
            let pairs = consecutive_pairs(&t.trajectory, cfg.turn_threshold)?;
            for w in windows_over_pairs(&pairs, length, direction) {
                let copies = if w.target().is_turning { cfg.turn_duplication_factor } else { 1 };
                let win = LabelledWindow {
                    pairs: w.pairs.iter().map(|p| LabelledPair::new(t, p.clone())).collect(),
                    target_position: w.target_position,
                };
                out.extend(std::iter::repeat_n(win, copies));
            }
        }
        Ok(out)
    }

    /// Consecutive pairs of every trajectory, for evaluation.
    pub fn eval_sequences(&self) -> Result<Vec<Vec<LabelledPair>>> {
        self.trajectories
            .iter()
            .map(|t| Ok(consecutive_pairs(&t.trajectory, scalenet_core::sampling::DEFAULT_TURN_THRESHOLD)?.into_iter().map(|p| LabelledPair::new(t, p)).collect()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledPair {
    pub pair: PairIndex,
    pub first: usize,
    pub second: usize,
}

impl LabelledPair {
    fn new(t: &StoreTrajectory, pair: PairIndex) -> Self {
        Self {
            first: t.store_index(pair.i),
            second: t.store_index(pair.j),
            pair,
        }
    }

    pub fn record(&self, store: &FrameStore, pred: f64) -> Result<PairRecord> {
        let c = camera_center(&store.record(self.first).pose()?)?;
        Ok(PairRecord {
            sequence_id: self.pair.sequence_id.clone(),
            camera_id: self.pair.camera_id,
            frame_i: self.pair.i,
            frame_j: self.pair.j,
            gt: self.pair.distance_label,
            pred,
            position: [c.x, c.y, c.z],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelledWindow {
    pub pairs: Vec<LabelledPair>,
    pub target_position: usize,
}

/// Training pairs as a [`PairSource`].
pub struct PairSet<'a> {
    pub store: &'a FrameStore,
    pub pairs: Vec<LabelledPair>,
    pub augment: AugmentConfig,
}

impl PairSource for PairSet<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn load(&self, index: usize, aug_seed: u64) -> scalenet_core::Result<PairSample> {
        let p = &self.pairs[index];
        let input = self.store.pair_input(p.first, p.second, &self.augment, aug_seed).map_err(to_core)?;
        Ok(PairSample { input, label: p.pair.distance_label })
    }
}

/// Training windows as a [`WindowSource`].
pub struct WindowSet<'a> {
    pub store: &'a FrameStore,
    pub windows: Vec<LabelledWindow>,
    pub augment: AugmentConfig,
}

impl WindowSource for WindowSet<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn load(&self, index: usize, aug_seed: u64) -> scalenet_core::Result<WindowSample> {
        let w = &self.windows[index];
        let inputs = w
            .pairs
            .iter()
            .map(|p| self.store.pair_input(p.first, p.second, &self.augment, aug_seed))
            .collect::<Result<Vec<_>>>()
            .map_err(to_core)?;
        Ok(WindowSample {
            inputs,
            label: w.pairs[w.target_position].pair.distance_label,
        })
    }
}

fn to_core(e: Error) -> scalenet_core::Error {
    match e {
        Error::Numerical(m) => scalenet_core::Error::NonFinite(m),
        Error::Config(m) => scalenet_core::Error::InvalidConfig(m),
        other => scalenet_core::Error::Validation(other.to_string()),
    }
}

/// Loads batch samples on up to `workers` threads. Results come back in
/// slot order, so the worker count never changes what a step sees.
#[derive(Debug, Clone, Copy)]
pub struct ThreadLoader {
    pub workers: usize,
}

impl BatchLoader for ThreadLoader {
    fn load_batch<S: Sync + ?Sized, X: Send>(
        &self,
        source: &S,
        jobs: &[(usize, u64)],
        load: fn(&S, usize, u64) -> scalenet_core::Result<X>,
    ) -> scalenet_core::Result<Vec<X>> {
        let workers = self.workers.clamp(1, jobs.len().max(1));
        if workers == 1 {
            return jobs.iter().map(|&(i, s)| load(source, i, s)).collect();
        }
        let chunk = jobs.len().div_ceil(workers);
        let parts: Vec<scalenet_core::Result<Vec<X>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&(i, s)| load(source, i, s)).collect::<scalenet_core::Result<Vec<X>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(jobs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Camera of a pair's first frame; used to label outputs.
pub fn pair_camera(store: &FrameStore, p: &LabelledPair) -> CameraId {
    store.record(p.first).camera_id
}
