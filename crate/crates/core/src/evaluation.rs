//! Error statistics over predicted pair distances.
//!
//! Errors are `ground truth - prediction` and spreads are population
//! standard deviations.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::geometry::CameraId;
use crate::model::{CnnSampleOutput, DistanceModel, Mode};
use crate::nn::Real;
use crate::sampling::covered_positions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean of `gt - pred`, meters.
    pub mu: f64,
    /// Population standard deviation of `gt - pred`, meters.
    pub sigma: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_id: Option<String>,
    /// `None` when both cameras are pooled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<CameraId>,
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        (self.m2 / self.n as f64).max(0.0)
    }
}

fn stats_of(diffs: impl Iterator<Item = f64>) -> Result<EvalStats> {
    let mut m = Moments::default();
    diffs.for_each(|d| m.push(d));
    if m.n == 0 {
        return Err(Error::Empty("error statistics input"));
    }
    Ok(EvalStats {
        mu: m.mean,
        sigma: libm::sqrt(m.variance()),
        n: m.n,
        sequence_id: None,
        camera_id: None,
    })
}

pub fn error_stats(gts: &[f64], preds: &[f64]) -> Result<EvalStats> {
    if gts.len() != preds.len() {
        return Err(crate::error::shape_mismatch(gts.len(), preds.len()));
    }
    stats_of(gts.iter().zip(preds).map(|(g, p)| g - p))
}

/// Population variance of consecutive prediction differences; lower means
/// a smoother series. `None` with fewer than two predictions.
pub fn smoothness(preds: &[f64]) -> Option<f64> {
    let mut m = Moments::default();
    preds.windows(2).for_each(|w| m.push(w[1] - w[0]));
    (m.n > 0).then(|| m.variance())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Index of the first bin; bins run symmetrically from `-k` to `k`.
    pub first_index: i64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bin `index` covers `[(index - 0.5) w, (index + 0.5) w)`.
    pub fn bin_of(error: f64, bin_width: f64) -> i64 {
        libm::floor(error / bin_width + 0.5) as i64
    }

    pub fn center(&self, slot: usize) -> f64 {
        (self.first_index + slot as i64) as f64 * self.bin_width
    }

    pub fn count_at(&self, index: i64) -> usize {
        usize::try_from(index - self.first_index).ok().and_then(|k| self.counts.get(k)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn histogram(errors: &[f64], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        bail!(Validation, "bin width must be positive, got {bin_width}");
    }
    if errors.is_empty() {
        return Err(Error::Empty("histogram input"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite(String::from("histogram input")));
    }
    let bins: Vec<i64> = errors.iter().map(|&e| Histogram::bin_of(e, bin_width)).collect();
    let k = bins.iter().map(|b| b.abs()).max().unwrap_or(0);
    let mut counts = alloc::vec![0; (2 * k + 1) as usize];
    for b in bins {
        counts[(b + k) as usize] += 1;
    }
    Ok(Histogram {
        bin_width,
        first_index: -k,
        counts,
    })
}

/// One evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sequence_id: String,
    pub camera_id: CameraId,
    pub frame_i: u64,
    pub frame_j: u64,
    pub gt: f64,
    pub pred: f64,
    /// Camera center at the first frame.
    pub position: [f64; 3],
}

impl PairRecord {
    pub fn error(&self) -> f64 {
        self.gt - self.pred
    }
}

/// Indices of the `k` records with the largest absolute error, largest
/// first; ties go to the smaller `(sequence, frame, camera)`.
pub fn worst_k(records: &[PairRecord], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.error()
            .abs()
            .total_cmp(&ra.error().abs())
            .then_with(|| ra.sequence_id.cmp(&rb.sequence_id))
            .then_with(|| ra.frame_i.cmp(&rb.frame_i))
            .then_with(|| ra.camera_id.cmp(&rb.camera_id))
    });
    order.truncate(k);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// One entry per sequence, both cameras pooled.
    pub per_sequence: Vec<EvalStats>,
    pub pooled: EvalStats,
    pub records: Vec<PairRecord>,
    /// Pairs at sequence edges without a full LSTM window.
    pub uncovered: usize,
    pub total_pairs: usize,
    /// See [`smoothness`]; pooled over all trajectories.
    pub smoothness: Option<f64>,
    pub model_fingerprint: u64,
    pub config_fingerprint: u64,
}

impl EvalReport {
    pub fn from_records(records: Vec<PairRecord>, uncovered: usize, model_fingerprint: u64, config_fingerprint: u64) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &records {
            groups.entry(r.sequence_id.as_str()).or_default().push(r.error());
        }
        let per_sequence = groups
            .into_iter()
            .map(|(seq, diffs)| {
                let mut s = stats_of(diffs.into_iter())?;
                s.sequence_id = Some(seq.into());
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = stats_of(records.iter().map(PairRecord::error))?;

        let mut m = Moments::default();
        for w in records.windows(2) {
            if w[0].sequence_id == w[1].sequence_id && w[0].camera_id == w[1].camera_id && w[1].frame_i == w[0].frame_j {
                m.push(w[1].pred - w[0].pred);
            }
        }
        Ok(Self {
            per_sequence,
            pooled,
            total_pairs: records.len() + uncovered,
            records,
            uncovered,
            smoothness: (m.n > 0).then(|| m.variance()),
            model_fingerprint,
            config_fingerprint,
        })
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(PairRecord::error).collect()
    }
}

/// Predictions for the consecutive pairs of one trajectory, given their
/// stacked inputs in order. Pairs without a full LSTM window are `None`.
pub fn predict_sequence<T: Real>(model: &DistanceModel<T>, inputs: &[Vec<f32>]) -> Result<Vec<Option<f64>>> {
    let outputs = inputs.iter().map(|x| model.cnn.forward_sample(x, Mode::Eval)).collect::<Result<Vec<_>>>()?;
    predict_from_cnn(model, &outputs)
}

/// Same as [`predict_sequence`], starting from the eval-mode CNN outputs of
/// every pair, so callers can compute those in parallel or in pieces.
pub fn predict_from_cnn<T: Real>(model: &DistanceModel<T>, outputs: &[CnnSampleOutput<T>]) -> Result<Vec<Option<f64>>> {
    let Some(head) = &model.lstm else {
        return Ok(outputs.iter().map(|o| Some(o.distance.as_f64())).collect());
    };
    let mut out = alloc::vec![None; outputs.len()];
    let cfg = head.config();
    let offset = cfg.target_position();
    for target in covered_positions(outputs.len(), cfg.window_length, cfg.direction) {
        let start = target - offset;
        let window: Vec<&[T]> = outputs[start..start + cfg.window_length].iter().map(|o| o.embedding.as_slice()).collect();
        out[target] = Some(head.forward(&window)?.as_f64());
    }
    Ok(out)
}
