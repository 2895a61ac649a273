//! Training-pair enumeration, turn duplication and LSTM windows.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{pair_distance, yaw_change, CameraId, GroundPlane, Trajectory};

/// One degree per consecutive pair.
pub const DEFAULT_TURN_THRESHOLD: f64 = 0.017_45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairIndex {
    pub sequence_id: String,
    pub camera_id: CameraId,
    /// Frame index of the earlier frame.
    pub i: u64,
    /// Frame index of the later frame.
    pub j: u64,
    pub distance_label: f64,
    pub is_turning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSamplerConfig {
    pub d_max: f64,
    pub turn_threshold: f64,
    pub turn_duplication_factor: usize,
    pub allow_nonconsecutive: bool,
    /// Optional cap on `j - i` (in trajectory positions). Without it a
    /// trajectory that revisits a place yields pairs across the revisit.
    pub max_frame_gap: Option<usize>,
}

impl Default for PairSamplerConfig {
    fn default() -> Self {
        Self {
            d_max: 1.7,
            turn_threshold: DEFAULT_TURN_THRESHOLD,
            turn_duplication_factor: 2,
            allow_nonconsecutive: true,
            max_frame_gap: None,
        }
    }
}

impl PairSamplerConfig {
    /// Evaluation-time sampling: consecutive pairs, no duplication, no
    /// distance cap.
    pub fn consecutive_only() -> Self {
        Self {
            d_max: f64::INFINITY,
            turn_duplication_factor: 1,
            allow_nonconsecutive: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0) {
            bail!(InvalidConfig, "d_max must be positive, got {}", self.d_max);
        }
        if self.turn_duplication_factor < 1 {
            bail!(InvalidConfig, "turn_duplication_factor must be >= 1");
        }
        if !(self.turn_threshold >= 0.0) {
            bail!(InvalidConfig, "turn_threshold must be non-negative");
        }
        if self.max_frame_gap == Some(0) {
            bail!(InvalidConfig, "max_frame_gap must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

impl Direction {
    /// Index of the predicted pair inside a window of `length` pairs.
    pub fn target_position(self, length: usize) -> usize {
        match self {
            Direction::Unidirectional => length - 1,
            Direction::Bidirectional => (length - 1) / 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Direction::Unidirectional => "U",
            Direction::Bidirectional => "B",
        }
    }
}

/// A run of consecutive pairs `(k, k+1), (k+1, k+2), …` from one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub pairs: Vec<PairIndex>,
    pub target_position: usize,
    /// Trajectory position of the first frame of the first pair.
    pub start: usize,
}

impl SequenceWindow {
    pub fn target(&self) -> &PairIndex {
        &self.pairs[self.target_position]
    }
}

fn make_pair(traj: &Trajectory, plane: Option<&GroundPlane>, a: usize, b: usize, distance: f64, threshold: f64) -> Result<PairIndex> {
    let (pa, pb) = (&traj.poses[a], &traj.poses[b]);
    let is_turning = match plane {
        Some(plane) => yaw_change(pa, pb, plane)? > threshold,
        None => false,
    };
    Ok(PairIndex {
        sequence_id: traj.sequence_id.clone(),
        camera_id: traj.camera_id,
        i: pa.frame_index,
        j: pb.frame_index,
        distance_label: distance,
        is_turning,
    })
}

/// All pairs `(i, j)`, `j > i`, whose camera centers are at most `d_max`
/// apart, ordered by `i` then `j`.
pub fn enumerate_pairs(traj: &Trajectory, cfg: &PairSamplerConfig) -> Result<Vec<PairIndex>> {
    cfg.validate()?;
    let n = traj.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let plane = traj.ground_plane()?;
    let max_gap = if cfg.allow_nonconsecutive {
        cfg.max_frame_gap.unwrap_or(usize::MAX)
    } else {
        1
    };
    let mut out = Vec::new();
    for a in 0..n - 1 {
        let last = a.saturating_add(max_gap).min(n - 1);
        for b in a + 1..=last {
            let d = pair_distance(&traj.poses[a], &traj.poses[b])?;
            if d <= cfg.d_max {
                out.push(make_pair(traj, Some(&plane), a, b, d, cfg.turn_threshold)?);
            }
        }
    }
    Ok(out)
}

/// Consecutive pairs only, with no distance filter.
pub fn consecutive_pairs(traj: &Trajectory, turn_threshold: f64) -> Result<Vec<PairIndex>> {
    if traj.len() < 2 {
        return Ok(Vec::new());
    }
    let plane = traj.ground_plane()?;
    (0..traj.len() - 1)
        .map(|a| {
            let d = pair_distance(&traj.poses[a], &traj.poses[a + 1])?;
            make_pair(traj, Some(&plane), a, a + 1, d, turn_threshold)
        })
        .collect()
}

/// Repeats every turning pair `turn_duplication_factor` times in place.
pub fn duplicate_turns(pairs: &[PairIndex], cfg: &PairSamplerConfig) -> Result<Vec<PairIndex>> {
    if cfg.turn_duplication_factor < 1 {
        bail!(InvalidConfig, "turn_duplication_factor must be >= 1");
    }
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let copies = if p.is_turning { cfg.turn_duplication_factor } else { 1 };
        for _ in 0..copies {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn validate_window_length(length: usize, direction: Direction) -> Result<()> {
    if length == 0 {
        bail!(InvalidConfig, "window length must be >= 1");
    }
    if direction == Direction::Bidirectional && length % 2 == 0 {
        bail!(InvalidConfig, "bidirectional windows need an odd length (2N+1), got {length}");
    }
    Ok(())
}

/// Number of windows of `length` consecutive pairs that fit in
/// `num_pairs` consecutive pairs.
pub fn window_count(num_pairs: usize, length: usize) -> usize {
    (num_pairs + 1).saturating_sub(length)
}

/// Pair positions (0-based, over consecutive pairs) that are the target of
/// some full window.
pub fn covered_positions(num_pairs: usize, length: usize, direction: Direction) -> core::ops::Range<usize> {
    let count = window_count(num_pairs, length);
    let offset = if count == 0 { 0 } else { direction.target_position(length) };
    offset..offset + count
}

/// Sliding windows (stride 1) of `length` consecutive pairs.
pub fn build_windows(traj: &Trajectory, length: usize, direction: Direction) -> Result<Vec<SequenceWindow>> {
    validate_window_length(length, direction)?;
    if traj.len() < length + 1 {
        return Ok(Vec::new());
    }
    let pairs = consecutive_pairs(traj, DEFAULT_TURN_THRESHOLD)?;
    Ok(windows_over_pairs(&pairs, length, direction))
}

/// Windows over an already enumerated list of consecutive pairs from one
/// trajectory.
pub fn windows_over_pairs(pairs: &[PairIndex], length: usize, direction: Direction) -> Vec<SequenceWindow> {
    let target_position = direction.target_position(length);
    (0..window_count(pairs.len(), length))
        .map(|start| SequenceWindow {
            pairs: pairs[start..start + length].to_vec(),
            target_position,
            start,
        })
        .collect()
}

/// Pair counts for a set of trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub trajectories: usize,
    pub frames: usize,
    pub pairs: usize,
    pub turning: usize,
}

/// Counts training pairs (`consecutive_only = false`: enumeration under the
/// sampler config plus turn duplication) or evaluation pairs.
pub fn count_pairs<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>, cfg: &PairSamplerConfig, consecutive_only: bool) -> Result<PairCounts> {
    let mut counts = PairCounts::default();
    for traj in trajs {
        counts.trajectories += 1;
        counts.frames += traj.len();
        let pairs = if consecutive_only {
            consecutive_pairs(traj, cfg.turn_threshold)?
        } else {
            duplicate_turns(&enumerate_pairs(traj, cfg)?, cfg)?
        };
        counts.turning += pairs.iter().filter(|p| p.is_turning).count();
        counts.pairs += pairs.len();
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, PoseSE3};
    use alloc::vec;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn heading(theta: f64) -> Matrix3<f64> {
        let fwd = Vector3::new(libm::cos(theta), libm::sin(theta), 0.0);
        let right = Vector3::new(libm::sin(theta), -libm::cos(theta), 0.0);
        Matrix3::from_columns(&[right, Vector3::new(0.0, 0.0, -1.0), fwd])
    }

    fn collinear(n: usize, spacing: f64) -> Trajectory {
        let poses = (0..n)
            .map(|k| PoseSE3::new(heading(0.0), Vector3::new(k as f64 * spacing, 0.0, 0.0), k as u64).unwrap())
            .collect();
        Trajectory::new("c", CameraId::Left, poses).unwrap()
    }

    fn brute_pairs(traj: &Trajectory, d_max: f64, nonconsecutive: bool) -> Vec<(u64, u64, f64)> {
        let mut out = vec![];
        for a in 0..traj.len() {
            for b in 0..traj.len() {
                if b <= a || (!nonconsecutive && b != a + 1) {
                    continue;
                }
                let d = (traj.poses[b].translation - traj.poses[a].translation).norm();
                if d <= d_max {
                    out.push((traj.poses[a].frame_index, traj.poses[b].frame_index, d));
                }
            }
        }
        out
    }

    #[test]
    fn collinear_examples() {
        let cfg = PairSamplerConfig::default();
        let p = enumerate_pairs(&collinear(5, 0.8), &cfg).unwrap();
        assert_eq!(p.len(), 7);
        assert_eq!(p.iter().filter(|p| p.j == p.i + 1).count(), 4);
        assert_eq!(p.iter().filter(|p| p.j == p.i + 2).count(), 3);
        assert_eq!(enumerate_pairs(&collinear(5, 1.0), &cfg).unwrap().len(), 4);
        assert!(enumerate_pairs(&collinear(1, 1.0), &cfg).unwrap().is_empty());
        let gap1 = PairSamplerConfig {
            allow_nonconsecutive: false,
            ..cfg.clone()
        };
        assert_eq!(enumerate_pairs(&collinear(5, 0.8), &gap1).unwrap().len(), 4);
        assert!(enumerate_pairs(&collinear(5, 2.0), &gap1).unwrap().is_empty());
    }

    #[test]
    fn max_gap_limits_pairs() {
        let cfg = PairSamplerConfig {
            d_max: 10.0,
            max_frame_gap: Some(2),
            ..PairSamplerConfig::default()
        };
        let p = enumerate_pairs(&collinear(6, 0.1), &cfg).unwrap();
        assert_eq!(p.len(), 5 + 4);
    }

    #[test]
    fn turning_flags() {
        // Straight then a turn of 5 degrees per frame.
        let mut th = 0.0;
        let mut pos = Vector3::zeros();
        let mut poses = vec![];
        for k in 0..10u64 {
            poses.push(PoseSE3::new(heading(th), pos, k).unwrap());
            if k >= 5 {
                th += 5f64.to_radians();
            }
            pos += Vector3::new(libm::cos(th), libm::sin(th), 0.0);
        }
        let traj = Trajectory::new("t", CameraId::Left, poses).unwrap();
        let pairs = consecutive_pairs(&traj, DEFAULT_TURN_THRESHOLD).unwrap();
        let flags: Vec<bool> = pairs.iter().map(|p| p.is_turning).collect();
        assert_eq!(flags, [false, false, false, false, false, true, true, true, true]);
    }

    fn pair(turning: bool, i: u64) -> PairIndex {
        PairIndex {
            sequence_id: "s".into(),
            camera_id: CameraId::Left,
            i,
            j: i + 1,
            distance_label: 1.0,
            is_turning: turning,
        }
    }

    #[test]
    fn duplication_examples() {
        let pairs: Vec<PairIndex> = (0..10).map(|i| pair(i % 3 == 0 && i > 0, i)).collect();
        assert_eq!(pairs.iter().filter(|p| p.is_turning).count(), 3);
        let one = PairSamplerConfig {
            turn_duplication_factor: 1,
            ..Default::default()
        };
        assert_eq!(duplicate_turns(&pairs, &one).unwrap(), pairs);
        let three = PairSamplerConfig {
            turn_duplication_factor: 3,
            ..Default::default()
        };
        let out = duplicate_turns(&pairs, &three).unwrap();
        assert_eq!(out.len(), 16);
        // Stable order.
        let order: Vec<u64> = out.iter().map(|p| p.i).collect();
        assert!(order.windows(2).all(|w| w[0] <= w[1]));
        let zero = PairSamplerConfig {
            turn_duplication_factor: 0,
            ..Default::default()
        };
        assert!(duplicate_turns(&pairs, &zero).is_err());
    }

    #[test]
    fn window_examples() {
        let w = build_windows(&collinear(21, 0.5), 19, Direction::Bidirectional).unwrap();
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|w| w.target_position == 9 && w.pairs.len() == 19));
        let w = build_windows(&collinear(20, 0.5), 19, Direction::Unidirectional).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target_position, 18);
        let w = build_windows(&collinear(6, 0.5), 1, Direction::Unidirectional).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|w| w.target_position == 0));
        assert!(build_windows(&collinear(10, 0.5), 19, Direction::Bidirectional).unwrap().is_empty());
        assert!(build_windows(&collinear(30, 0.5), 4, Direction::Bidirectional).is_err());
        assert!(build_windows(&collinear(30, 0.5), 0, Direction::Unidirectional).is_err());
        assert_eq!(covered_positions(29, 19, Direction::Bidirectional), 9..20);
        assert_eq!(covered_positions(3, 19, Direction::Bidirectional).len(), 0);
    }

    fn arb_trajectory(max_len: usize) -> impl Strategy<Value = Trajectory> {
        prop::collection::vec((0.0f64..1.2, -0.1f64..0.1), 1..max_len).prop_map(|steps| {
            let mut th = 0.0;
            let mut pos = Vector3::zeros();
            let poses = steps
                .iter()
                .enumerate()
                .map(|(k, (step, dth))| {
                    let p = PoseSE3::new(axis_angle(Vector3::z(), th) * heading(0.0), pos, k as u64 * 2).unwrap();
                    th += dth;
                    pos += Vector3::new(libm::cos(th), libm::sin(th), 0.0) * *step;
                    p
                })
                .collect();
            Trajectory::new("r", CameraId::Right, poses).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn enumerate_matches_brute_force(traj in arb_trajectory(200), d_max in 0.1f64..3.0, nonconsecutive in any::<bool>()) {
            let cfg = PairSamplerConfig { d_max, allow_nonconsecutive: nonconsecutive, ..Default::default() };
            let got: Vec<(u64, u64, f64)> = enumerate_pairs(&traj, &cfg).unwrap().iter().map(|p| (p.i, p.j, p.distance_label)).collect();
            let expected = brute_pairs(&traj, d_max, nonconsecutive);
            prop_assert_eq!(got.len(), expected.len());
            for (g, e) in got.iter().zip(&expected) {
                prop_assert_eq!((g.0, g.1), (e.0, e.1));
                prop_assert!((g.2 - e.2).abs() <= 1e-12);
                prop_assert!(g.2 <= d_max);
            }
        }

        #[test]
        fn duplication_matches_repeat_oracle(flags in prop::collection::vec(any::<bool>(), 0..60), factor in 1usize..5) {
            let pairs: Vec<PairIndex> = flags.iter().enumerate().map(|(k, f)| pair(*f, k as u64)).collect();
            let cfg = PairSamplerConfig { turn_duplication_factor: factor, ..Default::default() };
            let out = duplicate_turns(&pairs, &cfg).unwrap();
            let mut expected = vec![];
            for p in &pairs {
                expected.extend(core::iter::repeat(p.clone()).take(if p.is_turning { factor } else { 1 }));
            }
            prop_assert_eq!(out, expected);
        }

        #[test]
        fn windows_match_enumeration(traj in arb_trajectory(60), n in 0usize..6, bidir in any::<bool>()) {
            let (length, dir) = if bidir { (2 * n + 1, Direction::Bidirectional) } else { (n + 1, Direction::Unidirectional) };
            let windows = build_windows(&traj, length, dir).unwrap();
            let p = traj.len().saturating_sub(1);
            prop_assert_eq!(windows.len(), (p + 1).saturating_sub(length));
            for (k, w) in windows.iter().enumerate() {
                prop_assert_eq!(w.pairs.len(), length);
                for (m, pair) in w.pairs.iter().enumerate() {
                    prop_assert_eq!(pair.i, traj.poses[k + m].frame_index);
                    prop_assert_eq!(pair.j, traj.poses[k + m + 1].frame_index);
                }
                if bidir {
                    prop_assert_eq!(w.target_position, n);
                    prop_assert_eq!(length - 1 - w.target_position, n);
                } else {
                    prop_assert_eq!(w.target_position, length - 1);
                }
            }
        }
    }
}
