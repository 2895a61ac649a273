//! Run configurations and the shipped presets.

use serde::{Deserialize, Serialize};

use scalenet_core::geometry::CameraModel;
use scalenet_core::model::{CnnConfig, LstmConfig};
use scalenet_core::sampling::{Direction, PairSamplerConfig};
use scalenet_core::training::{Phase, TrainConfig};

use crate::dataset::InputSpec;
use crate::error::{Error, Result};
use crate::manifest::{FrameRecord, Origin};

/// Which frames of the given manifests a run trains on. `None` keeps every
/// frame of that origin; an empty list drops the origin entirely.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSelection {
    pub kitti_sequences: Option<Vec<String>>,
    pub synthetic_maps: Option<Vec<String>>,
}

impl DataSelection {
    pub fn kitti_only() -> Self {
        let (train, _) = crate::kitti::kitti_split_presets();
        Self {
            kitti_sequences: Some(train.iter().map(|s| s.to_string()).collect()),
            synthetic_maps: Some(Vec::new()),
        }
    }

    pub fn synthetic_only(maps: Option<Vec<String>>) -> Self {
        Self {
            kitti_sequences: Some(Vec::new()),
            synthetic_maps: maps,
        }
    }

    pub fn mixed() -> Self {
        Self {
            synthetic_maps: None,
            ..Self::kitti_only()
        }
    }

    pub fn keeps(&self, origin: Origin, frame: &FrameRecord) -> bool {
        let allowed = |list: &Option<Vec<String>>, key: Option<&String>| match list {
            None => true,
            Some(list) => key.is_some_and(|k| list.contains(k)),
        };
        match origin {
            Origin::Kitti => allowed(&self.kitti_sequences, Some(&frame.sequence_id)),
            Origin::SimulatorExport => allowed(&self.synthetic_maps, frame.map_tag.as_ref()),
        }
    }
}

/// Everything a training run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub cnn: CnnConfig,
    #[serde(default)]
    pub lstm: Option<LstmConfig>,
    pub input: InputSpec,
    #[serde(default)]
    pub sampler: PairSamplerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSelection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.input.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        if let Some(l) = &self.lstm {
            l.validate()?;
        }
        if self.cnn.dropout_rate != self.train.dropout_rate {
            return Err(Error::config(format!(
                "cnn.dropout_rate {} differs from train.dropout_rate {}",
                self.cnn.dropout_rate, self.train.dropout_rate
            )));
        }
        let (h, w) = self.input.input_size();
        if (h, w) != (self.cnn.input_height, self.cnn.input_width) || self.cnn.input_channels != 6 {
            return Err(Error::config(format!(
                "network expects {}x{}x{} inputs but frames are prepared as {h}x{w}x6",
                self.cnn.input_height, self.cnn.input_width, self.cnn.input_channels
            )));
        }
        match (self.train.phase, &self.lstm) {
            (Phase::Cnn, Some(_)) => Err(Error::config("phase `cnn` cannot have an lstm section")),
            (Phase::Lstm, None) => Err(Error::config("phase `lstm` needs an lstm section")),
            _ => Ok(()),
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cnn_run(name: &str, cnn: CnnConfig, input: InputSpec, data: DataSelection) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        cnn,
        lstm: None,
        input,
        sampler: PairSamplerConfig::default(),
        train: TrainConfig::cnn_paper(),
        data,
    }
}

fn lstm_run(name: &str, direction: Direction, length: usize, data: DataSelection) -> RunConfig {
    RunConfig {
        lstm: Some(LstmConfig::new(direction, length)),
        train: TrainConfig::lstm_paper(),
        ..cnn_run(name, CnnConfig::paper(), InputSpec::full(), data)
    }
}

/// Reduced CNN for CPU runs on 4× downsampled frames.
pub fn cnn_desk() -> RunConfig {
    let mut cfg = cnn_run("cnn-desk", CnnConfig::desk(), InputSpec::desk(), DataSelection::default());
    cfg.train = TrainConfig {
        base_lr: 5e-4,
        decay_every: 4_000,
        batch_size: 16,
        total_iterations: 8_000,
        checkpoint_every: Some(2_000),
        ..cfg.train
    };
    cfg.cnn.dropout_rate = 0.0;
    cfg.train.dropout_rate = 0.0;
    cfg
}

/// Bidirectional length-5 head on top of [`cnn_desk`].
pub fn lstm_desk() -> RunConfig {
    let base = cnn_desk();
    let mut lstm = LstmConfig::new(Direction::Bidirectional, 5);
    lstm.hidden_width = 32;
    RunConfig {
        name: "lstm-desk".into(),
        lstm: Some(lstm),
        train: TrainConfig {
            phase: Phase::Lstm,
            base_lr: 1e-4,
            decay_every: 250,
            batch_size: 8,
            total_iterations: 500,
            checkpoint_every: Some(250),
            ..base.train
        },
        ..base
    }
}

fn frost_camera() -> CameraModel {
    CameraModel::new(250.0, 250.0, (120.0, 60.0), (240, 120)).expect("valid camera")
}

/// All shipped presets in listing order.
pub fn presets() -> Vec<RunConfig> {
    let mut out = vec![
        cnn_run(
            "frost-240",
            CnnConfig::baseline(240),
            InputSpec {
                canonical: frost_camera(),
                downsample: 1,
            },
            DataSelection::kitti_only(),
        ),
        cnn_run("frost-280", CnnConfig::baseline(280), InputSpec::full(), DataSelection::kitti_only()),
        cnn_run("cnn-paper", CnnConfig::paper(), InputSpec::full(), DataSelection::kitti_only()),
        cnn_run("cnn-synthetic", CnnConfig::paper(), InputSpec::full(), DataSelection::synthetic_only(None)),
        cnn_run("cnn-mixed", CnnConfig::paper(), InputSpec::full(), DataSelection::mixed()),
        lstm_run("lstm-b19-kitti", Direction::Bidirectional, 19, DataSelection::kitti_only()),
        lstm_run("lstm-b19-synthetic", Direction::Bidirectional, 19, DataSelection::synthetic_only(None)),
        lstm_run("lstm-b19-mixed", Direction::Bidirectional, 19, DataSelection::mixed()),
    ];
    for direction in [Direction::Unidirectional, Direction::Bidirectional] {
        for length in [5, 11, 19] {
            let name = format!("lstm-{}{length}", direction.short_name().to_lowercase());
            out.push(lstm_run(&name, direction, length, DataSelection::kitti_only()));
        }
    }
    for last in 1..=6 {
        let maps = (1..=last).map(|k| format!("map{k}")).collect();
        let name = if last == 1 { "maps-1".to_string() } else { format!("maps-1-{last}") };
        out.push(cnn_run(&name, CnnConfig::paper(), InputSpec::full(), DataSelection::synthetic_only(Some(maps))));
    }
    out.push(cnn_desk());
    out.push(lstm_desk());
    out
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let all = presets();
    match all.iter().find(|p| p.name == name) {
        Some(p) => Ok(p.clone()),
        None => {
            let names: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
            Err(Error::config(format!("unknown preset `{name}`; available presets: {}", names.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_unique() {
        let all = presets();
        for p in &all {
            p.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
        let mut names: Vec<_> = all.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn cnn_paper_values() {
        let p = preset("cnn-paper").unwrap();
        assert_eq!(p.train.batch_size, 75);
        assert_eq!(p.train.base_lr, 1e-4);
        assert_eq!(p.train.total_iterations, 100_000);
        assert_eq!(p.train.dropout_rate, 0.15);
    }

    #[test]
    fn unknown_preset_lists_names() {
        let msg = preset("nope").unwrap_err().to_string();
        assert!(msg.contains("cnn-paper") && msg.contains("maps-1-6") && msg.contains("lstm-u11"));
    }

    #[test]
    fn table_lengths_present() {
        for name in ["lstm-u5", "lstm-u11", "lstm-u19", "lstm-b5", "lstm-b11", "lstm-b19"] {
            let p = preset(name).unwrap();
            assert_eq!(p.train.batch_size, 16);
            assert_eq!(p.train.base_lr, 2e-5);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let p = preset("lstm-b19-mixed").unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), p);
    }
}
