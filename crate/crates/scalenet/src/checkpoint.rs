//! Checkpoint files.
//!
//! Layout: the magic bytes `SCKP`, a little-endian `u32` header length, a
//! JSON header, then every array of the header's list as little-endian
//! `f32`s in list order. Arrays are the model parameters followed by the
//! two Adam moment sets.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use scalenet_core::model::{config_fingerprint, DistanceModel};
use scalenet_core::nn::{ParamSet, Tensor};
use scalenet_core::training::{Adam, AdamConfig, TrainerState};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub run: RunConfig,
    /// Completed training iterations.
    pub step: u64,
    pub config_fingerprint: u64,
    pub param_fingerprint: u64,
    pub adam: AdamConfig,
    pub adam_steps: u64,
    pub arrays: Vec<ArrayEntry>,
}

/// A trained (or initial) model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn model(&self) -> &DistanceModel<f32> {
        &self.state.model
    }

    pub fn header(&self) -> CheckpointHeader {
        let params = self.state.model.all_params();
        let mut arrays = entries("", &params);
        arrays.extend(entries("adam.m/", &self.state.adam.first_moment));
        arrays.extend(entries("adam.v/", &self.state.adam.second_moment));
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            run: self.run.clone(),
            step: self.state.step,
            config_fingerprint: self.state.model.config_fingerprint(),
            param_fingerprint: params.fingerprint(),
            adam: self.state.adam.config,
            adam_steps: self.state.adam.steps,
            arrays,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::data(e.to_string()))?;
        let mut buf = Vec::with_capacity(header.len() + 8 + 12 * self.state.model.all_params().num_scalars());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for set in [&self.state.model.all_params(), &self.state.adam.first_moment, &self.state.adam.second_moment] {
            for (_, t) in &set.entries {
                for v in &t.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        // Write-then-rename so an interrupted save never clobbers the last good file.
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(&buf).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::data(format!("{}: {msg}", path.display()));
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(Error::io(path))?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(8..8 + header_len).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| bad(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("format_version {} is not supported", header.format_version)));
        }
        let mut rest = &bytes[8 + header_len..];
        let mut sets: [ParamSet<f32>; 3] = Default::default();
        for entry in &header.arrays {
            let (slot, name) = if let Some(n) = entry.name.strip_prefix("adam.m/") {
                (1, n)
            } else if let Some(n) = entry.name.strip_prefix("adam.v/") {
                (2, n)
            } else {
                (0, entry.name.as_str())
            };
            let count: usize = entry.shape.iter().product();
            if rest.len() < 4 * count {
                return Err(bad(format!("truncated array `{}`", entry.name)));
            }
            let (head, tail) = rest.split_at(4 * count);
            let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            sets[slot].push(name, Tensor { shape: entry.shape.clone(), data });
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let [params, first_moment, second_moment] = sets;
        let run = header.run;
        run.validate()?;
        let expected = config_fingerprint(&run.cnn, run.lstm.as_ref());
        if expected != header.config_fingerprint {
            return Err(scalenet_core::Error::FingerprintMismatch {
                expected,
                found: header.config_fingerprint,
            }
            .into());
        }
        if params.fingerprint() != header.param_fingerprint {
            return Err(bad("parameter fingerprint does not match the stored arrays".into()));
        }
        if !(params.same_layout(&first_moment) && params.same_layout(&second_moment)) {
            return Err(bad("optimizer state does not match the parameters".into()));
        }
        let model = DistanceModel::from_params(run.cnn.clone(), run.lstm.clone(), params)?;
        let state = TrainerState {
            config: run.train.clone(),
            model,
            adam: Adam {
                config: header.adam,
                first_moment,
                second_moment,
                steps: header.adam_steps,
            },
            step: header.step,
        };
        Ok(Self { run, state })
    }
}

fn entries(prefix: &str, set: &ParamSet<f32>) -> Vec<ArrayEntry> {
    set.entries
        .iter()
        .map(|(name, t)| ArrayEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::cnn_desk;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = cnn_desk();
        let model = DistanceModel::new_cnn(run.cnn.clone(), 3).unwrap();
        let mut state = TrainerState::new(run.train.clone(), model).unwrap();
        state.step = 7;
        state.adam.steps = 7;
        state.adam.first_moment.data_mut(0)[0] = 0.25;
        let ck = Checkpoint { run, state };
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let run = cnn_desk();
        let state = TrainerState::new(run.train.clone(), DistanceModel::new_cnn(run.cnn.clone(), 3).unwrap()).unwrap();
        let path = dir.path().join("a.ckpt");
        Checkpoint { run, state }.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        bytes[8 + header_len + 100] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        bytes[8 + header_len + 100] ^= 0x40;
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        std::fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
