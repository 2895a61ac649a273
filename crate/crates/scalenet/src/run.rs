//! Training, evaluation and reporting drivers behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use scalenet_core::evaluation::{predict_from_cnn, EvalReport};
use scalenet_core::model::{Cnn, DistanceModel, Mode};
use scalenet_core::training::{train_cnn, train_lstm, Phase, StepRecord, TrainerState};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, LabelledPair, PairSet, ThreadLoader, WindowSet};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub workers: usize,
    pub config: serde_json::Value,
    /// Hex fingerprints by name.
    pub fingerprints: BTreeMap<String, String>,
}

impl Stamp {
    pub fn new(subcommand: &str, seed: u64, workers: usize, config: &impl Serialize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            workers,
            config: serde_json::to_value(config).expect("configs serialize"),
            fingerprints: BTreeMap::new(),
        }
    }

    pub fn fingerprint(mut self, name: &str, value: u64) -> Self {
        self.fingerprints.insert(name.to_string(), format!("{value:016x}"));
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::write_json(&dir.join("stamp.json"), self)
    }
}

/// Keeps the frames of `manifests` selected by the run's data section and
/// drops manifests left empty.
pub fn select_data(run: &RunConfig, manifests: &[DatasetManifest]) -> Vec<DatasetManifest> {
    manifests
        .iter()
        .map(|m| m.filtered(|f| run.data.keeps(m.origin, f)))
        .filter(|m| !m.frames.is_empty())
        .collect()
}

pub struct TrainRequest {
    pub run: RunConfig,
    pub manifests: Vec<DatasetManifest>,
    pub out: PathBuf,
    pub workers: usize,
    /// Trained CNN an LSTM run starts from.
    pub init: Option<Checkpoint>,
    /// Checkpoint of this run to continue from.
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Training samples (pairs or windows) after turn duplication.
    pub samples: usize,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

fn initial_model(req: &TrainRequest) -> Result<DistanceModel<f32>> {
    let run = &req.run;
    if let Some(ck) = &req.resume {
        if ck.model().config_fingerprint() != scalenet_core::model::config_fingerprint(&run.cnn, run.lstm.as_ref()) {
            return Err(Error::config("resume checkpoint was trained with a different model configuration"));
        }
        return Ok(ck.model().clone());
    }
    match (&run.lstm, &req.init) {
        (None, _) => Ok(DistanceModel::new_cnn(run.cnn.clone(), run.train.seed)?),
        (Some(_), None) => Err(Error::config("an lstm run needs a trained CNN checkpoint to start from")),
        (Some(lstm), Some(init)) => {
            let expected = run.cnn.fingerprint();
            let found = init.run.cnn.fingerprint();
            if expected != found {
                return Err(scalenet_core::Error::FingerprintMismatch { expected, found }.into());
            }
            let cnn = Cnn::from_params(run.cnn.clone(), init.model().cnn.params().clone())?;
            Ok(DistanceModel::with_lstm(cnn, lstm.clone(), run.train.seed)?)
        }
    }
}

/// Trains a model, writing a per-step CSV log, periodic checkpoints, the
/// final checkpoint and a stamp into `req.out`. A numerical failure leaves
/// the checkpoints written so far in place.
pub fn train(req: TrainRequest) -> Result<TrainOutcome> {
    let run = &req.run;
    run.validate()?;
    let selected = select_data(run, &req.manifests);
    if selected.is_empty() {
        return Err(Error::data(format!("run `{}` selects no frames from the given manifests", run.name)));
    }
    let data = Dataset::new(&selected, run.input.clone())?;
    let mut state = match &req.resume {
        Some(ck) => TrainerState {
            config: run.train.clone(),
            model: initial_model(&req)?,
            ..ck.state.clone()
        },
        None => TrainerState::new(run.train.clone(), initial_model(&req)?)?,
    };

    std::fs::create_dir_all(&req.out).map_err(Error::io(&req.out))?;
    let log_path = req.out.join(TRAIN_LOG);
    let mut log_file = if req.resume.is_some() && log_path.is_file() {
        std::fs::OpenOptions::new().append(true).open(&log_path).map_err(Error::io(&log_path))?
    } else {
        let mut f = std::fs::File::create(&log_path).map_err(Error::io(&log_path))?;
        writeln!(f, "step,lr,loss,wall_time_s").map_err(Error::io(&log_path))?;
        f
    };
    let started = Instant::now();
    let ckpt_dir = req.out.join("checkpoints");
    let mut on_step = |s: &TrainerState, rec: &StepRecord| -> scalenet_core::Result<()> {
        writeln!(log_file, "{},{},{},{:.3}", rec.step, rec.lr, rec.loss, started.elapsed().as_secs_f64())
            .map_err(|e| scalenet_core::Error::Validation(format!("{}: {e}", log_path.display())))?;
        if s.is_checkpoint_step() && !s.is_done() {
            let ck = Checkpoint {
                run: run.clone(),
                state: s.clone(),
            };
            ck.save(&ckpt_dir.join(format!("step_{:07}.ckpt", s.step)))
                .map_err(|e| scalenet_core::Error::Validation(e.to_string()))?;
        }
        Ok(())
    };

    let loader = ThreadLoader { workers: req.workers };
    let (log, samples) = match run.train.phase {
        Phase::Cnn => {
            let source = PairSet {
                store: &data.store,
                pairs: data.training_pairs(&run.sampler)?,
                augment: run.train.augment.clone(),
            };
            if source.pairs.is_empty() {
                return Err(Error::data("no training pairs under the sampler configuration"));
            }
            (train_cnn(&mut state, &source, &loader, &mut on_step)?, source.pairs.len())
        }
        Phase::Lstm => {
            let lstm = run.lstm.as_ref().expect("validated");
            let source = WindowSet {
                store: &data.store,
                windows: data.training_windows(&run.sampler, lstm.window_length, lstm.direction)?,
                augment: run.train.augment.clone(),
            };
            if source.windows.is_empty() {
                return Err(Error::data(format!("no trajectory is long enough for windows of {} pairs", lstm.window_length)));
            }
            (train_lstm(&mut state, &source, &loader, &mut on_step)?, source.windows.len())
        }
    };

    let checkpoint = Checkpoint { run: run.clone(), state };
    checkpoint.save(&req.out.join(FINAL_CHECKPOINT))?;
    Stamp::new("train", run.train.seed, req.workers, run)
        .fingerprint("config", checkpoint.model().config_fingerprint())
        .fingerprint("params", checkpoint.model().param_fingerprint())
        .write(&req.out)?;
    Ok(TrainOutcome { checkpoint, log, samples })
}

/// Eval-mode CNN outputs of `pairs`, computed on up to `workers` threads.
fn cnn_outputs(model: &DistanceModel<f32>, data: &Dataset, pairs: &[LabelledPair], workers: usize) -> Result<Vec<scalenet_core::model::CnnSampleOutput<f32>>> {
    let none = scalenet_core::imaging::AugmentConfig::disabled();
    let one = |p: &LabelledPair| -> Result<_> {
        let input = data.store.pair_input(p.first, p.second, &none, 0)?;
        Ok(model.cnn.forward_sample(&input, Mode::Eval)?)
    };
    let workers = workers.clamp(1, pairs.len().max(1));
    if workers == 1 {
        return pairs.iter().map(one).collect();
    }
    let chunk = pairs.len().div_ceil(workers);
    let parts: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs.chunks(chunk).map(|part| scope.spawn(move || part.iter().map(one).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("eval thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(pairs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Everything an evaluation produces before it is written out.
pub struct Evaluation {
    pub report: EvalReport,
    pub data: Dataset,
    /// For each record of the report, the pair it came from.
    pub pairs: Vec<LabelledPair>,
}

/// Predicts every consecutive pair of the manifests.
pub fn evaluate(checkpoint: &Checkpoint, manifests: &[DatasetManifest], workers: usize) -> Result<Evaluation> {
    let data = Dataset::new(manifests, checkpoint.run.input.clone())?;
    let model = checkpoint.model();
    let mut records = Vec::new();
    let mut kept = Vec::new();
    let mut uncovered = 0;
    for seq in data.eval_sequences()? {
        let outputs = cnn_outputs(model, &data, &seq, workers)?;
        for (p, pred) in seq.into_iter().zip(predict_from_cnn(model, &outputs)?) {
            match pred {
                Some(pred) => {
                    records.push(p.record(&data.store, pred)?);
                    kept.push(p);
                }
                None => uncovered += 1,
            }
        }
    }
    if records.is_empty() {
        return Err(Error::data("no evaluable pairs in the given manifests"));
    }
    let report = EvalReport::from_records(records, uncovered, model.param_fingerprint(), model.config_fingerprint())?;
    Ok(Evaluation { report, data, pairs: kept })
}

/// The JSON document `eval` writes. Holds no paths or times, so repeated
/// evaluations of the same inputs give identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub run: String,
    pub step: u64,
    pub report: EvalReport,
}

pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

pub fn write_eval_outputs(out: &Path, checkpoint: &Checkpoint, eval: &Evaluation, workers: usize) -> Result<()> {
    let file = ReportFile {
        run: checkpoint.run.name.clone(),
        step: checkpoint.state.step,
        report: eval.report.clone(),
    };
    crate::write_json(&out.join(REPORT_FILE), &file)?;
    write_predictions(&out.join(PREDICTIONS_FILE), &eval.report)?;
    crate::plots::write_all(&out.join("plots"), eval)?;
    Stamp::new("eval", checkpoint.run.train.seed, workers, &checkpoint.run)
        .fingerprint("config", eval.report.config_fingerprint)
        .fingerprint("params", eval.report.model_fingerprint)
        .write(out)
}

fn write_predictions(path: &Path, report: &EvalReport) -> Result<()> {
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sequence", "camera", "frame_i", "frame_j", "gt_m", "pred_m", "error_m"]).map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.sequence_id.clone(),
            r.camera_id.to_string(),
            r.frame_i.to_string(),
            r.frame_j.to_string(),
            r.gt.to_string(),
            r.pred.to_string(),
            r.error().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Table of μ and σ per sequence (columns) for each run (rows).
pub fn report_table(reports: &[ReportFile]) -> String {
    let mut sequences: Vec<String> = Vec::new();
    for r in reports {
        for s in &r.report.per_sequence {
            let id = s.sequence_id.clone().unwrap_or_default();
            if !sequences.contains(&id) {
                sequences.push(id);
            }
        }
    }
    let name_w = reports.iter().map(|r| r.run.len()).max().unwrap_or(0).max(3);
    let col_w = 17;
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "run");
    for s in sequences.iter().map(String::as_str).chain(["all"]) {
        let _ = write!(out, " | {s:^col_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<name_w$}", "");
    for _ in 0..=sequences.len() {
        let _ = write!(out, " | {:>8} {:>8}", "mu", "sigma");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_w + (col_w + 3) * (sequences.len() + 1)));
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<name_w$}", r.run);
        for s in &sequences {
            match r.report.per_sequence.iter().find(|p| p.sequence_id.as_deref() == Some(s.as_str())) {
                Some(st) => {
                    let _ = write!(out, " | {:>8.3} {:>8.3}", st.mu, st.sigma);
                }
                None => {
                    let _ = write!(out, " | {:>8} {:>8}", "-", "-");
                }
            }
        }
        let _ = writeln!(out, " | {:>8.3} {:>8.3}", r.report.pooled.mu, r.report.pooled.sigma);
    }
    out
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let path = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
