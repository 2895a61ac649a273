//! Loss, learning-rate schedule, Adam, and the iteration-based CNN and LSTM
//! training loops.
//!
//! Training draws batches with replacement. Everything random in a step
//! derives from `(seed, step)` so a run resumed from a saved
//! [`TrainerState`] continues exactly like an uninterrupted one.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::imaging::AugmentConfig;
use crate::model::{Cnn, DistanceModel, Mode};
use crate::nn::{derive_seed, rng_from, ParamSet, Real};

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if pred.len() != target.len() {
        return Err(crate::error::shape_mismatch(target.len(), pred.len()));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub base_lr: f64,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many iterations (besides the final one).
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_decay_factor() -> f64 {
    2.0
}

impl TrainConfig {
    /// Batch 75, 100K iterations, lr 1e-4 halved every 10K.
    pub fn cnn_paper() -> Self {
        Self {
            phase: Phase::Cnn,
            base_lr: 1e-4,
            lr_decay_factor: 2.0,
            decay_every: 10_000,
            batch_size: 75,
            total_iterations: 100_000,
            dropout_rate: 0.15,
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: Some(10_000),
            adam: AdamConfig::default(),
        }
    }

    /// Batch 16, 15K iterations, lr 2e-5 halved every 2500.
    pub fn lstm_paper() -> Self {
        Self {
            phase: Phase::Lstm,
            base_lr: 2e-5,
            decay_every: 2_500,
            batch_size: 16,
            total_iterations: 15_000,
            checkpoint_every: Some(2_500),
            ..Self::cnn_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!(InvalidConfig, "base_lr must be positive, got {}", self.base_lr);
        }
        if !(self.lr_decay_factor >= 1.0) {
            bail!(InvalidConfig, "lr_decay_factor must be >= 1, got {}", self.lr_decay_factor);
        }
        if self.decay_every == 0 {
            bail!(InvalidConfig, "decay_every must be positive");
        }
        if self.batch_size == 0 {
            bail!(InvalidConfig, "batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(InvalidConfig, "dropout_rate must be in [0, 1), got {}", self.dropout_rate);
        }
        if self.checkpoint_every == Some(0) {
            bail!(InvalidConfig, "checkpoint_every must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            bail!(InvalidConfig, "invalid Adam hyperparameters {:?}", a);
        }
        self.augment.validate()
    }
}

/// `base_lr / factor^floor(step / decay_every)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.decay_every.max(1)).min(i32::MAX as u64) as i32;
    cfg.base_lr / libm::pow(cfg.lr_decay_factor, f64::from(halvings))
}

/// Adam first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first_moment: ParamSet<f32>,
    pub second_moment: ParamSet<f32>,
    pub steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        Self {
            config,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.steps.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - libm::pow(beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(beta2, f64::from(t));
        let step = (lr * libm::sqrt(c2) / c1) as f32;
        let eps_hat = (epsilon * libm::sqrt(c2)) as f32;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for k in 0..params.len() {
            let g = grads.data(k);
            let m = self.first_moment.data_mut(k);
            m.iter_mut().zip(g).for_each(|(m, g)| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.second_moment.data_mut(k);
            v.iter_mut().zip(g).for_each(|(v, g)| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.first_moment.data(k), self.second_moment.data(k));
            for ((p, m), v) in params.data_mut(k).iter_mut().zip(m).zip(v) {
                *p -= step * m / (libm::sqrtf(*v) + eps_hat);
            }
        }
    }
}

/// A labelled training pair, already stacked as `(H, W, 6)` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub input: Vec<f32>,
    pub label: f64,
}

/// A window of consecutive pairs with the label of its target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub inputs: Vec<Vec<f32>>,
    pub label: f64,
}

/// Random access to training pairs. `load` applies augmentation drawn
/// from `aug_seed`.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize, aug_seed: u64) -> Result<PairSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random access to training windows; all pairs of a window share one
/// augmentation draw.
pub trait WindowSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize, aug_seed: u64) -> Result<WindowSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads the samples of one batch, possibly in parallel. Implementations
/// must return results in slot order.
pub trait BatchLoader {
    fn load_batch<S: Sync + ?Sized, X: Send>(
        &self,
        source: &S,
        jobs: &[(usize, u64)],
        load: fn(&S, usize, u64) -> Result<X>,
    ) -> Result<Vec<X>>;
}

/// Loads sequentially on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialLoader;

impl BatchLoader for SerialLoader {
    fn load_batch<S: Sync + ?Sized, X: Send>(&self, source: &S, jobs: &[(usize, u64)], load: fn(&S, usize, u64) -> Result<X>) -> Result<Vec<X>> {
        jobs.iter().map(|&(i, s)| load(source, i, s)).collect()
    }
}

/// The sample indices and augmentation seeds of one step. Depends only on
/// `(seed, step)`.
pub fn batch_plan(seed: u64, step: u64, batch_size: usize, num_samples: usize) -> Vec<(usize, u64)> {
    let mut rng = rng_from(&[seed, step, 0xBA7C]);
    (0..batch_size)
        .map(|slot| (rng.random_range(0..num_samples), derive_seed(&[seed, step, slot as u64, 0xA6])))
        .collect()
}

fn dropout_seed(seed: u64, step: u64, slot: usize) -> u64 {
    derive_seed(&[seed, step, slot as u64, 0xD7])
}

/// Mean squared error of a CNN over a batch and its parameter gradients.
pub fn cnn_loss_and_grad<T: Real>(cnn: &Cnn<T>, inputs: &[&[f32]], labels: &[f64], modes: &[Mode]) -> Result<(f64, ParamSet<T>)> {
    let mut grads = cnn.params().zeros_like();
    let mut preds = Vec::with_capacity(inputs.len());
    let n = inputs.len() as f64;
    for ((x, &y), &mode) in inputs.iter().zip(labels).zip(modes) {
        let (out, cache) = cnn.forward_train(x, mode)?;
        let pred = out.distance.as_f64();
        preds.push(pred);
        cnn.backward(&cache, Some(T::of(2.0 * (pred - y) / n)), None, &mut grads);
    }
    Ok((mse_loss(&preds, labels)?, grads))
}

/// Mean squared error over a batch of windows, with gradients for the CNN
/// and the head concatenated as in [`DistanceModel::all_params`].
pub fn window_loss_and_grad<T: Real>(model: &DistanceModel<T>, windows: &[&[Vec<f32>]], labels: &[f64], seeds: &[Option<u64>]) -> Result<(f64, ParamSet<T>)> {
    let head = model.lstm.as_ref().ok_or_else(|| Error::InvalidConfig("model has no LSTM head".into()))?;
    let mut cnn_grads = model.cnn.params().zeros_like();
    let mut head_grads = head.params().zeros_like();
    let mut preds = Vec::with_capacity(windows.len());
    let n = windows.len() as f64;
    for ((window, &y), seed) in windows.iter().zip(labels).zip(seeds) {
        let mut caches = Vec::with_capacity(window.len());
        let mut embeddings = Vec::with_capacity(window.len());
        for (t, x) in window.iter().enumerate() {
            let mode = match seed {
                Some(s) => Mode::Train { seed: derive_seed(&[*s, t as u64]) },
                None => Mode::Eval,
            };
            let (out, cache) = model.cnn.forward_train(x, mode)?;
            embeddings.push(out.embedding);
            caches.push(cache);
        }
        let refs: Vec<&[T]> = embeddings.iter().map(|e| e.as_slice()).collect();
        let (out, head_cache) = head.forward_train(&refs)?;
        let pred = out.as_f64();
        preds.push(pred);
        let d_emb = head.backward(&head_cache, T::of(2.0 * (pred - y) / n), &mut head_grads);
        for (cache, d) in caches.iter().zip(&d_emb) {
            if d.iter().any(|v| *v != T::zero()) {
                model.cnn.backward(cache, None, Some(d), &mut cnn_grads);
            }
        }
    }
    cnn_grads.entries.extend(head_grads.entries);
    Ok((mse_loss(&preds, labels)?, cnn_grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Everything needed to continue a run: model, optimizer, and position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub model: DistanceModel<f32>,
    pub adam: Adam,
    /// Number of completed iterations.
    pub step: u64,
}

impl TrainerState {
    pub fn new(config: TrainConfig, model: DistanceModel<f32>) -> Result<Self> {
        config.validate()?;
        match (config.phase, model.lstm.is_some()) {
            (Phase::Cnn, true) => bail!(InvalidConfig, "CNN phase expects a model without an LSTM head"),
            (Phase::Lstm, false) => bail!(InvalidConfig, "LSTM phase expects a model with an LSTM head"),
            _ => {}
        }
        let adam = Adam::new(config.adam, &model.all_params());
        Ok(Self { config, model, adam, step: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_iterations
    }

    /// Iterations whose end should produce a checkpoint.
    pub fn is_checkpoint_step(&self) -> bool {
        self.config.checkpoint_every.is_some_and(|k| self.step % k == 0)
    }

    fn apply(&mut self, loss: f64, grads: ParamSet<f32>) -> Result<StepRecord> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss at step {}", self.step)));
        }
        if grads.entries.iter().any(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(alloc::format!("gradient at step {}", self.step)));
        }
        let lr = lr_at(self.step, &self.config);
        let mut params = self.model.all_params();
        self.adam.update(&mut params, &grads, lr);
        self.model.set_all_params(&params);
        let record = StepRecord { step: self.step, lr, loss };
        self.step += 1;
        Ok(record)
    }

    /// Runs one CNN iteration. On error the state is left unchanged.
    pub fn step_cnn<S: PairSource + ?Sized, L: BatchLoader>(&mut self, source: &S, loader: &L) -> Result<StepRecord> {
        if source.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        let cfg = &self.config;
        let plan = batch_plan(cfg.seed, self.step, cfg.batch_size, source.len());
        let samples = loader.load_batch(source, &plan, S::load)?;
        let inputs: Vec<&[f32]> = samples.iter().map(|s| s.input.as_slice()).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let modes: Vec<Mode> = (0..samples.len())
            .map(|slot| Mode::Train {
                seed: dropout_seed(cfg.seed, self.step, slot),
            })
            .collect();
        let (loss, grads) = cnn_loss_and_grad(&self.model.cnn, &inputs, &labels, &modes)?;
        self.apply(loss, grads)
    }

    /// Runs one LSTM iteration, updating CNN and head jointly.
    pub fn step_lstm<S: WindowSource + ?Sized, L: BatchLoader>(&mut self, source: &S, loader: &L) -> Result<StepRecord> {
        if source.is_empty() {
            return Err(Error::Empty("training windows"));
        }
        let cfg = &self.config;
        let plan = batch_plan(cfg.seed, self.step, cfg.batch_size, source.len());
        let samples = loader.load_batch(source, &plan, S::load)?;
        let windows: Vec<&[Vec<f32>]> = samples.iter().map(|s| s.inputs.as_slice()).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
        let seeds: Vec<Option<u64>> = (0..samples.len()).map(|slot| Some(dropout_seed(cfg.seed, self.step, slot))).collect();
        let (loss, grads) = window_loss_and_grad(&self.model, &windows, &labels, &seeds)?;
        self.apply(loss, grads)
    }
}

/// Runs CNN iterations until `total_iterations`, calling `on_step` after
/// each one (e.g. to log or checkpoint).
pub fn train_cnn<S: PairSource + ?Sized, L: BatchLoader>(
    state: &mut TrainerState,
    source: &S,
    loader: &L,
    mut on_step: impl FnMut(&TrainerState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut log = Vec::new();
    while !state.is_done() {
        let rec = state.step_cnn(source, loader)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// LSTM counterpart of [`train_cnn`].
pub fn train_lstm<S: WindowSource + ?Sized, L: BatchLoader>(
    state: &mut TrainerState,
    source: &S,
    loader: &L,
    mut on_step: impl FnMut(&TrainerState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut log = Vec::new();
    while !state.is_done() {
        let rec = state.step_lstm(source, loader)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Root mean squared training error of the CNN in eval mode.
pub fn cnn_rmse<S: PairSource + ?Sized>(cnn: &Cnn<f32>, source: &S) -> Result<f64> {
    let mut preds = vec![0.0; source.len()];
    let mut labels = vec![0.0; source.len()];
    for i in 0..source.len() {
        let s = source.load(i, 0)?;
        preds[i] = f64::from(cnn.forward_sample(&s.input, Mode::Eval)?.distance);
        labels[i] = s.label;
    }
    Ok(libm::sqrt(mse_loss(&preds, &labels)?))
}
