//! The CNN distance regressor and the LSTM heads that run over its pair
//! embeddings.
//!
//! The CNN takes a pair of images stacked into six channels and runs a
//! stack of same-padded convolutions, each followed by ELU, 2×2 max pooling
//! and dropout, then fully connected layers with ELU and dropout between
//! them. The activation of the penultimate fully connected layer is the
//! pair embedding that the LSTM heads consume.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, shape_mismatch, Error, Result};
use crate::nn::{
    check_finite, dropout_mask, elu, elu_grad_from_output, init_weights, matmul, max_pool2, rng_from, ConvGeom, ParamSet, Real, Tensor,
};
use crate::sampling::{validate_window_length, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub padding: usize,
    pub filters: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, padding: usize, filters: usize) -> Self {
        Self { kernel, padding, filters }
    }
}

/// Layer configuration for the five-stage network.
pub const PAPER_CONV_SPECS: [ConvSpec; 5] = [
    ConvSpec::new(11, 5, 32),
    ConvSpec::new(9, 4, 64),
    ConvSpec::new(7, 3, 128),
    ConvSpec::new(5, 2, 256),
    ConvSpec::new(3, 1, 512),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub conv_specs: Vec<ConvSpec>,
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl CnnConfig {
    /// Five conv stages on 120×280×6 inputs, fc widths `[512, 1]`.
    pub fn paper() -> Self {
        Self {
            input_height: 120,
            input_width: 280,
            input_channels: 6,
            conv_specs: PAPER_CONV_SPECS.to_vec(),
            fc_widths: vec![512, 1],
            dropout_rate: 0.15,
        }
    }

    /// The three-stage baseline (first three stages of the five-stage stack).
    pub fn baseline(input_width: usize) -> Self {
        Self {
            input_width,
            conv_specs: PAPER_CONV_SPECS[..3].to_vec(),
            ..Self::paper()
        }
    }

    /// Reduced network for CPU-scale experiments on 4× downsampled inputs.
    pub fn desk() -> Self {
        Self {
            input_height: 30,
            input_width: 70,
            input_channels: 6,
            conv_specs: vec![ConvSpec::new(5, 2, 16), ConvSpec::new(5, 2, 32), ConvSpec::new(3, 1, 64)],
            fc_widths: vec![128, 1],
            dropout_rate: 0.15,
        }
    }

    /// Spatial shape `(channels, height, width)` entering each conv stage,
    /// followed by the shape after the last pool.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![(self.input_channels, self.input_height, self.input_width)];
        let (mut h, mut w) = (self.input_height, self.input_width);
        for spec in &self.conv_specs {
            h /= 2;
            w /= 2;
            shapes.push((spec.filters, h, w));
        }
        shapes
    }

    pub fn flatten_width(&self) -> usize {
        let (c, h, w) = *self.stage_shapes().last().unwrap();
        c * h * w
    }

    /// Width of the pair embedding (input of the last fc layer).
    pub fn embedding_width(&self) -> usize {
        match self.fc_widths.len() {
            0 | 1 => self.flatten_width(),
            n => self.fc_widths[n - 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            bail!(InvalidConfig, "input shape must be non-empty");
        }
        for (l, s) in self.conv_specs.iter().enumerate() {
            if s.kernel % 2 == 0 || s.padding != (s.kernel - 1) / 2 || s.filters == 0 {
                bail!(
                    InvalidConfig,
                    "conv{} must be same-padded with an odd kernel: kernel {}, padding {}, filters {}",
                    l + 1,
                    s.kernel,
                    s.padding,
                    s.filters
                );
            }
        }
        if self.stage_shapes().iter().any(|&(_, h, w)| h == 0 || w == 0) {
            bail!(InvalidConfig, "input {}x{} too small for {} pooling stages", self.input_height, self.input_width, self.conv_specs.len());
        }
        if self.fc_widths.last() != Some(&1) || self.fc_widths.contains(&0) {
            bail!(InvalidConfig, "fc widths must be positive and end in 1, got {:?}", self.fc_widths);
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(InvalidConfig, "dropout rate must be in [0, 1), got {}", self.dropout_rate);
        }
        Ok(())
    }

    fn hash_into(&self, h: &mut impl Hasher) {
        h.write(b"cnn");
        for v in [self.input_height, self.input_width, self.input_channels] {
            h.write_u64(v as u64);
        }
        for s in &self.conv_specs {
            for v in [s.kernel, s.padding, s.filters] {
                h.write_u64(v as u64);
            }
        }
        h.write_u8(0xff);
        for &w in &self.fc_widths {
            h.write_u64(w as u64);
        }
    }

    /// Architecture hash. Dropout is a training setting and is excluded.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        self.hash_into(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub direction: Direction,
    pub window_length: usize,
    pub hidden_width: usize,
}

impl LstmConfig {
    pub fn new(direction: Direction, window_length: usize) -> Self {
        Self {
            direction,
            window_length,
            hidden_width: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_window_length(self.window_length, self.direction)?;
        if self.hidden_width == 0 {
            bail!(InvalidConfig, "hidden width must be positive");
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        match self.direction {
            Direction::Unidirectional => 1,
            Direction::Bidirectional => 2,
        }
    }

    pub fn target_position(&self) -> usize {
        self.direction.target_position(self.window_length)
    }

    fn hash_into(&self, h: &mut impl Hasher) {
        h.write(b"lstm");
        h.write_u8(self.directions() as u8);
        h.write_u64(self.window_length as u64);
        h.write_u64(self.hidden_width as u64);
    }
}

/// Fingerprint of a full model configuration (CNN plus optional head).
pub fn config_fingerprint(cnn: &CnnConfig, lstm: Option<&LstmConfig>) -> u64 {
    let mut h = fnv::FnvHasher::default();
    cnn.hash_into(&mut h);
    if let Some(l) = lstm {
        l.hash_into(&mut h);
    }
    h.finish()
}

/// Trainable parameters per layer, from closed-form sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub conv: Vec<usize>,
    pub fc: Vec<usize>,
    pub lstm: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.conv.iter().sum::<usize>() + self.fc.iter().sum::<usize>() + self.lstm
    }
}

pub fn param_count(cnn: &CnnConfig, lstm: Option<&LstmConfig>) -> ParamCount {
    let mut c_in = cnn.input_channels;
    let conv = cnn
        .conv_specs
        .iter()
        .map(|s| {
            let n = s.kernel * s.kernel * c_in * s.filters + s.filters;
            c_in = s.filters;
            n
        })
        .collect();
    let mut width = if cnn.conv_specs.is_empty() && cnn.fc_widths.is_empty() { 0 } else { cnn.flatten_width() };
    let fc = cnn
        .fc_widths
        .iter()
        .map(|&w| {
            let n = width * w + w;
            width = w;
            n
        })
        .collect();
    let lstm = lstm.map_or(0, |l| {
        let (e, h, d) = (cnn.embedding_width(), l.hidden_width, l.directions());
        d * (4 * h * (e + h) + 4 * h) + d * h + 1
    });
    ParamCount { conv, fc, lstm }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks derive from the seed.
    Train { seed: u64 },
}

struct ConvStageCache<T> {
    input: Vec<T>,
    activation: Vec<T>,
    pool_index: Vec<u32>,
    mask: Option<Vec<T>>,
}

struct FcStageCache<T> {
    input: Vec<T>,
    /// Post-ELU output (absent for the final linear layer).
    activation: Option<Vec<T>>,
    mask: Option<Vec<T>>,
}

/// Saved activations of one sample, needed for the backward pass.
pub struct CnnCache<T> {
    conv: Vec<ConvStageCache<T>>,
    fc: Vec<FcStageCache<T>>,
}

#[derive(Debug, Clone)]
pub struct CnnSampleOutput<T> {
    pub distance: T,
    pub embedding: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct CnnOutput<T> {
    pub distances: Vec<T>,
    pub embeddings: Vec<Vec<T>>,
}

/// The convolutional distance regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn<T> {
    cfg: CnnConfig,
    params: ParamSet<T>,
}

impl<T: Real> Cnn<T> {
    pub fn new(cfg: CnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, 0xC0_44]);
        let mut params = ParamSet::new();
        let mut c_in = cfg.input_channels;
        for (l, s) in cfg.conv_specs.iter().enumerate() {
            let fan_in = c_in * s.kernel * s.kernel;
            params.push(
                format!("conv{}.weight", l + 1),
                Tensor {
                    shape: vec![s.filters, fan_in],
                    data: init_weights(&mut rng, s.filters * fan_in, fan_in),
                },
            );
            params.push(format!("conv{}.bias", l + 1), Tensor::zeros(&[s.filters]));
            c_in = s.filters;
        }
        let mut width = cfg.flatten_width();
        for (m, &w) in cfg.fc_widths.iter().enumerate() {
            params.push(
                format!("fc{}.weight", m + 1),
                Tensor {
                    shape: vec![w, width],
                    data: init_weights(&mut rng, w * width, width),
                },
            );
            params.push(format!("fc{}.bias", m + 1), Tensor::zeros(&[w]));
            width = w;
        }
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: CnnConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Cnn::<T>::new(cfg.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(shape_mismatch(
                reference.params.entries.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect::<Vec<_>>(),
                params.entries.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect::<Vec<_>>(),
            ));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn input_len(&self) -> usize {
        self.cfg.input_height * self.cfg.input_width * self.cfg.input_channels
    }

    fn conv_geom(&self, l: usize) -> ConvGeom {
        let (c, h, w) = self.cfg.stage_shapes()[l];
        let s = self.cfg.conv_specs[l];
        ConvGeom {
            in_channels: c,
            out_channels: s.filters,
            height: h,
            width: w,
            kernel: s.kernel,
            padding: s.padding,
        }
    }

    /// Runs one sample given as interleaved `(H, W, C)` values.
    pub fn forward_sample(&self, input_hwc: &[f32], mode: Mode) -> Result<CnnSampleOutput<T>> {
        let (out, _) = self.forward_impl(input_hwc, mode, false)?;
        Ok(out)
    }

    /// Like [`forward_sample`](Self::forward_sample) but keeps what the
    /// backward pass needs.
    pub fn forward_train(&self, input_hwc: &[f32], mode: Mode) -> Result<(CnnSampleOutput<T>, CnnCache<T>)> {
        let (out, cache) = self.forward_impl(input_hwc, mode, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Batched forward pass. In train mode the dropout seed of sample `b`
    /// derives from `(seed, b)`.
    pub fn forward(&self, batch: &[&[f32]], mode: Mode) -> Result<CnnOutput<T>> {
        let mut distances = Vec::with_capacity(batch.len());
        let mut embeddings = Vec::with_capacity(batch.len());
        for (b, x) in batch.iter().enumerate() {
            let m = match mode {
                Mode::Eval => Mode::Eval,
                Mode::Train { seed } => Mode::Train {
                    seed: crate::nn::derive_seed(&[seed, b as u64]),
                },
            };
            let out = self.forward_sample(x, m)?;
            distances.push(out.distance);
            embeddings.push(out.embedding);
        }
        Ok(CnnOutput { distances, embeddings })
    }

    fn forward_impl(&self, input_hwc: &[f32], mode: Mode, keep: bool) -> Result<(CnnSampleOutput<T>, Option<CnnCache<T>>)> {
        let cfg = &self.cfg;
        if input_hwc.len() != self.input_len() {
            return Err(shape_mismatch(
                (cfg.input_height, cfg.input_width, cfg.input_channels),
                format!("{} values", input_hwc.len()),
            ));
        }
        let mut rng: Option<ChaCha8Rng> = match mode {
            Mode::Train { seed } if cfg.dropout_rate > 0.0 => Some(rng_from(&[seed, 0xD0])),
            _ => None,
        };

        // HWC -> CHW, shifted from [0, 1] to [-0.5, 0.5]
        let (c0, h0, w0) = (cfg.input_channels, cfg.input_height, cfg.input_width);
        let mut x: Vec<T> = vec![T::zero(); input_hwc.len()];
        for (p, px) in input_hwc.chunks_exact(c0).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                x[c * h0 * w0 + p] = T::of(f64::from(v) - 0.5);
            }
        }
        check_finite(&x, "input")?;

        let mut conv_caches = Vec::new();
        let mut cols = Vec::new();
        for l in 0..cfg.conv_specs.len() {
            let g = self.conv_geom(l);
            cols.resize(g.patch_len() * g.pixels(), T::zero());
            g.im2col(&x, &mut cols);
            let weight = self.params.data(2 * l);
            let bias = self.params.data(2 * l + 1);
            let mut z = vec![T::zero(); g.out_channels * g.pixels()];
            matmul(g.out_channels, g.pixels(), g.patch_len(), weight, false, &cols, false, T::zero(), &mut z);
            for (o, row) in z.chunks_exact_mut(g.pixels()).enumerate() {
                let b = bias[o];
                row.iter_mut().for_each(|v| *v = elu(*v + b));
            }
            check_finite(&z, &format!("conv{}", l + 1))?;
            let (mut pooled, pool_index) = max_pool2(&z, g.out_channels, g.height, g.width);
            let mask = rng.as_mut().map(|r| dropout_mask::<T>(r, pooled.len(), cfg.dropout_rate));
            if let Some(m) = &mask {
                pooled.iter_mut().zip(m).for_each(|(v, s)| *v *= *s);
            }
            let input = core::mem::replace(&mut x, pooled);
            if keep {
                conv_caches.push(ConvStageCache {
                    input,
                    activation: z,
                    pool_index,
                    mask,
                });
            }
        }

        let n_fc = cfg.fc_widths.len();
        let mut fc_caches = Vec::new();
        let mut embedding = if n_fc <= 1 { Some(x.clone()) } else { None };
        let base = 2 * cfg.conv_specs.len();
        for m in 0..n_fc {
            let out_w = cfg.fc_widths[m];
            let weight = self.params.data(base + 2 * m);
            let bias = self.params.data(base + 2 * m + 1);
            let mut z = bias.to_vec();
            matmul(out_w, 1, x.len(), weight, false, &x, false, T::one(), &mut z);
            let last = m + 1 == n_fc;
            let (activation, mask, next) = if last {
                (None, None, z)
            } else {
                z.iter_mut().for_each(|v| *v = elu(*v));
                if m + 2 == n_fc {
                    embedding = Some(z.clone());
                }
                let mask = rng.as_mut().map(|r| dropout_mask::<T>(r, z.len(), cfg.dropout_rate));
                let mut next = z.clone();
                if let Some(mk) = &mask {
                    next.iter_mut().zip(mk).for_each(|(v, s)| *v *= *s);
                }
                (Some(z), mask, next)
            };
            check_finite(&next, &format!("fc{}", m + 1))?;
            let input = core::mem::replace(&mut x, next);
            if keep {
                fc_caches.push(FcStageCache { input, activation, mask });
            }
        }
        let distance = x.first().copied().unwrap_or_else(T::zero);
        let out = CnnSampleOutput {
            distance,
            embedding: embedding.unwrap_or_default(),
        };
        let cache = keep.then_some(CnnCache {
            conv: conv_caches,
            fc: fc_caches,
        });
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for one sample. `d_distance` is the
    /// loss gradient at the distance output (`None` when the output is not
    /// used); `d_embedding` is an extra gradient arriving at the embedding.
    pub fn backward(&self, cache: &CnnCache<T>, d_distance: Option<T>, d_embedding: Option<&[T]>, grads: &mut ParamSet<T>) {
        let cfg = &self.cfg;
        let n_fc = cfg.fc_widths.len();
        let base = 2 * cfg.conv_specs.len();
        let emb_level = n_fc.saturating_sub(2);

        // Gradient w.r.t. the output of the current fc layer (post-dropout).
        let mut g: Option<Vec<T>> = d_distance.map(|d| vec![d]);
        for m in (0..n_fc).rev() {
            let c = &cache.fc[m];
            let out_w = cfg.fc_widths[m];
            let mut gz = match (&c.activation, g.take()) {
                (None, gout) => gout,
                (Some(act), gout) => {
                    let mut ga = gout.unwrap_or_else(|| vec![T::zero(); out_w]);
                    if let Some(mk) = &c.mask {
                        ga.iter_mut().zip(mk).for_each(|(v, s)| *v *= *s);
                    }
                    if m == emb_level && n_fc >= 2 {
                        if let Some(de) = d_embedding {
                            ga.iter_mut().zip(de).for_each(|(v, d)| *v += *d);
                        }
                    }
                    ga.iter_mut().zip(act).for_each(|(v, y)| *v *= elu_grad_from_output(*y));
                    Some(ga)
                }
            };
            let Some(gz) = gz.take() else {
                continue;
            };
            let in_w = c.input.len();
            {
                let dw = grads.data_mut(base + 2 * m);
                // dW (out_w × in_w) += gz ⊗ input
                matmul(out_w, in_w, 1, &gz, false, &c.input, false, T::one(), dw);
            }
            grads.data_mut(base + 2 * m + 1).iter_mut().zip(&gz).for_each(|(b, v)| *b += *v);
            let mut gx = vec![T::zero(); in_w];
            matmul(in_w, 1, out_w, self.params.data(base + 2 * m), true, &gz, false, T::zero(), &mut gx);
            g = Some(gx);
        }
        if n_fc <= 1 {
            if let Some(de) = d_embedding {
                let gx = g.get_or_insert_with(|| vec![T::zero(); de.len()]);
                gx.iter_mut().zip(de).for_each(|(v, d)| *v += *d);
            }
        }

        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        for l in (0..cfg.conv_specs.len()).rev() {
            let Some(mut gp) = g.take() else {
                return;
            };
            let c = &cache.conv[l];
            let geom = self.conv_geom(l);
            if let Some(mk) = &c.mask {
                gp.iter_mut().zip(mk).for_each(|(v, s)| *v *= *s);
            }
            let mut gz = vec![T::zero(); geom.out_channels * geom.pixels()];
            for (v, &i) in gp.iter().zip(&c.pool_index) {
                gz[i as usize] += *v;
            }
            gz.iter_mut().zip(&c.activation).for_each(|(v, y)| *v *= elu_grad_from_output(*y));

            cols.resize(geom.patch_len() * geom.pixels(), T::zero());
            geom.im2col(&c.input, &mut cols);
            {
                let dw = grads.data_mut(2 * l);
                matmul(geom.out_channels, geom.patch_len(), geom.pixels(), &gz, false, &cols, true, T::one(), dw);
            }
            for (b, row) in grads.data_mut(2 * l + 1).iter_mut().zip(gz.chunks_exact(geom.pixels())) {
                *b += row.iter().copied().sum::<T>();
            }
            if l > 0 {
                gcols.resize(geom.patch_len() * geom.pixels(), T::zero());
                matmul(geom.patch_len(), geom.pixels(), geom.out_channels, self.params.data(2 * l), true, &gz, false, T::zero(), &mut gcols);
                let mut gx = vec![T::zero(); geom.in_channels * geom.pixels()];
                geom.col2im(&gcols, &mut gx);
                g = Some(gx);
            }
        }
    }
}

struct LstmStep<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Gate activations `i, f, g, o`, each `hidden` wide.
    gates: Vec<T>,
    c: Vec<T>,
}

pub struct LstmCache<T> {
    /// Per direction, steps in processing order.
    steps: Vec<Vec<LstmStep<T>>>,
    features: Vec<T>,
}

/// Many-to-one LSTM over a window of pair embeddings with a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmHead<T> {
    cfg: LstmConfig,
    input_width: usize,
    params: ParamSet<T>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> LstmHead<T> {
    pub fn new(cfg: LstmConfig, input_width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_width == 0 {
            bail!(InvalidConfig, "LSTM input width must be positive");
        }
        let mut rng = rng_from(&[seed, 0x157]);
        let h = cfg.hidden_width;
        let mut params = ParamSet::new();
        for dir in ["fwd", "bwd"].iter().take(cfg.directions()) {
            params.push(
                format!("lstm.{dir}.w_ih"),
                Tensor {
                    shape: vec![4 * h, input_width],
                    data: init_weights(&mut rng, 4 * h * input_width, input_width + h),
                },
            );
            params.push(
                format!("lstm.{dir}.w_hh"),
                Tensor {
                    shape: vec![4 * h, h],
                    data: init_weights(&mut rng, 4 * h * h, input_width + h),
                },
            );
            let mut bias = Tensor::zeros(&[4 * h]);
            // Forget gate starts open.
            bias.data[h..2 * h].iter_mut().for_each(|v| *v = T::one());
            params.push(format!("lstm.{dir}.bias"), bias);
        }
        let feat = h * cfg.directions();
        params.push(
            "lstm.head.weight",
            Tensor {
                shape: vec![1, feat],
                data: init_weights(&mut rng, feat, feat),
            },
        );
        params.push("lstm.head.bias", Tensor::zeros(&[1]));
        Ok(Self { cfg, input_width, params })
    }

    pub fn from_params(cfg: LstmConfig, input_width: usize, params: ParamSet<T>) -> Result<Self> {
        let reference = LstmHead::<T>::new(cfg.clone(), input_width, 0)?;
        if !reference.params.same_layout(&params) {
            bail!(Validation, "LSTM parameter layout does not match the configuration");
        }
        Ok(Self { cfg, input_width, params })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.cfg
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Order in which direction `d` visits window positions; only the steps
    /// that can influence the target are run.
    fn schedule(&self, d: usize) -> Vec<usize> {
        let l = self.cfg.window_length;
        let t = self.cfg.target_position();
        if d == 0 {
            (0..=t).collect()
        } else {
            (t..l).rev().collect()
        }
    }

    fn check_window(&self, window: &[&[T]]) -> Result<()> {
        if window.len() != self.cfg.window_length {
            return Err(shape_mismatch(self.cfg.window_length, window.len()));
        }
        if let Some(x) = window.iter().find(|x| x.len() != self.input_width) {
            return Err(shape_mismatch(self.input_width, x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, window: &[&[T]]) -> Result<T> {
        Ok(self.forward_train(window)?.0)
    }

    pub fn forward_train(&self, window: &[&[T]]) -> Result<(T, LstmCache<T>)> {
        self.check_window(window)?;
        let h = self.cfg.hidden_width;
        let e = self.input_width;
        let mut steps_all = Vec::new();
        let mut features = Vec::with_capacity(h * self.cfg.directions());
        for d in 0..self.cfg.directions() {
            let w_ih = self.params.data(3 * d);
            let w_hh = self.params.data(3 * d + 1);
            let bias = self.params.data(3 * d + 2);
            let mut hs = vec![T::zero(); h];
            let mut cs = vec![T::zero(); h];
            let mut steps = Vec::new();
            for t in self.schedule(d) {
                let x = window[t];
                let mut z = bias.to_vec();
                matmul(4 * h, 1, e, w_ih, false, x, false, T::one(), &mut z);
                matmul(4 * h, 1, h, w_hh, false, &hs, false, T::one(), &mut z);
                let mut gates = z;
                for k in 0..h {
                    gates[k] = sigmoid(gates[k]);
                    gates[h + k] = sigmoid(gates[h + k]);
                    gates[2 * h + k] = gates[2 * h + k].tanh();
                    gates[3 * h + k] = sigmoid(gates[3 * h + k]);
                }
                let c: Vec<T> = (0..h).map(|k| gates[h + k] * cs[k] + gates[k] * gates[2 * h + k]).collect();
                let hn: Vec<T> = (0..h).map(|k| gates[3 * h + k] * c[k].tanh()).collect();
                steps.push(LstmStep {
                    x: x.to_vec(),
                    h_prev: core::mem::replace(&mut hs, hn),
                    c_prev: core::mem::replace(&mut cs, c.clone()),
                    gates,
                    c,
                });
            }
            features.extend_from_slice(&hs);
            steps_all.push(steps);
        }
        let head = 3 * self.cfg.directions();
        let w = self.params.data(head);
        let out = self.params.data(head + 1)[0] + w.iter().zip(&features).map(|(a, b)| *a * *b).sum::<T>();
        if !out.is_finite() {
            return Err(Error::NonFinite(String::from("lstm")));
        }
        Ok((out, LstmCache { steps: steps_all, features }))
    }

    /// Accumulates parameter gradients and returns the gradient for each
    /// window position's embedding.
    pub fn backward(&self, cache: &LstmCache<T>, d_out: T, grads: &mut ParamSet<T>) -> Vec<Vec<T>> {
        let h = self.cfg.hidden_width;
        let e = self.input_width;
        let dirs = self.cfg.directions();
        let head = 3 * dirs;
        let mut dx = vec![vec![T::zero(); e]; self.cfg.window_length];
        grads.data_mut(head).iter_mut().zip(&cache.features).for_each(|(g, f)| *g += d_out * *f);
        grads.data_mut(head + 1)[0] += d_out;
        let w_head = self.params.data(head).to_vec();
        for d in 0..dirs {
            let schedule = self.schedule(d);
            let mut dh: Vec<T> = w_head[d * h..(d + 1) * h].iter().map(|w| *w * d_out).collect();
            let mut dc = vec![T::zero(); h];
            for (step, &t) in cache.steps[d].iter().zip(&schedule).rev() {
                let gt = &step.gates;
                let mut dz = vec![T::zero(); 4 * h];
                for k in 0..h {
                    let (i, f, g, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
                    let tc = step.c[k].tanh();
                    let d_o = dh[k] * tc;
                    let dck = dc[k] + dh[k] * o * (T::one() - tc * tc);
                    dz[k] = dck * g * i * (T::one() - i);
                    dz[h + k] = dck * step.c_prev[k] * f * (T::one() - f);
                    dz[2 * h + k] = dck * i * (T::one() - g * g);
                    dz[3 * h + k] = d_o * o * (T::one() - o);
                    dc[k] = dck * f;
                }
                matmul(4 * h, e, 1, &dz, false, &step.x, false, T::one(), grads.data_mut(3 * d));
                matmul(4 * h, h, 1, &dz, false, &step.h_prev, false, T::one(), grads.data_mut(3 * d + 1));
                grads.data_mut(3 * d + 2).iter_mut().zip(&dz).for_each(|(b, v)| *b += *v);
                matmul(e, 1, 4 * h, self.params.data(3 * d), true, &dz, false, T::one(), &mut dx[t]);
                let mut dh_prev = vec![T::zero(); h];
                matmul(h, 1, 4 * h, self.params.data(3 * d + 1), true, &dz, false, T::zero(), &mut dh_prev);
                dh = dh_prev;
            }
        }
        dx
    }
}

/// A CNN, optionally followed by an LSTM head.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceModel<T> {
    pub cnn: Cnn<T>,
    pub lstm: Option<LstmHead<T>>,
}

impl<T: Real> DistanceModel<T> {
    pub fn new_cnn(cfg: CnnConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            cnn: Cnn::new(cfg, seed)?,
            lstm: None,
        })
    }

    /// Adds a freshly initialized head on top of an existing CNN.
    pub fn with_lstm(cnn: Cnn<T>, cfg: LstmConfig, seed: u64) -> Result<Self> {
        let width = cnn.config().embedding_width();
        Ok(Self {
            lstm: Some(LstmHead::new(cfg, width, seed)?),
            cnn,
        })
    }

    pub fn config_fingerprint(&self) -> u64 {
        config_fingerprint(self.cnn.config(), self.lstm.as_ref().map(|l| l.config()))
    }

    /// All parameters, CNN first.
    pub fn all_params(&self) -> ParamSet<T> {
        let mut p = self.cnn.params().clone();
        if let Some(l) = &self.lstm {
            p.entries.extend(l.params().entries.iter().cloned());
        }
        p
    }

    pub fn param_fingerprint(&self) -> u64 {
        self.all_params().fingerprint()
    }

    /// Rebuilds a model from a flat parameter set as produced by
    /// [`all_params`](Self::all_params).
    pub fn from_params(cnn_cfg: CnnConfig, lstm_cfg: Option<LstmConfig>, mut params: ParamSet<T>) -> Result<Self> {
        let n_cnn = 2 * (cnn_cfg.conv_specs.len() + cnn_cfg.fc_widths.len());
        if params.len() < n_cnn {
            return Err(Error::MissingParam(format!("expected at least {n_cnn} tensors")));
        }
        let rest = params.entries.split_off(n_cnn);
        let cnn = Cnn::from_params(cnn_cfg, params)?;
        let lstm = match lstm_cfg {
            Some(cfg) => Some(LstmHead::from_params(cfg, cnn.config().embedding_width(), ParamSet { entries: rest })?),
            None if rest.is_empty() => None,
            None => bail!(Validation, "unexpected extra parameter tensors for a CNN-only model"),
        };
        Ok(Self { cnn, lstm })
    }

    pub fn set_all_params(&mut self, params: &ParamSet<T>) {
        let n = self.cnn.params().len();
        for (k, (_, t)) in params.entries.iter().enumerate() {
            if k < n {
                self.cnn.params_mut().data_mut(k).copy_from_slice(&t.data);
            } else if let Some(l) = &mut self.lstm {
                l.params_mut().data_mut(k - n).copy_from_slice(&t.data);
            }
        }
    }
}
