//! The optimization loop: Adam with linear warmup, per-batch dead-feature
//! tracking, inference-threshold calibration, and training history.
//!
//! Precision policy: model parameters are stored as f32, but the optimizer
//! keeps an f64 master copy of every parameter (plus f64 moments), and loss
//! and diagnostic accumulation run in f64. Each step casts the masters down
//! to f32 for the forward/backward pass, so checkpoints stay 32-bit while the
//! update arithmetic never loses precision to accumulation order.
//!
//! The whole run is a pure function of `(dataset, config)`: shuffling, init,
//! and every reduction are fixed-order, so identical seeds produce
//! bit-identical checkpoints.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::sae::{self, Gradients, SaeModel, SparseBatch};
use crate::store::{self, EmbeddingDataset};
use crate::{Error, Result};

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Dictionary size M (must exceed the data dimensionality).
    pub dict_size: usize,
    /// Per-sample sparsity target k.
    pub k: usize,
    /// Number of passes over the data. Zero returns the initialized model.
    pub epochs: usize,
    /// Rows per batch; training always drops a short final batch so the
    /// batch-level budget `k * B` stays constant.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Steps of linear warmup before the peak rate; zero disables warmup.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay; zero (the default) skips the decay term.
    pub weight_decay: f64,
    /// Reanimation coefficient on dead-feature pre-activations.
    pub lambda: f64,
    pub seed: u64,
    /// A concept counts as dead for the loss when inactive across this many
    /// consecutive preceding batches (1 = just the previous batch).
    pub dead_window_batches: usize,
    /// Subtract the dataset mean before training.
    pub normalize_inputs: bool,
    /// Project decoder rows back to unit norm after every step.
    pub renormalize_decoder: bool,
}

impl TrainConfig {
    /// Defaults mirror the standard configuration where one exists: warmup
    /// 100, betas (0.9, 0.999), zero weight decay, alpha-style extras off.
    /// `lambda` defaults to 1e-3; there is no canonical value, so treat it as
    /// a tunable. Dimensions, k, lr, batch size, epochs, and seed have no
    /// meaningful defaults and must be set.
    pub fn new(
        dict_size: usize,
        k: usize,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Self {
        TrainConfig {
            dict_size,
            k,
            epochs,
            batch_size,
            lr,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            lambda: 1e-3,
            seed,
            dead_window_batches: 1,
            normalize_inputs: false,
            renormalize_decoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("betas must lie in (0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.dead_window_batches == 0 {
            return Err(Error::invalid("dead_window_batches must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based): linear ramp over the first
/// `warmup_steps` steps, constant afterwards.
pub fn lr_schedule(step: usize, lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return lr;
    }
    lr * (((step + 1) as f64) / warmup_steps as f64).min(1.0)
}

/// Adam moment buffers for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_lens: &[usize], eps: f64) -> Self {
        AdamState {
            step: 0,
            eps,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor, in the order
/// the state was built with. Decoupled weight decay is applied after the
/// Adam step, only when `weight_decay > 0`.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    lr_t: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::invalid("parameter count mismatch"));
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads.iter())
        .zip(state.m.iter().zip(state.v.iter()))
    {
        if p.len() != m.len() || g.len() != v.len() {
            return Err(Error::invalid("parameter shape mismatch"));
        }
    }

    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.len() {
            // m = beta1 * m + (1 - beta1) * g
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            // v = beta2 * v + (1 - beta2) * g^2
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr_t * m_hat / (v_hat.sqrt() + state.eps);
            if weight_decay > 0.0 {
                p[i] -= lr_t * weight_decay * p[i];
            }
        }
    }
    state.step = t;
    Ok(())
}

/// True at `j` iff concept `j` is active in zero samples of the batch.
pub fn dead_mask_for_batch(sparse: &SparseBatch) -> Vec<bool> {
    sparse.column_activity().into_iter().map(|a| !a).collect()
}

/// Exponential moving average of per-batch minimum active pre-activations,
/// used to calibrate the inference threshold. The first observation
/// initializes the average; decay is fixed at 0.99.
#[derive(Debug, Clone)]
pub struct ThresholdEma {
    value: Option<f64>,
}

pub const THRESHOLD_EMA_DECAY: f64 = 0.99;

impl ThresholdEma {
    pub fn new() -> Self {
        ThresholdEma { value: None }
    }

    pub fn update(&mut self, batch_min_active: f64) {
        self.value = Some(match self.value {
            None => batch_min_active,
            Some(prev) => {
                THRESHOLD_EMA_DECAY * prev + (1.0 - THRESHOLD_EMA_DECAY) * batch_min_active
            }
        });
    }

    /// The calibrated threshold; zero when no batch ever activated anything.
    pub fn value(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }
}

impl Default for ThresholdEma {
    fn default() -> Self {
        Self::new()
    }
}

/// Folds a finished stream of per-batch minima into a threshold.
pub fn calibrate_threshold(running_min_active: impl IntoIterator<Item = f64>) -> f64 {
    let mut ema = ThresholdEma::new();
    for x in running_min_active {
        ema.update(x);
    }
    ema.value()
}

/// One logged optimization step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub dead_count: usize,
}

/// End-of-run evaluation summary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalDiagnostics {
    pub r2: f64,
    pub mean_l0: f64,
    pub dead_fraction: f64,
    pub stable_rank: f64,
}

/// Per-step records plus the end-of-run diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub final_diagnostics: Option<FinalDiagnostics>,
}

/// Writes the history as JSON lines: one object per step, then one trailing
/// object with the final diagnostics when present.
pub fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &history.records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::invalid(format!("history encode: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    if let Some(fin) = &history.final_diagnostics {
        let line = serde_json::to_string(fin)
            .map_err(|e| Error::invalid(format!("history encode: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const ADAM_EPS: f64 = 1e-8;

/// f64 master copies of the parameters, updated by Adam and cast down to the
/// f32 model before every forward pass. Update order is fixed: b_dec, b_enc,
/// w_dec, w_enc.
struct MasterParams {
    b_dec: Vec<f64>,
    b_enc: Vec<f64>,
    w_dec: Vec<f64>,
    w_enc: Vec<f64>,
}

impl MasterParams {
    fn from_model(model: &SaeModel) -> Self {
        MasterParams {
            b_dec: model.b_dec.iter().map(|&v| v as f64).collect(),
            b_enc: model.b_enc.iter().map(|&v| v as f64).collect(),
            w_dec: model.w_dec.iter().map(|&v| v as f64).collect(),
            w_enc: model.w_enc.iter().map(|&v| v as f64).collect(),
        }
    }

    fn write_into(&self, model: &mut SaeModel) {
        for (slot, &v) in model.b_dec.iter_mut().zip(&self.b_dec) {
            *slot = v as f32;
        }
        for (slot, &v) in model.b_enc.iter_mut().zip(&self.b_enc) {
            *slot = v as f32;
        }
        for (slot, &v) in model.w_dec.iter_mut().zip(&self.w_dec) {
            *slot = v as f32;
        }
        for (slot, &v) in model.w_enc.iter_mut().zip(&self.w_enc) {
            *slot = v as f32;
        }
    }

    fn renormalize_decoder_rows(&mut self, dim_in: usize) {
        for row in self.w_dec.chunks_mut(dim_in) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }
}

/// Sliding window of per-batch column activity backing the dead mask.
struct DeadWindow {
    window: VecDeque<Vec<bool>>,
    capacity: usize,
}

impl DeadWindow {
    fn new(capacity: usize) -> Self {
        DeadWindow {
            window: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Dead = inactive in every remembered batch. With nothing remembered
    /// (the first batch) no concept counts as dead.
    fn mask(&self, dict_size: usize) -> Vec<bool> {
        if self.window.is_empty() {
            return vec![false; dict_size];
        }
        let mut dead = vec![true; dict_size];
        for activity in &self.window {
            for (d, &a) in dead.iter_mut().zip(activity.iter()) {
                if a {
                    *d = false;
                }
            }
        }
        dead
    }

    fn push(&mut self, activity: Vec<bool>) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(activity);
    }
}

/// Trains a fresh model on the dataset. Runs `epochs` passes of shuffled,
/// drop-last batches; each step encodes, sparsifies with BatchTopK, decodes,
/// evaluates the loss against the previous batches' dead mask, and applies
/// one Adam update at the warmed-up rate. Returns the final model (with the
/// calibrated threshold) and the history.
pub fn train(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<(SaeModel, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let dim = dataset.dim();
    let mut model = sae::init_sae(dim, config.dict_size, config.k, config.seed)?;

    // Optionally center the data; the model then trains in centered space.
    let train_data: Array2<f32> = if config.normalize_inputs {
        let stats = store::compute_stats(dataset)?;
        let mean32 = stats.mean.mapv(|v| v as f32);
        &dataset.data() - &mean32
    } else {
        dataset.data().to_owned()
    };
    let train_set = EmbeddingDataset::with_generated_ids(train_data, "train")?;

    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }

    let mut masters = MasterParams::from_model(&model);
    let mut adam = AdamState::new(
        &[
            masters.b_dec.len(),
            masters.b_enc.len(),
            masters.w_dec.len(),
            masters.w_enc.len(),
        ],
        ADAM_EPS,
    );
    let mut dead_window = DeadWindow::new(config.dead_window_batches);
    let mut ema = ThresholdEma::new();
    let mut epoch_counts = vec![0u64; config.dict_size];
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        epoch_counts.iter_mut().for_each(|c| *c = 0);
        for batch in store::batch_iter(&train_set, config.batch_size, config.seed, epoch, true) {
            masters.write_into(&mut model);

            let z_pre = sae::encode_pre(&model, batch.view())?;
            let sparse = sae::batch_topk(&z_pre, config.k);
            let dead = dead_window.mask(config.dict_size);
            let x_hat = sae::decode(&model, sparse.codes.view())?;
            let lb = sae::loss(
                batch.view(),
                x_hat.view(),
                z_pre.view(),
                &dead,
                config.lambda,
            )?;
            let g = sae::grads(&model, batch.view(), &sparse, &dead, config.lambda)?;

            let lr_t = lr_schedule(step as usize, config.lr, config.warmup_steps);
            apply_adam(&mut adam, &mut masters, &g, lr_t, config)?;
            if config.renormalize_decoder {
                masters.renormalize_decoder_rows(dim);
            }

            let activity = sparse.column_activity();
            for (c, &a) in epoch_counts.iter_mut().zip(activity.iter()) {
                if a {
                    *c += 1;
                }
            }
            if let Some(min_active) = sparse.min_active() {
                ema.update(min_active as f64);
            }
            dead_window.push(activity);

            history.records.push(StepRecord {
                step,
                lr: lr_t,
                total: lb.total,
                mse: lb.mse,
                dead_count: dead.iter().filter(|&&d| d).count(),
            });
            step += 1;
        }
    }

    masters.write_into(&mut model);
    model.theta = ema.value() as f32;

    // End-of-run evaluation over the full (centered, if requested) dataset
    // with the default inference mode. Dead fraction counts concepts that
    // never activated during the final epoch of training.
    let stats = store::compute_stats(&train_set)?;
    let codes = sae::encode_codes(&model, train_set.data(), sae::InferenceMode::TopK)?;
    let x_hat = sae::decode(&model, codes.view())?;
    let r2 = diagnostics::r2(train_set.data(), x_hat.view(), stats.mean.view())?;
    let sr = diagnostics::stable_rank(model.w_dec.view())?;
    history.final_diagnostics = Some(FinalDiagnostics {
        r2,
        mean_l0: diagnostics::mean_l0(codes.view()),
        dead_fraction: diagnostics::dead_fraction(&epoch_counts),
        stable_rank: sr.stable_rank,
    });

    Ok((model, history))
}

/// Runs one Adam update over the four parameter tensors in the fixed order
/// b_dec, b_enc, w_dec, w_enc.
fn apply_adam(
    adam: &mut AdamState,
    masters: &mut MasterParams,
    g: &Gradients,
    lr_t: f64,
    config: &TrainConfig,
) -> Result<()> {
    let g_b_dec: Vec<f64> = g.b_dec.iter().map(|&v| v as f64).collect();
    let g_b_enc: Vec<f64> = g.b_enc.iter().map(|&v| v as f64).collect();
    let g_w_dec: Vec<f64> = g.w_dec.iter().map(|&v| v as f64).collect();
    let g_w_enc: Vec<f64> = g.w_enc.iter().map(|&v| v as f64).collect();
    adam_step(
        adam,
        &mut [
            &mut masters.b_dec,
            &mut masters.b_enc,
            &mut masters.w_dec,
            &mut masters.w_enc,
        ],
        &[&g_b_dec, &g_b_enc, &g_w_dec, &g_w_enc],
        lr_t,
        config.beta1,
        config.beta2,
        config.weight_decay,
    )
}

/// Parses the flat `key = value` config format into raw pairs. Blank lines
/// and `#` comments are skipped; anything else without an `=` is an error.
/// The caller decides which keys are meaningful and must reject unknown ones
/// so typos never silently train with defaults.
pub fn parse_config_overrides(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::invalid(format!(
                "config line {}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}
