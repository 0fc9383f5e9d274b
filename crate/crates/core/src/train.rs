//! Masked-MSE training with AdamW, warmup plus cosine decay, global-norm
//! clipping and early stopping.
//!
//! Update `t` (1-based) uses learning rate `lr_at(t)` per group and runs:
//! clip the global gradient norm to `clip`, update the moments, apply the
//! bias-corrected step and the decoupled decay `p ← p − lr·λ·p`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, NdFloat, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::cast;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fields::{Field, LandMask};
use crate::model::{backward, forward, init_params, Group, ModelConfig, ParamStore, Prepared, TokenMask};
use crate::seed::{self, derive};
use crate::topo_bias::ALPHA_INIT;

/// How the masked squared error is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossAverage {
    /// Divide by ‖M‖₁ only; channels and horizons add up.
    #[default]
    Literal,
    /// Additionally divide by the number of output channels × horizons.
    PerChannel,
}

impl LossAverage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(LossAverage::Literal),
            "per_channel" => Ok(LossAverage::PerChannel),
            _ => Err(Error::Config(format!("unknown loss_average `{s}` (literal|per_channel)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossAverage::Literal => "literal",
            LossAverage::PerChannel => "per_channel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_embedding: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub eta_min: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    /// Upper bound on passes over the training split.
    pub epochs: u64,
    pub patience: u64,
    pub val_interval: u64,
    pub seed: u64,
    pub loss_average: LossAverage,
    /// Reset α to its initial value once this step is reached.
    pub alpha_reset: Option<u64>,
    /// Stop this invocation after the given step (the schedule still runs to
    /// `total_steps`); used to split a run for resuming.
    pub stop_at: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_embedding: 2e-4,
            lr_backbone: 1e-5,
            lr_head: 5e-5,
            lr_base: 1e-4,
            weight_decay: 0.01,
            warmup: 200,
            total_steps: 2000,
            eta_min: 1e-6,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            epochs: 60,
            patience: 10,
            val_interval: 100,
            seed: 0,
            loss_average: LossAverage::Literal,
            alpha_reset: None,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_embedding, self.lr_backbone, self.lr_head, self.lr_base, self.eta_min];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup, self.total_steps
            )));
        }
        if self.total_steps == 0 || self.batch == 0 || self.val_interval == 0 || self.epochs == 0 {
            return Err(Error::Config("total_steps, batch, epochs and val_interval must be positive".into()));
        }
        if !(self.clip > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("clip must be positive and betas in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    pub fn group_rate(&self, group: Group) -> f64 {
        match group {
            Group::Embedding => self.lr_embedding,
            Group::Backbone => self.lr_backbone,
            Group::Head => self.lr_head,
            Group::Base => self.lr_base,
        }
    }
}

/// Learning rate at `step`: linear ramp from 0 over `warmup`, cosine decay
/// to `eta_min` at `total_steps`, constant afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig, group: Group) -> f64 {
    let rate = cfg.group_rate(group);
    if step < cfg.warmup {
        return rate * step as f64 / cfg.warmup as f64;
    }
    if step >= cfg.total_steps {
        return cfg.eta_min;
    }
    let progress = (step - cfg.warmup) as f64 / (cfg.total_steps - cfg.warmup) as f64;
    cfg.eta_min + (rate - cfg.eta_min) * 0.5 * (1.0 + (PI * progress).cos())
}

fn loss_denominator(mask: &TokenMask<impl NdFloat>, channels: usize, average: LossAverage) -> Result<f64> {
    if mask.count == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok(match average {
        LossAverage::Literal => mask.count as f64,
        LossAverage::PerChannel => (mask.count * channels) as f64,
    })
}

/// Masked MSE on token matrices and its gradient with respect to `pred`.
/// `channels` is horizons × V_out, used only for [`LossAverage::PerChannel`].
pub fn masked_mse_tokens<T: NdFloat>(
    pred: ArrayView2<'_, T>,
    target: ArrayView2<'_, T>,
    mask: &TokenMask<T>,
    channels: usize,
    average: LossAverage,
) -> Result<(f64, Array2<T>)> {
    if pred.dim() != target.dim() || pred.dim() != mask.values.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, mask {:?}",
            pred.dim(),
            target.dim(),
            mask.values.dim()
        )));
    }
    let denom = loss_denominator(mask, channels, average)?;
    let mut grad = Array2::<T>::zeros(pred.raw_dim());
    let mut sum = 0.0f64;
    let two_scale = cast::<T>(2.0 / denom);
    Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .and(&mask.values)
        .for_each(|g, &p, &t, &m| {
            let e = (p - t) * m;
            let e64 = e.to_f64().expect("finite");
            sum += e64 * e64;
            *g = two_scale * e;
        });
    Ok((sum / denom, grad))
}

/// `Σ_v Σ_ij M_ij (Ŷ − Y)² / ‖M‖₁` over every horizon and output channel.
pub fn masked_mse(pred: &[Field], target: &[Field], mask: &LandMask) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateMask);
    }
    let cells = mask.cells();
    let mut sum = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        if p.spec().cells() != cells.len() || p.data().len() != t.data().len() {
            return Err(Error::Shape("prediction, target and mask sizes differ".into()));
        }
        for (k, (&a, &b)) in p.data().iter().zip(t.data()).enumerate() {
            if cells[k % cells.len()] {
                let e = a as f64 - b as f64;
                sum += e * e;
            }
        }
    }
    Ok(sum / mask.count() as f64)
}

/// Optimizer moments plus loop bookkeeping; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer updates.
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub best_val: f64,
    pub best_step: u64,
    /// Non-improving validations since the last improvement, after warmup.
    pub bad_validations: u64,
    pub stopped_early: bool,
    /// Training-loss sum and count since the last validation.
    pub running_loss: f64,
    pub running_count: u64,
}

impl TrainState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        TrainState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            best_val: f64::INFINITY,
            best_step: 0,
            bad_validations: 0,
            stopped_early: false,
            running_loss: 0.0,
            running_count: 0,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: NdFloat>(grads: &ParamStore<T>) -> f64 {
    let mut sq = 0.0f64;
    grads.visit(|_, _, g| {
        sq += g.iter().map(|x| x.to_f64().expect("finite").powi(2)).sum::<f64>();
    });
    sq.sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads<T: NdFloat>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = cast::<T>(max_norm / norm);
        grads.visit_mut(|_, _, g| g.mapv_inplace(|x| x * s));
    }
    norm
}

/// Moments for an arbitrary float type, used by [`optimize_step`].
pub struct Moments<'a, T> {
    pub m: &'a mut ParamStore<T>,
    pub v: &'a mut ParamStore<T>,
    pub step: &'a mut u64,
}

/// One AdamW update. Fails without touching anything if a gradient is not
/// finite. Returns the pre-clip gradient norm.
pub fn optimize_step<T: NdFloat>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: Moments<'_, T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut bad = None;
    grads.visit(|name, _, g| {
        if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::numeric("optimizer", format!("non-finite gradient in {name}")));
    }
    let mut g = grads.clone();
    let norm = clip_grads(&mut g, cfg.clip);
    let t = *state.step + 1;
    let (b1, b2) = (cast::<T>(cfg.beta1), cast::<T>(cfg.beta2));
    let (one_b1, one_b2) = (cast::<T>(1.0 - cfg.beta1), cast::<T>(1.0 - cfg.beta2));
    let c1 = cast::<T>(1.0 / (1.0 - cfg.beta1.powf(t as f64)));
    let c2 = cast::<T>(1.0 / (1.0 - cfg.beta2.powf(t as f64)));
    let eps = cast::<T>(cfg.eps);
    state.m.zip_mut(&g, |_, _, m, g| Zip::from(m).and(g).for_each(|m, &g| *m = b1 * *m + one_b1 * g));
    state.v.zip_mut(&g, |_, _, v, g| Zip::from(v).and(g).for_each(|v, &g| *v = b2 * *v + one_b2 * g * g));
    let mut mv: Vec<(&Array2<T>, &Array2<T>)> = Vec::new();
    let (m, v) = (&*state.m, &*state.v);
    let mut ms = Vec::new();
    m.visit(|_, _, a| ms.push(a));
    let mut vs = Vec::new();
    v.visit(|_, _, a| vs.push(a));
    mv.extend(ms.into_iter().zip(vs));
    let mut i = 0;
    params.visit_mut(|_, group, p| {
        let lr = lr_at(t, cfg, group);
        let (m, v) = mv[i];
        i += 1;
        let lr_t = cast::<T>(lr);
        let decay = cast::<T>(1.0 - lr * cfg.weight_decay);
        Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            let update = (m * c1) / ((v * c2).sqrt() + eps);
            *p = *p * decay - lr_t * update;
        });
    });
    *state.step = t;
    Ok(norm)
}

/// Early-stopping bookkeeping, separated from the loop for testing.
pub fn observe_validation(state: &mut TrainState, val: f64, cfg: &TrainConfig) -> (bool, bool) {
    let improved = val < state.best_val;
    if improved {
        state.best_val = val;
        state.best_step = state.step;
        state.bad_validations = 0;
    } else if state.step >= cfg.warmup {
        state.bad_validations += 1;
    }
    let stop = state.bad_validations > cfg.patience;
    (improved, stop)
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_base: f64,
    pub alpha: f64,
}

impl LogRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}, {:.9e}, {:.9e}, {:.9e}, {:.9e}",
            self.step, self.train_loss, self.val_loss, self.lr_base, self.alpha
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Input(format!("malformed loss log line `{line}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(LogRow {
            step: parts[0].parse().map_err(|_| bad())?,
            train_loss: f(parts[1])?,
            val_loss: f(parts[2])?,
            lr_base: f(parts[3])?,
            alpha: f(parts[4])?,
        })
    }
}

pub const LOG_HEADER: &str = "step, train_loss, val_loss, lr_base, alpha";

/// Validation loss averaged over samples, evaluation mode.
pub fn evaluate_loss(
    params: &ParamStore<f32>,
    mcfg: &ModelConfig,
    data: &[Prepared<f32>],
    mask: &TokenMask<f32>,
    average: LossAverage,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let channels = mcfg.horizons * mcfg.v_out;
    let mut sum = 0.0;
    for p in data {
        let (out, _) = forward::<f32, ChaCha8Rng>(params, mcfg, p, None)?;
        sum += masked_mse_tokens(out.view(), p.targets.view(), mask, channels, average)?.0;
    }
    Ok(sum / data.len() as f64)
}

/// Loss and accumulated gradient over one batch of samples.
pub fn batch_gradient(
    params: &ParamStore<f32>,
    mcfg: &ModelConfig,
    batch: &[&Prepared<f32>],
    mask: &TokenMask<f32>,
    average: LossAverage,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ParamStore<f32>)> {
    let channels = mcfg.horizons * mcfg.v_out;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for p in batch {
        let (out, cache) = forward(params, mcfg, p, Some(&mut *rng))?;
        let (l, d_out) = masked_mse_tokens(out.view(), p.targets.view(), mask, channels, average)?;
        let g = backward(params, mcfg, p, &cache, d_out.view())?;
        total.zip_mut(&g, |_, _, a, b| *a += b);
        loss += l;
    }
    let inv = 1.0 / batch.len() as f32;
    total.visit_mut(|_, _, a| a.mapv_inplace(|x| x * inv));
    Ok((loss / batch.len() as f64, total))
}

/// Index of the training sample consumed at position `k` of the stream:
/// each epoch is a fresh shuffle derived from `(seed, epoch)`.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            n,
            seed,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn index(&mut self, k: u64) -> usize {
        let epoch = k / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(self.seed, seed::STREAM_SHUFFLE, epoch));
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[(k % self.n as u64) as usize]
    }
}

/// Where `fit` writes its outputs.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
    /// Text appended to checkpoint sidecars (resolved config echo).
    pub config_echo: String,
}

impl RunFiles {
    pub fn log(&self) -> PathBuf {
        self.dir.join("loss_log.txt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.gfd")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.gfd")
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: ParamStore<f32>,
    pub last: ParamStore<f32>,
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Starting point for [`fit`]: fresh or resumed.
pub struct Start {
    pub params: ParamStore<f32>,
    pub best: ParamStore<f32>,
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

impl Start {
    pub fn fresh(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Self> {
        let params = init_params::<f32>(mcfg, tcfg.seed)?;
        Ok(Start {
            best: params.clone(),
            state: TrainState::new(&params),
            params,
            log: Vec::new(),
        })
    }
}

fn max_steps(tcfg: &TrainConfig, n_train: usize) -> u64 {
    let per_epoch = (n_train as u64).div_ceil(tcfg.batch as u64);
    tcfg.total_steps.min(tcfg.epochs.saturating_mul(per_epoch))
}

/// Train from `start` until `total_steps`, the epoch cap, early stopping or
/// `stop_at`. With `files`, the loss log, the best checkpoint and a
/// resumable last state are written as the run goes.
pub fn fit(
    train: &[Prepared<f32>],
    val: &[Prepared<f32>],
    mask: &TokenMask<f32>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    start: Start,
    files: Option<&RunFiles>,
) -> Result<FitResult> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("train and validation splits must be nonempty".into()));
    }
    let Start {
        mut params,
        mut best,
        mut state,
        mut log,
    } = start;
    if let Some(f) = files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        write_log(&f.log(), &log)?;
    }
    let limit = max_steps(tcfg, train.len());
    let until = tcfg.stop_at.map_or(limit, |s| s.min(limit));
    let mut sampler = Sampler::new(train.len(), tcfg.seed);
    while state.step < until && !state.stopped_early {
        let step = state.step;
        if tcfg.alpha_reset == Some(step) {
            params.alpha.fill(ALPHA_INIT as f32);
        }
        let batch: Vec<&Prepared<f32>> = (0..tcfg.batch as u64)
            .map(|b| &train[sampler.index(step * tcfg.batch as u64 + b)])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(tcfg.seed, seed::STREAM_DROPOUT, step));
        let (loss, grads) = batch_gradient(&params, mcfg, &batch, mask, tcfg.loss_average, &mut rng)?;
        optimize_step(
            &mut params,
            &grads,
            Moments {
                m: &mut state.m,
                v: &mut state.v,
                step: &mut state.step,
            },
            tcfg,
        )?;
        state.running_loss += loss;
        state.running_count += 1;
        if state.step % tcfg.val_interval == 0 || state.step == limit {
            let val_loss = evaluate_loss(&params, mcfg, val, mask, tcfg.loss_average)?;
            let row = LogRow {
                step: state.step,
                train_loss: state.running_loss / state.running_count as f64,
                val_loss,
                lr_base: lr_at(state.step, tcfg, Group::Base),
                alpha: params.alpha() as f64,
            };
            state.running_loss = 0.0;
            state.running_count = 0;
            let (improved, stop) = observe_validation(&mut state, val_loss, tcfg);
            if improved {
                best = params.clone();
            }
            state.stopped_early = stop;
            if let Some(f) = files {
                append_log(&f.log(), &row)?;
                if improved {
                    checkpoint::save(&best, &f.best(), mcfg, tcfg.seed, state.step, &f.config_echo)?;
                }
            }
            log.push(row);
        }
    }
    if let Some(f) = files {
        if !f.best().exists() {
            checkpoint::save(&best, &f.best(), mcfg, tcfg.seed, state.best_step, &f.config_echo)?;
        }
        checkpoint::save_resume(&f.dir, &params, &best, &state, mcfg, tcfg.seed, &f.config_echo)?;
    }
    Ok(FitResult {
        best,
        last: params,
        state,
        log,
    })
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for r in rows {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", row.to_line()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && l.trim() != LOG_HEADER)
        .map(LogRow::parse)
        .collect()
}
