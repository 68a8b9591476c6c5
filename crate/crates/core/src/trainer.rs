//! The training loop: classifier-free label dropout, the contrastive
//! objective, Adam with linear warmup, and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::denoiser::{backward, forward_rows, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::losses::{infonce_negatives, total_loss, LossWeights};
use crate::optim::{adam_update, AdamConfig};
use crate::rng::{substream, Purpose};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// DDPM loss plus both contrastive regularizers. Always runs the
    /// unconditional pass for every sample.
    Cldm,
    /// Plain classifier-free DDPM: one pass per sample, regularizers ignored.
    Ddpm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub p_uncond: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub warmup_iters: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.1,
            batch_size: 64,
            iterations: 20_000,
            lr: 2e-4,
            warmup_iters: 5000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            grad_clip: Some(10.0),
            objective: Objective::Cldm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::InvalidArgument(format!("p_uncond must be in [0, 1], got {}", self.p_uncond)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.weights.validate()
    }

    /// Learning rate at 1-based `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_iters == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_iters as f64).min(1.0)
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub first_moment: DenoiserParams,
    pub second_moment: DenoiserParams,
    /// Number of completed optimizer steps.
    pub step: u64,
    /// Stream used for minibatch shuffling.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state with parameters initialized from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = DenoiserParams::init(config, &mut substream(seed, Purpose::Init, 0, 0))?;
        Self::from_params(params, seed)
    }

    pub fn from_params(params: DenoiserParams, seed: u64) -> Result<Self> {
        let zeros = DenoiserParams::zeros(params.config)?;
        Ok(Self {
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            rng: substream(seed, Purpose::Shuffle, 0, 0),
        })
    }
}

/// Batch-averaged loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub ddpm: f64,
    pub nce: f64,
    pub mse: f64,
    pub total: f64,
    pub lr: f64,
}

/// Per-sample random draws, taken from the `(seed, step, sample)` substream
/// in a fixed order: timestep, label-drop decision, noise.
#[derive(Debug, Clone)]
struct SampleDraw {
    t: usize,
    dropped: bool,
    eps: Vec<f64>,
}

fn draw_sample(seed: u64, step: u64, index: usize, steps: usize, p_uncond: f64, dim: usize) -> SampleDraw {
    let mut rng = substream(seed, Purpose::Train, step, index as u64);
    let t = rng.random_range(1..=steps);
    let dropped = rng.random::<f64>() < p_uncond;
    let eps = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    SampleDraw { t, dropped, eps }
}

struct PreparedBatch {
    draws: Vec<SampleDraw>,
    x_t: Array2<f64>,
}

fn prepare_batch(
    params: &DenoiserParams,
    step: u64,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
) -> Result<PreparedBatch> {
    let cfg = params.config;
    let batch = x0.nrows();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    crate::error::check_len("batch labels", batch, labels.len())?;
    crate::error::check_len("batch width", cfg.d_in, x0.ncols())?;
    if let Some(&l) = labels.iter().find(|l| **l >= cfg.classes) {
        return Err(Error::ClassIndex {
            index: l,
            classes: cfg.classes,
        });
    }
    let draws: Vec<SampleDraw> = (0..batch)
        .map(|i| draw_sample(config.seed, step, i, sched.steps(), config.p_uncond, cfg.d_in))
        .collect();
    let mut x_t = Array2::zeros((batch, cfg.d_in));
    for (i, d) in draws.iter().enumerate() {
        let ab = sched.alpha_bar(d.t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for k in 0..cfg.d_in {
            x_t[[i, k]] = a * x0[[i, k]] + b * d.eps[k];
        }
    }
    Ok(PreparedBatch { draws, x_t })
}

fn check_finite(step: u64, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, term, value })
    }
}

fn apply_gradients(state: &mut TrainState, mut grads: DenoiserParams, config: &TrainConfig) -> Result<f64> {
    let step = state.step + 1;
    let norm = grads.squared_norm().sqrt();
    check_finite(step, "gradient norm", norm)?;
    if let Some(clip) = config.grad_clip {
        if norm > clip {
            grads.scale(clip / norm);
        }
    }
    let lr = config.lr_at(step);
    let TrainState {
        params,
        first_moment,
        second_moment,
        ..
    } = state;
    for (((p, m), v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(first_moment.tensors_mut())
        .zip(second_moment.tensors_mut())
        .zip(grads.tensors())
    {
        adam_update(p, m, v, g, lr, step, &config.adam);
    }
    state.step = step;
    Ok(lr)
}

/// One optimizer step on a batch of normalized `x0` rows.
pub fn train_step(
    state: &mut TrainState,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
) -> Result<StepLosses> {
    let (terms, grads) = loss_and_gradient(&state.params, state.step + 1, x0, labels, sched, config)?;
    let lr = apply_gradients(state, grads, config)?;
    Ok(StepLosses {
        ddpm: terms.ddpm,
        nce: terms.nce,
        mse: terms.mse,
        total: terms.total,
        lr,
    })
}

/// Batch-averaged loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ddpm: f64,
    pub nce: f64,
    pub mse: f64,
    pub total: f64,
}

/// Objective and its exact gradient at `params`, using the random draws of
/// 1-based training step `step`. Dispatches on `config.objective`.
pub fn loss_and_gradient(
    params: &DenoiserParams,
    step: u64,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
) -> Result<(LossTerms, DenoiserParams)> {
    match config.objective {
        Objective::Cldm => cldm_gradient(params, step, x0, labels, sched, config),
        Objective::Ddpm => ddpm_gradient(params, step, x0, labels, sched, config),
    }
}

/// Unconditional pass for every sample, conditional pass for the samples
/// that keep their label. The unconditional latents feed InfoNCE; kept
/// samples add the DDPM loss on the conditional estimate and the alignment
/// loss between the two estimates.
pub fn cldm_gradient(
    params: &DenoiserParams,
    step: u64,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
) -> Result<(LossTerms, DenoiserParams)> {
    let cfg = params.config;
    let PreparedBatch { draws, x_t } = prepare_batch(params, step, x0, labels, sched, config)?;
    let batch = draws.len();
    let kept: Vec<usize> = (0..batch).filter(|&i| !draws[i].dropped).collect();
    let rows = batch + kept.len();

    let mut inputs = Array2::zeros((rows, cfg.d_in));
    inputs.slice_mut(s![..batch, ..]).assign(&x_t);
    let mut steps: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let mut embed_rows = vec![cfg.classes; batch];
    for (j, &i) in kept.iter().enumerate() {
        inputs.row_mut(batch + j).assign(&x_t.row(i));
        steps.push(draws[i].t);
        embed_rows.push(labels[i]);
    }
    let trace = forward_rows(params, inputs.view(), &steps, &embed_rows)?;
    let out = trace.output();

    let inv_b = 1.0 / batch as f64;
    let w = &config.weights;
    let t_total = sched.steps() as f64;
    let mut d_out = Array2::zeros((rows, cfg.d_in));
    let mut sum_ddpm = 0.0;
    let mut sum_mse = 0.0;
    for (i, d) in draws.iter().enumerate().filter(|(_, d)| d.dropped) {
        for k in 0..cfg.d_in {
            let diff = out[[i, k]] - d.eps[k];
            sum_ddpm += diff * diff;
            d_out[[i, k]] += 2.0 * diff * inv_b;
        }
    }
    for (j, &i) in kept.iter().enumerate() {
        let r = batch + j;
        let d = &draws[i];
        let tw = d.t as f64 / t_total;
        for k in 0..cfg.d_in {
            let diff = out[[r, k]] - d.eps[k];
            sum_ddpm += diff * diff;
            d_out[[r, k]] += 2.0 * diff * inv_b;
        }
        for k in 0..cfg.d_in {
            let gap = out[[r, k]] - out[[i, k]];
            sum_mse += tw * gap * gap;
            let g = w.gamma * 2.0 * tw * gap * inv_b;
            d_out[[r, k]] += g;
            d_out[[i, k]] -= g;
        }
    }

    let anchor_weights: Option<Vec<f64>> = w
        .nce_time_weight
        .then(|| draws.iter().map(|d| d.t as f64 / t_total).collect());
    let all_latents = trace.latent();
    let latents = all_latents.slice(s![..batch, ..]);
    if let Some(v) = latents.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            term: "latent",
            value: *v,
        });
    }
    let nce = infonce_negatives(
        latents,
        w.tau,
        anchor_weights.as_deref(),
        w.nce_raw_dot,
    )?;
    let mut d_latent = Array2::zeros((rows, cfg.d_latent));
    if w.alpha != 0.0 {
        d_latent
            .slice_mut(s![..batch, ..])
            .assign(&(nce.grad * w.alpha));
    }

    let ddpm = sum_ddpm * inv_b;
    let mse = sum_mse * inv_b;
    check_finite(step, "ddpm loss", ddpm)?;
    check_finite(step, "infonce loss", nce.loss)?;
    check_finite(step, "alignment loss", mse)?;
    let total = total_loss(ddpm, nce.loss, mse, w);

    let grads = backward(params, &trace, d_out.view(), Some(d_latent.view()))?;
    Ok((
        LossTerms {
            ddpm,
            nce: nce.loss,
            mse,
            total,
        },
        grads.params,
    ))
}

/// Classifier-free DDPM: each sample runs once, unconditionally if its label
/// was dropped and conditionally otherwise. Consumes the same random draws
/// as [`cldm_gradient`].
pub fn ddpm_gradient(
    params: &DenoiserParams,
    step: u64,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
) -> Result<(LossTerms, DenoiserParams)> {
    let cfg = params.config;
    let PreparedBatch { draws, x_t } = prepare_batch(params, step, x0, labels, sched, config)?;
    let batch = draws.len();
    // Dropped samples first, then kept ones: the row order in which
    // `cldm_gradient` meets the samples that carry DDPM gradient.
    let order: Vec<usize> = (0..batch)
        .filter(|&i| draws[i].dropped)
        .chain((0..batch).filter(|&i| !draws[i].dropped))
        .collect();
    let inputs = x_t.select(ndarray::Axis(0), &order);
    let steps: Vec<usize> = order.iter().map(|&i| draws[i].t).collect();
    let embed_rows: Vec<usize> = order
        .iter()
        .map(|&i| if draws[i].dropped { cfg.classes } else { labels[i] })
        .collect();
    let trace = forward_rows(params, inputs.view(), &steps, &embed_rows)?;
    let out = trace.output();

    let inv_b = 1.0 / batch as f64;
    let mut d_out = Array2::zeros((batch, cfg.d_in));
    let mut sum_ddpm = 0.0;
    for (r, &i) in order.iter().enumerate() {
        for k in 0..cfg.d_in {
            let diff = out[[r, k]] - draws[i].eps[k];
            sum_ddpm += diff * diff;
            d_out[[r, k]] = 2.0 * diff * inv_b;
        }
    }
    let ddpm = sum_ddpm * inv_b;
    check_finite(step, "ddpm loss", ddpm)?;
    let grads = backward(params, &trace, d_out.view(), None)?;
    Ok((
        LossTerms {
            ddpm,
            nce: 0.0,
            mse: 0.0,
            total: ddpm,
        },
        grads.params,
    ))
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub losses: StepLosses,
    pub wall_ms: f64,
}

pub const HISTORY_HEADER: &str = "step,l_ddpm,l_nce,l_mse,lr,wall_ms";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.step, r.losses.ddpm, r.losses.nce, r.losses.mse, r.losses.lr, r.wall_ms
        )
        .expect("string write");
    }
    out
}

/// Samples minibatches from a permutation that is reshuffled whenever it is
/// exhausted. Batches may straddle epochs.
#[derive(Debug, Clone)]
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

/// Runs `config.iterations` steps over shuffled minibatches of `x0`
/// (normalized rows). Checkpoints go to `checkpoint_dir` as
/// `ckpt_{step}.cldm` when enabled.
pub fn train(
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    model: DenoiserConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    let state = TrainState::new(model, config.seed)?;
    train_from(state, x0, labels, sched, config, checkpoint_dir)
}

pub fn train_from(
    mut state: TrainState,
    x0: ArrayView2<f64>,
    labels: &[usize],
    sched: &Schedule,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    config.validate()?;
    if x0.nrows() == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut batcher = Batcher::new(x0.nrows());
    let mut history = Vec::with_capacity(config.iterations as usize);
    for _ in 0..config.iterations {
        let idx = batcher.next(config.batch_size, &mut state.rng);
        let xb = x0.select(ndarray::Axis(0), &idx);
        let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let start = Instant::now();
        let losses = train_step(&mut state, xb.view(), &lb, sched, config)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        history.push(HistoryRow {
            step: state.step,
            losses,
            wall_ms,
        });
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                checkpoint::save(&state.params, &dir.join(format!("ckpt_{}.cldm", state.step)))?;
            }
        }
    }
    Ok(TrainOutput { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Activation;
    use crate::schedule::linear_schedule;
    use rand::SeedableRng;

    fn tiny_model() -> DenoiserConfig {
        DenoiserConfig {
            d_in: 2,
            d_time: 4,
            d_class: 3,
            d_hidden: 8,
            d_latent: 5,
            classes: 3,
            activation: Activation::Silu,
        }
    }

    fn batch(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|i| i % 3).collect();
        (x, labels)
    }

    fn max_abs_diff(a: &DenoiserParams, b: &DenoiserParams) -> f64 {
        a.tensors()
            .iter()
            .zip(b.tensors())
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            warmup_iters: 4,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.25);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert_eq!(cfg.lr_at(100), 1.0);
        let none = TrainConfig {
            warmup_iters: 0,
            ..cfg
        };
        assert_eq!(none.lr_at(1), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { p_uncond: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn all_dropped_has_no_alignment_term() {
        let sched = linear_schedule(50, 1e-3, 0.1).unwrap();
        let (x, labels) = batch(16, 1);
        let mut state = TrainState::new(tiny_model(), 3).unwrap();
        let cfg = TrainConfig {
            p_uncond: 1.0,
            ..TrainConfig::default()
        };
        for _ in 0..5 {
            let l = train_step(&mut state, x.view(), &labels, &sched, &cfg).unwrap();
            assert_eq!(l.mse, 0.0);
            assert!(l.nce > 0.0);
        }
    }

    #[test]
    fn degenerate_weights_match_plain_ddpm_gradient() {
        let sched = linear_schedule(50, 1e-3, 0.1).unwrap();
        let (x, labels) = batch(12, 2);
        let params = TrainState::new(tiny_model(), 4).unwrap().params;
        for p_uncond in [0.0, 0.3] {
            let cldm = TrainConfig {
                p_uncond,
                weights: LossWeights::baseline(),
                ..TrainConfig::default()
            };
            let ddpm = TrainConfig {
                objective: Objective::Ddpm,
                ..cldm.clone()
            };
            for step in 1..4 {
                let (ta, ga) = loss_and_gradient(&params, step, x.view(), &labels, &sched, &cldm).unwrap();
                let (tb, gb) = loss_and_gradient(&params, step, x.view(), &labels, &sched, &ddpm).unwrap();
                assert!((ta.total - tb.total).abs() < 1e-14);
                assert!(max_abs_diff(&ga, &gb) < 1e-14);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let sched = linear_schedule(50, 1e-3, 0.1).unwrap();
        let (x, labels) = batch(40, 5);
        let cfg = TrainConfig {
            batch_size: 8,
            iterations: 100,
            warmup_iters: 10,
            lr: 1e-3,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train(x.view(), &labels, &sched, tiny_model(), &cfg, None).unwrap();
        let b = train(x.view(), &labels, &sched, tiny_model(), &cfg, None).unwrap();
        assert_eq!(a.state, b.state);
        let strip = |h: &[HistoryRow]| h.iter().map(|r| (r.step, r.losses)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
        let c = train(x.view(), &labels, &sched, tiny_model(), &TrainConfig { seed: 78, ..cfg }, None).unwrap();
        assert_ne!(a.state.params, c.state.params);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let sched = linear_schedule(50, 1e-3, 0.1).unwrap();
        let (x, labels) = batch(4, 1);
        for objective in [Objective::Cldm, Objective::Ddpm] {
            let mut state = TrainState::new(tiny_model(), 3).unwrap();
            state.params.decoder[2].bias[0] = f64::INFINITY;
            let cfg = TrainConfig {
                objective,
                ..TrainConfig::default()
            };
            let err = train_step(&mut state, x.view(), &labels, &sched, &cfg).unwrap_err();
            assert!(matches!(err, Error::NonFinite { step: 1, term: "ddpm loss", .. }), "{err}");
        }
        let mut state = TrainState::new(tiny_model(), 3).unwrap();
        state.params.encoder[2].bias[0] = f64::NAN;
        let err = train_step(&mut state, x.view(), &labels, &sched, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { term: "latent", .. }));
    }

    #[test]
    fn rejects_bad_batches() {
        let sched = linear_schedule(50, 1e-3, 0.1).unwrap();
        let mut state = TrainState::new(tiny_model(), 3).unwrap();
        let cfg = TrainConfig::default();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(train_step(&mut state, empty.view(), &[], &sched, &cfg).is_err());
        let (x, _) = batch(2, 1);
        assert!(matches!(
            train_step(&mut state, x.view(), &[0, 3], &sched, &cfg),
            Err(Error::ClassIndex { index: 3, .. })
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn checkpoints_and_history() {
        let sched = linear_schedule(20, 1e-3, 0.1).unwrap();
        let (x, labels) = batch(10, 9);
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 6,
            checkpoint_every: 3,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(x.view(), &labels, &sched, tiny_model(), &cfg, Some(dir.path())).unwrap();
        let ckpt = checkpoint::load(&dir.path().join("ckpt_6.cldm")).unwrap();
        assert_eq!(ckpt, out.state.params);
        assert!(dir.path().join("ckpt_3.cldm").exists());
        assert!(!dir.path().join("ckpt_4.cldm").exists());
        let csv = history_csv(&out.history);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HISTORY_HEADER));
        assert_eq!(lines.count(), 6);
    }

    #[test]
    fn batcher_visits_every_sample_each_epoch() {
        let mut rng = substream(1, Purpose::Shuffle, 0, 0);
        let mut b = Batcher::new(10);
        let mut seen: Vec<usize> = b.next(4, &mut rng);
        seen.extend(b.next(6, &mut rng));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
