//! Loss, learning-rate schedule, clipping, Adam and the training loop.

use std::io::Write;

use ndtensor::{Element, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalmetrics::{self, MetricError};
use crate::model::{rollout, Mode, Model, ModelError};
use crate::motiondata::{augment_mirror, augment_reverse, shift_targets, MotionError, MotionSequence, ROT_DIM};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] ndtensor::TensorError),
    /// Carries the parameters from before the failing step.
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite {
        step: usize,
        last_good: Box<Model>,
        history: Vec<HistoryRow>,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub max_steps: usize,
    pub max_grad_norm: f64,
    /// Validate every this many steps (and after the last step).
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Chance of reversing a sampled window in time.
    pub reverse_prob: f64,
    /// Chance of mirroring a sampled window, drawn independently.
    pub mirror_prob: f64,
    pub seed: u64,
    /// Validation horizon in milliseconds.
    pub val_horizon_ms: u32,
    /// Upper bound on held-out windows used per validation.
    pub val_windows: usize,
    /// Worker threads for gradient shards.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            warmup: 10_000,
            max_steps: 100_000,
            max_grad_norm: 1.0,
            eval_every: 500,
            patience: 10,
            reverse_prob: 0.0,
            mirror_prob: 0.0,
            seed: 0,
            val_horizon_ms: 400,
            val_windows: 64,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.warmup == 0 {
            return fail("warmup must be at least 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive");
        }
        if self.eval_every == 0 || self.val_windows == 0 || self.threads == 0 {
            return fail("eval_every, val_windows and threads must be positive");
        }
        if !(0.0..=1.0).contains(&self.reverse_prob) || !(0.0..=1.0).contains(&self.mirror_prob) {
            return fail("augmentation probabilities must be in [0, 1]");
        }
        Ok(())
    }
}

/// `Σ_t Σ_n ‖pred − target‖₂` over the trailing 9 values of each joint.
pub fn loss_per_joint_l2<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> ndtensor::Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(ndtensor::TensorError::Shape {
            op: "loss_per_joint_l2",
            detail: format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
        });
    }
    let diff = tape.sub(pred, target)?;
    let norms = tape.norm_lastdim(diff)?;
    tape.sum(norms)
}

/// `D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: usize, embed_dim: usize, warmup: usize) -> Result<f64> {
    if step == 0 {
        return Err(TrainError::Config("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    Ok((embed_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Scales all gradients by `min(1, max_norm / ‖g‖)` with the norm taken over
/// every tensor jointly. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = (*v as f64 * s) as f32);
        }
    }
    norm
}

/// Adam moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gv;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gv * gv;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
}

/// Batch loss and gradients for every parameter (zero where unused).
///
/// The batch is split into `shards` contiguous slices evaluated on separate
/// tapes, possibly in parallel; results are summed in shard order so the
/// outcome depends only on the shard count.
pub fn batch_gradients(
    model: &Model,
    inputs: &Tensor<f32>,
    targets: &Tensor<f32>,
    shards: usize,
    dropout_seeds: &[u64],
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let s = inputs.shape().to_vec();
    let b = s[0];
    let shards = shards.clamp(1, b);
    let per = s[1..].iter().product::<usize>();
    let bounds: Vec<(usize, usize)> = (0..shards).map(|i| (i * b / shards, (i + 1) * b / shards)).collect();
    let run = |i: usize| -> Result<(f64, Vec<Tensor<f32>>)> {
        let (lo, hi) = bounds[i];
        let mut shape = s.clone();
        shape[0] = hi - lo;
        let x = Tensor::new(shape.clone(), inputs.data()[lo * per..hi * per].to_vec())?;
        let y = Tensor::new(shape, targets.data()[lo * per..hi * per].to_vec())?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true)?;
        let xv = tape.constant(x)?;
        let yv = tape.constant(y)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seeds.get(i).copied().unwrap_or(0));
        let mode = if model.config.dropout > 0.0 { Mode::Train(&mut rng) } else { Mode::Eval };
        let trace = crate::model::forward_on_tape(&mut tape, &model.config, &bound, xv, mode)?;
        let total = loss_per_joint_l2(&mut tape, trace.prediction, yv)?;
        let loss = tape.scale(total, 1.0 / b as f32)?;
        let mut grads = tape.backward(loss)?;
        let loss_value = tape.value(loss).item()? as f64;
        let g = bound
            .vars()
            .iter()
            .zip(model.params.tensors())
            .map(|(v, p)| grads.take(*v).map_or_else(|| Tensor::zeros(p.shape().to_vec()), Ok))
            .collect::<ndtensor::Result<Vec<_>>>()?;
        Ok((loss_value, g))
    };
    let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = if shards == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..shards).map(|i| scope.spawn(move || run(i))).collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("at least one shard")?;
    for r in iter {
        let (l, g) = r?;
        loss += l;
        for (acc, part) in grads.iter_mut().zip(&g) {
            for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += *p;
            }
        }
    }
    Ok((loss, grads))
}

/// Validation metrics at one horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub euler: f64,
    pub geodesic: f64,
    pub positional: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val: Option<ValMetrics>,
}

/// Writes `step,loss,lr,val_euler,val_geodesic,val_positional`; validation
/// fields are empty on steps without validation.
pub fn write_history_csv<W: Write>(mut w: W, history: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(w, "step,loss,lr,val_euler,val_geodesic,val_positional")?;
    for h in history {
        match h.val {
            Some(v) => writeln!(w, "{},{},{},{},{},{}", h.step, h.loss, h.lr, v.euler, v.geodesic, v.positional)?,
            None => writeln!(w, "{},{},{},,,", h.step, h.loss, h.lr)?,
        }
    }
    Ok(())
}

/// Held-out seeds and continuations for validation.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    /// `V × T × N × 9`
    pub seeds: Tensor<f32>,
    /// `V × H × N × 9`
    pub targets: Tensor<f32>,
    pub skeleton: std::sync::Arc<crate::motiondata::Skeleton>,
    pub fps: f32,
}

impl ValidationSet {
    /// Up to `max_windows` windows of `seed_len + horizon` frames spread
    /// evenly over `sequences`.
    pub fn build(sequences: &[MotionSequence], seed_len: usize, horizon: usize, max_windows: usize) -> Result<Self> {
        let len = seed_len + horizon;
        let starts: Vec<(usize, usize)> = sequences
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len().saturating_sub(len - 1)).map(move |t| (i, t)))
            .collect();
        if starts.is_empty() || horizon == 0 || seed_len == 0 {
            return Err(TrainError::Config(format!("no held-out sequence has {len} frames")));
        }
        let count = max_windows.min(starts.len());
        let first = &sequences[0];
        let w = first.joint_count() * ROT_DIM;
        let (mut seeds, mut targets) = (Vec::new(), Vec::new());
        for k in 0..count {
            let (i, t) = starts[k * starts.len() / count];
            let data = sequences[i].data();
            seeds.extend_from_slice(&data[t * w..(t + seed_len) * w]);
            targets.extend_from_slice(&data[(t + seed_len) * w..(t + len) * w]);
        }
        let n = first.joint_count();
        Ok(Self {
            seeds: Tensor::new(vec![count, seed_len, n, ROT_DIM], seeds)?,
            targets: Tensor::new(vec![count, horizon, n, ROT_DIM], targets)?,
            skeleton: first.skeleton().clone(),
            fps: first.fps(),
        })
    }

    pub fn evaluate(&self, model: &Model) -> Result<ValMetrics> {
        let horizon = self.targets.shape()[1];
        let pred = rollout(model, &self.seeds, horizon, None)?;
        let h = [horizon];
        Ok(ValMetrics {
            euler: evalmetrics::metric_euler(&pred, &self.targets, &h)?[0],
            geodesic: evalmetrics::metric_geodesic(&pred, &self.targets, &h)?[0],
            positional: evalmetrics::metric_positional(&pred, &self.targets, &self.skeleton, &h)?[0],
        })
    }
}

/// Uniform sampler over all window starts of a corpus.
struct WindowSampler<'a> {
    sequences: &'a [MotionSequence],
    cumulative: Vec<usize>,
    len: usize,
}

impl<'a> WindowSampler<'a> {
    fn new(sequences: &'a [MotionSequence], len: usize) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(sequences.len());
        let mut total = 0;
        for s in sequences {
            total += s.len().saturating_sub(len - 1);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(TrainError::Config(format!("no training sequence has {len} frames")));
        }
        Ok(Self {
            sequences,
            cumulative,
            len,
        })
    }

    fn total(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Result<MotionSequence> {
        let u = rng.random_range(0..self.total());
        let i = self.cumulative.partition_point(|&c| c <= u);
        let before = if i == 0 { 0 } else { self.cumulative[i - 1] };
        Ok(self.sequences[i].slice(u - before, self.len)?)
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint.
    pub best: Model,
    pub best_step: usize,
    /// Parameters after the last step taken.
    pub last: Model,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

/// Trains on windows of `window + 1` frames sampled uniformly from `train`,
/// validating on `val` every `eval_every` steps with the mean geodesic error
/// over the validation horizon, and stopping after `patience` evaluations
/// without improvement.
pub fn train(mut model: Model, train: &[MotionSequence], val: &[MotionSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let t = model.config.window;
    let sampler = WindowSampler::new(train, t + 1)?;
    if sampler.total() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} windows available for a batch of {}",
            sampler.total(),
            cfg.batch_size
        )));
    }
    let fps = train[0].fps();
    let horizon = evalmetrics::horizon_frames(cfg.val_horizon_ms, fps).max(1);
    let val_set = ValidationSet::build(val, t, horizon, cfg.val_windows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params.tensors());
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for step in 1..=cfg.max_steps {
        let windows = (0..cfg.batch_size)
            .map(|_| {
                let mut w = sampler.sample(&mut rng)?;
                if rng.random_bool(cfg.reverse_prob) {
                    w = augment_reverse(&w);
                }
                if rng.random_bool(cfg.mirror_prob) {
                    w = augment_mirror(&w);
                }
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = shift_targets(&windows)?;
        let shards = cfg.threads.min(cfg.batch_size);
        let dropout_seeds: Vec<u64> = (0..shards).map(|_| rng.next_u64()).collect();
        let lr = noam_lr(step, model.config.embed_dim, cfg.warmup)?;
        let outcome = batch_gradients(&model, &batch.inputs, &batch.targets, shards, &dropout_seeds);
        let non_finite = match &outcome {
            Ok((loss, grads)) => !loss.is_finite() || grads.iter().any(|g| !g.all_finite()),
            Err(TrainError::Model(ModelError::NonFinite { .. })) => true,
            Err(_) => false,
        };
        if non_finite {
            return Err(TrainError::NonFinite {
                step,
                last_good: Box::new(model),
                history,
            });
        }
        let (loss, mut grads) = outcome?;
        clip_global_norm(&mut grads, cfg.max_grad_norm);
        adam_step(model.params.tensors_mut(), &grads, &mut adam, lr);
        let mut row = HistoryRow { step, loss, lr, val: None };
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let metrics = val_set.evaluate(&model)?;
            row.val = Some(metrics);
            log::info!(
                "step {step}: loss {loss:.4}, lr {lr:.2e}, val euler {:.4}, geodesic {:.4}",
                metrics.euler,
                metrics.geodesic
            );
            let improved = best.as_ref().is_none_or(|(b, _, _)| metrics.geodesic < *b);
            if improved {
                best = Some((metrics.geodesic, step, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            history.push(row);
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
            continue;
        }
        history.push(row);
    }
    let (_, best_step, best_model) = best.unwrap_or_else(|| (f64::INFINITY, 0, model.clone()));
    Ok(TrainOutcome {
        best: best_model,
        best_step,
        last: model,
        history,
        stopped_early,
    })
}
