//! Attention cost and memory comparison between the decoupled and the full
//! joint-time attention.

use std::time::Instant;

use ndtensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward_on_tape, Mode, Model, ModelConfig, ModelError, Result, Variant};
use crate::so3::RotationMatrix;

/// One (layers, window, batch) point of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub layers: usize,
    pub window: usize,
    pub batch: usize,
}

/// Layer/window/batch triples that trade one axis against the others.
pub fn default_bench_grid() -> Vec<BenchConfig> {
    [(4, 80, 32), (8, 120, 5), (8, 60, 16), (4, 100, 16), (8, 40, 32), (8, 120, 32)]
        .into_iter()
        .map(|(layers, window, batch)| BenchConfig { layers, window, batch })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchStatus {
    Ok,
    OutOfMemory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub config: BenchConfig,
    /// Query-key pairs scored per token and layer.
    pub scores_per_token: u64,
    /// Query-key pairs scored per sample and layer.
    pub scores_per_layer: u64,
    /// Forward-tape elements for the whole batch.
    pub peak_workspace: u64,
    /// Forward and backward time, absent when over budget or not timed.
    pub seconds_per_step: Option<f64>,
    pub status: BenchStatus,
}

fn identity_batch(config: &ModelConfig, batch: usize, window: usize) -> Result<Tensor<f32>> {
    let eye = RotationMatrix::IDENTITY.to_f32();
    let data = (0..batch * window * config.joints).flat_map(|_| eye).collect();
    Ok(Tensor::new(vec![batch, window, config.joints, config.joint_dim], data)?)
}

fn probe(model: &Model, batch: usize, window: usize) -> Result<(usize, Vec<u64>)> {
    let input = identity_batch(&model.config, batch, window)?;
    let p = model.forward(&input, Mode::Eval, false)?;
    Ok((p.workspace_elements, p.score_counts))
}

/// Forward-tape elements at `batch`, extrapolated exactly from probes at
/// batch sizes 1 and 2 (every activation is linear in the batch size).
/// Also returns the per-layer score counts.
fn extrapolate(model: &Model, window: usize, batch: usize) -> Result<(u64, Vec<u64>)> {
    let (one, counts) = probe(model, 1, window)?;
    let (two, _) = probe(model, 2, window)?;
    let per_sample = (two - one) as u64;
    Ok((one as u64 + per_sample * (batch as u64).saturating_sub(1), counts))
}

/// Forward-tape elements of `config` for a `batch` of `window`-frame inputs.
pub fn predict_workspace(config: &ModelConfig, window: usize, batch: usize) -> Result<u64> {
    let model = Model::init(ModelConfig { window, ..config.clone() }, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(extrapolate(&model, window, batch)?.0)
}

/// Measures every configuration for each variant. Configurations whose
/// predicted workspace exceeds `budget_elements` are reported as out of
/// memory without running them; the rest run one timed training step when
/// `timed` is set.
pub fn bench_grid(
    base: &ModelConfig,
    variants: &[Variant],
    grid: &[BenchConfig],
    budget_elements: usize,
    timed: bool,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &cfg in grid {
            if cfg.layers == 0 || cfg.window == 0 || cfg.batch == 0 {
                return Err(ModelError::Config(format!("empty bench configuration {cfg:?}")));
            }
            let config = ModelConfig {
                variant,
                layers: cfg.layers,
                window: cfg.window,
                dropout: 0.0,
                ..base.clone()
            };
            let model = Model::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
            let (peak, counts) = extrapolate(&model, cfg.window, cfg.batch)?;
            let per_layer = counts[0];
            let tokens = (config.token_joints() * cfg.window) as u64;
            let over = peak > budget_elements as u64;
            let seconds = if !over && timed {
                Some(time_step(&model, cfg.batch, cfg.window, budget_elements)?)
            } else {
                None
            };
            rows.push(BenchRow {
                variant,
                config: cfg,
                scores_per_token: per_layer / tokens,
                scores_per_layer: per_layer,
                peak_workspace: peak,
                seconds_per_step: seconds,
                status: if over { BenchStatus::OutOfMemory } else { BenchStatus::Ok },
            });
        }
    }
    Ok(rows)
}

fn time_step(model: &Model, batch: usize, window: usize, budget: usize) -> Result<f64> {
    let input = identity_batch(&model.config, batch, window)?;
    let start = Instant::now();
    let mut tape = Tape::with_budget(budget);
    let bound = model.params.bind(&mut tape, true)?;
    let x = tape.constant(input)?;
    let trace = forward_on_tape(&mut tape, &model.config, &bound, x, Mode::Eval)?;
    let diff = tape.sub(trace.prediction, x)?;
    let norms = tape.norm_lastdim(diff)?;
    let loss = tape.sum(norms)?;
    tape.backward(loss)?;
    Ok(start.elapsed().as_secs_f64())
}
