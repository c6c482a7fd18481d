//! Adam training loop, validation tracking, checkpointing, evaluation.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::data::{DataSample, Dataset, Split};
use crate::error::{Error, Result};
use crate::fem::{postprocess, restrict_stencil, CenterStencils, ElementField, NodalField};
use crate::losses::{build_loss, BoundarySets, LossId, LossWeights, MaskedCenters};
use crate::metrics::{
    metric_m1, metric_m2, metric_m3, metric_m4, unified_score, MetricsReport, MetricsRow,
    Provenance, UnifiedWeights,
};
use crate::operators::{branch_encode, save_checkpoint, ModelParams, OperatorConfig, Variant};
use crate::voxel::{node_position, VoxelGrid};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Above this nodal resolution, training steps draw a random subset of
/// fluid elements instead of the full grid.
pub const FULL_GRID_LIMIT: usize = 32;
pub const DEFAULT_SUBSAMPLE: usize = 8192;

/// Bias-corrected first/second-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64, tensor_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            m: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every tensor; `names` is consulted only to report
    /// non-finite gradients.
    pub fn step(
        &mut self,
        params: &mut [&mut Vec<f64>],
        grads: &[Vec<f64>],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        for (t, g) in grads.iter().enumerate() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}[{j}]", names[t]),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for t in 0..params.len() {
            let (m, v) = (&mut self.m[t], &mut self.v[t]);
            let p = &mut *params[t];
            let g = &grads[t];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub loss: LossId,
    pub model: OperatorConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epoch interval between periodic checkpoints (0 disables them);
    /// the best-validation checkpoint is always tracked.
    pub checkpoint_interval: usize,
    /// Fraction of the training set held out for validation.
    pub validation_fraction: f64,
    /// Loss-weight overrides; `h` is replaced by the dataset spacing.
    pub weights: LossWeights,
    /// Fluid elements per step; None picks the full grid up to
    /// `FULL_GRID_LIMIT` and `DEFAULT_SUBSAMPLE` beyond it.
    pub subsample_elements: Option<usize>,
    /// Keep a copy of the parameters at every new best-validation epoch.
    pub snapshot_best: bool,
}

impl TrainConfig {
    pub fn new(loss: LossId, model: OperatorConfig) -> Self {
        TrainConfig {
            loss,
            model,
            epochs: 200,
            learning_rate: 1e-4,
            batch_size: 2,
            seed: 0,
            checkpoint_interval: 50,
            validation_fraction: 0.1,
            weights: LossWeights::paper(1.0),
            subsample_elements: None,
            snapshot_best: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        if self.subsample_elements == Some(0) {
            return Err(Error::Config("element subsample must be >= 1".into()));
        }
        self.model.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV columns: epoch, train_loss, val_loss, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_params: ModelParams,
    /// Parameter snapshots at each best-validation improvement
    /// (populated when `snapshot_best` is set).
    pub best_trace: Vec<ModelParams>,
}

/// Per-sample quantities that do not change across epochs.
pub(crate) struct SampleContext {
    branch: Vec<f64>,
    nodal_sdf: Vec<f64>,
    truth_centers: ElementField,
    fluid_elements: Vec<usize>,
    sample: DataSample,
}

fn grid_coords(g: usize) -> Vec<[f64; 3]> {
    let mut coords = Vec::with_capacity(g * g * g);
    for ix in 0..g {
        for iy in 0..g {
            for iz in 0..g {
                coords.push(node_position(g, [ix, iy, iz]));
            }
        }
    }
    coords
}

fn prepare_sample(sample: &DataSample, config: &OperatorConfig) -> Result<SampleContext> {
    let branch = branch_encode(sample, config)?;
    let truth_centers = postprocess(&sample.velocity, &sample.sdf)?;
    let fluid_elements: Vec<usize> = truth_centers
        .mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if fluid_elements.is_empty() {
        return Err(Error::Degenerate(
            "sample has no fluid elements; cannot train on it".into(),
        ));
    }
    Ok(SampleContext {
        branch,
        nodal_sdf: sample.sdf.grid().values().to_vec(),
        truth_centers,
        fluid_elements,
        sample: sample.clone(),
    })
}

/// Builds the nodal prediction for one sample on a fresh tape and returns
/// the component variables along with the `[n,3]` output matrix.
fn forward_sample(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &SampleContext,
    coords: &[[f64; 3]],
    sdf_at: &[f64],
) -> Result<[Var; 3]> {
    let model = params.register(tape)?;
    let out = model.forward(
        tape,
        &ctx.branch,
        coords,
        matches!(params.config.variant, Variant::Geometric).then_some(sdf_at),
    )?;
    Ok([
        tape.column(out, 0)?,
        tape.column(out, 1)?,
        tape.column(out, 2)?,
    ])
}

/// Full-grid loss for one sample, or an unbiased estimate over a subset of
/// its fluid elements (whole elements, so the centroid stencils stay
/// intact; the nodal boundary term is always exact).
pub(crate) fn sample_loss(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &SampleContext,
    coords: &[[f64; 3]],
    stencils: &CenterStencils,
    bs: &BoundarySets,
    id: LossId,
    weights: &LossWeights,
    subset: Option<&[usize]>,
) -> Result<Var> {
    let nodal = forward_sample(tape, params, ctx, coords, &ctx.nodal_sdf)?;
    match subset {
        None => {
            let mc = MaskedCenters::from_nodal(tape, nodal, stencils, &ctx.truth_centers)?;
            build_loss(tape, id, &mc, weights, bs, nodal, &ctx.sample.velocity)
        }
        Some(elements) => {
            let restricted = CenterStencils {
                value: Arc::new(restrict_stencil(&stencils.value, elements)),
                gradient: std::array::from_fn(|a| {
                    Arc::new(restrict_stencil(&stencils.gradient[a], elements))
                }),
            };
            let take = |src: &Vec<f64>| -> Vec<f64> {
                elements.iter().map(|&e| src[e]).collect()
            };
            let truth = ElementField {
                resolution: ctx.truth_centers.resolution,
                spacing: ctx.truth_centers.spacing,
                values: std::array::from_fn(|c| take(&ctx.truth_centers.values[c])),
                gradients: std::array::from_fn(|c| {
                    std::array::from_fn(|a| take(&ctx.truth_centers.gradients[c][a]))
                }),
                mask: vec![true; elements.len()],
            };
            let mc = MaskedCenters::from_nodal(tape, nodal, &restricted, &truth)?;
            build_loss(tape, id, &mc, weights, bs, nodal, &ctx.sample.velocity)
        }
    }
}

struct StepResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn batch_step(
    params: &ModelParams,
    contexts: &[&SampleContext],
    subsets: &[Option<Vec<usize>>],
    coords: &[[f64; 3]],
    stencils: &CenterStencils,
    bs: &BoundarySets,
    id: LossId,
    weights: &LossWeights,
) -> Result<StepResult> {
    let per_sample: Vec<Result<(f64, Vec<Vec<f64>>)>> = contexts
        .par_iter()
        .zip(subsets.par_iter())
        .map(|(ctx, subset)| {
            let mut tape = Tape::new();
            let loss = sample_loss(
                &mut tape,
                params,
                ctx,
                coords,
                stencils,
                bs,
                id,
                weights,
                subset.as_deref(),
            )?;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = tape.params().iter().map(|&v| tape.grad(v)).collect();
            Ok((tape.scalar(loss)?, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    let n = contexts.len() as f64;
    for r in per_sample {
        let (loss, g) = r?;
        total_loss += loss;
        match &mut grads {
            None => {
                let mut g = g;
                for t in &mut g {
                    for x in t.iter_mut() {
                        *x /= n;
                    }
                }
                grads = Some(g);
            }
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y / n;
                    }
                }
            }
        }
    }
    Ok(StepResult {
        loss: total_loss / n,
        grads: grads.unwrap(),
    })
}

fn mean_loss(
    params: &ModelParams,
    contexts: &[SampleContext],
    indices: &[usize],
    coords: &[[f64; 3]],
    stencils: &CenterStencils,
    bs: &BoundarySets,
    id: LossId,
    weights: &LossWeights,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(f64::NAN);
    }
    let losses: Vec<Result<f64>> = indices
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new();
            let loss = sample_loss(
                &mut tape,
                params,
                &contexts[i],
                coords,
                stencils,
                bs,
                id,
                weights,
                None,
            )?;
            tape.scalar(loss)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / indices.len() as f64)
}

/// Runs the optimization loop: seeded shuffling each epoch, Adam updates
/// from batch-mean gradients, per-epoch train/validation losses, periodic
/// and best-validation checkpoints under `out_dir`.
pub fn train(
    ds: &Dataset,
    split: &Split,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let loss_label = config.loss.to_string();
    let g = ds.resolution;
    let h = ds.samples[0].velocity.spacing();
    let mut weights = config.weights.clone();
    weights.h = h;
    weights.validate()?;

    let contexts: Vec<SampleContext> = ds
        .samples
        .iter()
        .map(|s| prepare_sample(s, &config.model))
        .collect::<Result<_>>()?;
    let coords = grid_coords(g);
    let stencils = CenterStencils::new(g, h);
    let bs = BoundarySets::new(g);

    // Hold out a seeded validation subset of the training split.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train_idx: Vec<usize> = split.train.clone();
    for i in (1..train_idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        train_idx.swap(i, j);
    }
    let n_val = ((config.validation_fraction * train_idx.len() as f64).round() as usize)
        .min(train_idx.len() - 1);
    let val_idx: Vec<usize> = train_idx.split_off(train_idx.len() - n_val);

    let subsample = match config.subsample_elements {
        Some(k) => Some(k),
        None if g <= FULL_GRID_LIMIT => None,
        None => Some(DEFAULT_SUBSAMPLE),
    };

    let mut params = crate::operators::init_params(&config.model, config.seed)?;
    let sizes: Vec<usize> = params.flat().iter().map(|t| t.len()).collect();
    let names = params.flat_names();
    let mut adam = Adam::new(config.learning_rate, &sizes);

    let mut history = TrainHistory::default();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_trace = Vec::new();
    let mut last_good: Option<(usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let ctxs: Vec<&SampleContext> = batch.iter().map(|&i| &contexts[i]).collect();
            let subsets: Vec<Option<Vec<usize>>> = batch
                .iter()
                .map(|&i| {
                    subsample.map(|k| {
                        let fluid = &contexts[i].fluid_elements;
                        let k = k.min(fluid.len());
                        rand::seq::index::sample(&mut rng, fluid.len(), k)
                            .into_iter()
                            .map(|j| fluid[j])
                            .collect()
                    })
                })
                .collect();
            let step = batch_step(
                &params, &ctxs, &subsets, &coords, &stencils, &bs, config.loss, &weights,
            )?;
            if !step.loss.is_finite() {
                if let (Some(dir), Some((ep, good))) = (out_dir, &last_good) {
                    save_checkpoint(&dir.join("checkpoint_last_good.npz"), good, config.seed, *ep, &[("loss", loss_label.as_str())])?;
                }
                return Err(Error::NonFinite {
                    what: format!("training loss at epoch {epoch}"),
                });
            }
            {
                let mut flat = params.flat_mut();
                adam.step(&mut flat, &step.grads, &names)?;
            }
            epoch_loss += step.loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            mean_loss(
                &params, &contexts, &val_idx, &coords, &stencils, &bs, config.loss, &weights,
            )?
        };
        if !params.all_finite() || !val_loss.is_finite() {
            if let (Some(dir), Some((ep, good))) = (out_dir, &last_good) {
                save_checkpoint(&dir.join("checkpoint_last_good.npz"), good, config.seed, *ep, &[("loss", loss_label.as_str())])?;
            }
            return Err(Error::NonFinite {
                what: format!("model state after epoch {epoch}"),
            });
        }
        last_good = Some((epoch, params.clone()));
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            if config.snapshot_best {
                best_trace.push(params.clone());
            }
            if let Some(dir) = out_dir {
                save_checkpoint(
                    &dir.join("checkpoint_best.npz"),
                    &params,
                    config.seed,
                    epoch,
                    &[("loss", loss_label.as_str())],
                )?;
            }
        }
        if config.checkpoint_interval > 0 && epoch % config.checkpoint_interval == 0 {
            if let Some(dir) = out_dir {
                save_checkpoint(
                    &dir.join(format!("checkpoint_epoch_{epoch:04}.npz")),
                    &params,
                    config.seed,
                    epoch,
                    &[("loss", loss_label.as_str())],
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &dir.join("checkpoint_final.npz"),
            &params,
            config.seed,
            config.epochs,
            &[("loss", loss_label.as_str())],
        )?;
    }
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        best_val_loss: best_val,
        best_params,
        best_trace,
    })
}

/// Full-grid inference for one sample.
pub fn predict_nodal(params: &ModelParams, sample: &DataSample) -> Result<NodalField> {
    let g = sample.sdf.resolution();
    let coords = grid_coords(g);
    let branch = branch_encode(sample, &params.config)?;
    let mut tape = Tape::new();
    let model = params.register(&mut tape)?;
    let sdf_vals = sample.sdf.grid().values();
    let out = model.forward(
        &mut tape,
        &branch,
        &coords,
        matches!(params.config.variant, Variant::Geometric).then_some(sdf_vals),
    )?;
    let grid = |c: usize| -> Result<VoxelGrid> {
        let vals: Vec<f64> = tape.values(out).iter().skip(c).step_by(3).copied().collect();
        VoxelGrid::new(g, vals)
    };
    NodalField::new(grid(0)?, grid(1)?, grid(2)?)
}

/// Evaluates a model on the given sample indices: full-grid inference,
/// postprocessing, metrics M1-M4 per sample plus the default unified
/// score.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    provenance: Provenance,
) -> Result<MetricsReport> {
    let uw = UnifiedWeights::default();
    let rows: Vec<Result<MetricsRow>> = indices
        .par_iter()
        .map(|&i| {
            let sample = &ds.samples[i];
            let pred = predict_nodal(params, sample)?;
            let pred_centers = postprocess(&pred, &sample.sdf)?;
            let truth_centers = postprocess(&sample.velocity, &sample.sdf)?;
            let with_sample = |e: Error| -> Error {
                match e {
                    Error::UndefinedMetric(msg) => {
                        Error::UndefinedMetric(format!("sample {i}: {msg}"))
                    }
                    other => other,
                }
            };
            let m = [
                metric_m1(&pred_centers, &truth_centers).map_err(with_sample)?,
                metric_m2(&pred_centers, &truth_centers, &sample.sdf)
                    .map_err(with_sample)?,
                metric_m3(&pred_centers, &truth_centers).map_err(with_sample)?,
                metric_m4(&pred),
            ];
            Ok(MetricsRow {
                sample: i,
                reynolds: sample.reynolds,
                m,
                unified: unified_score(m, &uw)?,
            })
        })
        .collect();
    let rows: Result<Vec<MetricsRow>> = rows.into_iter().collect();
    Ok(MetricsReport {
        provenance,
        rows: rows?,
    })
}
