//! Denoising training: lead-time loss scales, the weighted objective with
//! exact gradients, and the decoupled-weight-decay optimizer with warmup plus
//! cosine decay.
//!
//! The per-example objective is
//! `(1/sigma^2) * (1/(|I||J|)) * sum_ij (a_i / s_j(t)) * (Dhat_ij - X_ij)^2`
//! with `Dhat = D_theta(X(t) + eps; sigma, X(Omega), t)`; sigma is drawn per
//! example from the training schedule's inverse CDF and the lead time
//! uniformly from the configured set. Batch reductions run in a fixed order
//! so repeated runs are bit-identical.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConvNet, Denoiser};
use crate::edm::{precondition, sample_training_sigma, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::{ConditioningWindow, GridState};
use crate::rng::{normal_field, StreamKey, StreamPurpose};

/// Floor applied to degenerate (constant-variable) lead-time scales.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Which statistic the lead-time scale is computed from. The increment form
/// is the default; the alternatives stay switchable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LeadTimeScaleKind {
    /// Std of `X_j(t) - X_j(0)` over pairs and cells.
    #[default]
    Increment,
    /// Std of `X_j(t)` itself.
    State,
    /// No scaling (all ones).
    Unit,
}

/// Per-variable, per-lead-time positive loss scales `s_j(t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeadTimeScale {
    pub lead_times: Vec<f64>,
    /// `scales[lead_index][variable]`.
    pub scales: Vec<Vec<f64>>,
    /// `(lead_index, variable)` entries that hit the degeneracy floor.
    pub floored: Vec<(usize, usize)>,
}

impl LeadTimeScale {
    /// Unit scales for the given lead times and variable count.
    pub fn unit(lead_times: Vec<f64>, n_vars: usize) -> Self {
        let scales = vec![vec![1.0; n_vars]; lead_times.len()];
        LeadTimeScale {
            lead_times,
            scales,
            floored: Vec::new(),
        }
    }

    pub fn get(&self, lead_time: f64, variable: usize) -> Result<f64> {
        let idx = self
            .lead_times
            .iter()
            .position(|t| (t - lead_time).abs() < 1e-9)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "no lead-time scale tabulated for t = {lead_time}"
                ))
            })?;
        Ok(self.scales[idx][variable])
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.scales {
            for &s in row {
                if !(s > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "lead-time scale must be positive, got {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One training example: conditioning window, lead time, clean target.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub window: ConditioningWindow,
    pub lead_time: f64,
    pub target: GridState,
}

/// Deterministic access to training pairs: `example(idx, t)` must always
/// return the same data for the same arguments.
pub trait ExampleSource: Sync {
    fn n_windows(&self) -> usize;
    fn example(&self, window_idx: usize, lead_time: f64) -> Result<TrainingExample>;
}

/// Compute `s_j(t)` from sampled training increments.
pub fn compute_leadtime_scales(
    source: &dyn ExampleSource,
    lead_times: &[f64],
    kind: LeadTimeScaleKind,
    max_pairs: usize,
) -> Result<LeadTimeScale> {
    if source.n_windows() == 0 {
        return Err(Error::EmptyInput("lead-time scales over empty set".into()));
    }
    if lead_times.is_empty() {
        return Err(Error::EmptyInput("lead-time scales need lead times".into()));
    }
    let probe = source.example(0, lead_times[0])?;
    let n_vars = probe.target.spec.n_vars();
    if kind == LeadTimeScaleKind::Unit {
        return Ok(LeadTimeScale::unit(lead_times.to_vec(), n_vars));
    }
    let n_pairs = source.n_windows().min(max_pairs);
    let stride = (source.n_windows() / n_pairs).max(1);
    let mut scales = Vec::with_capacity(lead_times.len());
    let mut floored = Vec::new();
    for (ti, &t) in lead_times.iter().enumerate() {
        let mut sums = vec![0.0; n_vars];
        let mut sqs = vec![0.0; n_vars];
        let mut count = 0usize;
        for p in 0..n_pairs {
            let ex = source.example(p * stride, t)?;
            for v in 0..n_vars {
                let target = ex.target.variable(v);
                match kind {
                    LeadTimeScaleKind::Increment => {
                        let base = ex.window.latest().variable(v);
                        for (a, b) in target.iter().zip(base.iter()) {
                            let d = a - b;
                            sums[v] += d;
                            sqs[v] += d * d;
                        }
                    }
                    LeadTimeScaleKind::State => {
                        for a in target.iter() {
                            sums[v] += a;
                            sqs[v] += a * a;
                        }
                    }
                    LeadTimeScaleKind::Unit => unreachable!(),
                }
            }
            count += ex.target.spec.n_cells();
        }
        let mut row = Vec::with_capacity(n_vars);
        for v in 0..n_vars {
            let mean = sums[v] / count as f64;
            let var = (sqs[v] / count as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            if std < SCALE_FLOOR {
                floored.push((ti, v));
                row.push(SCALE_FLOOR);
            } else {
                row.push(std);
            }
        }
        scales.push(row);
    }
    let out = LeadTimeScale {
        lead_times: lead_times.to_vec(),
        scales,
        floored,
    };
    out.validate()?;
    Ok(out)
}

/// One loss-batch item with its noise draws held explicitly, so gradients
/// can be checked against finite differences with everything else frozen.
#[derive(Debug, Clone)]
pub struct LossBatchItem {
    pub example: TrainingExample,
    pub sigma: f64,
    /// Noise field already scaled to `N(0, sigma^2 I)`.
    pub epsilon: Array3<f64>,
}

fn per_example_weights(
    item: &LossBatchItem,
    scales: &LeadTimeScale,
) -> Result<(Array3<f64>, f64)> {
    let spec = item.example.target.spec.clone();
    let (nv, nh, nw) = (spec.n_vars(), spec.height, spec.width);
    let norm = 1.0
        / (item.sigma * item.sigma)
        / (spec.n_cells() as f64 * nv as f64);
    let mut w = Array3::zeros((nv, nh, nw));
    for v in 0..nv {
        let s = scales.get(item.example.lead_time, v)?;
        for h in 0..nh {
            for x in 0..nw {
                w[[v, h, x]] = norm * spec.area_weights[h * nw + x] / s;
            }
        }
    }
    Ok((w, norm))
}

/// Weighted denoising loss of an arbitrary denoiser on a batch; used for
/// oracle floors and validation (no gradient).
pub fn denoising_loss_value(
    denoiser: &dyn Denoiser,
    batch: &[LossBatchItem],
    scales: &LeadTimeScale,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty loss batch".into()));
    }
    let mut acc = 0.0;
    for item in batch {
        let noisy = &item.example.target.values + &item.epsilon;
        let dhat = denoiser.denoise(
            &noisy,
            item.sigma,
            &item.example.window,
            item.example.lead_time,
        )?;
        let (w, _) = per_example_weights(item, scales)?;
        let mut ex_loss = 0.0;
        for ((&d, &x), &wi) in dhat
            .iter()
            .zip(item.example.target.values.iter())
            .zip(w.iter())
        {
            let e = d - x;
            ex_loss += wi * e * e;
        }
        acc += ex_loss;
    }
    let loss = acc / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::TrainingFault(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Denoising loss and its exact gradient with respect to the network
/// parameters. `dropout_seed` enables train-mode dropout with masks keyed by
/// `(seed, batch index)`. Per-example work runs in parallel; the reduction
/// into the batch gradient is sequential in batch order.
pub fn denoising_loss(
    net: &ConvNet,
    batch: &[LossBatchItem],
    scales: &LeadTimeScale,
    sigma_data: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty loss batch".into()));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let per_example: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(bi, item)| {
            let c = precondition(item.sigma, sigma_data)?;
            let noisy = &item.example.target.values + &item.epsilon;
            let scaled = &noisy * c.c_in;
            let cond = item.example.window.stack_channels();
            let dropout_key = dropout_seed.map(|s| {
                StreamKey::new(s, StreamPurpose::Dropout, bi as u64, 0)
            });
            let tape = net.forward_cached(
                Some(&scaled),
                &cond,
                c.c_noise,
                item.example.lead_time,
                dropout_key,
            )?;
            let raw = net.tape_output(&tape);
            let dhat = &noisy * c.c_skip + &raw * c.c_out;
            let (w, _) = per_example_weights(item, scales)?;
            let mut ex_loss = 0.0;
            let mut dout = Array3::zeros(raw.dim());
            for (((&d, &x), &wi), g) in dhat
                .iter()
                .zip(item.example.target.values.iter())
                .zip(w.iter())
                .zip(dout.iter_mut())
            {
                let e = d - x;
                ex_loss += wi * e * e;
                *g = 2.0 * wi * e * c.c_out * inv_batch;
            }
            let mut grad = vec![0.0; net.param_count()];
            net.backward(&tape, &dout, &mut grad);
            Ok((ex_loss, grad))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for item in per_example {
        let (l, g) = item?;
        loss += l * inv_batch;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingFault("non-finite loss or gradient".into()));
    }
    Ok((loss, grad))
}

/// Optimizer and schedule parameters. Defaults follow the training recipe:
/// decoupled weight decay 0.1, peak rate 5e-4, 1e3 warmup steps, cosine
/// decay, batch 256, dropout 0.1, training noise schedule (88, 0.02, 7).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub train_schedule: NoiseSchedule,
    pub lead_times: Vec<f64>,
    pub scale_kind: LeadTimeScaleKind,
    pub seed: u64,
    pub sigma_data: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("rates must be nonnegative".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::InvalidParameter(
                "warmup must not exceed total steps".into(),
            ));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::InvalidParameter(
                "batch size and total steps must be positive".into(),
            ));
        }
        if self.lead_times.is_empty() {
            return Err(Error::EmptyInput("training lead times".into()));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay reaching 1e-6 of peak on
    /// the final step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = 1e-6 * self.peak_lr;
        let span = (self.total_steps.saturating_sub(1 + self.warmup_steps)).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with decoupled weight decay, beta = (0.9, 0.999), eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * theta[i]);
        }
    }
}

/// Draw one training batch for a step: window index, lead time, sigma and
/// epsilon all come from per-(step, slot) keyed streams.
pub fn draw_batch(
    source: &dyn ExampleSource,
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<LossBatchItem>> {
    use rand::Rng;
    let n = source.n_windows();
    if n == 0 {
        return Err(Error::EmptyInput("training source".into()));
    }
    (0..config.batch_size)
        .map(|slot| {
            let key = StreamKey::new(
                config.seed,
                StreamPurpose::Training,
                step as u64,
                slot as u64,
            );
            let mut rng = key.rng();
            let widx = rng.random_range(0..n);
            let t = config.lead_times[rng.random_range(0..config.lead_times.len())];
            let u: f64 = rng.random();
            let sigma = sample_training_sigma(u, &config.train_schedule)?;
            let example = source.example(widx, t)?;
            let shape = example.target.values.dim();
            let eps_key = StreamKey::new(
                config.seed,
                StreamPurpose::Training,
                step as u64,
                (slot as u64) | (1 << 32),
            );
            let epsilon = normal_field(eps_key, shape) * sigma;
            Ok(LossBatchItem {
                example,
                sigma,
                epsilon,
            })
        })
        .collect()
}

/// Training outcome: the updated network and the per-step loss curve.
pub struct TrainOutcome {
    pub net: ConvNet,
    pub loss_curve: Vec<(usize, f64)>,
}

/// Run the optimization loop. Aborts on divergence (loss exceeding 1e3
/// times the initial loss) or non-finite values.
pub fn train(
    source: &dyn ExampleSource,
    mut net: ConvNet,
    config: &TrainConfig,
    scales: &LeadTimeScale,
) -> Result<TrainOutcome> {
    config.validate()?;
    scales.validate()?;
    let mut opt = AdamW::new(net.param_count(), config.weight_decay);
    let mut loss_curve = Vec::with_capacity(config.total_steps);
    let mut initial_loss = None;
    let dropout_seed = if net.config.dropout_p > 0.0 {
        Some(crate::rng::mix64(config.seed ^ 0xd0))
    } else {
        None
    };
    for step in 0..config.total_steps {
        let batch = draw_batch(source, config, step)?;
        let (loss, grad) = denoising_loss(
            &net,
            &batch,
            scales,
            config.sigma_data,
            dropout_seed.map(|s| crate::rng::mix64(s ^ step as u64)),
        )?;
        let init = *initial_loss.get_or_insert(loss);
        if loss > 1e3 * init {
            return Err(Error::TrainingFault(format!(
                "divergence at step {step}: loss {loss} vs initial {init}"
            )));
        }
        let lr = config.learning_rate(step);
        opt.update(&mut net.theta, &grad, lr);
        loss_curve.push((step, loss));
    }
    Ok(TrainOutcome { net, loss_curve })
}

/// Area-weighted MSE loss of the deterministic single-step predictor, with
/// exact gradient: `(1/(|I||J|)) * sum_ij a_i (pred_ij - X_ij)^2`, batch-mean.
pub fn deterministic_mse_loss(
    net: &ConvNet,
    batch: &[TrainingExample],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty loss batch".into()));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let per_example: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(bi, ex)| {
            let cond = ex.window.stack_channels();
            let dropout_key =
                dropout_seed.map(|s| StreamKey::new(s, StreamPurpose::Dropout, bi as u64, 0));
            let tape = net.forward_cached(None, &cond, 0.0, ex.lead_time, dropout_key)?;
            let pred = net.tape_output(&tape);
            let spec = &ex.target.spec;
            let norm = 1.0 / (spec.n_cells() as f64 * spec.n_vars() as f64);
            let mut loss = 0.0;
            let mut dout = Array3::zeros(pred.dim());
            let (nv, nh, nw) = pred.dim();
            for v in 0..nv {
                for h in 0..nh {
                    for x in 0..nw {
                        let w = norm * spec.area_weights[h * nw + x];
                        let e = pred[[v, h, x]] - ex.target.values[[v, h, x]];
                        loss += w * e * e;
                        dout[[v, h, x]] = 2.0 * w * e * inv_batch;
                    }
                }
            }
            let mut grad = vec![0.0; net.param_count()];
            net.backward(&tape, &dout, &mut grad);
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.param_count()];
    for item in per_example {
        let (l, g) = item?;
        loss += l * inv_batch;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    if !loss.is_finite() {
        return Err(Error::TrainingFault("non-finite MSE loss".into()));
    }
    Ok((loss, grad))
}

/// Optimization loop for the deterministic baseline (single fixed step,
/// MSE objective, no noise draws).
pub fn train_deterministic(
    source: &dyn ExampleSource,
    mut net: ConvNet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    use rand::Rng;
    config.validate()?;
    let delta = config.lead_times[0];
    let mut opt = AdamW::new(net.param_count(), config.weight_decay);
    let mut loss_curve = Vec::with_capacity(config.total_steps);
    let mut initial_loss = None;
    let dropout_seed = if net.config.dropout_p > 0.0 {
        Some(crate::rng::mix64(config.seed ^ 0xde7))
    } else {
        None
    };
    let n = source.n_windows();
    for step in 0..config.total_steps {
        let batch: Vec<TrainingExample> = (0..config.batch_size)
            .map(|slot| {
                let mut rng = StreamKey::new(
                    config.seed,
                    StreamPurpose::Training,
                    step as u64,
                    (slot as u64) | (1 << 40),
                )
                .rng();
                source.example(rng.random_range(0..n), delta)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = deterministic_mse_loss(
            &net,
            &batch,
            dropout_seed.map(|s| crate::rng::mix64(s ^ step as u64)),
        )?;
        let init = *initial_loss.get_or_insert(loss);
        if loss > 1e3 * init {
            return Err(Error::TrainingFault(format!(
                "divergence at step {step}: loss {loss} vs initial {init}"
            )));
        }
        let lr = config.learning_rate(step);
        opt.update(&mut net.theta, &grad, lr);
        loss_curve.push((step, loss));
    }
    Ok(TrainOutcome { net, loss_curve })
}
