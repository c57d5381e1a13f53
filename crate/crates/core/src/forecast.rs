//! Forecast rollout algorithms.
//!
//! - continuous: one latent draw per member, reused for every lead time;
//!   members and times sample fully in parallel
//! - extended continuous: per-member OU-correlated driving noise along the
//!   lead-time grid (reduces to the fixed-noise algorithm at rho = 0)
//! - ARCI: autoregressive blocks whose interiors are filled by the
//!   continuous (or extended) algorithm; per-member window linkage
//! - AR baseline: classic fixed-step autoregression, fresh noise per step
//! - deterministic: a direct-prediction model unrolled without an ensemble
//!
//! Seeds are keyed so that algorithm identities hold bit-exactly: extended
//! at rho = 0 equals continuous, ARCI at J = 1 equals continuous, and ARCI
//! with a single interpolation time equals the AR baseline.

use ndarray::Array3;
use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::{
    AlgorithmId, ConditioningWindow, EnsembleForecast, GridState, Provenance,
};
use crate::noise::{generate_sequence_in_block, sample_initial_in_block, Rho};
use crate::sampler::{heun_sample, SamplerConfig};

/// Matching tolerance when window offsets are resolved against generated or
/// initial state times (hours).
const TIME_MATCH_TOL: f64 = 1e-9;

/// What to run and how: algorithm, per-block interpolation times, ensemble
/// size, noise correlation and the master seed.
#[derive(Debug, Clone)]
pub struct ForecastPlan {
    pub algorithm: AlgorithmId,
    /// Interpolation times within one autoregressive block, strictly
    /// increasing, in hours; the last entry is the block length.
    pub times: Vec<f64>,
    /// Per-block time grids for mixed-resolution ARCI rollouts; when `None`
    /// every block uses `times`.
    pub block_times: Option<Vec<Vec<f64>>>,
    /// Autoregressive steps J (blocks). 1 for the purely continuous
    /// algorithms.
    pub ar_steps: usize,
    pub n_ens: usize,
    /// OU correlation parameter for the extended algorithm (also selects the
    /// extended algorithm inside ARCI when set).
    pub rho: Option<Rho>,
    pub master_seed: u64,
    /// Lead times the backend was trained on; used only to flag
    /// extrapolation in provenance.
    pub trained_lead_times: Option<Vec<f64>>,
}

impl ForecastPlan {
    pub fn new(algorithm: AlgorithmId, times: Vec<f64>, n_ens: usize, master_seed: u64) -> Self {
        ForecastPlan {
            algorithm,
            times,
            block_times: None,
            ar_steps: 1,
            n_ens,
            rho: None,
            master_seed,
            trained_lead_times: None,
        }
    }

    fn validate_times(times: &[f64]) -> Result<()> {
        if times.is_empty() {
            return Err(Error::EmptyInput("forecast times".into()));
        }
        if times[0] <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "forecast times must be positive, got {}",
                times[0]
            )));
        }
        for pair in times.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::InvalidParameter(format!(
                    "forecast times must be strictly increasing, got {pair:?}"
                )));
            }
        }
        Ok(())
    }

    fn blocks(&self) -> Result<Vec<Vec<f64>>> {
        let blocks = match &self.block_times {
            Some(b) => {
                if b.len() != self.ar_steps {
                    return Err(Error::InvalidParameter(format!(
                        "block_times has {} entries but ar_steps is {}",
                        b.len(),
                        self.ar_steps
                    )));
                }
                b.clone()
            }
            None => vec![self.times.clone(); self.ar_steps],
        };
        for b in &blocks {
            Self::validate_times(b)?;
        }
        Ok(blocks)
    }

    fn is_extrapolating(&self, block_relative_times: &[f64]) -> bool {
        match &self.trained_lead_times {
            None => false,
            Some(support) => block_relative_times.iter().any(|t| {
                !support
                    .iter()
                    .any(|s| (s - t).abs() <= TIME_MATCH_TOL)
            }),
        }
    }

    fn provenance(&self, algorithm: AlgorithmId, config: &SamplerConfig, extrapolated: bool) -> Provenance {
        Provenance {
            algorithm,
            master_seed: self.master_seed,
            rho: self.rho.map(|r| r.as_f64()),
            schedule_hash: config.schedule.content_hash(),
            extrapolated,
        }
    }
}

fn state_shape(window: &ConditioningWindow) -> (usize, usize, usize) {
    let spec = window.spec();
    (spec.n_vars(), spec.height, spec.width)
}

/// Continuous ensemble forecasting: per member one latent draw, reused at
/// every interpolation time.
pub fn continuous_forecast(
    window: &ConditioningWindow,
    plan: &ForecastPlan,
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
) -> Result<EnsembleForecast> {
    if plan.algorithm != AlgorithmId::Continuous {
        return Err(Error::InvalidParameter(format!(
            "plan algorithm is {}, expected continuous",
            plan.algorithm
        )));
    }
    ForecastPlan::validate_times(&plan.times)?;
    let shape = state_shape(window);
    let data: Vec<Vec<GridState>> = (0..plan.n_ens as u64)
        .into_par_iter()
        .map(|member| {
            let latent = sample_initial_in_block(member, shape, plan.master_seed, 0);
            plan.times
                .iter()
                .map(|&t| heun_sample(&latent, t, window, config, denoiser))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let extrapolated = plan.is_extrapolating(&plan.times);
    EnsembleForecast::new(
        plan.times.clone(),
        data,
        plan.provenance(AlgorithmId::Continuous, config, extrapolated),
    )
}

/// Extended continuous forecasting: the latent noise follows an OU process
/// along the lead-time grid. Time marginals match the fixed-noise algorithm;
/// only trajectory autocorrelation differs.
pub fn extended_continuous_forecast(
    window: &ConditioningWindow,
    plan: &ForecastPlan,
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
) -> Result<EnsembleForecast> {
    if plan.algorithm != AlgorithmId::ContinuousOu {
        return Err(Error::InvalidParameter(format!(
            "plan algorithm is {}, expected continuous_ou",
            plan.algorithm
        )));
    }
    let rho = plan
        .rho
        .ok_or_else(|| Error::InvalidParameter("extended algorithm needs rho".into()))?;
    ForecastPlan::validate_times(&plan.times)?;
    let shape = state_shape(window);
    let data: Vec<Vec<GridState>> = (0..plan.n_ens as u64)
        .into_par_iter()
        .map(|member| {
            let seq =
                generate_sequence_in_block(&plan.times, rho, member, shape, plan.master_seed, 0)?;
            plan.times
                .iter()
                .enumerate()
                .map(|(i, &t)| heun_sample(seq.field(i), t, window, config, denoiser))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let extrapolated = plan.is_extrapolating(&plan.times);
    EnsembleForecast::new(
        plan.times.clone(),
        data,
        plan.provenance(AlgorithmId::ContinuousOu, config, extrapolated),
    )
}

/// Resolve the conditioning window for the next block: offset 0 becomes the
/// state at `boundary_time`, and each earlier offset must land (within
/// tolerance) on a previously generated state or an initial-condition state.
fn shifted_window(
    offsets: &[f64],
    boundary_time: f64,
    initial: &[GridState],
    history: &[GridState],
) -> Result<ConditioningWindow> {
    let lookup = |target: f64| -> Option<GridState> {
        history
            .iter()
            .chain(initial.iter())
            .find(|s| (s.valid_time - target).abs() <= TIME_MATCH_TOL)
            .cloned()
    };
    let mut states = Vec::with_capacity(offsets.len());
    for &off in offsets {
        let target = boundary_time + off;
        let state = lookup(target).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "window offset {off} needs a state at t={target}, which is on neither the \
                 generated time grid nor the initial conditions"
            ))
        })?;
        states.push(state);
    }
    ConditioningWindow::new(states, offsets.to_vec())
}

/// Autoregressive roll-out with continuous interpolation: J blocks, each
/// filled by the continuous (or, with rho set, extended) algorithm, windows
/// advanced per member from that member's own generated states.
pub fn arci_forecast(
    initial_window: &ConditioningWindow,
    plan: &ForecastPlan,
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
) -> Result<EnsembleForecast> {
    if plan.algorithm != AlgorithmId::Arci {
        return Err(Error::InvalidParameter(format!(
            "plan algorithm is {}, expected arci",
            plan.algorithm
        )));
    }
    if plan.ar_steps < 1 {
        return Err(Error::InvalidParameter("ARCI needs ar_steps >= 1".into()));
    }
    let blocks = plan.blocks()?;
    let shape = state_shape(initial_window);
    let offsets = initial_window.offsets().to_vec();
    let initial_states = initial_window.states().to_vec();

    let mut extrapolated = false;
    for b in &blocks {
        extrapolated |= plan.is_extrapolating(b);
    }

    let member_run = |member: u64| -> Result<Vec<GridState>> {
        let mut history: Vec<GridState> = Vec::new();
        let mut window = initial_window.clone();
        let mut block_offset = 0.0;
        for (j, block) in blocks.iter().enumerate() {
            let fields: Vec<Array3<f64>> = match plan.rho {
                None => {
                    let z = sample_initial_in_block(member, shape, plan.master_seed, j);
                    vec![z; block.len()]
                }
                Some(rho) => {
                    generate_sequence_in_block(block, rho, member, shape, plan.master_seed, j)?
                        .fields
                }
            };
            for (i, &t) in block.iter().enumerate() {
                let sampled = heun_sample(&fields[i], t, &window, config, denoiser)?;
                history.push(GridState {
                    spec: sampled.spec.clone(),
                    values: sampled.values,
                    valid_time: block_offset + t,
                });
            }
            block_offset += block.last().copied().unwrap();
            if j + 1 < blocks.len() {
                window = shifted_window(&offsets, block_offset, &initial_states, &history)?;
            }
        }
        Ok(history)
    };

    let data: Vec<Vec<GridState>> = (0..plan.n_ens as u64)
        .into_par_iter()
        .map(member_run)
        .collect::<Result<Vec<_>>>()?;

    let mut lead_times = Vec::new();
    let mut block_offset = 0.0;
    for block in &blocks {
        for &t in block {
            lead_times.push(block_offset + t);
        }
        block_offset += block.last().copied().unwrap();
    }
    EnsembleForecast::new(
        lead_times,
        data,
        plan.provenance(AlgorithmId::Arci, config, extrapolated),
    )
}

/// Fixed-step autoregressive baseline: fresh noise at every step, window
/// shifted per member.
pub fn ar_baseline(
    window: &ConditioningWindow,
    delta: f64,
    steps: usize,
    n_ens: usize,
    master_seed: u64,
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
) -> Result<EnsembleForecast> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ar_baseline needs delta > 0, got {delta}"
        )));
    }
    if steps == 0 {
        return Err(Error::EmptyInput("ar_baseline with zero steps".into()));
    }
    let shape = state_shape(window);
    let offsets = window.offsets().to_vec();
    let initial_states = window.states().to_vec();

    let member_run = |member: u64| -> Result<Vec<GridState>> {
        let mut history: Vec<GridState> = Vec::new();
        let mut win = window.clone();
        for j in 0..steps {
            let z = sample_initial_in_block(member, shape, master_seed, j);
            let sampled = heun_sample(&z, delta, &win, config, denoiser)?;
            let absolute = delta * (j + 1) as f64;
            history.push(GridState {
                spec: sampled.spec.clone(),
                values: sampled.values,
                valid_time: absolute,
            });
            if j + 1 < steps {
                win = shifted_window(&offsets, absolute, &initial_states, &history)?;
            }
        }
        Ok(history)
    };

    let data: Vec<Vec<GridState>> = (0..n_ens as u64)
        .into_par_iter()
        .map(member_run)
        .collect::<Result<Vec<_>>>()?;
    let lead_times: Vec<f64> = (1..=steps).map(|j| delta * j as f64).collect();
    EnsembleForecast::new(
        lead_times,
        data,
        Provenance {
            algorithm: AlgorithmId::ArBaseline,
            master_seed,
            rho: None,
            schedule_hash: config.schedule.content_hash(),
            extrapolated: false,
        },
    )
}

/// A deterministic single-step predictor (MSE-trained baseline).
pub trait DirectModel: Send + Sync {
    fn predict(&self, window: &ConditioningWindow, lead_time: f64) -> Result<Array3<f64>>;
}

/// Unroll a deterministic model: a single trajectory, no ensemble.
pub fn deterministic_forecast(
    window: &ConditioningWindow,
    delta: f64,
    steps: usize,
    model: &dyn DirectModel,
) -> Result<Vec<GridState>> {
    if !(delta > 0.0) || steps == 0 {
        return Err(Error::InvalidParameter(
            "deterministic forecast needs delta > 0 and steps >= 1".into(),
        ));
    }
    let offsets = window.offsets().to_vec();
    let initial_states = window.states().to_vec();
    let mut history: Vec<GridState> = Vec::new();
    let mut win = window.clone();
    let spec = window.spec().clone();
    for j in 0..steps {
        let values = model.predict(&win, delta)?;
        let absolute = delta * (j + 1) as f64;
        let state = GridState::new(spec.clone(), values, absolute)?;
        history.push(state);
        if j + 1 < steps {
            win = shifted_window(&offsets, absolute, &initial_states, &history)?;
        }
    }
    Ok(history)
}
