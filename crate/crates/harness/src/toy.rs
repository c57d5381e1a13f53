//! Synthetic spatio-temporal systems with known ground truth.
//!
//! Two tiers back the two-tier verification strategy:
//!
//! - `LinearGauss`: damped stochastic advection-diffusion on periodic rows.
//!   Its conditional law `p(X(t) | X(0))` is exactly Gaussian with circulant
//!   moments, so the analytic denoiser built from it makes the whole
//!   sampling stack testable without any training. Simulation uses the exact
//!   discretization (no integration error).
//! - `Lorenz96S`: stochastically forced Lorenz-96 rings embedded as grid
//!   rows, integrated with RK4 plus additive forcing; nonlinear and chaotic,
//!   used to exercise the full train/forecast/evaluate loop.

use std::sync::Arc;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use cef_core::denoiser::analytic::{CovOperator, GaussianMoments, GaussianPrior};
use cef_core::dft::DftPlan;
use cef_core::grid::{ConditioningWindow, GridSpec, StaticField, VariableSpec};
use cef_core::rng::{normal_field, StreamKey, StreamPurpose};

use crate::error::{HarnessError, Result};

/// Damped advection-diffusion coefficients, all in per-hour units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussParams {
    /// Advection speed (cells per hour) along the periodic axis.
    pub advection: f64,
    /// Diffusivity (cells^2 per hour).
    pub diffusion: f64,
    /// Uniform damping rate; must be positive for a stationary law.
    pub damping: f64,
    /// White forcing amplitude.
    pub forcing: f64,
}

impl Default for LinearGaussParams {
    fn default() -> Self {
        LinearGaussParams {
            advection: 0.5,
            diffusion: 0.08,
            damping: 0.03,
            forcing: 0.2,
        }
    }
}

/// Stochastically forced Lorenz-96 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Params {
    /// The constant drive F.
    pub forcing_f: f64,
    /// Stochastic forcing amplitude (per sqrt model-time-unit).
    pub stochastic_q: f64,
    /// Wall-clock scaling: hours per Lorenz-96 model time unit.
    pub hours_per_mtu: f64,
    /// RK4 substeps per simulated hour.
    pub substeps_per_hour: usize,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Lorenz96Params {
            forcing_f: 8.0,
            stochastic_q: 2.0,
            hours_per_mtu: 120.0,
            substeps_per_hour: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToySystemKind {
    LinearGauss(LinearGaussParams),
    Lorenz96S(Lorenz96Params),
}

/// Full synthetic-system description: dynamics, grid dims, seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySystemSpec {
    #[serde(flatten)]
    pub kind: ToySystemKind,
    pub height: usize,
    pub width: usize,
    /// Independent fields for LinearGauss; must be 1 for Lorenz96S.
    pub n_vars: usize,
    pub base_seed: u64,
    /// Include a fixed orography-like static field in [0, 1].
    pub with_static_field: bool,
    /// Mark variables 0 and 1 as a wind-component pair (needs n_vars >= 2).
    pub uv_pair: bool,
}

impl ToySystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width < 4 || self.n_vars == 0 {
            return Err(HarnessError::validation(
                "toy system needs height >= 1, width >= 4, n_vars >= 1",
            ));
        }
        if self.uv_pair && self.n_vars < 2 {
            return Err(HarnessError::validation("uv_pair needs n_vars >= 2"));
        }
        match &self.kind {
            ToySystemKind::LinearGauss(p) => {
                if !(p.damping > 0.0) || !(p.forcing > 0.0) || !(p.diffusion >= 0.0) {
                    return Err(HarnessError::validation(
                        "linear-gauss needs damping > 0, forcing > 0, diffusion >= 0",
                    ));
                }
            }
            ToySystemKind::Lorenz96S(p) => {
                if self.n_vars != 1 {
                    return Err(HarnessError::validation("lorenz96 uses a single variable"));
                }
                if p.substeps_per_hour == 0 || !(p.hours_per_mtu > 0.0) {
                    return Err(HarnessError::validation(
                        "lorenz96 needs substeps >= 1 and hours_per_mtu > 0",
                    ));
                }
            }
        }
        Ok(())
    }

    /// The static fields this system exposes.
    pub fn static_fields(&self) -> Vec<StaticField> {
        if !self.with_static_field {
            return Vec::new();
        }
        let mut values = Vec::with_capacity(self.height * self.width);
        for h in 0..self.height {
            for w in 0..self.width {
                let ridge =
                    0.5 * (1.0 + (2.0 * std::f64::consts::PI * w as f64 / self.width as f64).sin());
                let tilt = (h as f64 + 1.0) / self.height as f64;
                values.push(ridge * tilt);
            }
        }
        vec![StaticField {
            name: "ridge".into(),
            values,
        }]
    }

    /// Simulate `n_hours + 1` physical-unit states at hourly spacing,
    /// starting from an exact stationary draw (LinearGauss) or a spun-up
    /// state (Lorenz96S). Deterministic in `base_seed`.
    pub fn simulate_hours(&self, n_hours: usize) -> Result<Vec<Array3<f64>>> {
        self.validate()?;
        match &self.kind {
            ToySystemKind::LinearGauss(p) => Ok(LinearGaussClosedForm::new(self, *p)
                .simulate(n_hours, self.base_seed)),
            ToySystemKind::Lorenz96S(p) => Ok(simulate_lorenz96(self, *p, n_hours)),
        }
    }
}

/// Closed-form machinery for the linear-Gauss system: transition and
/// conditional-covariance spectra of the exact hourly discretization.
pub struct LinearGaussClosedForm {
    pub params: LinearGaussParams,
    height: usize,
    width: usize,
    n_vars: usize,
    plan: Arc<DftPlan>,
    /// Complex generator eigenvalues per spatial mode.
    lambda: Vec<(f64, f64)>,
    /// Stationary mode variances.
    pub stationary_mode_vars: Vec<f64>,
}

impl LinearGaussClosedForm {
    pub fn new(spec: &ToySystemSpec, params: LinearGaussParams) -> Self {
        let w = spec.width;
        let mut lambda = Vec::with_capacity(w);
        let mut stat = Vec::with_capacity(w);
        for k in 0..w {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / w as f64;
            let re = -params.damping - 2.0 * params.diffusion * (1.0 - theta.cos());
            let im = -params.advection * theta.sin();
            lambda.push((re, im));
            stat.push(params.forcing * params.forcing / (2.0 * re.abs()));
        }
        LinearGaussClosedForm {
            params,
            height: spec.height,
            width: spec.width,
            n_vars: spec.n_vars,
            plan: Arc::new(DftPlan::new(w)),
            lambda,
            stationary_mode_vars: stat,
        }
    }

    /// Transition-operator eigenvalues `exp(lambda_k t)` for a lead of `t`
    /// hours.
    pub fn transition_eigenvalues(&self, t: f64) -> Vec<(f64, f64)> {
        self.lambda
            .iter()
            .map(|&(re, im)| {
                let mag = (re * t).exp();
                (mag * (im * t).cos(), mag * (im * t).sin())
            })
            .collect()
    }

    /// Conditional mode variances of `X(t) | X(0)` (physical units).
    pub fn conditional_mode_vars(&self, t: f64) -> Vec<f64> {
        self.lambda
            .iter()
            .zip(&self.stationary_mode_vars)
            .map(|(&(re, _), &v)| v * (1.0 - (2.0 * re * t).exp()))
            .collect()
    }

    /// Per-cell stationary variance (physical units).
    pub fn stationary_cell_variance(&self) -> f64 {
        self.stationary_mode_vars.iter().sum::<f64>() / self.width as f64
    }

    /// Per-cell variance of the increment `X(t) - X(0)` under stationarity:
    /// `2 * (var - cov(t))` per mode, averaged over modes.
    pub fn increment_cell_std(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (&(re, im), &v) in self.lambda.iter().zip(&self.stationary_mode_vars) {
            let cov = v * (re * t).exp() * (im * t).cos();
            acc += 2.0 * (v - cov);
        }
        (acc / self.width as f64).sqrt()
    }

    /// Apply the transition operator to one state (each variable and row
    /// independently).
    pub fn apply_transition(&self, state: &Array3<f64>, t: f64) -> Array3<f64> {
        let eig = self.transition_eigenvalues(t);
        self.apply_rowwise(state, &eig)
    }

    fn apply_rowwise(&self, state: &Array3<f64>, eig: &[(f64, f64)]) -> Array3<f64> {
        let (nv, nh, nw) = state.dim();
        let mut out = Array3::zeros((nv, nh, nw));
        for v in 0..nv {
            for h in 0..nh {
                let row: Vec<f64> = (0..nw).map(|w| state[[v, h, w]]).collect();
                let res = self.plan.apply_circulant(eig, &row);
                for (w, val) in res.into_iter().enumerate() {
                    out[[v, h, w]] = val;
                }
            }
        }
        out
    }

    /// Color a white field into a sample with the given mode variances.
    fn color_noise(&self, white: &Array3<f64>, mode_vars: &[f64]) -> Array3<f64> {
        let gains: Vec<(f64, f64)> = mode_vars.iter().map(|&v| (v.sqrt(), 0.0)).collect();
        self.apply_rowwise(white, &gains)
    }

    /// Exact simulation: a stationary initial draw, then exact hourly
    /// transitions with exactly distributed innovations.
    pub fn simulate(&self, n_hours: usize, seed: u64) -> Vec<Array3<f64>> {
        let shape = (self.n_vars, self.height, self.width);
        let init_white = normal_field(
            StreamKey::new(seed, StreamPurpose::ToyForcing, 0, 0),
            shape,
        );
        let mut state = self.color_noise(&init_white, &self.stationary_mode_vars);
        let mut out = Vec::with_capacity(n_hours + 1);
        out.push(state.clone());
        let trans = self.transition_eigenvalues(1.0);
        let innov_vars = self.conditional_mode_vars(1.0);
        for step in 1..=n_hours {
            let white = normal_field(
                StreamKey::new(seed, StreamPurpose::ToyForcing, 0, step as u64),
                shape,
            );
            state = self.apply_rowwise(&state, &trans) + self.color_noise(&white, &innov_vars);
            out.push(state);
        }
        out
    }
}

/// The analytic denoiser prior for a linear-Gauss system, working in the
/// standardized units defined by the frozen (mean, std) statistics: if
/// `x_std = (x_phys - m)/s` then
/// `E[X_std(t) | window] = T_t x_std(0) + m (exp(-damping t) - 1)/s` and the
/// conditional spectrum is `v_k(t)/s^2`.
pub struct LinearGaussPrior {
    closed_form: LinearGaussClosedForm,
    /// Per-variable frozen standardization statistics.
    stats: Vec<(f64, f64)>,
}

impl LinearGaussPrior {
    pub fn new(spec: &ToySystemSpec, params: LinearGaussParams, grid: &GridSpec) -> Result<Self> {
        if grid.n_vars() != spec.n_vars {
            return Err(HarnessError::validation(format!(
                "grid has {} variables, system has {}",
                grid.n_vars(),
                spec.n_vars
            )));
        }
        Ok(LinearGaussPrior {
            closed_form: LinearGaussClosedForm::new(spec, params),
            stats: grid.variables.iter().map(|v| (v.mean, v.std)).collect(),
        })
    }

    pub fn closed_form(&self) -> &LinearGaussClosedForm {
        &self.closed_form
    }

    /// Exact conditional moments in standardized units.
    pub fn conditional_moments(&self, window: &ConditioningWindow, t: f64) -> GaussianMoments {
        let x0 = &window.latest().values;
        let mut mean = self.closed_form.apply_transition(x0, t);
        let decay0 = (-self.closed_form.params.damping * t).exp();
        for (v, &(m, s)) in self.stats.iter().enumerate() {
            let shift = m * (decay0 - 1.0) / s;
            if shift != 0.0 {
                mean.index_axis_mut(ndarray::Axis(0), v)
                    .mapv_inplace(|x| x + shift);
            }
        }
        let cond = self.closed_form.conditional_mode_vars(t);
        let mode_vars: Vec<Vec<f64>> = self
            .stats
            .iter()
            .map(|&(_, s)| cond.iter().map(|&v| v / (s * s)).collect())
            .collect();
        let cov = CovOperator::circulant_rows(mode_vars, self.closed_form.width)
            .expect("conditional spectrum is symmetric and nonnegative");
        GaussianMoments { mean, cov }
    }
}

impl GaussianPrior for LinearGaussPrior {
    fn moments(&self, window: &ConditioningWindow, lead_time: f64) -> GaussianMoments {
        self.conditional_moments(window, lead_time)
    }
}

/// Lorenz-96 drift on a ring: `dx_w = (x_{w+1} - x_{w-2}) x_{w-1} - x_w + F`.
fn l96_drift(x: &[f64], f: f64, out: &mut [f64]) {
    let n = x.len();
    for w in 0..n {
        let xp1 = x[(w + 1) % n];
        let xm1 = x[(w + n - 1) % n];
        let xm2 = x[(w + n - 2) % n];
        out[w] = (xp1 - xm2) * xm1 - x[w] + f;
    }
}

fn l96_rk4_step(x: &mut [f64], f: f64, dt: f64) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    l96_drift(x, f, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    l96_drift(&tmp, f, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    l96_drift(&tmp, f, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    l96_drift(&tmp, f, &mut k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Simulate the stochastically forced Lorenz-96 rows. Each grid row is an
/// independent ring; forcing noise is added after each RK4 substep
/// (Euler-Maruyama splitting). A deterministic spin-up of 3 model time
/// units precedes the recorded window.
fn simulate_lorenz96(
    spec: &ToySystemSpec,
    params: Lorenz96Params,
    n_hours: usize,
) -> Vec<Array3<f64>> {
    let shape = (1, spec.height, spec.width);
    let dt = 1.0 / (params.hours_per_mtu * params.substeps_per_hour as f64);
    let noise_scale = params.stochastic_q * dt.sqrt();

    // Perturbed start, deterministic spin-up onto the attractor.
    let init = normal_field(
        StreamKey::new(spec.base_seed, StreamPurpose::ToyForcing, 1, 0),
        shape,
    );
    let mut rows: Vec<Vec<f64>> = (0..spec.height)
        .map(|h| {
            (0..spec.width)
                .map(|w| params.forcing_f + init[[0, h, w]])
                .collect()
        })
        .collect();
    let spinup_steps = (3.0 / dt).ceil() as usize;
    for row in &mut rows {
        for _ in 0..spinup_steps {
            l96_rk4_step(row, params.forcing_f, dt);
        }
    }

    let snapshot = |rows: &Vec<Vec<f64>>| {
        Array3::from_shape_fn(shape, |(_, h, w)| rows[h][w])
    };
    let mut out = Vec::with_capacity(n_hours + 1);
    out.push(snapshot(&rows));
    let mut substep_index = 0u64;
    for _hour in 1..=n_hours {
        for _ in 0..params.substeps_per_hour {
            substep_index += 1;
            let noise = if params.stochastic_q > 0.0 {
                Some(normal_field(
                    StreamKey::new(
                        spec.base_seed,
                        StreamPurpose::ToyForcing,
                        2,
                        substep_index,
                    ),
                    shape,
                ))
            } else {
                None
            };
            for (h, row) in rows.iter_mut().enumerate() {
                l96_rk4_step(row, params.forcing_f, dt);
                if let Some(n) = &noise {
                    for (w, x) in row.iter_mut().enumerate() {
                        *x += noise_scale * n[[0, h, w]];
                    }
                }
            }
        }
        out.push(snapshot(&rows));
    }
    out
}

/// Build the GridSpec for a toy system from frozen per-variable statistics.
pub fn build_grid_spec(
    system: &ToySystemSpec,
    stats: &[(f64, f64)],
) -> Result<Arc<GridSpec>> {
    if stats.len() != system.n_vars {
        return Err(HarnessError::validation(format!(
            "need {} variable statistics, got {}",
            system.n_vars,
            stats.len()
        )));
    }
    let variables = stats
        .iter()
        .enumerate()
        .map(|(v, &(mean, std))| VariableSpec {
            name: format!("var{v}"),
            mean,
            std,
        })
        .collect();
    let spec = GridSpec::new(
        system.height,
        system.width,
        GridSpec::cosine_latitude_weights(system.height, system.width),
        variables,
        system.static_fields(),
        if system.uv_pair { Some((0, 1)) } else { None },
    )
    .map_err(HarnessError::from)?;
    Ok(Arc::new(spec))
}
