//! Probability-flow ODE right-hand side and the deterministic second-order
//! Heun solver.
//!
//! With the noise-level function `sigma(s) = s`, the flow ODE reads
//! `dz/ds = (z - D(z; s)) / s`. The solver walks the decreasing level
//! sequence with an Euler predictor and an explicit trapezoidal corrector,
//! skipping the corrector on the final step into the terminal zero level.
//! Sampling is a pure function of `(Z, window, t, parameters, config)`, so
//! repeated or concurrent invocations are bit-identical.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::edm::{schedule_levels, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::{ConditioningWindow, GridState};

/// How the initial sample is scaled from the unit-variance latent draw.
///
/// `Sigma` (the default) sets `z_0 = sigma(s_0) * Z`, making the initial
/// marginal `N(0, sigma_max^2 I)`, consistent with the training noise
/// distribution. `SigmaSquared` is the literal `sigma^2(s_0) * Z` variant,
/// kept selectable for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialScaleRule {
    Sigma,
    SigmaSquared,
}

impl Default for InitialScaleRule {
    fn default() -> Self {
        InitialScaleRule::Sigma
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub initial_scale_rule: InitialScaleRule,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule) -> Self {
        SamplerConfig {
            schedule,
            initial_scale_rule: InitialScaleRule::Sigma,
        }
    }
}

/// Flow-ODE right-hand side `dz/dsigma = (z - D(z; sigma)) / sigma`.
///
/// The terminal level is never evaluated: `sigma = 0` is rejected.
pub fn flow_rhs(
    z: &Array3<f64>,
    sigma: f64,
    window: &ConditioningWindow,
    lead_time: f64,
    denoiser: &dyn Denoiser,
) -> Result<Array3<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "flow_rhs needs sigma > 0, got {sigma}"
        )));
    }
    let d = denoiser.denoise(z, sigma, window, lead_time)?;
    let rhs = (z - &d) / sigma;
    if rhs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("flow rhs".into()));
    }
    Ok(rhs)
}

/// Solve the probability-flow ODE from pure noise `Z` down to the data
/// manifold for one lead time, returning the sampled state.
pub fn heun_sample(
    latent: &Array3<f64>,
    lead_time: f64,
    window: &ConditioningWindow,
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
) -> Result<GridState> {
    let spec = window.spec();
    let expect = (spec.n_vars(), spec.height, spec.width);
    if latent.dim() != expect {
        return Err(Error::shape_in(
            "heun_sample latent",
            format!("{expect:?}"),
            format!("{:?}", latent.dim()),
        ));
    }
    if latent.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("heun_sample latent".into()));
    }
    let levels = schedule_levels(&config.schedule);
    let s0 = levels[0];
    let init_scale = match config.initial_scale_rule {
        InitialScaleRule::Sigma => s0,
        InitialScaleRule::SigmaSquared => s0 * s0,
    };
    let mut z = latent * init_scale;
    for i in 0..levels.len() - 1 {
        let s_i = levels[i];
        let s_next = levels[i + 1];
        let d_i = flow_rhs(&z, s_i, window, lead_time, denoiser)
            .map_err(|e| at_level(e, i, s_i))?;
        let mut z_next = &z + &(&d_i * (s_next - s_i));
        if s_next != 0.0 {
            let d_prime = flow_rhs(&z_next, s_next, window, lead_time, denoiser)
                .map_err(|e| at_level(e, i + 1, s_next))?;
            z_next = &z + &((&d_i + &d_prime) * (0.5 * (s_next - s_i)));
        }
        if z_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::SolverDiverged {
                level: i + 1,
                sigma: s_next,
            });
        }
        z = z_next;
    }
    GridState::new(spec.clone(), z, lead_time)
}

fn at_level(e: Error, level: usize, sigma: f64) -> Error {
    match e {
        Error::NonFinite(_) => Error::SolverDiverged { level, sigma },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::analytic::StaticPrior;
    use crate::denoiser::AnalyticGaussianModel;
    use crate::grid::{GridSpec, GridState};
    use crate::rng::{normal_field, StreamKey, StreamPurpose};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    struct IdentityDenoiser;
    impl Denoiser for IdentityDenoiser {
        fn denoise(
            &self,
            noisy: &Array3<f64>,
            _sigma: f64,
            _window: &ConditioningWindow,
            _lead_time: f64,
        ) -> Result<Array3<f64>> {
            Ok(noisy.clone())
        }
    }

    struct ZeroDenoiser;
    impl Denoiser for ZeroDenoiser {
        fn denoise(
            &self,
            noisy: &Array3<f64>,
            _sigma: f64,
            _window: &ConditioningWindow,
            _lead_time: f64,
        ) -> Result<Array3<f64>> {
            Ok(Array3::zeros(noisy.dim()))
        }
    }

    fn window(h: usize, w: usize) -> ConditioningWindow {
        let spec = Arc::new(GridSpec::uniform(h, w, 1));
        ConditioningWindow::single(GridState::new(spec, Array3::zeros((1, h, w)), 0.0).unwrap())
    }

    fn standard_normal_denoiser(shape: (usize, usize, usize)) -> AnalyticGaussianModel {
        AnalyticGaussianModel::new(Arc::new(StaticPrior::standard_normal(shape)))
    }

    #[test]
    fn rhs_vanishes_at_denoiser_fixed_point() {
        let win = window(2, 3);
        let z = Array3::from_elem((1, 2, 3), 0.7);
        let rhs = flow_rhs(&z, 2.0, &win, 6.0, &IdentityDenoiser).unwrap();
        assert!(rhs.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rhs_of_zero_denoiser_is_z_over_sigma() {
        let win = window(2, 3);
        let z = Array3::from_shape_fn((1, 2, 3), |(_, h, w)| (h + w) as f64 - 1.5);
        let sigma = 4.0;
        let rhs = flow_rhs(&z, sigma, &win, 6.0, &ZeroDenoiser).unwrap();
        for (r, x) in rhs.iter().zip(z.iter()) {
            assert_relative_eq!(*r, x / sigma, max_relative = 1e-15);
        }
    }

    #[test]
    fn rhs_of_standard_normal_prior() {
        // Posterior mean z/(1+sigma^2) gives rhs = sigma * z / (1 + sigma^2).
        let shape = (1, 2, 2);
        let win = window(2, 2);
        let den = standard_normal_denoiser(shape);
        let z = Array3::from_shape_fn(shape, |(_, h, w)| 0.4 * h as f64 - 0.9 * w as f64 + 0.3);
        let sigma = 1.7;
        let rhs = flow_rhs(&z, sigma, &win, 6.0, &den).unwrap();
        for (r, x) in rhs.iter().zip(z.iter()) {
            assert_relative_eq!(
                *r,
                sigma * x / (1.0 + sigma * sigma),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn rhs_rejects_zero_sigma() {
        let win = window(1, 2);
        let z = Array3::zeros((1, 1, 2));
        assert!(flow_rhs(&z, 0.0, &win, 6.0, &ZeroDenoiser).is_err());
    }

    #[test]
    fn single_level_lands_on_denoiser_output() {
        // N = 1: one Euler step from sigma_max to 0 returns D(sigma_max Z).
        let shape = (1, 2, 3);
        let win = window(2, 3);
        let den = standard_normal_denoiser(shape);
        let schedule = NoiseSchedule::new(80.0, 0.03, 7.0, 1).unwrap();
        let config = SamplerConfig::new(schedule);
        let latent = normal_field(StreamKey::new(1, StreamPurpose::Test, 0, 0), shape);
        let out = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        let scaled = &latent * 80.0;
        let d = den.denoise(&scaled, 80.0, &win, 6.0).unwrap();
        for (o, e) in out.values.iter().zip(d.iter()) {
            assert_relative_eq!(o, e, max_relative = 1e-13, epsilon = 1e-13);
        }
    }

    fn closed_form_max_rel(levels: usize, schedule: (f64, f64, f64)) -> f64 {
        let shape = (1, 3, 4);
        let win = window(3, 4);
        let den = standard_normal_denoiser(shape);
        let (smax, smin, rho) = schedule;
        let config = SamplerConfig::new(NoiseSchedule::new(smax, smin, rho, levels).unwrap());
        let latent = normal_field(StreamKey::new(2, StreamPurpose::Test, 0, 0), shape);
        let out = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        let scale = smax / (1.0 + smax * smax).sqrt();
        let mut max_rel: f64 = 0.0;
        for (o, z) in out.values.iter().zip(latent.iter()) {
            let expect = z * scale;
            max_rel = max_rel.max((o - expect).abs() / expect.abs().max(1e-12));
        }
        max_rel
    }

    #[test]
    fn matches_closed_form_solution_for_standard_normal() {
        // Exact solution of the linear flow: z(sigma) scales by
        // sqrt((1 + sigma^2) / (1 + sigma_max^2)); at sigma = 0 the output is
        // sigma_max * Z / sqrt(1 + sigma_max^2). On the (80, 0.03, 7)
        // schedule the measured Heun error is 2.58e-2 at N = 20 and 9.7e-4
        // at N = 80 (cross-checked against an independent per-step factor
        // computation); freeze those levels.
        let table4 = (80.0, 0.03, 7.0);
        let e20 = closed_form_max_rel(20, table4);
        assert!((0.02..0.03).contains(&e20), "N=20 error {e20}");
        let e80 = closed_form_max_rel(80, table4);
        assert!(e80 < 1e-3, "N=80 error {e80}");
    }

    #[test]
    fn error_quarters_when_steps_double() {
        // N -> 2N-1 nests the level grid and halves every step; second order
        // means the closed-form error shrinks by ~4x.
        let study = (10.0, 0.002, 2.0);
        for n in [10usize, 20, 40] {
            let ratio = closed_form_max_rel(n, study) / closed_form_max_rel(2 * n - 1, study);
            assert!(
                (3.5..4.5).contains(&ratio),
                "halving ratio {ratio} at N={n}"
            );
        }
    }

    #[test]
    fn repeated_calls_bit_identical() {
        let shape = (1, 2, 2);
        let win = window(2, 2);
        let den = standard_normal_denoiser(shape);
        let config = SamplerConfig::new(NoiseSchedule::sampling_default());
        let latent = normal_field(StreamKey::new(3, StreamPurpose::Test, 0, 0), shape);
        let a = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        let b = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        assert!(a
            .values
            .iter()
            .zip(b.values.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sigma_squared_rule_changes_initial_scale() {
        let shape = (1, 1, 2);
        let win = window(1, 2);
        let den = standard_normal_denoiser(shape);
        let mut config = SamplerConfig::new(NoiseSchedule::new(2.0, 0.5, 7.0, 2).unwrap());
        let latent = Array3::from_elem(shape, 0.5);
        let a = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        config.initial_scale_rule = InitialScaleRule::SigmaSquared;
        let b = heun_sample(&latent, 6.0, &win, &config, &den).unwrap();
        // The linear flow is homogeneous, so doubling the initial scale
        // doubles the output.
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_relative_eq!(2.0 * x, *y, max_relative = 1e-12);
        }
    }

    #[test]
    fn analytic_solution_continuity_in_lead_time() {
        // With a prior whose moments vary smoothly in t, the sampled state
        // for a fixed latent converges as the lead-time perturbation
        // shrinks.
        use crate::denoiser::analytic::{CovOperator, GaussianMoments, GaussianPrior};
        use crate::grid::weighted_mean;

        struct SmoothPrior;
        impl GaussianPrior for SmoothPrior {
            fn moments(&self, window: &ConditioningWindow, t: f64) -> GaussianMoments {
                let decay = (-t / 24.0).exp();
                let mean = &window.latest().values * decay;
                let var = 1.0 - decay * decay;
                GaussianMoments {
                    mean,
                    cov: CovOperator::Diagonal {
                        var: Array3::from_elem(window.latest().values.dim(), var.max(1e-6)),
                    },
                }
            }
        }

        let shape = (1, 2, 4);
        let spec = Arc::new(GridSpec::uniform(2, 4, 1));
        let init = normal_field(StreamKey::new(9, StreamPurpose::Test, 0, 0), shape);
        let win = ConditioningWindow::single(GridState::new(spec.clone(), init, 0.0).unwrap());
        let den = AnalyticGaussianModel::new(Arc::new(SmoothPrior));
        let config = SamplerConfig::new(NoiseSchedule::sampling_default());
        let latent = normal_field(StreamKey::new(10, StreamPurpose::Test, 0, 0), shape);

        let base = heun_sample(&latent, 12.0, &win, &config, &den).unwrap();
        let mut prev_gap = f64::INFINITY;
        for delta in [4.0, 2.0, 1.0, 0.5] {
            let shifted = heun_sample(&latent, 12.0 + delta, &win, &config, &den).unwrap();
            let diff = (&shifted.values - &base.values).mapv(f64::abs);
            let gap = weighted_mean(diff.index_axis(ndarray::Axis(0), 0), &spec).unwrap();
            assert!(gap < prev_gap, "gap {gap} did not shrink at delta {delta}");
            prev_gap = gap;
        }
        assert!(prev_gap < 0.05, "residual gap {prev_gap} too large");
    }
}
