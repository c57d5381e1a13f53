//! EDM scaffolding: noise-level schedules, preconditioning coefficients and
//! training-noise sampling.
//!
//! The schedule interpolates between `sigma_max` and `sigma_min` on a
//! power-law grid with shape exponent `rho_sched` (named to avoid clashing
//! with the OU correlation parameter `rho`), with an explicit terminal level
//! 0 appended so the solver's skip-corrector-at-zero branch is data-driven.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling/training noise-level schedule `(sigma_max, sigma_min, rho_sched, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho_sched: f64,
    /// Number of solver levels (excluding the appended terminal 0).
    pub levels: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64, sigma_min: f64, rho_sched: f64, levels: usize) -> Result<Self> {
        if !(sigma_max > sigma_min && sigma_min > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}"
            )));
        }
        if !(rho_sched > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rho_sched must be positive, got {rho_sched}"
            )));
        }
        if levels < 1 {
            return Err(Error::InvalidParameter("need at least one level".into()));
        }
        Ok(NoiseSchedule {
            sigma_max,
            sigma_min,
            rho_sched,
            levels,
        })
    }

    /// Default sampling parameters (sigma_max 80, sigma_min 0.03, shape 7, 20 levels).
    pub fn sampling_default() -> Self {
        NoiseSchedule::new(80.0, 0.03, 7.0, 20).expect("valid constants")
    }

    /// Default training parameters (sigma_max 88, sigma_min 0.02, shape 7).
    pub fn training_default() -> Self {
        NoiseSchedule::new(88.0, 0.02, 7.0, 20).expect("valid constants")
    }

    /// Stable content hash of the schedule parameters, for provenance.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::rng::mix64(0x5ced_u64);
        for bits in [
            self.sigma_max.to_bits(),
            self.sigma_min.to_bits(),
            self.rho_sched.to_bits(),
            self.levels as u64,
        ] {
            h = crate::rng::mix64(h ^ bits);
        }
        h
    }
}

/// The decreasing level sequence `s_0 .. s_{N-1}` plus the terminal 0.
///
/// `s_i = (sigma_max^(1/rho) + (i/(N-1)) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`,
/// with endpoints forced exact. `N = 1` degenerates to `[sigma_max, 0]`
/// (sigma_min is ignored).
pub fn schedule_levels(schedule: &NoiseSchedule) -> Vec<f64> {
    let n = schedule.levels;
    let mut out = Vec::with_capacity(n + 1);
    if n == 1 {
        out.push(schedule.sigma_max);
        out.push(0.0);
        return out;
    }
    let inv_rho = 1.0 / schedule.rho_sched;
    let a = schedule.sigma_max.powf(inv_rho);
    let b = schedule.sigma_min.powf(inv_rho);
    for i in 0..n {
        let frac = i as f64 / (n - 1) as f64;
        out.push((a + frac * (b - a)).powf(schedule.rho_sched));
    }
    // Force the endpoints exact against powf round-off.
    out[0] = schedule.sigma_max;
    out[n - 1] = schedule.sigma_min;
    out.push(0.0);
    out
}

/// The `c_skip`, `c_out`, `c_in`, `c_noise` scaling functions at one noise
/// level.
///
/// `c_noise` is only meaningful for `sigma > 0`; at `sigma = 0` it is set to
/// negative infinity and the denoiser short-circuits before using it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// Evaluate the scaling functions:
/// `c_skip = sigma_data^2 / (sigma^2 + sigma_data^2)`,
/// `c_out  = sigma * sigma_data / sqrt(sigma^2 + sigma_data^2)`,
/// `c_in   = 1 / sqrt(sigma^2 + sigma_data^2)`,
/// `c_noise = ln(sigma) / 4`.
pub fn precondition(sigma: f64, sigma_data: f64) -> Result<PreconditionCoeffs> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    if !(sigma_data > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_data must be positive, got {sigma_data}"
        )));
    }
    let denom = sigma * sigma + sigma_data * sigma_data;
    Ok(PreconditionCoeffs {
        c_skip: sigma_data * sigma_data / denom,
        c_out: sigma * sigma_data / denom.sqrt(),
        c_in: 1.0 / denom.sqrt(),
        c_noise: 0.25 * sigma.ln(),
    })
}

impl PreconditionCoeffs {
    /// Residuals of the two variance identities, for verification:
    /// `c_skip^2 (sigma^2 + sigma_data^2) + c_out^2 = sigma_data^2` and
    /// `c_in^2 (sigma^2 + sigma_data^2) = 1`.
    pub fn identity_residuals(&self, sigma: f64, sigma_data: f64) -> (f64, f64) {
        let denom = sigma * sigma + sigma_data * sigma_data;
        let r1 = (self.c_skip * self.c_skip * denom + self.c_out * self.c_out)
            / (sigma_data * sigma_data)
            - 1.0;
        let r2 = self.c_in * self.c_in * denom - 1.0;
        (r1, r2)
    }
}

/// Draw a training noise level by inverse-CDF transform of `u in [0, 1]`:
/// `F^-1(u) = (sigma_max^(1/rho) + u * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`.
///
/// Monotone decreasing in `u`, with `F^-1(0) = sigma_max` and
/// `F^-1(1) = sigma_min`.
pub fn sample_training_sigma(u: f64, train_schedule: &NoiseSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidParameter(format!(
            "u must lie in [0, 1], got {u}"
        )));
    }
    if u == 0.0 {
        return Ok(train_schedule.sigma_max);
    }
    if u == 1.0 {
        return Ok(train_schedule.sigma_min);
    }
    let inv_rho = 1.0 / train_schedule.rho_sched;
    let a = train_schedule.sigma_max.powf(inv_rho);
    let b = train_schedule.sigma_min.powf(inv_rho);
    Ok((a + u * (b - a)).powf(train_schedule.rho_sched))
}
