//! The denoiser `D`: preconditioning wrapper around raw network backends,
//! plus an exact Gaussian-posterior oracle backend.
//!
//! `D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise, X(Omega), t)`,
//! where `F` is whatever backend is plugged in. At `sigma = 0` the wrapper
//! returns the input unchanged without touching the backend.

pub mod analytic;
pub mod convnet;
pub mod embed;

use ndarray::Array3;

use crate::edm::precondition;
use crate::error::{Error, Result};
use crate::grid::ConditioningWindow;

pub use analytic::{analytic_posterior_mean, AnalyticGaussianModel, CovOperator, GaussianMoments};
pub use convnet::{ConvNet, ConvNetBackend, ConvNetConfig};
pub use embed::{fourier_features, EmbeddingConfig, FourierEmbedding};

/// Anything that can estimate the clean state from a noisy one.
pub trait Denoiser: Send + Sync {
    fn denoise(
        &self,
        noisy: &Array3<f64>,
        sigma: f64,
        window: &ConditioningWindow,
        lead_time: f64,
    ) -> Result<Array3<f64>>;
}

/// A raw network `F` evaluated inside the preconditioning wrapper.
///
/// `scaled_noisy` is `c_in * x`; `c_noise` is the log-scaled noise level
/// `ln(sigma)/4`; `lead_time` is in hours (backends normalize it themselves).
/// Implementations must be deterministic functions of their inputs and
/// parameters.
pub trait DenoiserBackend: Send + Sync {
    fn raw_apply(
        &self,
        scaled_noisy: &Array3<f64>,
        c_noise: f64,
        lead_time: f64,
        window: &ConditioningWindow,
    ) -> Result<Array3<f64>>;

    /// Number of trainable parameters (0 for analytic backends).
    fn param_count(&self) -> usize {
        0
    }
}

/// Preconditioned denoiser: the composition the sampler and the training
/// loss both evaluate.
pub struct Preconditioned<B> {
    pub backend: B,
    pub sigma_data: f64,
}

impl<B: DenoiserBackend> Preconditioned<B> {
    pub fn new(backend: B) -> Self {
        Preconditioned {
            backend,
            sigma_data: 1.0,
        }
    }
}

impl<B: DenoiserBackend> Denoiser for Preconditioned<B> {
    fn denoise(
        &self,
        noisy: &Array3<f64>,
        sigma: f64,
        window: &ConditioningWindow,
        lead_time: f64,
    ) -> Result<Array3<f64>> {
        denoise(noisy, sigma, window, lead_time, &self.backend, self.sigma_data)
    }
}

/// Apply the preconditioned denoiser once.
pub fn denoise(
    noisy: &Array3<f64>,
    sigma: f64,
    window: &ConditioningWindow,
    lead_time: f64,
    backend: &dyn DenoiserBackend,
    sigma_data: f64,
) -> Result<Array3<f64>> {
    let spec = window.spec();
    let expect = (spec.n_vars(), spec.height, spec.width);
    if noisy.dim() != expect {
        return Err(Error::shape_in(
            "denoise",
            format!("{expect:?}"),
            format!("{:?}", noisy.dim()),
        ));
    }
    if noisy.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("denoise input".into()));
    }
    if sigma == 0.0 {
        // c_skip = 1, c_out = 0: identity, exactly.
        return Ok(noisy.clone());
    }
    let c = precondition(sigma, sigma_data)?;
    let scaled = noisy * c.c_in;
    let raw = backend.raw_apply(&scaled, c.c_noise, lead_time, window)?;
    if raw.dim() != expect {
        return Err(Error::shape_in(
            "backend output",
            format!("{expect:?}"),
            format!("{:?}", raw.dim()),
        ));
    }
    let out = noisy * c.c_skip + &raw * c.c_out;
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    Ok(out)
}

/// `F = 0`: isolates the skip path (`D = c_skip * x`).
pub struct ZeroBackend;

impl DenoiserBackend for ZeroBackend {
    fn raw_apply(
        &self,
        scaled_noisy: &Array3<f64>,
        _c_noise: f64,
        _lead_time: f64,
        _window: &ConditioningWindow,
    ) -> Result<Array3<f64>> {
        Ok(Array3::zeros(scaled_noisy.dim()))
    }
}
