//! Fourier features and the time/noise embedding head.
//!
//! A scalar (lead time or log noise level) is expanded into sine/cosine
//! features at 32 harmonics of period 16; the time and noise feature vectors
//! are summed and pushed through two SiLU-activated dense layers into a
//! 128-dimensional encoding that conditions every network block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{StreamKey, StreamPurpose};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub frequency_count: usize,
    pub period: f64,
    pub output_dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            frequency_count: 32,
            period: 16.0,
            output_dim: 128,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequency_count == 0 || self.output_dim == 0 {
            return Err(Error::InvalidParameter(
                "embedding needs frequency_count >= 1 and output_dim >= 1".into(),
            ));
        }
        if !(self.period > 0.0) {
            return Err(Error::InvalidParameter("embedding period must be positive".into()));
        }
        Ok(())
    }

    /// Feature dimension before the dense layers: sines then cosines.
    pub fn feature_dim(&self) -> usize {
        2 * self.frequency_count
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d silu / dx = s(x) * (1 + x * (1 - s(x))) with s the logistic sigmoid.
pub fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Pre-dense features: `[sin(w_k x)..., cos(w_k x)...]` with
/// `w_k = 2 pi k / period`, `k = 1..=K`. Periodic in `x` with the configured
/// period.
pub fn fourier_features(x: f64, config: &EmbeddingConfig) -> Vec<f64> {
    let k = config.frequency_count;
    let mut out = Vec::with_capacity(2 * k);
    for i in 1..=k {
        let w = 2.0 * std::f64::consts::PI * i as f64 / config.period;
        out.push((w * x).sin());
    }
    for i in 1..=k {
        let w = 2.0 * std::f64::consts::PI * i as f64 / config.period;
        out.push((w * x).cos());
    }
    out
}

/// Derivative of [`fourier_features`] with respect to `x`.
pub fn fourier_features_deriv(x: f64, config: &EmbeddingConfig) -> Vec<f64> {
    let k = config.frequency_count;
    let mut out = Vec::with_capacity(2 * k);
    for i in 1..=k {
        let w = 2.0 * std::f64::consts::PI * i as f64 / config.period;
        out.push(w * (w * x).cos());
    }
    for i in 1..=k {
        let w = 2.0 * std::f64::consts::PI * i as f64 / config.period;
        out.push(-w * (w * x).sin());
    }
    out
}

/// Dense-layer math shared by the standalone embedding and the network
/// backend: `e = silu(W2 silu(W1 f + b1) + b2)`.
///
/// Parameter slices are row-major `out x in` matrices.
pub fn embed_dense_forward(
    features: &[f64],
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    hidden: usize,
    output: usize,
) -> Vec<f64> {
    let input = features.len();
    debug_assert_eq!(w1.len(), hidden * input);
    debug_assert_eq!(w2.len(), output * hidden);
    let mut h_act = vec![0.0; hidden];
    for i in 0..hidden {
        let mut acc = b1[i];
        let row = &w1[i * input..(i + 1) * input];
        for (j, &f) in features.iter().enumerate() {
            acc += row[j] * f;
        }
        h_act[i] = silu(acc);
    }
    let mut out = vec![0.0; output];
    for i in 0..output {
        let mut acc = b2[i];
        let row = &w2[i * hidden..(i + 1) * hidden];
        for (j, &h) in h_act.iter().enumerate() {
            acc += row[j] * h;
        }
        out[i] = silu(acc);
    }
    out
}

/// A self-contained Fourier embedding with its own dense weights; used
/// standalone and in tests. Network backends keep equivalent weights inside
/// their parameter vector instead.
#[derive(Debug, Clone)]
pub struct FourierEmbedding {
    pub config: EmbeddingConfig,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl FourierEmbedding {
    /// Xavier-uniform initialized embedding from a seeded stream.
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let input = config.feature_dim();
        let hidden = config.output_dim;
        let output = config.output_dim;
        let mut rng = StreamKey::new(seed, StreamPurpose::ParamInit, 0, 0).rng();
        let mut xavier = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        };
        Ok(FourierEmbedding {
            config,
            w1: xavier(input, hidden, hidden * input),
            b1: vec![0.0; hidden],
            w2: xavier(hidden, output, output * hidden),
            b2: vec![0.0; output],
        })
    }

    /// The full embedding of one scalar: Fourier features through the two
    /// dense layers. Deterministic and smooth in `x`.
    pub fn embed(&self, x: f64) -> Vec<f64> {
        let feats = fourier_features(x, &self.config);
        embed_dense_forward(
            &feats,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            self.config.output_dim,
            self.config.output_dim,
        )
    }

    /// Analytic derivative of [`Self::embed`] with respect to the input.
    pub fn embed_input_derivative(&self, x: f64) -> Vec<f64> {
        let input = self.config.feature_dim();
        let hidden = self.config.output_dim;
        let output = self.config.output_dim;
        let feats = fourier_features(x, &self.config);
        let dfeats = fourier_features_deriv(x, &self.config);
        // Forward pass keeping preactivations.
        let mut h_pre = vec![0.0; hidden];
        let mut dh_pre = vec![0.0; hidden];
        for i in 0..hidden {
            let row = &self.w1[i * input..(i + 1) * input];
            let mut acc = self.b1[i];
            let mut dacc = 0.0;
            for j in 0..input {
                acc += row[j] * feats[j];
                dacc += row[j] * dfeats[j];
            }
            h_pre[i] = acc;
            dh_pre[i] = dacc;
        }
        let h_act: Vec<f64> = h_pre.iter().map(|&p| silu(p)).collect();
        let dh_act: Vec<f64> = h_pre
            .iter()
            .zip(&dh_pre)
            .map(|(&p, &dp)| silu_deriv(p) * dp)
            .collect();
        let mut dout = vec![0.0; output];
        for i in 0..output {
            let row = &self.w2[i * hidden..(i + 1) * hidden];
            let mut acc = self.b2[i];
            let mut dacc = 0.0;
            for j in 0..hidden {
                acc += row[j] * h_act[j];
                dacc += row[j] * dh_act[j];
            }
            dout[i] = silu_deriv(acc) * dacc;
        }
        dout
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn features_at_zero() {
        // sin(0) = 0 for every sine feature, cos(0) = 1 for every cosine.
        let cfg = EmbeddingConfig::default();
        let f = fourier_features(0.0, &cfg);
        assert_eq!(f.len(), 64);
        assert!(f[..32].iter().all(|&x| x == 0.0));
        assert!(f[32..].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn features_alias_with_period_sixteen() {
        let cfg = EmbeddingConfig::default();
        for x in [0.0, 0.37, 3.5, -2.0] {
            let a = fourier_features(x, &cfg);
            let b = fourier_features(x + 16.0, &cfg);
            for (p, q) in a.iter().zip(&b) {
                assert_relative_eq!(p, q, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let emb = FourierEmbedding::new(EmbeddingConfig::default(), 3).unwrap();
        let a = emb.embed(0.42);
        let b = emb.embed(0.42);
        assert_eq!(a.len(), 128);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn embedding_periodic_before_and_after_dense() {
        // Dense layers are pointwise in the features, so periodicity carries
        // through the whole embedding.
        let emb = FourierEmbedding::new(EmbeddingConfig::default(), 5).unwrap();
        let a = emb.embed(1.25);
        let b = emb.embed(1.25 + 16.0);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-8);
        }
    }

    #[test]
    fn input_derivative_matches_central_differences() {
        // h = 1e-5 central differences, 1e-6 relative agreement.
        let emb = FourierEmbedding::new(EmbeddingConfig::default(), 7).unwrap();
        let h = 1e-5;
        for x in [0.13, 0.8, 2.7] {
            let analytic = emb.embed_input_derivative(x);
            let plus = emb.embed(x + h);
            let minus = emb.embed(x - h);
            for i in 0..analytic.len() {
                let fd = (plus[i] - minus[i]) / (2.0 * h);
                let denom = fd.abs().max(1e-8);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-6,
                    "coord {i} at x={x}: analytic {} vs fd {}",
                    analytic[i],
                    fd
                );
            }
        }
    }
}
