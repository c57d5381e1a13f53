//! Exact Gaussian-posterior denoiser.
//!
//! For Gaussian data `X ~ N(mu, Sigma)` observed under noise
//! `x = X + sigma * eps`, the minimizer of the denoising objective is the
//! posterior mean `mu + Sigma (Sigma + sigma^2 I)^-1 (x - mu)`. With `Sigma`
//! diagonal or circulant-per-row this is computable in closed form, which
//! makes the whole sampling stack testable without any training.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::dft::DftPlan;
use crate::edm::precondition;
use crate::error::{Error, Result};
use crate::grid::ConditioningWindow;

use super::{Denoiser, DenoiserBackend};

/// Symmetric PSD covariance operator in one of the closed-form
/// representations.
#[derive(Debug, Clone)]
pub enum CovOperator {
    /// Independent cells with per-cell variance.
    Diagonal { var: Array3<f64> },
    /// Rows evolve independently; along each row the covariance is circulant
    /// with the given per-variable mode variances (length W, indexed by
    /// spatial frequency).
    CirculantRows {
        mode_vars: Vec<Vec<f64>>,
        plan: Arc<DftPlan>,
    },
}

impl CovOperator {
    pub fn diagonal(var: Array3<f64>) -> Result<Self> {
        if var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "diagonal covariance needs finite nonnegative variances".into(),
            ));
        }
        Ok(CovOperator::Diagonal { var })
    }

    pub fn circulant_rows(mode_vars: Vec<Vec<f64>>, width: usize) -> Result<Self> {
        for mv in &mode_vars {
            if mv.len() != width {
                return Err(Error::shape_in(
                    "circulant mode variances",
                    format!("{width}"),
                    format!("{}", mv.len()),
                ));
            }
            if mv.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(
                    "mode variances must be finite and nonnegative".into(),
                ));
            }
            // A real symmetric PSD circulant has an even spectrum; anything
            // else would silently encode a complex kernel.
            for k in 1..width {
                let (a, b) = (mv[k], mv[width - k]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "mode variances must be symmetric under k <-> W-k, got v[{k}]={a}, v[{}]={b}",
                        width - k
                    )));
                }
            }
        }
        Ok(CovOperator::CirculantRows {
            mode_vars,
            plan: Arc::new(DftPlan::new(width)),
        })
    }

    /// Apply `Sigma` to a state-shaped tensor.
    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        self.apply_mode_fn(x, |v, _sigma2| v, 0.0)
    }

    /// Apply the posterior gain `Sigma (Sigma + sigma^2 I)^-1`.
    pub fn apply_posterior_gain(&self, x: &Array3<f64>, sigma2: f64) -> Array3<f64> {
        self.apply_mode_fn(x, |v, s2| v / (v + s2), sigma2)
    }

    fn apply_mode_fn(
        &self,
        x: &Array3<f64>,
        f: impl Fn(f64, f64) -> f64,
        sigma2: f64,
    ) -> Array3<f64> {
        match self {
            CovOperator::Diagonal { var } => {
                let mut out = x.clone();
                ndarray::Zip::from(&mut out)
                    .and(var)
                    .for_each(|o, &v| *o *= f(v, sigma2));
                out
            }
            CovOperator::CirculantRows { mode_vars, plan } => {
                let (nv, nh, nw) = x.dim();
                let mut out = Array3::zeros((nv, nh, nw));
                for v in 0..nv {
                    let gains: Vec<(f64, f64)> = mode_vars[v]
                        .iter()
                        .map(|&mv| (f(mv, sigma2), 0.0))
                        .collect();
                    for h in 0..nh {
                        let row: Vec<f64> = (0..nw).map(|w| x[[v, h, w]]).collect();
                        let res = plan.apply_circulant(&gains, &row);
                        for (w, val) in res.into_iter().enumerate() {
                            out[[v, h, w]] = val;
                        }
                    }
                }
                out
            }
        }
    }

    /// Smallest eigenvalue, for singularity checks.
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            CovOperator::Diagonal { var } => var.iter().cloned().fold(f64::INFINITY, f64::min),
            CovOperator::CirculantRows { mode_vars, .. } => mode_vars
                .iter()
                .flat_map(|mv| mv.iter().cloned())
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Dense matrix of the per-variable, per-row operator block (W x W),
    /// for small-instance verification.
    pub fn dense_row_block(&self, variable: usize, width: usize) -> Array2<f64> {
        let mut dense = Array2::zeros((width, width));
        for j in 0..width {
            let mut basis = Array3::zeros((variable + 1, 1, width));
            basis[[variable, 0, j]] = 1.0;
            let img = self.apply(&basis);
            for i in 0..width {
                dense[[i, j]] = img[[variable, 0, i]];
            }
        }
        dense
    }
}

/// Prior moments bound to one (window, lead time) pair.
#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: Array3<f64>,
    pub cov: CovOperator,
}

/// Exact posterior mean `mu + Sigma (Sigma + sigma^2 I)^-1 (x - mu)`.
pub fn analytic_posterior_mean(
    noisy: &Array3<f64>,
    sigma: f64,
    moments: &GaussianMoments,
) -> Result<Array3<f64>> {
    if noisy.dim() != moments.mean.dim() {
        return Err(Error::shape_in(
            "analytic_posterior_mean",
            format!("{:?}", moments.mean.dim()),
            format!("{:?}", noisy.dim()),
        ));
    }
    if !(sigma > 0.0) || sigma * sigma + moments.cov.min_eigenvalue() <= 0.0 {
        return Err(Error::SingularOperator(format!(
            "posterior needs sigma^2 + min_eig > 0 (sigma = {sigma})"
        )));
    }
    let residual = noisy - &moments.mean;
    let gained = moments.cov.apply_posterior_gain(&residual, sigma * sigma);
    Ok(&moments.mean + &gained)
}

/// Source of prior moments for the analytic denoiser; implementations know
/// the conditional law of the generating system.
pub trait GaussianPrior: Send + Sync {
    fn moments(&self, window: &ConditioningWindow, lead_time: f64) -> GaussianMoments;
}

/// Fixed moments regardless of window and lead time; the standard-normal
/// instance is the workhorse of the sampler oracle tests.
#[derive(Debug, Clone)]
pub struct StaticPrior {
    pub moments: GaussianMoments,
}

impl StaticPrior {
    /// `N(0, I)` prior on the given state shape.
    pub fn standard_normal(shape: (usize, usize, usize)) -> Self {
        StaticPrior {
            moments: GaussianMoments {
                mean: Array3::zeros(shape),
                cov: CovOperator::Diagonal {
                    var: Array3::from_elem(shape, 1.0),
                },
            },
        }
    }
}

impl GaussianPrior for StaticPrior {
    fn moments(&self, _window: &ConditioningWindow, _lead_time: f64) -> GaussianMoments {
        self.moments.clone()
    }
}

/// The analytic denoiser: posterior mean of a [`GaussianPrior`].
pub struct AnalyticGaussianModel {
    pub prior: Arc<dyn GaussianPrior>,
    pub sigma_data: f64,
}

impl AnalyticGaussianModel {
    pub fn new(prior: Arc<dyn GaussianPrior>) -> Self {
        AnalyticGaussianModel {
            prior,
            sigma_data: 1.0,
        }
    }
}

impl Denoiser for AnalyticGaussianModel {
    fn denoise(
        &self,
        noisy: &Array3<f64>,
        sigma: f64,
        window: &ConditioningWindow,
        lead_time: f64,
    ) -> Result<Array3<f64>> {
        if sigma == 0.0 {
            return Ok(noisy.clone());
        }
        let moments = self.prior.moments(window, lead_time);
        analytic_posterior_mean(noisy, sigma, &moments)
    }
}

/// The same model exposed through the raw-backend interface: inverts the
/// preconditioning so that the wrapped composition reproduces the posterior
/// mean. Recovers `sigma = exp(4 c_noise)` from the noise conditioning input.
impl DenoiserBackend for AnalyticGaussianModel {
    fn raw_apply(
        &self,
        scaled_noisy: &Array3<f64>,
        c_noise: f64,
        lead_time: f64,
        window: &ConditioningWindow,
    ) -> Result<Array3<f64>> {
        let sigma = (4.0 * c_noise).exp();
        let c = precondition(sigma, self.sigma_data)?;
        let noisy = scaled_noisy / c.c_in;
        let moments = self.prior.moments(window, lead_time);
        let post = analytic_posterior_mean(&noisy, sigma, &moments)?;
        Ok((&post - &(&noisy * c.c_skip)) / c.c_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::denoise;
    use crate::grid::{GridSpec, GridState};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn window(h: usize, w: usize) -> ConditioningWindow {
        let spec = Arc::new(GridSpec::uniform(h, w, 1));
        ConditioningWindow::single(GridState::new(spec, Array3::zeros((1, h, w)), 0.0).unwrap())
    }

    #[test]
    fn infinite_noise_returns_prior_mean() {
        let mean = Array3::from_elem((1, 2, 2), 3.5);
        let moments = GaussianMoments {
            mean: mean.clone(),
            cov: CovOperator::diagonal(Array3::from_elem((1, 2, 2), 2.0)).unwrap(),
        };
        let noisy = Array3::from_elem((1, 2, 2), -40.0);
        let post = analytic_posterior_mean(&noisy, 1e9, &moments).unwrap();
        for (a, b) in post.iter().zip(mean.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn diagonal_posterior_is_scalar_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let shape = (2, 3, 4);
        let mean = Array3::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
        let var = Array3::from_shape_fn(shape, |_| rng.random_range(0.1..3.0));
        let noisy = Array3::from_shape_fn(shape, |_| rng.random_range(-5.0..5.0));
        let sigma = 0.8;
        let moments = GaussianMoments {
            mean: mean.clone(),
            cov: CovOperator::diagonal(var.clone()).unwrap(),
        };
        let post = analytic_posterior_mean(&noisy, sigma, &moments).unwrap();
        for ((&p, &m), (&d, &x)) in post
            .iter()
            .zip(mean.iter())
            .zip(var.iter().zip(noisy.iter()))
        {
            let expect = m + d / (d + sigma * sigma) * (x - m);
            assert_relative_eq!(p, expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn circulant_posterior_matches_dense_solve() {
        // Random 8-point circulant covariance; posterior gain applied via DFT
        // must match a dense Gaussian-elimination solve to 1e-10.
        let w = 8usize;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut mode_vars: Vec<f64> = (0..w).map(|_| rng.random_range(0.05..4.0)).collect();
        for k in 1..w {
            let avg = 0.5 * (mode_vars[k] + mode_vars[w - k]);
            mode_vars[k] = avg;
            mode_vars[w - k] = avg;
        }
        let cov = CovOperator::circulant_rows(vec![mode_vars], w).unwrap();
        let mean = Array3::zeros((1, 1, w));
        let noisy = Array3::from_shape_fn((1, 1, w), |_| rng.random_range(-3.0..3.0));
        let sigma = 0.6;
        let post = analytic_posterior_mean(
            &noisy,
            sigma,
            &GaussianMoments {
                mean,
                cov: cov.clone(),
            },
        )
        .unwrap();

        // Dense oracle: solve (Sigma + sigma^2 I) y = x, then Sigma y.
        let dense = cov.dense_row_block(0, w);
        let mut a = vec![vec![0.0; w + 1]; w];
        for i in 0..w {
            for j in 0..w {
                a[i][j] = dense[[i, j]];
            }
            a[i][i] += sigma * sigma;
            a[i][w] = noisy[[0, 0, i]];
        }
        for col in 0..w {
            let pivot = (col..w)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            for rrow in (col + 1)..w {
                let f = a[rrow][col] / a[col][col];
                for c in col..=w {
                    a[rrow][c] -= f * a[col][c];
                }
            }
        }
        let mut y = vec![0.0; w];
        for i in (0..w).rev() {
            let mut acc = a[i][w];
            for j in (i + 1)..w {
                acc -= a[i][j] * y[j];
            }
            y[i] = acc / a[i][i];
        }
        for i in 0..w {
            let mut expect = 0.0;
            for j in 0..w {
                expect += dense[[i, j]] * y[j];
            }
            assert_relative_eq!(post[[0, 0, i]], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn circulant_operator_is_symmetric_and_matches_dense_apply() {
        let w = 6usize;
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mode_vars: Vec<f64> = (0..w).map(|_| rng.random_range(0.0..2.0)).collect();
        // Symmetrize the spectrum so the kernel (and the matrix) is symmetric.
        let mut sym = mode_vars.clone();
        for k in 1..w {
            let avg = 0.5 * (mode_vars[k] + mode_vars[w - k]);
            sym[k] = avg;
        }
        let cov = CovOperator::circulant_rows(vec![sym], w).unwrap();
        let dense = cov.dense_row_block(0, w);
        for i in 0..w {
            for j in 0..w {
                assert_relative_eq!(dense[[i, j]], dense[[j, i]], epsilon = 1e-10);
            }
        }
        let x = Array3::from_shape_fn((1, 1, w), |_| rng.random_range(-1.0..1.0));
        let fast = cov.apply(&x);
        for i in 0..w {
            let mut acc = 0.0;
            for j in 0..w {
                acc += dense[[i, j]] * x[[0, 0, j]];
            }
            assert_relative_eq!(fast[[0, 0, i]], acc, epsilon = 1e-10);
        }
    }

    #[test]
    fn standard_normal_backend_through_preconditioning() {
        // denoise() with the analytic N(0, I) backend equals noisy / (1 + sigma^2).
        let shape = (1, 2, 3);
        let model = AnalyticGaussianModel::new(Arc::new(StaticPrior::standard_normal(shape)));
        let win = window(2, 3);
        let noisy = Array3::from_shape_fn(shape, |(_, h, w)| 0.3 * (h as f64) - 0.7 * w as f64);
        for sigma in [0.25, 1.0, 80.0] {
            let out = denoise(&noisy, sigma, &win, 6.0, &model, 1.0).unwrap();
            for (o, x) in out.iter().zip(noisy.iter()) {
                assert_relative_eq!(*o, x / (1.0 + sigma * sigma), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn posterior_rejects_singular_setup() {
        let moments = GaussianMoments {
            mean: Array3::zeros((1, 1, 2)),
            cov: CovOperator::diagonal(Array3::zeros((1, 1, 2))).unwrap(),
        };
        let noisy = Array3::zeros((1, 1, 2));
        assert!(analytic_posterior_mean(&noisy, 0.0, &moments).is_err());
        assert!(analytic_posterior_mean(&noisy, 0.5, &moments).is_ok());
    }
}
