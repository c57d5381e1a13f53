//! Minimal complex DFT and circulant-operator helpers.
//!
//! Grids here are small (W <= 64), so a direct O(W^2) transform with
//! precomputed twiddles is plenty and keeps the dependency surface flat.
//! Circulant matrices diagonalize in this basis: applying one costs a
//! forward transform, a per-mode complex multiply and an inverse transform.

/// Plan holding the twiddle factors for length-`n` transforms.
#[derive(Debug, Clone)]
pub struct DftPlan {
    n: usize,
    /// `twiddle[k*n + j] = exp(-2 pi i k j / n)` as (re, im).
    twiddle: Vec<(f64, f64)>,
}

impl DftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0);
        let mut twiddle = Vec::with_capacity(n * n);
        for k in 0..n {
            for j in 0..n {
                let ang = -2.0 * std::f64::consts::PI * (k as f64) * (j as f64) / n as f64;
                twiddle.push((ang.cos(), ang.sin()));
            }
        }
        DftPlan { n, twiddle }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform of a real signal: `X_k = sum_j x_j exp(-2 pi i k j / n)`.
    pub fn forward_real(&self, x: &[f64]) -> Vec<(f64, f64)> {
        assert_eq!(x.len(), self.n);
        let mut out = Vec::with_capacity(self.n);
        for k in 0..self.n {
            let row = &self.twiddle[k * self.n..(k + 1) * self.n];
            let mut re = 0.0;
            let mut im = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                let (tr, ti) = row[j];
                re += xj * tr;
                im += xj * ti;
            }
            out.push((re, im));
        }
        out
    }

    /// Inverse transform returning the real part (inputs are assumed to be
    /// spectra of real signals): `x_j = (1/n) sum_k X_k exp(+2 pi i k j / n)`.
    pub fn inverse_real(&self, spec: &[(f64, f64)]) -> Vec<f64> {
        assert_eq!(spec.len(), self.n);
        let mut out = Vec::with_capacity(self.n);
        let scale = 1.0 / self.n as f64;
        for j in 0..self.n {
            let mut acc = 0.0;
            for (k, &(re, im)) in spec.iter().enumerate() {
                // conj of twiddle[k*n+j] gives the +i kernel.
                let (tr, ti) = self.twiddle[k * self.n + j];
                acc += re * tr + im * ti; // Re((re + i im) * (tr - i ti)) with sign fold
            }
            out.push(acc * scale);
        }
        out
    }

    /// Apply a circulant operator given its (possibly complex) eigenvalues
    /// `lambda_k` to a real vector: `IDFT(diag(lambda) DFT(x))`.
    pub fn apply_circulant(&self, eigenvalues: &[(f64, f64)], x: &[f64]) -> Vec<f64> {
        assert_eq!(eigenvalues.len(), self.n);
        let mut spec = self.forward_real(x);
        for (s, &(lr, li)) in spec.iter_mut().zip(eigenvalues) {
            let (re, im) = *s;
            *s = (re * lr - im * li, re * li + im * lr);
        }
        self.inverse_real(&spec)
    }

    /// First column of the circulant matrix with the given eigenvalues
    /// (i.e. the real convolution kernel).
    pub fn kernel_from_eigenvalues(&self, eigenvalues: &[(f64, f64)]) -> Vec<f64> {
        self.inverse_real(eigenvalues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn round_trip_identity() {
        let plan = DftPlan::new(9);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let back = plan.inverse_real(&plan.forward_real(&x));
        for (a, b) in x.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn circulant_apply_matches_dense_multiply() {
        // Build a random real kernel, apply via eigenvalues, compare to the
        // dense circulant matrix-vector product.
        let n = 8;
        let plan = DftPlan::new(n);
        let kernel: Vec<f64> = (0..n).map(|i| ((i * i + 1) as f64 * 0.37).cos()).collect();
        let eig = plan.forward_real(&kernel);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 - 3.2) * 0.5).collect();
        let fast = plan.apply_circulant(&eig, &x);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += kernel[(n + i - j) % n] * x[j];
            }
            assert_relative_eq!(fast[i], acc, epsilon = 1e-10);
        }
    }
}
