//! Driving-noise generation for ensemble members.
//!
//! A member's latent noise along the lead-time grid is a stationary process
//! with standard-normal marginals. `rho = 0` freezes one draw for every lead
//! time, finite `rho` runs an Ornstein-Uhlenbeck recursion with lag
//! correlation `exp(-rho * dt)`, and the explicit infinity marker gives fresh
//! iid draws. All draws come from keyed streams (see [`crate::rng`]), so
//! generation order and parallel scheduling never change the values.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::rng::{normal_field, rollout_slot, StreamKey, StreamPurpose};

/// OU correlation parameter: a nonnegative real or the exact iid marker.
///
/// Infinity is a marker, not a large float, so the iid limit is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Finite(f64),
    Infinite,
}

impl Rho {
    pub fn finite(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rho must be a finite nonnegative real, got {value}"
            )));
        }
        Ok(Rho::Finite(value))
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Rho::Finite(v) => *v,
            Rho::Infinite => f64::INFINITY,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Rho::Finite(v) if *v == 0.0)
    }
}

/// Per-member driving noise along a lead-time grid.
#[derive(Debug, Clone)]
pub struct DrivingNoiseSequence {
    pub member: u64,
    pub times: Vec<f64>,
    pub fields: Vec<Array3<f64>>,
    pub rho: Rho,
}

impl DrivingNoiseSequence {
    pub fn field(&self, i: usize) -> &Array3<f64> {
        &self.fields[i]
    }
}

/// The initial latent draw `z ~ N(0, I)` for one member, from the stream
/// keyed by `(master_seed, member, block slot 0)`.
pub fn sample_initial(
    member: u64,
    shape: (usize, usize, usize),
    master_seed: u64,
) -> Array3<f64> {
    sample_initial_in_block(member, shape, master_seed, 0)
}

/// Initial draw for autoregressive block `j` (fresh noise per block).
pub fn sample_initial_in_block(
    member: u64,
    shape: (usize, usize, usize),
    master_seed: u64,
    block: usize,
) -> Array3<f64> {
    normal_field(
        StreamKey::new(
            master_seed,
            StreamPurpose::InitialNoise,
            member,
            rollout_slot(block, 0),
        ),
        shape,
    )
}

/// One OU update: `z_i = exp(-rho dt) z_prev + sqrt(1 - exp(-2 rho dt)) nu`.
///
/// Preserves the standard-normal marginal exactly when `z_prev` and `nu` are
/// independent N(0, I). `rho = 0` returns `z_prev` bit-exactly and the
/// infinity marker returns `nu` bit-exactly.
pub fn ou_step(z_prev: &Array3<f64>, dt: f64, rho: Rho, nu: &Array3<f64>) -> Result<Array3<f64>> {
    if z_prev.dim() != nu.dim() {
        return Err(Error::shape_in(
            "ou_step",
            format!("{:?}", z_prev.dim()),
            format!("{:?}", nu.dim()),
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ou_step needs dt > 0, got {dt}"
        )));
    }
    match rho {
        Rho::Infinite => Ok(nu.clone()),
        Rho::Finite(r) if r == 0.0 => Ok(z_prev.clone()),
        Rho::Finite(r) => {
            let decay = (-r * dt).exp();
            let refresh = (1.0 - decay * decay).sqrt();
            Ok(z_prev * decay + nu * refresh)
        }
    }
}

/// Generate the full driving-noise sequence for one member: the initial draw
/// at `times[0]`, then OU steps with `dt = t_i - t_{i-1}` and fresh
/// innovations keyed by time index.
pub fn generate_sequence(
    times: &[f64],
    rho: Rho,
    member: u64,
    shape: (usize, usize, usize),
    master_seed: u64,
) -> Result<DrivingNoiseSequence> {
    generate_sequence_in_block(times, rho, member, shape, master_seed, 0)
}

/// As [`generate_sequence`], but for autoregressive block `j` so noise never
/// collides across blocks.
pub fn generate_sequence_in_block(
    times: &[f64],
    rho: Rho,
    member: u64,
    shape: (usize, usize, usize),
    master_seed: u64,
    block: usize,
) -> Result<DrivingNoiseSequence> {
    if times.is_empty() {
        return Err(Error::EmptyInput("noise sequence with no times".into()));
    }
    for pair in times.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::InvalidParameter(format!(
                "times must be strictly increasing, got {pair:?}"
            )));
        }
    }
    let mut fields = Vec::with_capacity(times.len());
    fields.push(sample_initial_in_block(member, shape, master_seed, block));
    for i in 1..times.len() {
        let nu = normal_field(
            StreamKey::new(
                master_seed,
                StreamPurpose::Innovation,
                member,
                rollout_slot(block, i),
            ),
            shape,
        );
        let dt = times[i] - times[i - 1];
        let z = ou_step(&fields[i - 1], dt, rho, &nu)?;
        fields.push(z);
    }
    Ok(DrivingNoiseSequence {
        member,
        times: times.to_vec(),
        fields,
        rho,
    })
}

/// Stationary Gaussian-process alternative with a squared-exponential kernel
/// `corr(t_i, t_j) = exp(-(t_i - t_j)^2 / (2 l^2))`, realized by exact
/// Cholesky on the (small) time grid. Same marginals, smoother trajectories.
pub fn generate_sequence_squared_exp(
    times: &[f64],
    length_scale: f64,
    member: u64,
    shape: (usize, usize, usize),
    master_seed: u64,
) -> Result<DrivingNoiseSequence> {
    if times.is_empty() {
        return Err(Error::EmptyInput("noise sequence with no times".into()));
    }
    if !(length_scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "length scale must be positive, got {length_scale}"
        )));
    }
    for pair in times.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::InvalidParameter(format!(
                "times must be strictly increasing, got {pair:?}"
            )));
        }
    }
    let n = times.len();
    // Correlation matrix with a tiny diagonal jitter so Cholesky stays
    // well-posed for closely spaced times.
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = times[i] - times[j];
            cov[i * n + j] = (-(d * d) / (2.0 * length_scale * length_scale)).exp();
        }
        cov[i * n + i] += 1e-12;
    }
    let chol = cholesky(&cov, n)
        .ok_or_else(|| Error::SingularOperator("squared-exp time covariance".into()))?;
    // Innovations keyed per time index; field i is sum_j L[i][j] * nu_j.
    let innovations: Vec<Array3<f64>> = (0..n)
        .map(|i| {
            normal_field(
                StreamKey::new(
                    master_seed,
                    StreamPurpose::Innovation,
                    member,
                    rollout_slot(0, i),
                ),
                shape,
            )
        })
        .collect();
    // Renormalize rows so the marginal variance is exactly 1 despite jitter.
    let mut fields = Vec::with_capacity(n);
    for i in 0..n {
        let row = &chol[i * n..(i + 1) * n];
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut acc = Array3::<f64>::zeros(shape);
        for (j, nu) in innovations.iter().enumerate().take(i + 1) {
            if row[j] != 0.0 {
                acc.scaled_add(row[j] / norm, nu);
            }
        }
        fields.push(acc);
    }
    Ok(DrivingNoiseSequence {
        member,
        times: times.to_vec(),
        fields,
        rho: Rho::Infinite,
    })
}

/// Lower-triangular Cholesky factor of a dense SPD matrix in row-major
/// storage; `None` if a pivot goes nonpositive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SHAPE: (usize, usize, usize) = (1, 2, 2);

    fn bits_equal(a: &Array3<f64>, b: &Array3<f64>) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn initial_draw_deterministic() {
        let a = sample_initial(4, SHAPE, 99);
        let b = sample_initial(4, SHAPE, 99);
        assert!(bits_equal(&a, &b));
        assert!(!bits_equal(&a, &sample_initial(5, SHAPE, 99)));
    }

    #[test]
    fn ou_step_rho_zero_is_bit_exact_copy() {
        let z = sample_initial(0, SHAPE, 1);
        let nu = sample_initial(1, SHAPE, 1);
        let out = ou_step(&z, 1.0, Rho::Finite(0.0), &nu).unwrap();
        assert!(bits_equal(&out, &z));
    }

    #[test]
    fn ou_step_infinite_rho_returns_innovation() {
        let z = sample_initial(0, SHAPE, 1);
        let nu = sample_initial(1, SHAPE, 1);
        let out = ou_step(&z, 1.0, Rho::Infinite, &nu).unwrap();
        assert!(bits_equal(&out, &nu));
    }

    #[test]
    fn ou_step_ln10_coefficients() {
        // exp(-ln 10) = 0.1 and sqrt(1 - 0.01) = 0.99499...
        let z = Array3::from_elem(SHAPE, 1.0);
        let nu = Array3::from_elem(SHAPE, 1.0);
        let out = ou_step(&z, 1.0, Rho::finite(10f64.ln()).unwrap(), &nu).unwrap();
        let expect = 0.1 + 0.99f64.sqrt();
        for &x in out.iter() {
            assert_relative_eq!(x, expect, max_relative = 1e-14);
        }
        assert_relative_eq!(0.99f64.sqrt(), 0.99498743710662, max_relative = 1e-13);
    }

    #[test]
    fn negative_rho_rejected() {
        assert!(Rho::finite(-0.5).is_err());
        assert!(Rho::finite(f64::NAN).is_err());
    }

    #[test]
    fn sequence_rho_zero_constant() {
        let seq =
            generate_sequence(&[1.0, 2.0, 7.0], Rho::Finite(0.0), 2, SHAPE, 13).unwrap();
        assert!(bits_equal(&seq.fields[0], &seq.fields[1]));
        assert!(bits_equal(&seq.fields[0], &seq.fields[2]));
    }

    #[test]
    fn sequence_rejects_non_monotone_times() {
        assert!(generate_sequence(&[1.0, 1.0], Rho::Finite(0.1), 0, SHAPE, 0).is_err());
        assert!(generate_sequence(&[2.0, 1.0], Rho::Finite(0.1), 0, SHAPE, 0).is_err());
    }

    #[test]
    fn lag_correlation_matches_exponential() {
        // Two times dt = 1 apart at rho = ln 10: empirical lag-1 correlation
        // over 1e5 members within 0.02 of 0.1.
        let rho = Rho::finite(10f64.ln()).unwrap();
        let n = 100_000usize;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for member in 0..n {
            let seq =
                generate_sequence(&[1.0, 2.0], rho, member as u64, (1, 1, 1), 77).unwrap();
            let a = seq.fields[0][[0, 0, 0]];
            let b = seq.fields[1][[0, 0, 0]];
            num += a * b;
            da += a * a;
            db += b * b;
        }
        let corr = num / (da.sqrt() * db.sqrt());
        assert!((corr - 0.1).abs() < 0.02, "lag correlation {corr}");
    }

    #[test]
    fn nonuniform_times_follow_closed_form() {
        // Times {1, 2, 4}: consecutive correlations exp(-rho) and exp(-2 rho).
        let rho_val = 0.7;
        let rho = Rho::finite(rho_val).unwrap();
        let n = 60_000usize;
        let mut acc = [[0.0f64; 3]; 3];
        for member in 0..n {
            let seq =
                generate_sequence(&[1.0, 2.0, 4.0], rho, member as u64, (1, 1, 1), 5).unwrap();
            let v: Vec<f64> = (0..3).map(|i| seq.fields[i][[0, 0, 0]]).collect();
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += v[i] * v[j];
                }
            }
        }
        let corr = |i: usize, j: usize| acc[i][j] / (acc[i][i].sqrt() * acc[j][j].sqrt());
        assert!((corr(0, 1) - (-rho_val).exp()).abs() < 0.02);
        assert!((corr(1, 2) - (-2.0 * rho_val).exp()).abs() < 0.02);
        // And the lag-3 pair composes: exp(-3 rho).
        assert!((corr(0, 2) - (-3.0 * rho_val).exp()).abs() < 0.02);
    }

    #[test]
    fn stationary_marginals_along_sequence() {
        // Pooled over members, each time index passes mean/variance checks.
        let rho = Rho::finite(0.9).unwrap();
        let times = [1.0, 2.0, 3.0, 5.0, 9.0];
        let n = 40_000usize;
        let mut sums = vec![0.0; times.len()];
        let mut sq = vec![0.0; times.len()];
        for member in 0..n {
            let seq = generate_sequence(&times, rho, member as u64, (1, 1, 1), 21).unwrap();
            for (i, f) in seq.fields.iter().enumerate() {
                let x = f[[0, 0, 0]];
                sums[i] += x;
                sq[i] += x * x;
            }
        }
        for i in 0..times.len() {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "t index {i} mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "t index {i} var {var}");
        }
    }

    #[test]
    fn squared_exp_marginals_and_smoothness() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let n = 30_000usize;
        let mut sq = vec![0.0; times.len()];
        let mut lag = 0.0;
        for member in 0..n {
            let seq =
                generate_sequence_squared_exp(&times, 2.0, member as u64, (1, 1, 1), 3).unwrap();
            for (i, f) in seq.fields.iter().enumerate() {
                sq[i] += f[[0, 0, 0]] * f[[0, 0, 0]];
            }
            lag += seq.fields[0][[0, 0, 0]] * seq.fields[1][[0, 0, 0]];
        }
        for (i, s) in sq.iter().enumerate() {
            let var = s / n as f64;
            assert!((var - 1.0).abs() < 0.03, "t index {i} var {var}");
        }
        // Lag-1 correlation should match exp(-1/(2*4)) = 0.8825 closely.
        let corr = lag / ((sq[0] / n as f64).sqrt() * (sq[1] / n as f64).sqrt() * n as f64);
        assert!((corr - (-1.0f64 / 8.0).exp()).abs() < 0.02, "corr {corr}");
    }

    #[test]
    fn generation_is_schedule_independent() {
        // Members generated in reverse order, or in parallel, match the
        // forward sequential generation bit for bit.
        let times = [1.0, 2.0, 3.0];
        let rho = Rho::finite(0.4).unwrap();
        let forward: Vec<_> = (0..8)
            .map(|m| generate_sequence(&times, rho, m, SHAPE, 50).unwrap())
            .collect();
        let mut reversed: Vec<_> = (0..8)
            .rev()
            .map(|m| generate_sequence(&times, rho, m, SHAPE, 50).unwrap())
            .collect();
        reversed.reverse();
        let parallel: Vec<_> = {
            use rayon::prelude::*;
            (0..8u64)
                .into_par_iter()
                .map(|m| generate_sequence(&times, rho, m, SHAPE, 50).unwrap())
                .collect()
        };
        for m in 0..8 {
            for i in 0..times.len() {
                assert!(bits_equal(&forward[m].fields[i], &reversed[m].fields[i]));
                assert!(bits_equal(&forward[m].fields[i], &parallel[m].fields[i]));
            }
        }
    }
}
