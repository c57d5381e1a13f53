//! Latitude-weighted probabilistic verification.
//!
//! All metrics share the same weighting pattern: per-cell area weights with
//! unit mean, averaged over the grid, then over initialization times
//! (cases). RMSE scores the ensemble mean, Spread the internal ensemble
//! variability, SSR their calibration ratio, CRPS the full predictive
//! distribution, and the temporal difference measures trajectory continuity
//! between consecutive lead times.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{derived_wind_speed, EnsembleForecast, GridSpec, GridState};

/// One initialization time: the ensemble member fields and the matching
/// truth, for a single variable and lead time.
#[derive(Debug, Clone)]
pub struct CaseEnsemble {
    pub members: Vec<Array2<f64>>,
    pub truth: Array2<f64>,
}

fn check_cases(cases: &[CaseEnsemble], spec: &GridSpec, min_members: usize) -> Result<usize> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("metric over zero cases".into()));
    }
    let n_ens = cases[0].members.len();
    if n_ens < min_members {
        return Err(Error::InvalidParameter(format!(
            "metric needs at least {min_members} members, got {n_ens}"
        )));
    }
    let dim = (spec.height, spec.width);
    for case in cases {
        if case.members.len() != n_ens {
            return Err(Error::shape_in(
                "case members",
                format!("{n_ens}"),
                format!("{}", case.members.len()),
            ));
        }
        if case.truth.dim() != dim {
            return Err(Error::shape_in(
                "truth field",
                format!("{dim:?}"),
                format!("{:?}", case.truth.dim()),
            ));
        }
        for m in &case.members {
            if m.dim() != dim {
                return Err(Error::shape_in(
                    "member field",
                    format!("{dim:?}"),
                    format!("{:?}", m.dim()),
                ));
            }
        }
    }
    Ok(n_ens)
}

/// Case-mean of the square root of the area-weighted MSE of the ensemble
/// mean against truth.
pub fn rmse(cases: &[CaseEnsemble], spec: &GridSpec) -> Result<f64> {
    let n_ens = check_cases(cases, spec, 1)?;
    let cells = spec.n_cells() as f64;
    let mut acc = 0.0;
    for case in cases {
        let mut wmse = 0.0;
        for (i, &w) in spec.area_weights.iter().enumerate() {
            let (y, x) = (i / spec.width, i % spec.width);
            let mut mean = 0.0;
            for m in &case.members {
                mean += m[[y, x]];
            }
            mean /= n_ens as f64;
            let err = case.truth[[y, x]] - mean;
            wmse += w * err * err;
        }
        acc += (wmse / cells).sqrt();
    }
    Ok(acc / cases.len() as f64)
}

/// Spread (case-mean root of the weighted unbiased ensemble variance) and
/// the spread/skill ratio `sqrt((n+1)/n) * Spread / RMSE`.
pub fn spread_and_ssr(cases: &[CaseEnsemble], spec: &GridSpec) -> Result<(f64, f64)> {
    let n_ens = check_cases(cases, spec, 2)?;
    let cells = spec.n_cells() as f64;
    let mut acc = 0.0;
    for case in cases {
        let mut wvar = 0.0;
        for (i, &w) in spec.area_weights.iter().enumerate() {
            let (y, x) = (i / spec.width, i % spec.width);
            let mut mean = 0.0;
            for m in &case.members {
                mean += m[[y, x]];
            }
            mean /= n_ens as f64;
            let mut var = 0.0;
            for m in &case.members {
                let d = m[[y, x]] - mean;
                var += d * d;
            }
            wvar += w * var / (n_ens as f64 - 1.0);
        }
        acc += (wvar / cells).sqrt();
    }
    let spread = acc / cases.len() as f64;
    let skill = rmse(cases, spec)?;
    let ssr = if skill == 0.0 {
        0.0
    } else {
        ((n_ens as f64 + 1.0) / n_ens as f64).sqrt() * spread / skill
    };
    Ok((spread, ssr))
}

/// Ensemble CRPS estimator, area-weighted and case-averaged:
/// `mean_k |x_k - y| - (1/(2 n^2)) sum_kk' |x_k - x_k'|` per cell.
///
/// `fair = true` switches the second term to the `n (n - 1)` normalization.
/// The pairwise sum is evaluated by sorting; the brute-force double loop
/// lives in the tests as the independent oracle.
pub fn crps(cases: &[CaseEnsemble], spec: &GridSpec, fair: bool) -> Result<f64> {
    let n_ens = check_cases(cases, spec, 1)?;
    if fair && n_ens < 2 {
        return Err(Error::InvalidParameter(
            "fair CRPS needs at least 2 members".into(),
        ));
    }
    let cells = spec.n_cells() as f64;
    let n = n_ens as f64;
    let pair_norm = if fair { n * (n - 1.0) } else { n * n };
    let mut acc = 0.0;
    let mut values = vec![0.0; n_ens];
    for case in cases {
        let mut wsum = 0.0;
        for (i, &w) in spec.area_weights.iter().enumerate() {
            let (y, x) = (i / spec.width, i % spec.width);
            let truth = case.truth[[y, x]];
            for (k, m) in case.members.iter().enumerate() {
                values[k] = m[[y, x]];
            }
            let mut mae = 0.0;
            for &v in &values {
                mae += (v - truth).abs();
            }
            mae /= n;
            // sum_{k,k'} |x_k - x_k'| = 2 * sum_j (2j - n + 1) x_(j) over the
            // sorted sample.
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut pair_sum = 0.0;
            for (j, &v) in values.iter().enumerate() {
                pair_sum += (2.0 * j as f64 - n + 1.0) * v;
            }
            pair_sum *= 2.0;
            wsum += w * (mae - pair_sum / (2.0 * pair_norm));
        }
        acc += wsum / cells;
    }
    Ok(acc / cases.len() as f64)
}

/// Mean absolute difference between member states at two consecutive lead
/// times, averaged over cases, members and weighted cells.
pub fn temporal_difference(
    now: &[CaseEnsemble],
    prev: &[CaseEnsemble],
    spec: &GridSpec,
) -> Result<f64> {
    let n_now = check_cases(now, spec, 1)?;
    let n_prev = check_cases(prev, spec, 1)?;
    if now.len() != prev.len() || n_now != n_prev {
        return Err(Error::shape_in(
            "temporal_difference",
            format!("{} cases x {} members", now.len(), n_now),
            format!("{} cases x {} members", prev.len(), n_prev),
        ));
    }
    let cells = spec.n_cells() as f64;
    let mut acc = 0.0;
    for (a, b) in now.iter().zip(prev) {
        let mut case_acc = 0.0;
        for (ma, mb) in a.members.iter().zip(&b.members) {
            let mut wsum = 0.0;
            for (i, &w) in spec.area_weights.iter().enumerate() {
                let (y, x) = (i / spec.width, i % spec.width);
                wsum += w * (ma[[y, x]] - mb[[y, x]]).abs();
            }
            case_acc += wsum / cells;
        }
        acc += case_acc / n_now as f64;
    }
    Ok(acc / now.len() as f64)
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub variable: String,
    pub lead_time_h: f64,
    pub rmse: f64,
    /// Absent for single-member (deterministic) forecasts.
    pub spread: Option<f64>,
    pub ssr: Option<f64>,
    pub crps: f64,
    /// Absent at the first lead time (no predecessor).
    pub delta_x: Option<f64>,
    pub n_ens: usize,
    pub n_cases: usize,
}

/// Per-variable, per-lead-time verification table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// CSV with the fixed column set, one header line, `.` decimal,
    /// newline-terminated. Absent entries are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variable,lead_time_h,rmse,spread,ssr,crps,delta_x,n_ens,n_cases\n");
        for r in &self.rows {
            let opt = |v: &Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variable,
                r.lead_time_h,
                r.rmse,
                opt(&r.spread),
                opt(&r.ssr),
                r.crps,
                opt(&r.delta_x),
                r.n_ens,
                r.n_cases
            ));
        }
        out
    }

    pub fn row(&self, variable: &str, lead_time_h: f64) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.variable == variable && (r.lead_time_h - lead_time_h).abs() < 1e-9)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
            if !finite_nonneg(r.rmse)
                || !finite_nonneg(r.crps)
                || r.spread.is_some_and(|v| !finite_nonneg(v))
                || r.ssr.is_some_and(|v| !finite_nonneg(v))
                || r.delta_x.is_some_and(|v| !finite_nonneg(v))
            {
                return Err(Error::NonFinite(format!(
                    "metric row ({}, {})",
                    r.variable, r.lead_time_h
                )));
            }
            if r.ssr.is_some() && r.n_ens < 2 {
                return Err(Error::InvalidParameter(
                    "SSR reported for a single-member ensemble".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One evaluation case: a forecast and the truth states aligned to its lead
/// times.
#[derive(Debug, Clone)]
pub struct ForecastCase {
    pub forecast: EnsembleForecast,
    pub truth: Vec<GridState>,
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvaluateOptions {
    pub fair_crps: bool,
    /// Compute the derived wind-speed rows when the spec declares a uv pair.
    pub derived_wind: bool,
}

/// Run the full metric suite over aligned forecast/truth cases, producing
/// one row per (variable, lead time), plus derived wind-speed rows when
/// requested. Misaligned metadata is rejected with a diff listing.
pub fn evaluate(cases: &[ForecastCase], options: EvaluateOptions) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("evaluate over zero cases".into()));
    }
    let first = &cases[0].forecast;
    let spec = first.spec().clone();
    let lead_times = first.lead_times.clone();
    let n_ens = first.n_members();

    let mut diffs = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        if case.forecast.lead_times != lead_times {
            diffs.push(format!(
                "case {ci}: lead times {:?} != {:?}",
                case.forecast.lead_times, lead_times
            ));
        }
        if case.forecast.n_members() != n_ens {
            diffs.push(format!(
                "case {ci}: n_ens {} != {}",
                case.forecast.n_members(),
                n_ens
            ));
        }
        if **case.forecast.spec() != *spec {
            diffs.push(format!("case {ci}: grid spec differs"));
        }
        if case.truth.len() != lead_times.len() {
            diffs.push(format!(
                "case {ci}: {} truth states for {} lead times",
                case.truth.len(),
                lead_times.len()
            ));
        } else {
            for (s, &t) in case.truth.iter().zip(&lead_times) {
                if (s.valid_time - t).abs() > 1e-9 {
                    diffs.push(format!(
                        "case {ci}: truth at {} does not match lead {t}",
                        s.valid_time
                    ));
                }
                if *s.spec != *spec {
                    diffs.push(format!("case {ci}: truth grid spec differs"));
                }
            }
        }
    }
    if !diffs.is_empty() {
        return Err(Error::MetadataMismatch(diffs.join("\n")));
    }

    // Evaluation series: plain variables in standardized units, plus the
    // derived wind speed in physical units when requested.
    enum Series {
        Plain(usize),
        WindSpeed(usize, usize),
    }
    let mut series: Vec<(String, Series)> = spec
        .variables
        .iter()
        .enumerate()
        .map(|(v, var)| (var.name.clone(), Series::Plain(v)))
        .collect();
    if options.derived_wind {
        if let Some((u, v)) = spec.uv_pair {
            series.push((
                format!(
                    "ws({},{})",
                    spec.variables[u].name, spec.variables[v].name
                ),
                Series::WindSpeed(u, v),
            ));
        }
    }

    let extract = |state: &GridState, s: &Series| -> Result<Array2<f64>> {
        match s {
            Series::Plain(v) => Ok(state.variable(*v).to_owned()),
            Series::WindSpeed(u, v) => {
                let uvar = &spec.variables[*u];
                let vvar = &spec.variables[*v];
                let uphys = state.variable(*u).mapv(|x| x * uvar.std + uvar.mean);
                let vphys = state.variable(*v).mapv(|x| x * vvar.std + vvar.mean);
                derived_wind_speed(uphys.view(), vphys.view())
            }
        }
    };

    let mut report = MetricReport::default();
    for (name, sel) in &series {
        let mut prev_slices: Option<Vec<CaseEnsemble>> = None;
        for (li, &lead) in lead_times.iter().enumerate() {
            let mut slices = Vec::with_capacity(cases.len());
            for case in cases {
                let members = case
                    .forecast
                    .data
                    .iter()
                    .map(|m| extract(&m[li], sel))
                    .collect::<Result<Vec<_>>>()?;
                let truth = extract(&case.truth[li], sel)?;
                slices.push(CaseEnsemble { members, truth });
            }
            let row_rmse = rmse(&slices, &spec)?;
            let (spread, ssr) = if n_ens >= 2 {
                let (s, r) = spread_and_ssr(&slices, &spec)?;
                (Some(s), Some(r))
            } else {
                (None, None)
            };
            let row_crps = crps(&slices, &spec, options.fair_crps)?;
            let delta_x = match &prev_slices {
                Some(prev) => Some(temporal_difference(&slices, prev, &spec)?),
                None => None,
            };
            report.rows.push(MetricRow {
                variable: name.clone(),
                lead_time_h: lead,
                rmse: row_rmse,
                spread,
                ssr,
                crps: row_crps,
                delta_x,
                n_ens,
                n_cases: cases.len(),
            });
            prev_slices = Some(slices);
        }
    }
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn uniform_spec(h: usize, w: usize) -> GridSpec {
        GridSpec::uniform(h, w, 1)
    }

    fn weighted_spec(rng: &mut impl Rng, h: usize, w: usize) -> GridSpec {
        let mut weights: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.2..2.0)).collect();
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|x| *x /= mean);
        GridSpec::new(h, w, weights, vec![], vec![], None).unwrap()
    }

    fn random_cases(
        rng: &mut impl Rng,
        n_cases: usize,
        n_ens: usize,
        h: usize,
        w: usize,
    ) -> Vec<CaseEnsemble> {
        (0..n_cases)
            .map(|_| CaseEnsemble {
                members: (0..n_ens)
                    .map(|_| Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0)))
                    .collect(),
                truth: Array2::from_shape_fn((h, w), |_| rng.random_range(-2.0..2.0)),
            })
            .collect()
    }

    #[test]
    fn rmse_zero_when_mean_equals_truth() {
        let spec = uniform_spec(2, 3);
        // Two members symmetric about the truth.
        let truth = Array2::from_elem((2, 3), 1.0);
        let cases = vec![CaseEnsemble {
            members: vec![truth.mapv(|x| x + 0.5), truth.mapv(|x| x - 0.5)],
            truth,
        }];
        assert_eq!(rmse(&cases, &spec).unwrap(), 0.0);
    }

    #[test]
    fn rmse_constant_offset() {
        let spec = uniform_spec(3, 3);
        let truth = Array2::from_elem((3, 3), 0.25);
        let cases = vec![CaseEnsemble {
            members: vec![truth.mapv(|x| x + 0.75)],
            truth,
        }];
        assert_relative_eq!(rmse(&cases, &spec).unwrap(), 0.75, max_relative = 1e-12);
    }

    #[test]
    fn rmse_matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let spec = weighted_spec(&mut rng, 3, 4);
        let cases = random_cases(&mut rng, 3, 4, 3, 4);
        // Independent oracle: explicit loops straight off the definition.
        let mut total = 0.0;
        for case in &cases {
            let mut wmse = 0.0;
            for y in 0..3 {
                for x in 0..4 {
                    let mean: f64 =
                        case.members.iter().map(|m| m[[y, x]]).sum::<f64>() / 4.0;
                    let e = case.truth[[y, x]] - mean;
                    wmse += spec.area_weights[y * 4 + x] * e * e;
                }
            }
            total += (wmse / 12.0).sqrt();
        }
        let oracle = total / 3.0;
        assert_relative_eq!(rmse(&cases, &spec).unwrap(), oracle, max_relative = 1e-12);
    }

    #[test]
    fn spread_zero_for_identical_members() {
        let spec = uniform_spec(2, 2);
        let field = Array2::from_elem((2, 2), 0.3);
        let cases = vec![CaseEnsemble {
            members: vec![field.clone(), field.clone(), field.clone()],
            truth: field.mapv(|x| x + 1.0),
        }];
        let (spread, ssr) = spread_and_ssr(&cases, &spec).unwrap();
        assert_eq!(spread, 0.0);
        assert_eq!(ssr, 0.0);
        assert!(spread_and_ssr(&cases[..0], &spec).is_err());
    }

    #[test]
    fn spread_and_ssr_match_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let spec = weighted_spec(&mut rng, 2, 5);
        let cases = random_cases(&mut rng, 4, 5, 2, 5);
        let mut total = 0.0;
        for case in &cases {
            let mut wvar = 0.0;
            for y in 0..2 {
                for x in 0..5 {
                    let mean: f64 =
                        case.members.iter().map(|m| m[[y, x]]).sum::<f64>() / 5.0;
                    let var: f64 = case
                        .members
                        .iter()
                        .map(|m| (m[[y, x]] - mean) * (m[[y, x]] - mean))
                        .sum::<f64>()
                        / 4.0;
                    wvar += spec.area_weights[y * 5 + x] * var;
                }
            }
            total += (wvar / 10.0).sqrt();
        }
        let spread_oracle = total / 4.0;
        let (spread, ssr) = spread_and_ssr(&cases, &spec).unwrap();
        assert_relative_eq!(spread, spread_oracle, max_relative = 1e-12);
        let ssr_oracle = (6.0f64 / 5.0).sqrt() * spread_oracle / rmse(&cases, &spec).unwrap();
        assert_relative_eq!(ssr, ssr_oracle, max_relative = 1e-12);
    }

    #[test]
    fn ssr_near_one_for_calibrated_ensemble() {
        // Members and truth iid N(0,1) over an 8x8 grid: SSR = 1 +- 0.05 at
        // n_ens 50 over 1000 cases. The sqrt((n+1)/n) factor makes the
        // exchangeable ensemble score exactly 1 in expectation.
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let spec = uniform_spec(8, 8);
        let mut field =
            || Array2::from_shape_fn((8, 8), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cases: Vec<CaseEnsemble> = (0..1000)
            .map(|_| CaseEnsemble {
                members: (0..50).map(|_| field()).collect(),
                truth: field(),
            })
            .collect();
        let (_, ssr) = spread_and_ssr(&cases, &spec).unwrap();
        assert!((ssr - 1.0).abs() < 0.05, "SSR {ssr}");
    }

    #[test]
    fn crps_single_member_is_weighted_mae() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let spec = weighted_spec(&mut rng, 3, 3);
        let cases = random_cases(&mut rng, 2, 1, 3, 3);
        let crps_val = crps(&cases, &spec, false).unwrap();
        let mut mae = 0.0;
        for case in &cases {
            let mut wsum = 0.0;
            for y in 0..3 {
                for x in 0..3 {
                    wsum += spec.area_weights[y * 3 + x]
                        * (case.members[0][[y, x]] - case.truth[[y, x]]).abs();
                }
            }
            mae += wsum / 9.0;
        }
        mae /= 2.0;
        assert_eq!(crps_val, mae);
    }

    #[test]
    fn crps_zero_when_all_members_equal_truth() {
        let spec = uniform_spec(2, 2);
        let truth = Array2::from_elem((2, 2), -0.7);
        let cases = vec![CaseEnsemble {
            members: vec![truth.clone(), truth.clone()],
            truth,
        }];
        assert_eq!(crps(&cases, &spec, false).unwrap(), 0.0);
    }

    #[test]
    fn crps_matches_brute_force_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let spec = weighted_spec(&mut rng, 2, 3);
        for n_ens in [1usize, 2, 3, 7] {
            let cases = random_cases(&mut rng, 3, n_ens, 2, 3);
            // Brute-force oracle with the explicit O(n^2) double loop.
            let mut total = 0.0;
            for case in &cases {
                let mut wsum = 0.0;
                for y in 0..2 {
                    for x in 0..3 {
                        let truth = case.truth[[y, x]];
                        let vals: Vec<f64> =
                            case.members.iter().map(|m| m[[y, x]]).collect();
                        let mae: f64 =
                            vals.iter().map(|v| (v - truth).abs()).sum::<f64>()
                                / n_ens as f64;
                        let mut pairs = 0.0;
                        for a in &vals {
                            for b in &vals {
                                pairs += (a - b).abs();
                            }
                        }
                        wsum += spec.area_weights[y * 3 + x]
                            * (mae - pairs / (2.0 * (n_ens * n_ens) as f64));
                    }
                }
                total += wsum / 6.0;
            }
            let oracle = total / 3.0;
            assert_relative_eq!(
                crps(&cases, &spec, false).unwrap(),
                oracle,
                max_relative = 1e-12,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn fair_crps_uses_n_minus_one_kernel() {
        let mut rng = ChaCha12Rng::seed_from_u64(36);
        let spec = uniform_spec(1, 2);
        let cases = random_cases(&mut rng, 2, 4, 1, 2);
        let plain = crps(&cases, &spec, false).unwrap();
        let fair = crps(&cases, &spec, true).unwrap();
        // Manual relation: fair subtracts a strictly larger pair term.
        assert!(fair < plain);
        assert!(crps(&random_cases(&mut rng, 1, 1, 1, 2), &spec, true).is_err());
    }

    #[test]
    fn crps_nonnegative_on_fuzzed_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let spec = uniform_spec(1, 1);
        for _ in 0..10_000 {
            let n_ens = rng.random_range(1..6);
            let cases = vec![CaseEnsemble {
                members: (0..n_ens)
                    .map(|_| Array2::from_elem((1, 1), rng.random_range(-100.0..100.0)))
                    .collect(),
                truth: Array2::from_elem((1, 1), rng.random_range(-100.0..100.0)),
            }];
            let v = crps(&cases, &spec, false).unwrap();
            assert!(v >= -1e-12, "CRPS {v} negative");
        }
    }

    #[test]
    fn gaussian_crps_matches_analytic_with_finite_n_bias() {
        // Scalar cell, members drawn N(mu, sigma^2): the n^2-kernel
        // estimator's expectation is the analytic CRPS plus
        // sigma / (n sqrt(pi)). 1e5 trials, 1% relative agreement.
        let mut rng = ChaCha12Rng::seed_from_u64(38);
        let spec = uniform_spec(1, 1);
        let (mu, sigma, y, n_ens) = (0.3, 1.4, 1.1, 8usize);
        let trials = 100_000usize;
        let mut acc = 0.0;
        for _ in 0..trials {
            let members: Vec<Array2<f64>> = (0..n_ens)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    Array2::from_elem((1, 1), mu + sigma * z)
                })
                .collect();
            let cases = vec![CaseEnsemble {
                members,
                truth: Array2::from_elem((1, 1), y),
            }];
            acc += crps(&cases, &spec, false).unwrap();
        }
        let estimate = acc / trials as f64;

        let z = (y - mu) / sigma;
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * (1.0 + erf(z / 2f64.sqrt()));
        let analytic =
            sigma * (z * (2.0 * cdf - 1.0) + 2.0 * phi - 1.0 / std::f64::consts::PI.sqrt());
        let expected = analytic + sigma / (n_ens as f64 * std::f64::consts::PI.sqrt());
        assert_relative_eq!(estimate, expected, max_relative = 0.01);
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26 rational approximation, |err| < 1.5e-7;
        // ample for a 1% Monte Carlo tolerance.
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let poly = t
            * (0.254829592
                + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        sign * (1.0 - poly * (-x * x).exp())
    }

    #[test]
    fn temporal_difference_examples() {
        let spec = uniform_spec(2, 2);
        let a = Array2::from_elem((2, 2), 1.0);
        let b = Array2::from_elem((2, 2), -1.0);
        let mk = |f: &Array2<f64>| {
            vec![CaseEnsemble {
                members: vec![f.clone()],
                truth: f.clone(),
            }]
        };
        // Constant trajectory.
        assert_eq!(temporal_difference(&mk(&a), &mk(&a), &spec).unwrap(), 0.0);
        // Alternating +-1 field.
        assert_eq!(temporal_difference(&mk(&a), &mk(&b), &spec).unwrap(), 2.0);
    }

    #[test]
    fn temporal_difference_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(39);
        let spec = weighted_spec(&mut rng, 2, 3);
        let now = random_cases(&mut rng, 3, 2, 2, 3);
        let prev = random_cases(&mut rng, 3, 2, 2, 3);
        let mut total = 0.0;
        for (a, b) in now.iter().zip(&prev) {
            let mut case_acc = 0.0;
            for k in 0..2 {
                let mut wsum = 0.0;
                for y in 0..2 {
                    for x in 0..3 {
                        wsum += spec.area_weights[y * 3 + x]
                            * (a.members[k][[y, x]] - b.members[k][[y, x]]).abs();
                    }
                }
                case_acc += wsum / 6.0;
            }
            total += case_acc / 2.0;
        }
        let oracle = total / 3.0;
        assert_relative_eq!(
            temporal_difference(&now, &prev, &spec).unwrap(),
            oracle,
            max_relative = 1e-12
        );
    }

    #[test]
    fn rmse_of_mean_no_worse_than_mean_member_rmse() {
        // Norm convexity per case; checked on random sets.
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        for _ in 0..20 {
            let spec = weighted_spec(&mut rng, 2, 3);
            let cases = random_cases(&mut rng, 2, 5, 2, 3);
            let ens = rmse(&cases, &spec).unwrap();
            let mut member_mean = 0.0;
            for k in 0..5 {
                let singles: Vec<CaseEnsemble> = cases
                    .iter()
                    .map(|c| CaseEnsemble {
                        members: vec![c.members[k].clone()],
                        truth: c.truth.clone(),
                    })
                    .collect();
                member_mean += rmse(&singles, &spec).unwrap();
            }
            member_mean /= 5.0;
            assert!(ens <= member_mean + 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_member_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let spec = weighted_spec(&mut rng, 2, 2);
        let cases = random_cases(&mut rng, 2, 4, 2, 2);
        let mut permuted = cases.clone();
        for c in &mut permuted {
            c.members.rotate_left(2);
            c.members.swap(0, 1);
        }
        assert_eq!(rmse(&cases, &spec).unwrap(), rmse(&permuted, &spec).unwrap());
        assert_relative_eq!(
            crps(&cases, &spec, false).unwrap(),
            crps(&permuted, &spec, false).unwrap(),
            max_relative = 1e-14
        );
        let (s1, r1) = spread_and_ssr(&cases, &spec).unwrap();
        let (s2, r2) = spread_and_ssr(&permuted, &spec).unwrap();
        assert_relative_eq!(s1, s2, max_relative = 1e-14);
        assert_relative_eq!(r1, r2, max_relative = 1e-14);
    }

    #[test]
    fn csv_format_is_fixed() {
        let report = MetricReport {
            rows: vec![MetricRow {
                variable: "var0".into(),
                lead_time_h: 6.0,
                rmse: 1.5,
                spread: Some(0.5),
                ssr: Some(0.4),
                crps: 0.25,
                delta_x: None,
                n_ens: 4,
                n_cases: 10,
            }],
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "variable,lead_time_h,rmse,spread,ssr,crps,delta_x,n_ens,n_cases"
        );
        assert_eq!(lines.next().unwrap(), "var0,6,1.5,0.5,0.4,0.25,,4,10");
        assert!(csv.ends_with('\n'));
    }
}
