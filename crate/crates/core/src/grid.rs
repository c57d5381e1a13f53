//! Grids, weighted states, conditioning windows and ensembles.
//!
//! Everything downstream (denoisers, samplers, metrics) speaks in terms of
//! these types. A state is a `V x H x W` tensor of standardized values on a
//! grid that is periodic along `W` and bounded along `H`, with per-cell area
//! weights normalized to unit mean. All types are immutable after
//! construction and safe to share across threads.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the unit-mean area-weight invariant.
const WEIGHT_MEAN_RTOL: f64 = 1e-12;

/// One forecast variable: name plus the frozen standardization statistics
/// computed once over the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariableSpec {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// A static per-cell field (orography-like), scaled to `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StaticField {
    pub name: String,
    /// Row-major `H x W` values.
    pub values: Vec<f64>,
}

/// Grid geometry, per-cell area weights, variable catalog and static fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W` nonnegative area weights with unit mean.
    pub area_weights: Vec<f64>,
    pub variables: Vec<VariableSpec>,
    pub static_fields: Vec<StaticField>,
    /// Indices `(u, v)` of a wind-component pair, when the system has one.
    pub uv_pair: Option<(usize, usize)>,
}

impl GridSpec {
    /// Build a spec and check every invariant.
    pub fn new(
        height: usize,
        width: usize,
        area_weights: Vec<f64>,
        variables: Vec<VariableSpec>,
        static_fields: Vec<StaticField>,
        uv_pair: Option<(usize, usize)>,
    ) -> Result<Self> {
        let spec = GridSpec {
            height,
            width,
            area_weights,
            variables,
            static_fields,
            uv_pair,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform-weight spec with abstractly named variables (`var0`, `var1`, ...)
    /// and unit standardization. Handy in tests.
    pub fn uniform(height: usize, width: usize, n_vars: usize) -> Self {
        GridSpec {
            height,
            width,
            area_weights: vec![1.0; height * width],
            variables: (0..n_vars)
                .map(|v| VariableSpec {
                    name: format!("var{v}"),
                    mean: 0.0,
                    std: 1.0,
                })
                .collect(),
            static_fields: Vec::new(),
            uv_pair: None,
        }
    }

    /// Cosine-latitude area weights on an `H x W` grid, renormalized to unit
    /// mean. Latitude centers sit at `-90 + (h + 1/2) * 180 / H` degrees, so
    /// all weights are strictly positive.
    pub fn cosine_latitude_weights(height: usize, width: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(height * width);
        for h in 0..height {
            let lat_deg = -90.0 + (h as f64 + 0.5) * 180.0 / height as f64;
            let a = (lat_deg.to_radians()).cos();
            for _ in 0..width {
                w.push(a);
            }
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for a in &mut w {
            *a /= mean;
        }
        w
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter("grid dims must be positive".into()));
        }
        if self.area_weights.len() != self.n_cells() {
            return Err(Error::shape_in(
                "area_weights",
                format!("{} cells", self.n_cells()),
                format!("{}", self.area_weights.len()),
            ));
        }
        let mut sum = 0.0;
        for &a in &self.area_weights {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "area weight {a} is negative or non-finite"
                )));
            }
            sum += a;
        }
        let mean = sum / self.n_cells() as f64;
        if (mean - 1.0).abs() > WEIGHT_MEAN_RTOL {
            return Err(Error::InvalidParameter(format!(
                "area weights must have unit mean, got {mean}"
            )));
        }
        for v in &self.variables {
            if !(v.std > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "variable {} has non-positive std {}",
                    v.name, v.std
                )));
            }
        }
        for f in &self.static_fields {
            if f.values.len() != self.n_cells() {
                return Err(Error::shape_in(
                    "static field",
                    format!("{} cells", self.n_cells()),
                    format!("{}", f.values.len()),
                ));
            }
            if f.values.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidParameter(format!(
                    "static field {} has values outside [0, 1]",
                    f.name
                )));
            }
        }
        if let Some((u, v)) = self.uv_pair {
            if u >= self.n_vars() || v >= self.n_vars() || u == v {
                return Err(Error::InvalidParameter(format!(
                    "uv_pair ({u}, {v}) out of range for {} variables",
                    self.n_vars()
                )));
            }
        }
        Ok(())
    }

    /// Area weights as an `H x W` view for weighted reductions.
    pub fn weights_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.height, self.width), self.area_weights.clone())
            .expect("validated dims")
    }
}

/// One multi-variable field at one valid time, in standardized units.
#[derive(Debug, Clone)]
pub struct GridState {
    pub spec: Arc<GridSpec>,
    /// `V x H x W` standardized values, all finite.
    pub values: Array3<f64>,
    /// Hours relative to the forecast initialization (or absolute, for data).
    pub valid_time: f64,
}

impl GridState {
    pub fn new(spec: Arc<GridSpec>, values: Array3<f64>, valid_time: f64) -> Result<Self> {
        let expect = (spec.n_vars(), spec.height, spec.width);
        if values.dim() != expect {
            return Err(Error::shape_in(
                "GridState",
                format!("{expect:?}"),
                format!("{:?}", values.dim()),
            ));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("GridState values".into()));
        }
        Ok(GridState {
            spec,
            values,
            valid_time,
        })
    }

    pub fn variable(&self, v: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), v)
    }
}

/// Standardize a physical-unit tensor into a [`GridState`] using the spec's
/// frozen per-variable statistics.
pub fn standardize(raw: &Array3<f64>, spec: &Arc<GridSpec>, valid_time: f64) -> Result<GridState> {
    let expect = (spec.n_vars(), spec.height, spec.width);
    if raw.dim() != expect {
        return Err(Error::shape_in(
            "standardize",
            format!("{expect:?}"),
            format!("{:?}", raw.dim()),
        ));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("standardize input".into()));
    }
    let mut values = raw.clone();
    for (v, var) in spec.variables.iter().enumerate() {
        values
            .index_axis_mut(ndarray::Axis(0), v)
            .mapv_inplace(|x| (x - var.mean) / var.std);
    }
    GridState::new(spec.clone(), values, valid_time)
}

/// Inverse of [`standardize`]: back to physical units.
pub fn destandardize(state: &GridState) -> Array3<f64> {
    let mut raw = state.values.clone();
    for (v, var) in state.spec.variables.iter().enumerate() {
        raw.index_axis_mut(ndarray::Axis(0), v)
            .mapv_inplace(|x| x * var.std + var.mean);
    }
    raw
}

/// Elementwise wind speed `sqrt(u^2 + v^2)` from two physical-unit component
/// fields of equal shape.
pub fn derived_wind_speed(u: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if u.dim() != v.dim() {
        return Err(Error::shape_in(
            "derived_wind_speed",
            format!("{:?}", u.dim()),
            format!("{:?}", v.dim()),
        ));
    }
    let mut out = Array2::zeros(u.dim());
    ndarray::Zip::from(&mut out)
        .and(&u)
        .and(&v)
        .for_each(|o, &a, &b| *o = (a * a + b * b).sqrt());
    Ok(out)
}

/// Area-weighted grid mean `(1 / (H*W)) * sum_i a_i * field_i`.
pub fn weighted_mean(field: ArrayView2<'_, f64>, spec: &GridSpec) -> Result<f64> {
    if field.dim() != (spec.height, spec.width) {
        return Err(Error::shape_in(
            "weighted_mean",
            format!("({}, {})", spec.height, spec.width),
            format!("{:?}", field.dim()),
        ));
    }
    let mut acc = 0.0;
    for (i, &x) in field.iter().enumerate() {
        acc += spec.area_weights[i] * x;
    }
    Ok(acc / spec.n_cells() as f64)
}

/// Past states used as conditioning for the denoiser.
///
/// Offsets are nonpositive hours, strictly decreasing from 0; `states[0]` is
/// the most recent state. When concatenated along the channel axis the order
/// is fixed: states in offset order, then the spec's static fields.
#[derive(Debug, Clone)]
pub struct ConditioningWindow {
    states: Vec<GridState>,
    offsets: Vec<f64>,
}

impl ConditioningWindow {
    pub fn new(states: Vec<GridState>, offsets: Vec<f64>) -> Result<Self> {
        if states.is_empty() || states.len() != offsets.len() {
            return Err(Error::InvalidParameter(format!(
                "window needs matching nonempty states/offsets, got {} states, {} offsets",
                states.len(),
                offsets.len()
            )));
        }
        if offsets[0] != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "window offsets must start at 0, got {}",
                offsets[0]
            )));
        }
        for pair in offsets.windows(2) {
            if !(pair[1] < pair[0]) {
                return Err(Error::InvalidParameter(format!(
                    "window offsets must be strictly decreasing, got {pair:?}"
                )));
            }
        }
        let spec = states[0].spec.clone();
        for s in &states[1..] {
            if !Arc::ptr_eq(&s.spec, &spec) && *s.spec != *spec {
                return Err(Error::InvalidParameter(
                    "all window states must share one GridSpec".into(),
                ));
            }
        }
        Ok(ConditioningWindow { states, offsets })
    }

    /// Single-state window at offset 0.
    pub fn single(state: GridState) -> Self {
        ConditioningWindow {
            states: vec![state],
            offsets: vec![0.0],
        }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.states[0].spec
    }

    pub fn states(&self) -> &[GridState] {
        &self.states
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// The state at offset 0 (most recent).
    pub fn latest(&self) -> &GridState {
        &self.states[0]
    }

    /// Number of conditioning channels when stacked: `|offsets| * V + statics`.
    pub fn channel_count(&self) -> usize {
        let spec = self.spec();
        self.states.len() * spec.n_vars() + spec.static_fields.len()
    }

    /// Concatenate window states and static fields along the channel axis,
    /// in the fixed order described on the type.
    pub fn stack_channels(&self) -> Array3<f64> {
        let spec = self.spec();
        let (h, w) = (spec.height, spec.width);
        let mut out = Array3::zeros((self.channel_count(), h, w));
        let mut c = 0;
        for s in &self.states {
            for v in 0..spec.n_vars() {
                out.index_axis_mut(ndarray::Axis(0), c)
                    .assign(&s.variable(v));
                c += 1;
            }
        }
        for f in &spec.static_fields {
            let field = ArrayView2::from_shape((h, w), &f.values).expect("validated dims");
            out.index_axis_mut(ndarray::Axis(0), c).assign(&field);
            c += 1;
        }
        out
    }
}

/// Which rollout algorithm produced a forecast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmId {
    Continuous,
    ContinuousOu,
    Arci,
    ArBaseline,
    Deterministic,
}

impl std::fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AlgorithmId::Continuous => "continuous",
            AlgorithmId::ContinuousOu => "continuous_ou",
            AlgorithmId::Arci => "arci",
            AlgorithmId::ArBaseline => "ar_baseline",
            AlgorithmId::Deterministic => "deterministic",
        };
        f.write_str(s)
    }
}

/// Where a forecast came from: enough to reproduce it bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub algorithm: AlgorithmId,
    pub master_seed: u64,
    /// OU correlation parameter; `None` for algorithms without one,
    /// `Some(f64::INFINITY)` for the iid marker.
    pub rho: Option<f64>,
    pub schedule_hash: u64,
    /// Set when any requested lead time falls outside the trained support.
    pub extrapolated: bool,
}

/// A member-by-lead-time array of forecast states plus provenance.
#[derive(Debug, Clone)]
pub struct EnsembleForecast {
    pub lead_times: Vec<f64>,
    /// `data[member][lead_index]`.
    pub data: Vec<Vec<GridState>>,
    pub provenance: Provenance,
}

impl EnsembleForecast {
    pub fn new(lead_times: Vec<f64>, data: Vec<Vec<GridState>>, provenance: Provenance) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("ensemble with zero members".into()));
        }
        if lead_times.is_empty() {
            return Err(Error::EmptyInput("ensemble with zero lead times".into()));
        }
        if lead_times[0] <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lead times must be positive, got {}",
                lead_times[0]
            )));
        }
        for pair in lead_times.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::InvalidParameter(format!(
                    "lead times must be strictly increasing, got {pair:?}"
                )));
            }
        }
        for member in &data {
            if member.len() != lead_times.len() {
                return Err(Error::shape_in(
                    "EnsembleForecast",
                    format!("{} lead times", lead_times.len()),
                    format!("{} states", member.len()),
                ));
            }
        }
        Ok(EnsembleForecast {
            lead_times,
            data,
            provenance,
        })
    }

    pub fn n_members(&self) -> usize {
        self.data.len()
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.data[0][0].spec
    }

    /// Exact equality of every value bit pattern, lead times and provenance.
    pub fn bit_equal(&self, other: &EnsembleForecast) -> bool {
        if self.lead_times != other.lead_times
            || self.data.len() != other.data.len()
            || self.provenance.master_seed != other.provenance.master_seed
        {
            return false;
        }
        self.data.iter().zip(&other.data).all(|(a, b)| {
            a.iter().zip(b).all(|(sa, sb)| {
                sa.values
                    .iter()
                    .zip(sb.values.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
        })
    }
}
