//! Dataset generation with contiguous splits, and the loaded-dataset view
//! that feeds training windows and evaluation truth.
//!
//! Standardization statistics are computed once over the training split and
//! frozen into the GridSpec of every file, so each split carries identical
//! grid metadata. Files store standardized f32 values in
//! (time, variable, H, W) order.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array3;

use cef_core::grid::{ConditioningWindow, EnsembleForecast, GridSpec, GridState, Provenance};
use cef_core::train::{ExampleSource, TrainingExample};

use crate::container::{
    read_container, write_container, ContainerHeader, ContainerKind, Dtype, TimeGrid,
};
use crate::error::{HarnessError, Result};
use crate::toy::{build_grid_spec, ToySystemSpec};

/// Fractions of the simulated record given to train/val/test; must sum to 1.
#[derive(Debug, Clone, Copy)]
pub struct SplitFractions(pub f64, pub f64, pub f64);

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions(0.7, 0.15, 0.15)
    }
}

pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Simulate the system and write the three split files. `margin_hours` is
/// the largest of window depth and forecast horizon; every split must be
/// able to host at least one full case inside its own range.
pub fn generate_dataset(
    system: &ToySystemSpec,
    length_hours: usize,
    fractions: SplitFractions,
    margin_hours: usize,
    out_dir: &Path,
    config_hash: Option<String>,
) -> Result<SplitFiles> {
    let SplitFractions(ft, fv, fe) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fe > 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(HarnessError::validation(
            "split fractions must be positive and sum to 1",
        ));
    }
    let n_states = length_hours + 1;
    let n_train = (n_states as f64 * ft).floor() as usize;
    let n_val = (n_states as f64 * fv).floor() as usize;
    let n_test = n_states - n_train - n_val;
    for (name, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n < 2 * margin_hours + 2 {
            return Err(HarnessError::validation(format!(
                "{name} split has {n} states, too short for margin {margin_hours}"
            )));
        }
    }

    let physical = system.simulate_hours(length_hours)?;
    // Frozen statistics from the training range only.
    let mut stats = Vec::with_capacity(system.n_vars);
    for v in 0..system.n_vars {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        for state in &physical[..n_train] {
            for &x in state.index_axis(ndarray::Axis(0), v).iter() {
                sum += x;
                sq += x * x;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = (sq / count as f64 - mean * mean).max(0.0);
        let std = var.sqrt().max(1e-12);
        stats.push((mean, std));
    }
    let grid = build_grid_spec(system, &stats)?;

    std::fs::create_dir_all(out_dir)?;
    let ranges = [
        ("train", 0usize, n_train),
        ("val", n_train, n_val),
        ("test", n_train + n_val, n_test),
    ];
    let mut paths = Vec::with_capacity(3);
    for (name, start, count) in ranges {
        let mut payload = Vec::with_capacity(count * system.n_vars * grid.n_cells());
        for state in &physical[start..start + count] {
            for v in 0..system.n_vars {
                let (mean, std) = stats[v];
                for &x in state.index_axis(ndarray::Axis(0), v).iter() {
                    payload.push((x - mean) / std);
                }
            }
        }
        let mut header = ContainerHeader::new(
            ContainerKind::Dataset,
            Dtype::F32,
            vec![count, system.n_vars, system.height, system.width],
            vec!["time".into(), "variable".into(), "h".into(), "w".into()],
        );
        header.grid = Some((*grid).clone());
        header.times = Some(TimeGrid {
            start_hour: start as f64,
            stride_hours: 1.0,
            count,
        });
        header.split = Some(name.to_string());
        header.system = Some(system.clone());
        header.base_seed = Some(system.base_seed);
        header.config_hash = config_hash.clone();
        let path = out_dir.join(format!("{name}.cef"));
        write_container(&path, &header, &payload)?;
        paths.push(path);
    }
    let mut it = paths.into_iter();
    Ok(SplitFiles {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

/// A loaded dataset split: standardized states plus all metadata.
pub struct Dataset {
    pub grid: Arc<GridSpec>,
    pub times: TimeGrid,
    pub states: Vec<Array3<f64>>,
    pub system: ToySystemSpec,
    pub split: String,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = read_container(path)?;
        if header.kind != ContainerKind::Dataset {
            return Err(HarnessError::validation(format!(
                "{}: expected a dataset container",
                path.display()
            )));
        }
        let grid = header
            .grid
            .ok_or_else(|| HarnessError::validation("dataset header lacks grid"))?;
        grid.validate().map_err(HarnessError::from)?;
        let times = header
            .times
            .ok_or_else(|| HarnessError::validation("dataset header lacks times"))?;
        let system = header
            .system
            .ok_or_else(|| HarnessError::validation("dataset header lacks system"))?;
        let dims = &header.dims;
        if dims.len() != 4 || dims[1] != grid.n_vars() || dims[2] != grid.height || dims[3] != grid.width
        {
            return Err(HarnessError::validation(format!(
                "dataset dims {dims:?} inconsistent with grid"
            )));
        }
        let state_len = dims[1] * dims[2] * dims[3];
        let states = payload
            .chunks_exact(state_len)
            .map(|chunk| {
                Array3::from_shape_vec((dims[1], dims[2], dims[3]), chunk.to_vec())
                    .expect("validated dims")
            })
            .collect();
        Ok(Dataset {
            grid: Arc::new(grid),
            times,
            states,
            system,
            split: header.split.unwrap_or_default(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// State at a time index, with the absolute hour as valid time.
    pub fn state(&self, index: usize) -> Result<GridState> {
        let values = self
            .states
            .get(index)
            .ok_or_else(|| {
                HarnessError::validation(format!(
                    "time index {index} out of range ({} states)",
                    self.n_states()
                ))
            })?
            .clone();
        GridState::new(self.grid.clone(), values, self.times.hour_at(index))
            .map_err(HarnessError::from)
    }

    /// State whose valid time is set relative to a reference hour (used for
    /// conditioning windows and truth alignment).
    fn state_relative(&self, index: usize, reference_hour: f64) -> Result<GridState> {
        let mut s = self.state(index)?;
        s.valid_time -= reference_hour;
        Ok(s)
    }

    /// Conditioning window anchored at time index `init`, with the given
    /// nonpositive offsets (hours on the dataset grid).
    pub fn window_at(&self, init: usize, offsets: &[f64]) -> Result<ConditioningWindow> {
        let init_hour = self.times.hour_at(init);
        let mut states = Vec::with_capacity(offsets.len());
        for &off in offsets {
            let idx = self.times.index_of(init_hour + off).ok_or_else(|| {
                HarnessError::validation(format!(
                    "window offset {off} at init index {init} leaves the dataset grid"
                ))
            })?;
            states.push(self.state_relative(idx, init_hour)?);
        }
        ConditioningWindow::new(states, offsets.to_vec()).map_err(HarnessError::from)
    }

    /// Truth states at `init + lead` for each lead time, with valid times
    /// relative to the initialization (matching forecast lead times).
    pub fn truth_at(&self, init: usize, lead_times: &[f64]) -> Result<Vec<GridState>> {
        let init_hour = self.times.hour_at(init);
        lead_times
            .iter()
            .map(|&t| {
                let idx = self.times.index_of(init_hour + t).ok_or_else(|| {
                    HarnessError::validation(format!(
                        "lead {t} at init index {init} leaves the dataset grid"
                    ))
                })?;
                self.state_relative(idx, init_hour)
            })
            .collect()
    }

    /// Initialization indices usable with the given window depth and
    /// horizon: every conditioned or forecasted time stays inside the split.
    pub fn usable_inits(&self, max_window_depth: f64, horizon: f64, stride: usize) -> Vec<usize> {
        let lo = (max_window_depth / self.times.stride_hours).ceil() as usize;
        let hi_margin = (horizon / self.times.stride_hours).ceil() as usize;
        if self.n_states() <= lo + hi_margin {
            return Vec::new();
        }
        (lo..self.n_states() - hi_margin)
            .step_by(stride.max(1))
            .collect()
    }
}

/// Training-example view over a dataset: windows anchored on usable init
/// indices, targets on the hourly grid.
pub struct DatasetSource {
    pub data: Arc<Dataset>,
    pub offsets: Vec<f64>,
    init_indices: Vec<usize>,
}

impl DatasetSource {
    pub fn new(data: Arc<Dataset>, offsets: Vec<f64>, max_lead_hours: f64) -> Result<Self> {
        let depth = offsets
            .iter()
            .fold(0.0f64, |acc, &o| acc.max(-o));
        let init_indices = data.usable_inits(depth, max_lead_hours, 1);
        if init_indices.is_empty() {
            return Err(HarnessError::validation(
                "split too short for the requested window depth and horizon",
            ));
        }
        Ok(DatasetSource {
            data,
            offsets,
            init_indices,
        })
    }
}

impl ExampleSource for DatasetSource {
    fn n_windows(&self) -> usize {
        self.init_indices.len()
    }

    fn example(&self, window_idx: usize, lead_time: f64) -> cef_core::Result<TrainingExample> {
        let init = self.init_indices[window_idx % self.init_indices.len()];
        let window = self
            .data
            .window_at(init, &self.offsets)
            .map_err(|e| cef_core::Error::InvalidParameter(e.to_string()))?;
        let init_hour = self.data.times.hour_at(init);
        let idx = self
            .data
            .times
            .index_of(init_hour + lead_time)
            .ok_or_else(|| {
                cef_core::Error::InvalidParameter(format!(
                    "lead {lead_time} not on the dataset grid"
                ))
            })?;
        let target = self
            .data
            .state_relative(idx, init_hour)
            .map_err(|e| cef_core::Error::InvalidParameter(e.to_string()))?;
        Ok(TrainingExample {
            window,
            lead_time,
            target,
        })
    }
}

/// Persist a batch of per-initialization forecasts into one container.
/// All cases must agree on lead times, member count and provenance.
pub fn write_forecast(
    path: &Path,
    cases: &[EnsembleForecast],
    init_times: &[f64],
    config_hash: Option<String>,
) -> Result<()> {
    if cases.is_empty() || cases.len() != init_times.len() {
        return Err(HarnessError::validation(
            "forecast persistence needs matching nonempty cases and init times",
        ));
    }
    let first = &cases[0];
    let spec = first.spec().clone();
    let lead_times = first.lead_times.clone();
    let n_ens = first.n_members();
    for (i, c) in cases.iter().enumerate() {
        if c.lead_times != lead_times || c.n_members() != n_ens {
            return Err(HarnessError::validation(format!(
                "case {i} disagrees on lead times or member count"
            )));
        }
        if c.provenance != first.provenance {
            return Err(HarnessError::validation(format!(
                "case {i} carries different provenance"
            )));
        }
    }
    let (nv, nh, nw) = (spec.n_vars(), spec.height, spec.width);
    let mut payload =
        Vec::with_capacity(cases.len() * n_ens * lead_times.len() * nv * nh * nw);
    for c in cases {
        for member in &c.data {
            for state in member {
                payload.extend(state.values.iter());
            }
        }
    }
    let mut header = ContainerHeader::new(
        ContainerKind::Forecast,
        Dtype::F32,
        vec![cases.len(), n_ens, lead_times.len(), nv, nh, nw],
        vec![
            "case".into(),
            "member".into(),
            "lead".into(),
            "variable".into(),
            "h".into(),
            "w".into(),
        ],
    );
    header.grid = Some((*spec).clone());
    header.lead_times = Some(lead_times);
    header.init_times = Some(init_times.to_vec());
    header.provenance = Some(first.provenance.clone());
    header.config_hash = config_hash;
    write_container(path, &header, &payload)
}

/// Load a forecast container back into per-case ensembles.
pub fn read_forecast(path: &Path) -> Result<(Vec<EnsembleForecast>, Vec<f64>, ContainerHeader)> {
    let (header, payload) = read_container(path)?;
    if header.kind != ContainerKind::Forecast {
        return Err(HarnessError::validation(format!(
            "{}: expected a forecast container",
            path.display()
        )));
    }
    let grid = Arc::new(
        header
            .grid
            .clone()
            .ok_or_else(|| HarnessError::validation("forecast header lacks grid"))?,
    );
    let lead_times = header
        .lead_times
        .clone()
        .ok_or_else(|| HarnessError::validation("forecast header lacks lead times"))?;
    let init_times = header
        .init_times
        .clone()
        .ok_or_else(|| HarnessError::validation("forecast header lacks init times"))?;
    let provenance: Provenance = header
        .provenance
        .clone()
        .ok_or_else(|| HarnessError::validation("forecast header lacks provenance"))?;
    let dims = &header.dims;
    if dims.len() != 6 {
        return Err(HarnessError::validation("forecast dims must be rank 6"));
    }
    let (n_cases, n_ens, n_lead) = (dims[0], dims[1], dims[2]);
    let state_len = dims[3] * dims[4] * dims[5];
    let mut cases = Vec::with_capacity(n_cases);
    let mut cursor = 0usize;
    for _ in 0..n_cases {
        let mut data = Vec::with_capacity(n_ens);
        for _ in 0..n_ens {
            let mut member = Vec::with_capacity(n_lead);
            for &t in lead_times.iter().take(n_lead) {
                let chunk = &payload[cursor..cursor + state_len];
                cursor += state_len;
                let values =
                    Array3::from_shape_vec((dims[3], dims[4], dims[5]), chunk.to_vec())
                        .expect("validated dims");
                member.push(
                    GridState::new(grid.clone(), values, t).map_err(HarnessError::from)?,
                );
            }
            data.push(member);
        }
        cases.push(
            EnsembleForecast::new(lead_times.clone(), data, provenance.clone())
                .map_err(HarnessError::from)?,
        );
    }
    Ok((cases, init_times, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{LinearGaussParams, ToySystemKind};
    use tempfile::TempDir;

    fn system() -> ToySystemSpec {
        ToySystemSpec {
            kind: ToySystemKind::LinearGauss(LinearGaussParams::default()),
            height: 2,
            width: 8,
            n_vars: 1,
            base_seed: 3,
            with_static_field: true,
            uv_pair: false,
        }
    }

    #[test]
    fn generation_is_deterministic_bytewise() {
        let dir = TempDir::new().unwrap();
        let a = generate_dataset(
            &system(),
            400,
            SplitFractions::default(),
            30,
            &dir.path().join("a"),
            None,
        )
        .unwrap();
        let b = generate_dataset(
            &system(),
            400,
            SplitFractions::default(),
            30,
            &dir.path().join("b"),
            None,
        )
        .unwrap();
        for (x, y) in [(&a.train, &b.train), (&a.val, &b.val), (&a.test, &b.test)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn too_short_for_margins_rejected() {
        let dir = TempDir::new().unwrap();
        let err = generate_dataset(
            &system(),
            100,
            SplitFractions::default(),
            30,
            dir.path(),
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn split_ranges_are_contiguous_and_disjoint() {
        let dir = TempDir::new().unwrap();
        let files = generate_dataset(
            &system(),
            400,
            SplitFractions::default(),
            20,
            dir.path(),
            None,
        )
        .unwrap();
        let train = Dataset::load(&files.train).unwrap();
        let val = Dataset::load(&files.val).unwrap();
        let test = Dataset::load(&files.test).unwrap();
        assert_eq!(train.times.start_hour, 0.0);
        let train_end = train.times.hour_at(train.n_states() - 1);
        assert_eq!(val.times.start_hour, train_end + 1.0);
        let val_end = val.times.hour_at(val.n_states() - 1);
        assert_eq!(test.times.start_hour, val_end + 1.0);
        assert_eq!(
            train.n_states() + val.n_states() + test.n_states(),
            401
        );
        // Standardization stats identical across splits (frozen from train).
        assert_eq!(*train.grid, *val.grid);
        assert_eq!(*train.grid, *test.grid);
    }

    #[test]
    fn usable_inits_respect_margins() {
        let dir = TempDir::new().unwrap();
        let files = generate_dataset(
            &system(),
            400,
            SplitFractions::default(),
            24,
            dir.path(),
            None,
        )
        .unwrap();
        let test = Dataset::load(&files.test).unwrap();
        let inits = test.usable_inits(24.0, 24.0, 1);
        assert!(!inits.is_empty());
        for &i in &inits {
            // Window reaches back 24 h and horizon forward 24 h, both
            // resolvable inside the split.
            assert!(test.window_at(i, &[0.0, -24.0]).is_ok());
            assert!(test.truth_at(i, &[24.0]).is_ok());
        }
        // The first state cannot host a 24 h window.
        assert!(test.window_at(0, &[0.0, -24.0]).is_err());
    }

    #[test]
    fn training_source_serves_consistent_examples() {
        use cef_core::train::ExampleSource;
        let dir = TempDir::new().unwrap();
        let files = generate_dataset(
            &system(),
            400,
            SplitFractions::default(),
            24,
            dir.path(),
            None,
        )
        .unwrap();
        let data = Arc::new(Dataset::load(&files.train).unwrap());
        let source = DatasetSource::new(data.clone(), vec![0.0, -6.0], 24.0).unwrap();
        assert!(source.n_windows() > 200);
        let ex = source.example(10, 12.0).unwrap();
        assert_eq!(ex.lead_time, 12.0);
        assert_eq!(ex.window.offsets(), &[0.0, -6.0]);
        // The target is the dataset state 12 h after the window anchor.
        let ex2 = source.example(10, 12.0).unwrap();
        assert!(ex
            .target
            .values
            .iter()
            .zip(ex2.target.values.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn forecast_round_trip() {
        use cef_core::grid::AlgorithmId;
        let dir = TempDir::new().unwrap();
        let spec = Arc::new(cef_core::grid::GridSpec::uniform(2, 3, 1));
        let mk_state = |c: f64, t: f64| {
            GridState::new(spec.clone(), Array3::from_elem((1, 2, 3), c), t).unwrap()
        };
        let prov = Provenance {
            algorithm: AlgorithmId::Continuous,
            master_seed: 5,
            rho: None,
            schedule_hash: 42,
            extrapolated: false,
        };
        let mk_case = |base: f64| {
            EnsembleForecast::new(
                vec![6.0, 12.0],
                vec![
                    vec![mk_state(base, 6.0), mk_state(base + 0.5, 12.0)],
                    vec![mk_state(base + 1.0, 6.0), mk_state(base + 1.5, 12.0)],
                ],
                prov.clone(),
            )
            .unwrap()
        };
        let cases = vec![mk_case(0.0), mk_case(10.0)];
        let path = dir.path().join("fc.cef");
        write_forecast(&path, &cases, &[100.0, 101.0], Some("abcd".into())).unwrap();
        let (back, init_times, header) = read_forecast(&path).unwrap();
        assert_eq!(init_times, vec![100.0, 101.0]);
        assert_eq!(header.config_hash.as_deref(), Some("abcd"));
        assert_eq!(back.len(), 2);
        for (a, b) in cases.iter().zip(&back) {
            assert!(a.bit_equal(b));
        }
        // Mismatched cases rejected.
        let bad = vec![mk_case(0.0)];
        assert!(write_forecast(&path, &bad, &[1.0, 2.0], None).is_err());
    }
}
