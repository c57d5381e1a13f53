//! The self-describing container file: one format for datasets, forecasts
//! and parameter checkpoints.
//!
//! Layout: magic `CEF1` (4 bytes), u32 little-endian header byte length,
//! UTF-8 JSON header, then a contiguous little-endian float payload whose
//! length must match the header's declared dims exactly. Datasets and
//! forecasts carry f32 payloads; checkpoints carry f64 so parameters
//! round-trip bit-exactly. Writes are atomic (temp file + rename).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use cef_core::denoiser::ConvNetConfig;
use cef_core::grid::{GridSpec, Provenance};
use cef_core::train::LeadTimeScale;

use crate::error::{HarnessError, Result};
use crate::toy::ToySystemSpec;

const MAGIC: &[u8; 4] = b"CEF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Dataset,
    Forecast,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Hourly time grid of a dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Absolute hour of the first state in this split.
    pub start_hour: f64,
    pub stride_hours: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn hour_at(&self, index: usize) -> f64 {
        self.start_hour + self.stride_hours * index as f64
    }

    /// Index of an absolute hour, when it lies exactly on the grid.
    pub fn index_of(&self, hour: f64) -> Option<usize> {
        let raw = (hour - self.start_hour) / self.stride_hours;
        let idx = raw.round();
        if (raw - idx).abs() < 1e-9 && idx >= 0.0 && (idx as usize) < self.count {
            Some(idx as usize)
        } else {
            None
        }
    }
}

/// The JSON header. Sections are optional per kind; unknown keys are
/// rejected on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub kind: ContainerKind,
    pub version: u32,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub dim_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times: Option<TimeGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<ToySystemSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lead_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ConvNetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trained_lead_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lead_time_scales: Option<LeadTimeScale>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl ContainerHeader {
    pub fn new(kind: ContainerKind, dtype: Dtype, dims: Vec<usize>, dim_names: Vec<String>) -> Self {
        ContainerHeader {
            kind,
            version: 1,
            dtype,
            dims,
            dim_names,
            grid: None,
            times: None,
            split: None,
            system: None,
            lead_times: None,
            init_times: None,
            provenance: None,
            arch: None,
            trained_lead_times: None,
            lead_time_scales: None,
            base_seed: None,
            config_hash: None,
        }
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Serialize and write atomically: payload values are cast to the declared
/// dtype; the temp file is renamed into place only after a full write.
pub fn write_container(path: &Path, header: &ContainerHeader, payload: &[f64]) -> Result<()> {
    if payload.len() != header.element_count() {
        return Err(HarnessError::validation(format!(
            "payload has {} elements, dims {:?} declare {}",
            payload.len(),
            header.dims,
            header.element_count()
        )));
    }
    let header_json = serde_json::to_vec(header)?;
    let mut bytes =
        Vec::with_capacity(8 + header_json.len() + payload.len() * header.dtype.byte_size());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    match header.dtype {
        Dtype::F32 => {
            for &v in payload {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in payload {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read and validate a container. f32 payloads are upcast to f64 (exact).
pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(HarnessError::validation(format!(
            "{}: not a CEF1 container",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(HarnessError::validation(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    let payload_bytes = &bytes[8 + header_len..];
    let expect = header.element_count() * header.dtype.byte_size();
    if payload_bytes.len() != expect {
        return Err(HarnessError::validation(format!(
            "{}: payload is {} bytes, dims declare {}",
            path.display(),
            payload_bytes.len(),
            expect
        )));
    }
    let payload = match header.dtype {
        Dtype::F32 => payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn header(dims: Vec<usize>, dtype: Dtype) -> ContainerHeader {
        ContainerHeader::new(
            ContainerKind::Dataset,
            dtype,
            dims,
            vec!["time".into(), "variable".into()],
        )
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.cef");
        let payload: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37 - 1.0) as f32 as f64).collect();
        let h = header(vec![3, 4], Dtype::F32);
        write_container(&path, &h, &payload).unwrap();
        let (h2, p2) = read_container(&path).unwrap();
        assert_eq!(h, h2);
        assert!(p2.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()));
        // Re-writing the read data reproduces the file byte for byte.
        let path2 = dir.path().join("b.cef");
        write_container(&path2, &h2, &p2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn f64_checkpoint_payload_round_trips_exactly() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ckpt.cef");
        let payload: Vec<f64> = (0..9).map(|i| (i as f64).sin() * 1e-7 + 0.1).collect();
        let mut h = header(vec![9], Dtype::F64);
        h.kind = ContainerKind::Checkpoint;
        write_container(&path, &h, &payload).unwrap();
        let (_, p2) = read_container(&path).unwrap();
        assert!(p2.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tampered_payload_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.cef");
        let payload = vec![1.0; 6];
        write_container(&path, &header(vec![2, 3], Dtype::F32), &payload).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        assert!(read_container(&path).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.cef");
        fs::write(&path, b"NOPE\0\0\0\0").unwrap();
        assert!(read_container(&path).is_err());
    }

    #[test]
    fn dims_payload_mismatch_rejected_on_write() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.cef");
        assert!(write_container(&path, &header(vec![2, 3], Dtype::F32), &[0.0; 5]).is_err());
    }

    #[test]
    fn unknown_header_keys_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.cef");
        write_container(&path, &header(vec![1], Dtype::F32), &[0.5]).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut json: serde_json::Value =
            serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        json["surprise"] = serde_json::json!(1);
        let new_header = serde_json::to_vec(&json).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[8 + header_len..]);
        fs::write(&path, &out).unwrap();
        assert!(read_container(&path).is_err());
    }

    #[test]
    fn time_grid_indexing() {
        let tg = TimeGrid {
            start_hour: 100.0,
            stride_hours: 1.0,
            count: 50,
        };
        assert_eq!(tg.index_of(100.0), Some(0));
        assert_eq!(tg.index_of(149.0), Some(49));
        assert_eq!(tg.index_of(150.0), None);
        assert_eq!(tg.index_of(100.5), None);
        assert_eq!(tg.hour_at(7), 107.0);
    }
}
