//! Trajectory aggregation into per-region 15-minute flow counts, sliding
//! sample windows, and input normalisation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{GeoRef, RegionLabelMap};
use crate::tensor::Tensor;

pub const SLOT_SECONDS: i64 = 900;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Inflow,
    Outflow,
}

impl FlowDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowDirection::Inflow => "inflow",
            FlowDirection::Outflow => "outflow",
        }
    }
}

impl std::str::FromStr for FlowDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inflow" => Ok(FlowDirection::Inflow),
            "outflow" => Ok(FlowDirection::Outflow),
            other => Err(Error::invalid(format!("unknown flow direction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: String,
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
}

/// Non-negative counts per region and slot (one traffic channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTensor {
    n_regions: usize,
    t_total: usize,
    start_time: i64,
    direction: FlowDirection,
    /// Row-major `[n_regions, t_total]`.
    values: Vec<f64>,
}

/// Sidecar metadata stored next to a sparse flow CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMeta {
    pub n_regions: usize,
    pub t_total: usize,
    pub start_time: i64,
    pub direction: FlowDirection,
}

impl FlowTensor {
    pub fn zeros(
        n_regions: usize,
        t_total: usize,
        start_time: i64,
        direction: FlowDirection,
    ) -> Result<Self> {
        if t_total == 0 {
            return Err(Error::invalid("flow tensor needs at least one slot"));
        }
        if start_time.rem_euclid(SLOT_SECONDS) != 0 {
            return Err(Error::invalid(format!(
                "start time {start_time} is not aligned to {SLOT_SECONDS} s"
            )));
        }
        Ok(FlowTensor {
            n_regions,
            t_total,
            start_time,
            direction,
            values: vec![0.0; n_regions * t_total],
        })
    }

    pub fn from_values(
        n_regions: usize,
        t_total: usize,
        start_time: i64,
        direction: FlowDirection,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut f = Self::zeros(n_regions, t_total, start_time, direction)?;
        if values.len() != n_regions * t_total {
            return Err(Error::invalid("flow values do not match dimensions"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("flow value {v} is not a non-negative count")));
        }
        f.values = values;
        Ok(f)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn start_time(&self) -> i64 {
        self.start_time
    }

    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, region: usize, slot: usize) -> f64 {
        self.values[region * self.t_total + slot]
    }

    pub fn set(&mut self, region: usize, slot: usize, value: f64) {
        self.values[region * self.t_total + slot] = value;
    }

    /// Sum over traffic channels; with one channel this is the value itself.
    pub fn region_slot_total(&self, region: usize, slot: usize) -> f64 {
        self.get(region, slot)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn meta(&self) -> FlowMeta {
        FlowMeta {
            n_regions: self.n_regions,
            t_total: self.t_total,
            start_time: self.start_time,
            direction: self.direction,
        }
    }

    /// Weekday of slot 0, Monday = 0.
    pub fn start_weekday(&self) -> usize {
        // 1970-01-01 was a Thursday.
        (self.start_time.div_euclid(86_400) + 3).rem_euclid(7) as usize
    }

    /// Daily 15-minute slot of slot 0.
    pub fn start_daily_slot(&self) -> usize {
        (self.start_time.rem_euclid(86_400) / SLOT_SECONDS) as usize
    }

    /// Renumbers regions through `mapping` (`mapping[old] = new`, 0-based),
    /// summing the flows of regions that share a new index.
    pub fn remap(&self, mapping: &[usize], n_new: usize) -> Result<FlowTensor> {
        if mapping.len() != self.n_regions || mapping.iter().any(|&m| m >= n_new) {
            return Err(Error::invalid("region mapping does not fit the flow tensor"));
        }
        let mut out = FlowTensor::zeros(n_new, self.t_total, self.start_time, self.direction)?;
        for (old, &new) in mapping.iter().enumerate() {
            for s in 0..self.t_total {
                out.values[new * self.t_total + s] += self.get(old, s);
            }
        }
        Ok(out)
    }

    /// Sparse CSV `region_id,slot_index,value` (1-based region ids, zero
    /// entries omitted) plus the JSON sidecar.
    pub fn write(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(["region_id", "slot_index", "value"])?;
        for r in 0..self.n_regions {
            for s in 0..self.t_total {
                let v = self.get(r, s);
                if v != 0.0 {
                    w.write_record([(r + 1).to_string(), s.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        fs::write(meta_path, serde_json::to_string_pretty(&self.meta())? + "\n")?;
        Ok(())
    }

    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<FlowTensor> {
        let meta: FlowMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
        let mut f = FlowTensor::zeros(meta.n_regions, meta.t_total, meta.start_time, meta.direction)?;
        let bad = |message: String| Error::Format {
            path: csv_path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_path(csv_path)?;
        if r.headers()?.iter().collect::<Vec<_>>() != ["region_id", "slot_index", "value"] {
            return Err(bad("expected header region_id,slot_index,value".into()));
        }
        for row in r.deserialize::<(usize, usize, f64)>() {
            let (region, slot, value) = row?;
            if region == 0 || region > meta.n_regions || slot >= meta.t_total {
                return Err(bad(format!("entry ({region}, {slot}) out of range")));
            }
            if !(value.is_finite() && value >= 0.0) {
                return Err(bad(format!("negative or non-finite value {value}")));
            }
            f.set(region - 1, slot, value);
        }
        Ok(f)
    }
}

/// Region id at `(lon, lat)`, or `None` on roads and outside the map.
pub fn locate(labelmap: &RegionLabelMap, georef: &GeoRef, lon: f64, lat: f64) -> Option<u32> {
    let (x, y) = georef.pixel_of(labelmap.width(), labelmap.height(), lon, lat)?;
    match labelmap.label(x, y) {
        0 => None,
        l => Some(l),
    }
}

/// Counts region transitions between consecutive records of each vehicle,
/// attributed to the later record's slot. Leaving into a road or off-map
/// point counts one outflow; arriving from one counts one inflow.
/// Transitions whose slot falls outside `[start, end)` are dropped.
pub fn aggregate_flows<'a>(
    records: impl IntoIterator<Item = &'a TrajectoryRecord>,
    labelmap: &RegionLabelMap,
    georef: &GeoRef,
    start: i64,
    end: i64,
) -> Result<(FlowTensor, FlowTensor)> {
    if start.rem_euclid(SLOT_SECONDS) != 0 || end.rem_euclid(SLOT_SECONDS) != 0 || end <= start {
        return Err(Error::invalid(format!(
            "span [{start}, {end}) must be non-empty and aligned to {SLOT_SECONDS} s"
        )));
    }
    let n = labelmap.region_count();
    let t_total = ((end - start) / SLOT_SECONDS) as usize;
    let mut inflow = FlowTensor::zeros(n, t_total, start, FlowDirection::Inflow)?;
    let mut outflow = FlowTensor::zeros(n, t_total, start, FlowDirection::Outflow)?;
    let mut last: HashMap<&str, (i64, Option<u32>)> = HashMap::new();
    for rec in records {
        let here = locate(labelmap, georef, rec.lon, rec.lat);
        let prev = last.insert(rec.vehicle_id.as_str(), (rec.timestamp, here));
        let Some((t_prev, before)) = prev else { continue };
        if rec.timestamp < t_prev {
            return Err(Error::invalid(format!(
                "records for vehicle {} are not in timestamp order ({} after {})",
                rec.vehicle_id, rec.timestamp, t_prev
            )));
        }
        if before == here || rec.timestamp < start || rec.timestamp >= end {
            continue;
        }
        let slot = ((rec.timestamp - start) / SLOT_SECONDS) as usize;
        if let Some(a) = before {
            outflow.values[(a as usize - 1) * t_total + slot] += 1.0;
        }
        if let Some(b) = here {
            inflow.values[(b as usize - 1) * t_total + slot] += 1.0;
        }
    }
    Ok((inflow, outflow))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != ["vehicle_id", "timestamp", "lon", "lat"] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "expected header vehicle_id,timestamp,lon,lat".into(),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// One training example. `input` is `[N, T, 1]`, `target` is `[N, T', 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub input: Tensor,
    pub target: Tensor,
    /// Absolute index of the first input slot.
    pub slot_index: usize,
}

/// Windows at offsets `0, stride, 2*stride, ...` with `t_in` input slots
/// immediately followed by `t_out` target slots.
pub fn window_samples(
    flow: &FlowTensor,
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<SampleWindow>> {
    if stride == 0 || t_in == 0 || t_out == 0 {
        return Err(Error::invalid("window lengths and stride must be positive"));
    }
    if flow.t_total < t_in + t_out {
        return Err(Error::invalid(format!(
            "{} slots cannot hold a window of {} + {}",
            flow.t_total, t_in, t_out
        )));
    }
    let n = flow.n_regions;
    let count = (flow.t_total - t_in - t_out) / stride + 1;
    let slice = |start: usize, len: usize| {
        Tensor::from_fn(&[n, len, 1], |i| flow.get(i / len, start + i % len))
    };
    Ok((0..count)
        .map(|w| {
            let s = w * stride;
            SampleWindow {
                input: slice(s, t_in),
                target: slice(s + t_in, t_out),
                slot_index: s,
            }
        })
        .collect())
}

/// Scalar mean/std used to standardise model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

pub const STD_GUARD: f64 = 1e-8;

impl Normalization {
    /// Population statistics over every input value of `samples`; std falls
    /// back to 1 below [`STD_GUARD`].
    pub fn fit(samples: &[SampleWindow]) -> Result<Self> {
        let count: usize = samples.iter().map(|s| s.input.len()).sum();
        if count == 0 {
            return Err(Error::invalid("cannot fit normalisation on no samples"));
        }
        let mean = samples.iter().flat_map(|s| s.input.data()).sum::<f64>() / count as f64;
        let var = samples
            .iter()
            .flat_map(|s| s.input.data())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        Ok(Normalization {
            mean,
            std: if std < STD_GUARD { 1.0 } else { std },
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Standardises inputs in place of a copy; targets are left untouched.
pub fn normalize_inputs(samples: &[SampleWindow], norm: &Normalization) -> Vec<SampleWindow> {
    samples
        .iter()
        .map(|s| SampleWindow {
            input: s.input.map(|v| norm.apply(v)),
            target: s.target.clone(),
            slot_index: s.slot_index,
        })
        .collect()
}

pub fn denormalize_inputs(samples: &[SampleWindow], norm: &Normalization) -> Vec<SampleWindow> {
    samples
        .iter()
        .map(|s| SampleWindow {
            input: s.input.map(|v| norm.invert(v)),
            target: s.target.clone(),
            slot_index: s.slot_index,
        })
        .collect()
}
