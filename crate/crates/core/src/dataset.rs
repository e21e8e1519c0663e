//! Data directories, chronological splits and batch assembly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowDirection, FlowTensor, Normalization, SampleWindow};
use crate::formats;
use crate::model::Batch;
use crate::partition::RegionGraph;
use crate::poi::PoiCountMatrix;
use crate::temporal::{build_embedding, window_ids, EMBED_WIDTH};
use crate::tensor::Tensor;
use crate::config::Split;

/// Input and forecast length, in 15-minute slots.
pub const WINDOW: usize = 4;

/// File layout of a prepared data directory.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub root: PathBuf,
}

impl DataPaths {
    pub fn new(root: &Path) -> Self {
        DataPaths { root: root.to_path_buf() }
    }

    pub fn raster(&self) -> PathBuf {
        self.root.join("raster.pgm")
    }

    pub fn georef(&self) -> PathBuf {
        self.root.join("georef.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.pgm")
    }

    pub fn edges(&self) -> PathBuf {
        self.root.join("edges.csv")
    }

    pub fn poi(&self) -> PathBuf {
        self.root.join("poi.csv")
    }

    pub fn flow_csv(&self, dir: FlowDirection) -> PathBuf {
        self.root.join(format!("{}.csv", dir.as_str()))
    }

    pub fn flow_meta(&self, dir: FlowDirection) -> PathBuf {
        self.root.join(format!("{}.json", dir.as_str()))
    }

    pub fn metadata(&self) -> PathBuf {
        self.root.join("metadata.json")
    }
}

/// Everything training needs from a data directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub flow: FlowTensor,
    pub poi: PoiCountMatrix,
    pub graph: RegionGraph,
}

impl Dataset {
    pub fn load(root: &Path, direction: FlowDirection) -> Result<Self> {
        let paths = DataPaths::new(root);
        let flow = FlowTensor::read(&paths.flow_csv(direction), &paths.flow_meta(direction))?;
        let poi = formats::read_poi(&paths.poi())?;
        let graph = formats::read_edges(&paths.edges(), flow.n_regions())?;
        let ds = Dataset { flow, poi, graph };
        ds.check()?;
        Ok(ds)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.flow.n_regions();
        if self.poi.n_regions() != n || self.graph.region_count() != n {
            return Err(Error::invalid(format!(
                "region counts disagree: flow {n}, POI {}, graph {}",
                self.poi.n_regions(),
                self.graph.region_count()
            )));
        }
        Ok(())
    }

    pub fn n_regions(&self) -> usize {
        self.flow.n_regions()
    }

    /// Chronological split of the windows at `stride`.
    pub fn split(&self, split: &Split, stride: usize) -> Result<Splits> {
        let windows = crate::flow::window_samples(&self.flow, WINDOW, WINDOW, stride)?;
        chronological_split(windows, split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SampleWindow>,
    pub val: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[SampleWindow] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// First `floor(train * n)` windows train, the next `floor(val * n)`
/// validate, the rest test. Every split must be non-empty when its fraction
/// is positive.
pub fn chronological_split(windows: Vec<SampleWindow>, split: &Split) -> Result<Splits> {
    let n = windows.len();
    let n_train = (split.train * n as f64).floor() as usize;
    let n_val = (split.val * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    for (frac, count, name) in [(split.train, n_train, "train"), (split.val, n_val, "val"), (split.test, n_test, "test")] {
        if frac > 0.0 && count == 0 {
            return Err(Error::invalid(format!("{n} windows leave the {name} split empty")));
        }
    }
    let mut it = windows.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Splits { train, val, test })
}

/// Calendar position of a series' slot 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Calendar {
    pub start_weekday: usize,
    pub start_daily_slot: usize,
}

impl Calendar {
    pub fn of(flow: &FlowTensor) -> Self {
        Calendar {
            start_weekday: flow.start_weekday(),
            start_daily_slot: flow.start_daily_slot(),
        }
    }
}

/// Region-major batch from `samples`: inputs normalised, targets raw, and the
/// calendar rows of each window's `T + T'` slots.
pub fn make_batch(samples: &[&SampleWindow], norm: &Normalization, cal: Calendar) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let n = first.input.shape()[0];
    let t_in = first.input.shape()[1];
    let t_out = first.target.shape()[1];
    let dim = first.input.shape()[2];
    let b = samples.len();
    let mut inputs = Tensor::zeros(&[n, b, t_in, dim]);
    let mut targets = Tensor::zeros(&[n, b, t_out, dim]);
    let mut embedding = Vec::with_capacity(b * (t_in + t_out) * EMBED_WIDTH);
    for (j, s) in samples.iter().enumerate() {
        if s.input.shape() != first.input.shape() || s.target.shape() != first.target.shape() {
            return Err(Error::shape("samples in one batch differ in shape"));
        }
        let (xi, yi) = (s.input.data(), s.target.data());
        let xo = inputs.data_mut();
        for r in 0..n {
            let src = r * t_in * dim;
            let dst = (r * b + j) * t_in * dim;
            for k in 0..t_in * dim {
                xo[dst + k] = norm.apply(xi[src + k]);
            }
        }
        let yo = targets.data_mut();
        for r in 0..n {
            let src = r * t_out * dim;
            let dst = (r * b + j) * t_out * dim;
            yo[dst..dst + t_out * dim].copy_from_slice(&yi[src..src + t_out * dim]);
        }
        let ids = window_ids(s.slot_index, t_in + t_out, cal.start_weekday, cal.start_daily_slot);
        embedding.extend_from_slice(build_embedding(&ids)?.data());
    }
    Ok(Batch {
        inputs,
        targets,
        embedding: Tensor::new(&[b, t_in + t_out, EMBED_WIDTH], embedding)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::window_samples;

    fn toy_flow(n: usize, t: usize) -> FlowTensor {
        let values = (0..n * t).map(|i| i as f64).collect();
        FlowTensor::from_values(n, t, 1_538_352_000, FlowDirection::Inflow, values).unwrap()
    }

    #[test]
    fn split_is_chronological_and_covers_all() {
        let w = window_samples(&toy_flow(2, 107), 4, 4, 1).unwrap();
        assert_eq!(w.len(), 100);
        let s = chronological_split(w, &Split::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert_eq!(s.train.last().unwrap().slot_index + 1, s.val[0].slot_index);
        assert_eq!(s.val.last().unwrap().slot_index + 1, s.test[0].slot_index);
    }

    #[test]
    fn tiny_series_rejected() {
        let w = window_samples(&toy_flow(2, 10), 4, 4, 1).unwrap();
        assert!(chronological_split(w, &Split::default()).is_err());
    }

    #[test]
    fn batch_layout_and_raw_targets() {
        let flow = toy_flow(3, 20);
        let w = window_samples(&flow, 4, 4, 1).unwrap();
        let norm = Normalization { mean: 10.0, std: 4.0 };
        let refs: Vec<&SampleWindow> = vec![&w[2], &w[5]];
        let b = make_batch(&refs, &norm, Calendar::of(&flow)).unwrap();
        assert_eq!(b.inputs.shape(), &[3, 2, 4, 1]);
        assert_eq!(b.embedding.shape(), &[2, 8, EMBED_WIDTH]);
        for r in 0..3 {
            for (j, s) in [2usize, 5].iter().enumerate() {
                for t in 0..4 {
                    assert_eq!(b.inputs.at(&[r, j, t, 0]), norm.apply(flow.get(r, s + t)));
                    assert_eq!(b.targets.at(&[r, j, t, 0]), flow.get(r, s + 4 + t));
                }
            }
        }
        // Monday 00:00 start: the second window's first slot is daily id 5.
        assert_eq!(b.embedding.at(&[1, 0, 5]), 1.0);
        assert_eq!(b.embedding.at(&[1, 0, 96]), 1.0);
    }
}
