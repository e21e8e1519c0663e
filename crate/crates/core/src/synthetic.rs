//! Synthetic cities whose traffic is driven by region function.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::dataset::DataPaths;
use crate::error::{Error, Result};
use crate::flow::{FlowDirection, FlowTensor};
use crate::formats;
use crate::partition::{self, GeoRef, RegionGraph, RegionLabelMap, RoadRaster};
use crate::poi::PoiCountMatrix;
use crate::temporal::{slot_ids, DAILY_SLOTS};
use crate::tensor::Tensor;

/// Monday 2018-10-01 00:00 UTC.
pub const START_TIME: i64 = 1_538_352_000;
pub const POI_DRAWS: usize = 200;
pub const OWN_WEIGHT: f64 = 0.7;
pub const OTHER_WEIGHT: f64 = 0.15;
pub const CELL_MIN: usize = 8;
pub const CELL_MAX: usize = 16;
pub const BINARIZE_CUTOFF: u8 = 128;
pub const DILATE_RADIUS: usize = 1;
/// Adjacency gap across a dilated one-pixel road.
pub const ADJACENCY_GAP: usize = 2 * DILATE_RADIUS + 1;
pub const SCALE_RANGE: (f64, f64) = (20.0, 120.0);
pub const GEOREF: GeoRef = GeoRef {
    lon_min: 104.0,
    lat_min: 30.6,
    lon_max: 104.2,
    lat_max: 30.8,
};

/// Second stream of the seeded generator, reserved for traffic draws.
const TRAFFIC_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Residential,
    Office,
    Leisure,
}

/// One daily bump: `amplitude * exp(-dist^2 / (2 width^2))`, with `dist` the
/// circular distance in slots from `center`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub amplitude: f64,
    pub width: f64,
}

const fn bump(center: f64, amplitude: f64, width: f64) -> Bump {
    Bump { center, amplitude, width }
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Residential, Archetype::Office, Archetype::Leisure];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Daily profile: residential peaks in the morning, office twice a day,
    /// leisure in the evening.
    pub fn bumps(self) -> [Bump; 2] {
        match self {
            Archetype::Residential => [bump(32.0, 1.0, 6.0), bump(74.0, 0.4, 8.0)],
            Archetype::Office => [bump(36.0, 0.9, 5.0), bump(72.0, 0.9, 5.0)],
            Archetype::Leisure => [bump(60.0, 0.5, 10.0), bump(80.0, 1.0, 7.0)],
        }
    }

    /// Saturday and Sunday multiplier; weekdays are 1.
    pub fn weekend_factor(self) -> f64 {
        match self {
            Archetype::Residential => 0.6,
            Archetype::Office => 0.7,
            Archetype::Leisure => 1.3,
        }
    }

    pub fn basis(self, daily_id: usize) -> f64 {
        let s = daily_id as f64;
        let period = DAILY_SLOTS as f64;
        self.bumps()
            .iter()
            .map(|b| {
                let raw = (s - b.center).rem_euclid(period);
                let dist = raw.min(period - raw);
                b.amplitude * (-dist * dist / (2.0 * b.width * b.width)).exp()
            })
            .sum()
    }

    pub fn day_factor(self, weekly_id: usize) -> f64 {
        if weekly_id >= 5 {
            self.weekend_factor()
        } else {
            1.0
        }
    }

    /// Categories `[f C / 3, (f + 1) C / 3)` belong to archetype `f`.
    pub fn categories(self, c: usize) -> std::ops::Range<usize> {
        let f = self.index();
        f * c / 3..(f + 1) * c / 3
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCity {
    pub n_regions: usize,
    pub n_categories: usize,
    pub seed: u64,
    pub archetypes: Vec<Archetype>,
    /// Function weights `[N, 3]`, rows on the simplex.
    pub weights: Tensor,
    pub poi: PoiCountMatrix,
    pub raster: RoadRaster,
    pub labels: RegionLabelMap,
    pub graph: RegionGraph,
}

/// Largest `r <= sqrt(n)` dividing `n`, and `n / r`.
fn grid_shape(n: usize) -> (usize, usize) {
    let r = (1..=n).take_while(|r| r * r <= n).filter(|r| n % r == 0).last().unwrap_or(1);
    (r, n / r)
}

/// White blocks of random size separated by one-pixel black roads.
fn road_grid(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<RoadRaster> {
    let widths: Vec<usize> = (0..cols).map(|_| rng.random_range(CELL_MIN..=CELL_MAX)).collect();
    let heights: Vec<usize> = (0..rows).map(|_| rng.random_range(CELL_MIN..=CELL_MAX)).collect();
    let w = widths.iter().sum::<usize>() + cols - 1;
    let h = heights.iter().sum::<usize>() + rows - 1;
    let boundaries = |sizes: &[usize]| {
        let mut out = Vec::new();
        let mut at = 0;
        for s in &sizes[..sizes.len() - 1] {
            at += s;
            out.push(at);
            at += 1;
        }
        out
    };
    let (vx, hy) = (boundaries(&widths), boundaries(&heights));
    let mut pixels = vec![255u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if vx.contains(&x) || hy.contains(&y) {
                pixels[y * w + x] = 0;
            }
        }
    }
    RoadRaster::new(w, h, pixels, GEOREF)
}

/// Region labels and adjacency of a raster through the standard pipeline.
pub fn partition_raster(raster: &RoadRaster) -> Result<(RegionLabelMap, RegionGraph)> {
    let mask = partition::binarize_roadmap(raster, BINARIZE_CUTOFF)?;
    let labels = partition::label_regions(&partition::dilate_roads(&mask, DILATE_RADIUS));
    let graph = partition::extract_adjacency(&labels, ADJACENCY_GAP);
    Ok((labels, graph))
}

pub fn generate_city(n: usize, c: usize, seed: u64) -> Result<SyntheticCity> {
    if n < 4 {
        return Err(Error::invalid(format!("a synthetic city needs at least 4 regions, got {n}")));
    }
    if c < 3 {
        return Err(Error::invalid(format!("need at least 3 POI categories, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = grid_shape(n);
    let raster = road_grid(rows, cols, &mut rng)?;
    let (labels, graph) = partition_raster(&raster)?;
    if labels.region_count() != n {
        return Err(Error::invalid(format!(
            "road grid produced {} regions instead of {n}",
            labels.region_count()
        )));
    }

    let mut archetypes: Vec<Archetype> = (0..n).map(|i| Archetype::ALL[i % 3]).collect();
    archetypes.shuffle(&mut rng);
    let weights = Tensor::from_fn(&[n, 3], |k| {
        if archetypes[k / 3].index() == k % 3 {
            OWN_WEIGHT
        } else {
            OTHER_WEIGHT
        }
    });

    let mut counts = vec![0.0; n * c];
    for i in 0..n {
        let mut probs = vec![0.0; c];
        for f in Archetype::ALL {
            let block = f.categories(c);
            let share = weights.at(&[i, f.index()]) / block.len() as f64;
            for k in block {
                probs[k] = share;
            }
        }
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
        for _ in 0..POI_DRAWS {
            counts[i * c + dist.sample(&mut rng)] += 1.0;
        }
    }
    let names = (0..c).map(|k| format!("poi_{k:02}")).collect();
    Ok(SyntheticCity {
        n_regions: n,
        n_categories: c,
        seed,
        archetypes,
        weights,
        poi: PoiCountMatrix::new(counts, names)?,
        raster,
        labels,
        graph,
    })
}

#[derive(Clone, Debug)]
pub struct Traffic {
    pub inflow: FlowTensor,
    pub outflow: FlowTensor,
    /// Poisson rates `[N, T]` both directions were drawn from.
    pub rates: Tensor,
    pub scales: Vec<f64>,
}

/// Expected flow of every region and slot.
pub fn traffic_rates(city: &SyntheticCity, scales: &[f64], t_total: usize) -> Tensor {
    let start_weekday = 0;
    Tensor::from_fn(&[city.n_regions, t_total], |k| {
        let (i, s) = (k / t_total, k % t_total);
        let id = slot_ids(s, start_weekday, 0);
        let mix: f64 = Archetype::ALL
            .iter()
            .map(|f| city.weights.at(&[i, f.index()]) * f.basis(id.daily_id) * f.day_factor(id.weekly_id))
            .sum();
        scales[i] * mix
    })
}

pub fn generate_traffic(city: &SyntheticCity, days: usize, seed: u64) -> Result<Traffic> {
    if days < 2 {
        return Err(Error::invalid(format!("need at least 2 days of traffic, got {days}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAFFIC_STREAM);
    let (lo, hi) = SCALE_RANGE;
    let scales: Vec<f64> = (0..city.n_regions)
        .map(|_| (rng.random_range(lo.ln()..hi.ln())).exp())
        .collect();
    let t_total = days * DAILY_SLOTS;
    let rates = traffic_rates(city, &scales, t_total);
    let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        rates
            .data()
            .iter()
            .map(|&lam| {
                if lam <= 0.0 {
                    return Ok(0.0);
                }
                let p = Poisson::new(lam).map_err(|e| Error::invalid(e.to_string()))?;
                Ok(p.sample(rng))
            })
            .collect()
    };
    let inflow = draw(&mut rng)?;
    let outflow = draw(&mut rng)?;
    let n = city.n_regions;
    Ok(Traffic {
        inflow: FlowTensor::from_values(n, t_total, START_TIME, FlowDirection::Inflow, inflow)?,
        outflow: FlowTensor::from_values(n, t_total, START_TIME, FlowDirection::Outflow, outflow)?,
        rates,
        scales,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMetadata {
    pub n_regions: usize,
    pub n_categories: usize,
    pub days: usize,
    pub seed: u64,
    pub start_time: i64,
    pub archetypes: Vec<Archetype>,
    pub scales: Vec<f64>,
}

/// Writes a complete data directory for the city and its traffic.
pub fn write_dataset(dir: &Path, city: &SyntheticCity, traffic: &Traffic) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = DataPaths::new(dir);
    formats::write_raster(&p.raster(), &p.georef(), &city.raster)?;
    formats::write_labels(&p.labels(), &city.labels)?;
    formats::write_edges(&p.edges(), &city.graph)?;
    formats::write_poi(&p.poi(), &city.poi)?;
    for f in [&traffic.inflow, &traffic.outflow] {
        f.write(&p.flow_csv(f.direction()), &p.flow_meta(f.direction()))?;
    }
    let meta = SyntheticMetadata {
        n_regions: city.n_regions,
        n_categories: city.n_categories,
        days: traffic.inflow.t_total() / DAILY_SLOTS,
        seed: city.seed,
        start_time: START_TIME,
        archetypes: city.archetypes.clone(),
        scales: traffic.scales.clone(),
    };
    fs::write(p.metadata(), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// City and traffic from one seed, written to `dir`.
pub fn synthesize(dir: &Path, n: usize, c: usize, days: usize, seed: u64) -> Result<(SyntheticCity, Traffic)> {
    let city = generate_city(n, c, seed)?;
    let traffic = generate_traffic(&city, days, seed)?;
    write_dataset(dir, &city, &traffic)?;
    Ok((city, traffic))
}
