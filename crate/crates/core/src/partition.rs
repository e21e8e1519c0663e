//! Irregular region partitioning of a rasterised road map.
//!
//! The pipeline is: threshold the raster into a road mask, thicken roads
//! with a square dilation, label the free pixels into 4-connected regions,
//! optionally merge low-traffic regions into their neighbours, and finally
//! read off which regions face each other across a road.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTensor;

/// Linear mapping between pixel coordinates and lon/lat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoRef {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl GeoRef {
    pub fn validate(&self) -> Result<()> {
        if !(self.lon_min < self.lon_max && self.lat_min < self.lat_max) {
            return Err(Error::invalid(format!("degenerate georeference {self:?}")));
        }
        Ok(())
    }

    /// Pixel containing `(lon, lat)`, where pixel `(x, y)` covers the cell
    /// whose centre is at `lon_min + (x + 0.5) * dx` and row 0 is the
    /// northern edge.
    pub fn pixel_of(&self, width: usize, height: usize, lon: f64, lat: f64) -> Option<(usize, usize)> {
        if !(lon.is_finite() && lat.is_finite()) {
            return None;
        }
        let fx = (lon - self.lon_min) / (self.lon_max - self.lon_min) * width as f64;
        let fy = (self.lat_max - lat) / (self.lat_max - self.lat_min) * height as f64;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (x, y) = (fx.floor() as usize, fy.floor() as usize);
        (x < width && y < height).then_some((x, y))
    }

    /// Geographic centre of pixel `(x, y)`.
    pub fn pixel_center(&self, width: usize, height: usize, x: usize, y: usize) -> (f64, f64) {
        let lon = self.lon_min + (x as f64 + 0.5) / width as f64 * (self.lon_max - self.lon_min);
        let lat = self.lat_max - (y as f64 + 0.5) / height as f64 * (self.lat_max - self.lat_min);
        (lon, lat)
    }
}

/// 8-bit grayscale road map; dark pixels are road ink.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadRaster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    georef: GeoRef,
}

impl RoadRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, georef: GeoRef) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid(format!(
                "raster must be at least 2x2, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "raster {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        georef.validate()?;
        Ok(RoadRaster {
            width,
            height,
            pixels,
            georef,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn georef(&self) -> GeoRef {
        self.georef
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryRoadMask {
    width: usize,
    height: usize,
    road: Vec<bool>,
}

impl BinaryRoadMask {
    pub fn new(width: usize, height: usize, road: Vec<bool>) -> Result<Self> {
        if road.len() != width * height {
            return Err(Error::invalid("mask length does not match dimensions"));
        }
        Ok(BinaryRoadMask { width, height, road })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_road(&self, x: usize, y: usize) -> bool {
        self.road[y * self.width + x]
    }

    pub fn road(&self) -> &[bool] {
        &self.road
    }

    pub fn road_count(&self) -> usize {
        self.road.iter().filter(|r| **r).count()
    }
}

/// Per-pixel region ids: 0 is road/background, `1..=region_count` are regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    region_count: usize,
}

impl RegionLabelMap {
    /// Builds a label map, checking that ids are contiguous `1..=N`.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid("label map length does not match dimensions"));
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&l| !seen[l]) {
            return Err(Error::invalid(format!("label {missing} missing; ids must be contiguous")));
        }
        Ok(RegionLabelMap {
            width,
            height,
            labels,
            region_count: max,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per region, indexed by `id - 1`.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Treats every labelled pixel as free and every 0 pixel as road.
    pub fn to_mask(&self) -> BinaryRoadMask {
        BinaryRoadMask {
            width: self.width,
            height: self.height,
            road: self.labels.iter().map(|&l| l == 0).collect(),
        }
    }
}

/// Undirected region adjacency over region ids `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionGraph {
    n: usize,
    edges: BTreeSet<(u32, u32)>,
}

impl RegionGraph {
    pub fn new(n: usize) -> Self {
        RegionGraph {
            n,
            edges: BTreeSet::new(),
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut g = RegionGraph::new(n);
        for (a, b) in edges {
            g.add_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn add_edge(&mut self, a: u32, b: u32) -> Result<()> {
        if a == b || a == 0 || b == 0 || a as usize > self.n || b as usize > self.n {
            return Err(Error::invalid(format!(
                "edge ({a}, {b}) invalid for {} regions",
                self.n
            )));
        }
        self.edges.insert((a.min(b), a.max(b)));
        Ok(())
    }

    pub fn region_count(&self) -> usize {
        self.n
    }

    /// Edges as `(src, dst)` with `src < dst`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, a: u32, b: u32) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Dense symmetric 0/1 matrix with zero diagonal, row `i` for id `i + 1`.
    pub fn adjacency_matrix(&self) -> crate::Tensor {
        let mut a = crate::Tensor::zeros(&[self.n, self.n]);
        for &(i, j) in &self.edges {
            let (i, j) = (i as usize - 1, j as usize - 1);
            a.set(&[i, j], 1.0);
            a.set(&[j, i], 1.0);
        }
        a
    }
}

/// Pixel is road iff its intensity is at most `cutoff`.
pub fn binarize_roadmap(raster: &RoadRaster, cutoff: u8) -> Result<BinaryRoadMask> {
    if raster.pixels.is_empty() {
        return Err(Error::invalid("empty raster"));
    }
    Ok(BinaryRoadMask {
        width: raster.width,
        height: raster.height,
        road: raster.pixels.iter().map(|&p| p <= cutoff).collect(),
    })
}

/// Square (Chebyshev) dilation of the road set; separable row/column passes.
pub fn dilate_roads(mask: &BinaryRoadMask, radius: usize) -> BinaryRoadMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut horizontal = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            horizontal[y * w + x] = (lo..=hi).any(|xx| mask.road[y * w + xx]);
        }
    }
    let mut road = vec![false; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            road[y * w + x] = (lo..=hi).any(|yy| horizontal[yy * w + x]);
        }
    }
    BinaryRoadMask {
        width: w,
        height: h,
        road,
    }
}

/// 4-connected component labelling of free pixels. Components are numbered
/// in raster-scan order of their first pixel.
pub fn label_regions(mask: &BinaryRoadMask) -> RegionLabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.road[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if !mask.road[q] && labels[q] == 0 {
                    labels[q] = next;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    RegionLabelMap {
        width: w,
        height: h,
        labels,
        region_count: next as usize,
    }
}

/// A straight horizontal or vertical run from a pixel of one region to a
/// pixel of another, crossing only road pixels.
struct Crossing {
    a: u32,
    b: u32,
    from: usize,
    to: usize,
    step: usize,
}

/// Scans right and down from every labelled pixel, stopping at the first
/// labelled pixel within `gap` intervening road pixels. Each unordered pixel
/// pair is visited once.
fn crossings(labels: &[u32], width: usize, height: usize, gap: usize) -> Vec<Crossing> {
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let a = labels[p];
            if a == 0 {
                continue;
            }
            // (remaining cells in this direction, stride)
            for (room, step) in [(width - 1 - x, 1), (height - 1 - y, width)] {
                for s in 1..=(gap + 1).min(room) {
                    let q = p + s * step;
                    let b = labels[q];
                    if b == 0 {
                        continue;
                    }
                    if b != a {
                        out.push(Crossing {
                            a,
                            b,
                            from: p,
                            to: q,
                            step,
                        });
                    }
                    break;
                }
            }
        }
    }
    out
}

/// Shared boundary length per unordered region pair `(low, high)`.
pub fn boundary_lengths(labelmap: &RegionLabelMap, gap: usize) -> BTreeMap<(u32, u32), usize> {
    let mut lengths = BTreeMap::new();
    for c in crossings(&labelmap.labels, labelmap.width, labelmap.height, gap) {
        *lengths.entry((c.a.min(c.b), c.a.max(c.b))).or_insert(0) += 1;
    }
    lengths
}

/// Regions are adjacent iff a horizontal or vertical run of at most `gap`
/// road pixels separates a pixel of one from a pixel of the other.
pub fn extract_adjacency(labelmap: &RegionLabelMap, gap: usize) -> RegionGraph {
    let mut g = RegionGraph::new(labelmap.region_count);
    for (a, b) in boundary_lengths(labelmap, gap).into_keys() {
        g.edges.insert((a, b));
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeOptions {
    pub min_flow: f64,
    pub slot_fraction: f64,
    /// Road gap used to measure shared boundaries (see [`extract_adjacency`]).
    pub gap: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            min_flow: 10.0,
            slot_fraction: 0.75,
            gap: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeWarning {
    pub region: u32,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub labelmap: RegionLabelMap,
    /// `mapping[old_id - 1]` is the new id of each input region.
    pub mapping: Vec<u32>,
    pub warnings: Vec<MergeWarning>,
}

/// Merges regions whose inflow or outflow falls below `min_flow` in more
/// than `slot_fraction` of the slots into the neighbour with the longest
/// shared boundary (ties go to the lower id). The road pixels on that
/// boundary join the merged region so it stays connected. Regions are
/// processed lowest id first until none qualifies or one region is left;
/// the flows of a merged region are added to its target's. Labels are then
/// renumbered in raster-scan order.
pub fn merge_small_regions(
    labelmap: &RegionLabelMap,
    inflow: &FlowTensor,
    outflow: &FlowTensor,
    opts: MergeOptions,
) -> Result<MergeOutcome> {
    let n = labelmap.region_count;
    for f in [inflow, outflow] {
        if f.n_regions() != n {
            return Err(Error::invalid(format!(
                "flow tensor has {} regions, label map has {n}",
                f.n_regions()
            )));
        }
    }
    if inflow.t_total() != outflow.t_total() {
        return Err(Error::invalid("inflow and outflow cover different slot counts"));
    }
    let slots = inflow.t_total();
    let per_region = |f: &FlowTensor| -> Vec<Vec<f64>> {
        (0..n)
            .map(|r| (0..slots).map(|t| f.region_slot_total(r, t)).collect())
            .collect()
    };
    let mut ins = per_region(inflow);
    let mut outs = per_region(outflow);
    let qualifies = |i: &[f64], o: &[f64]| {
        let low = i
            .iter()
            .zip(o)
            .filter(|(a, b)| **a < opts.min_flow || **b < opts.min_flow)
            .count();
        low as f64 > opts.slot_fraction * slots as f64
    };

    let (w, h) = (labelmap.width, labelmap.height);
    let mut labels = labelmap.labels.clone();
    let mut alive: BTreeSet<u32> = (1..=n as u32).collect();
    let mut skipped: BTreeSet<u32> = BTreeSet::new();
    let mut redirect: Vec<u32> = (0..=n as u32).collect();
    let mut warnings = Vec::new();

    while alive.len() > 1 || (alive.len() == 1 && skipped.is_empty()) {
        let candidate = alive.iter().copied().find(|&r| {
            !skipped.contains(&r) && qualifies(&ins[r as usize - 1], &outs[r as usize - 1])
        });
        let Some(r) = candidate else { break };
        let cross = crossings(&labels, w, h, opts.gap);
        let mut lengths: BTreeMap<u32, usize> = BTreeMap::new();
        for c in cross.iter() {
            if c.a == r {
                *lengths.entry(c.b).or_insert(0) += 1;
            } else if c.b == r {
                *lengths.entry(c.a).or_insert(0) += 1;
            }
        }
        // Longest boundary, lowest id on ties (BTreeMap iterates ascending).
        let target = lengths
            .iter()
            .fold(None::<(u32, usize)>, |best, (&id, &len)| match best {
                Some((_, bl)) if bl >= len => best,
                _ => Some((id, len)),
            })
            .map(|(id, _)| id);
        let Some(t) = target else {
            warnings.push(MergeWarning {
                region: r,
                message: format!("region {r} has low flow but no neighbour to merge into"),
            });
            skipped.insert(r);
            if alive.len() == 1 {
                break;
            }
            continue;
        };
        for c in cross.iter().filter(|c| (c.a == r && c.b == t) || (c.a == t && c.b == r)) {
            let mut p = c.from + c.step;
            while p < c.to {
                labels[p] = t;
                p += c.step;
            }
        }
        for l in labels.iter_mut() {
            if *l == r {
                *l = t;
            }
        }
        let (ri, ti) = (r as usize - 1, t as usize - 1);
        for s in 0..slots {
            ins[ti][s] += ins[ri][s];
            outs[ti][s] += outs[ri][s];
        }
        for v in redirect.iter_mut() {
            if *v == r {
                *v = t;
            }
        }
        alive.remove(&r);
        if alive.len() == 1 {
            break;
        }
    }

    // Renumber in raster-scan order of first appearance.
    let mut renumber = vec![0u32; n + 1];
    let mut next = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let old = *l as usize;
        if renumber[old] == 0 {
            next += 1;
            renumber[old] = next;
        }
        *l = renumber[old];
    }
    let mapping = (1..=n).map(|old| renumber[redirect[old] as usize]).collect();
    for w in warnings.iter_mut() {
        w.region = renumber[w.region as usize];
    }
    Ok(MergeOutcome {
        labelmap: RegionLabelMap {
            width: w,
            height: h,
            labels,
            region_count: next as usize,
        },
        mapping,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowDirection, FlowTensor};

    fn georef() -> GeoRef {
        GeoRef {
            lon_min: 0.0,
            lat_min: 0.0,
            lon_max: 1.0,
            lat_max: 1.0,
        }
    }

    /// 31x31 white raster with black lines on rows/cols 10 and 20.
    pub(crate) fn grid_raster() -> RoadRaster {
        let mut px = vec![255u8; 31 * 31];
        for y in 0..31 {
            for x in 0..31 {
                if x == 10 || x == 20 || y == 10 || y == 20 {
                    px[y * 31 + x] = 0;
                }
            }
        }
        RoadRaster::new(31, 31, px, georef()).unwrap()
    }

    /// Straightforward recursive-free flood fill used as an oracle.
    fn flood_fill_count(mask: &BinaryRoadMask) -> usize {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        for s in 0..w * h {
            if mask.road()[s] || seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(p) = stack.pop() {
                let (x, y) = ((p % w) as i64, (p / w) as i64);
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !mask.road()[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn binarize_extremes_and_single_line() {
        let white = RoadRaster::new(4, 3, vec![255; 12], georef()).unwrap();
        assert_eq!(binarize_roadmap(&white, 128).unwrap().road_count(), 0);
        let black = RoadRaster::new(4, 3, vec![0; 12], georef()).unwrap();
        assert_eq!(binarize_roadmap(&black, 128).unwrap().road_count(), 12);

        let mut px = vec![200u8; 6 * 5];
        for x in 0..6 {
            px[2 * 6 + x] = 0;
        }
        px[7] = 129;
        let raster = RoadRaster::new(6, 5, px.clone(), georef()).unwrap();
        let mask = binarize_roadmap(&raster, 128).unwrap();
        for (i, &p) in px.iter().enumerate() {
            assert_eq!(mask.road()[i], p <= 128, "pixel {i}");
        }
        assert_eq!(mask.road_count(), 6);
    }

    #[test]
    fn raster_validation() {
        assert!(RoadRaster::new(1, 5, vec![0; 5], georef()).is_err());
        let mut g = georef();
        g.lon_max = g.lon_min;
        assert!(RoadRaster::new(2, 2, vec![0; 4], g).is_err());
    }

    #[test]
    fn dilation_square_element() {
        let mut road = vec![false; 11 * 11];
        road[5 * 11 + 5] = true;
        let mask = BinaryRoadMask::new(11, 11, road).unwrap();
        let d = dilate_roads(&mask, 1);
        for y in 0..11 {
            for x in 0..11 {
                let expect = (4..=6).contains(&x) && (4..=6).contains(&y);
                assert_eq!(d.is_road(x, y), expect, "({x},{y})");
            }
        }
        assert_eq!(dilate_roads(&mask, 0), mask);
        let free = BinaryRoadMask::new(5, 5, vec![false; 25]).unwrap();
        assert_eq!(dilate_roads(&free, 3).road_count(), 0);
    }

    #[test]
    fn labelling_extremes() {
        let free = BinaryRoadMask::new(4, 4, vec![false; 16]).unwrap();
        let l = label_regions(&free);
        assert_eq!(l.region_count(), 1);
        assert!(l.labels().iter().all(|&v| v == 1));
        let road = BinaryRoadMask::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(label_regions(&road).region_count(), 0);
    }

    #[test]
    fn grid_yields_nine_regions_and_rook_adjacency() {
        let mask = binarize_roadmap(&grid_raster(), 128).unwrap();
        let labels = label_regions(&mask);
        assert_eq!(labels.region_count(), 9);
        assert_eq!(flood_fill_count(&mask), 9);
        assert_eq!(labels.region_sizes(), vec![100, 90, 100, 90, 81, 90, 100, 90, 100]);
        // Scan-order numbering: top-left, top-middle, ..., bottom-right.
        assert_eq!(labels.label(0, 0), 1);
        assert_eq!(labels.label(15, 0), 2);
        assert_eq!(labels.label(0, 15), 4);
        assert_eq!(labels.label(30, 30), 9);

        let g = extract_adjacency(&labels, 1);
        assert_eq!(g.edge_count(), 12);
        // Enumerate rook neighbours of a 3x3 grid independently.
        for a in 0..9u32 {
            for b in (a + 1)..9u32 {
                let (ra, ca, rb, cb) = (a / 3, a % 3, b / 3, b % 3);
                let rook = (ra == rb && ca.abs_diff(cb) == 1) || (ca == cb && ra.abs_diff(rb) == 1);
                assert_eq!(g.contains(a + 1, b + 1), rook, "{a}-{b}");
            }
        }
        let m = g.adjacency_matrix();
        for i in 0..9 {
            assert_eq!(m.at(&[i, i]), 0.0);
            for j in 0..9 {
                assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
            }
        }
    }

    #[test]
    fn single_region_has_empty_adjacency() {
        let l = label_regions(&BinaryRoadMask::new(3, 3, vec![false; 9]).unwrap());
        let g = extract_adjacency(&l, 2);
        assert_eq!(g.region_count(), 1);
        assert_eq!(g.adjacency_matrix(), crate::Tensor::zeros(&[1, 1]));
    }

    #[test]
    fn gap_threshold_across_wide_road() {
        // Two columns of free pixels separated by a 3-pixel road.
        let w = 7;
        let road: Vec<bool> = (0..w * 4).map(|i| (2..5).contains(&(i % w))).collect();
        let l = label_regions(&BinaryRoadMask::new(w, 4, road).unwrap());
        assert_eq!(l.region_count(), 2);
        assert!(extract_adjacency(&l, 3).contains(1, 2));
        assert!(!extract_adjacency(&l, 2).contains(1, 2));
    }

    /// 9x3 strip: regions 1 | 2 | 3 separated by single road columns, except
    /// that the bottom row between 2 and 3 has a two-pixel road.
    fn strip() -> RegionLabelMap {
        #[rustfmt::skip]
        let labels = vec![
            1, 1, 0, 2, 2, 2, 0, 3, 3,
            1, 1, 0, 2, 2, 2, 0, 3, 3,
            1, 1, 0, 2, 2, 0, 0, 3, 3,
        ];
        RegionLabelMap::new(9, 3, labels).unwrap()
    }

    fn flows(values: &[Vec<f64>]) -> FlowTensor {
        let n = values.len();
        let t = values[0].len();
        let mut f = FlowTensor::zeros(n, t, 0, FlowDirection::Inflow).unwrap();
        for (r, row) in values.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                f.set(r, s, *v);
            }
        }
        f
    }

    #[test]
    fn strip_boundary_lengths() {
        let b = boundary_lengths(&strip(), 1);
        assert_eq!(b.get(&(1, 2)), Some(&3));
        assert_eq!(b.get(&(2, 3)), Some(&2));
        assert_eq!(b.get(&(1, 3)), None);
    }

    #[test]
    fn middle_region_merges_into_longer_boundary() {
        let f = flows(&[vec![20.0; 4], vec![0.0; 4], vec![20.0; 4]]);
        let out = merge_small_regions(&strip(), &f, &f, MergeOptions::default()).unwrap();
        assert_eq!(out.labelmap.region_count(), 2);
        assert_eq!(out.mapping, vec![1, 1, 2]);
        assert!(out.warnings.is_empty());
        // The road column between the old regions 1 and 2 joined region 1.
        assert_eq!(out.labelmap.label(2, 0), 1);
        assert_eq!(out.labelmap.label(4, 2), 1);
        assert_eq!(out.labelmap.label(6, 0), 0);
        // Merged region is a single 4-connected component.
        let relabelled = label_regions(&out.labelmap.to_mask());
        assert_eq!(relabelled, out.labelmap);
    }

    #[test]
    fn busy_regions_are_untouched() {
        let f = flows(&[vec![20.0; 4], vec![10.0; 4], vec![20.0; 4]]);
        let out = merge_small_regions(&strip(), &f, &f, MergeOptions::default()).unwrap();
        assert_eq!(out.labelmap, strip());
        assert_eq!(out.mapping, vec![1, 2, 3]);
    }

    #[test]
    fn slot_fraction_is_strict() {
        // Exactly 75% low slots does not qualify.
        let f = flows(&[vec![20.0; 4], vec![0.0, 0.0, 0.0, 50.0], vec![20.0; 4]]);
        let out = merge_small_regions(&strip(), &f, &f, MergeOptions::default()).unwrap();
        assert_eq!(out.labelmap.region_count(), 3);
    }

    #[test]
    fn lone_region_warns() {
        let l = RegionLabelMap::new(3, 2, vec![1; 6]).unwrap();
        let f = flows(&[vec![0.0; 5]]);
        let out = merge_small_regions(&l, &f, &f, MergeOptions::default()).unwrap();
        assert_eq!(out.labelmap, l);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].region, 1);
    }

    #[test]
    fn merging_cascades_to_one_region() {
        let f = flows(&[vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
        let out = merge_small_regions(&strip(), &f, &f, MergeOptions::default()).unwrap();
        assert_eq!(out.labelmap.region_count(), 1);
        assert_eq!(out.mapping, vec![1, 1, 1]);
    }

    #[test]
    fn merge_rejects_mismatched_flows() {
        let f = flows(&[vec![0.0; 4]]);
        assert!(merge_small_regions(&strip(), &f, &f, MergeOptions::default()).is_err());
    }

    #[test]
    fn label_map_rejects_gaps_in_ids() {
        assert!(RegionLabelMap::new(2, 1, vec![1, 3]).is_err());
    }

    #[test]
    fn georef_pixel_mapping() {
        let g = georef();
        assert_eq!(g.pixel_of(10, 10, 0.05, 0.95), Some((0, 0)));
        assert_eq!(g.pixel_of(10, 10, 0.95, 0.05), Some((9, 9)));
        assert_eq!(g.pixel_of(10, 10, 1.5, 0.5), None);
        assert_eq!(g.pixel_of(10, 10, -0.1, 0.5), None);
        let (lon, lat) = g.pixel_center(10, 10, 3, 7);
        assert_eq!(g.pixel_of(10, 10, lon, lat), Some((3, 7)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy() -> impl Strategy<Value = BinaryRoadMask> {
            (3usize..14, 3usize..14).prop_flat_map(|(w, h)| {
                proptest::collection::vec(proptest::bool::weighted(0.3), w * h)
                    .prop_map(move |road| BinaryRoadMask::new(w, h, road).unwrap())
            })
        }

        proptest! {
            #[test]
            fn labelling_is_idempotent_and_conserves_pixels(mask in mask_strategy()) {
                let l = label_regions(&mask);
                let again = label_regions(&l.to_mask());
                prop_assert_eq!(&again, &l);
                let free = mask.road().iter().filter(|r| !**r).count();
                prop_assert_eq!(l.region_sizes().iter().sum::<usize>(), free);
                prop_assert_eq!(l.region_count(), flood_fill_count(&mask));
            }

            #[test]
            fn dilation_is_monotone(mask in mask_strategy(), r in 0usize..3) {
                let a = dilate_roads(&mask, r);
                let b = dilate_roads(&mask, r + 1);
                for (x, y) in a.road().iter().zip(b.road()) {
                    prop_assert!(!*x || *y);
                }
            }

            #[test]
            fn adjacency_symmetric_zero_diagonal(mask in mask_strategy(), gap in 0usize..4) {
                let l = label_regions(&mask);
                let m = extract_adjacency(&l, gap).adjacency_matrix();
                let n = l.region_count();
                for i in 0..n {
                    prop_assert_eq!(m.at(&[i, i]), 0.0);
                    for j in 0..n {
                        prop_assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
                    }
                }
            }

            #[test]
            fn merge_never_increases_region_count(
                mask in mask_strategy(),
                seed in 0u64..1000,
            ) {
                let l = label_regions(&mask);
                prop_assume!(l.region_count() >= 1);
                let n = l.region_count();
                let vals: Vec<Vec<f64>> = (0..n)
                    .map(|r| (0..4).map(|t| ((seed as usize + r * 7 + t * 3) % 25) as f64).collect())
                    .collect();
                let f = flows(&vals);
                let out = merge_small_regions(&l, &f, &f, MergeOptions::default()).unwrap();
                prop_assert!(out.labelmap.region_count() <= n);
                // Pixels of unmerged regions keep their region (up to renumbering).
                for (i, &old) in l.labels().iter().enumerate() {
                    if old > 0 {
                        prop_assert_eq!(out.labelmap.labels()[i], out.mapping[old as usize - 1]);
                    }
                }
            }
        }
    }
}
