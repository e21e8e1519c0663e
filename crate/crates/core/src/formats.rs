//! On-disk formats: binary PGM rasters, georeference sidecars, edge lists,
//! POI count tables, and dense matrix CSVs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::{GeoRef, RegionGraph, RegionLabelMap, RoadRaster};
use crate::poi::PoiCountMatrix;
use crate::tensor::Tensor;

/// Decoded binary (P5) PGM with samples widened to `u16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, got {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad {what} {s:?}")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(path, format!("maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let wide = maxval > 255;
    let needed = width * height * if wide { 2 } else { 1 };
    let data = bytes.get(pos..pos + needed).ok_or_else(|| {
        format_err(path, format!("expected {needed} sample bytes"))
    })?;
    let samples = if wide {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    parse_pgm(&fs::read(path)?, path)
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, samples: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    fs::write(path, out)?;
    Ok(())
}

/// 16-bit samples, big-endian as the format requires.
pub fn write_pgm16(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        out.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_georef(path: &Path) -> Result<GeoRef> {
    let g: GeoRef = serde_json::from_slice(&fs::read(path)?)?;
    g.validate()?;
    Ok(g)
}

pub fn write_georef(path: &Path, georef: &GeoRef) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(georef)? + "\n")?;
    Ok(())
}

pub fn read_raster(pgm_path: &Path, georef_path: &Path) -> Result<RoadRaster> {
    let pgm = read_pgm(pgm_path)?;
    if pgm.maxval > 255 {
        return Err(format_err(pgm_path, "road raster must be 8-bit"));
    }
    let px = pgm.samples.iter().map(|&s| s as u8).collect();
    RoadRaster::new(pgm.width, pgm.height, px, read_georef(georef_path)?)
}

pub fn write_raster(pgm_path: &Path, georef_path: &Path, raster: &RoadRaster) -> Result<()> {
    write_pgm8(pgm_path, raster.width(), raster.height(), raster.pixels())?;
    write_georef(georef_path, &raster.georef())
}

pub fn write_labels(path: &Path, labels: &RegionLabelMap) -> Result<()> {
    if labels.region_count() > u16::MAX as usize {
        return Err(Error::invalid("too many regions for a 16-bit label map"));
    }
    let samples: Vec<u16> = labels.labels().iter().map(|&l| l as u16).collect();
    write_pgm16(path, labels.width(), labels.height(), &samples)
}

pub fn read_labels(path: &Path) -> Result<RegionLabelMap> {
    let pgm = read_pgm(path)?;
    RegionLabelMap::new(
        pgm.width,
        pgm.height,
        pgm.samples.iter().map(|&s| s as u32).collect(),
    )
}

pub fn write_edges(path: &Path, graph: &RegionGraph) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["src", "dst"])?;
    for (a, b) in graph.edges() {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// The edge list does not record isolated regions, so the caller supplies
/// the region count.
pub fn read_edges(path: &Path, n_regions: usize) -> Result<RegionGraph> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["src", "dst"] {
        return Err(format_err(path, "expected header src,dst"));
    }
    let mut g = RegionGraph::new(n_regions);
    for row in r.deserialize::<(u32, u32)>() {
        let (a, b) = row?;
        g.add_edge(a, b)?;
    }
    Ok(g)
}

pub fn write_poi(path: &Path, poi: &PoiCountMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["region_id".to_string()];
    header.extend(poi.category_names().iter().cloned());
    w.write_record(&header)?;
    for r in 0..poi.n_regions() {
        let mut row = vec![(r + 1).to_string()];
        row.extend(poi.row(r).iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows may appear in any order but must cover region ids `1..=N` once each.
pub fn read_poi(path: &Path) -> Result<PoiCountMatrix> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("region_id") || header.len() < 2 {
        return Err(format_err(path, "expected header region_id,<categories...>"));
    }
    let names = header[1..].to_vec();
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| format_err(path, format!("bad region id {:?}", &rec[0])))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad count {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((id, vals));
    }
    rows.sort_by_key(|(id, _)| *id);
    if rows.iter().enumerate().any(|(i, (id, _))| *id != i + 1) {
        return Err(format_err(path, "region ids must be exactly 1..=N"));
    }
    let counts = rows.into_iter().flat_map(|(_, v)| v).collect();
    PoiCountMatrix::new(counts, names)
}

/// Dense matrix with header `row,col_0,...,col_{N-1}`.
pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string()];
    header.extend((0..cols).map(|j| format!("col_{j}")));
    w.write_record(&header)?;
    for i in 0..rows {
        let mut rec = vec![i.to_string()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().skip(1) {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad value {v:?}")))?,
            );
        }
        rows += 1;
    }
    Tensor::new(&[rows, cols], data)
}
