use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use poiflow::config::{Ablation, TrainConfig};
use poiflow::dataset::{DataPaths, Dataset, SplitName};
use poiflow::experiment::{run_experiment, ExperimentSpec};
use poiflow::flow::{self, FlowDirection, FlowTensor};
use poiflow::formats;
use poiflow::hosts::HostKind;
use poiflow::partition::{self, MergeOptions};
use poiflow::poi::{build_poi_matrix, SimilarityGraph, Standardization};
use poiflow::synthetic;
use poiflow::train::{run_training, Checkpoint};

#[derive(Parser)]
#[command(name = "poiflow", version, about = "Region-function guided traffic flow forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a road raster into regions and extract their adjacency.
    Partition {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        georef: PathBuf,
        #[arg(long, default_value_t = 128)]
        cutoff: u8,
        #[arg(long, default_value_t = 1)]
        dilate_radius: usize,
        #[arg(long, default_value_t = 3)]
        gap: usize,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_edges: PathBuf,
        /// Flow prefix (`PREFIX_inflow.csv` etc., or a data directory); enables merging.
        #[arg(long)]
        flows: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        min_flow: f64,
        #[arg(long, default_value_t = 0.75)]
        slot_fraction: f64,
        /// Where to write the merged flows, as a prefix.
        #[arg(long)]
        out_flows: Option<PathBuf>,
    },
    /// Count per-region inflow and outflow from trajectory points.
    Aggregate {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        georef: PathBuf,
        #[arg(long)]
        start: i64,
        #[arg(long)]
        end: i64,
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// POI similarity and thresholded adjacency.
    BuildGraph {
        #[arg(long)]
        poi: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        threshold: f64,
        #[arg(long)]
        out_sim: PathBuf,
        #[arg(long)]
        out_adj: PathBuf,
    },
    /// Generate a synthetic city and its traffic.
    Synth {
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 60)]
        days: usize,
        #[arg(long, default_value_t = 21)]
        categories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and test host-alone and block-augmented models across seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "temporal_linear,gcn_temporal")]
        hosts: Vec<HostKind>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Base training config; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Inflow and outflow file pairs under `prefix`: a directory holds
/// `inflow.csv` and friends, anything else is used as `PREFIX_inflow.csv`.
fn flow_files(prefix: &Path, dir: FlowDirection) -> (PathBuf, PathBuf) {
    if prefix.is_dir() {
        let p = DataPaths::new(prefix);
        return (p.flow_csv(dir), p.flow_meta(dir));
    }
    let base = prefix.to_string_lossy();
    (
        PathBuf::from(format!("{base}_{}.csv", dir.as_str())),
        PathBuf::from(format!("{base}_{}.json", dir.as_str())),
    )
}

fn read_flow_pair(prefix: &Path) -> Result<(FlowTensor, FlowTensor)> {
    let read = |d| {
        let (csv, meta) = flow_files(prefix, d);
        FlowTensor::read(&csv, &meta).with_context(|| format!("reading {}", csv.display()))
    };
    Ok((read(FlowDirection::Inflow)?, read(FlowDirection::Outflow)?))
}

fn write_flow_pair(prefix: &Path, inflow: &FlowTensor, outflow: &FlowTensor) -> Result<()> {
    for f in [inflow, outflow] {
        let (csv, meta) = flow_files(prefix, f.direction());
        ensure_parent(&csv)?;
        f.write(&csv, &meta)?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition {
            raster,
            georef,
            cutoff,
            dilate_radius,
            gap,
            out_labels,
            out_edges,
            flows,
            min_flow,
            slot_fraction,
            out_flows,
        } => {
            let raster = formats::read_raster(&raster, &georef)?;
            let mask = partition::dilate_roads(&partition::binarize_roadmap(&raster, cutoff)?, dilate_radius);
            let mut labels = partition::label_regions(&mask);
            if let Some(prefix) = flows {
                let (inflow, outflow) = read_flow_pair(&prefix)?;
                let opts = MergeOptions {
                    min_flow,
                    slot_fraction,
                    gap,
                };
                let merged = partition::merge_small_regions(&labels, &inflow, &outflow, opts)?;
                for w in &merged.warnings {
                    log::warn!("region {}: {}", w.region, w.message);
                }
                if let Some(out) = out_flows {
                    let mapping: Vec<usize> = merged.mapping.iter().map(|&m| m as usize - 1).collect();
                    let n_new = merged.labelmap.region_count();
                    write_flow_pair(&out, &inflow.remap(&mapping, n_new)?, &outflow.remap(&mapping, n_new)?)?;
                }
                labels = merged.labelmap;
            } else if out_flows.is_some() {
                bail!("--out-flows needs --flows");
            }
            let graph = partition::extract_adjacency(&labels, gap);
            ensure_parent(&out_labels)?;
            ensure_parent(&out_edges)?;
            formats::write_labels(&out_labels, &labels)?;
            formats::write_edges(&out_edges, &graph)?;
            println!("{} regions, {} edges", labels.region_count(), graph.edge_count());
        }
        Command::Aggregate {
            traj,
            labels,
            georef,
            start,
            end,
            out_prefix,
        } => {
            let records = flow::read_trajectories(&traj)?;
            let labels = formats::read_labels(&labels)?;
            let georef = formats::read_georef(&georef)?;
            let (inflow, outflow) = flow::aggregate_flows(&records, &labels, &georef, start, end)?;
            write_flow_pair(&out_prefix, &inflow, &outflow)?;
            println!("{} regions, {} slots", inflow.n_regions(), inflow.t_total());
        }
        Command::BuildGraph {
            poi,
            threshold,
            out_sim,
            out_adj,
        } => {
            let counts = formats::read_poi(&poi)?;
            let g = SimilarityGraph::build(&build_poi_matrix(&counts, Standardization::Global)?, threshold)?;
            ensure_parent(&out_sim)?;
            ensure_parent(&out_adj)?;
            formats::write_matrix(&out_sim, &g.similarity)?;
            formats::write_matrix(&out_adj, &g.adjacency)?;
        }
        Command::Synth {
            n,
            days,
            categories,
            seed,
            out,
        } => {
            let (city, _) = synthetic::synthesize(&out, n, categories, days, seed)?;
            println!("{} regions, {} edges, {} days", city.n_regions, city.graph.edge_count(), days);
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let dataset = Dataset::load(&data, cfg.direction)?;
            let outcome = run_training(&cfg, &dataset, &out)?;
            let last = outcome.log.last().expect("at least one epoch");
            println!(
                "{} epochs, best epoch {}, final train loss {}, final val MAE {}",
                outcome.log.len(),
                outcome.best_epoch,
                last.train_loss,
                last.val_mae
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            report,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&data, ckpt.config.direction)?;
            let metrics = ckpt.evaluate(&dataset, split)?;
            write_json(&report, &metrics)?;
            println!("overall MAE {} RMSE {}", metrics.overall.mae, metrics.overall.rmse);
        }
        Command::Ablate {
            data,
            hosts,
            seeds,
            config,
            out,
        } => {
            let base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let dataset = Dataset::load(&data, base.direction)?;
            let spec = ExperimentSpec {
                hosts,
                ablations: Ablation::TABLE.to_vec(),
                seeds,
                base,
            };
            let report = run_experiment(&dataset, &spec, Some(&out))?;
            for s in &report.summary {
                println!(
                    "{:16} {:9} params {:7} median MAE {:.4} RMSE {:.4}",
                    s.host.as_str(),
                    s.label,
                    s.param_count,
                    s.median_overall_mae,
                    s.median_overall_rmse
                );
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
