//! Experiment matrix over host kinds, ablation rows and seeds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hosts::HostKind;
use crate::metrics::{metrics, MetricsReport, MAPE_FLOOR};
use crate::model::Model;
use crate::plot;
use crate::train::{predict_all, train, Prepared};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub hosts: Vec<HostKind>,
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Shared settings; `host`, `ablation` and `seed` are overridden per cell.
    pub base: TrainConfig,
}

impl ExperimentSpec {
    /// Every cell in report order: host, then ablation row, then seed.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &host in &self.hosts {
            for &ablation in &self.ablations {
                for &seed in &self.seeds {
                    out.push(TrainConfig {
                        host,
                        ablation,
                        seed,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub host: HostKind,
    pub ablation: Ablation,
    pub label: String,
    pub seed: u64,
    pub param_count: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub host: HostKind,
    pub label: String,
    pub param_count: usize,
    pub median_overall_mae: f64,
    pub median_overall_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
    pub summary: Vec<Summary>,
}

/// Median of a non-empty list; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl ExperimentReport {
    pub fn median_mae(&self, host: HostKind, ablation: Ablation) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.host == host && c.ablation == ablation)
            .map(|c| c.test.overall.mae)
            .collect();
        (!v.is_empty()).then(|| median(&v))
    }

    fn summarize(cells: &[CellResult]) -> Vec<Summary> {
        let mut keys: Vec<(HostKind, Ablation)> = Vec::new();
        for c in cells {
            if !keys.contains(&(c.host, c.ablation)) {
                keys.push((c.host, c.ablation));
            }
        }
        keys.into_iter()
            .map(|(host, ablation)| {
                let group: Vec<&CellResult> = cells.iter().filter(|c| c.host == host && c.ablation == ablation).collect();
                let mae: Vec<f64> = group.iter().map(|c| c.test.overall.mae).collect();
                let rmse: Vec<f64> = group.iter().map(|c| c.test.overall.rmse).collect();
                Summary {
                    host,
                    label: ablation.label(),
                    param_count: group[0].param_count,
                    median_overall_mae: median(&mae),
                    median_overall_rmse: median(&rmse),
                }
            })
            .collect()
    }

    /// `report.json`, `report.csv` (one row per cell and horizon) and
    /// `mae.png` (median overall MAE, one bar group per host).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        w.write_record(["host", "ablation", "seed", "horizon", "mae", "rmse", "mape", "mape_excluded", "params"])?;
        for c in &self.cells {
            let rows = c.test.horizons.iter().map(|(l, m)| (l.as_str(), m)).chain([("overall", &c.test.overall)]);
            for (label, m) in rows {
                w.write_record([
                    c.host.as_str().to_string(),
                    c.label.clone(),
                    c.seed.to_string(),
                    label.to_string(),
                    m.mae.to_string(),
                    m.rmse.to_string(),
                    m.mape.map_or(String::new(), |v| v.to_string()),
                    m.mape_excluded.to_string(),
                    c.param_count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        let mut hosts: Vec<HostKind> = Vec::new();
        for s in &self.summary {
            if !hosts.contains(&s.host) {
                hosts.push(s.host);
            }
        }
        let groups: Vec<Vec<f64>> = hosts
            .iter()
            .map(|h| self.summary.iter().filter(|s| s.host == *h).map(|s| s.median_overall_mae).collect())
            .collect();
        plot::bar_chart(&dir.join("mae.png"), &groups, 480, 240)
    }
}

/// Regions drawn in the predicted-vs-true plots.
pub const PLOTTED_REGIONS: usize = 3;
/// Test windows drawn per plot (one 60-minute-ahead value each).
pub const PLOTTED_WINDOWS: usize = 192;

/// Trains and tests every cell. With `out` set, also writes the report and,
/// for the first seed of each cell group, predicted-vs-true curves.
pub fn run_experiment(data: &Dataset, spec: &ExperimentSpec, out: Option<&Path>) -> Result<ExperimentReport> {
    if spec.hosts.is_empty() || spec.ablations.is_empty() || spec.seeds.is_empty() {
        return Err(Error::config("experiment needs at least one host, ablation row and seed"));
    }
    let mut cells = Vec::new();
    for cfg in spec.cells() {
        let name = format!("{} {} seed {}", cfg.host.as_str(), cfg.ablation.label(), cfg.seed);
        log::info!("training {name}");
        let cell = run_cell(data, &cfg, out.filter(|_| cfg.seed == spec.seeds[0]))
            .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        cells.push(cell);
    }
    let report = ExperimentReport {
        summary: ExperimentReport::summarize(&cells),
        cells,
    };
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

fn run_cell(data: &Dataset, cfg: &TrainConfig, plot_dir: Option<&Path>) -> Result<CellResult> {
    cfg.validate()?;
    let prep = Prepared::new(cfg, data)?;
    let (mut model, store) = Model::build(prep.spec.clone(), cfg.seed)?;
    let param_count = store.count();
    let outcome = train(cfg, &model, store, &prep)?;
    model.freeze(&outcome.best, &prep.ctx)?;
    let (pred, truth) = predict_all(&model, &outcome.best, &prep, &prep.splits.test, cfg.batch_size)?;
    let test = metrics(&pred, &truth, MAPE_FLOOR)?;
    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir)?;
        let (n, s, steps) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
        let shown = s.min(PLOTTED_WINDOWS);
        for r in 0..n.min(PLOTTED_REGIONS) {
            let at = |t: &crate::Tensor, j: usize| t.at(&[r, j, steps - 1, 0]);
            let p: Vec<f64> = (0..shown).map(|j| at(&pred, j)).collect();
            let y: Vec<f64> = (0..shown).map(|j| at(&truth, j)).collect();
            let file = format!("curve_{}_{}_region{}.png", cfg.host.as_str(), cfg.ablation.label().replace('+', "-"), r + 1);
            plot::line_chart(&dir.join(file), &[&y, &p], 640, 240)?;
        }
    }
    Ok(CellResult {
        host: cfg.host,
        ablation: cfg.ablation,
        label: cfg.ablation.label(),
        seed: cfg.seed,
        param_count,
        best_epoch: outcome.best_epoch,
        final_train_loss: outcome.log.last().map_or(f64::NAN, |l| l.train_loss),
        test,
    })
}
