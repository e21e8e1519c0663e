//! Error metrics per forecast horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAPE_FLOOR: f64 = 1.0;

/// Reported horizons: label and 0-based target step. Step 3 (45 min) only
/// enters the pooled overall figure.
pub const HORIZONS: [(&str, usize); 3] = [("15min", 0), ("30min", 1), ("60min", 3)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when no target reaches the floor.
    pub mape: Option<f64>,
    /// Entries pooled into MAE and RMSE.
    pub count: usize,
    /// Entries left out of MAPE for falling below the floor.
    pub mape_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<(String, HorizonMetrics)>,
    pub overall: HorizonMetrics,
    pub samples: usize,
    pub mape_floor: f64,
}

impl MetricsReport {
    pub fn horizon(&self, label: &str) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }
}

/// Pools `(prediction, truth)` pairs.
fn summarize(pairs: impl Iterator<Item = (f64, f64)>, floor: f64) -> HorizonMetrics {
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let (mut count, mut kept) = (0usize, 0usize);
    for (p, y) in pairs {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        count += 1;
        if y >= floor {
            pct += (e / y).abs();
            kept += 1;
        }
    }
    let denom = count.max(1) as f64;
    HorizonMetrics {
        mae: abs / denom,
        rmse: (sq / denom).sqrt(),
        mape: (kept > 0).then(|| 100.0 * pct / kept as f64),
        count,
        mape_excluded: count - kept,
    }
}

/// Metrics of predictions against truth, both `[N, S, T', D]` in raw flow
/// units.
pub fn metrics(pred: &Tensor, truth: &Tensor, mape_floor: f64) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} differs from truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let &[_, samples, steps, dim] = pred.shape() else {
        return Err(Error::invalid(format!("metrics expect [N, S, T', D], got {:?}", pred.shape())));
    };
    let pairs = || pred.data().iter().copied().zip(truth.data().iter().copied());
    let step_of = move |i: usize| (i / dim) % steps;
    let horizons = HORIZONS
        .iter()
        .filter(|(_, s)| *s < steps)
        .map(|(label, s)| {
            let m = summarize(
                pairs().enumerate().filter(|(i, _)| step_of(*i) == *s).map(|(_, p)| p),
                mape_floor,
            );
            (label.to_string(), m)
        })
        .collect();
    Ok(MetricsReport {
        horizons,
        overall: summarize(pairs(), mape_floor),
        samples,
        mape_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(pred: &[f64], truth: &[f64]) -> MetricsReport {
        let n = pred.len();
        metrics(
            &Tensor::new(&[1, 1, n, 1], pred.to_vec()).unwrap(),
            &Tensor::new(&[1, 1, n, 1], truth.to_vec()).unwrap(),
            MAPE_FLOOR,
        )
        .unwrap()
    }

    #[test]
    fn hand_examples() {
        let r = flat(&[3.0, 4.0], &[0.0, 0.0]);
        assert_eq!(r.overall.mae, 3.5);
        assert!((r.overall.rmse - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.overall.mape, None);
        assert_eq!(r.overall.mape_excluded, 2);

        let r = flat(&[90.0], &[100.0]);
        assert!((r.overall.mape.unwrap() - 10.0).abs() < 1e-12);

        let r = flat(&[5.0, 7.0, 0.5, 2.0], &[5.0, 7.0, 0.5, 2.0]);
        assert_eq!(r.overall.mae, 0.0);
        assert_eq!(r.overall.rmse, 0.0);
        assert_eq!(r.overall.mape, Some(0.0));
        assert_eq!(r.overall.mape_excluded, 1);
    }

    #[test]
    fn horizon_labels_map_to_steps() {
        // Step s carries an error of s + 1.
        let truth = Tensor::zeros(&[2, 3, 4, 1]);
        let pred = Tensor::from_fn(&[2, 3, 4, 1], |i| (i % 4 + 1) as f64);
        let r = metrics(&pred, &truth, MAPE_FLOOR).unwrap();
        assert_eq!(r.horizon("15min").unwrap().mae, 1.0);
        assert_eq!(r.horizon("30min").unwrap().mae, 2.0);
        assert_eq!(r.horizon("60min").unwrap().mae, 4.0);
        assert_eq!(r.overall.mae, 2.5);
        assert_eq!(r.overall.count, 24);
        assert_eq!(r.samples, 3);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(metrics(&Tensor::zeros(&[1, 1, 4, 1]), &Tensor::zeros(&[1, 2, 4, 1]), 1.0).is_err());
    }
}
