//! Adam training loop, evaluation and run-directory checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::dataset::{make_batch, Calendar, Dataset, SplitName, Splits};
use crate::error::{Error, Result};
use crate::flow::{Normalization, SampleWindow};
use crate::metrics::{metrics, MetricsReport, MAPE_FLOOR};
use crate::model::{Model, ModelContext, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const NORM_FILE: &str = "normalization.json";
pub const LOG_FILE: &str = "log.csv";

/// Offset mixed into the config seed for the batch-order stream, so it is
/// independent of the initialisation stream.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update; `grads[i]` is `None` for a parameter the
    /// loss does not depend on.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (m, v)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best: ParamStore,
    pub best_epoch: usize,
    pub last: ParamStore,
    pub updates: usize,
}

/// Data-side state shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub norm: Normalization,
    pub ctx: ModelContext,
    pub calendar: Calendar,
    pub spec: ModelSpec,
}

impl Prepared {
    /// Splits the windows, fits the normalisation on the training inputs
    /// and builds the graph context.
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        data.check()?;
        let splits = data.split(&cfg.split, cfg.window_stride)?;
        let norm = Normalization::fit(&splits.train)?;
        Self::with_norm(cfg, data, splits, norm)
    }

    fn with_norm(cfg: &TrainConfig, data: &Dataset, splits: Splits, norm: Normalization) -> Result<Self> {
        let ctx = ModelContext::build(&data.poi, &data.graph, cfg.threshold, cfg.k, norm)?;
        let spec = ModelSpec::from_config(cfg, data.n_regions(), 2 * data.poi.n_categories());
        Ok(Prepared {
            splits,
            norm,
            ctx,
            calendar: Calendar::of(&data.flow),
            spec,
        })
    }
}

/// Predictions `[N, S, T', D]` and truth for `samples`, in chunks of
/// `batch_size`.
pub fn predict_all(
    model: &Model,
    store: &ParamStore,
    prep: &Prepared,
    samples: &[SampleWindow],
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples to predict"))?;
    let n = first.target.shape()[0];
    let row = first.target.shape()[1] * first.target.shape()[2];
    let s = samples.len();
    let mut pred = Tensor::zeros(&[n, s, first.target.shape()[1], first.target.shape()[2]]);
    let mut truth = pred.clone();
    let mut offset = 0;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SampleWindow> = chunk.iter().collect();
        let batch = make_batch(&refs, &prep.norm, prep.calendar)?;
        let out = model.predict(store, &prep.ctx, &batch)?;
        let b = chunk.len();
        for r in 0..n {
            let src = r * b * row;
            let dst = (r * s + offset) * row;
            pred.data_mut()[dst..dst + b * row].copy_from_slice(&out.data()[src..src + b * row]);
            truth.data_mut()[dst..dst + b * row].copy_from_slice(&batch.targets.data()[src..src + b * row]);
        }
        offset += b;
    }
    Ok((pred, truth))
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    prep: &Prepared,
    samples: &[SampleWindow],
    batch_size: usize,
) -> Result<MetricsReport> {
    let (pred, truth) = predict_all(model, store, prep, samples, batch_size)?;
    metrics(&pred, &truth, MAPE_FLOOR)
}

/// Trains `store` in place of a copy; returns the best-validation and last
/// parameters together with the per-epoch log.
pub fn train(cfg: &TrainConfig, model: &Model, mut store: ParamStore, prep: &Prepared) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = &prep.splits.train;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut adam = Adam::new(&store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&SampleWindow> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, &prep.norm, prep.calendar)?;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, true);
            let (loss, _) = model.loss(&mut tape, &bound, &prep.ctx, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += value * refs.len() as f64;
            let grads = tape.backward(loss)?;
            let per_param: Vec<Option<&Tensor>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
            adam.update(&mut store, &per_param, lr);
        }
        let val_mae = if prep.splits.val.is_empty() {
            f64::NAN
        } else {
            evaluate(model, &store, prep, &prep.splits.val, cfg.batch_size)?.overall.mae
        };
        log::info!("epoch {epoch} lr {lr} loss {:.6} val_mae {val_mae:.6}", loss_sum / train.len() as f64);
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_mae,
        });
        // Ties keep the earlier epoch; NaN never replaces a finite best.
        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_mae < *b || (b.is_nan() && !val_mae.is_nan()),
        };
        if improved {
            best = Some((val_mae, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        log,
        best: best_store,
        best_epoch,
        last: store,
        updates: adam.steps() as usize,
    })
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Parameters plus what is needed to rebuild the model around them.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, cfg: &TrainConfig, norm: &Normalization) -> Result<()> {
    store.save(dir)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    fs::write(dir.join(NORM_FILE), serde_json::to_string_pretty(norm)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm: Normalization,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Checkpoint {
            config: TrainConfig::load(&dir.join(CONFIG_FILE))?,
            norm: serde_json::from_slice(&fs::read(dir.join(NORM_FILE))?)?,
            params: ParamStore::load(dir)?,
        })
    }

    /// Rebuilds the model on `data` with the stored normalisation and
    /// parameters; fails when shapes disagree.
    pub fn restore(&self, data: &Dataset) -> Result<(Model, ParamStore, Prepared)> {
        let splits = data.split(&self.config.split, self.config.window_stride)?;
        let prep = Prepared::with_norm(&self.config, data, splits, self.norm)?;
        let (mut model, mut store) = Model::build(prep.spec.clone(), self.config.seed)?;
        store.assign_from(&self.params)?;
        model.freeze(&store, &prep.ctx)?;
        Ok((model, store, prep))
    }

    pub fn evaluate(&self, data: &Dataset, split: SplitName) -> Result<MetricsReport> {
        let (model, store, prep) = self.restore(data)?;
        evaluate(&model, &store, &prep, prep.splits.get(split), self.config.batch_size)
    }
}

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("final")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }
}

/// Full training run on a data set, writing `best/`, `final/` and the log
/// under `out`.
pub fn run_training(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prep = Prepared::new(cfg, data)?;
    let (model, store) = Model::build(prep.spec.clone(), cfg.seed)?;
    let outcome = train(cfg, &model, store, &prep)?;
    let paths = RunPaths::new(out);
    fs::create_dir_all(out)?;
    save_checkpoint(&paths.best(), &outcome.best, cfg, &prep.norm)?;
    save_checkpoint(&paths.last(), &outcome.last, cfg, &prep.norm)?;
    write_log(&paths.log(), &outcome.log)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        let g = Tensor::new(&[2], vec![0.3, -2.0]).unwrap();
        adam.update(&mut store, &[Some(&g)], 0.01);
        // Bias-corrected first step is lr * g / (|g| + eps).
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_skips_missing_gradients() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[1], vec![4.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[None], 0.1);
        assert_eq!(store.get(id).data(), &[4.0]);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = vec![
            EpochLog { epoch: 1, lr: 0.01, train_loss: 3.25, val_mae: 1.5 },
            EpochLog { epoch: 2, lr: 0.001, train_loss: 0.1 + 0.2, val_mae: f64::NAN },
        ];
        let p = dir.path().join("log.csv");
        write_log(&p, &log).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_mae\n1,0.01,3.25,1.5\n"));
        let back = read_log(&p).unwrap();
        assert_eq!(back[1].train_loss, 0.1 + 0.2);
        assert!(back[1].val_mae.is_nan());
    }
}
