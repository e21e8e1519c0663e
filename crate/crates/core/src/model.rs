//! A host predictor, optionally composed with the attention block, plus the
//! constant context both need.

use crate::autodiff::{Tape, Var};
use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::flow::Normalization;
use crate::hosts::{Host, HostKind, HOST_CHEB_ORDER};
use crate::layers::Linear;
use crate::metablock::{BlockInputs, MetaBlock, MetaBlockConfig, ThetaMode};
use crate::params::{Bound, Initializer, ParamStore};
use crate::partition::RegionGraph;
use crate::poi::{self, PoiCountMatrix, PoiGraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub n_regions: usize,
    pub poi_width: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub in_dim: usize,
    pub d: usize,
    pub d_prime: usize,
    pub k: usize,
    pub host: HostKind,
    pub ablation: Ablation,
    pub temporal_hidden: usize,
    pub score_norm: bool,
    pub theta_mode: ThetaMode,
    pub generator_rank: Option<usize>,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, n_regions: usize, poi_width: usize) -> Self {
        ModelSpec {
            n_regions,
            poi_width,
            t_in: 4,
            t_out: 4,
            in_dim: 1,
            d: cfg.d,
            d_prime: cfg.d_prime,
            k: cfg.k,
            host: cfg.host,
            ablation: cfg.ablation,
            temporal_hidden: cfg.d,
            score_norm: true,
            theta_mode: ThetaMode::Matrix,
            generator_rank: None,
        }
    }

    fn block_config(&self) -> MetaBlockConfig {
        MetaBlockConfig {
            n_regions: self.n_regions,
            poi_width: self.poi_width,
            t_in: self.t_in,
            t_out: self.t_out,
            d: self.d,
            d_prime: self.d_prime,
            k: self.k,
            temporal_hidden: self.temporal_hidden,
            out_dim: self.in_dim,
            pg: self.ablation.pg,
            ar: self.ablation.ar,
            score_norm: self.score_norm,
            theta_mode: self.theta_mode,
            generator_rank: self.generator_rank,
        }
    }
}

/// Graph operators, POI features and normalisation shared by every batch.
#[derive(Clone, Debug)]
pub struct ModelContext {
    /// POI information matrix `[N, 2C]`.
    pub poi: Tensor,
    /// Chebyshev basis of the POI-similarity graph.
    pub poi_basis: Vec<Tensor>,
    /// Chebyshev basis of the region adjacency graph.
    pub geo_basis: Vec<Tensor>,
    pub norm: Normalization,
}

impl ModelContext {
    pub fn build(
        counts: &PoiCountMatrix,
        regions: &RegionGraph,
        threshold: f64,
        k: usize,
        norm: Normalization,
    ) -> Result<Self> {
        if counts.n_regions() != regions.region_count() {
            return Err(Error::invalid(format!(
                "POI table has {} regions, region graph has {}",
                counts.n_regions(),
                regions.region_count()
            )));
        }
        let pg = PoiGraph::build(counts, threshold, k)?;
        let geo = poi::scaled_laplacian(&poi::normalized_laplacian(&regions.adjacency_matrix())?)?;
        Ok(ModelContext {
            poi: pg.info,
            poi_basis: pg.basis,
            geo_basis: poi::cheb_basis(&geo.l_tilde, HOST_CHEB_ORDER)?,
            norm,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.poi.shape()[0]
    }
}

/// Region-major batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Normalised inputs `[N, B, T, D]`.
    pub inputs: Tensor,
    /// Raw targets `[N, B, T', D]`.
    pub targets: Tensor,
    /// One-hot calendar rows `[B, T + T', 103]`.
    pub embedding: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    host: Host,
    head: Option<Linear>,
    block: Option<MetaBlock>,
}

impl Model {
    /// Registers the host and then either its baseline head (DA off) or the
    /// attention block, drawing initial values from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<(Model, ParamStore)> {
        spec.ablation.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let host = Host::register(spec.host, spec.n_regions, spec.t_in, spec.in_dim, spec.d, &mut store, &mut init)?;
        let (head, block) = if spec.ablation.da {
            if host.width() != spec.d {
                return Err(Error::config("host width must equal the block's d"));
            }
            let block = MetaBlock::register(spec.block_config(), &mut store, &mut init)?;
            (None, Some(block))
        } else {
            if spec.t_in != spec.t_out {
                return Err(Error::config("the baseline head needs T' = T"));
            }
            let head = Linear::new(&mut store, &mut init, "host.head", spec.d, spec.in_dim, true)?;
            (Some(head), None)
        };
        Ok((Model { spec, host, head, block }, store))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn block(&self) -> Option<&MetaBlock> {
        self.block.as_ref()
    }

    /// Caches generated parameters for inference (no-op without the block).
    pub fn freeze(&mut self, store: &ParamStore, ctx: &ModelContext) -> Result<()> {
        match &mut self.block {
            Some(b) => b.freeze(store, &ctx.poi),
            None => Ok(()),
        }
    }

    pub fn unfreeze(&mut self) {
        if let Some(b) = &mut self.block {
            b.unfreeze();
        }
    }

    /// Predictions `[N, B, T', D]` in raw flow units.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, ctx: &ModelContext, batch: &Batch) -> Result<Var> {
        let n = self.spec.n_regions;
        if ctx.n_regions() != n {
            return Err(Error::invalid(format!(
                "context has {} regions, model has {n}",
                ctx.n_regions()
            )));
        }
        let x = tape.constant(batch.inputs.clone());
        let geo: Vec<Var> = if self.spec.host == HostKind::GcnTemporal {
            ctx.geo_basis
                .iter()
                .map(|t| t.clone().reshape(&[1, n, n]).map(|t| tape.constant(t)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let features = self.host.forward(tape, bound, x, &geo)?;
        let out = match (&self.block, &self.head) {
            (Some(block), _) => {
                let embedding = tape.constant(batch.embedding.clone());
                let poi = tape.constant(ctx.poi.clone().reshape(&[1, n, self.spec.poi_width])?);
                let basis: Vec<Var> = if self.spec.ablation.ar {
                    ctx.poi_basis
                        .iter()
                        .map(|t| t.clone().reshape(&[1, n, n]).map(|t| tape.constant(t)))
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                block.forward(
                    tape,
                    bound,
                    &BlockInputs {
                        features,
                        embedding,
                        poi,
                        basis: &basis,
                    },
                )?
            }
            (None, Some(head)) => head.apply(tape, bound, features)?,
            (None, None) => unreachable!("model has a head or a block"),
        };
        Ok(tape.affine(out, ctx.norm.std, ctx.norm.mean))
    }

    /// `(loss, predictions)` for one batch.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, ctx: &ModelContext, batch: &Batch) -> Result<(Var, Var)> {
        let pred = self.forward(tape, bound, ctx, batch)?;
        let target = tape.constant(batch.targets.clone());
        Ok((tape.mse(pred, target)?, pred))
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, store: &ParamStore, ctx: &ModelContext, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, ctx, batch)?;
        Ok(tape.value(out).clone())
    }
}

/// The small composed instance used for gradient checking and smoke tests:
/// N = 6, T = T' = 4, d = 8, d' = 4, C = 4, K = 3, batch of 3, with every
/// vector parameter (biases, norm gains) jittered off its initial value.
/// Outputs are denormalised with std 0.1 and targets lie in [-0.1, 0.1], so
/// the loss is O(1e-2) and its round-off stays far below the relative-error
/// guard of the gradient check.
#[derive(Clone, Debug)]
pub struct TinyInstance {
    pub model: Model,
    pub store: ParamStore,
    pub ctx: ModelContext,
    pub batch: Batch,
}

impl TinyInstance {
    pub fn new(host: HostKind, ablation: Ablation, seed: u64) -> Result<Self> {
        use crate::temporal::{build_embedding, window_ids, EMBED_WIDTH};
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, t, b) = (6, 4, 4, 3);
        let counts: Vec<f64> = (0..n * c).map(|_| rng.random_range(0..10) as f64).collect();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        let counts = PoiCountMatrix::new(counts, names)?;
        let graph = RegionGraph::from_edges(n, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (1, 6), (2, 5)])?;
        let ctx = ModelContext::build(&counts, &graph, 0.4, 3, Normalization { mean: 0.0, std: 0.1 })?;
        let spec = ModelSpec {
            n_regions: n,
            poi_width: 2 * c,
            t_in: t,
            t_out: t,
            in_dim: 1,
            d: 8,
            d_prime: 4,
            k: 3,
            host,
            ablation,
            temporal_hidden: 8,
            score_norm: true,
            theta_mode: ThetaMode::Matrix,
            generator_rank: None,
        };
        let (model, mut store) = Model::build(spec, seed)?;
        // Zero biases and unit gains place many activations exactly on relu
        // kinks or layer-norm scale symmetries; move off that special point.
        for t in store.tensors_mut() {
            if t.ndim() == 1 {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let mut emb = Vec::new();
        for s in 0..b {
            emb.extend(build_embedding(&window_ids(40 * s, 2 * t, 0, 0))?.into_data());
        }
        let batch = Batch {
            inputs: Tensor::from_fn(&[n, b, t, 1], |_| rng.random_range(-1.5..1.5)),
            targets: Tensor::from_fn(&[n, b, t, 1], |_| rng.random_range(-0.1..0.1)),
            embedding: Tensor::new(&[b, 2 * t, EMBED_WIDTH], emb)?,
        };
        Ok(TinyInstance { model, store, ctx, batch })
    }

    /// MSE loss of the instance's batch under the bound parameters.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        Ok(self.model.loss(tape, bound, &self.ctx, &self.batch)?.0)
    }
}
