//! Minimal host predictors producing pre-head features `[N, B, T, d]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Initializer, ParamId, ParamStore};

/// Order of the host's graph convolution over the region graph.
pub const HOST_CHEB_ORDER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostKind {
    /// Shared two-layer MLP over each region's flattened input window.
    TemporalLinear,
    /// Chebyshev graph convolution over the region graph, then a learned
    /// mixing of the time steps.
    GcnTemporal,
}

impl HostKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HostKind::TemporalLinear => "temporal_linear",
            HostKind::GcnTemporal => "gcn_temporal",
        }
    }
}

impl std::str::FromStr for HostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal_linear" => Ok(HostKind::TemporalLinear),
            "gcn_temporal" => Ok(HostKind::GcnTemporal),
            other => Err(Error::invalid(format!("unknown host kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
enum HostLayers {
    TemporalLinear {
        fc1: Linear,
        fc2: Linear,
    },
    GcnTemporal {
        thetas: Vec<ParamId>,
        cheb_bias: ParamId,
        mix: ParamId,
        mix_bias: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Host {
    kind: HostKind,
    n_regions: usize,
    t: usize,
    in_dim: usize,
    d: usize,
    layers: HostLayers,
}

impl Host {
    pub fn register(
        kind: HostKind,
        n_regions: usize,
        t: usize,
        in_dim: usize,
        d: usize,
        store: &mut ParamStore,
        init: &mut Initializer,
    ) -> Result<Self> {
        if n_regions == 0 || t == 0 || in_dim == 0 || d == 0 {
            return Err(Error::config("host dimensions must be positive"));
        }
        let layers = match kind {
            HostKind::TemporalLinear => {
                let hidden = 2 * d;
                HostLayers::TemporalLinear {
                    fc1: Linear::new(store, init, "host.fc1", t * in_dim, hidden, true)?,
                    fc2: Linear::new(store, init, "host.fc2", hidden, t * d, true)?,
                }
            }
            HostKind::GcnTemporal => {
                let thetas = (0..HOST_CHEB_ORDER)
                    .map(|k| store.weight(init, &format!("host.cheb.theta_{k}"), in_dim, d))
                    .collect::<Result<Vec<_>>>()?;
                let cheb_bias = store.zeros("host.cheb.bias", &[d])?;
                let mix = store.weight(init, "host.temporal.weight", t, t)?;
                let mix_bias = store.zeros("host.temporal.bias", &[d])?;
                HostLayers::GcnTemporal {
                    thetas,
                    cheb_bias,
                    mix,
                    mix_bias,
                }
            }
        };
        Ok(Host {
            kind,
            n_regions,
            t,
            in_dim,
            d,
            layers,
        })
    }

    pub fn kind(&self) -> HostKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Features `[N, B, T, d]` from normalised inputs `[N, B, T, D]`.
    /// `geo_basis` is the Chebyshev basis of the region graph, each
    /// `[1, N, N]`; the temporal host ignores it.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, geo_basis: &[Var]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[0] != self.n_regions || shape[2] != self.t || shape[3] != self.in_dim {
            return Err(Error::invalid(format!(
                "host input must be [{}, B, {}, {}], got {:?}",
                self.n_regions, self.t, self.in_dim, shape
            )));
        }
        let (n, b, t, d) = (self.n_regions, shape[1], self.t, self.d);
        match &self.layers {
            HostLayers::TemporalLinear { fc1, fc2 } => {
                let flat = tape.reshape(x, &[n, b, t * self.in_dim])?;
                let h = fc1.apply(tape, bound, flat)?;
                let h = tape.relu(h);
                let y = fc2.apply(tape, bound, h)?;
                let y = tape.relu(y);
                tape.reshape(y, &[n, b, t, d])
            }
            HostLayers::GcnTemporal {
                thetas,
                cheb_bias,
                mix,
                mix_bias,
            } => {
                if geo_basis.len() != thetas.len() {
                    return Err(Error::invalid(format!(
                        "host needs {} Chebyshev matrices, got {}",
                        thetas.len(),
                        geo_basis.len()
                    )));
                }
                for &g in geo_basis {
                    if tape.shape(g) != [1, n, n] {
                        return Err(Error::invalid(format!(
                            "region graph operator {:?} does not match {n} regions",
                            tape.shape(g)
                        )));
                    }
                }
                let x2 = tape.reshape(x, &[1, n, b * t * self.in_dim])?;
                let mut acc: Option<Var> = None;
                for (&g, &theta) in geo_basis.iter().zip(thetas) {
                    let y = tape.bmm(g, x2, false, false)?;
                    let y = tape.reshape(y, &[1, n * b * t, self.in_dim])?;
                    let w = bound.var(theta);
                    let y = tape.bmm(y, w, false, false)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => tape.add(a, y)?,
                    });
                }
                let h = tape.add_bias(acc.expect("non-empty basis"), bound.var(*cheb_bias))?;
                let h = tape.relu(h);
                let h = tape.reshape(h, &[n * b, t, d])?;
                let m = bound.var(*mix);
                let y = tape.bmm(m, h, false, false)?;
                let y = tape.add_bias(y, bound.var(*mix_bias))?;
                let y = tape.relu(y);
                tape.reshape(y, &[n, b, t, d])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn run(host: &Host, store: &ParamStore, x: &Tensor, basis: &[Tensor]) -> Tensor {
        let n = x.shape()[0];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let bv: Vec<Var> = basis
            .iter()
            .map(|t| tape.constant(t.clone().reshape(&[1, n, n]).unwrap()))
            .collect();
        let y = host.forward(&mut tape, &bound, xv, &bv).unwrap();
        tape.value(y).clone()
    }

    fn basis_of(a: &Tensor) -> Vec<Tensor> {
        let l = crate::poi::normalized_laplacian(a).unwrap();
        let lt = crate::poi::scaled_laplacian(&l).unwrap().l_tilde;
        crate::poi::cheb_basis(&lt, HOST_CHEB_ORDER).unwrap()
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, &[5, 3, 4, 1]);
        let basis = basis_of(&Tensor::zeros(&[5, 5]));
        for kind in [HostKind::TemporalLinear, HostKind::GcnTemporal] {
            let mut store = ParamStore::new();
            let host = Host::register(kind, 5, 4, 1, 6, &mut store, &mut Initializer::new(1)).unwrap();
            assert_eq!(run(&host, &store, &x, &basis).shape(), &[5, 3, 4, 6]);
        }
    }

    #[test]
    fn temporal_host_ignores_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[4, 2, 4, 1]);
        let mut store = ParamStore::new();
        let host = Host::register(HostKind::TemporalLinear, 4, 4, 1, 3, &mut store, &mut Initializer::new(2)).unwrap();
        let mut a = Tensor::zeros(&[4, 4]);
        a.set(&[0, 1], 1.0);
        a.set(&[1, 0], 1.0);
        assert_eq!(
            run(&host, &store, &x, &basis_of(&a)),
            run(&host, &store, &x, &basis_of(&Tensor::zeros(&[4, 4])))
        );
    }

    #[test]
    fn gcn_on_edgeless_graph_is_per_region_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, b, t, d) = (5, 2, 4, 3);
        let x = random(&mut rng, &[n, b, t, 1]);
        let mut store = ParamStore::new();
        let host = Host::register(HostKind::GcnTemporal, n, t, 1, d, &mut store, &mut Initializer::new(4)).unwrap();
        let bias_id = store.id_of("host.cheb.bias").unwrap();
        store.get_mut(bias_id).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let got = run(&host, &store, &x, &basis_of(&Tensor::zeros(&[n, n])));

        // Hand-wired: every T_k is the identity, so the graph stage is
        // x * (theta_0 + theta_1 + theta_2) + bias.
        let theta: Vec<f64> = (0..d)
            .map(|c| (0..3).map(|k| store.by_name(&format!("host.cheb.theta_{k}")).unwrap().data()[c]).sum())
            .collect();
        let bias = store.by_name("host.cheb.bias").unwrap().data().to_vec();
        let mix = store.by_name("host.temporal.weight").unwrap().clone();
        for r in 0..n {
            for bi in 0..b {
                for ti in 0..t {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for s in 0..t {
                            let h = (x.at(&[r, bi, s, 0]) * theta[c] + bias[c]).max(0.0);
                            acc += mix.at(&[ti, s]) * h;
                        }
                        assert!((got.at(&[r, bi, ti, c]) - acc.max(0.0)).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn gcn_rejects_mismatched_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 1, 4, 1]);
        let mut store = ParamStore::new();
        let host = Host::register(HostKind::GcnTemporal, 4, 4, 1, 2, &mut store, &mut Initializer::new(0)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let bad: Vec<Var> = basis_of(&Tensor::zeros(&[3, 3]))
            .into_iter()
            .map(|t| tape.constant(t.reshape(&[1, 3, 3]).unwrap()))
            .collect();
        assert!(host.forward(&mut tape, &bound, xv, &bad).is_err());
    }
}
