//! Central finite-difference check of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum, with both gradients there.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates whose gradient magnitude exceeds the guard, i.e. where
    /// the check is a true relative comparison.
    pub above_guard: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_GUARD.max(analytic.abs() + numeric.abs())
}

/// Compares the gradient of the scalar `loss` with central differences of
/// width `2 * step` for every coordinate of every parameter.
pub fn grad_check<F>(store: &ParamStore, loss: F, step: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let l = loss(&mut tape, &bound)?;
    if tape.value(l).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar loss"));
    }
    let grads = tape.backward(l)?;

    // Perturbed evaluations reuse one tape: parameters are bound once as
    // constants and everything after them is replayed per evaluation.
    let mut probe = Tape::new();
    let fixed = store.bind(&mut probe, false);
    let base = probe.len();
    let eval = |probe: &mut Tape| -> Result<f64> {
        probe.truncate(base);
        let l = loss(probe, &fixed)?;
        Ok(probe.value(l).data()[0])
    };
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let analytic = grads.get(bound.var(id)).map(|g| g.data().to_vec());
        let len = store.get(id).len();
        let var = fixed.var(id);
        let (mut max_rel, mut worst, mut at, mut above) = (0.0f64, 0, (0.0, 0.0), 0);
        for j in 0..len {
            let orig = store.get(id).data()[j];
            probe.leaf_mut(var)?.data_mut()[j] = orig + step;
            let up = eval(&mut probe)?;
            probe.leaf_mut(var)?.data_mut()[j] = orig - step;
            let down = eval(&mut probe)?;
            probe.leaf_mut(var)?.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let ga = analytic.as_ref().map_or(0.0, |g| g[j]);
            let rel = relative_error(ga, numeric);
            if ga.abs() + numeric.abs() > REL_GUARD {
                above += 1;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = j;
                at = (ga, numeric);
            }
        }
        out.push(ParamCheck {
            name: store.name(id).to_string(),
            coords: len,
            max_rel_error: max_rel,
            worst,
            analytic: at.0,
            numeric: at.1,
            above_guard: above,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_head_matches_closed_form() {
        // loss = mean((w x - y)^2), dloss/dw = 2 mean((w x - y) x).
        let x = Tensor::new(&[1, 5, 1], vec![0.5, -1.0, 2.0, 0.25, 3.0]).unwrap();
        let y = Tensor::new(&[1, 5, 1], vec![1.0, 0.0, -2.0, 0.5, 4.0]).unwrap();
        let mut store = ParamStore::new();
        let w = store.register("head.weight", Tensor::new(&[1, 1, 1], vec![0.7]).unwrap()).unwrap();
        let loss = |tape: &mut Tape, bound: &Bound| {
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let p = tape.bmm(xv, bound.var(w), false, false)?;
            tape.mse(p, yv)
        };
        let report = grad_check(&store, loss, DEFAULT_STEP).unwrap();
        assert!(report[0].max_rel_error < 1e-10, "{report:?}");

        let closed: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(xi, yi)| 2.0 * (0.7 * xi - yi) * xi)
            .sum::<f64>()
            / 5.0;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let l = loss(&mut tape, &bound).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(relative_error(g.get(bound.var(w)).unwrap().data()[0], closed) < 1e-12);
    }

    #[test]
    fn zero_loss_point_is_guarded() {
        let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.map(|v| 2.0 * v);
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::new(&[1, 1, 1], vec![2.0]).unwrap()).unwrap();
        let report = grad_check(
            &store,
            |tape, bound| {
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let p = tape.bmm(xv, bound.var(w), false, false)?;
                tape.mse(p, yv)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report[0].max_rel_error < 1e-4);
    }

    #[test]
    fn relative_error_guard() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
    }
}
