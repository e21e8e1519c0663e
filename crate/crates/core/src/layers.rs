//! Parameterised building blocks shared by the hosts and the attention
//! block.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis: `y = x W + b`, `W` of shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` and, if requested, `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.weight(init, &format!("{name}.weight"), fan_in, fan_out)?;
        let bias = if bias {
            Some(store.zeros(&format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::invalid(format!(
                "linear layer expects last axis {}, got shape {:?}",
                self.fan_in, shape
            )));
        }
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let x3 = tape.reshape(x, &[1, rows, self.fan_in])?;
        let mut y = tape.bmm(x3, bound.var(self.weight), false, false)?;
        if let Some(b) = self.bias {
            y = tape.add_bias(y, bound.var(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.fan_out;
        tape.reshape(y, &out_shape)
    }
}

/// Layer normalisation over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.ones(&format!("{name}.gain"), &[width])?,
            bias: store.zeros(&format!("{name}.bias"), &[width])?,
            width,
        })
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), LN_EPS)
    }
}
