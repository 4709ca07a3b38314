//! Layer building blocks composed from tape primitives.

use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Result, Tape, Tensor, Var};
use crate::rng::Rng;

/// Affine map `x W + b` with `W: in×out`, `b: out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias; the stream is keyed by parameter name.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize, rng: &Rng) -> Self {
        let wname = format!("{name}.w");
        let w = Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), &mut rng.derive(&wname));
        Self {
            w: store.add(wname, w),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeroed<S: Scalar>(store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        layer_norm(tape, x, p.var(self.gain), p.var(self.bias), S::lit(LN_EPS))
    }
}

/// Row-wise layer normalization followed by the affine `gain ⊙ x̂ + bias`.
pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
    let z = tape.standardize_rows(x, eps)?;
    let z = tape.mul_row(z, gain)?;
    tape.add_row(z, bias)
}
