//! Forward kernels shared by the tape and by test oracles.

use crate::scalar::Scalar;

/// Pointwise nonlinearities recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// Exact GELU, `0.5 x (1 + erf(x / √2))`.
    Gelu,
    /// ELU with alpha = 1.
    Elu,
    Sigmoid,
    Exp,
    /// Natural log; non-positive arguments are a domain error.
    Log,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Gelu => "gelu",
            Unary::Elu => "elu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
        }
    }

    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Unary::Gelu => S::lit(0.5) * x * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).error_fn()),
            Unary::Elu => {
                if x > S::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
        }
    }

    /// Derivative at `x`, given `y = apply(x)`.
    pub fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Unary::Gelu => {
                let cdf = S::lit(0.5) * (S::one() + (x * S::lit(std::f64::consts::FRAC_1_SQRT_2)).error_fn());
                let pdf = (-(x * x) * S::lit(0.5)).exp() * S::lit(0.398_942_280_401_432_7);
                cdf + x * pdf
            }
            Unary::Elu => {
                if x > S::zero() {
                    S::one()
                } else {
                    x.exp()
                }
            }
            Unary::Sigmoid => y * (S::one() - y),
            Unary::Exp => y,
            Unary::Log => x.recip(),
        }
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `out[m×p] = a[m×k] · b[k×p]`.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == S::zero() {
                continue;
            }
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×p] += aᵀ · g` with `a: m×k`, `g: m×p`.
pub fn matmul_at_b_acc<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[t * p..(t + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` with `g: m×p`, `b: k×p`.
pub fn matmul_a_bt_acc<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for t in 0..k {
            let brow = &b[t * p..(t + 1) * p];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + t] = out[i * k + t] + acc;
        }
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<S: Scalar>(x: &[S], shape: &[usize], axis: usize, log: bool) -> Vec<S> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut mx = S::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            let mut total = S::zero();
            for j in 0..len {
                total = total + (x[idx(j)] - mx).exp();
            }
            if log {
                let lse = total.ln();
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] - mx - lse;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = (x[idx(j)] - mx).exp() / total;
                }
            }
        }
    }
    out
}
