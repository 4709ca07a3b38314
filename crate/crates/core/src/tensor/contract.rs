//! Two-operand Einstein-summation contraction.
//!
//! Specs use single-character axis labels, e.g. `"nd,esd->nes"`; whitespace
//! is ignored, so `"n d, e s d -> n e s"` is the same spec. Every label must
//! occur at most once per operand and in at least two of the three terms
//! (`a`, `b`, output). The second rule is what makes the reverse pass
//! expressible as two more contractions.

use std::fmt;

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractSpec {
    pub a: Vec<char>,
    pub b: Vec<char>,
    pub out: Vec<char>,
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| TensorError::Spec {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, out) = compact.split_once("->").ok_or_else(|| bad("missing '->'"))?;
        let (a, b) = lhs.split_once(',').ok_or_else(|| bad("expected two operands"))?;
        let parsed = Self {
            a: a.chars().collect(),
            b: b.chars().collect(),
            out: out.chars().collect(),
        };
        for (name, term) in [("a", &parsed.a), ("b", &parsed.b), ("output", &parsed.out)] {
            if term.iter().any(|c| !c.is_alphabetic()) {
                return Err(bad(&format!("non-letter label in {name}")));
            }
            for (i, c) in term.iter().enumerate() {
                if term[..i].contains(c) {
                    return Err(bad(&format!("label '{c}' repeated in {name}")));
                }
            }
        }
        for c in parsed.labels() {
            let hits = [&parsed.a, &parsed.b, &parsed.out]
                .iter()
                .filter(|t| t.contains(&c))
                .count();
            if hits < 2 {
                return Err(bad(&format!("label '{c}' appears in only one term")));
            }
        }
        Ok(parsed)
    }

    /// Output labels first, then summed labels, each in first-seen order.
    pub fn labels(&self) -> Vec<char> {
        let mut all: Vec<char> = self.out.clone();
        for &c in self.a.iter().chain(&self.b) {
            if !all.contains(&c) {
                all.push(c);
            }
        }
        all
    }

    /// Spec computing the gradient of the first operand.
    pub fn grad_a(&self) -> Self {
        Self {
            a: self.out.clone(),
            b: self.b.clone(),
            out: self.a.clone(),
        }
    }

    /// Spec computing the gradient of the second operand.
    pub fn grad_b(&self) -> Self {
        Self {
            a: self.out.clone(),
            b: self.a.clone(),
            out: self.b.clone(),
        }
    }
}

impl fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.a), s(&self.b), s(&self.out))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

pub fn contract<S: Scalar>(spec: &ContractSpec, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != spec.a.len() || b.rank() != spec.b.len() {
        return Err(TensorError::Shape {
            op: "contract",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let labels = spec.labels();
    let mut extent = vec![0usize; labels.len()];
    let mut sa = vec![0usize; labels.len()];
    let mut sb = vec![0usize; labels.len()];
    let (a_st, b_st) = (strides(a.shape()), strides(b.shape()));
    for (li, c) in labels.iter().enumerate() {
        let ea = spec.a.iter().position(|x| x == c).map(|p| (a.shape()[p], a_st[p]));
        let eb = spec.b.iter().position(|x| x == c).map(|p| (b.shape()[p], b_st[p]));
        extent[li] = match (ea, eb) {
            (Some((x, _)), Some((y, _))) if x != y => {
                return Err(TensorError::Shape {
                    op: "contract",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
            (Some((x, _)), _) | (None, Some((x, _))) => x,
            (None, None) => unreachable!("output label absent from both operands"),
        };
        sa[li] = ea.map_or(0, |(_, s)| s);
        sb[li] = eb.map_or(0, |(_, s)| s);
    }
    let n_out = spec.out.len();
    let out_shape: Vec<usize> = extent[..n_out].to_vec();
    let out_len: usize = out_shape.iter().product();
    let sum_ext = &extent[n_out..];
    let sum_len: usize = sum_ext.iter().product();
    let mut out = vec![S::zero(); out_len];
    if out_len == 0 || sum_len == 0 {
        return Tensor::new(&out_shape, out);
    }

    let (ad, bd) = (a.data(), b.data());
    let mut idx = vec![0usize; labels.len()];
    for (o, slot) in out.iter_mut().enumerate() {
        // decode output index
        let mut rem = o;
        for li in (0..n_out).rev() {
            idx[li] = rem % extent[li];
            rem /= extent[li];
        }
        let base_a: usize = (0..n_out).map(|li| idx[li] * sa[li]).sum();
        let base_b: usize = (0..n_out).map(|li| idx[li] * sb[li]).sum();
        for li in n_out..labels.len() {
            idx[li] = 0;
        }
        let mut acc = S::zero();
        let (mut oa, mut ob) = (base_a, base_b);
        for _ in 0..sum_len {
            acc = acc + ad[oa] * bd[ob];
            // advance the summed-label odometer
            let mut li = labels.len();
            while li > n_out {
                li -= 1;
                idx[li] += 1;
                oa += sa[li];
                ob += sb[li];
                if idx[li] < extent[li] {
                    break;
                }
                oa -= sa[li] * extent[li];
                ob -= sb[li] * extent[li];
                idx[li] = 0;
            }
        }
        *slot = acc;
    }
    Tensor::new(&out_shape, out)
}
