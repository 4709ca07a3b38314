//! Central finite-difference check of tape gradients.
//!
//! Discrepancy per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
//!
//! The floor keeps coordinates whose true gradient is exactly zero from being
//! judged on central-difference round-off alone (about 1e-9 at h = 1e-5).

use super::{Binding, ParamStore, Result, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;

const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Largest discrepancy per checked tensor, in check order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            tol,
            passed: true,
            per_tensor: Vec::new(),
        }
    }

    fn record(&mut self, name: &str, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
        match self.per_tensor.last_mut() {
            Some((n, worst)) if n == name => *worst = worst.max(rel),
            _ => self.per_tensor.push((name.to_string(), rel)),
        }
        self.passed = self.max_rel_error < self.tol;
    }
}

fn coords(len: usize, cap: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match cap {
        Some(k) if k < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            let mut pick = all[..k].to_vec();
            pick.sort_unstable();
            pick
        }
        _ => (0..len).collect(),
    }
}

/// Checks `d f(x) / d x` for a scalar-valued `f` at `x`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad_tensor(xv);

    let eval = |probe: Tensor<S>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item().as_f64())
    };
    let mut report = GradCheckReport::new(tol);
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + S::lit(h);
        minus.data_mut()[i] = minus.data()[i] - S::lit(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record("x", analytic.data()[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Checks gradients of a scalar loss with respect to every parameter in `store`.
///
/// With `cap = Some(k)`, at most `k` coordinates per tensor are probed, chosen
/// by a stream seeded from `seed`.
pub fn grad_check_params<S, F>(
    store: &ParamStore<S>,
    f: F,
    h: f64,
    tol: f64,
    cap: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &Binding) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let loss = f(&mut tape, &binding)?;
    tape.backward(loss)?;
    let analytic = store.grads(&tape, &binding);

    let eval = |probe: &ParamStore<S>| -> Result<f64> {
        let mut t = Tape::new();
        let b = probe.bind(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item().as_f64())
    };
    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport::new(tol);
    let mut probe = store.clone();
    for id in store.ids() {
        let name = store.name(id).to_string();
        for i in coords(store.get(id).len(), cap, &mut rng) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + S::lit(h);
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - S::lit(h);
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            report.record(&name, analytic[id.index()].data()[i].as_f64(), (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_discrepancy() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn softmax_sum_of_squares_passes() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v, 0)?;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::randn(&[3, 2], 1.0, &mut rng));
        let rhs = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let run = |corrupt: bool| {
            grad_check_params(
                &store,
                |t, b| {
                    if corrupt {
                        t.corrupt_matmul_gradient(1.5);
                    }
                    let r = t.constant(rhs.clone());
                    let y = t.matmul(b.var(w), r)?;
                    let y = t.gelu(y);
                    Ok(t.sum(y))
                },
                1e-5,
                1e-4,
                None,
                0,
            )
            .unwrap()
        };
        assert!(run(false).passed);
        let bad = run(true);
        assert!(!bad.passed);
        assert!(bad.max_rel_error > 0.1);
    }

    #[test]
    fn capped_coordinates() {
        let mut store = ParamStore::<f64>::new();
        store.add("big", Tensor::ones(&[10, 10]));
        let r = grad_check_params(
            &store,
            |t, b| Ok(t.sum(b.var(store.id("big").unwrap()))),
            1e-5,
            1e-4,
            Some(7),
            1,
        )
        .unwrap();
        assert_eq!(r.checked, 7);
        assert_eq!(r.per_tensor.len(), 1);
    }
}
