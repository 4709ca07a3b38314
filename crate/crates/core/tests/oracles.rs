mod support;

use lasoftmoe::encoder::clip_loss;
use lasoftmoe::moe::MoEVariant;
use lasoftmoe::rng::Rng;
use lasoftmoe::{Tape, Tensor};
use support::*;

#[test]
fn softmax_moe_matches_straight_line_oracle() {
    let err = moe_oracle_max_error(MoEVariant::SoftMax, 20, 11);
    assert!(err < 1e-10, "max deviation {err:e}");
}

#[test]
fn linear_attention_moe_matches_straight_line_oracle() {
    let err = moe_oracle_max_error(MoEVariant::LinearAttn, 20, 12);
    assert!(err < 1e-10, "max deviation {err:e}");
}

#[test]
fn contract_matches_nested_loops() {
    for seed in 0..5 {
        let err = contract_max_error(seed);
        assert!(err < 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn attention_matches_per_head_loops() {
    let err = attention_max_error(20, 3);
    assert!(err < 1e-10, "max deviation {err:e}");
}

fn loss_of(img: Tensor, txt: Tensor, temp: f64) -> f64 {
    let mut t = Tape::new();
    let (i, x, s) = (t.constant(img), t.constant(txt), t.constant(Tensor::scalar(temp)));
    let l = clip_loss(&mut t, i, x, s).unwrap();
    t.value(l).item()
}

#[test]
fn clip_loss_single_pair_is_zero() {
    let l = loss_of(Tensor::matrix(&[&[0.6, 0.8]]), Tensor::matrix(&[&[1.0, 0.0]]), 14.0);
    assert!(l.abs() < 1e-12, "{l}");
}

#[test]
fn clip_loss_zero_similarity_pair_is_ln2() {
    let img = Tensor::matrix(&[&[1.0, 0.0], &[1.0, 0.0]]);
    let txt = Tensor::matrix(&[&[0.0, 1.0], &[0.0, 1.0]]);
    let l = loss_of(img, txt, 1.0 / 0.07);
    assert!((l - 2f64.ln()).abs() < 1e-12, "{l}");
}

#[test]
fn clip_loss_matches_explicit_sum() {
    let mut rng = Rng::new(5);
    for n in 1..6 {
        let img = random_tensor(&[n, 4], &mut rng);
        let txt = random_tensor(&[n, 4], &mut rng);
        let temp = 0.5 + rng.uniform() * 3.0;
        let (a, b) = (to_mat(&img), to_mat(&txt));
        let s: Mat = (0..n)
            .map(|i| (0..n).map(|j| temp * (0..4).map(|k| a[i][k] * b[j][k]).sum::<f64>()).collect())
            .collect();
        let lse = |v: Vec<f64>| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let mut total = 0.0;
        for i in 0..n {
            total += s[i][i] - lse(s[i].clone());
            total += s[i][i] - lse((0..n).map(|j| s[j][i]).collect());
        }
        let want = -total / (2.0 * n as f64);
        let got = loss_of(img, txt, temp);
        assert!((got - want).abs() < 1e-12, "n={n}: {got} vs {want}");
    }
}
