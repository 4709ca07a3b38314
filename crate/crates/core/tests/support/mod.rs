//! Independent reference implementations written as plain nested loops over
//! `Vec<f64>`, sharing nothing with the tape kernels except parameter values.

#![allow(dead_code)]

use lasoftmoe::encoder::{EncoderBlock, EncoderConfig, ModelVariant};
use lasoftmoe::moe::{soft_moe_core, soft_moe_forward, ExpertNet, MoEVariant, SoftMoEParams, SQUASH_EPS};
use lasoftmoe::rng::Rng;
use lasoftmoe::tensor::{contract, Binding, ContractSpec, ParamId, ParamStore, Tape, Tensor};
use lasoftmoe::data::Label;
use lasoftmoe::trainkit::ScoreSet;

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

fn param_mat(store: &ParamStore<f64>, id: ParamId) -> Mat {
    to_mat(store.get(id))
}

fn param_vec(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let (k, m) = (w.len(), b.len());
    x.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let mut acc = b[j];
                    for i in 0..k {
                        acc += row[i] * w[i][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dispatch weights: for each slot column, softmax over tokens.
pub fn dispatch_oracle(logits: &Mat) -> Mat {
    let (n, m) = (logits.len(), logits[0].len());
    let mut d = vec![vec![0.0; m]; n];
    for j in 0..m {
        let mx = (0..n).map(|i| logits[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (logits[i][j] - mx).exp()).sum();
        for i in 0..n {
            d[i][j] = (logits[i][j] - mx).exp() / z;
        }
    }
    d
}

/// Softmax combine weights: for each token row, softmax over slots.
pub fn combine_softmax_oracle(logits: &Mat) -> Mat {
    logits
        .iter()
        .map(|row| {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            row.iter().map(|v| (v - mx).exp() / z).collect()
        })
        .collect()
}

/// Linear-attention combine: `φ(Z)(φ(Z)ᵀ Z)`, then per-row standardization and sigmoid.
pub fn combine_linear_attn_oracle(logits: &Mat) -> Mat {
    let (n, m) = (logits.len(), logits[0].len());
    let f: Mat = logits.iter().map(|r| r.iter().map(|&v| elu1(v)).collect()).collect();
    let mut kv = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in 0..m {
            for t in 0..n {
                kv[a][b] += f[t][a] * logits[t][b];
            }
        }
    }
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        let mut raw = vec![0.0; m];
        for b in 0..m {
            for a in 0..m {
                raw[b] += f[i][a] * kv[a][b];
            }
        }
        let mean = raw.iter().sum::<f64>() / m as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let sd = (var + SQUASH_EPS).sqrt();
        for b in 0..m {
            out[i][b] = sigmoid((raw[b] - mean) / sd);
        }
    }
    out
}

fn expert_oracle(store: &ParamStore<f64>, e: &ExpertNet, x: &Mat) -> Mat {
    let h = affine(x, &param_mat(store, e.fc1.w), &param_vec(store, e.fc1.b));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    affine(&h, &param_mat(store, e.fc2.w), &param_vec(store, e.fc2.b))
}

/// The MoE core on projected tokens `x` (`n×d`): dispatch, slot mixing,
/// per-expert networks, combine.
pub fn moe_core_oracle(store: &ParamStore<f64>, layer: &SoftMoEParams, x: &Mat, variant: MoEVariant) -> Mat {
    let (n, d) = (x.len(), x[0].len());
    let phi = param_mat(store, layer.phi);
    let m = layer.slots();
    let mut logits = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for k in 0..d {
                logits[i][j] += x[i][k] * phi[k][j];
            }
        }
    }
    let disp = dispatch_oracle(&logits);
    let mut slots = vec![vec![0.0; d]; m];
    for j in 0..m {
        for k in 0..d {
            for i in 0..n {
                slots[j][k] += disp[i][j] * x[i][k];
            }
        }
    }
    let mut y_tilde = Vec::with_capacity(m);
    for (ei, expert) in layer.experts.iter().enumerate() {
        let group = slots[ei * layer.s..(ei + 1) * layer.s].to_vec();
        y_tilde.extend(expert_oracle(store, expert, &group));
    }
    let c = match variant {
        MoEVariant::SoftMax => combine_softmax_oracle(&logits),
        MoEVariant::LinearAttn => combine_linear_attn_oracle(&logits),
    };
    let mut y = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in 0..d {
            for j in 0..m {
                y[i][k] += c[i][j] * y_tilde[j][k];
            }
        }
    }
    y
}

/// The full layer including in/out projections.
pub fn moe_layer_oracle(store: &ParamStore<f64>, layer: &SoftMoEParams, x: &Mat, variant: MoEVariant) -> Mat {
    let h = affine(x, &param_mat(store, layer.in_proj.w), &param_vec(store, layer.in_proj.b));
    let y = moe_core_oracle(store, layer, &h, variant);
    affine(&y, &param_mat(store, layer.out_proj.w), &param_vec(store, layer.out_proj.b))
}

/// Sizes for one random MoE configuration, every dimension in `1..=8`.
#[derive(Debug, Clone, Copy)]
pub struct MoeDims {
    pub n: usize,
    pub d_model: usize,
    pub d: usize,
    pub e: usize,
    pub s: usize,
}

impl MoeDims {
    pub fn random(rng: &mut Rng) -> Self {
        let mut pick = || 1 + rng.below(8);
        Self {
            n: pick(),
            d_model: pick(),
            d: pick(),
            e: pick(),
            s: pick(),
        }
    }
}

/// Builds a layer with perturbed biases so every parameter matters.
pub fn random_layer(dims: MoeDims, seed: u64) -> (ParamStore<f64>, SoftMoEParams, Tensor<f64>) {
    let mut store = ParamStore::new();
    let rng = Rng::new(seed);
    let layer = SoftMoEParams::new(&mut store, "moe", dims.d_model, dims.d, dims.e, dims.s, &rng).unwrap();
    let mut jitter = rng.derive("bias-jitter");
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = 0.1 * jitter.normal();
            }
        }
    }
    let x = random_tensor(&[dims.n, dims.d_model], &mut rng.derive("x"));
    (store, layer, x)
}

pub fn tape_moe_layer(store: &ParamStore<f64>, layer: &SoftMoEParams, x: &Tensor<f64>, variant: MoEVariant) -> Mat {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = soft_moe_forward(&mut tape, &p, xv, layer, variant).unwrap().output;
    to_mat(tape.value(out))
}

/// Max deviation from the MoE oracle over `configs` random configurations.
pub fn moe_oracle_max_error(variant: MoEVariant, configs: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for c in 0..configs {
        let dims = MoeDims::random(&mut rng);
        let (store, layer, x) = random_layer(dims, seed.wrapping_mul(1000).wrapping_add(c as u64));
        let got = tape_moe_layer(&store, &layer, &x, variant);
        let want = moe_layer_oracle(&store, &layer, &to_mat(&x), variant);
        worst = worst.max(max_diff(&got, &want));
    }
    worst
}

/// Stochasticity of the dispatch and combine weights on one random instance:
/// `(max |col sum D - 1|, max |row sum C_softmax - 1|, min C_la, max C_la)`.
pub fn weight_invariants(dims: MoeDims, scale: f64, seed: u64) -> (f64, f64, f64, f64) {
    let mut store = ParamStore::new();
    let rng = Rng::new(seed);
    let layer = SoftMoEParams::new(&mut store, "moe", dims.d, dims.d, dims.e, dims.s, &rng).unwrap();
    let mut xr = rng.derive("x");
    let x = Tensor::randn(&[dims.n, dims.d], scale, &mut xr);
    let mut col_dev: f64 = 0.0;
    let mut row_dev: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for variant in [MoEVariant::SoftMax, MoEVariant::LinearAttn] {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let phi = p.var(layer.phi);
        let trace = soft_moe_core(&mut tape, &p, xv, phi, &layer.experts, variant).unwrap();
        let d = to_mat(tape.value(trace.dispatch));
        let c = to_mat(tape.value(trace.combine));
        for j in 0..d[0].len() {
            let s: f64 = d.iter().map(|r| r[j]).sum();
            col_dev = col_dev.max((s - 1.0).abs());
        }
        match variant {
            MoEVariant::SoftMax => {
                for r in &c {
                    row_dev = row_dev.max((r.iter().sum::<f64>() - 1.0).abs());
                }
            }
            MoEVariant::LinearAttn => {
                for v in c.iter().flatten() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
        }
    }
    (col_dev, row_dev, lo, hi)
}

/// Nested-loop einsum over every index assignment.
pub fn contract_oracle(spec: &str, a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let parsed = ContractSpec::parse(spec).unwrap();
    let mut labels: Vec<char> = Vec::new();
    for &c in parsed.a.iter().chain(&parsed.b) {
        if !labels.contains(&c) {
            labels.push(c);
        }
    }
    let extent = |c: char| -> usize {
        if let Some(p) = parsed.a.iter().position(|&x| x == c) {
            a.shape()[p]
        } else {
            b.shape()[parsed.b.iter().position(|&x| x == c).unwrap()]
        }
    };
    let ext: Vec<usize> = labels.iter().map(|&c| extent(c)).collect();
    let out_shape: Vec<usize> = parsed.out.iter().map(|&c| extent(c)).collect();
    let flat = |term: &[char], shape: &[usize], idx: &[usize]| -> usize {
        let mut off = 0;
        for (p, c) in term.iter().enumerate() {
            let li = labels.iter().position(|x| x == c).unwrap();
            off = off * shape[p] + idx[li];
        }
        off
    };
    let mut out = vec![0.0; out_shape.iter().product()];
    let total: usize = ext.iter().product();
    let mut idx = vec![0usize; labels.len()];
    for _ in 0..total {
        let va = a.data()[flat(&parsed.a, a.shape(), &idx)];
        let vb = b.data()[flat(&parsed.b, b.shape(), &idx)];
        out[flat(&parsed.out, &out_shape, &idx)] += va * vb;
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            if idx[k] < ext[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(&out_shape, out).unwrap()
}

/// Specs exercised against the nested-loop oracle, with operand shapes.
pub const CONTRACT_CASES: &[(&str, &[usize], &[usize])] = &[
    ("ij,jk->ik", &[3, 4], &[4, 5]),
    ("ij,kj->ik", &[3, 4], &[5, 4]),
    ("ji,jk->ik", &[4, 3], &[4, 5]),
    ("nd,esd->nes", &[4, 3], &[2, 5, 3]),
    ("nes,esd->nd", &[4, 2, 5], &[2, 5, 3]),
    ("bij,bjk->bik", &[2, 3, 4], &[2, 4, 3]),
    ("i,j->ij", &[4], &[3]),
    ("ij,ij->i", &[3, 5], &[3, 5]),
    ("abc,cd->abd", &[2, 3, 4], &[4, 2]),
    ("ij,j->i", &[5, 3], &[3]),
];

pub fn contract_max_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for (spec, sa, sb) in CONTRACT_CASES {
        let a = random_tensor(sa, &mut rng);
        let b = random_tensor(sb, &mut rng);
        let got = contract(&ContractSpec::parse(spec).unwrap(), &a, &b).unwrap();
        let want = contract_oracle(spec, &a, &b);
        assert_eq!(got.shape(), want.shape(), "{spec}");
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

/// Multi-head attention computed head by head with explicit loops.
pub fn attention_oracle(store: &ParamStore<f64>, attn: &lasoftmoe::encoder::Attention, x: &Mat) -> Mat {
    let q = affine(x, &param_mat(store, attn.q.w), &param_vec(store, attn.q.b));
    let k = affine(x, &param_mat(store, attn.k.w), &param_vec(store, attn.k.b));
    let v = affine(x, &param_mat(store, attn.v.w), &param_vec(store, attn.v.b));
    let (n, dm) = (x.len(), q[0].len());
    let dk = dm / attn.heads;
    let mut cat = vec![vec![0.0; dm]; n];
    for h in 0..attn.heads {
        let off = h * dk;
        for i in 0..n {
            let mut w = vec![0.0; n];
            for j in 0..n {
                for t in 0..dk {
                    w[j] += q[i][off + t] * k[j][off + t];
                }
                w[j] /= (dk as f64).sqrt();
            }
            let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w.iter().map(|a| (a - mx).exp()).sum();
            for j in 0..n {
                let p = (w[j] - mx).exp() / z;
                for t in 0..dk {
                    cat[i][off + t] += p * v[j][off + t];
                }
            }
        }
    }
    affine(&cat, &param_mat(store, attn.o.w), &param_vec(store, attn.o.b))
}

pub fn attention_max_error(configs: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for c in 0..configs {
        let heads = 1 + rng.below(4);
        let dm = heads * (1 + rng.below(4));
        let n = 1 + rng.below(8);
        let mut store = ParamStore::new();
        let attn = lasoftmoe::encoder::Attention::new(&mut store, "attn", dm, heads, &Rng::new(seed + c as u64));
        let x = random_tensor(&[n, dm], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = attn.forward(&mut tape, &p, xv).unwrap();
        worst = worst.max(max_diff(&to_mat(tape.value(out)), &attention_oracle(&store, &attn, &to_mat(&x))));
    }
    worst
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = x.shape()[1];
    let data = perm.iter().flat_map(|&i| x.row(i).to_vec()).collect();
    Tensor::new(&[perm.len(), c], data).unwrap()
}

pub fn eval_rows(store: &ParamStore<f64>, x: &Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, &Binding, lasoftmoe::tensor::Var) -> lasoftmoe::tensor::Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, &p, xv);
    tape.value(out).clone()
}

/// `max |f(Px) - P f(x)|` for a random permutation `P`.
fn equivariance_gap(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    rng: &mut Rng,
    f: &dyn Fn(&mut Tape<f64>, &Binding, lasoftmoe::tensor::Var) -> lasoftmoe::tensor::Var,
) -> f64 {
    let mut perm: Vec<usize> = (0..x.shape()[0]).collect();
    rng.shuffle(&mut perm);
    let fx = eval_rows(store, x, f);
    let fpx = eval_rows(store, &permute_rows(x, &perm), f);
    fpx.max_abs_diff(&permute_rows(&fx, &perm))
}

/// Worst equivariance gap of both MoE variants over random layers.
pub fn moe_equivariance_error(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut dims = MoeDims::random(&mut rng);
        dims.n = 2 + rng.below(7);
        let (store, layer, x) = random_layer(dims, seed + 100 + t as u64);
        for variant in [MoEVariant::SoftMax, MoEVariant::LinearAttn] {
            let g = equivariance_gap(&store, &x, &mut rng, &|tape, p, xv| {
                soft_moe_forward(tape, p, xv, &layer, variant).unwrap().output
            });
            worst = worst.max(g);
        }
    }
    worst
}

/// Worst equivariance gap of the MoE-augmented encoder block. Tokens enter
/// the block directly, so no positional embedding is involved.
pub fn block_equivariance_error(trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        for variant in [ModelVariant::SoftMoE, ModelVariant::LaSoftMoE] {
            let cfg = EncoderConfig {
                d_model: 8,
                heads: 2,
                experts: 2,
                slots: 3,
                moe_dim: 6,
                ..EncoderConfig::desk()
            }
            .with_variant(variant);
            let mut store = ParamStore::new();
            let block = EncoderBlock::new(&mut store, "blk", &cfg, &Rng::new(seed + t as u64)).unwrap();
            let mut jitter = Rng::new(seed ^ 0xb10c).derive(&t.to_string());
            for p in store.tensors_mut() {
                for v in p.data_mut() {
                    *v += 0.1 * jitter.normal();
                }
            }
            let x = random_tensor(&[2 + rng.below(7), cfg.d_model], &mut rng);
            let g = equivariance_gap(&store, &x, &mut rng, &|tape, p, xv| block.forward(tape, p, xv).unwrap());
            worst = worst.max(g);
        }
    }
    worst
}

/// `P(score_live > score_attack) + ½ P(tie)` by comparing every pair.
pub fn pairwise_auc(scores: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (s_l, l_l) in scores.scores.iter().zip(&scores.labels) {
        if *l_l != Label::Live {
            continue;
        }
        for (s_a, l_a) in scores.scores.iter().zip(&scores.labels) {
            if *l_a != Label::Fake {
                continue;
            }
            pairs += 1.0;
            if s_l > s_a {
                wins += 1.0;
            } else if s_l == s_a {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// A random two-class score set of size `2..=200`, with a coarse grid so ties occur.
pub fn random_score_set(rng: &mut Rng) -> ScoreSet {
    let n = 2 + rng.below(199);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = match i {
            0 => Label::Live,
            1 => Label::Fake,
            _ if rng.uniform() < 0.5 => Label::Live,
            _ => Label::Fake,
        };
        let shift = if label == Label::Live { 0.15 } else { 0.0 };
        let raw = (rng.uniform() * 0.85 + shift).min(1.0);
        let s = if rng.uniform() < 0.5 { (raw * 20.0).round() / 20.0 } else { raw };
        scores.push(s);
        labels.push(label);
    }
    ScoreSet::new(scores, labels).unwrap()
}

/// `(AUC of the four-sample case, (APCER, BPCER, ACER) of the twenty-sample case)`.
pub fn hand_cases() -> (f64, (f64, f64, f64)) {
    let small = ScoreSet::new(
        vec![0.1, 0.4, 0.35, 0.8],
        vec![Label::Fake, Label::Fake, Label::Live, Label::Live],
    )
    .unwrap();
    let auc = lasoftmoe::trainkit::compute_metrics(&small, 0.5).unwrap().auc.unwrap();
    let mut scores = vec![0.9, 0.7];
    scores.extend([0.2; 8]);
    scores.push(0.3);
    scores.extend([0.8; 9]);
    let labels = [[Label::Fake; 10], [Label::Live; 10]].concat();
    let m = lasoftmoe::trainkit::compute_metrics(&ScoreSet::new(scores, labels).unwrap(), 0.5).unwrap();
    (auc, (m.apcer, m.bpcer, m.acer))
}

/// Largest gap between a freshly initialized MoE block and the vanilla block
/// built from the same seed, on random token sets.
pub fn zero_moe_block_gap(variant: ModelVariant, seed: u64) -> f64 {
    let base = EncoderConfig {
        d_model: 8,
        heads: 2,
        experts: 2,
        slots: 3,
        moe_dim: 6,
        ..EncoderConfig::desk()
    };
    let mut plain_store = ParamStore::new();
    let plain = EncoderBlock::new(&mut plain_store, "blk", &base.clone().with_variant(ModelVariant::Vanilla), &Rng::new(seed)).unwrap();
    let mut moe_store = ParamStore::new();
    let moe = EncoderBlock::new(&mut moe_store, "blk", &base.with_variant(variant), &Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed ^ 0x2e70);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = random_tensor(&[2 + rng.below(7), 8], &mut rng);
        let a = eval_rows(&plain_store, &x, &|t, p, v| plain.forward(t, p, v).unwrap());
        let b = eval_rows(&moe_store, &x, &|t, p, v| moe.forward(t, p, v).unwrap());
        worst = worst.max(a.max_abs_diff(&b));
    }
    worst
}
