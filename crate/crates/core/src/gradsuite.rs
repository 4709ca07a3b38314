//! Finite-difference gradient checks grouped by scope: every tape op, both
//! MoE layers end to end, encoder blocks, and the full dual encoder.

use std::fmt;
use std::str::FromStr;

use crate::data::Label;
use crate::encoder::{ClipModel, EncoderBlock, EncoderConfig, ModelVariant, PromptSet, TemplateId};
use crate::moe::{combine_weights_linear_attn, soft_moe_forward, MoEVariant, SoftMoEParams};
use crate::nn::layer_norm;
use crate::rng::Rng;
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, ParamStore, Result, Tape, Tensor, Var};
use crate::encoder::clip_loss;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Coordinates probed per parameter tensor in the full-model scope.
pub const FULL_SCOPE_CAP: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    Ops,
    Moe,
    Block,
    Full,
}

impl GradScope {
    pub const ALL: [GradScope; 4] = [GradScope::Ops, GradScope::Moe, GradScope::Block, GradScope::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            GradScope::Ops => "ops",
            GradScope::Moe => "moe",
            GradScope::Block => "block",
            GradScope::Full => "full",
        }
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradScope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown gradcheck scope {s:?} (expected ops, moe, block or full)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub h: f64,
    pub tol: f64,
    /// Scale every matmul input gradient by this factor (checker sanity test).
    pub corrupt: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            tol: DEFAULT_TOL,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub component: String,
    pub report: GradCheckReport,
}

pub fn suite_passed(entries: &[SuiteEntry]) -> bool {
    entries.iter().all(|e| e.report.passed)
}

fn randn(shape: &[usize], label: &str) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(0x5eed).derive(label))
}

/// `Σ y ⊙ W` for a fixed random `W`, so that no output direction is ignored.
fn weighted(tape: &mut Tape<f64>, y: Var, label: &str) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(y), &format!("{label}.weights")));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    fn c(t: &mut Tape<f64>, shape: &[usize], label: &str) -> Var {
        t.constant(randn(shape, label))
    }
    vec![
        ("matmul.lhs", vec![3, 4], |t, x| {
            let b = c(t, &[4, 2], "mm.b");
            t.matmul(x, b)
        }),
        ("matmul.rhs", vec![4, 2], |t, x| {
            let a = c(t, &[3, 4], "mm.a");
            t.matmul(a, x)
        }),
        ("transpose", vec![3, 4], |t, x| t.transpose(x)),
        ("add", vec![3, 4], |t, x| {
            let b = c(t, &[3, 4], "add.b");
            t.add(x, b)
        }),
        ("sub.rhs", vec![3, 4], |t, x| {
            let a = c(t, &[3, 4], "sub.a");
            t.sub(a, x)
        }),
        ("mul", vec![3, 4], |t, x| {
            let b = c(t, &[3, 4], "mul.b");
            t.mul(x, b)
        }),
        ("add_row.row", vec![4], |t, x| {
            let a = c(t, &[3, 4], "addrow.a");
            t.add_row(a, x)
        }),
        ("mul_row.x", vec![3, 4], |t, x| {
            let r = c(t, &[4], "mulrow.r");
            t.mul_row(x, r)
        }),
        ("mul_row.row", vec![4], |t, x| {
            let a = c(t, &[3, 4], "mulrow.a");
            t.mul_row(a, x)
        }),
        ("scale", vec![3, 4], |t, x| Ok(t.scale(x, -1.7))),
        ("add_scalar", vec![3, 4], |t, x| Ok(t.add_scalar(x, 0.3))),
        ("mul_scalar_var.x", vec![3, 4], |t, x| {
            let s = t.constant(Tensor::scalar(1.3));
            t.mul_scalar_var(x, s)
        }),
        ("mul_scalar_var.s", vec![1], |t, x| {
            let a = c(t, &[3, 4], "msv.a");
            t.mul_scalar_var(a, x)
        }),
        ("gelu", vec![3, 4], |t, x| Ok(t.gelu(x))),
        ("elu", vec![3, 4], |t, x| Ok(t.elu(x))),
        ("sigmoid", vec![3, 4], |t, x| Ok(t.sigmoid(x))),
        ("exp", vec![3, 4], |t, x| Ok(t.exp(x))),
        ("log", vec![3, 4], |t, x| {
            let e = t.exp(x);
            t.log(e)
        }),
        ("softmax.axis0", vec![3, 4], |t, x| t.softmax(x, 0)),
        ("softmax.axis1", vec![3, 4], |t, x| t.softmax(x, 1)),
        ("log_softmax.axis0", vec![3, 4], |t, x| t.log_softmax(x, 0)),
        ("log_softmax.axis1", vec![3, 4], |t, x| t.log_softmax(x, 1)),
        ("standardize_rows", vec![3, 5], |t, x| t.standardize_rows(x, 1e-5)),
        ("l2_normalize_rows", vec![3, 4], |t, x| t.l2_normalize_rows(x)),
        ("contract.nd_esd", vec![3, 2], |t, x| {
            let b = c(t, &[4, 5, 2], "ct.b");
            t.contract("nd,esd->nes", x, b)
        }),
        ("contract.rhs", vec![4, 5, 2], |t, x| {
            let a = c(t, &[3, 2], "ct.a");
            t.contract("nd,esd->nes", a, x)
        }),
        ("reshape", vec![3, 4], |t, x| t.reshape(x, &[2, 6])),
        ("slice_rows", vec![5, 3], |t, x| t.slice_rows(x, 1, 3)),
        ("concat_rows", vec![2, 3], |t, x| {
            let b = c(t, &[1, 3], "cr.b");
            let sq = t.mul(x, x)?;
            t.concat_rows(&[x, b, sq])
        }),
        ("slice_cols", vec![3, 5], |t, x| t.slice_cols(x, 2, 2)),
        ("concat_cols", vec![3, 2], |t, x| {
            let b = c(t, &[3, 1], "cc.b");
            t.concat_cols(&[b, x, x])
        }),
        ("gather_rows", vec![4, 3], |t, x| t.gather_rows(x, &[2, 0, 2, 3])),
        ("sum", vec![3, 4], |t, x| {
            let s = t.sum(x);
            Ok(t.mul(s, s)?)
        }),
        ("mean", vec![3, 4], |t, x| {
            let s = t.mean(x);
            Ok(t.mul(s, s)?)
        }),
        ("diag", vec![4, 4], |t, x| t.diag(x)),
        ("layer_norm", vec![3, 5], |t, x| {
            let g = c(t, &[5], "ln.g");
            let b = c(t, &[5], "ln.b");
            layer_norm(t, x, g, b, 1e-5)
        }),
        ("linear_attention_combine", vec![5, 6], |t, x| combine_weights_linear_attn(t, x)),
        ("clip_loss.image", vec![4, 3], |t, x| {
            let img = t.l2_normalize_rows(x)?;
            let txt = c(t, &[4, 3], "clip.txt");
            let txt = t.l2_normalize_rows(txt)?;
            let temp = t.constant(Tensor::scalar(3.0));
            clip_loss(t, img, txt, temp)
        }),
        ("clip_loss.temperature", vec![1], |t, x| {
            let img = c(t, &[4, 3], "clip.img");
            let img = t.l2_normalize_rows(img)?;
            let txt = c(t, &[4, 3], "clip.txt");
            let txt = t.l2_normalize_rows(txt)?;
            clip_loss(t, img, txt, x)
        }),
    ]
}

fn run_ops(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, shape, f) in op_cases() {
        let x = if name == "mul_scalar_var.s" || name == "clip_loss.temperature" {
            Tensor::scalar(1.7)
        } else {
            randn(&shape, name)
        };
        let corrupt = opts.corrupt;
        let report = grad_check(
            |t, v| {
                if let Some(k) = corrupt {
                    t.corrupt_matmul_gradient(k);
                }
                let y = f(t, v)?;
                if t.value(y).len() == 1 {
                    Ok(y)
                } else {
                    weighted(t, y, name)
                }
            },
            &x,
            opts.h,
            opts.tol,
        )?;
        out.push(SuiteEntry {
            component: format!("op/{name}"),
            report,
        });
    }
    Ok(out)
}

fn check_store(
    component: String,
    store: &ParamStore<f64>,
    opts: &SuiteOptions,
    cap: Option<usize>,
    f: impl Fn(&mut Tape<f64>, &crate::tensor::Binding) -> Result<Var>,
) -> Result<SuiteEntry> {
    let corrupt = opts.corrupt;
    let report = grad_check_params(
        store,
        |t, b| {
            if let Some(k) = corrupt {
                t.corrupt_matmul_gradient(k);
            }
            f(t, b)
        },
        opts.h,
        opts.tol,
        cap,
        7,
    )?;
    Ok(SuiteEntry { component, report })
}

fn run_moe(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for variant in [MoEVariant::SoftMax, MoEVariant::LinearAttn] {
        let mut store = ParamStore::new();
        let rng = Rng::new(11);
        let layer = SoftMoEParams::new(&mut store, "moe", 6, 4, 2, 3, &rng)?;
        let x = store.add("x", randn(&[5, 6], "moe.x"));
        let name = format!("moe/{variant:?}");
        out.push(check_store(name.clone(), &store, opts, None, |t, b| {
            let y = soft_moe_forward(t, b, b.var(x), &layer, variant)?.output;
            weighted(t, y, &name)
        })?);
    }
    Ok(out)
}

fn small_block_config(variant: ModelVariant) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        heads: 2,
        experts: 2,
        slots: 2,
        moe_dim: 6,
        ..EncoderConfig::desk()
    }
    .with_variant(variant)
}

fn run_block(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for variant in ModelVariant::ALL {
        let cfg = small_block_config(variant);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "block", &cfg, &Rng::new(13))?;
        jitter(&mut store, "block");
        let x = store.add("x", randn(&[5, cfg.d_model], "block.x"));
        let name = format!("block/{variant}");
        out.push(check_store(name.clone(), &store, opts, None, |t, b| {
            let y = block.forward(t, b, b.var(x))?;
            weighted(t, y, &name)
        })?);
    }
    Ok(out)
}

/// Adds small noise to every parameter so that zero-initialized tensors do
/// not hide gradients of the layers behind them.
fn jitter(store: &mut ParamStore<f64>, label: &str) {
    let rng = Rng::new(0x717e).derive(label);
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let mut r = rng.derive(&i.to_string());
        for v in t.data_mut() {
            *v += 0.1 * r.normal();
        }
    }
}

fn run_full(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let prompts = PromptSet::default();
    for variant in ModelVariant::ALL {
        let cfg = EncoderConfig::desk().with_variant(variant);
        let mut model = ClipModel::<f64>::new(cfg.clone(), 17)
            .map_err(|e| crate::tensor::TensorError::Contract(e.to_string()))?;
        jitter(&mut model.params, "full");
        let side = cfg.image_size;
        let images: Vec<Tensor<f64>> = (0..2)
            .map(|i| {
                let mut r = Rng::new(19).derive(&format!("img{i}"));
                let data = (0..side * side * cfg.channels).map(|_| r.uniform()).collect();
                Tensor::new(&[side, side, cfg.channels], data).expect("image shape")
            })
            .collect();
        let refs: Vec<&Tensor<f64>> = images.iter().collect();
        let labels = [Label::Live, Label::Fake];
        let name = format!("full/{variant}");
        out.push(check_store(name, &model.params, opts, Some(FULL_SCOPE_CAP), |t, b| {
            model
                .batch_loss(t, b, &refs, &labels, &prompts, TemplateId::DEFAULT)
                .map_err(|e| match e {
                    crate::encoder::ModelError::Tensor(t) => t,
                    other => crate::tensor::TensorError::Contract(other.to_string()),
                })
        })?);
    }
    Ok(out)
}

/// Runs the checks of one scope.
pub fn run_suite(scope: GradScope, opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    match scope {
        GradScope::Ops => run_ops(opts),
        GradScope::Moe => run_moe(opts),
        GradScope::Block => run_block(opts),
        GradScope::Full => run_full(opts),
    }
}
