//! Soft mixture-of-experts layer and its linear-attention combine variant.
//!
//! With tokens `X: n×d` and slot parameters `Φ: d×(e·s)`, the layer computes
//! logits `XΦ`, then
//!
//! * dispatch weights `D = softmax over tokens (columns) of XΦ`, slots `X̃ = Dᵀ X`;
//! * expert `i` maps its `s` contiguous slot rows, `Ỹ_i = expert_i(X̃_i)`;
//! * combine weights `C`, output `Y = C Ỹ`.
//!
//! [`MoEVariant::SoftMax`] takes `C` as the softmax of `XΦ` over slots (each
//! row sums to one). [`MoEVariant::LinearAttn`] instead feeds `XΦ` through
//! denominator-free linear attention with `Q = K = V = XΦ` and feature map
//! `φ(x) = elu(x) + 1`, then squashes every token's slot weights into (0, 1)
//! by per-row standardization followed by a logistic sigmoid.
//!
//! The layer is wrapped in input and output projections, so the MoE width `d`
//! may differ from the model width.

use crate::nn::Linear;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Epsilon inside the squash's per-row standardization.
pub const SQUASH_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoEVariant {
    /// Row softmax of the logits.
    SoftMax,
    /// Linear attention over the logits, then row standardization and sigmoid.
    LinearAttn,
}

/// A network applied to one expert's group of slots.
pub trait Expert<S: Scalar> {
    fn forward(&self, tape: &mut Tape<S>, params: &Binding, slots: Var) -> Result<Var>;
}

/// Two affine layers with GELU between, widths `d → 4d → d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ExpertNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize, rng: &Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, rng),
        }
    }
}

impl<S: Scalar> Expert<S> for ExpertNet {
    fn forward(&self, tape: &mut Tape<S>, p: &Binding, slots: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, slots)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Parameters of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMoEParams {
    pub phi: ParamId,
    pub experts: Vec<ExpertNet>,
    pub in_proj: Linear,
    pub out_proj: Linear,
    pub d_model: usize,
    pub d: usize,
    pub e: usize,
    pub s: usize,
}

impl SoftMoEParams {
    /// `Φ ~ N(0, 1/d)`; projections and experts use [`Linear::new`].
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d: usize,
        e: usize,
        s: usize,
        rng: &Rng,
    ) -> Result<Self> {
        if e == 0 || s == 0 || d == 0 || d_model == 0 {
            return Err(TensorError::Contract(format!(
                "moe layer needs e, s, d, d_model >= 1 (got e={e}, s={s}, d={d}, d_model={d_model})"
            )));
        }
        let phi_name = format!("{name}.phi");
        let phi = Tensor::randn(&[d, e * s], (1.0 / d as f64).sqrt(), &mut rng.derive(&phi_name));
        let phi = store.add(phi_name, phi);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d_model, d, rng);
        let experts = (0..e)
            .map(|i| ExpertNet::new(store, &format!("{name}.expert{i}"), d, rng))
            .collect();
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), d, d_model, rng);
        Ok(Self {
            phi,
            experts,
            in_proj,
            out_proj,
            d_model,
            d,
            e,
            s,
        })
    }

    pub fn slots(&self) -> usize {
        self.e * self.s
    }
}

/// Logits `XΦ`, shape `n×(e·s)`.
pub fn slot_logits<S: Scalar>(tape: &mut Tape<S>, x: Var, phi: Var) -> Result<Var> {
    tape.matmul(x, phi)
}

/// `D`: softmax of `XΦ` over tokens, so every column sums to one.
pub fn dispatch_weights<S: Scalar>(tape: &mut Tape<S>, x: Var, phi: Var) -> Result<Var> {
    let logits = slot_logits(tape, x, phi)?;
    tape.softmax(logits, 0)
}

/// Slots `X̃ = Dᵀ X`, shape `(e·s)×d`.
pub fn mix_slots<S: Scalar>(tape: &mut Tape<S>, x: Var, dispatch: Var) -> Result<Var> {
    let (n, _) = rank2(tape, x)?;
    let (n2, _) = rank2(tape, dispatch)?;
    if n != n2 {
        return Err(TensorError::Shape {
            op: "mix_slots",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(dispatch).to_vec(),
        });
    }
    let dt = tape.transpose(dispatch)?;
    tape.matmul(dt, x)
}

/// Applies expert `i` to slot rows `[i·s, (i+1)·s)` and stacks the results.
pub fn apply_experts<S: Scalar, E: Expert<S>>(
    tape: &mut Tape<S>,
    params: &Binding,
    slots: Var,
    experts: &[E],
) -> Result<Var> {
    let (rows, _) = rank2(tape, slots)?;
    if experts.is_empty() || rows % experts.len() != 0 {
        return Err(TensorError::Contract(format!(
            "{rows} slot rows do not split into {} expert groups",
            experts.len()
        )));
    }
    let s = rows / experts.len();
    let mut outs = Vec::with_capacity(experts.len());
    for (i, expert) in experts.iter().enumerate() {
        let group = tape.slice_rows(slots, i * s, s)?;
        let y = expert.forward(tape, params, group)?;
        if tape.shape(y) != tape.shape(group) {
            return Err(TensorError::Shape {
                op: "apply_experts",
                lhs: tape.shape(group).to_vec(),
                rhs: tape.shape(y).to_vec(),
            });
        }
        outs.push(y);
    }
    tape.concat_rows(&outs)
}

/// Softmax combine weights: row softmax of the logits.
pub fn combine_weights_softmax<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    tape.softmax(logits, 1)
}

/// `φ(z) (φ(z)ᵀ z)` with `φ(x) = elu(x) + 1`; rows of `z` are sequence positions.
pub fn linear_attention<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Result<Var> {
    rank2(tape, z)?;
    let fz = tape.elu(z);
    let fz = tape.add_scalar(fz, S::one());
    let ft = tape.transpose(fz)?;
    let kv = tape.matmul(ft, z)?;
    tape.matmul(fz, kv)
}

/// Per row: standardize across the slot weights, then logistic sigmoid.
pub fn instance_norm_squash<S: Scalar>(tape: &mut Tape<S>, c_raw: Var, eps: S) -> Result<Var> {
    let z = tape.standardize_rows(c_raw, eps)?;
    Ok(tape.sigmoid(z))
}

/// Linear-attention combine weights, each entry in (0, 1).
pub fn combine_weights_linear_attn<S: Scalar>(tape: &mut Tape<S>, logits: Var) -> Result<Var> {
    let raw = linear_attention(tape, logits)?;
    instance_norm_squash(tape, raw, S::lit(SQUASH_EPS))
}

/// `Y = C Ỹ`.
pub fn combine<S: Scalar>(tape: &mut Tape<S>, weights: Var, y_tilde: Var) -> Result<Var> {
    tape.matmul(weights, y_tilde)
}

/// Softmax combine from tokens and slot parameters: `softmax_rows(XΦ) Ỹ`.
pub fn combine_softmax<S: Scalar>(tape: &mut Tape<S>, x: Var, phi: Var, y_tilde: Var) -> Result<Var> {
    let logits = slot_logits(tape, x, phi)?;
    let c = combine_weights_softmax(tape, logits)?;
    combine(tape, c, y_tilde)
}

/// Intermediate values of one MoE evaluation, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct MoETrace {
    pub tokens: Var,
    pub logits: Var,
    pub dispatch: Var,
    pub slots: Var,
    pub slot_outputs: Var,
    pub combine: Var,
    pub mixed: Var,
    pub output: Var,
}

/// Core of the layer on already projected tokens `x: n×d` (no in/out projections).
pub fn soft_moe_core<S: Scalar, E: Expert<S>>(
    tape: &mut Tape<S>,
    params: &Binding,
    x: Var,
    phi: Var,
    experts: &[E],
    variant: MoEVariant,
) -> Result<MoETrace> {
    let (n, _) = rank2(tape, x)?;
    if n == 0 {
        return Err(TensorError::Contract("moe needs at least one token".into()));
    }
    let logits = slot_logits(tape, x, phi)?;
    let dispatch = tape.softmax(logits, 0)?;
    let slots = mix_slots(tape, x, dispatch)?;
    let slot_outputs = apply_experts(tape, params, slots, experts)?;
    let combine_w = match variant {
        MoEVariant::SoftMax => combine_weights_softmax(tape, logits)?,
        MoEVariant::LinearAttn => combine_weights_linear_attn(tape, logits)?,
    };
    let mixed = combine(tape, combine_w, slot_outputs)?;
    Ok(MoETrace {
        tokens: x,
        logits,
        dispatch,
        slots,
        slot_outputs,
        combine: combine_w,
        mixed,
        output: mixed,
    })
}

/// Full layer: `out_proj(core(in_proj(x)))`, shape `n×d_model` in and out.
pub fn soft_moe_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &Binding,
    x: Var,
    layer: &SoftMoEParams,
    variant: MoEVariant,
) -> Result<MoETrace> {
    let h = layer.in_proj.forward(tape, params, x)?;
    let mut trace = soft_moe_core(tape, params, h, params.var(layer.phi), &layer.experts, variant)?;
    trace.output = layer.out_proj.forward(tape, params, trace.mixed)?;
    Ok(trace)
}

fn rank2<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Shape {
            op: "moe",
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}
