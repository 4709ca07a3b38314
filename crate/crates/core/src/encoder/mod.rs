//! ViT-style image encoder with an optional MoE branch beside each MLP, the
//! text encoder, and the contrastive dual-encoder model that ties them.

mod loss;
mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::moe::{soft_moe_forward, MoEVariant, SoftMoEParams};
use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Binding, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub use loss::{clip_loss, live_probability, ClassScore};
pub use text::{
    fnv1a64, token_bucket, token_buckets, tokenize, PromptError, PromptSet, TemplateId, TextEncoder,
    CLASS_PLACEHOLDER, DEFAULT_TEMPLATES, VOCAB_BUCKETS,
};

/// Which image-encoder family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Plain residual attention blocks.
    Vanilla,
    /// MoE branch with softmax combine weights.
    #[serde(rename = "softmoe")]
    SoftMoE,
    /// MoE branch with linear-attention combine weights.
    #[serde(rename = "la_softmoe")]
    LaSoftMoE,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Vanilla, ModelVariant::SoftMoE, ModelVariant::LaSoftMoE];

    pub fn moe(self) -> Option<MoEVariant> {
        match self {
            ModelVariant::Vanilla => None,
            ModelVariant::SoftMoE => Some(MoEVariant::SoftMax),
            ModelVariant::LaSoftMoE => Some(MoEVariant::LinearAttn),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Vanilla => "vanilla",
            ModelVariant::SoftMoE => "softmoe",
            ModelVariant::LaSoftMoE => "la_softmoe",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" | "none" => Ok(ModelVariant::Vanilla),
            "softmoe" | "soft_moe" => Ok(ModelVariant::SoftMoE),
            "la_softmoe" | "lasoftmoe" => Ok(ModelVariant::LaSoftMoE),
            other => Err(ConfigError::Invalid(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Experts per MoE layer (`e`).
    pub experts: usize,
    /// Slots per expert (`s`).
    pub slots: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Width `d` inside the MoE branch, between its in/out projections.
    pub moe_dim: usize,
    pub text_width: usize,
    pub variant: ModelVariant,
    /// Start every MoE out_proj at zero so each block begins as its vanilla counterpart.
    pub moe_zero_init: bool,
}

impl EncoderConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            depth: 2,
            d_model: 64,
            heads: 4,
            experts: 4,
            slots: 8,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            embed_dim: 32,
            moe_dim: 64,
            text_width: 64,
            variant: ModelVariant::LaSoftMoE,
            moe_zero_init: true,
        }
    }

    /// ViT-B/16 scale reference: 12 blocks, 4 experts with 49 slots each.
    pub fn vit_b16() -> Self {
        Self {
            depth: 12,
            d_model: 768,
            heads: 12,
            experts: 4,
            slots: 49,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            embed_dim: 512,
            moe_dim: 768,
            text_width: 512,
            variant: ModelVariant::LaSoftMoE,
            moe_zero_init: true,
        }
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count: patches plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("experts", self.experts),
            ("slots", self.slots),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("moe_dim", self.moe_dim),
            ("text_width", self.text_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("encoder.{name} must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_model: usize, heads: usize, rng: &Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        }
    }

    /// `concat_h softmax(Q_h K_hᵀ / √d_k) V_h`, then the output projection.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let d_model = tape.shape(q)[1];
        let dk = d_model / self.heads;
        let scale = S::lit(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let w = tape.softmax(logits, 1)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.o.forward(tape, p, cat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d_model: usize, rng: &Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_model, 4 * d_model, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d_model, d_model, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Residual block; the MoE branch, when present, reads the same normalized
/// input as the MLP and both are added into one residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub moe: Option<(SoftMoEParams, MoEVariant)>,
}

impl EncoderBlock {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &EncoderConfig, rng: &Rng) -> Result<Self> {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model);
        let attn = Attention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), cfg.d_model, rng);
        let moe = match cfg.variant.moe() {
            None => None,
            Some(v) => Some((
                SoftMoEParams::new(
                    store,
                    &format!("{name}.moe"),
                    cfg.d_model,
                    cfg.moe_dim,
                    cfg.experts,
                    cfg.slots,
                    rng,
                )?,
                v,
            )),
        };
        if cfg.moe_zero_init {
            if let Some((layer, _)) = &moe {
                store.get_mut(layer.out_proj.w).data_mut().fill(S::zero());
            }
        }
        Ok(Self { ln1, attn, ln2, mlp, moe })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h)?;
        let y = tape.add(x, a)?;
        let h2 = self.ln2.forward(tape, p, y)?;
        let m = self.mlp.forward(tape, p, h2)?;
        let mut out = tape.add(y, m)?;
        if let Some((layer, variant)) = &self.moe {
            let e = soft_moe_forward(tape, p, h2, layer, *variant)?.output;
            out = tape.add(out, e)?;
        }
        Ok(out)
    }
}

/// Splits an `H×W×C` image into row-major, non-overlapping patches, each
/// flattened in `(row, col, channel)` order: `(side²)×(p·p·C)`.
pub fn patchify<S: Scalar>(image: &Tensor<S>, cfg: &EncoderConfig) -> Result<Tensor<S>> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected {
        return Err(TensorError::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    if cfg.image_size % cfg.patch_size != 0 {
        return Err(TensorError::Contract(format!(
            "image_size {} not divisible by patch_size {}",
            cfg.image_size, cfg.patch_size
        )));
    }
    let (p, c, w) = (cfg.patch_size, cfg.channels, cfg.image_size);
    let side = cfg.patches_per_side();
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..side {
        for px in 0..side {
            for r in 0..p {
                let y = py * p + r;
                let start = (y * w + px * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[side * side, cfg.patch_dim()], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &EncoderConfig, rng: &Rng) -> Result<Self> {
        let patch = Linear::new(store, "image.patch", cfg.patch_dim(), cfg.d_model, rng);
        let cls = store.add(
            "image.cls",
            Tensor::randn(&[1, cfg.d_model], 0.02, &mut rng.derive("image.cls")),
        );
        let pos = store.add(
            "image.pos",
            Tensor::randn(&[cfg.n_tokens(), cfg.d_model], 0.02, &mut rng.derive("image.pos")),
        );
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("image.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let ln_post = LayerNorm::new(store, "image.ln_post", cfg.d_model);
        let proj = Linear::new(store, "image.proj", cfg.d_model, cfg.embed_dim, rng);
        Ok(Self {
            patch,
            cls,
            pos,
            blocks,
            ln_post,
            proj,
        })
    }

    /// Class token followed by projected patches, plus positional embedding.
    pub fn patch_embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        image: &Tensor<S>,
        cfg: &EncoderConfig,
    ) -> Result<Var> {
        let patches = tape.constant(patchify(image, cfg)?);
        let tokens = self.patch.forward(tape, p, patches)?;
        let seq = tape.concat_rows(&[p.var(self.cls), tokens])?;
        tape.add(seq, p.var(self.pos))
    }

    /// Token sequence after all blocks, before the final norm.
    pub fn tokens<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, image: &Tensor<S>, cfg: &EncoderConfig) -> Result<Var> {
        let mut x = self.patch_embed(tape, p, image, cfg)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// Unit-norm embedding, `1×embed_dim`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, image: &Tensor<S>, cfg: &EncoderConfig) -> Result<Var> {
        let x = self.tokens(tape, p, image, cfg)?;
        let x = self.ln_post.forward(tape, p, x)?;
        let cls = tape.slice_rows(x, 0, 1)?;
        let z = self.proj.forward(tape, p, cls)?;
        tape.l2_normalize_rows(z)
    }
}

/// Initial temperature `1 / 0.07`.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;
/// Upper clamp on the learned temperature.
pub const MAX_TEMPERATURE: f64 = 100.0;

/// Image encoder, text encoder and learned temperature, with their parameters.
#[derive(Debug, Clone)]
pub struct ClipModel<S> {
    pub cfg: EncoderConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub log_temp: ParamId,
    pub params: ParamStore<S>,
}

impl<S: Scalar> ClipModel<S> {
    /// Every parameter draws from a stream keyed by (seed, parameter name).
    pub fn new(cfg: EncoderConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(&mut params, &cfg, &rng).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let text = TextEncoder::new(&mut params, cfg.text_width, cfg.embed_dim, &rng);
        let log_temp = params.add("log_temp", Tensor::scalar(S::lit(INIT_TEMPERATURE.ln())));
        Ok(Self {
            cfg,
            image,
            text,
            log_temp,
            params,
        })
    }

    /// Replaces parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, store: ParamStore<S>) -> std::result::Result<(), ConfigError> {
        if store.len() != self.params.len() {
            return Err(ConfigError::Invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                self.params.len()
            )));
        }
        for ((name, t), (want_name, want)) in store.iter().zip(self.params.iter()) {
            if name != want_name || t.shape() != want.shape() {
                return Err(ConfigError::Invalid(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        self.params = store;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        self.params.bind(tape)
    }

    pub fn temperature_value(&self) -> S {
        self.params.get(self.log_temp).item().exp()
    }

    pub fn temperature(&self, tape: &mut Tape<S>, p: &Binding) -> Var {
        tape.exp(p.var(self.log_temp))
    }

    pub fn encode_image(&self, tape: &mut Tape<S>, p: &Binding, image: &Tensor<S>) -> Result<Var> {
        self.image.forward(tape, p, image, &self.cfg)
    }

    /// Stacked embeddings, `N×embed_dim`.
    pub fn encode_images(&self, tape: &mut Tape<S>, p: &Binding, images: &[&Tensor<S>]) -> Result<Var> {
        let rows = images
            .iter()
            .map(|img| self.encode_image(tape, p, img))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&rows)
    }

    pub fn encode_text(&self, tape: &mut Tape<S>, p: &Binding, sentence: &str) -> Result<Var> {
        self.text.forward(tape, p, sentence)
    }

    /// Text embeddings of the live and fake prompts, rows ordered by [`Label::index`].
    pub fn encode_classes(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        prompts: &PromptSet,
        template: TemplateId,
    ) -> std::result::Result<Var, ModelError> {
        let mut rows = Vec::with_capacity(2);
        for label in Label::BY_INDEX {
            let sentence = prompts.render(template, label)?;
            rows.push(self.encode_text(tape, p, &sentence)?);
        }
        Ok(tape.concat_rows(&rows)?)
    }

    /// Contrastive loss of a batch; each image is paired with its own label's prompt.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        images: &[&Tensor<S>],
        labels: &[Label],
        prompts: &PromptSet,
        template: TemplateId,
    ) -> std::result::Result<Var, ModelError> {
        let img = self.encode_images(tape, p, images)?;
        let classes = self.encode_classes(tape, p, prompts, template)?;
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let txt = tape.gather_rows(classes, &idx)?;
        let temp = self.temperature(tape, p);
        Ok(clip_loss(tape, img, txt, temp)?)
    }

    /// Unit-norm image embedding as plain values.
    pub fn image_embedding(&self, image: &Tensor<S>) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let e = self.encode_image(&mut tape, &p, image)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn text_embedding(&self, prompts: &PromptSet, template: TemplateId, label: Label) -> std::result::Result<Vec<S>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let sentence = prompts.render(template, label)?;
        let e = self.encode_text(&mut tape, &p, &sentence)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Liveness probability and predicted label for one image.
    pub fn classify(
        &self,
        image: &Tensor<S>,
        prompts: &PromptSet,
        template: TemplateId,
    ) -> std::result::Result<ClassScore, ModelError> {
        let img = self.image_embedding(image)?;
        let live = self.text_embedding(prompts, template, Label::Live)?;
        let fake = self.text_embedding(prompts, template, Label::Fake)?;
        Ok(ClassScore::from_embeddings(&img, &live, &fake, self.temperature_value()))
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}
