//! Optimization loop, scoring, ablation driver and embedding dumps.

mod ablation;
mod embeddings;
pub mod metrics;

use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::encoder::{
    ClassScore, ClipModel, ConfigError, EncoderConfig, ModelError, ModelVariant, PromptSet, TemplateId,
    MAX_TEMPERATURE,
};
use crate::tensor::{Tape, Tensor};

pub use ablation::{median, run_ablation, AblationConfig, AblationReport, AblationRun, MedianRow, PUBLISHED_RESULTS};
pub use embeddings::{decode_embeddings, dump_embeddings, encode_embeddings, read_embeddings, EmbeddingRow, EMBEDDING_MAGIC};
pub use metrics::{compute_metrics, MetricsError, MetricsReport, ScoreSet, ThresholdPolicy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step} (epoch {epoch}): loss {loss}")]
    Diverged { step: usize, epoch: usize, loss: f64 },
    #[error("adam: {0}")]
    Adam(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{variant}: {source}")]
    Variant {
        variant: ModelVariant,
        #[source]
        source: Box<TrainError>,
    },
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one tensor per parameter, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor<f64>],
    grads: &[Tensor<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::Adam(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(TrainError::Adam(format!(
                "parameter {i}: shape {:?} vs gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps over which the rate ramps linearly up to `learning_rate`; 0 disables.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub template: TemplateId,
}

impl TrainConfig {
    /// Learning rate used when fine-tuning pretrained ViT-B/16 weights.
    pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-6;

    pub fn desk() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            template: TemplateId::DEFAULT,
        }
    }

    pub fn fine_tune() -> Self {
        Self {
            learning_rate: Self::FINE_TUNE_LEARNING_RATE,
            ..Self::desk()
        }
    }

    /// Rate of the zero-based `step`: `learning_rate · min(1, (step + 1) / warmup_steps)`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// `epochs = 0` is allowed and trains nothing.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be > 0".into());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClipModel<f64>,
    /// Mean batch loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Loss and parameter gradients of one batch.
pub fn batch_gradients(
    model: &ClipModel<f64>,
    images: &[&Tensor<f64>],
    labels: &[data::Label],
    prompts: &PromptSet,
    template: TemplateId,
) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let loss = model.batch_loss(&mut tape, &p, images, labels, prompts, template)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss).map_err(ModelError::from)?;
    Ok((value, model.params.grads(&tape, &p)))
}

/// Minimizes the contrastive loss over `data` with Adam.
///
/// Initialization and batch order depend only on `cfg.seed`, so all variants
/// trained with one seed see the same batches and share every parameter they
/// have in common.
pub fn train(
    variant: ModelVariant,
    encoder: &EncoderConfig,
    data: &Dataset,
    prompts: &PromptSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(variant, encoder, data, prompts, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_with_progress(
    variant: ModelVariant,
    encoder: &EncoderConfig,
    data: &Dataset,
    prompts: &PromptSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    prompts.template(cfg.template).map_err(ModelError::from)?;
    let mut model = ClipModel::<f64>::new(encoder.clone().with_variant(variant), cfg.seed)?;
    let mut adam = cfg.adam();
    let mut state = AdamState::new(model.params.tensors());
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let max_log_temp = MAX_TEMPERATURE.ln();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = data::batches(data, cfg.batch_size, cfg.seed, epoch)?;
        for batch in &batches {
            let (loss, grads) = batch_gradients(
                &model,
                &batch.images(data),
                &batch.labels(data),
                prompts,
                cfg.template,
            )?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { step, epoch, loss });
            }
            adam.learning_rate = cfg.learning_rate_at(step);
            adam_step(model.params.tensors_mut(), &grads, &mut state, &adam)?;
            let lt = model.params.get_mut(model.log_temp);
            let clamped = lt.item().min(max_log_temp);
            lt.data_mut()[0] = clamped;
            total += loss;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        on_epoch(epoch, mean);
        loss_curve.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_curve,
        steps: step,
    })
}

/// Liveness score of every sample, in split order.
pub fn score_split(
    model: &ClipModel<f64>,
    split: &Dataset,
    prompts: &PromptSet,
    template: TemplateId,
) -> Result<ScoreSet, TrainError> {
    let live = model.text_embedding(prompts, template, data::Label::Live)?;
    let fake = model.text_embedding(prompts, template, data::Label::Fake)?;
    let temp = model.temperature_value();
    let mut scores = ScoreSet::default();
    for s in &split.samples {
        let img = model.image_embedding(&s.image).map_err(ModelError::from)?;
        let c = ClassScore::from_embeddings(&img, &live, &fake, temp);
        scores.push(c.score, s.label);
    }
    Ok(scores)
}

/// Scores `test` and computes its metrics at the threshold chosen by `policy`
/// (the EER policy scores `eval` to pick it).
pub fn evaluate(
    model: &ClipModel<f64>,
    eval: &Dataset,
    test: &Dataset,
    prompts: &PromptSet,
    template: TemplateId,
    policy: ThresholdPolicy,
) -> Result<MetricsReport, TrainError> {
    let eval_scores = match policy {
        ThresholdPolicy::EerOnEval => Some(score_split(model, eval, prompts, template)?),
        ThresholdPolicy::Fixed(_) => None,
    };
    let threshold = metrics::resolve_threshold(policy, eval_scores.as_ref())?;
    let scores = score_split(model, test, prompts, template)?;
    Ok(compute_metrics(&scores, threshold)?)
}
