use crate::data::Label;
use crate::scalar::Scalar;
use crate::tensor::ops::sigmoid;
use crate::tensor::{Result, Tape, TensorError, Var};

/// Symmetric contrastive cross-entropy over the similarity matrix
/// `S = temperature · I Tᵀ`:
///
/// `L = -1/(2N) Σ_i [log softmax_j(S_ij)|_{j=i} + log softmax_j(S_ji)|_{j=i}]`.
///
/// `temperature` is a single-element var so it can be learned.
pub fn clip_loss<S: Scalar>(tape: &mut Tape<S>, image_emb: Var, text_emb: Var, temperature: Var) -> Result<Var> {
    if tape.shape(image_emb) != tape.shape(text_emb) || tape.value(image_emb).rank() != 2 {
        return Err(TensorError::Shape {
            op: "clip_loss",
            lhs: tape.shape(image_emb).to_vec(),
            rhs: tape.shape(text_emb).to_vec(),
        });
    }
    let n = tape.shape(image_emb)[0];
    let tt = tape.transpose(text_emb)?;
    let sim = tape.matmul(image_emb, tt)?;
    let logits = tape.mul_scalar_var(sim, temperature)?;
    let by_row = tape.log_softmax(logits, 1)?;
    let by_col = tape.log_softmax(logits, 0)?;
    let dr = tape.diag(by_row)?;
    let dc = tape.diag(by_col)?;
    let both = tape.add(dr, dc)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, S::lit(-1.0 / (2.0 * n as f64))))
}

/// Two-class softmax of the temperature-scaled similarities, probability of live.
pub fn live_probability(sim_live: f64, sim_fake: f64, temperature: f64) -> f64 {
    sigmoid(temperature * (sim_live - sim_fake))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    /// Liveness probability in (0, 1).
    pub score: f64,
    pub label: Label,
    pub sim_live: f64,
    pub sim_fake: f64,
}

impl ClassScore {
    pub fn from_embeddings<S: Scalar>(image: &[S], live: &[S], fake: &[S], temperature: S) -> Self {
        let dot = |a: &[S], b: &[S]| a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum::<f64>();
        Self::from_similarities(dot(image, live), dot(image, fake), temperature.as_f64())
    }

    /// Label is the argmax of the raw similarities, ties going to live.
    pub fn from_similarities(sim_live: f64, sim_fake: f64, temperature: f64) -> Self {
        let label = if sim_live >= sim_fake { Label::Live } else { Label::Fake };
        Self {
            score: live_probability(sim_live, sim_fake, temperature),
            label,
            sim_live,
            sim_fake,
        }
    }
}
