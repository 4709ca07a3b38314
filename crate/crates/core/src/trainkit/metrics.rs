//! Anti-spoofing metrics over liveness scores.
//!
//! Convention: a sample is accepted as live when `score >= threshold`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;

/// Parallel lists of liveness scores and ground-truth labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self, MetricsError> {
        let s = Self { scores, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn push(&mut self, score: f64, label: Label) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.scores.len() != self.labels.len() {
            return Err(MetricsError::Length {
                scores: self.scores.len(),
                labels: self.labels.len(),
            });
        }
        if self.scores.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite { index: i });
        }
        Ok(())
    }

    fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut live = Vec::new();
        let mut attack = Vec::new();
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            if l.is_live() {
                live.push(s);
            } else {
                attack.push(s);
            }
        }
        (live, attack)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score set is empty")]
    Empty,
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("{0} needs both live and attack samples")]
    SingleClass(&'static str),
}

/// How the accept/reject threshold for APCER, BPCER, ACER and ACC is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// The equal-error threshold measured on the eval split.
    EerOnEval,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::EerOnEval => f.write_str("eer-threshold-on-eval"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "eer-threshold-on-eval" || s == "eer" {
            return Ok(ThresholdPolicy::EerOnEval);
        }
        let num = s.strip_prefix("fixed:").unwrap_or(s);
        match num.parse::<f64>() {
            Ok(t) if t.is_finite() => Ok(ThresholdPolicy::Fixed(t)),
            _ => Err(format!(
                "threshold policy {s:?} is neither \"fixed:<t>\" nor \"eer-threshold-on-eval\""
            )),
        }
    }
}

/// Evaluation outcome; rates are fractions, not percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    /// `None` when one class is absent.
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub threshold: f64,
    pub n_live: usize,
    pub n_attack: usize,
}

impl MetricsReport {
    pub fn is_complete(&self) -> bool {
        self.auc.is_some() && self.eer.is_some()
    }
}

/// Threshold metrics at `threshold`, and AUC/EER when both classes are present.
///
/// A rate whose class is absent is reported as 0. ACER is the mean of APCER
/// and BPCER computed from the integer counts, within one ulp of
/// `(apcer + bpcer) / 2`.
pub fn compute_metrics(scores: &ScoreSet, threshold: f64) -> Result<MetricsReport, MetricsError> {
    scores.validate()?;
    let (live, attack) = scores.split();
    let accepted_attacks = attack.iter().filter(|&&s| s >= threshold).count();
    let rejected_live = live.iter().filter(|&&s| s < threshold).count();
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let apcer = rate(accepted_attacks, attack.len());
    let bpcer = rate(rejected_live, live.len());
    let errors = accepted_attacks + rejected_live;
    Ok(MetricsReport {
        acer: acer_exact(accepted_attacks, attack.len(), rejected_live, live.len()),
        apcer,
        bpcer,
        acc: 1.0 - rate(errors, scores.len()),
        auc: auc(scores).ok(),
        eer: eer(scores).ok(),
        threshold,
        n_live: live.len(),
        n_attack: attack.len(),
    })
}

/// `(a/na + l/nl) / 2` as one correctly rounded division, so hand-countable
/// cases such as `(0.2 + 0.1) / 2` come out as the nearest double to 0.15.
fn acer_exact(a: usize, na: usize, l: usize, nl: usize) -> f64 {
    match (na, nl) {
        (0, 0) => 0.0,
        (0, _) => l as f64 / (2 * nl) as f64,
        (_, 0) => a as f64 / (2 * na) as f64,
        _ => (a as u128 * nl as u128 + l as u128 * na as u128) as f64 / (2 * na as u128 * nl as u128) as f64,
    }
}

/// Probability that a random live sample outranks a random attack, ties ½.
///
/// Counted exactly as `(2·wins + ties) / (2·n_live·n_attack)`.
pub fn auc(scores: &ScoreSet) -> Result<f64, MetricsError> {
    scores.validate()?;
    let (live, mut attack) = scores.split();
    if live.is_empty() || attack.is_empty() {
        return Err(MetricsError::SingleClass("AUC"));
    }
    attack.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    for &s in &live {
        let below = attack.partition_point(|&a| a < s);
        let not_above = attack.partition_point(|&a| a <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * live.len() as u128 * attack.len() as u128) as f64)
}

/// One operating point per distinct score (accept `score >= t`) plus an
/// accept-nothing point: `(t, FAR, FRR)` with FAR falling and FRR rising.
fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64, f64)>, MetricsError> {
    scores.validate()?;
    let (mut live, mut attack) = scores.split();
    if live.is_empty() || attack.is_empty() {
        return Err(MetricsError::SingleClass("EER"));
    }
    live.sort_by(f64::total_cmp);
    attack.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = live.iter().chain(&attack).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().expect("non-empty");
    thresholds.push(top + 1.0);
    let (nl, na) = (live.len() as f64, attack.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let far = (attack.len() - attack.partition_point(|&a| a < t)) as f64 / na;
            let frr = live.partition_point(|&l| l < t) as f64 / nl;
            (t, far, frr)
        })
        .collect())
}

/// Equal error rate and the interpolated threshold where FAR = FRR.
///
/// Between adjacent ROC points FAR and FRR are interpolated with the same
/// weight, so the result depends on the score ranks only.
pub fn eer_with_threshold(scores: &ScoreSet) -> Result<(f64, f64), MetricsError> {
    let pts = roc_points(scores)?;
    for w in pts.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok((far0, t0));
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            let rate = far0 + a * (far1 - far0);
            return Ok((rate, t0 + a * (t1 - t0)));
        }
    }
    // The first point has FRR 0 and the last FAR 0, so a crossing always exists.
    unreachable!("ROC has no FAR/FRR crossing")
}

pub fn eer(scores: &ScoreSet) -> Result<f64, MetricsError> {
    eer_with_threshold(scores).map(|(e, _)| e)
}

/// Threshold chosen by `policy`; `eval` is needed only for the EER policy.
pub fn resolve_threshold(policy: ThresholdPolicy, eval: Option<&ScoreSet>) -> Result<f64, MetricsError> {
    match policy {
        ThresholdPolicy::Fixed(t) => Ok(t),
        ThresholdPolicy::EerOnEval => {
            let eval = eval.ok_or(MetricsError::Empty)?;
            eer_with_threshold(eval).map(|(_, t)| t)
        }
    }
}
