use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate, train, MetricsReport, ThresholdPolicy, TrainConfig, TrainError};
use crate::data::Splits;
use crate::encoder::{EncoderConfig, ModelVariant, PromptSet};

/// Published reference rows on UniAttackData (fractions): ACER, ACC, AUC, EER.
pub const PUBLISHED_RESULTS: [(ModelVariant, [f64; 4]); 3] = [
    (ModelVariant::Vanilla, [0.0091, 0.9887, 0.9976, 0.0096]),
    (ModelVariant::SoftMoE, [0.0053, 0.9939, 0.9966, 0.0068]),
    (ModelVariant::LaSoftMoE, [0.0032, 0.9954, 0.9972, 0.0056]),
];

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub encoder: EncoderConfig,
    /// Its `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub policy: ThresholdPolicy,
    /// Train the three variants of a seed on separate threads.
    pub parallel: bool,
}

impl AblationConfig {
    pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub variant: ModelVariant,
    pub seed: u64,
    pub test: MetricsReport,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    pub variant: ModelVariant,
    pub acer: f64,
    pub acc: f64,
    pub auc: Option<f64>,
    pub eer: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub medians: Vec<MedianRow>,
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

fn run_one(
    variant: ModelVariant,
    seed: u64,
    splits: &Splits,
    prompts: &PromptSet,
    cfg: &AblationConfig,
) -> Result<AblationRun, TrainError> {
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let tag = |e| TrainError::Variant {
        variant,
        source: Box::new(e),
    };
    let out = train(variant, &cfg.encoder, &splits.train, prompts, &tc).map_err(tag)?;
    let test = evaluate(&out.model, &splits.eval, &splits.test, prompts, tc.template, cfg.policy).map_err(tag)?;
    Ok(AblationRun {
        variant,
        seed,
        test,
        loss_curve: out.loss_curve,
    })
}

/// Trains vanilla, Soft MoE and La-SoftMoE models for every seed and reports
/// test metrics per run plus per-variant medians.
pub fn run_ablation(splits: &Splits, prompts: &PromptSet, cfg: &AblationConfig) -> Result<AblationReport, TrainError> {
    let mut runs = Vec::with_capacity(3 * cfg.seeds.len());
    for &seed in &cfg.seeds {
        if cfg.parallel {
            let results: Vec<Result<AblationRun, TrainError>> = std::thread::scope(|s| {
                let handles: Vec<_> = ModelVariant::ALL
                    .iter()
                    .map(|&v| s.spawn(move || run_one(v, seed, splits, prompts, cfg)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            });
            for r in results {
                runs.push(r?);
            }
        } else {
            for v in ModelVariant::ALL {
                runs.push(run_one(v, seed, splits, prompts, cfg)?);
            }
        }
    }
    let medians = ModelVariant::ALL
        .iter()
        .map(|&variant| {
            let mine: Vec<&MetricsReport> = runs.iter().filter(|r| r.variant == variant).map(|r| &r.test).collect();
            let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<f64> {
                let vals: Option<Vec<f64>> = mine.iter().map(|m| f(m)).collect();
                vals.and_then(|v| median(&v))
            };
            MedianRow {
                variant,
                acer: col(&|m| Some(m.acer)).unwrap_or(f64::NAN),
                acc: col(&|m| Some(m.acc)).unwrap_or(f64::NAN),
                auc: col(&|m| m.auc),
                eer: col(&|m| m.eer),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        runs,
        medians,
    })
}

impl AblationReport {
    pub fn median_for(&self, variant: ModelVariant) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.variant == variant)
    }

    /// Median test metrics in percent, columns ACER, ACC, AUC, EER, followed
    /// by the published reference rows.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22}{:>10}{:>10}{:>10}{:>10}",
            "variant", "ACER(%)", "ACC(%)", "AUC(%)", "EER(%)"
        );
        for m in &self.medians {
            let _ = writeln!(
                out,
                "{:<22}{:>10}{:>10}{:>10}{:>10}",
                m.variant.as_str(),
                pct(Some(m.acer)),
                pct(Some(m.acc)),
                pct(m.auc),
                pct(m.eer)
            );
        }
        let _ = writeln!(out, "reference (UniAttackData, published):");
        for (v, [acer, acc, auc, eer]) in PUBLISHED_RESULTS {
            let _ = writeln!(
                out,
                "{:<22}{:>10}{:>10}{:>10}{:>10}",
                format!("  {}", v.as_str()),
                pct(Some(acer)),
                pct(Some(acc)),
                pct(Some(auc)),
                pct(Some(eer))
            );
        }
        out
    }
}
