//! Comparison methods: an oracle classifier trained on the shifted domain,
//! and fine-tuning of the source classifier on a labeled-target budget.

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetId, LabeledDataset};
use crate::models::{
    build_source_classifier, clone_classifier, fit_classifier, train_source_classifier,
    Classifier, FitConfig, TrainReport,
};
use crate::nn::ParamScope;
use crate::seeds;
use crate::shiftgen::{apply_shift, ShiftSpec};
use crate::{Error, Result};

/// A labeled-target example budget. One fifth (floor) goes to validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelBudget {
    n: usize,
}

impl LabelBudget {
    pub fn new(n: usize) -> Result<Self> {
        if n < 5 {
            return Err(Error::InvalidParameter(format!(
                "label budget must be at least 5 (one validation example), got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn val_count(&self) -> usize {
        self.n / 5
    }

    pub fn train_count(&self) -> usize {
        self.n - self.val_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneScheme {
    /// Update only the final linear layer; everything else stays frozen.
    LastLayer,
    /// Update all weights.
    Full,
}

impl FinetuneScheme {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneScheme::LastLayer => "ft-last",
            FinetuneScheme::Full => "ft-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ft-last" | "last-layer" | "last" => Ok(FinetuneScheme::LastLayer),
            "ft-full" | "full" => Ok(FinetuneScheme::Full),
            other => Err(Error::InvalidParameter(format!(
                "unknown fine-tuning scheme '{other}'"
            ))),
        }
    }

    fn scope(self) -> ParamScope {
        match self {
            FinetuneScheme::LastLayer => ParamScope::Head,
            FinetuneScheme::Full => ParamScope::All,
        }
    }
}

/// Trains a fresh classifier on the source training set pushed through the
/// shift, using the source recipe end to end. The shift draws come from a
/// derived stream so the oracle's training domain is sampled independently
/// of any evaluation set built from the same spec.
pub fn train_oracle(
    id: DatasetId,
    source_train: &LabeledDataset,
    spec: &ShiftSpec,
    seed: u64,
) -> Result<(Classifier, TrainReport)> {
    let mut train_spec = spec.clone();
    train_spec.seed = seeds::derive(spec.seed, "oracle-train-shift", &[]);
    let shifted = apply_shift(source_train, &train_spec)?;
    let mut model = build_source_classifier(id, seed);
    let report = train_source_classifier(&mut model, &shifted, seed)?;
    Ok((model, report))
}

/// Seeded uniform draw of `n` distinct indices from `0..pool`.
pub fn draw_budget_indices(pool: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeds::rng(seed, "finetune-draw", &[n as u64]);
    rand::seq::index::sample(&mut rng, pool, n).into_vec()
}

/// Fine-tunes a copy of `source` on `budget.n()` seeded draws from the
/// labeled target pool, holding out one fifth for early stopping.
pub fn finetune(
    source: &mut Classifier,
    labeled_target: &LabeledDataset,
    budget: LabelBudget,
    scheme: FinetuneScheme,
    seed: u64,
) -> Result<(Classifier, TrainReport)> {
    if budget.n() > labeled_target.len() {
        return Err(Error::InvalidParameter(format!(
            "label budget {} exceeds the target pool of {}",
            budget.n(),
            labeled_target.len()
        )));
    }
    let drawn = draw_budget_indices(labeled_target.len(), budget.n(), seed);
    let train_idx = &drawn[..budget.train_count()];
    let val_idx = &drawn[budget.train_count()..];

    let mut model = clone_classifier(source);
    let cfg = FitConfig {
        lr: 1e-3,
        batch_size: 128,
        patience: 5,
        max_epochs: 50,
        augment: false,
    };
    let report = fit_classifier(
        &mut model,
        labeled_target,
        train_idx,
        val_idx,
        scheme.scope(),
        seed,
        &cfg,
    )?;
    Ok((model, report))
}
