//! Sweep harness: builds shifted target domains from a clean base split,
//! runs each method against them, and persists subsampled accuracies.
//!
//! Protocol per grid point: the target domain is drawn once, seeded by the
//! grid coordinates so every method sees the same per-image shift draws,
//! then split 70/30 into an adaptation pool and an evaluation pool. Each
//! method's predictions on the evaluation pool are scored on k subsamples
//! shared across methods. The adapter receives the adaptation pool as bare
//! images; labels cannot reach it through that interface. Fine-tuning
//! baselines draw their label budgets from the adaptation pool, never from
//! the evaluation pool.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapt::{train_transform_net, transform_and_classify, AdaptConfig};
use crate::baselines::{finetune, train_oracle, FinetuneScheme, LabelBudget};
use crate::datasets::{load_dataset, DatasetId, LabeledDataset, Split};
use crate::image::ImageTensor;
use crate::models::{
    build_transform_net, clone_classifier, load_classifier, shuffle, Classifier,
};
use crate::seeds;
use crate::shiftgen::{apply_shift, Axis, ShiftSpec, ShiftStage};
use crate::transforms::ParamSpace;
use crate::{Error, Result};

// -- methods and sweep kinds --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Source,
    Adapted,
    Oracle,
    FtLast,
    FtFull,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Adapted => "adapted",
            Method::Oracle => "oracle",
            Method::FtLast => "ft-last",
            Method::FtFull => "ft-full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Method::Source),
            "adapted" | "unsupervised" => Ok(Method::Adapted),
            "oracle" => Ok(Method::Oracle),
            "ft-last" | "ft_last" | "last" => Ok(Method::FtLast),
            "ft-full" | "ft_full" | "full" => Ok(Method::FtFull),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (expected source, adapted, oracle, ft-last or ft-full)"
            ))),
        }
    }

    /// Whether the method consumes target labels.
    pub fn supervised(self) -> bool {
        matches!(self, Method::FtLast | Method::FtFull)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Severity,
    Range,
    Finetune,
    Multiaxis,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Severity => "severity",
            SweepKind::Range => "range",
            SweepKind::Finetune => "finetune",
            SweepKind::Multiaxis => "multiaxis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "severity" => Ok(SweepKind::Severity),
            "range" => Ok(SweepKind::Range),
            "finetune" => Ok(SweepKind::Finetune),
            "multiaxis" => Ok(SweepKind::Multiaxis),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep kind `{other}` (expected severity, range, finetune or multiaxis)"
            ))),
        }
    }
}

// -- configuration ------------------------------------------------------------------

/// One sweep, fully described. Which grid fields matter depends on `sweep`:
/// severity varies `mu_grid` at `sigma_fixed`; range varies `sigma_grid` at
/// `mu_fixed`; finetune crosses `mu_grid` domains (at `sigma_fixed`) with
/// `label_budgets`; multiaxis varies each of the two axes over `mu_grid`
/// while holding the other at `mu_fixed`, both at `sigma_fixed`.
///
/// `train_limit` and `target_limit` are desk-scale caps applied when the
/// environment is loaded; they shrink the source training set (and hence the
/// oracle's budget) and the target base split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub dataset: String,
    pub sweep: SweepKind,
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub mu_grid: Vec<f64>,
    #[serde(default)]
    pub sigma_grid: Vec<f64>,
    #[serde(default)]
    pub mu_fixed: f64,
    #[serde(default)]
    pub sigma_fixed: f64,
    #[serde(default)]
    pub label_budgets: Vec<usize>,
    pub methods: Vec<Method>,
    /// Fraction of the target domain held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Number of evaluation subsamples per record group.
    #[serde(default = "default_subsample_count")]
    pub subsample_count: usize,
    /// Fraction of the evaluation pool drawn per subsample.
    #[serde(default = "default_subsample_fraction")]
    pub subsample_fraction: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub target_limit: Option<usize>,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

fn default_eval_fraction() -> f64 {
    0.30
}

fn default_subsample_count() -> usize {
    10
}

fn default_subsample_fraction() -> f64 {
    0.8
}

/// One unit of work: a shift configuration, a label budget (0 when no labels
/// are consumed), and the methods to run there.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub stages: Vec<ShiftStage>,
    pub n_labels: usize,
    pub methods: Vec<Method>,
}

impl ExperimentConfig {
    fn base(
        experiment_id: &str,
        dataset: DatasetId,
        sweep: SweepKind,
        axes: Vec<Axis>,
        seeds: Vec<u64>,
    ) -> Self {
        Self {
            experiment_id: experiment_id.to_string(),
            dataset: dataset.name().to_string(),
            sweep,
            axes,
            mu_grid: Vec::new(),
            sigma_grid: Vec::new(),
            mu_fixed: 0.0,
            sigma_fixed: 0.0,
            label_budgets: Vec::new(),
            methods: vec![Method::Source, Method::Adapted, Method::Oracle],
            eval_fraction: default_eval_fraction(),
            subsample_count: default_subsample_count(),
            subsample_fraction: default_subsample_fraction(),
            seeds,
            train_limit: None,
            target_limit: None,
            adapt: AdaptConfig::default(),
        }
    }

    /// Rotation severity on MNIST: mu in [-60, 60] degrees, 15 degree step.
    pub fn mnist_severity(seed: u64) -> Self {
        let mut cfg = Self::base(
            "mnist-severity-rotation",
            DatasetId::Mnist,
            SweepKind::Severity,
            vec![Axis::Rotation],
            vec![seed],
        );
        cfg.mu_grid = vec![-60.0, -45.0, -30.0, -15.0, 0.0, 15.0, 30.0, 45.0, 60.0];
        cfg.sigma_fixed = 2.0;
        cfg
    }

    /// Rotation range on MNIST: mu = 30 with widening sigma.
    pub fn mnist_range(seed: u64) -> Self {
        let mut cfg = Self::base(
            "mnist-range-rotation",
            DatasetId::Mnist,
            SweepKind::Range,
            vec![Axis::Rotation],
            vec![seed],
        );
        cfg.sigma_grid = vec![2.0, 5.0, 10.0, 15.0, 20.0, 25.0];
        cfg.mu_fixed = 30.0;
        cfg
    }

    /// Label-budget crossover on MNIST rotation domains (mu 30 and 60, sigma 2).
    pub fn mnist_finetune(seeds: Vec<u64>) -> Self {
        let mut cfg = Self::base(
            "mnist-finetune-rotation",
            DatasetId::Mnist,
            SweepKind::Finetune,
            vec![Axis::Rotation],
            seeds,
        );
        cfg.mu_grid = vec![30.0, 60.0];
        cfg.sigma_fixed = 2.0;
        cfg.label_budgets = vec![100, 500, 1000, 2000, 4000, 7000];
        cfg.methods = vec![
            Method::Source,
            Method::Adapted,
            Method::Oracle,
            Method::FtLast,
            Method::FtFull,
        ];
        cfg
    }

    /// Brightness or contrast severity on CIFAR-10: mu in [0.25, 1.75].
    pub fn cifar_severity(axis: Axis, seed: u64) -> Self {
        let id = format!("cifar10-severity-{}", axis.name());
        let mut cfg = Self::base(
            &id,
            DatasetId::Cifar10,
            SweepKind::Severity,
            vec![axis],
            vec![seed],
        );
        cfg.mu_grid = vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75];
        cfg.sigma_fixed = 0.05;
        cfg
    }

    /// Brightness or contrast range on CIFAR-10: mu = 0.5 with widening sigma.
    pub fn cifar_range(axis: Axis, seed: u64) -> Self {
        let id = format!("cifar10-range-{}", axis.name());
        let mut cfg = Self::base(
            &id,
            DatasetId::Cifar10,
            SweepKind::Range,
            vec![axis],
            vec![seed],
        );
        cfg.sigma_grid = vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
        cfg.mu_fixed = 0.5;
        cfg
    }

    /// Two-axis brightness/contrast sweep on CIFAR-10: each axis varied over
    /// [0.5, 1.75] while the other is held at 0.5.
    pub fn cifar_multiaxis(seed: u64) -> Self {
        let mut cfg = Self::base(
            "cifar10-multiaxis-brightness-contrast",
            DatasetId::Cifar10,
            SweepKind::Multiaxis,
            vec![Axis::Brightness, Axis::Contrast],
            vec![seed],
        );
        cfg.mu_grid = vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75];
        cfg.mu_fixed = 0.5;
        cfg.sigma_fixed = 0.05;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Config(format!(
                "experiment id `{}` must be non-empty and use only [A-Za-z0-9._-]",
                self.experiment_id
            )));
        }
        DatasetId::parse(&self.dataset)?;
        self.adapt.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if has_duplicates(&self.methods) {
            return Err(Error::Config("duplicate method in config".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        if has_duplicates(&self.seeds) {
            return Err(Error::Config(
                "duplicate seeds would produce duplicate records".into(),
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval fraction must lie in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.subsample_count < 2 {
            return Err(Error::Config(
                "subsample count must be at least 2".into(),
            ));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction must lie in (0, 1], got {}",
                self.subsample_fraction
            )));
        }

        let expect_axes = if self.sweep == SweepKind::Multiaxis { 2 } else { 1 };
        if self.axes.len() != expect_axes {
            return Err(Error::Config(format!(
                "{} sweep takes {} axis(es), got {}",
                self.sweep.name(),
                expect_axes,
                self.axes.len()
            )));
        }
        if expect_axes == 2 && self.axes[0] == self.axes[1] {
            return Err(Error::Config("multiaxis sweep needs two distinct axes".into()));
        }

        let supervised = self.methods.iter().any(|m| m.supervised());
        if supervised && self.sweep != SweepKind::Finetune {
            return Err(Error::Config(format!(
                "fine-tuning methods need a label budget grid; use a finetune sweep, not {}",
                self.sweep.name()
            )));
        }
        match self.sweep {
            SweepKind::Severity => {
                check_grid("mu grid", &self.mu_grid)?;
                check_mus(self.axes[0], &self.mu_grid)?;
                check_sigma("sigma", self.sigma_fixed)?;
            }
            SweepKind::Range => {
                check_grid("sigma grid", &self.sigma_grid)?;
                for &s in &self.sigma_grid {
                    check_sigma("sigma", s)?;
                }
                check_mus(self.axes[0], &[self.mu_fixed])?;
            }
            SweepKind::Finetune => {
                check_grid("mu grid", &self.mu_grid)?;
                check_mus(self.axes[0], &self.mu_grid)?;
                check_sigma("sigma", self.sigma_fixed)?;
                if supervised {
                    if self.label_budgets.is_empty() {
                        return Err(Error::Config(
                            "finetune sweep with ft methods needs label budgets".into(),
                        ));
                    }
                } else if !self.label_budgets.is_empty() {
                    return Err(Error::Config(
                        "label budgets given but no fine-tuning method selected".into(),
                    ));
                }
                if has_duplicates(&self.label_budgets) {
                    return Err(Error::Config("duplicate label budget".into()));
                }
                for &n in &self.label_budgets {
                    LabelBudget::new(n)?;
                }
            }
            SweepKind::Multiaxis => {
                check_grid("mu grid", &self.mu_grid)?;
                check_sigma("sigma", self.sigma_fixed)?;
                // the grid and the held value are applied to each axis in turn
                for &axis in &self.axes {
                    check_mus(axis, &self.mu_grid)?;
                    check_mus(axis, &[self.mu_fixed])?;
                }
            }
        }

        // Every shift the plan will request must be a valid forward shift.
        for row in self.plan()? {
            ShiftSpec {
                stages: row.stages,
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    /// Clips label budgets to the adaptation-pool size implied by
    /// `target_len`, dropping budgets that do not fit. Call before `plan` so
    /// record counts match what the runner can actually produce.
    pub fn resolve(&self, target_len: usize) -> Result<ExperimentConfig> {
        self.validate()?;
        let mut out = self.clone();
        if self.sweep == SweepKind::Finetune && self.methods.iter().any(|m| m.supervised()) {
            let (adapt_len, _) = split_sizes(target_len, self.eval_fraction);
            let mut budgets: Vec<usize> = self
                .label_budgets
                .iter()
                .copied()
                .filter(|&n| n <= adapt_len)
                .collect();
            budgets.sort_unstable();
            if budgets.is_empty() {
                return Err(Error::Config(format!(
                    "every label budget exceeds the adaptation pool of {adapt_len}"
                )));
            }
            out.label_budgets = budgets;
        }
        Ok(out)
    }

    /// Expands the grid into work rows. Multiaxis sweeps share the corner
    /// where both axes sit at the held value; the duplicate row is emitted
    /// once so records stay unique.
    pub fn plan(&self) -> Result<Vec<PlanRow>> {
        let unsup: Vec<Method> = self
            .methods
            .iter()
            .copied()
            .filter(|m| !m.supervised())
            .collect();
        let sup: Vec<Method> = self
            .methods
            .iter()
            .copied()
            .filter(|m| m.supervised())
            .collect();
        let axis = |i: usize| -> Result<Axis> {
            self.axes.get(i).copied().ok_or_else(|| {
                Error::Config(format!(
                    "{} sweep needs axis #{}",
                    self.sweep.name(),
                    i + 1
                ))
            })
        };

        let mut rows = Vec::new();
        match self.sweep {
            SweepKind::Severity => {
                let a = axis(0)?;
                for &mu in &self.mu_grid {
                    rows.push(PlanRow {
                        stages: vec![ShiftStage::new(a, mu, self.sigma_fixed)],
                        n_labels: 0,
                        methods: self.methods.clone(),
                    });
                }
            }
            SweepKind::Range => {
                let a = axis(0)?;
                for &sigma in &self.sigma_grid {
                    rows.push(PlanRow {
                        stages: vec![ShiftStage::new(a, self.mu_fixed, sigma)],
                        n_labels: 0,
                        methods: self.methods.clone(),
                    });
                }
            }
            SweepKind::Finetune => {
                let a = axis(0)?;
                for &mu in &self.mu_grid {
                    let stages = vec![ShiftStage::new(a, mu, self.sigma_fixed)];
                    if !unsup.is_empty() {
                        rows.push(PlanRow {
                            stages: stages.clone(),
                            n_labels: 0,
                            methods: unsup.clone(),
                        });
                    }
                    if !sup.is_empty() {
                        for &n in &self.label_budgets {
                            rows.push(PlanRow {
                                stages: stages.clone(),
                                n_labels: n,
                                methods: sup.clone(),
                            });
                        }
                    }
                }
            }
            SweepKind::Multiaxis => {
                let (a, b) = (axis(0)?, axis(1)?);
                let sigma = self.sigma_fixed;
                for &mu in &self.mu_grid {
                    rows.push(PlanRow {
                        stages: vec![
                            ShiftStage::new(a, mu, sigma),
                            ShiftStage::new(b, self.mu_fixed, sigma),
                        ],
                        n_labels: 0,
                        methods: self.methods.clone(),
                    });
                }
                for &mu in &self.mu_grid {
                    let row = PlanRow {
                        stages: vec![
                            ShiftStage::new(a, self.mu_fixed, sigma),
                            ShiftStage::new(b, mu, sigma),
                        ],
                        n_labels: 0,
                        methods: self.methods.clone(),
                    };
                    if !rows.contains(&row) {
                        rows.push(row);
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Exact number of records one run will emit. Resolve the config first
    /// when fine-tuning budgets might be clipped.
    pub fn expected_record_count(&self) -> Result<usize> {
        let per_seed: usize = self.plan()?.iter().map(|r| r.methods.len()).sum();
        Ok(per_seed * self.subsample_count * self.seeds.len())
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter()
        .enumerate()
        .any(|(i, x)| xs[..i].contains(x))
}

fn check_grid(what: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config(format!("{what} is empty")));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{what} holds a non-finite value")));
    }
    if has_duplicates(grid) {
        return Err(Error::Config(format!("{what} holds a duplicate value")));
    }
    Ok(())
}

fn check_sigma(what: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Config(format!("{what} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

fn check_mus(axis: Axis, mus: &[f64]) -> Result<()> {
    let (lo, hi) = axis.forward_space();
    for &mu in mus {
        if !(mu.is_finite() && mu >= lo && mu <= hi) {
            return Err(Error::Config(format!(
                "{} mu {} outside the forward space [{lo}, {hi}]",
                axis.name(),
                mu
            )));
        }
    }
    Ok(())
}

// -- target splitting and subsampled evaluation -------------------------------------

/// (adaptation pool size, evaluation pool size) for a target domain of `n`.
pub fn split_sizes(n: usize, eval_fraction: f64) -> (usize, usize) {
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    (n - n_eval, n_eval)
}

/// Seeded disjoint, exhaustive split of a target domain into an adaptation
/// pool and an evaluation pool. The adapter is handed the adaptation pool's
/// images only; the labels here exist for the fine-tuning baselines.
pub fn split_target(
    target: &LabeledDataset,
    eval_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if target.len() < 10 {
        return Err(Error::InvalidDataset(format!(
            "target domain of {} examples is too small to split",
            target.len()
        )));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eval fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let (_, n_eval) = split_sizes(target.len(), eval_fraction);
    let mut idx: Vec<usize> = (0..target.len()).collect();
    let mut rng = seeds::rng(seed, "target-split", &[]);
    shuffle(&mut idx, &mut rng);
    let mut eval_idx = idx[..n_eval].to_vec();
    let mut adapt_idx = idx[n_eval..].to_vec();
    eval_idx.sort_unstable();
    adapt_idx.sort_unstable();
    let adapt = target.subset(&adapt_idx, format!("{}/adapt", target.name()))?;
    let eval = target.subset(&eval_idx, format!("{}/eval", target.name()))?;
    Ok((adapt, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleSummary {
    pub mean: f64,
    pub std: f64,
    /// Per-subsample accuracies, length k.
    pub accuracies: Vec<f64>,
}

/// Scores predictions against labels on k seeded subsamples drawn without
/// replacement, each `fraction` of the pool. The error bars in the plots are
/// the standard deviation over these k values.
pub fn evaluate_with_subsampling(
    predictions: &[usize],
    labels: &[usize],
    k: usize,
    fraction: f64,
    seed: u64,
) -> Result<SubsampleSummary> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidDataset("empty evaluation pool".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one subsample".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = predictions.len();
    let correct: Vec<bool> = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| p == l)
        .collect();
    let m = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut accuracies = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = seeds::rng(seed, "subsample", &[i as u64]);
        let picks = rand::seq::index::sample(&mut rng, n, m);
        let hits = picks.iter().filter(|&j| correct[j]).count();
        accuracies.push(hits as f64 / m as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / k as f64;
    let std = if k > 1 {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(SubsampleSummary {
        mean,
        std,
        accuracies,
    })
}

// -- result records and the CSV sink ------------------------------------------------

/// One subsample's accuracy at one grid point. `mu_2`/`sigma_2` are filled
/// only for two-stage shifts; `n_labels` is 0 for methods that consume no
/// target labels. The field order here is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub dataset: String,
    pub axes: String,
    pub mu_1: f64,
    pub sigma_1: f64,
    pub mu_2: Option<f64>,
    pub sigma_2: Option<f64>,
    pub method: String,
    pub n_labels: usize,
    pub subsample_idx: usize,
    pub seed: u64,
    pub accuracy: f64,
}

pub const RESULT_CSV_HEADER: [&str; 12] = [
    "experiment_id",
    "dataset",
    "axes",
    "mu_1",
    "sigma_1",
    "mu_2",
    "sigma_2",
    "method",
    "n_labels",
    "subsample_idx",
    "seed",
    "accuracy",
];

fn opt_key(v: Option<f64>) -> (bool, f64) {
    match v {
        None => (false, 0.0),
        Some(x) => (true, x),
    }
}

fn record_cmp(a: &ResultRecord, b: &ResultRecord) -> std::cmp::Ordering {
    let ka = opt_key(a.mu_2);
    let kb = opt_key(b.mu_2);
    let sa = opt_key(a.sigma_2);
    let sb = opt_key(b.sigma_2);
    a.experiment_id
        .cmp(&b.experiment_id)
        .then_with(|| a.axes.cmp(&b.axes))
        .then_with(|| a.mu_1.total_cmp(&b.mu_1))
        .then_with(|| a.sigma_1.total_cmp(&b.sigma_1))
        .then_with(|| ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)))
        .then_with(|| sa.0.cmp(&sb.0).then(sa.1.total_cmp(&sb.1)))
        .then_with(|| a.n_labels.cmp(&b.n_labels))
        .then_with(|| a.method.cmp(&b.method))
        .then_with(|| a.seed.cmp(&b.seed))
        .then_with(|| a.subsample_idx.cmp(&b.subsample_idx))
}

/// Writes records sorted into a canonical order, so the same result set
/// always produces the same bytes no matter how the work was scheduled.
/// Rejects duplicate (experiment, grid point, method, budget, seed,
/// subsample) keys and the empty set. The write is atomic: a temp file is
/// renamed over the destination.
pub fn write_records_csv(path: &Path, records: &[ResultRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no records to write".into()));
    }
    for r in records {
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::Config(format!(
                "accuracy {} out of [0, 1] in record for {}",
                r.accuracy, r.method
            )));
        }
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(record_cmp);
    for w in sorted.windows(2) {
        if record_cmp(&w[0], &w[1]) == std::cmp::Ordering::Equal {
            return Err(Error::Config(format!(
                "duplicate record: {} {} mu_1={} sigma_1={} n={} seed={} subsample={}",
                w[0].experiment_id,
                w[0].method,
                w[0].mu_1,
                w[0].sigma_1,
                w[0].n_labels,
                w[0].seed,
                w[0].subsample_idx
            )));
        }
    }

    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in &sorted {
        wtr.serialize(r)
            .map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Config(format!("csv flush: {e}")))?;

    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != RESULT_CSV_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected header {:?}",
            path.display(),
            got.join(",")
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ResultRecord =
            row.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::Config(format!(
                "{}: accuracy {} out of [0, 1]",
                path.display(),
                r.accuracy
            )));
        }
        out.push(r);
    }
    Ok(out)
}

// -- the runner ---------------------------------------------------------------------

/// Everything a sweep needs that lives outside the config: the trained
/// source classifier, the clean training split (the oracle's budget) and the
/// clean split that target domains are built from.
pub struct ExperimentEnv {
    pub dataset: DatasetId,
    pub source: Classifier,
    pub source_train: LabeledDataset,
    pub target_base: LabeledDataset,
}

/// Loads the environment for a config: source checkpoint plus the train and
/// test splits, with desk-scale limits applied. Target domains are built
/// from the test split, which the source classifier never trained on.
pub fn load_environment(
    cfg: &ExperimentConfig,
    source_dir: &Path,
    data_root: &Path,
) -> Result<ExperimentEnv> {
    cfg.validate()?;
    let id = DatasetId::parse(&cfg.dataset)?;
    let (source, meta) = load_classifier(source_dir)?;
    if meta.dataset != cfg.dataset {
        return Err(Error::Config(format!(
            "source checkpoint was trained on {}, config wants {}",
            meta.dataset, cfg.dataset
        )));
    }
    let mut train = load_dataset(id, Split::Train, data_root)?;
    let mut test = load_dataset(id, Split::Test, data_root)?;
    if let Some(n) = cfg.train_limit {
        train = desk_subset(train, n, cfg.seeds[0], "limit-train")?;
    }
    if let Some(n) = cfg.target_limit {
        test = desk_subset(test, n, cfg.seeds[0], "limit-target")?;
    }
    Ok(ExperimentEnv {
        dataset: id,
        source,
        source_train: train,
        target_base: test,
    })
}

/// Seeded cap: at most `n` samples drawn without replacement, kept in index
/// order. `label` keys the derived stream so distinct uses stay independent.
pub fn desk_subset(
    ds: LabeledDataset,
    n: usize,
    seed: u64,
    label: &str,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config(format!("{label}: limit must be positive")));
    }
    if n >= ds.len() {
        return Ok(ds);
    }
    let mut rng = seeds::rng(seed, label, &[]);
    let mut idx = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    idx.sort_unstable();
    let name = format!("{}[{}]", ds.name(), n);
    ds.subset(&idx, name)
}

fn stage_counters(stages: &[ShiftStage]) -> Vec<u64> {
    let mut c = Vec::with_capacity(stages.len() * 3);
    for st in stages {
        c.push(st.axis as u64);
        c.push(st.mu.to_bits());
        c.push(st.sigma.to_bits());
    }
    c
}

/// Runs every method of a stage group (plan rows sharing one shift) for one
/// top-level seed. All derived seeds are keyed by the grid coordinates, not
/// the iteration index, so identical grid points land on identical draws.
fn run_group(
    cfg: &ExperimentConfig,
    dataset: DatasetId,
    source: &mut Classifier,
    source_train: &LabeledDataset,
    target_base: &LabeledDataset,
    rows: &[PlanRow],
    seed: u64,
) -> Result<Vec<ResultRecord>> {
    let stages = &rows[0].stages;
    let counters = stage_counters(stages);
    let spec = ShiftSpec {
        stages: stages.clone(),
        seed: seeds::derive(seed, "target-shift", &counters),
    };
    let target = apply_shift(target_base, &spec)?;
    let (adapt_pool, eval_pool) = split_target(
        &target,
        cfg.eval_fraction,
        seeds::derive(seed, "target-split", &counters),
    )?;
    let eval_refs: Vec<&ImageTensor> = eval_pool.images().iter().collect();
    let labels = eval_pool.labels();
    let sub_seed = seeds::derive(seed, "subsample", &counters);

    let axes_name = stages
        .iter()
        .map(|s| s.axis.name())
        .collect::<Vec<_>>()
        .join("+");
    let (mu_1, sigma_1) = (stages[0].mu, stages[0].sigma);
    let (mu_2, sigma_2) = match stages.get(1) {
        Some(s) => (Some(s.mu), Some(s.sigma)),
        None => (None, None),
    };

    let mut out = Vec::new();
    for row in rows {
        for &method in &row.methods {
            let predictions = match method {
                Method::Source => source.predict(&eval_refs),
                Method::Adapted => {
                    let mut tnet = build_transform_net(
                        dataset,
                        ParamSpace::default(),
                        seeds::derive(seed, "tnet-init", &counters),
                    );
                    let mut acfg = cfg.adapt;
                    acfg.seed = seeds::derive(seed, "adapt-train", &counters);
                    train_transform_net(&mut tnet, adapt_pool.images(), source, &acfg)?;
                    let (p, _) = transform_and_classify(&mut tnet, eval_pool.images(), source)?;
                    p
                }
                Method::Oracle => {
                    let (mut oracle, _) = train_oracle(
                        dataset,
                        source_train,
                        &spec,
                        seeds::derive(seed, "oracle-train", &counters),
                    )?;
                    oracle.predict(&eval_refs)
                }
                Method::FtLast | Method::FtFull => {
                    let scheme = if method == Method::FtLast {
                        FinetuneScheme::LastLayer
                    } else {
                        FinetuneScheme::Full
                    };
                    let budget = LabelBudget::new(row.n_labels)?;
                    let mut ctr = counters.clone();
                    ctr.push(row.n_labels as u64);
                    let (mut model, _) = finetune(
                        source,
                        &adapt_pool,
                        budget,
                        scheme,
                        seeds::derive(seed, "finetune", &ctr),
                    )?;
                    model.predict(&eval_refs)
                }
            };
            let summary = evaluate_with_subsampling(
                &predictions,
                labels,
                cfg.subsample_count,
                cfg.subsample_fraction,
                sub_seed,
            )?;
            for (i, &acc) in summary.accuracies.iter().enumerate() {
                out.push(ResultRecord {
                    experiment_id: cfg.experiment_id.clone(),
                    dataset: cfg.dataset.clone(),
                    axes: axes_name.clone(),
                    mu_1,
                    sigma_1,
                    mu_2,
                    sigma_2,
                    method: method.name().to_string(),
                    n_labels: row.n_labels,
                    subsample_idx: i,
                    seed,
                    accuracy: acc,
                });
            }
        }
    }
    Ok(out)
}

fn group_rows(plan: Vec<PlanRow>) -> Vec<Vec<PlanRow>> {
    let mut groups: Vec<Vec<PlanRow>> = Vec::new();
    for row in plan {
        match groups.last_mut() {
            Some(g) if g[0].stages == row.stages => g.push(row),
            _ => groups.push(vec![row]),
        }
    }
    groups
}

/// Runs a full sweep and returns every record. `jobs` > 1 spreads stage
/// groups over worker threads; results are identical to a sequential run
/// because every unit of work is independently seeded and outputs are
/// reassembled in plan order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    let cfg = cfg.resolve(env.target_base.len())?;
    if env.dataset.name() != cfg.dataset {
        return Err(Error::Config(format!(
            "environment holds {}, config wants {}",
            env.dataset.name(),
            cfg.dataset
        )));
    }
    let groups = group_rows(cfg.plan()?);
    let mut tasks: Vec<(u64, &[PlanRow])> = Vec::new();
    for &seed in &cfg.seeds {
        for g in &groups {
            tasks.push((seed, g.as_slice()));
        }
    }

    let records = if jobs <= 1 || tasks.len() <= 1 {
        let mut all = Vec::new();
        for &(seed, rows) in &tasks {
            all.extend(run_group(
                &cfg,
                env.dataset,
                &mut env.source,
                &env.source_train,
                &env.target_base,
                rows,
                seed,
            )?);
        }
        all
    } else {
        run_tasks_parallel(&cfg, env, &tasks, jobs)?
    };

    let expected = cfg.expected_record_count()?;
    assert_eq!(
        records.len(),
        expected,
        "sweep produced {} records, plan promised {expected}",
        records.len()
    );
    Ok(records)
}

fn run_tasks_parallel(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    tasks: &[(u64, &[PlanRow])],
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    let n_workers = jobs.min(tasks.len());
    let clones: Vec<Classifier> = (0..n_workers)
        .map(|_| clone_classifier(&mut env.source))
        .collect();
    let dataset = env.dataset;
    let source_train = &env.source_train;
    let target_base = &env.target_base;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<ResultRecord>>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for mut model in clones {
            let next = &next;
            let slots = &slots;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let (seed, rows) = tasks[i];
                let result = run_group(
                    cfg,
                    dataset,
                    &mut model,
                    source_train,
                    target_base,
                    rows,
                    seed,
                );
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut all = Vec::new();
    for slot in slots {
        let result = slot
            .into_inner()
            .unwrap()
            .expect("worker pool left a task unfinished");
        all.extend(result?);
    }
    Ok(all)
}

pub fn run_severity_sweep(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    expect_kind(cfg, SweepKind::Severity)?;
    run_sweep(cfg, env, jobs)
}

pub fn run_range_sweep(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    expect_kind(cfg, SweepKind::Range)?;
    run_sweep(cfg, env, jobs)
}

pub fn run_finetune_comparison(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    expect_kind(cfg, SweepKind::Finetune)?;
    run_sweep(cfg, env, jobs)
}

pub fn run_multiaxis_sweep(
    cfg: &ExperimentConfig,
    env: &mut ExperimentEnv,
    jobs: usize,
) -> Result<Vec<ResultRecord>> {
    expect_kind(cfg, SweepKind::Multiaxis)?;
    run_sweep(cfg, env, jobs)
}

fn expect_kind(cfg: &ExperimentConfig, kind: SweepKind) -> Result<()> {
    if cfg.sweep != kind {
        return Err(Error::Config(format!(
            "config describes a {} sweep, not {}",
            cfg.sweep.name(),
            kind.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::default_data_root;
    use crate::models::build_source_classifier;

    fn labeled_noise(n: usize) -> LabeledDataset {
        use ndarray::Array3;
        use rand::Rng;
        let mut rng = seeds::rng(33, "exp-test-data", &[n as u64]);
        let images: Vec<ImageTensor> = (0..n)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn((1, 8, 8), |_| rng.gen_range(0.0..1.0)))
                    .unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        LabeledDataset::new("noise", images, labels, 2).unwrap()
    }

    #[test]
    fn split_respects_the_seventy_thirty_protocol() {
        assert_eq!(split_sizes(10000, 0.30), (7000, 3000));
        assert_eq!(split_sizes(10, 0.30), (7, 3));

        let ds = labeled_noise(40);
        let (adapt, eval) = split_target(&ds, 0.30, 5).unwrap();
        assert_eq!(adapt.len(), 28);
        assert_eq!(eval.len(), 12);

        // Disjoint and exhaustive: every original image occurs exactly once.
        let key = |img: &ImageTensor| img.data().iter().map(|v| v.to_bits() as u64).sum::<u64>();
        let mut seen: Vec<u64> = adapt.images().iter().map(key).collect();
        seen.extend(eval.images().iter().map(key));
        seen.sort_unstable();
        let mut orig: Vec<u64> = ds.images().iter().map(key).collect();
        orig.sort_unstable();
        assert_eq!(seen, orig);

        // Seeded: the same seed reproduces the split, a different one moves it.
        let (a2, e2) = split_target(&ds, 0.30, 5).unwrap();
        assert_eq!(adapt.labels(), a2.labels());
        assert_eq!(eval.labels(), e2.labels());
        assert_eq!(key(adapt.image(0)), key(a2.image(0)));
        let (a3, _) = split_target(&ds, 0.30, 6).unwrap();
        assert!(
            adapt.labels() != a3.labels() || key(adapt.image(0)) != key(a3.image(0)),
            "different seed produced an identical split"
        );

        assert!(split_target(&labeled_noise(9), 0.30, 0).is_err());
    }

    #[test]
    fn subsampling_statistics_behave() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();

        let s = evaluate_with_subsampling(&labels.clone(), &labels, 5, 0.8, 3).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 0.0);
        assert!(s.accuracies.iter().all(|&a| a == 1.0));

        // fraction 1.0: every subsample is the whole pool
        let mut preds = labels.clone();
        for p in preds.iter_mut().take(10) {
            *p = 1 - *p;
        }
        let full = evaluate_with_subsampling(&preds, &labels, 4, 1.0, 3).unwrap();
        assert!(full.accuracies.iter().all(|&a| a == 0.75));
        assert_eq!(full.std, 0.0);

        let part = evaluate_with_subsampling(&preds, &labels, 6, 0.5, 3).unwrap();
        let lo = part.accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = part
            .accuracies
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(part.mean >= lo && part.mean <= hi);
        assert!(
            part.accuracies.iter().any(|&a| a != part.accuracies[0]),
            "expected draws to differ across subsamples"
        );
        let again = evaluate_with_subsampling(&preds, &labels, 6, 0.5, 3).unwrap();
        assert_eq!(part, again);

        assert!(evaluate_with_subsampling(&preds[..39], &labels, 4, 0.8, 0).is_err());
        assert!(evaluate_with_subsampling(&preds, &labels, 0, 0.8, 0).is_err());
        assert!(evaluate_with_subsampling(&preds, &labels, 4, 0.0, 0).is_err());
        assert!(evaluate_with_subsampling(&preds, &labels, 4, 1.5, 0).is_err());
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let ok = ExperimentConfig::mnist_severity(1);
        ok.validate().unwrap();

        let mut c = ok.clone();
        c.experiment_id = "has,comma".into();
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.dataset = "imagenet".into();
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.mu_grid.clear();
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.eval_fraction = 1.0;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.subsample_count = 1;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.subsample_fraction = 0.0;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.seeds = vec![];
        assert!(c.validate().is_err());
        c.seeds = vec![3, 3];
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.methods.push(Method::FtLast);
        assert!(c.validate().is_err(), "ft method outside a finetune sweep");

        let mut c = ok.clone();
        c.methods = vec![Method::Source, Method::Source];
        assert!(c.validate().is_err());

        // out-of-space forward parameter
        let mut c = ok.clone();
        c.mu_grid = vec![0.0, 400.0];
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::cifar_multiaxis(1);
        c.axes = vec![Axis::Brightness, Axis::Brightness];
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::mnist_finetune(vec![1]);
        c.label_budgets.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::mnist_finetune(vec![1]);
        c.label_budgets = vec![4];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::mnist_finetune(vec![1]);
        c.methods = vec![Method::Source, Method::Adapted];
        assert!(c.validate().is_err(), "budgets without any ft method");
    }

    #[test]
    fn plans_enumerate_the_grid() {
        let sev = ExperimentConfig::mnist_severity(1);
        let plan = sev.plan().unwrap();
        assert_eq!(plan.len(), 9);
        assert!(plan
            .iter()
            .all(|r| r.stages.len() == 1 && r.stages[0].sigma == 2.0 && r.n_labels == 0));
        assert_eq!(plan[0].stages[0].mu, -60.0);
        assert_eq!(
            sev.expected_record_count().unwrap(),
            9 * 3 * sev.subsample_count
        );

        let mut ft = ExperimentConfig::mnist_finetune(vec![1, 2]);
        ft.label_budgets = vec![100, 500];
        let plan = ft.plan().unwrap();
        // per domain: one unsupervised row + one row per budget
        assert_eq!(plan.len(), 2 * 3);
        assert_eq!(plan[0].n_labels, 0);
        assert_eq!(plan[0].methods.len(), 3);
        assert_eq!(plan[1].n_labels, 100);
        assert_eq!(plan[1].methods, vec![Method::FtLast, Method::FtFull]);
        assert_eq!(
            ft.expected_record_count().unwrap(),
            (2 * 3 + 4 * 2) * 10 * 2
        );

        let mut ma = ExperimentConfig::cifar_multiaxis(1);
        ma.mu_grid = vec![0.5, 0.75];
        let plan = ma.plan().unwrap();
        // 2 + 2 rows minus the shared (0.5, 0.5) corner
        assert_eq!(plan.len(), 3);
        assert!(plan.iter().all(|r| r.stages.len() == 2));
        let corner = &plan[0].stages;
        assert_eq!((corner[0].mu, corner[1].mu), (0.5, 0.5));
    }

    #[test]
    fn resolve_clips_budgets_to_the_pool() {
        let mut ft = ExperimentConfig::mnist_finetune(vec![1]);
        ft.label_budgets = vec![100, 20, 50];
        // target of 100 -> adapt pool of 70
        let resolved = ft.resolve(100).unwrap();
        assert_eq!(resolved.label_budgets, vec![20, 50]);

        ft.label_budgets = vec![100, 200];
        assert!(ft.resolve(100).is_err(), "no budget fits the pool");

        // non-finetune sweeps resolve to themselves
        let sev = ExperimentConfig::mnist_severity(1);
        assert_eq!(sev.resolve(100).unwrap(), sev);
    }

    fn sample_records() -> Vec<ResultRecord> {
        let mk = |method: &str, mu_2: Option<f64>, idx: usize, acc: f64| ResultRecord {
            experiment_id: "exp".into(),
            dataset: "mnist".into(),
            axes: if mu_2.is_some() {
                "brightness+contrast".into()
            } else {
                "rotation".into()
            },
            mu_1: 30.0,
            sigma_1: 2.0,
            mu_2,
            sigma_2: mu_2.map(|_| 0.05),
            method: method.into(),
            n_labels: 0,
            subsample_idx: idx,
            seed: 7,
            accuracy: acc,
        };
        vec![
            mk("source", None, 0, 0.5),
            mk("source", None, 1, 0.625),
            mk("adapted", None, 0, 0.875),
            mk("adapted", Some(0.5), 0, 0.8125),
        ]
    }

    #[test]
    fn records_csv_round_trips_byte_identically() {
        let dir = tempdir();
        let path = dir.join("results.csv");
        let records = sample_records();
        write_records_csv(&path, &records).unwrap();
        let first = std::fs::read(&path).unwrap();

        let text = String::from_utf8(first.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RESULT_CSV_HEADER.join(","));
        // single-stage rows leave the second axis columns empty
        assert!(text
            .lines()
            .any(|row| row.contains("rotation") && row.contains(",,")));
        assert_eq!(text.lines().count(), 1 + records.len());

        // reversing input order must not change the bytes
        let mut reversed = records.clone();
        reversed.reverse();
        write_records_csv(&path, &reversed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);

        let mut sorted = records.clone();
        sorted.sort_by(record_cmp);
        assert_eq!(read_records_csv(&path).unwrap(), sorted);

        let mut dup = records.clone();
        dup.push(records[0].clone());
        assert!(write_records_csv(&path, &dup).is_err());
        assert!(write_records_csv(&path, &[]).is_err());

        let mut bad = records;
        bad[0].accuracy = 1.5;
        assert!(write_records_csv(&path, &bad).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "unshift-exp-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_env(train_n: usize, test_n: usize) -> ExperimentEnv {
        let root = default_data_root();
        let train = load_dataset(DatasetId::Mnist, Split::Train, &root).unwrap();
        let test = load_dataset(DatasetId::Mnist, Split::Test, &root).unwrap();
        let train_idx: Vec<usize> = (0..train_n).collect();
        let test_idx: Vec<usize> = (0..test_n).collect();
        ExperimentEnv {
            dataset: DatasetId::Mnist,
            source: build_source_classifier(DatasetId::Mnist, 7),
            source_train: train.subset(&train_idx, "train-tiny").unwrap(),
            target_base: test.subset(&test_idx, "test-tiny").unwrap(),
        }
    }

    fn tiny_severity_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::mnist_severity(11);
        cfg.mu_grid = vec![0.0, 30.0];
        cfg.methods = vec![Method::Source, Method::Adapted];
        cfg.subsample_count = 3;
        cfg.adapt.epochs = 1;
        cfg.adapt.batch_size = 16;
        cfg
    }

    #[test]
    fn severity_sweep_emits_the_promised_records_deterministically() {
        let cfg = tiny_severity_cfg();
        let mut env = tiny_env(50, 50);
        let records = run_severity_sweep(&cfg, &mut env, 1).unwrap();
        assert_eq!(records.len(), 2 * 2 * 3);
        assert!(records.iter().all(|r| r.axes == "rotation"
            && r.mu_2.is_none()
            && r.n_labels == 0
            && (0.0..=1.0).contains(&r.accuracy)));
        assert_eq!(
            records.iter().filter(|r| r.method == "adapted").count(),
            6
        );

        // same config, fresh environment: identical records
        let mut env2 = tiny_env(50, 50);
        let again = run_severity_sweep(&cfg, &mut env2, 1).unwrap();
        assert_eq!(records, again);

        // worker-parallel execution must not change anything
        let mut env3 = tiny_env(50, 50);
        let parallel = run_severity_sweep(&cfg, &mut env3, 3).unwrap();
        assert_eq!(records, parallel);

        // kind dispatch is checked
        assert!(run_range_sweep(&cfg, &mut env, 1).is_err());
    }

    #[test]
    fn finetune_sweep_covers_budgets_and_clips() {
        let mut cfg = ExperimentConfig::mnist_finetune(vec![5]);
        cfg.mu_grid = vec![30.0];
        cfg.label_budgets = vec![10, 20, 500];
        cfg.subsample_count = 2;
        cfg.adapt.epochs = 1;
        cfg.adapt.batch_size = 16;
        let mut env = tiny_env(60, 60);

        // adapt pool is 42, so 500 is clipped away
        let resolved = cfg.resolve(env.target_base.len()).unwrap();
        assert_eq!(resolved.label_budgets, vec![10, 20]);

        let records = run_finetune_comparison(&cfg, &mut env, 1).unwrap();
        assert_eq!(records.len(), resolved.expected_record_count().unwrap());

        let by = |m: &str| records.iter().filter(|r| r.method == m).count();
        assert_eq!(by("source"), 2);
        assert_eq!(by("adapted"), 2);
        assert_eq!(by("oracle"), 2);
        assert_eq!(by("ft-last"), 4);
        assert_eq!(by("ft-full"), 4);
        assert!(records
            .iter()
            .all(|r| r.method.starts_with("ft") == (r.n_labels > 0)));
        let budgets: std::collections::BTreeSet<usize> = records
            .iter()
            .filter(|r| r.n_labels > 0)
            .map(|r| r.n_labels)
            .collect();
        assert_eq!(budgets.into_iter().collect::<Vec<_>>(), vec![10, 20]);
    }

    #[test]
    fn multiaxis_sweep_shares_the_corner() {
        let mut cfg = ExperimentConfig::cifar_multiaxis(9);
        cfg.dataset = "mnist".into();
        cfg.experiment_id = "toy-multiaxis".into();
        cfg.mu_grid = vec![1.0, 1.25];
        cfg.mu_fixed = 1.0;
        cfg.sigma_fixed = 0.01;
        cfg.methods = vec![Method::Source];
        cfg.subsample_count = 2;
        let mut env = tiny_env(40, 40);

        let records = run_multiaxis_sweep(&cfg, &mut env, 1).unwrap();
        // three grid points after the corner merge, one method, two subsamples
        assert_eq!(records.len(), 3 * 2);
        assert!(records
            .iter()
            .all(|r| r.axes == "brightness+contrast" && r.mu_2.is_some()));
        let corner: Vec<_> = records
            .iter()
            .filter(|r| r.mu_1 == 1.0 && r.mu_2 == Some(1.0))
            .collect();
        assert_eq!(corner.len(), 2);

        // and the CSV sink accepts the batch (uniqueness holds)
        let dir = tempdir();
        let path = dir.join("ma.csv");
        write_records_csv(&path, &records).unwrap();
        assert_eq!(read_records_csv(&path).unwrap().len(), records.len());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
