//! Experiment runner: sweeps (attack norm x filter) grids over a cohort of
//! correctly classified images and reports per-image records plus
//! aggregate summaries, both as CSV.
//!
//! For every sampled image the runner emits one record per filter for the
//! clean input, then crafts one adversarial image per requested norm
//! (targeting a seeded random wrong label, or a fixed label when
//! configured) and emits one record per filter for each. Records carry the
//! probability of the true label (`p_true`) and of the attack target
//! (`p_adv`) after filtering, so rows aggregate into the usual
//! "original vs adversarial under each filter" tables.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attack::{craft, AttackConfig};
use crate::classifier::{load_model, Classifier};
use crate::dataset::{generate_shape_dataset, load_idx_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterKind, FilterSpec};
use crate::image::Image;
use crate::norms::{distance, NormKind};
use crate::rng::SplitMix64;

/// Canvas side used for `synthetic:` dataset sources.
pub const SYNTHETIC_SIDE: usize = 32;

/// One (input, attack, filter) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub input_id: String,
    /// `None` for rows measuring the clean input.
    pub attack_norm: Option<NormKind>,
    /// Attack budget; 0 for clean rows.
    pub beta: f64,
    pub filter_kind: FilterKind,
    /// 0 iff `filter_kind` is none.
    pub kernel_size: usize,
    pub true_label: usize,
    pub target_label: usize,
    pub argmax_label: usize,
    /// Probability assigned to the true label after filtering.
    pub p_true: f64,
    /// Probability assigned to the attack target after filtering.
    pub p_adv: f64,
}

impl EvalRecord {
    fn sort_key(&self) -> (&str, Option<NormKind>, FilterKind, usize) {
        (&self.input_id, self.attack_norm, self.filter_kind, self.kernel_size)
    }

    fn attack_norm_label(&self) -> &'static str {
        self.attack_norm.map_or("none", NormKind::label)
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.input_id,
            self.attack_norm_label(),
            self.beta,
            self.filter_kind.label(),
            self.kernel_size,
            self.true_label,
            self.target_label,
            self.argmax_label,
            self.p_true,
            self.p_adv
        )
    }
}

/// Filters `x` per `spec`, runs the classifier, and measures both labels.
///
/// The returned record has empty `input_id`, no attack norm, and beta 0;
/// `run_experiment` fills those in for its rows.
pub fn evaluate_one(
    f: &Classifier,
    x: &Image,
    y_true: usize,
    y_adv: usize,
    spec: &FilterSpec,
) -> Result<EvalRecord> {
    if y_true >= f.num_classes() || y_adv >= f.num_classes() {
        return Err(Error::Parameter(format!(
            "labels ({y_true}, {y_adv}) out of range for {} classes",
            f.num_classes()
        )));
    }
    let filtered = apply_filter(x, spec);
    let pred = f.forward(&filtered)?;
    Ok(EvalRecord {
        input_id: String::new(),
        attack_norm: None,
        beta: 0.0,
        filter_kind: spec.kind(),
        kernel_size: spec.kernel_size(),
        true_label: y_true,
        target_label: y_adv,
        argmax_label: pred.argmax_label,
        p_true: pred.probabilities[y_true],
        p_adv: pred.probabilities[y_adv],
    })
}

/// Where the experiment's images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic { seed: u64, num_per_class: usize },
}

impl DataSource {
    /// Parses `IMAGES.idx,LABELS.idx` or `synthetic:SEED:COUNT`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let (seed, count) = match parts.as_slice() {
                [seed, count] => (seed.parse::<u64>().ok(), count.parse::<usize>().ok()),
                _ => (None, None),
            };
            return match (seed, count) {
                (Some(seed), Some(count)) if count > 0 => {
                    Ok(DataSource::Synthetic { seed, num_per_class: count })
                }
                _ => Err(Error::Parameter(format!(
                    "bad synthetic dataset spec {s:?} (expected synthetic:SEED:COUNT)"
                ))),
            };
        }
        match s.split(',').collect::<Vec<_>>().as_slice() {
            [images, labels] if !images.is_empty() && !labels.is_empty() => Ok(DataSource::Idx {
                images: PathBuf::from(images),
                labels: PathBuf::from(labels),
            }),
            _ => Err(Error::Parameter(format!(
                "bad dataset spec {s:?} (expected IMAGES.idx,LABELS.idx or synthetic:SEED:COUNT)"
            ))),
        }
    }

    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx_dataset(images, labels),
            DataSource::Synthetic { seed, num_per_class } => {
                generate_shape_dataset(*num_per_class, SYNTHETIC_SIDE, *seed)
            }
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model_path: PathBuf,
    pub data: DataSource,
    /// Norms to attack with; may be empty for a clean-only run.
    pub norms: Vec<NormKind>,
    pub beta: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Filters to measure under; must be nonempty (include `Identity` to
    /// get unfiltered rows).
    pub filters: Vec<FilterSpec>,
    /// Number of correctly classified images to sample.
    pub samples: usize,
    pub seed: u64,
    /// Fix all attacks on one target label instead of drawing random wrong
    /// labels. Images whose true label equals the target are skipped.
    pub fixed_target: Option<usize>,
}

/// Runs the full grid. Records come back sorted by
/// (input_id, attack_norm, filter_kind, kernel_size); the run is
/// deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>> {
    if cfg.samples == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    if cfg.filters.is_empty() {
        return Err(Error::Parameter(
            "experiment needs at least one filter (use none for unfiltered rows)".into(),
        ));
    }
    let model = load_model(&cfg.model_path)?;
    let data = cfg.data.load()?;
    if let Some(target) = cfg.fixed_target {
        if target >= model.num_classes() {
            return Err(Error::Parameter(format!(
                "fixed target {target} out of range for {} classes",
                model.num_classes()
            )));
        }
    }

    // Sample the cohort in seeded shuffle order, keeping only images the
    // model classifies correctly; targets are drawn from the same stream.
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);

    let mut records = Vec::new();
    let mut taken = 0usize;
    for &index in &order {
        if taken == cfg.samples {
            break;
        }
        let (image, label) = &data.items()[index];
        if model.forward(image)?.argmax_label != *label {
            continue;
        }
        let target = match cfg.fixed_target {
            Some(target) => {
                if target == *label {
                    continue; // can't push an image toward its own label
                }
                target
            }
            None => loop {
                let candidate = rng.next_below(model.num_classes());
                if candidate != *label {
                    break candidate;
                }
            },
        };
        taken += 1;
        let input_id = format!("img_{index:05}");

        for spec in &cfg.filters {
            let mut record = evaluate_one(&model, image, *label, target, spec)?;
            record.input_id = input_id.clone();
            records.push(record);
        }
        for &kind in &cfg.norms {
            let attack = AttackConfig {
                norm_kind: kind,
                beta: cfg.beta,
                learning_rate: cfg.learning_rate,
                max_iterations: cfg.max_iterations,
                target_label: target,
            };
            let result = craft(&model, image, &attack)?;
            // Budget invariant, re-checked on ingest.
            let moved = distance(&result.adversarial, image, kind)?;
            if moved > cfg.beta + 1e-6 {
                return Err(Error::Numeric(format!(
                    "adversarial image for {input_id} exceeds its {kind} budget: {moved} > {}",
                    cfg.beta
                )));
            }
            for spec in &cfg.filters {
                let mut record = evaluate_one(&model, &result.adversarial, *label, target, spec)?;
                record.input_id = input_id.clone();
                record.attack_norm = Some(kind);
                record.beta = cfg.beta;
                records.push(record);
            }
        }
    }
    if taken == 0 {
        return Err(Error::Parameter(
            "empty cohort: the model classified no sampled image correctly".into(),
        ));
    }
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(records)
}

/// Aggregate over one (attack_norm, filter_kind, kernel_size) grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub attack_norm: Option<NormKind>,
    pub filter_kind: FilterKind,
    pub kernel_size: usize,
    pub record_count: usize,
    pub mean_p_true: f64,
    pub mean_p_adv: f64,
    /// Fraction of records still classified as the attack target.
    pub attack_success_rate: f64,
    /// Fraction of records classified as the true label.
    pub recovery_rate: f64,
}

/// Collapses records into per-cell means and rates, sorted by cell key.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<SummaryCell>> {
    if records.is_empty() {
        return Err(Error::Parameter("cannot summarize an empty record list".into()));
    }
    use std::collections::BTreeMap;
    struct Acc {
        count: usize,
        p_true: f64,
        p_adv: f64,
        hits: usize,
        recoveries: usize,
    }
    let mut cells: BTreeMap<(Option<NormKind>, FilterKind, usize), Acc> = BTreeMap::new();
    for r in records {
        let acc = cells
            .entry((r.attack_norm, r.filter_kind, r.kernel_size))
            .or_insert(Acc { count: 0, p_true: 0.0, p_adv: 0.0, hits: 0, recoveries: 0 });
        acc.count += 1;
        acc.p_true += r.p_true;
        acc.p_adv += r.p_adv;
        acc.hits += usize::from(r.argmax_label == r.target_label);
        acc.recoveries += usize::from(r.argmax_label == r.true_label);
    }
    Ok(cells
        .into_iter()
        .map(|((attack_norm, filter_kind, kernel_size), acc)| {
            let n = acc.count as f64;
            SummaryCell {
                attack_norm,
                filter_kind,
                kernel_size,
                record_count: acc.count,
                mean_p_true: acc.p_true / n,
                mean_p_adv: acc.p_adv / n,
                attack_success_rate: acc.hits as f64 / n,
                recovery_rate: acc.recoveries as f64 / n,
            }
        })
        .collect())
}

pub const RECORDS_CSV_HEADER: &str =
    "input_id,attack_norm,beta,filter_kind,kernel_size,true_label,target_label,argmax_label,p_true,p_adv";

pub const SUMMARY_CSV_HEADER: &str =
    "attack_norm,filter_kind,kernel_size,records,mean_p_true,mean_p_adv,attack_success_rate,recovery_rate";

/// Renders records as CSV, sorted by (input_id, attack_norm, filter_kind,
/// kernel_size) regardless of input order. Probabilities carry 6 decimals.
pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = String::from(RECORDS_CSV_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Renders one CSV row per summary cell.
pub fn summary_csv(cells: &[SummaryCell]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            c.attack_norm.map_or("none", NormKind::label),
            c.filter_kind.label(),
            c.kernel_size,
            c.record_count,
            c.mean_p_true,
            c.mean_p_adv,
            c.attack_success_rate,
            c.recovery_rate
        ));
    }
    out
}

/// Writes the records CSV and the summary CSV.
pub fn write_report(
    records: &[EvalRecord],
    summary: &[SummaryCell],
    records_path: &Path,
    summary_path: &Path,
) -> Result<()> {
    fs::write(records_path, records_csv(records))?;
    fs::write(summary_path, summary_csv(summary))?;
    Ok(())
}
