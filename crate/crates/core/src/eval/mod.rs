//! Classification metrics and calibration-free evaluation of a checkpoint.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{auc_pr, auroc, balanced_accuracy, cohens_kappa};

use crate::align::{AlignedLayout, TemplateInput};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::forward_batch;
use crate::train::{finetune, Checkpoint, TrainConfig, TrainOutcome};

/// Metric values on one partition. Entries are `None` when undefined there,
/// e.g. AUROC on a fold holding a single class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub balanced_accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub cohens_kappa: Option<f64>,
}

impl Metrics {
    /// Balanced accuracy for MI, AUROC for ERP.
    pub fn primary(&self, task: Task) -> Option<f64> {
        match task {
            Task::Mi => self.balanced_accuracy,
            Task::Erp => self.auroc,
        }
    }

    fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("balanced_accuracy", self.balanced_accuracy),
            ("auroc", self.auroc),
            ("auc_pr", self.auc_pr),
            ("cohens_kappa", self.cohens_kappa),
        ]
    }
}

/// Metrics from predicted class probabilities.
///
/// Binary metrics score the probability of `positive`.
pub fn compute_metrics(probs: &[Vec<f64>], labels: &[usize], n_classes: usize, positive: usize) -> Metrics {
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let scores: Vec<f64> = probs.iter().map(|p| p[positive]).collect();
    let is_pos: Vec<bool> = labels.iter().map(|&y| y == positive).collect();
    Metrics {
        balanced_accuracy: balanced_accuracy(&preds, labels, n_classes).ok(),
        auroc: auroc(&scores, &is_pos).ok(),
        auc_pr: auc_pr(&scores, &is_pos).ok(),
        cohens_kappa: cohens_kappa(&preds, labels, n_classes).ok(),
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Index of the class scored by binary metrics: "target" if present, else class 1.
pub fn positive_class(class_names: &[String]) -> usize {
    class_names
        .iter()
        .position(|n| n.eq_ignore_ascii_case("target"))
        .unwrap_or(1.min(class_names.len().saturating_sub(1)))
}

/// Class probabilities for every trial.
pub fn predict(ckpt: &Checkpoint, inputs: &[TemplateInput]) -> Result<Vec<Vec<f64>>> {
    ckpt.check_inputs(inputs)?;
    let xs: Vec<&[f32]> = inputs.iter().map(|t| t.data.as_slice()).collect();
    Ok(forward_batch(&xs, &ckpt.params, &ckpt.model)?
        .iter()
        .map(|l| softmax(l))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Subject-level folds; 1 evaluates the whole set at once.
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { folds: 1, repeats: 1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub subjects: Vec<String>,
    pub n_trials: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub task: Task,
    pub n_trials: usize,
    pub options: EvalOptions,
    /// Metrics on all trials pooled.
    pub overall: Metrics,
    pub folds: Vec<FoldResult>,
    /// Mean and population standard deviation over every fold of every repeat.
    pub summary: BTreeMap<String, MetricSummary>,
}

impl EvalReport {
    pub fn primary(&self) -> Option<f64> {
        self.overall.primary(self.task)
    }

    /// Columns reported for the task: MI shows balanced accuracy and AUC-PR,
    /// ERP shows AUROC, AUC-PR and kappa.
    pub fn table_columns(task: Task) -> &'static [&'static str] {
        match task {
            Task::Mi => &["balanced_accuracy", "auc_pr"],
            Task::Erp => &["auroc", "auc_pr", "cohens_kappa"],
        }
    }

    pub fn to_table(&self) -> String {
        let cols = Self::table_columns(self.task);
        let mut s = format!("dataset {} ({} trials, task {})\n", self.dataset, self.n_trials, self.task);
        let _ = write!(s, "{:<12}", "partition");
        for c in cols {
            let _ = write!(s, " {c:>18}");
        }
        s.push('\n');
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut row = |label: String, m: &Metrics| {
            let _ = write!(s, "{label:<12}");
            let named = m.named();
            for c in cols {
                let v = named.iter().find(|(n, _)| n == c).and_then(|(_, v)| *v);
                let _ = write!(s, " {:>18}", fmt(v));
            }
            s.push('\n');
        };
        row("all".into(), &self.overall);
        if self.options.folds > 1 {
            for f in &self.folds {
                row(format!("r{} f{}", f.repeat, f.fold), &f.metrics);
            }
        }
        let _ = write!(s, "{:<12}", "mean+-std");
        for c in cols {
            let cell = self
                .summary
                .get(*c)
                .map_or_else(|| "n/a".to_string(), |m| format!("{:.4}+-{:.4}", m.mean, m.std));
            let _ = write!(s, " {cell:>18}");
        }
        s.push('\n');
        s
    }
}

/// Subjects sorted, shuffled by `seed`, dealt round-robin into `folds` groups.
pub fn assign_folds(subjects: &[String], folds: usize, seed: u64) -> Vec<Vec<String>> {
    let mut sorted = subjects.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, s) in sorted.into_iter().enumerate() {
        out[i % folds].push(s);
    }
    out.iter_mut().for_each(|f| f.sort());
    out
}

/// Direct inference on `inputs` followed by pooled and per-fold metrics.
pub fn evaluate(
    ckpt: &Checkpoint,
    layout: &AlignedLayout,
    inputs: &[TemplateInput],
    dataset: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if *layout != ckpt.layout {
        return Err(Error::TemplateMismatch(format!(
            "dataset {dataset} is aligned for task {} with {} rows, checkpoint expects task {} with {} rows (or different stages)",
            layout.task(),
            layout.n_channels(),
            ckpt.layout.task(),
            ckpt.layout.n_channels()
        )));
    }
    if opts.folds == 0 || opts.repeats == 0 {
        return Err(Error::config("eval.folds", "folds and repeats must be at least 1"));
    }
    if inputs.is_empty() {
        return Err(Error::data("trials", "no trials to evaluate"));
    }
    let probs = predict(ckpt, inputs)?;
    let labels: Vec<usize> = inputs.iter().map(|t| t.label).collect();
    let n_classes = ckpt.class_names.len();
    let positive = positive_class(&ckpt.class_names);
    let overall = compute_metrics(&probs, &labels, n_classes, positive);

    let subjects: Vec<String> = inputs.iter().map(|t| t.domain_id.subject().to_string()).collect();
    if opts.folds > 1 && {
        let mut u = subjects.clone();
        u.sort();
        u.dedup();
        u.len() < opts.folds
    } {
        return Err(Error::config("eval.folds", format!("{} folds requested but fewer subjects available", opts.folds)));
    }
    let mut folds = Vec::new();
    for repeat in 0..opts.repeats {
        let groups = if opts.folds == 1 {
            let mut all = subjects.clone();
            all.sort();
            all.dedup();
            vec![all]
        } else {
            assign_folds(&subjects, opts.folds, opts.seed.wrapping_add(repeat as u64))
        };
        for (fold, group) in groups.into_iter().enumerate() {
            let idx: Vec<usize> = (0..inputs.len()).filter(|&i| group.binary_search(&subjects[i]).is_ok()).collect();
            let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            folds.push(FoldResult {
                repeat,
                fold,
                subjects: group,
                n_trials: idx.len(),
                metrics: compute_metrics(&p, &y, n_classes, positive),
            });
        }
    }
    let mut summary = BTreeMap::new();
    for (k, name) in ["balanced_accuracy", "auroc", "auc_pr", "cohens_kappa"].iter().enumerate() {
        let vals: Vec<f64> = folds.iter().filter_map(|f| f.metrics.named()[k].1).collect();
        if !vals.is_empty() {
            summary.insert(name.to_string(), mean_std(&vals));
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        task: layout.task(),
        n_trials: inputs.len(),
        options: *opts,
        overall,
        folds,
        summary,
    })
}

pub fn mean_std(vals: &[f64]) -> MetricSummary {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MetricSummary { mean, std: var.sqrt(), n: vals.len() }
}

/// Primary metric of one subject's held-out trials before and after tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDelta {
    pub subject: String,
    pub n_eval: usize,
    pub before: Option<f64>,
    pub after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub dataset: String,
    pub task: Task,
    pub fraction: f64,
    pub subjects: Vec<SubjectDelta>,
    /// Means over subjects where the metric is defined both before and after.
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
}

impl FinetuneReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "dataset {} fine-tuned on {:.0}% of each subject (task {})\n{:<16} {:>8} {:>10} {:>10}\n",
            self.dataset,
            self.fraction * 100.0,
            self.task,
            "subject",
            "trials",
            "before",
            "after"
        );
        for d in &self.subjects {
            let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>10}", d.subject, d.n_eval, fmt(d.before), fmt(d.after));
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>10}", "mean", "", fmt(self.mean_before), fmt(self.mean_after));
        s
    }
}

/// One tuned model for each subject.
#[derive(Clone, Debug)]
pub struct SubjectModel {
    pub subject: String,
    pub outcome: TrainOutcome,
}

/// Subject-specific fine-tuning: for each subject, tunes a copy of `ckpt` on
/// the first `fraction` of its trials and scores the rest with the original
/// and the tuned model.
pub fn finetune_and_evaluate(
    ckpt: &Checkpoint,
    layout: &AlignedLayout,
    inputs: &[TemplateInput],
    dataset: &str,
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<(Vec<SubjectModel>, FinetuneReport)> {
    if *layout != ckpt.layout {
        return Err(Error::TemplateMismatch(format!("dataset {dataset} is not aligned for this checkpoint")));
    }
    if inputs.is_empty() {
        return Err(Error::arg(format!("dataset {dataset} has no trials")));
    }
    let task = layout.task();
    let n_classes = ckpt.class_names.len();
    let positive = positive_class(&ckpt.class_names);
    let mut by_subject: BTreeMap<&str, Vec<TemplateInput>> = BTreeMap::new();
    for t in inputs {
        by_subject.entry(t.domain_id.subject()).or_default().push(t.clone());
    }
    let mut models = Vec::new();
    let mut subjects = Vec::new();
    for (subject, trials) in by_subject {
        let out = finetune(ckpt, &trials, fraction, cfg)?;
        if let Some(step) = out.tuned.diverged_at {
            return Err(Error::numeric(format!("fine-tuning subject {subject} diverged at step {step}")));
        }
        let y: Vec<usize> = out.eval.iter().map(|t| t.label).collect();
        let score = |c: &Checkpoint| -> Result<Option<f64>> {
            Ok(compute_metrics(&predict(c, &out.eval)?, &y, n_classes, positive).primary(task))
        };
        subjects.push(SubjectDelta {
            subject: subject.to_string(),
            n_eval: out.eval.len(),
            before: score(ckpt)?,
            after: score(&out.tuned.checkpoint)?,
        });
        models.push(SubjectModel { subject: subject.to_string(), outcome: out.tuned });
    }
    let pairs: Vec<(f64, f64)> = subjects.iter().filter_map(|d| Some((d.before?, d.after?))).collect();
    let mean = |f: fn(&(f64, f64)) -> f64| (!pairs.is_empty()).then(|| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64);
    let report = FinetuneReport {
        dataset: dataset.to_string(),
        task,
        fraction,
        mean_before: mean(|p| p.0),
        mean_after: mean(|p| p.1),
        subjects,
    };
    Ok((models, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_scores_are_perfect() {
        let labels = [0, 1, 1, 0, 1];
        let probs: Vec<Vec<f64>> = labels.iter().map(|&y| if y == 1 { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect();
        let m = compute_metrics(&probs, &labels, 2, 1);
        assert_eq!(m.auroc, Some(1.0));
        assert_eq!(m.auc_pr, Some(1.0));
        assert_eq!(m.balanced_accuracy, Some(1.0));
    }

    #[test]
    fn argmax_ignores_constant_shift() {
        let l = [0.3f32, -1.2, 0.9];
        let shifted: Vec<f32> = l.iter().map(|v| v + 50.0).collect();
        assert_eq!(argmax(&softmax(&l)), argmax(&softmax(&shifted)));
    }

    #[test]
    fn folds_partition_subjects() {
        let subjects: Vec<String> = (0..10).map(|i| format!("ds:s{i}")).collect();
        let f = assign_folds(&subjects, 3, 4);
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        let mut all: Vec<String> = f.concat();
        all.sort();
        let mut want = subjects.clone();
        want.sort();
        assert_eq!(all, want);
        assert_eq!(f, assign_folds(&subjects, 3, 4));
        assert_ne!(f, assign_folds(&subjects, 3, 5));
    }

    #[test]
    fn positive_class_prefers_target() {
        assert_eq!(positive_class(&["target".into(), "nontarget".into()]), 0);
        assert_eq!(positive_class(&["left".into(), "right".into()]), 1);
    }

    #[test]
    fn summary_is_population_std() {
        let s = mean_std(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.n), (2.0, 1.0, 2));
    }
}
