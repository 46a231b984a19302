//! Trains one model per pipeline variant on identical data and seeds.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::align::{align_trials, AlignStages, AlignedLayout};
use crate::data::{load_all_trials, DatasetManifest, EegTrial, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::model::{ModelConfig, PatchMode};
use crate::train::{train, Checkpoint, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Full,
    NoSelect,
    NoEa,
    NoMap,
    NoFpe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoSelect, Variant::NoEa, Variant::NoMap, Variant::NoFpe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::NoSelect => "NO_SELECT",
            Variant::NoEa => "NO_EA",
            Variant::NoMap => "NO_MAP",
            Variant::NoFpe => "NO_FPE",
        }
    }

    pub fn stages(self) -> AlignStages {
        AlignStages {
            select: self != Variant::NoSelect,
            euclidean: self != Variant::NoEa,
            map: self != Variant::NoMap,
        }
    }

    pub fn patch_mode(self) -> PatchMode {
        if self == Variant::NoFpe {
            PatchMode::Channel
        } else {
            PatchMode::Frame
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown ablation variant {s:?}")))
    }
}

/// Parses `all` or a comma-separated variant list; FULL is always included.
pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let mut v: Vec<Variant> = if s.trim().eq_ignore_ascii_case("all") {
        Variant::ALL.to_vec()
    } else {
        s.split(',').map(|p| p.trim().parse()).collect::<Result<_>>()?
    };
    v.push(Variant::Full);
    v.sort();
    v.dedup();
    Ok(v)
}

/// Preprocessed trials of one dataset, before alignment.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub name: String,
    pub task: Task,
    pub class_names: Vec<String>,
    pub trials: Vec<EegTrial>,
}

impl RawDataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.layout.is_some() {
            return Err(Error::data("layout", format!("dataset {} is already aligned", manifest.name)));
        }
        Ok(RawDataset {
            name: manifest.name.clone(),
            task: manifest.task,
            class_names: manifest.class_names.clone(),
            trials: load_all_trials(manifest)?,
        })
    }

    fn digest(&self, h: &mut DefaultHasher) {
        self.name.hash(h);
        for t in &self.trials {
            t.label.hash(h);
            t.domain_id.hash(h);
            t.channels.hash(h);
            for v in &t.data {
                v.to_bits().hash(h);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    /// Model geometry for FULL; other variants adjust channels and patch mode.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub layout: AlignedLayout,
    pub n_tokens: usize,
    pub final_loss: Option<f64>,
    pub reports: Vec<EvalReport>,
    /// Trained model; not part of the serialized table.
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: Task,
    pub seed: u64,
    /// Digest of every raw input trial, equal for all rows by construction.
    pub input_digest: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Mean primary metric over the evaluation datasets.
    pub fn primary(&self, v: Variant) -> Option<f64> {
        let r = self.row(v)?;
        let vals: Vec<f64> = r.reports.iter().filter_map(EvalReport::primary).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,dataset,balanced_accuracy,auroc,auc_pr,cohens_kappa,final_loss\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.rows {
            for rep in &r.reports {
                let m = &rep.overall;
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.variant,
                    rep.dataset,
                    f(m.balanced_accuracy),
                    f(m.auroc),
                    f(m.auc_pr),
                    f(m.cohens_kappa),
                    f(r.final_loss)
                ));
            }
        }
        s
    }
}

/// Layout for a variant; without selection the template is the union of the
/// training channels.
pub fn variant_layout(v: Variant, task: Task, train_sets: &[RawDataset]) -> Result<AlignedLayout> {
    let layout = AlignedLayout::new(task, v.stages());
    if v.stages().select {
        Ok(layout)
    } else {
        layout.with_channel_union(train_sets.iter().flat_map(|d| d.trials.iter().map(|t| t.channels.as_slice())))
    }
}

fn check_sets(sets: &[RawDataset], task: Task, class_names: &[String]) -> Result<()> {
    for d in sets {
        if d.task != task {
            return Err(Error::TemplateMismatch(format!("dataset {} is {}, plan is {}", d.name, d.task, task)));
        }
        if d.class_names != class_names {
            return Err(Error::data(format!("{}.class_names", d.name), "class names differ between datasets"));
        }
    }
    Ok(())
}

/// Trains and evaluates every variant of `plan` in turn.
pub fn run_ablation(plan: &AblationPlan, train_sets: &[RawDataset], eval_sets: &[RawDataset]) -> Result<AblationTable> {
    let first = train_sets.first().ok_or_else(|| Error::arg("no training datasets"))?;
    if eval_sets.is_empty() {
        return Err(Error::arg("no evaluation datasets"));
    }
    let task = first.task;
    check_sets(train_sets, task, &first.class_names)?;
    check_sets(eval_sets, task, &first.class_names)?;
    let mut variants = plan.variants.clone();
    variants.push(Variant::Full);
    variants.sort();
    variants.dedup();

    let mut h = DefaultHasher::new();
    plan.seed.hash(&mut h);
    for d in train_sets.iter().chain(eval_sets) {
        d.digest(&mut h);
    }
    let input_digest = format!("{:016x}", h.finish());

    let mut rows = Vec::new();
    for v in variants {
        let layout = variant_layout(v, task, train_sets)?;
        let mut model = plan.model.clone();
        model.n_channels = layout.n_channels();
        model.template_len = layout.template_len();
        model.fpe.patch_mode = v.patch_mode();
        model.validate()?;
        let n_tokens = model.n_tokens();
        info!("variant {v}: {} template rows, {n_tokens} tokens", layout.n_channels());

        let pooled: Vec<EegTrial> = train_sets.iter().flat_map(|d| d.trials.iter().cloned()).collect();
        let (inputs, _) = align_trials(pooled, &layout)?;
        let start = Checkpoint::init(model, layout.clone(), first.class_names.clone(), plan.seed)?;
        let cfg = TrainConfig { seed: plan.seed, ..plan.train.clone() };
        let outcome = train(&inputs, start, &cfg)?;
        if let Some(step) = outcome.diverged_at {
            return Err(Error::numeric(format!("variant {v} diverged at step {step}")));
        }
        let mut reports = Vec::new();
        for d in eval_sets {
            let (x, _) = align_trials(d.trials.clone(), &layout)?;
            reports.push(evaluate(&outcome.checkpoint, &layout, &x, &d.name, &plan.eval)?);
        }
        rows.push(AblationRow {
            variant: v,
            layout,
            n_tokens,
            final_loss: outcome.history.last().map(|r| r.loss),
            reports,
            checkpoint: Some(outcome.checkpoint),
        });
    }
    Ok(AblationTable { task, seed: plan.seed, input_digest, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{channel_list, DomainId};

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert_eq!(parse_variants("all").unwrap().len(), 5);
        assert_eq!(parse_variants("no_ea").unwrap(), vec![Variant::Full, Variant::NoEa]);
        assert!(parse_variants("NO_SUCH").is_err());
    }

    #[test]
    fn variants_disable_one_stage_each() {
        assert_eq!(Variant::Full.stages(), AlignStages::default());
        for v in [Variant::NoSelect, Variant::NoEa, Variant::NoMap] {
            let s = v.stages();
            assert_eq!([s.select, s.euclidean, s.map].iter().filter(|&&b| !b).count(), 1);
        }
        assert_eq!(Variant::NoFpe.stages(), AlignStages::default());
        assert_eq!(Variant::NoFpe.patch_mode(), PatchMode::Channel);
    }

    #[test]
    fn no_select_uses_channel_union() {
        let t = |chs: &[&str]| {
            EegTrial::new(vec![0.0; chs.len() * 4], channel_list(chs).unwrap(), 256.0, 0, DomainId::from("a:b:c")).unwrap()
        };
        let d = RawDataset {
            name: "x".into(),
            task: Task::Mi,
            class_names: vec!["a".into(), "b".into()],
            trials: vec![t(&["C3", "O1"]), t(&["O1", "FP1", "C4"])],
        };
        let l = variant_layout(Variant::NoSelect, Task::Mi, &[d.clone()]).unwrap();
        let names: Vec<&str> = l.template.target_channels.iter().map(|c| c.as_str()).collect();
        assert_eq!(names, ["C3", "O1", "FP1", "C4"]);
        assert_eq!(variant_layout(Variant::NoMap, Task::Mi, &[d]).unwrap().n_channels(), 17);
    }

    #[test]
    fn channel_patch_token_count() {
        let mut c = ModelConfig::preset(Task::Mi, 17, 1280);
        c.fpe.patch_mode = Variant::NoFpe.patch_mode();
        assert_eq!(c.n_tokens(), 17 * c.n_averaged() + 1);
        assert_eq!(c.patch_len(), c.fpe.frame_window);
    }
}
