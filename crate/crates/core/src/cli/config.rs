use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Task, TaskTemplateSpec};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::train::TrainConfig;

/// Every setting of a run, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Worker threads; `None` uses one per core.
    pub threads: Option<usize>,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub fraction: f64,
}

impl RunConfig {
    /// Task defaults, with the builtin template geometry.
    pub fn preset(task: Task) -> Self {
        let t = TaskTemplateSpec::builtin(task);
        RunConfig {
            task,
            threads: None,
            preprocess: PreprocessConfig::for_task(task),
            model: ModelConfig::preset(task, t.n_channels(), t.template_len),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            finetune: FinetuneConfig { fraction: 0.3 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.folds == 0 || self.eval.repeats == 0 {
            return Err(Error::config("eval.folds", "folds and repeats must be at least 1"));
        }
        if !(self.finetune.fraction > 0.0 && self.finetune.fraction < 1.0) {
            return Err(Error::config("finetune.fraction", "must lie in (0, 1)"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Overlays `patch` onto `base`. Every key of `patch` must already exist in
/// `base`; the error names the first unknown key by its dotted path.
pub fn merge_json(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => merge_objects(b, p, path),
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn merge_objects(base: &mut Map<String, Value>, patch: &Map<String, Value>, path: &str) -> Result<()> {
    for (k, v) in patch {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match base.get_mut(k) {
            None => return Err(Error::config(key, "unknown key")),
            Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v, &key)?,
            Some(slot) => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Setting overrides given on the command line, as dotted keys.
pub type Overrides = Vec<(&'static str, Value)>;

/// Builds the configuration: task preset, then the JSON file, then `overrides`.
///
/// A `task` key in the file must agree with `task`.
pub fn resolve_config(task: Task, file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::preset(task)).expect("preset serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        if !patch.is_object() {
            return Err(Error::config("<root>", format!("{} must hold a JSON object", path.display())));
        }
        if let Some(t) = patch.get("task") {
            if *t != Value::String(task.name().into()) {
                return Err(Error::config("task", format!("file sets task {t}, command line sets {}", task.name())));
            }
        }
        merge_json(&mut value, &patch, "")?;
    }
    for (key, v) in overrides {
        let mut patch = v.clone();
        for part in key.rsplit('.') {
            let mut m = Map::new();
            m.insert(part.to_string(), patch);
            patch = Value::Object(m);
        }
        merge_json(&mut value, &patch, "")?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config("<root>", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn mi_preset_values() {
        let c = resolve_config(Task::Mi, None, &vec![]).unwrap();
        let (f, t) = (&c.model.fpe, &c.model.transformer);
        assert_eq!((f.embed_dim, f.frame_window, f.avg_window, f.avg_shift), (20, 25, 25, 5));
        assert_eq!((t.depth, t.heads, t.dim_head, t.dim_mlp), (6, 8, 64, 40));
    }

    #[test]
    fn erp_override_depth() {
        let c = resolve_config(Task::Erp, None, &vec![("model.transformer.depth", json!(2))]).unwrap();
        let (f, t) = (&c.model.fpe, &c.model.transformer);
        assert_eq!((f.embed_dim, f.frame_window, f.avg_window, f.avg_shift), (20, 25, 5, 2));
        assert_eq!((t.depth, t.heads, t.dim_head, t.dim_mlp), (2, 8, 10, 20));
    }

    #[test]
    fn file_then_cli_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"epochs": 7, "batch_size": 16}, "model": {"transformer": {"depth": 3}}}"#).unwrap();
        let c = resolve_config(Task::Mi, Some(&p), &vec![("train.epochs", json!(9))]).unwrap();
        assert_eq!((c.train.epochs, c.train.batch_size, c.model.transformer.depth), (9, 16, 3));
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"fpe": {"frame_windw": 3}}}"#).unwrap();
        let err = resolve_config(Task::Mi, Some(&p), &vec![]).unwrap_err();
        assert!(err.to_string().contains("model.fpe.frame_windw"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invariant_violation_reports_key() {
        let err = resolve_config(Task::Mi, None, &vec![("train.lr_init", json!(1.0))]).unwrap_err();
        assert!(err.to_string().contains("train.lr_init"), "{err}");
        let err = resolve_config(Task::Mi, None, &vec![("model.fpe.avg_window", json!(99))]).unwrap_err();
        assert!(err.to_string().contains("model.fpe.avg_window"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let c = resolve_config(Task::Erp, None, &vec![("train.seed", json!(42))]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        c.echo(&p).unwrap();
        assert_eq!(resolve_config(Task::Erp, Some(&p), &vec![]).unwrap(), c);
    }
}
