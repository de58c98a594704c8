//! Run configuration: one JSON document, with command-line overrides applied
//! on top of the file before it is validated.

use std::path::{Path, PathBuf};

use mergelab_core::merge::MergeMethod;
use mergelab_core::{Activation, MergeConfig, ModelSpec, Optimizer, SeConfig, SuiteParams, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation_sigmas: f32,
    pub overlapping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; input and output widths come from the suite.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Layers swept by acc@k; `None` sweeps every layer.
    pub layers: Option<Vec<usize>>,
    /// Number of off-support probes for the disentanglement residual.
    pub far_field: usize,
    /// Coefficients of the disentanglement check; `None` uses `se.lambda` for every task.
    pub alphas: Option<Vec<f32>>,
    /// Layer written by `export-reps`; `None` selects the penultimate layer.
    pub export_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Global seed. The suite uses it directly, pre-training uses `seed`
    /// for its shuffle stream and fine-tuning uses `seed + 1`.
    pub seed: u64,
    pub suite: SuiteSection,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub merge: MergeConfig,
    pub se: SeConfig,
    pub diagnostics: DiagnosticsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SuiteParams::default();
        Self {
            run_id: "default".into(),
            output_dir: "runs".into(),
            data_dir: "data".into(),
            seed: 1,
            suite: SuiteSection {
                tasks: s.tasks,
                dim: s.dim,
                classes: s.classes,
                n_train: s.n_train,
                n_test: s.n_test,
                separation_sigmas: s.separation_sigmas,
                overlapping: s.overlapping,
            },
            model: ModelSection {
                hidden: vec![64, 64],
                activation: Activation::Relu,
            },
            pretrain: TrainSection {
                epochs: 20,
                batch_size: 32,
                learning_rate: 0.05,
                optimizer: Optimizer::SgdMomentum,
            },
            finetune: TrainSection {
                epochs: 30,
                batch_size: 32,
                learning_rate: 0.02,
                optimizer: Optimizer::SgdMomentum,
            },
            merge: MergeConfig::new(MergeMethod::TaskArithmetic),
            se: SeConfig::default(),
            diagnostics: DiagnosticsSection {
                layers: None,
                far_field: 256,
                alphas: None,
                export_layer: None,
            },
        }
    }
}

impl RunConfig {
    /// The label-conflict variant of the default configuration.
    pub fn conflict() -> Self {
        let mut cfg = Self::default();
        let s = SuiteParams::conflict(cfg.seed);
        cfg.run_id = "conflict".into();
        // same seed as the default suite, so it needs its own data root
        cfg.data_dir = "data/conflict".into();
        cfg.suite.separation_sigmas = s.separation_sigmas;
        cfg.suite.overlapping = s.overlapping;
        cfg
    }

    /// Reads `path` (or starts from the defaults), applies `overrides` as
    /// `(dotted.key, value)` pairs and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("default config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !file.is_object() {
                return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
            }
            merge_json(&mut doc, file);
        }
        for (key, value) in overrides {
            set_path(&mut doc, key, value.clone())?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id {:?} must be a plain directory name", self.run_id));
        }
        let s = &self.suite;
        if s.tasks == 0 || s.dim == 0 || s.classes < 2 || s.classes > 256 {
            return bad("suite needs tasks ≥ 1, dim ≥ 1 and 2 ≤ classes ≤ 256".into());
        }
        if s.n_train == 0 || s.n_test == 0 {
            return bad("suite.n_train and suite.n_test must be ≥ 1".into());
        }
        if !(s.separation_sigmas > 0.0 && s.separation_sigmas.is_finite()) {
            return bad(format!("suite.separation_sigmas {} must be > 0", s.separation_sigmas));
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be ≥ 1".into());
        }
        for (name, t) in [("pretrain", self.pretrain_config()), ("finetune", self.finetune_config())] {
            t.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        self.merge
            .validate(s.tasks)
            .map_err(|e| CliError::Config(format!("merge: {e}")))?;
        if !(self.se.lambda >= 0.0 && self.se.lambda.is_finite()) {
            return bad(format!("se.lambda {} must be ≥ 0", self.se.lambda));
        }
        let depth = self.model.hidden.len() + 1;
        let layer_ok = |l: usize| (1..=depth).contains(&l);
        if let Some(l) = self.se.layer.filter(|l| !layer_ok(*l)) {
            return bad(format!("se.layer {l} is outside 1..={depth}"));
        }
        if let Some(l) = self.diagnostics.export_layer.filter(|l| !layer_ok(*l)) {
            return bad(format!("diagnostics.export_layer {l} is outside 1..={depth}"));
        }
        if let Some(ls) = &self.diagnostics.layers {
            if ls.is_empty() || ls.iter().any(|l| !layer_ok(*l)) {
                return bad(format!("diagnostics.layers must be non-empty and within 1..={depth}"));
            }
        }
        if let Some(a) = &self.diagnostics.alphas {
            if a.len() != s.tasks || a.iter().any(|v| !v.is_finite()) {
                return bad(format!("diagnostics.alphas needs {} finite entries", s.tasks));
            }
        }
        Ok(())
    }

    pub fn suite_params(&self) -> SuiteParams {
        let s = &self.suite;
        SuiteParams {
            tasks: s.tasks,
            dim: s.dim,
            classes: s.classes,
            n_train: s.n_train,
            n_test: s.n_test,
            seed: self.seed,
            separation_sigmas: s.separation_sigmas,
            overlapping: s.overlapping,
        }
    }

    pub fn model_spec(&self) -> CliResult<ModelSpec> {
        let mut widths = vec![self.suite.dim];
        widths.extend(&self.model.hidden);
        widths.push(self.suite.classes);
        ModelSpec::new(widths, self.model.activation).map_err(|e| CliError::Config(e.to_string()))
    }

    fn train_config(t: &TrainSection, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed,
            optimizer: t.optimizer,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        Self::train_config(&self.pretrain, self.seed)
    }

    pub fn finetune_config(&self) -> TrainConfig {
        Self::train_config(&self.finetune, self.seed.wrapping_add(1))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(CliError::Config("empty config key".into()))
}

/// Parses a `key=value` override; the value is JSON when it parses as JSON
/// and a plain string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
