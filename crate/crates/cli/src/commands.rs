//! The subcommands. Each one reads what the commands before it wrote and
//! writes below `runs/<run-id>/`; a missing input names its producer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mergelab_core::checkpoint::{content_hash, Checkpoint, Provenance};
use mergelab_core::diagnostics::{
    acc_at_k, disentanglement_residual, export_representations, representation_bias,
    se_representation_bias, AccAtKReport, BiasReport, DisentanglementReport,
};
use mergelab_core::merge::{self, task_vector, MergeMethod, TaskVector};
use mergelab_core::se::{default_layer, se_evaluate, SeEvaluation};
use mergelab_core::suite::{generate_suite, read_suite, suite_dir, write_suite, Sample, TaskSuite};
use mergelab_core::train::{evaluate, finetune, pretrain};
use mergelab_core::{MergeConfig, ModelSpec, ParamVector, SeMerger};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{f6s, mean, to_json, write_file, BiasSummary, DisentanglementSummary, MethodTable, Summary, F6};

/// Reference scale of the full fine-tuned expert.
const FULL_REFERENCE: f32 = 1.0;

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn pretrained(&self) -> PathBuf {
        self.checkpoint("pretrained")
    }

    pub fn expert(&self, task: usize) -> PathBuf {
        self.checkpoint(&format!("expert_{task}"))
    }

    pub fn merged(&self, method: MergeMethod) -> PathBuf {
        self.checkpoint(&format!("merged_{}", method.name()))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join("meta.json")
    }
}

/// `gen-data`: writes the suite to `<data_dir>/suite/<seed>/`.
pub fn gen_data(cfg: &RunConfig) -> CliResult<PathBuf> {
    let suite = generate_suite(&cfg.suite_params())?;
    Ok(write_suite(&suite, &cfg.data_dir)?)
}

pub fn load_suite(cfg: &RunConfig) -> CliResult<TaskSuite> {
    let dir = suite_dir(&cfg.data_dir, cfg.seed);
    let manifest = dir.join("suite.json");
    if !manifest.exists() {
        return Err(CliError::MissingArtifact { path: manifest, producer: "gen-data" });
    }
    let suite = read_suite(&dir)?;
    if suite.params != cfg.suite_params() {
        return Err(CliError::Data(format!(
            "dataset at {} was generated with different parameters; rerun `mergelab gen-data`",
            dir.display()
        )));
    }
    Ok(suite)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub pretrained_test_accuracy: F6,
    pub expert_test_accuracy: Vec<F6>,
}

/// `train`: pre-trains on the union of tasks, then fine-tunes one expert per task.
pub fn train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let suite = load_suite(cfg)?;
    let spec = cfg.model_spec()?;
    let paths = RunPaths::new(cfg);
    let pcfg = cfg.pretrain_config();
    let (pt, report) = pretrain(&spec, &suite, &pcfg)?;
    Checkpoint::new(spec.clone(), pcfg.seed, pt.clone())?.save(&paths.pretrained())?;
    write_file(&paths.report("pretrain_curve.csv"), report.to_csv().as_bytes())?;

    let fcfg = cfg.finetune_config();
    let mut expert_acc = Vec::with_capacity(suite.num_tasks());
    for task in &suite.tasks {
        let (ft, report) = finetune(&spec, &pt, task, &fcfg)?;
        Checkpoint::new(spec.clone(), fcfg.seed, ft)?.save(&paths.expert(task.task_id))?;
        write_file(
            &paths.report(&format!("finetune_{}_curve.csv", task.task_id)),
            report.to_csv().as_bytes(),
        )?;
        expert_acc.push(report.test_accuracy);
    }
    let summary = TrainSummary {
        pretrained_test_accuracy: F6(report.test_accuracy),
        expert_test_accuracy: f6s(&expert_acc),
    };
    write_file(&paths.report("train.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Pre-trained model, experts and their task vectors, as loaded from a run.
#[derive(Debug, Clone)]
pub struct Models {
    pub spec: ModelSpec,
    pub pretrained: ParamVector,
    pub experts: Vec<ParamVector>,
    pub taus: Vec<TaskVector>,
}

fn load_checkpoint(path: &Path, spec: &ModelSpec) -> CliResult<ParamVector> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { path: path.to_path_buf(), producer: "train" });
    }
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.spec != spec {
        return Err(CliError::Data(format!(
            "{} holds a different architecture than the config; rerun `mergelab train`",
            path.display()
        )));
    }
    Ok(ckpt.params)
}

pub fn load_models(cfg: &RunConfig) -> CliResult<Models> {
    let spec = cfg.model_spec()?;
    let paths = RunPaths::new(cfg);
    let pretrained = load_checkpoint(&paths.pretrained(), &spec)?;
    let experts = (0..cfg.suite.tasks)
        .map(|t| load_checkpoint(&paths.expert(t), &spec))
        .collect::<CliResult<Vec<_>>>()?;
    let taus = experts
        .iter()
        .map(|e| task_vector(e, &pretrained))
        .collect::<mergelab_core::Result<Vec<_>>>()?;
    Ok(Models { spec, pretrained, experts, taus })
}

fn method_config(cfg: &RunConfig, method: MergeMethod) -> MergeConfig {
    match method {
        // uniform 1/T over the experts
        MergeMethod::Average => MergeConfig::new(MergeMethod::Average),
        _ => MergeConfig { method, ..cfg.merge.clone() },
    }
}

fn merge_with(cfg: &MergeConfig, models: &Models) -> CliResult<ParamVector> {
    Ok(merge::merge(cfg, &models.pretrained, &models.experts)?)
}

/// Writes the merged checkpoint for `mcfg` and returns its path.
fn write_merged(cfg: &RunConfig, mcfg: &MergeConfig, models: &Models) -> CliResult<PathBuf> {
    let params = merge_with(mcfg, models)?;
    let mut input_hashes = vec![content_hash(&models.pretrained)];
    input_hashes.extend(models.experts.iter().map(content_hash));
    let provenance = Provenance {
        method: mcfg.method.name().into(),
        lambda: (mcfg.method != MergeMethod::Average).then_some(mcfg.lambda),
        per_task_lambda: mcfg.per_task_lambda.clone(),
        density: (mcfg.method == MergeMethod::Ties).then_some(mcfg.ties_density),
        input_hashes,
    };
    let path = RunPaths::new(cfg).merged(mcfg.method);
    Checkpoint::new(models.spec.clone(), cfg.seed, params)?
        .with_provenance(provenance)
        .save(&path)?;
    Ok(path)
}

/// `merge`: the static merge selected by `merge.method`.
pub fn merge(cfg: &RunConfig) -> CliResult<PathBuf> {
    let models = load_models(cfg)?;
    write_merged(cfg, &cfg.merge, &models)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub pretrained: Vec<f64>,
    /// Expert `i` on task `i`.
    pub finetuned: Vec<f64>,
    pub weight_average: Vec<f64>,
    pub task_arithmetic: Vec<f64>,
    pub ties: Vec<f64>,
}

fn test_sets(suite: &TaskSuite) -> Vec<Vec<&Sample>> {
    suite.tasks.iter().map(|t| t.test.iter().collect()).collect()
}

/// `eval`: test accuracy and loss of the pre-trained model, every expert and
/// every static merge on every task.
pub fn eval(cfg: &RunConfig) -> CliResult<EvalResult> {
    let suite = load_suite(cfg)?;
    let models = load_models(cfg)?;
    let sets = test_sets(&suite);
    let mut named: Vec<(String, ParamVector)> = vec![("pretrained".into(), models.pretrained.clone())];
    for (i, e) in models.experts.iter().enumerate() {
        named.push((format!("expert_{i}"), e.clone()));
    }
    for method in [MergeMethod::Average, MergeMethod::TaskArithmetic, MergeMethod::Ties] {
        named.push((method.name().into(), merge_with(&method_config(cfg, method), &models)?));
    }
    let mut csv = String::from("model,task,accuracy,loss\n");
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, params) in &named {
        for (task, set) in sets.iter().enumerate() {
            let (loss, a) = evaluate(&models.spec, params, set)?;
            let _ = writeln!(csv, "{name},{task},{a:.6},{loss:.6}");
            acc.entry(name.clone()).or_default().push(a);
        }
    }
    write_file(&RunPaths::new(cfg).report("eval.csv"), csv.as_bytes())?;
    let t = suite.num_tasks();
    Ok(EvalResult {
        pretrained: acc["pretrained"].clone(),
        finetuned: (0..t).map(|i| acc[&format!("expert_{i}")][i]).collect(),
        weight_average: acc["average"].clone(),
        task_arithmetic: acc["task_arithmetic"].clone(),
        ties: acc["ties"].clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct SeSummaryFile {
    lambda: F6,
    layer: usize,
    per_task_accuracy: Vec<F6>,
    mean_accuracy: F6,
    task_id_accuracy: F6,
}

/// `se-eval`: per-sample SE-Merging over every test sample.
pub fn se_eval(cfg: &RunConfig) -> CliResult<SeEvaluation> {
    let suite = load_suite(cfg)?;
    let models = load_models(cfg)?;
    let merger = SeMerger::new(&models.spec, &models.pretrained, &models.taus, &cfg.se)?;
    let ev = se_evaluate(&merger, &suite)?;
    let paths = RunPaths::new(cfg);
    write_file(&paths.report("se_samples.csv"), ev.to_csv().as_bytes())?;
    let file = SeSummaryFile {
        lambda: F6(cfg.se.lambda as f64),
        layer: merger.layer(),
        per_task_accuracy: f6s(&ev.per_task_accuracy),
        mean_accuracy: F6(ev.mean_accuracy),
        task_id_accuracy: F6(ev.task_id_accuracy),
    };
    write_file(&paths.report("se_summary.json"), &to_json(&file))?;
    Ok(ev)
}

#[derive(Debug, Clone)]
pub struct DiagnosticsResult {
    pub acc_at_k: Vec<AccAtKReport>,
    /// `(reference name, reports)` for the λ-scaled and the full reference.
    pub bias: Vec<(String, Vec<BiasReport>)>,
    pub disentanglement: DisentanglementReport,
}

impl DiagnosticsResult {
    pub fn bias_for(&self, reference: &str, config: &str) -> Option<&BiasReport> {
        self.bias
            .iter()
            .find(|(r, _)| r == reference)
            .and_then(|(_, reports)| reports.iter().find(|b| b.config == config))
    }
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsFile {
    acc_at_1: BTreeMap<String, Vec<F6>>,
    bias: BTreeMap<String, BTreeMap<String, Vec<F6>>>,
    disentanglement: DisentanglementSummary,
}

fn disentanglement_summary(d: &DisentanglementReport) -> DisentanglementSummary {
    let ratios = d.ratios();
    DisentanglementSummary {
        alphas: d.alphas.iter().map(|a| F6(*a as f64)).collect(),
        mean_ratio: F6(mean(&ratios)),
        ratios: f6s(&ratios),
        off_support_ratio: d.off_support_ratio().map(F6),
    }
}

/// `diagnose`: acc@k per layer, representation bias against both reference
/// scales, and the disentanglement residual.
pub fn diagnose(cfg: &RunConfig) -> CliResult<DiagnosticsResult> {
    let suite = load_suite(cfg)?;
    let m = load_models(cfg)?;
    let spec = &m.spec;
    let paths = RunPaths::new(cfg);
    let lambda = cfg.se.lambda;

    let layers = cfg.diagnostics.layers.clone().unwrap_or_else(|| (1..=spec.depth()).collect());
    let mut csv = String::from("task,layer,k,acc\n");
    let mut reports = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let r = acc_at_k(spec, &suite, &m.pretrained, &m.taus, lambda, layer, cfg.se.metric)?;
        for task in 0..suite.num_tasks() {
            for (k, a) in r.curve(task).iter().enumerate() {
                let _ = writeln!(csv, "{task},{layer},{},{a:.6}", k + 1);
            }
        }
        reports.push(r);
    }
    write_file(&paths.report("acc_at_k.csv"), csv.as_bytes())?;

    let merged: Vec<(&str, ParamVector)> = [MergeMethod::Average, MergeMethod::TaskArithmetic, MergeMethod::Ties]
        .into_iter()
        .map(|method| Ok((method.name(), merge_with(&method_config(cfg, method), &m)?)))
        .collect::<CliResult<_>>()?;
    let merger = SeMerger::new(spec, &m.pretrained, &m.taus, &cfg.se)?;
    let mut bias = Vec::new();
    let mut csv = String::from("config,reference,task,bias\n");
    for (reference, scale) in [("lambda", lambda), ("finetuned", FULL_REFERENCE)] {
        let mut per_ref = Vec::new();
        for (name, params) in &merged {
            per_ref.push(representation_bias(spec, &suite, params, &m.pretrained, &m.taus, scale, name)?);
        }
        per_ref.push(se_representation_bias(&merger, &suite, &m.pretrained, &m.taus, scale)?);
        for b in &per_ref {
            for (task, v) in b.per_task.iter().enumerate() {
                let _ = writeln!(csv, "{},{reference},{task},{v:.6}", b.config);
            }
        }
        bias.push((reference.to_string(), per_ref));
    }
    write_file(&paths.report("bias.csv"), csv.as_bytes())?;

    let alphas = cfg
        .diagnostics
        .alphas
        .clone()
        .unwrap_or_else(|| vec![lambda; suite.num_tasks()]);
    let far = suite.far_field(cfg.diagnostics.far_field, cfg.seed);
    let d = disentanglement_residual(spec, &suite, &m.pretrained, &m.taus, &alphas, &far)?;
    let mut csv = String::from("task,alpha,residual,logit_norm,ratio\n");
    for (task, ((r, n), ratio)) in d
        .per_task_residual
        .iter()
        .zip(&d.per_task_logit_norm)
        .zip(d.ratios())
        .enumerate()
    {
        let _ = writeln!(csv, "{task},{:.6},{r:.6},{n:.6},{ratio:.6}", alphas[task]);
    }
    if let (Some(r), Some(n), Some(ratio)) = (d.off_support_residual, d.off_support_logit_norm, d.off_support_ratio()) {
        let _ = writeln!(csv, "off_support,,{r:.6},{n:.6},{ratio:.6}");
    }
    write_file(&paths.report("disentanglement.csv"), csv.as_bytes())?;

    let file = DiagnosticsFile {
        acc_at_1: reports
            .iter()
            .map(|r| {
                let row = (0..suite.num_tasks()).map(|t| r.acc(t, 1)).collect::<mergelab_core::Result<Vec<_>>>()?;
                Ok((format!("layer_{}", r.layer), f6s(&row)))
            })
            .collect::<CliResult<_>>()?,
        bias: bias
            .iter()
            .map(|(reference, reports)| {
                let table = reports.iter().map(|b| (b.config.clone(), f6s(&b.per_task))).collect();
                (reference.clone(), table)
            })
            .collect(),
        disentanglement: disentanglement_summary(&d),
    };
    write_file(&paths.report("diagnostics.json"), &to_json(&file))?;
    Ok(DiagnosticsResult { acc_at_k: reports, bias, disentanglement: d })
}

/// `export-reps`: layer representations of the task-arithmetic merge and of
/// every expert. Returns the CSV path and the number of data rows.
pub fn export_reps(cfg: &RunConfig) -> CliResult<(PathBuf, usize)> {
    let suite = load_suite(cfg)?;
    let m = load_models(cfg)?;
    let layer = cfg.diagnostics.export_layer.unwrap_or_else(|| default_layer(&m.spec));
    let mut models = vec![(
        "task_arithmetic".to_string(),
        merge_with(&method_config(cfg, MergeMethod::TaskArithmetic), &m)?,
    )];
    for (i, e) in m.experts.iter().enumerate() {
        models.push((format!("expert_{i}"), e.clone()));
    }
    let path = RunPaths::new(cfg).report("representations.csv");
    let rows = export_representations(&m.spec, &suite, &models, layer, &path)?;
    Ok((path, rows))
}

/// `reproduce`: the full pipeline, ending in `summary.json`.
pub fn reproduce(cfg: &RunConfig) -> CliResult<Summary> {
    gen_data(cfg)?;
    train(cfg)?;
    let models = load_models(cfg)?;
    for method in [MergeMethod::Average, MergeMethod::TaskArithmetic, MergeMethod::Ties] {
        write_merged(cfg, &method_config(cfg, method), &models)?;
    }
    let ev = eval(cfg)?;
    let se = se_eval(cfg)?;
    let diag = diagnose(cfg)?;
    export_reps(cfg)?;
    let summary = build_summary(cfg, &models, &ev, &se, &diag)?;
    write_file(&RunPaths::new(cfg).summary(), &to_json(&summary))?;
    Ok(summary)
}

fn build_summary(
    cfg: &RunConfig,
    models: &Models,
    ev: &EvalResult,
    se: &SeEvaluation,
    diag: &DiagnosticsResult,
) -> CliResult<Summary> {
    let se_layer = cfg.se.resolved_layer(&models.spec);
    let t = cfg.suite.tasks;
    let acc_at_1 = match diag.acc_at_k.iter().find(|r| r.layer == se_layer) {
        Some(r) => (0..t).map(|i| r.acc(i, 1)).collect::<mergelab_core::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let bias = diag
        .bias
        .iter()
        .map(|(reference, _)| {
            let get = |config: &str| diag.bias_for(reference, config).map(|b| f6s(&b.per_task)).unwrap_or_default();
            BiasSummary {
                reference: reference.clone(),
                task_arithmetic: get("task_arithmetic"),
                se_merging: get("se_merging"),
            }
        })
        .collect();
    let paths = RunPaths::new(cfg);
    let mut checkpoints = BTreeMap::new();
    let mut names: Vec<String> = vec!["pretrained".into()];
    names.extend((0..t).map(|i| format!("expert_{i}")));
    names.extend(
        [MergeMethod::Average, MergeMethod::TaskArithmetic, MergeMethod::Ties]
            .iter()
            .map(|m| format!("merged_{}", m.name())),
    );
    for name in names {
        let ckpt = Checkpoint::load(&paths.checkpoint(&name))?;
        checkpoints.insert(name, ckpt.content_hash());
    }
    Ok(Summary {
        run_id: cfg.run_id.clone(),
        seed: cfg.seed,
        tasks: t,
        lambda: F6(cfg.se.lambda as f64),
        se_layer,
        mean_accuracy: MethodTable {
            pretrained: F6(mean(&ev.pretrained)),
            finetuned: F6(mean(&ev.finetuned)),
            weight_average: F6(mean(&ev.weight_average)),
            task_arithmetic: F6(mean(&ev.task_arithmetic)),
            ties: F6(mean(&ev.ties)),
            se_merging: F6(se.mean_accuracy),
        },
        per_task_accuracy: MethodTable {
            pretrained: f6s(&ev.pretrained),
            finetuned: f6s(&ev.finetuned),
            weight_average: f6s(&ev.weight_average),
            task_arithmetic: f6s(&ev.task_arithmetic),
            ties: f6s(&ev.ties),
            se_merging: f6s(&se.per_task_accuracy),
        },
        se_minus_task_arithmetic: F6(se.mean_accuracy - mean(&ev.task_arithmetic)),
        se_task_id_accuracy: F6(se.task_id_accuracy),
        acc_at_1: f6s(&acc_at_1),
        bias,
        disentanglement: disentanglement_summary(&diag.disentanglement),
        checkpoints,
    })
}
