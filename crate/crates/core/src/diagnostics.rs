//! Measurement instruments: representation rank accuracy (acc@k),
//! representation bias, disentanglement residuals and raw representation
//! export.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::math::{l1_distance, l2_distance, ParamVector};
use crate::merge::{check_base, task_arithmetic, Lambdas, TaskVector};
use crate::model::{representation_unchecked, ModelSpec};
use crate::se::{reference_models, representation_distances, DistanceMetric, SeMerger};
use crate::suite::TaskSuite;
use crate::train::check_suite;

fn check_models(spec: &ModelSpec, suite: &TaskSuite, base: &ParamVector, taus: &[TaskVector]) -> Result<()> {
    check_suite(spec, suite)?;
    spec.check_params(base)?;
    check_base(base, taus)?;
    if taus.len() != suite.num_tasks() {
        return Err(Error::Structural(format!(
            "{} task vectors for a suite of {} tasks",
            taus.len(),
            suite.num_tasks()
        )));
    }
    if let Some(t) = suite.tasks.iter().find(|t| t.test.is_empty()) {
        return Err(Error::Domain(format!("task {} has no test samples", t.task_id)));
    }
    Ok(())
}

/// 1-based position of `target` after a stable ascending sort of `distances`.
pub fn rank_of(distances: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    order.iter().position(|&t| t == target).unwrap() + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccAtKReport {
    pub layer: usize,
    pub num_tasks: usize,
    /// `ranks[i][n]`: rank of task `i`'s reference for the `n`-th test sample of task `i`.
    pub ranks: Vec<Vec<usize>>,
}

impl AccAtKReport {
    pub fn acc(&self, task: usize, k: usize) -> Result<f64> {
        if k == 0 || k > self.num_tasks {
            return Err(Error::Domain(format!("k={k} is outside 1..={}", self.num_tasks)));
        }
        let ranks = self
            .ranks
            .get(task)
            .ok_or_else(|| Error::Domain(format!("no task {task}")))?;
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        Ok(hits as f64 / ranks.len() as f64)
    }

    /// `acc@1 … acc@T` for one task.
    pub fn curve(&self, task: usize) -> Vec<f64> {
        (1..=self.num_tasks).map(|k| self.acc(task, k).unwrap()).collect()
    }
}

/// Ranks each task's own reference model among all references by layer-`ℓ`
/// representation distance to `θ_PT + λ Σ τ`.
pub fn acc_at_k(
    spec: &ModelSpec,
    suite: &TaskSuite,
    base: &ParamVector,
    taus: &[TaskVector],
    lambda: f32,
    layer: usize,
    metric: DistanceMetric,
) -> Result<AccAtKReport> {
    let merged = task_arithmetic(base, taus, &Lambdas::Uniform(lambda))?;
    acc_at_k_against(spec, suite, &merged, base, taus, lambda, layer, metric)
}

/// As [`acc_at_k`] with an explicit merged model.
#[allow(clippy::too_many_arguments)]
pub fn acc_at_k_against(
    spec: &ModelSpec,
    suite: &TaskSuite,
    merged: &ParamVector,
    base: &ParamVector,
    taus: &[TaskVector],
    lambda: f32,
    layer: usize,
    metric: DistanceMetric,
) -> Result<AccAtKReport> {
    check_models(spec, suite, base, taus)?;
    spec.check_params(merged)?;
    if layer == 0 || layer > spec.depth() {
        return Err(Error::Domain(format!("layer {layer} is outside 1..={}", spec.depth())));
    }
    let references = reference_models(base, taus, lambda)?;
    let ranks = suite
        .tasks
        .iter()
        .map(|task| {
            task.test
                .par_iter()
                .map(|s| {
                    let d = representation_distances(spec, &s.x, merged, &references, layer, metric)?;
                    Ok(rank_of(&d, task.task_id))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccAtKReport {
        layer,
        num_tasks: taus.len(),
        ranks,
    })
}

/// Mean final-layer ℓ1 distance to each task's reference `θ_PT + s·τ_i`,
/// for one merge configuration. `s = 1` compares against the fine-tuned
/// expert itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub config: String,
    pub per_task: Vec<f64>,
}

/// Bias of a logit source `logits(x)` against each task's reference model.
pub fn representation_bias_with<F>(
    spec: &ModelSpec,
    suite: &TaskSuite,
    base: &ParamVector,
    taus: &[TaskVector],
    reference_scale: f32,
    config: &str,
    logits: F,
) -> Result<BiasReport>
where
    F: Fn(&[f32]) -> Result<Vec<f32>> + Sync,
{
    check_models(spec, suite, base, taus)?;
    let references = reference_models(base, taus, reference_scale)?;
    let per_task = suite
        .tasks
        .iter()
        .map(|task| {
            let reference = &references[task.task_id];
            let dists = task
                .test
                .par_iter()
                .map(|s| {
                    let merged = logits(&s.x)?;
                    let expert = representation_unchecked(spec, reference.values(), &s.x, spec.depth());
                    l1_distance(&merged, &expert.values)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(dists.iter().sum::<f64>() / dists.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BiasReport {
        config: config.to_string(),
        per_task,
    })
}

/// Bias of a fixed merged parameter vector.
pub fn representation_bias(
    spec: &ModelSpec,
    suite: &TaskSuite,
    merged: &ParamVector,
    base: &ParamVector,
    taus: &[TaskVector],
    reference_scale: f32,
    config: &str,
) -> Result<BiasReport> {
    spec.check_params(merged)?;
    representation_bias_with(spec, suite, base, taus, reference_scale, config, |x| {
        Ok(representation_unchecked(spec, merged.values(), x, spec.depth()).values)
    })
}

/// Bias of per-sample SE-Merging models.
pub fn se_representation_bias(
    merger: &SeMerger,
    suite: &TaskSuite,
    base: &ParamVector,
    taus: &[TaskVector],
    reference_scale: f32,
) -> Result<BiasReport> {
    representation_bias_with(merger.spec(), suite, base, taus, reference_scale, "se_merging", |x| {
        merger.infer(x).map(|(l, _)| l.values)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub alphas: Vec<f32>,
    /// Mean `‖f(x; θ_PT + Σ α_j τ_j) − f(x; θ_PT + α_i τ_i)‖₂` over task `i`'s test set.
    pub per_task_residual: Vec<f64>,
    /// Mean `‖f(x; θ_PT + α_i τ_i)‖₂` over the same samples.
    pub per_task_logit_norm: Vec<f64>,
    /// Off-support branch: mean `‖f(x; θ_PT + Σ α_j τ_j) − f(x; θ_PT)‖₂` over far-field samples.
    pub off_support_residual: Option<f64>,
    pub off_support_logit_norm: Option<f64>,
}

impl DisentanglementReport {
    pub fn ratios(&self) -> Vec<f64> {
        self.per_task_residual
            .iter()
            .zip(&self.per_task_logit_norm)
            .map(|(r, n)| if *n > 0.0 { r / n } else { 0.0 })
            .collect()
    }

    pub fn off_support_ratio(&self) -> Option<f64> {
        match (self.off_support_residual, self.off_support_logit_norm) {
            (Some(r), Some(n)) if n > 0.0 => Some(r / n),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        }
    }
}

fn mean_pair_l2(spec: &ModelSpec, a: &ParamVector, b: &ParamVector, xs: &[&[f32]]) -> Result<(f64, f64)> {
    let pairs = xs
        .par_iter()
        .map(|x| {
            let fa = representation_unchecked(spec, a.values(), x, spec.depth());
            let fb = representation_unchecked(spec, b.values(), x, spec.depth());
            let norm = fb.values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            Ok((l2_distance(&fa.values, &fb.values)?, norm))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = pairs.len().max(1) as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// On-support residual of the trivial decomposition, plus the off-support
/// branch on `far_field` inputs when any are given.
pub fn disentanglement_residual(
    spec: &ModelSpec,
    suite: &TaskSuite,
    base: &ParamVector,
    taus: &[TaskVector],
    alphas: &[f32],
    far_field: &[Vec<f32>],
) -> Result<DisentanglementReport> {
    check_models(spec, suite, base, taus)?;
    if alphas.len() != taus.len() {
        return Err(Error::Structural(format!(
            "{} coefficients for {} task vectors",
            alphas.len(),
            taus.len()
        )));
    }
    let combined = task_arithmetic(base, taus, &Lambdas::PerTask(alphas.to_vec()))?;
    let mut per_task_residual = Vec::with_capacity(taus.len());
    let mut per_task_logit_norm = Vec::with_capacity(taus.len());
    for task in &suite.tasks {
        let i = task.task_id;
        let single = task_arithmetic(base, &taus[i..=i], &Lambdas::Uniform(alphas[i]))?;
        let xs: Vec<&[f32]> = task.test.iter().map(|s| s.x.as_slice()).collect();
        let (res, norm) = mean_pair_l2(spec, &combined, &single, &xs)?;
        per_task_residual.push(res);
        per_task_logit_norm.push(norm);
    }
    let (off_support_residual, off_support_logit_norm) = if far_field.is_empty() {
        (None, None)
    } else {
        if let Some(x) = far_field.iter().find(|x| x.len() != spec.input_dim()) {
            return Err(Error::Structural(format!(
                "far-field sample has {} features, model expects {}",
                x.len(),
                spec.input_dim()
            )));
        }
        let xs: Vec<&[f32]> = far_field.iter().map(Vec::as_slice).collect();
        let (r, n) = mean_pair_l2(spec, &combined, base, &xs)?;
        (Some(r), Some(n))
    };
    Ok(DisentanglementReport {
        alphas: alphas.to_vec(),
        per_task_residual,
        per_task_logit_norm,
        off_support_residual,
        off_support_logit_norm,
    })
}

/// Writes `model_name,task_id,sample_id,v_1..v_d` rows for every model and
/// every test sample. Values carry 9 significant digits, enough to recover
/// each `f32` exactly. Returns the number of data rows.
pub fn export_representations(
    spec: &ModelSpec,
    suite: &TaskSuite,
    models: &[(String, ParamVector)],
    layer: usize,
    path: &Path,
) -> Result<usize> {
    check_suite(spec, suite)?;
    if layer == 0 || layer > spec.depth() {
        return Err(Error::Domain(format!("layer {layer} is outside 1..={}", spec.depth())));
    }
    for (name, params) in models {
        spec.check_params(params)?;
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Domain(format!("model name {name:?} cannot be written to CSV")));
        }
    }
    let mut out = String::from("model_name,task_id,sample_id");
    for j in 1..=spec.width(layer) {
        let _ = write!(out, ",v_{j}");
    }
    out.push('\n');
    let mut rows = 0;
    for (name, params) in models {
        let mut sample_id = 0usize;
        for task in &suite.tasks {
            for s in &task.test {
                let r = representation_unchecked(spec, params.values(), &s.x, layer);
                let _ = write!(out, "{name},{},{sample_id}", task.task_id);
                for v in &r.values {
                    let _ = write!(out, ",{v:.8e}");
                }
                out.push('\n');
                sample_id += 1;
                rows += 1;
            }
        }
    }
    write_atomic(path, out.as_bytes())?;
    Ok(rows)
}
