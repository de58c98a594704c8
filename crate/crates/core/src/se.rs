//! Self-enhanced merging: per-sample coefficient rescaling from layer
//! representation distances, followed by a re-merge and inference.
//!
//! For a sample `x` the merged model `θ_M = θ_PT + λ Σ τ_t` and each reference
//! model `θ_PT + λ τ_t` are run up to layer `ℓ`. Distances `d_t` between the
//! merged representation and each reference are reversed into similarities
//! `s_t = d_max − d_t + d_min`, min-max normalized, and turned into
//! coefficients `λ_t = softmax(s^norm)_t · T · λ`. The sample is then
//! evaluated with `θ_M + Σ (λ_t − λ) τ_t`, which equals `θ_PT + Σ λ_t τ_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosine_distance, l2_distance, minmax_normalize, softmax, ActivationVector, ParamVector};
use crate::merge::{check_base, combine_into, task_arithmetic, Lambdas, TaskVector, DEFAULT_LAMBDA};
use crate::model::{argmax, representation_unchecked, ModelSpec};
use crate::suite::TaskSuite;
use crate::train::check_suite;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> Result<f64> {
        match self {
            DistanceMetric::L2 => l2_distance(a, b),
            DistanceMetric::Cosine => cosine_distance(a, b),
        }
    }
}

/// Which models the merged representation is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScale {
    /// `θ_PT + λ τ_t`.
    #[default]
    Lambda,
    /// The full fine-tuned experts `θ_PT + τ_t`.
    Full,
}

/// How rescaled coefficients are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Softmax-rescaled coefficients over all task vectors.
    #[default]
    Soft,
    /// Diagnostic: the whole budget `T·λ` on the nearest task vector.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    /// `None` selects the penultimate layer.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub reference: ReferenceScale,
    #[serde(default)]
    pub routing: Routing,
}

fn default_lambda() -> f32 {
    DEFAULT_LAMBDA
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            layer: None,
            metric: DistanceMetric::L2,
            reference: ReferenceScale::Lambda,
            routing: Routing::Soft,
        }
    }
}

impl SeConfig {
    pub fn resolved_layer(&self, spec: &ModelSpec) -> usize {
        self.layer.unwrap_or_else(|| default_layer(spec))
    }
}

/// Penultimate layer `L − 1` (layer 1 for single-layer models).
pub fn default_layer(spec: &ModelSpec) -> usize {
    spec.depth().saturating_sub(1).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub distances: Vec<f64>,
    pub similarities: Vec<f64>,
    pub normalized: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub predicted_task: usize,
    pub layer: usize,
}

/// Index of the smallest distance; the lower index wins exact ties.
pub fn nearest(distances: &[f64]) -> usize {
    let mut best = 0;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    best
}

/// Distance → similarity → min-max → softmax → scale, returning
/// `(s, s^norm, λ_t)`.
pub fn coefficient_chain(distances: &[f64], lambda: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if distances.is_empty() {
        return Err(Error::Domain("no distances to rescale".into()));
    }
    if let Some(d) = distances.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::Domain(format!("distance {d} is not a finite non-negative number")));
    }
    let t = distances.len() as f64;
    let d_max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let sim: Vec<f64> = distances.iter().map(|d| d_max - d + d_min).collect();
    let norm = minmax_normalize(&sim)?;
    let coeffs = softmax(&norm)?.into_iter().map(|w| w * t * lambda).collect();
    Ok((sim, norm, coeffs))
}

pub fn rescale_coefficients(distances: &[f64], tasks: usize, lambda: f64) -> Result<Vec<f64>> {
    if distances.len() != tasks {
        return Err(Error::Structural(format!(
            "{} distances for {tasks} tasks",
            distances.len()
        )));
    }
    coefficient_chain(distances, lambda).map(|(_, _, c)| c)
}

/// Distances between the merged model's layer-`ℓ` representation of `x` and
/// each reference model's. Shared by the acc@k diagnostic and SE-Merging.
pub fn representation_distances(
    spec: &ModelSpec,
    x: &[f32],
    merged: &ParamVector,
    references: &[ParamVector],
    layer: usize,
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    let r_merged = representation_unchecked(spec, merged.values(), x, layer);
    references
        .iter()
        .map(|r| {
            let r_t = representation_unchecked(spec, r.values(), x, layer);
            metric.distance(&r_merged.values, &r_t.values)
        })
        .collect()
}

/// `θ_PT + scale·τ_t` for every task.
pub fn reference_models(base: &ParamVector, taus: &[TaskVector], scale: f32) -> Result<Vec<ParamVector>> {
    taus.iter()
        .map(|t| task_arithmetic(base, std::slice::from_ref(t), &Lambdas::Uniform(scale)))
        .collect()
}

/// Precomputed state for per-sample merging over fixed experts.
#[derive(Debug, Clone)]
pub struct SeMerger {
    spec: ModelSpec,
    base: ParamVector,
    taus: Vec<TaskVector>,
    cfg: SeConfig,
    layer: usize,
    merged: ParamVector,
    references: Vec<ParamVector>,
}

impl SeMerger {
    pub fn new(spec: &ModelSpec, base: &ParamVector, taus: &[TaskVector], cfg: &SeConfig) -> Result<Self> {
        spec.check_params(base)?;
        check_base(base, taus)?;
        if taus.is_empty() {
            return Err(Error::Domain("SE-Merging needs at least one task vector".into()));
        }
        if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda {} must be ≥ 0", cfg.lambda)));
        }
        let layer = cfg.resolved_layer(spec);
        if layer == 0 || layer > spec.depth() {
            return Err(Error::Domain(format!("layer {layer} is outside 1..={}", spec.depth())));
        }
        let merged = task_arithmetic(base, taus, &Lambdas::Uniform(cfg.lambda))?;
        let ref_scale = match cfg.reference {
            ReferenceScale::Lambda => cfg.lambda,
            ReferenceScale::Full => 1.0,
        };
        let references = reference_models(base, taus, ref_scale)?;
        Ok(Self {
            spec: spec.clone(),
            base: base.clone(),
            taus: taus.to_vec(),
            cfg: cfg.clone(),
            layer,
            merged,
            references,
        })
    }

    /// Replaces the model whose representation is compared to the references.
    pub fn with_merged(mut self, merged: ParamVector) -> Result<Self> {
        self.spec.check_params(&merged)?;
        self.merged = merged;
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn num_tasks(&self) -> usize {
        self.taus.len()
    }

    pub fn merged(&self) -> &ParamVector {
        &self.merged
    }

    pub fn references(&self) -> &[ParamVector] {
        &self.references
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.spec.input_dim() {
            return Err(Error::Structural(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    pub fn compute_similarity(&self, x: &[f32]) -> Result<SimilarityReport> {
        self.check_input(x)?;
        let distances = representation_distances(
            &self.spec,
            x,
            &self.merged,
            &self.references,
            self.layer,
            self.cfg.metric,
        )?;
        let (similarities, normalized, mut coefficients) =
            coefficient_chain(&distances, self.cfg.lambda as f64)?;
        let predicted_task = nearest(&distances);
        if self.cfg.routing == Routing::Hard {
            let budget = self.num_tasks() as f64 * self.cfg.lambda as f64;
            coefficients = (0..self.num_tasks())
                .map(|t| if t == predicted_task { budget } else { 0.0 })
                .collect();
        }
        Ok(SimilarityReport {
            distances,
            similarities,
            normalized,
            coefficients,
            predicted_task,
            layer: self.layer,
        })
    }

    /// Writes `θ_PT + Σ λ_t τ_t` into `scratch`. Each `λ_t` is applied as the
    /// f32 a static merge would use, so uniform coefficients reproduce
    /// [`task_arithmetic`] exactly.
    pub fn materialize(&self, coefficients: &[f64], scratch: &mut Vec<f32>) {
        let cs: Vec<f64> = coefficients.iter().map(|c| *c as f32 as f64).collect();
        scratch.clear();
        scratch.resize(self.base.len(), 0.0);
        combine_into(self.base.values(), &self.taus, &cs, scratch);
    }

    pub fn infer_with_scratch(
        &self,
        x: &[f32],
        scratch: &mut Vec<f32>,
    ) -> Result<(ActivationVector, SimilarityReport)> {
        let report = self.compute_similarity(x)?;
        self.materialize(&report.coefficients, scratch);
        let logits = representation_unchecked(&self.spec, scratch, x, self.spec.depth());
        Ok((logits, report))
    }

    pub fn infer(&self, x: &[f32]) -> Result<(ActivationVector, SimilarityReport)> {
        let mut scratch = Vec::with_capacity(self.merged.len());
        self.infer_with_scratch(x, &mut scratch)
    }
}

/// One-shot form of [`SeMerger::compute_similarity`] against an explicit merged model.
pub fn compute_similarity(
    spec: &ModelSpec,
    x: &[f32],
    merged: &ParamVector,
    base: &ParamVector,
    taus: &[TaskVector],
    lambda: f32,
    layer: usize,
) -> Result<SimilarityReport> {
    let cfg = SeConfig {
        lambda,
        layer: Some(layer),
        ..SeConfig::default()
    };
    SeMerger::new(spec, base, taus, &cfg)?
        .with_merged(merged.clone())?
        .compute_similarity(x)
}

/// One-shot SE-Merging inference for a single sample.
pub fn se_infer(
    spec: &ModelSpec,
    x: &[f32],
    base: &ParamVector,
    taus: &[TaskVector],
    lambda: f32,
    layer: usize,
) -> Result<(ActivationVector, SimilarityReport)> {
    let cfg = SeConfig {
        lambda,
        layer: Some(layer),
        ..SeConfig::default()
    };
    SeMerger::new(spec, base, taus, &cfg)?.infer(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub true_task: usize,
    pub label: usize,
    pub prediction: usize,
    pub report: SimilarityReport,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeEvaluation {
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Fraction of samples whose nearest reference is their own task.
    pub task_id_accuracy: f64,
    pub samples: Vec<SampleRecord>,
}

impl SeEvaluation {
    /// Per-sample CSV: `sample_id,true_task,predicted_task,d_1..d_T,lambda_1..lambda_T,correct`.
    pub fn to_csv(&self) -> String {
        let t = self.per_task_accuracy.len();
        let mut out = String::from("sample_id,true_task,predicted_task");
        for i in 1..=t {
            out.push_str(&format!(",d_{i}"));
        }
        for i in 1..=t {
            out.push_str(&format!(",lambda_{i}"));
        }
        out.push_str(",correct\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.sample_id, s.true_task, s.report.predicted_task));
            for d in &s.report.distances {
                out.push_str(&format!(",{d:.6}"));
            }
            for l in &s.report.coefficients {
                out.push_str(&format!(",{l:.6}"));
            }
            out.push_str(&format!(",{}\n", u8::from(s.correct())));
        }
        out
    }
}

/// Runs SE-Merging over every test sample of every task.
///
/// Samples are processed on the current rayon pool; the result does not
/// depend on the pool size.
pub fn se_evaluate(merger: &SeMerger, suite: &TaskSuite) -> Result<SeEvaluation> {
    check_suite(merger.spec(), suite)?;
    if suite.num_tasks() != merger.num_tasks() {
        return Err(Error::Structural(format!(
            "{} task vectors for a suite of {} tasks",
            merger.num_tasks(),
            suite.num_tasks()
        )));
    }
    if suite.tasks.iter().any(|t| t.test.is_empty()) {
        return Err(Error::Domain("every task needs at least one test sample".into()));
    }
    let jobs: Vec<(usize, usize, usize)> = suite
        .tasks
        .iter()
        .flat_map(|t| (0..t.test.len()).map(move |k| (t.task_id, k)))
        .enumerate()
        .map(|(id, (task, k))| (id, task, k))
        .collect();
    let samples = jobs
        .par_iter()
        .map_init(Vec::new, |scratch, &(sample_id, task, k)| {
            let s = &suite.tasks[task].test[k];
            let (logits, report) = merger.infer_with_scratch(&s.x, scratch)?;
            Ok(SampleRecord {
                sample_id,
                true_task: task,
                label: s.y,
                prediction: argmax(&logits.values),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let t = suite.num_tasks();
    let mut correct = vec![0usize; t];
    let mut total = vec![0usize; t];
    let mut routed = 0usize;
    for s in &samples {
        total[s.true_task] += 1;
        correct[s.true_task] += usize::from(s.correct());
        routed += usize::from(s.report.predicted_task == s.true_task);
    }
    let per_task_accuracy: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| c as f64 / n as f64)
        .collect();
    let mean_accuracy = per_task_accuracy.iter().sum::<f64>() / t as f64;
    Ok(SeEvaluation {
        per_task_accuracy,
        mean_accuracy,
        task_id_accuracy: routed as f64 / samples.len() as f64,
        samples,
    })
}
