//! Static merging: task vectors, weight averaging, task arithmetic and TIES.
//!
//! All multi-model sums accumulate in ascending task order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{axpy_in_place, ParamIndex, ParamVector};

pub const DEFAULT_LAMBDA: f32 = 0.3;

/// SHA-256 over a parameter vector's tensor index and values.
pub fn fingerprint(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for e in params.index().entries() {
        h.update(e.name.as_bytes());
        h.update([0u8]);
        h.update((e.offset as u64).to_le_bytes());
        for d in &e.shape {
            h.update((*d as u64).to_le_bytes());
        }
    }
    h.update(params.to_le_bytes());
    hex::encode(h.finalize())
}

/// `τ = θ_i − θ_PT` in f64, tagged with the fingerprint of the base it was
/// taken from. The difference of two f32 values is exact in f64, so
/// `θ_PT + τ` rounds back to `θ_i` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub delta: Vec<f64>,
    pub index: ParamIndex,
    pub base_fingerprint: String,
}

impl TaskVector {
    /// The delta rounded to f32.
    pub fn to_params(&self) -> Result<ParamVector> {
        ParamVector::new(self.delta.iter().map(|v| *v as f32).collect(), self.index.clone())
    }
}

pub fn task_vector(finetuned: &ParamVector, base: &ParamVector) -> Result<TaskVector> {
    finetuned.index().ensure_same(base.index())?;
    let delta = finetuned
        .values()
        .iter()
        .zip(base.values())
        .map(|(a, b)| *a as f64 - *b as f64)
        .collect();
    Ok(TaskVector {
        delta,
        index: base.index().clone(),
        base_fingerprint: fingerprint(base),
    })
}

/// `Σ λ_i θ_i`.
pub fn weight_average(models: &[ParamVector], weights: &[f32]) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::Structural("weight averaging needs at least one model".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Structural(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let mut out = ParamVector::zeros(first.index().clone());
    for (m, &w) in models.iter().zip(weights) {
        axpy_in_place(w, m, &mut out)?;
    }
    Ok(out)
}

/// Scaling coefficients for task arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambdas {
    Uniform(f32),
    PerTask(Vec<f32>),
}

impl Lambdas {
    pub fn resolve(&self, tasks: usize) -> Result<Vec<f32>> {
        let v = match self {
            Lambdas::Uniform(l) => vec![*l; tasks],
            Lambdas::PerTask(ls) => {
                if ls.len() != tasks {
                    return Err(Error::Structural(format!(
                        "{} coefficients for {tasks} task vectors",
                        ls.len()
                    )));
                }
                ls.clone()
            }
        };
        if let Some(bad) = v.iter().find(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("merge coefficient {bad} is not finite")));
        }
        Ok(v)
    }
}

pub fn check_base(base: &ParamVector, taus: &[TaskVector]) -> Result<()> {
    let fp = fingerprint(base);
    for (i, tau) in taus.iter().enumerate() {
        if tau.base_fingerprint != fp {
            return Err(Error::Structural(format!(
                "task vector {i} was taken against a different base model"
            )));
        }
        tau.index.ensure_same(base.index())?;
    }
    Ok(())
}

/// Writes `θ_PT + Σ_i c_i τ_i` into `out`, accumulating each coordinate in
/// f64 in task order and rounding once. Shapes are assumed checked.
pub fn combine_into(base: &[f32], taus: &[TaskVector], coefficients: &[f64], out: &mut [f32]) {
    for (j, (o, b)) in out.iter_mut().zip(base).enumerate() {
        let mut acc = *b as f64;
        for (tau, c) in taus.iter().zip(coefficients) {
            acc += c * tau.delta[j];
        }
        *o = acc as f32;
    }
}

/// `θ_PT + Σ_i λ_i τ_i`.
pub fn task_arithmetic(base: &ParamVector, taus: &[TaskVector], lambdas: &Lambdas) -> Result<ParamVector> {
    check_base(base, taus)?;
    let ls: Vec<f64> = lambdas.resolve(taus.len())?.into_iter().map(f64::from).collect();
    let mut out = base.clone();
    combine_into(base.values(), taus, &ls, out.values_mut());
    out.check_finite()?;
    Ok(out)
}

/// Keeps the `⌈density·p⌉` largest-magnitude entries; ties go to the lower index.
pub fn trim(values: &[f64], density: f32) -> Vec<f64> {
    let p = values.len();
    let keep = ((density as f64) * p as f64).ceil() as usize;
    if keep >= p {
        return values.to_vec();
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; p];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// Trim, elect sign, disjoint mean. Returns `θ_PT + λ·merged`.
pub fn ties_merge(base: &ParamVector, taus: &[TaskVector], lambda: f32, density: f32) -> Result<ParamVector> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Domain(format!("TIES density {density} is outside (0, 1]")));
    }
    if taus.is_empty() {
        return Err(Error::Structural("TIES needs at least one task vector".into()));
    }
    check_base(base, taus)?;
    let trimmed: Vec<Vec<f64>> = taus.iter().map(|t| trim(&t.delta, density)).collect();

    let mut out = base.clone();
    for (j, w) in out.values_mut().iter_mut().enumerate() {
        let (mut pos, mut neg) = (0.0f64, 0.0f64);
        for t in &trimmed {
            let v = t[j];
            if v > 0.0 {
                pos += v;
            } else {
                neg -= v;
            }
        }
        // exact ties elect the positive sign
        let positive = pos >= neg;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for t in &trimmed {
            let v = t[j];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        let merged = if count == 0 { 0.0 } else { sum / count as f64 };
        *w = (*w as f64 + lambda as f64 * merged) as f32;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub method: MergeMethod,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default)]
    pub per_task_lambda: Option<Vec<f32>>,
    #[serde(default = "default_density")]
    pub ties_density: f32,
}

fn default_lambda() -> f32 {
    DEFAULT_LAMBDA
}

fn default_density() -> f32 {
    1.0
}

impl MergeConfig {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            lambda: DEFAULT_LAMBDA,
            per_task_lambda: None,
            ties_density: default_density(),
        }
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if let Some(ls) = &self.per_task_lambda {
            if ls.len() != tasks {
                return Err(Error::Structural(format!(
                    "per_task_lambda has {} entries for {tasks} tasks",
                    ls.len()
                )));
            }
            if ls.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::Domain("per_task_lambda entries must be ≥ 0".into()));
            }
        }
        if !(self.ties_density > 0.0 && self.ties_density <= 1.0) {
            return Err(Error::Domain(format!(
                "ties_density {} is outside (0, 1]",
                self.ties_density
            )));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        match &self.per_task_lambda {
            Some(ls) => Lambdas::PerTask(ls.clone()),
            None => Lambdas::Uniform(self.lambda),
        }
    }
}

/// Applies `cfg` to a base model and its fine-tuned experts.
///
/// `average` combines the experts themselves (uniform `1/T` unless
/// `per_task_lambda` is given); the other methods work on task vectors.
pub fn merge(cfg: &MergeConfig, base: &ParamVector, experts: &[ParamVector]) -> Result<ParamVector> {
    cfg.validate(experts.len())?;
    match cfg.method {
        MergeMethod::Average => {
            let weights = cfg
                .per_task_lambda
                .clone()
                .unwrap_or_else(|| vec![1.0 / experts.len().max(1) as f32; experts.len()]);
            weight_average(experts, &weights)
        }
        MergeMethod::TaskArithmetic | MergeMethod::Ties => {
            let taus = experts
                .iter()
                .map(|e| task_vector(e, base))
                .collect::<Result<Vec<_>>>()?;
            if cfg.method == MergeMethod::Ties {
                ties_merge(base, &taus, cfg.lambda, cfg.ties_density)
            } else {
                task_arithmetic(base, &taus, &cfg.lambdas())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[f32]) -> ParamVector {
        let idx = ParamIndex::from_shapes([("w", vec![values.len()])]).unwrap();
        ParamVector::new(values.to_vec(), idx).unwrap()
    }

    #[test]
    fn task_vector_cases() {
        let base = pv(&[0.5, -1.0, 2.0]);
        let tv = task_vector(&base, &base).unwrap();
        assert!(tv.delta.iter().all(|v| *v == 0.0));
        let tuned = pv(&[0.75, -1.5, 2.0]);
        assert_eq!(task_vector(&tuned, &base).unwrap().delta, vec![0.25, -0.5, 0.0]);
        let other = ParamVector::zeros(ParamIndex::from_shapes([("v", vec![3])]).unwrap());
        assert!(matches!(task_vector(&other, &base), Err(Error::Structural(_))));
    }

    #[test]
    fn weight_average_cases() {
        let a = pv(&[1.0, -3.0]);
        let b = pv(&[5.0, 7.0]);
        assert_eq!(weight_average(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap(), a);
        assert_eq!(weight_average(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        assert!(weight_average(&[a.clone(), b], &[1.0]).is_err());
        assert!(weight_average(&[], &[]).is_err());
    }

    #[test]
    fn task_arithmetic_cases() {
        let base = pv(&[1.0, 2.0]);
        let t1 = pv(&[1.5, 1.0]);
        let tau = task_vector(&t1, &base).unwrap();
        assert_eq!(task_arithmetic(&base, &[tau.clone()], &Lambdas::Uniform(1.0)).unwrap(), t1);
        assert_eq!(task_arithmetic(&base, &[tau.clone()], &Lambdas::Uniform(0.0)).unwrap(), base);
        assert!(task_arithmetic(&base, &[tau], &Lambdas::PerTask(vec![0.1, 0.2])).is_err());
    }

    #[test]
    fn task_arithmetic_rejects_foreign_base() {
        let base = pv(&[1.0, 2.0]);
        let other = pv(&[1.0, 2.5]);
        let good = task_vector(&pv(&[0.0, 0.0]), &base).unwrap();
        let bad = task_vector(&pv(&[0.0, 0.0]), &other).unwrap();
        let err = task_arithmetic(&base, &[good, bad], &Lambdas::Uniform(0.3)).unwrap_err();
        assert!(err.to_string().contains("task vector 1"), "{err}");
    }

    #[test]
    fn ties_hand_examples() {
        let base = pv(&[0.0, 0.0]);
        let t1 = task_vector(&pv(&[1.0, -4.0]), &base).unwrap();
        let t2 = task_vector(&pv(&[3.0, 2.0]), &base).unwrap();
        let full = ties_merge(&base, &[t1.clone(), t2.clone()], 1.0, 1.0).unwrap();
        assert_eq!(full.values(), &[2.0, -4.0]);
        assert_eq!(trim(&t1.delta, 0.5), vec![0.0, -4.0]);
        assert_eq!(trim(&t2.delta, 0.5), vec![3.0, 0.0]);
        let half = ties_merge(&base, &[t1, t2], 1.0, 0.5).unwrap();
        assert_eq!(half.values(), &[3.0, -4.0]);
    }

    #[test]
    fn ties_tie_breaks_positive_and_rejects_bad_density() {
        let base = pv(&[0.0]);
        let t1 = task_vector(&pv(&[2.0]), &base).unwrap();
        let t2 = task_vector(&pv(&[-2.0]), &base).unwrap();
        let m = ties_merge(&base, &[t1.clone(), t2], 1.0, 1.0).unwrap();
        assert_eq!(m.values(), &[2.0]);
        assert!(matches!(ties_merge(&base, &[t1.clone()], 1.0, 0.0), Err(Error::Domain(_))));
        assert!(ties_merge(&base, &[t1], 1.0, 1.5).is_err());
    }

    #[test]
    fn merge_dispatch() {
        let base = pv(&[0.0, 1.0]);
        let experts = [pv(&[1.0, 1.0]), pv(&[0.0, 3.0])];
        let avg = merge(&MergeConfig::new(MergeMethod::Average), &base, &experts).unwrap();
        assert_eq!(avg.values(), &[0.5, 2.0]);
        let ta = merge(&MergeConfig::new(MergeMethod::TaskArithmetic), &base, &experts).unwrap();
        assert_eq!(ta.values(), &[0.3, 1.0 + 0.3 * 2.0]);
        let mut cfg = MergeConfig::new(MergeMethod::Ties);
        cfg.ties_density = 0.0;
        assert!(merge(&cfg, &base, &experts).is_err());
    }
}
