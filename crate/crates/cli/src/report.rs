//! Output formatting: fixed 6-decimal numbers in JSON and CSV, and the run
//! summary schema.

use std::collections::BTreeMap;
use std::path::Path;

use mergelab_core::checkpoint::write_atomic;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::CliResult;

/// A number serialized with exactly 6 decimals, or `null` when not finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct F6(pub f64);

impl Serialize for F6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        RawValue::from_string(format!("{:.6}", self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

pub fn f6s(values: &[f64]) -> Vec<F6> {
    values.iter().copied().map(F6).collect()
}

/// One value per merge configuration compared in a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodTable<T> {
    pub pretrained: T,
    /// Each expert on its own task.
    pub finetuned: T,
    pub weight_average: T,
    pub task_arithmetic: T,
    pub ties: T,
    pub se_merging: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    /// Reference model the bias is measured against.
    pub reference: String,
    pub task_arithmetic: Vec<F6>,
    pub se_merging: Vec<F6>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisentanglementSummary {
    pub alphas: Vec<F6>,
    pub ratios: Vec<F6>,
    pub mean_ratio: F6,
    pub off_support_ratio: Option<F6>,
}

/// Contents of `summary.json`. Everything in it is a function of the
/// configuration alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub run_id: String,
    pub seed: u64,
    pub tasks: usize,
    pub lambda: F6,
    pub se_layer: usize,
    pub mean_accuracy: MethodTable<F6>,
    pub per_task_accuracy: MethodTable<Vec<F6>>,
    pub se_minus_task_arithmetic: F6,
    pub se_task_id_accuracy: F6,
    pub acc_at_1: Vec<F6>,
    pub bias: Vec<BiasSummary>,
    pub disentanglement: DisentanglementSummary,
    /// Payload hash of every checkpoint written by the run.
    pub checkpoints: BTreeMap<String, String>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    Ok(write_atomic(path, bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_six_decimals() {
        let v = serde_json::to_string(&vec![F6(1.0), F6(0.1234567), F6(-2.5), F6(f64::NAN)]).unwrap();
        assert_eq!(v, "[1.000000,0.123457,-2.500000,null]");
    }
}
