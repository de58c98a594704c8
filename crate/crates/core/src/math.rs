//! Flat parameter and activation vectors plus the small set of numeric
//! kernels every other module is built from.
//!
//! Parameters are stored as `f32`. Reductions (distances, sums, softmax)
//! accumulate in `f64` and return `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered tensor layout of a flat parameter array.
///
/// Offsets are contiguous, non-overlapping and cover `0..total_len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    entries: Vec<TensorEntry>,
}

impl ParamIndex {
    /// Builds an index by laying `(name, shape)` pairs out back to back.
    pub fn from_shapes<I, S>(shapes: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, shape) in shapes {
            let entry = TensorEntry {
                name: name.into(),
                offset,
                shape,
            };
            offset += entry.len();
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    /// Validates an explicit entry list (as read back from a manifest).
    pub fn from_entries(entries: Vec<TensorEntry>) -> Result<Self> {
        let mut expected = 0;
        for (i, e) in entries.iter().enumerate() {
            if e.offset != expected {
                return Err(Error::Structural(format!(
                    "tensor `{}` starts at offset {} but the previous tensor ends at {}",
                    e.name, e.offset, expected
                )));
            }
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(Error::Structural(format!(
                    "duplicate tensor name `{}`",
                    e.name
                )));
            }
            expected += e.len();
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    /// Ok when both layouts are identical; otherwise names the first
    /// tensor where they diverge.
    pub fn ensure_same(&self, other: &ParamIndex) -> Result<()> {
        let n = self.entries.len().max(other.entries.len());
        for i in 0..n {
            match (self.entries.get(i), other.entries.get(i)) {
                (Some(a), Some(b)) if a == b => {}
                (Some(a), Some(b)) => {
                    return Err(Error::Structural(format!(
                        "tensor #{i} differs: `{}` {:?}@{} vs `{}` {:?}@{}",
                        a.name, a.shape, a.offset, b.name, b.shape, b.offset
                    )))
                }
                (Some(a), None) | (None, Some(a)) => {
                    return Err(Error::Structural(format!(
                        "tensor `{}` is present in only one operand",
                        a.name
                    )))
                }
                (None, None) => unreachable!(),
            }
        }
        Ok(())
    }
}

/// Flat `f32` parameter store with a named-tensor index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    index: ParamIndex,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, index: ParamIndex) -> Result<Self> {
        if values.len() != index.total_len() {
            return Err(Error::Structural(format!(
                "{} values supplied for an index covering {}",
                values.len(),
                index.total_len()
            )));
        }
        let pv = Self { values, index };
        pv.check_finite()?;
        Ok(pv)
    }

    pub fn zeros(index: ParamIndex) -> Self {
        Self {
            values: vec![0.0; index.total_len()],
            index,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Mutable access for in-place updates. Callers that may produce
    /// non-finite values should follow up with [`ParamVector::check_finite`].
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.index.get(name).map(|e| &self.values[e.range()])
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => {
                let name = self
                    .index
                    .entries()
                    .iter()
                    .find(|e| e.range().contains(&pos))
                    .map_or("?", |e| e.name.as_str());
                Err(Error::Domain(format!(
                    "non-finite value {} at position {pos} (tensor `{name}`)",
                    self.values[pos]
                )))
            }
        }
    }

    /// Little-endian byte image of the values, in index order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// `a·x + y`, element-wise. Both operands must share one index.
pub fn axpy(a: f32, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    axpy_in_place(a, x, &mut out)?;
    Ok(out)
}

/// `y ← a·x + y`.
pub fn axpy_in_place(a: f32, x: &ParamVector, y: &mut ParamVector) -> Result<()> {
    x.index.ensure_same(&y.index)?;
    for (yi, xi) in y.values.iter_mut().zip(&x.values) {
        *yi += a * *xi;
    }
    Ok(())
}

/// A layer representation `f^(ℓ)(x; θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub values: Vec<f32>,
    pub layer: usize,
}

impl ActivationVector {
    pub fn new(values: Vec<f32>, layer: usize) -> Self {
        Self { values, layer }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!(
            "vector lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

pub fn l1_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum())
}

/// `1 − cos∠(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain(
            "cosine distance is undefined for a zero-norm vector".into(),
        ));
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Min-max normalization onto `[0, 1]`.
///
/// A constant input maps to all ones, so a downstream softmax is uniform.
pub fn minmax_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("min-max normalization of an empty list".into()));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![1.0; v.len()]);
    }
    let span = max - min;
    Ok(v.iter().map(|&x| (x - min) / span).collect())
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty list".into()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("softmax input {x} is not finite")));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(values: &[f32]) -> ParamVector {
        let idx = ParamIndex::from_shapes([("w", vec![values.len()])]).unwrap();
        ParamVector::new(values.to_vec(), idx).unwrap()
    }

    #[test]
    fn axpy_examples() {
        let v = pv(&[1.5, -2.0]);
        let other = pv(&[7.0, 8.0]);
        assert_eq!(axpy(0.0, &other, &v).unwrap(), v);
        let zero = ParamVector::zeros(v.index().clone());
        assert_eq!(axpy(1.0, &v, &zero).unwrap(), v);
        let out = axpy(2.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap();
        assert_eq!(out.values(), &[5.0, 8.0]);
    }

    #[test]
    fn axpy_mismatch_names_tensor() {
        let a = ParamVector::zeros(
            ParamIndex::from_shapes([("a", vec![2]), ("b", vec![3])]).unwrap(),
        );
        let b = ParamVector::zeros(
            ParamIndex::from_shapes([("a", vec![2]), ("c", vec![3])]).unwrap(),
        );
        let err = axpy(1.0, &a, &b).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn index_rejects_gaps_and_bad_lengths() {
        let entries = vec![
            TensorEntry { name: "a".into(), offset: 0, shape: vec![2] },
            TensorEntry { name: "b".into(), offset: 3, shape: vec![1] },
        ];
        assert!(ParamIndex::from_entries(entries).is_err());
        let idx = ParamIndex::from_shapes([("a", vec![2, 3])]).unwrap();
        assert!(ParamVector::new(vec![0.0; 5], idx.clone()).is_err());
        assert!(ParamVector::new(vec![f32::NAN; 6], idx).is_err());
    }

    #[test]
    fn distance_examples() {
        let sqrt2 = std::f64::consts::SQRT_2;
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!((l2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - sqrt2).abs() < 1e-15);
        assert_eq!(l1_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(l1_distance(&[2.0], &[-1.0]).unwrap(), 3.0);
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
        assert!(l1_distance(&[1.0], &[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[0.3, -2.0], &[0.3, -2.0]).unwrap().abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[3.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(minmax_normalize(&[2.5; 3]).unwrap(), vec![1.0; 3]);
        assert_eq!(minmax_normalize(&[0.0, 5.0, 10.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(minmax_normalize(&[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let e = std::f64::consts::E;
        let s = softmax(&[1.0, 0.0]).unwrap();
        assert!((s[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
        assert!(softmax(&[f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn axpy_is_linear(
            xs in prop::collection::vec(-10.0f32..10.0, 1..32),
            a in -3.0f32..3.0,
            b in -3.0f32..3.0,
        ) {
            let x = pv(&xs);
            let y = pv(&xs.iter().map(|v| v * 0.5 - 1.0).collect::<Vec<_>>());
            let lhs = axpy(a, &x, &axpy(b, &x, &y).unwrap()).unwrap();
            let rhs = axpy(a + b, &x, &y).unwrap();
            for (l, r) in lhs.values().iter().zip(rhs.values()) {
                // relative to the operand scale (|a|,|b| ≤ 3, |x|,|y| ≤ 10)
                prop_assert!((l - r).abs() <= 1e-6 * 64.0);
            }
        }

        #[test]
        fn distances_are_symmetric_and_zero_on_diagonal(
            a in prop::collection::vec(-5.0f32..5.0, 1..16),
            shift in -1.0f32..1.0,
        ) {
            let b: Vec<f32> = a.iter().map(|v| v * 0.7 + shift).collect();
            prop_assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(l2_distance(&a, &b).unwrap(), l2_distance(&b, &a).unwrap());
            prop_assert_eq!(l1_distance(&a, &b).unwrap(), l1_distance(&b, &a).unwrap());
            if a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0) {
                prop_assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-12);
                prop_assert_eq!(cosine_distance(&a, &b).unwrap(), cosine_distance(&b, &a).unwrap());
            }
        }

        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|p| *p > 0.0));
        }

        #[test]
        fn minmax_hits_both_ends(v in prop::collection::vec(-100.0f64..100.0, 2..20)) {
            let n = minmax_normalize(&v).unwrap();
            prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
            let constant = v.iter().all(|x| *x == v[0]);
            if !constant {
                prop_assert!(n.iter().any(|x| *x == 0.0));
                prop_assert!(n.iter().any(|x| *x == 1.0));
            }
        }
    }
}
