//! Dense vector/matrix primitives and the flatten/reshape/cosine machinery
//! used to treat a model's gradient as one long vector.

use std::collections::{BTreeMap, HashSet};
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Norm below which a vector is treated as directionless.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Dimension(format!(
            "{what} has non-finite entry {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// An ordered sequence of finite f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "vector")?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        check_finite(&values, "matrix")?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += a ⊗ b`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (w, bc) in self.values[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }
}

/// Ordered list of named tensor shapes describing a flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeManifest {
    entries: Vec<(String, Vec<usize>)>,
}

impl ShapeManifest {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("manifest has no entries".into()));
        }
        let mut seen = HashSet::new();
        for (name, dims) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Manifest(format!("duplicate tensor name `{name}`")));
            }
            if dims.is_empty() || dims.contains(&0) {
                return Err(Error::Manifest(format!(
                    "tensor `{name}` has invalid dims {dims:?}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all entries.
    pub fn total_len(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    /// Start offset and length of each entry in the flat layout.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.entries
            .iter()
            .map(|(_, d)| {
                let n = d.iter().product::<usize>();
                let span = (off, n);
                off += n;
                span
            })
            .collect()
    }
}

/// A named-tensor payload: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != values.len() {
            return Err(Error::Manifest(format!(
                "tensor dims {dims:?} do not match {} values",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

/// A flattened gradient (or parameter) vector tied to its shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGradient {
    values: Vec<f64>,
    manifest: Arc<ShapeManifest>,
}

impl FlatGradient {
    pub fn new(values: Vec<f64>, manifest: Arc<ShapeManifest>) -> Result<Self> {
        if values.len() != manifest.total_len() {
            return Err(Error::Manifest(format!(
                "flat length {} does not match manifest total {}",
                values.len(),
                manifest.total_len()
            )));
        }
        Ok(Self { values, manifest })
    }

    /// A gradient with a single anonymous entry; for vectors that carry no
    /// parameter structure.
    pub fn unstructured(values: Vec<f64>) -> Result<Self> {
        let manifest = ShapeManifest::new(vec![("flat".into(), vec![values.len()])])?;
        Self::new(values, Arc::new(manifest))
    }

    pub fn zeros(manifest: Arc<ShapeManifest>) -> Self {
        Self {
            values: vec![0.0; manifest.total_len()],
            manifest,
        }
    }

    pub fn manifest(&self) -> &Arc<ShapeManifest> {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// New gradient with the same manifest.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, Arc::clone(&self.manifest))
    }

    /// `a·self + b·other`
    pub fn linear_combination(&self, a: f64, other: &FlatGradient, b: f64) -> Result<Self> {
        check_same_len(&self.values, &other.values)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        self.with_values(values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Deref for FlatGradient {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    if a.is_empty() {
        return Err(Error::Dimension("dot of empty vectors".into()));
    }
    Ok(dot_unchecked(a, b))
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// Result of a cosine computation. `degenerate` is set when either input was
/// shorter than the norm epsilon; `value` is then 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    cosine_similarity_eps(a, b, DEFAULT_NORM_EPS)
}

pub fn cosine_similarity_eps(a: &[f64], b: &[f64], eps: f64) -> Result<Cosine> {
    let ab = dot(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na < eps || nb < eps {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (ab / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Concatenate `grads` in manifest order. Names and dims must match exactly.
pub fn flatten(grads: &TensorMap, manifest: &Arc<ShapeManifest>) -> Result<FlatGradient> {
    if grads.is_empty() {
        return Err(Error::Manifest("empty tensor collection".into()));
    }
    if grads.len() != manifest.len() {
        let extra: Vec<&String> = grads
            .keys()
            .filter(|k| !manifest.entries().iter().any(|(n, _)| n == *k))
            .collect();
        return Err(Error::Manifest(format!(
            "collection has {} tensors, manifest has {} (unexpected: {extra:?})",
            grads.len(),
            manifest.len()
        )));
    }
    let mut values = Vec::with_capacity(manifest.total_len());
    for (name, dims) in manifest.entries() {
        let t = grads
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor `{name}`")))?;
        if &t.dims != dims {
            return Err(Error::Manifest(format!(
                "tensor `{name}` has dims {:?}, manifest says {dims:?}",
                t.dims
            )));
        }
        values.extend_from_slice(&t.values);
    }
    FlatGradient::new(values, Arc::clone(manifest))
}

/// Inverse of [`flatten`].
pub fn reshape(flat: &[f64], manifest: &ShapeManifest) -> Result<TensorMap> {
    if flat.len() != manifest.total_len() {
        return Err(Error::Manifest(format!(
            "flat length {} does not match manifest total {}",
            flat.len(),
            manifest.total_len()
        )));
    }
    let mut out = TensorMap::new();
    for ((name, dims), (off, n)) in manifest.entries().iter().zip(manifest.spans()) {
        out.insert(
            name.clone(),
            Tensor {
                dims: dims.clone(),
                values: flat[off..off + n].to_vec(),
            },
        );
    }
    Ok(out)
}
