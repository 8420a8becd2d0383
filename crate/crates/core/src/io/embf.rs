//! EMBF: the little-endian binary container for embedding matrices.
//!
//! Layout:
//!
//! ```text
//! 0..4    magic "EMBF"
//! u32     version (= 1)
//! u32     D
//! u64     N
//! u32     flags   bit0 = labels present, bit1 = view groups present
//! N*D f32 features, row-major
//! N   i32 labels       (if bit0)
//! N   u32 view groups  (if bit1)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, UNIT_NORM_TOL};
use crate::scalar::Scalar;

pub const EMBF_MAGIC: [u8; 4] = *b"EMBF";
pub const EMBF_VERSION: u32 = 1;
pub const EMBF_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

const FLAG_LABELS: u32 = 1;
const FLAG_VIEW_GROUPS: u32 = 1 << 1;

/// N unit-norm feature rows of width D, with optional labels and view groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    features: Vec<f32>,
    labels: Option<Vec<i32>>,
    view_groups: Option<Vec<u32>>,
}

impl FeatureSet {
    /// Builds a set and checks every invariant that does not need the class count.
    pub fn new(
        dim: usize,
        features: Vec<f32>,
        labels: Option<Vec<i32>>,
        view_groups: Option<Vec<u32>>,
    ) -> Result<Self> {
        let set = Self {
            dim,
            features,
            labels,
            view_groups,
        };
        set.check()?;
        Ok(set)
    }

    pub fn from_rows(
        rows: &[Vec<f32>],
        labels: Option<Vec<i32>>,
        view_groups: Option<Vec<u32>>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            features.extend_from_slice(r);
        }
        Self::new(dim, features, labels, view_groups)
    }

    fn check(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if !self.features.len().is_multiple_of(self.dim) {
            return Err(Error::Truncated(format!(
                "{} values is not a multiple of D={}",
                self.features.len(),
                self.dim
            )));
        }
        let n = self.len();
        for (row, r) in self.features.chunks_exact(self.dim).enumerate() {
            let norm = r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::LengthMismatch {
                    left: labels.len(),
                    right: n,
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l < 0) {
                return Err(Error::LabelOutOfRange {
                    label: i64::from(bad),
                    num_classes: 0,
                });
            }
        }
        if let Some(groups) = &self.view_groups {
            if groups.len() != n {
                return Err(Error::LengthMismatch {
                    left: groups.len(),
                    right: n,
                });
            }
            if let Some(row) = groups.windows(2).position(|w| w[1] < w[0]) {
                return Err(Error::UnorderedViewGroups { row: row + 1 });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn view_groups(&self) -> Option<&[u32]> {
        self.view_groups.as_deref()
    }

    /// Label of row `i` as a class index, if labels are present.
    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i] as usize)
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.features.iter().map(|&x| T::from_f32_lossless(x)).collect(),
        )
    }

    /// Contiguous row ranges sharing a view group; one row per sample when absent.
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.len();
        match &self.view_groups {
            None => (0..n).map(|i| i..i + 1).collect(),
            Some(g) => {
                let mut out = Vec::new();
                let mut start = 0;
                for i in 1..=n {
                    if i == n || g[i] != g[start] {
                        out.push(start..i);
                        start = i;
                    }
                }
                out
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut flags = 0;
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        if self.view_groups.is_some() {
            flags |= FLAG_VIEW_GROUPS;
        }
        let mut out = Vec::with_capacity(EMBF_HEADER_LEN + 4 * n * (self.dim + 2));
        out.extend_from_slice(&EMBF_MAGIC);
        out.extend_from_slice(&EMBF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&flags.to_le_bytes());
        for x in &self.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        if let Some(groups) = &self.view_groups {
            for g in groups {
                out.extend_from_slice(&g.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(EMBF_MAGIC)?;
        r.version(EMBF_VERSION)?;
        let dim = r.u32()? as usize;
        let n = usize::try_from(r.u64()?)
            .map_err(|_| Error::Truncated("row count does not fit in memory".into()))?;
        let flags = r.u32()?;
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Truncated("N*D overflows".into()))?;
        let features = r.f32s(total, "features")?;
        let labels = if flags & FLAG_LABELS != 0 {
            Some(r.i32s(n, "labels")?)
        } else {
            None
        };
        let view_groups = if flags & FLAG_VIEW_GROUPS != 0 {
            Some(r.u32s(n, "view groups")?)
        } else {
            None
        };
        Self::new(dim, features, labels, view_groups)
    }
}

/// Writes `set` as EMBF. The set's invariants are re-checked before anything is written.
pub fn save_feature_set(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    set.check()?;
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSet::from_bytes(&bytes)
}

/// C unit-norm class rows used as the zero-shot classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TextClassifier<T> {
    rows: Matrix<T>,
}

impl<T: Scalar> TextClassifier<T> {
    pub fn new(rows: Matrix<T>) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::Config("text classifier needs at least one class".into()));
        }
        for (row, r) in rows.iter_rows().enumerate() {
            let norm = crate::linalg::norm(r).as_f64();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows))
    }

    pub fn from_feature_set(set: &FeatureSet) -> Result<Self> {
        Self::new(set.to_matrix())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_feature_set(&load_feature_set(path)?)
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, class: usize) -> &[T] {
        self.rows.row(class)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn to_feature_set(&self) -> Result<FeatureSet> {
        FeatureSet::new(
            self.dim(),
            self.rows.as_slice().iter().map(|x| x.as_f32()).collect(),
            None,
            None,
        )
    }

    pub fn cast<U: Scalar>(&self) -> TextClassifier<U> {
        TextClassifier {
            rows: self.rows.cast(),
        }
    }
}

/// Checks that a feature set can be classified by `text`.
pub fn validate_against<T: Scalar>(set: &FeatureSet, text: &TextClassifier<T>) -> Result<()> {
    if set.dim() != text.dim() {
        return Err(Error::DimMismatch {
            expected: text.dim(),
            found: set.dim(),
        });
    }
    if let Some(labels) = set.labels() {
        let c = text.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l < 0 || l as usize >= c) {
            return Err(Error::LabelOutOfRange {
                label: i64::from(bad),
                num_classes: c,
            });
        }
    }
    Ok(())
}

/// Bounds-checked little-endian cursor shared by the binary containers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        let avail = self.bytes.len().min(4);
        found[..avail].copy_from_slice(&self.bytes[..avail]);
        if avail < 4 || found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::VersionMismatch { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, "header")?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8, "header")?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i32s(&mut self, n: usize, what: &str) -> Result<Vec<i32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Truncated(what.into()))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u8s(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Truncated(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
