//! Attention readout: turns a query feature plus a per-class memory bank into
//! a sample-adaptive classifier row.
//!
//! For class `y` with bank rows `m_i`, the row is
//!
//! ```text
//! row_y = w_o( sum_i phi(<w_q(v), w_k(m_i)>) * w_v(m_i) )
//! phi(x) = exp(-beta * (1 - x))
//! w(x)   = L2(x + W x + b)
//! ```
//!
//! The weighted sum is not divided by the total weight; the only
//! normalization is the L2 inside `w_o`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::embf::Reader;
use crate::linalg::{axpy, dot, l2_normalized, softmax, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 5.5;
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// How similarities are turned into attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `exp(-beta (1 - s))`, independent per slot.
    #[default]
    SharpenedExp,
    /// `softmax(beta * s)` across the bank.
    SoftMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadoutConfig {
    pub beta: f64,
    pub weighting: Weighting,
    pub logit_scale: f64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            weighting: Weighting::SharpenedExp,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl ReadoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// Sharpening function `exp(-beta (1 - x))`.
#[inline]
pub fn phi<T: Scalar>(x: T, beta: T) -> T {
    (-(beta * (T::one() - x))).exp()
}

/// Attention weights for a vector of similarities.
pub fn attention_weights<T: Scalar>(sims: &[T], cfg: &ReadoutConfig) -> Vec<T> {
    let beta = T::lit(cfg.beta);
    match cfg.weighting {
        Weighting::SharpenedExp => sims.iter().map(|&s| phi(s, beta)).collect(),
        Weighting::SoftMax => {
            let scaled: Vec<T> = sims.iter().map(|&s| beta * s).collect();
            softmax(&scaled)
        }
    }
}

/// One residual map `x -> L2(x + W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Projection<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, dim),
            bias: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Pre-normalization vector `x + W x + b`.
    pub fn residual(&self, x: &[T]) -> Vec<T> {
        let mut u = self.weight.matvec(x);
        for ((ui, &xi), &bi) in u.iter_mut().zip(x).zip(&self.bias) {
            *ui = xi + *ui + bi;
        }
        u
    }

    /// Returns the unit output together with the pre-normalization norm.
    pub fn apply_with_norm(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        l2_normalized(&self.residual(x)).ok_or(Error::DegenerateProjection)
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        self.apply_with_norm(x).map(|(y, _)| y)
    }

    pub fn is_zero(&self) -> bool {
        self.weight.is_all_zero() && self.bias.iter().all(|b| b.is_zero())
    }

    fn is_finite(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Which of the four maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Query, Role::Key, Role::Value, Role::Output];
}

/// The query, key, value and output maps. In identity mode every map is the
/// identity on its (unit-norm) input and the parameters are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet<T> {
    pub query: Projection<T>,
    pub key: Projection<T>,
    pub value: Projection<T>,
    pub output: Projection<T>,
    identity_mode: bool,
}

impl<T: Scalar> ProjectionSet<T> {
    /// Identity maps for the training-free modes.
    pub fn identity(dim: usize) -> Self {
        Self {
            identity_mode: true,
            ..Self::zeros(dim)
        }
    }

    /// Zero-initialized trainable maps.
    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Projection::zeros(dim),
            key: Projection::zeros(dim),
            value: Projection::zeros(dim),
            output: Projection::zeros(dim),
            identity_mode: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn identity_mode(&self) -> bool {
        self.identity_mode
    }

    pub fn get(&self, role: Role) -> &Projection<T> {
        match role {
            Role::Query => &self.query,
            Role::Key => &self.key,
            Role::Value => &self.value,
            Role::Output => &self.output,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut Projection<T> {
        match role {
            Role::Query => &mut self.query,
            Role::Key => &mut self.key,
            Role::Value => &mut self.value,
            Role::Output => &mut self.output,
        }
    }

    pub fn project(&self, role: Role, x: &[T]) -> Result<Vec<T>> {
        if self.identity_mode {
            return Ok(x.to_vec());
        }
        self.get(role).apply(x)
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionSet<U> {
        let c = |p: &Projection<T>| Projection {
            weight: p.weight.cast(),
            bias: p.bias.iter().map(|&x| U::lit(x.as_f64())).collect(),
        };
        ProjectionSet {
            query: c(&self.query),
            key: c(&self.key),
            value: c(&self.value),
            output: c(&self.output),
            identity_mode: self.identity_mode,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(16 + 16 * d * (d + 1));
        out.extend_from_slice(&PROJ_MAGIC);
        out.extend_from_slice(&PROJ_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&u32::from(self.identity_mode).to_le_bytes());
        for role in Role::ALL {
            let p = self.get(role);
            for x in p.weight.as_slice().iter().chain(&p.bias) {
                out.extend_from_slice(&x.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PROJ_MAGIC)?;
        r.version(PROJ_VERSION)?;
        let d = r.u32()? as usize;
        let identity_mode = r.u32()? & 1 != 0;
        let mut set = Self::zeros(d);
        set.identity_mode = identity_mode;
        for role in Role::ALL {
            let w = r.f32s(d * d, "projection weight")?;
            let b = r.f32s(d, "projection bias")?;
            let p = set.get_mut(role);
            p.weight = Matrix::from_vec(d, d, crate::scalar::cast_slice(&w));
            p.bias = crate::scalar::cast_slice(&b);
            if !p.is_finite() {
                return Err(Error::NumericalFailure("non-finite projection parameter".into()));
            }
        }
        r.finish()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Container layout: "DMNP", u32 version, u32 D, u32 flags (bit0 identity
/// mode), then for query, key, value, output: D*D f32 weights row-major and
/// D f32 biases.
pub const PROJ_MAGIC: [u8; 4] = *b"DMNP";
pub const PROJ_VERSION: u32 = 1;

/// Bank rows after the key and value maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBank<T> {
    pub keys: Vec<Vec<T>>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> ProjectedBank<T> {
    pub fn new<B: AsRef<[T]>>(bank: &[B], proj: &ProjectionSet<T>) -> Result<Self> {
        let mut keys = Vec::with_capacity(bank.len());
        let mut values = Vec::with_capacity(bank.len());
        for m in bank {
            keys.push(proj.project(Role::Key, m.as_ref())?);
            values.push(proj.project(Role::Value, m.as_ref())?);
        }
        Ok(Self { keys, values })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, key: Vec<T>, value: Vec<T>) {
        self.keys.push(key);
        self.values.push(value);
    }

    pub fn key_refs(&self) -> Vec<&[T]> {
        self.keys.iter().map(Vec::as_slice).collect()
    }

    pub fn value_refs(&self) -> Vec<&[T]> {
        self.values.iter().map(Vec::as_slice).collect()
    }
}

/// Readout given the projected query and already projected keys and values.
pub fn readout_projected<T: Scalar>(
    query: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<Vec<T>> {
    if keys.is_empty() {
        return Err(Error::EmptyBank(None));
    }
    debug_assert_eq!(keys.len(), values.len());
    let sims: Vec<T> = keys.iter().map(|k| dot(query, k)).collect();
    let weights = attention_weights(&sims, cfg);
    let mut acc = vec![T::zero(); query.len()];
    for (w, v) in weights.iter().zip(values) {
        axpy(&mut acc, *w, v);
    }
    // The weighted sum is not unit-norm, so identity mode still needs the L2 step.
    if proj.identity_mode() {
        l2_normalized(&acc).map(|(v, _)| v).ok_or(Error::DegenerateProjection)
    } else {
        proj.output.apply(&acc)
    }
}

fn readout_bank<T: Scalar, B: AsRef<[T]>>(
    projected_query: &[T],
    bank: &[B],
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<Vec<T>> {
    if proj.identity_mode() {
        let refs: Vec<&[T]> = bank.iter().map(AsRef::as_ref).collect();
        readout_projected(projected_query, &refs, &refs, proj, cfg)
    } else {
        let pb = ProjectedBank::new(bank, proj)?;
        readout_projected(projected_query, &pb.key_refs(), &pb.value_refs(), proj, cfg)
    }
}

/// Classifier row for one class bank.
pub fn readout_class<T: Scalar, B: AsRef<[T]>>(
    query: &[T],
    bank: &[B],
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<Vec<T>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank(None));
    }
    let q = proj.project(Role::Query, query)?;
    readout_bank(&q, bank, proj, cfg)
}

/// C x D classifier with unit-norm rows, built per test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveClassifier<T>(pub Matrix<T>);

impl<T: Scalar> AdaptiveClassifier<T> {
    pub fn rows(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }
}

/// Reads one row per class bank.
pub fn readout_all<T: Scalar, B: AsRef<[T]>>(
    query: &[T],
    banks: &[Vec<B>],
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<AdaptiveClassifier<T>> {
    let q = proj.project(Role::Query, query)?;
    let mut rows = Vec::with_capacity(banks.len());
    for (class, bank) in banks.iter().enumerate() {
        if bank.is_empty() {
            return Err(Error::EmptyBank(Some(class)));
        }
        rows.push(readout_bank(&q, bank, proj, cfg)?);
    }
    Ok(AdaptiveClassifier(Matrix::from_rows(&rows)))
}

/// Same as [`readout_all`] over banks that were projected ahead of time.
pub fn readout_all_projected<T: Scalar>(
    query: &[T],
    banks: &[ProjectedBank<T>],
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<AdaptiveClassifier<T>> {
    let q = proj.project(Role::Query, query)?;
    let mut rows = Vec::with_capacity(banks.len());
    for (class, bank) in banks.iter().enumerate() {
        if bank.is_empty() {
            return Err(Error::EmptyBank(Some(class)));
        }
        rows.push(readout_projected(&q, &bank.key_refs(), &bank.value_refs(), proj, cfg)?);
    }
    Ok(AdaptiveClassifier(Matrix::from_rows(&rows)))
}

/// Softmax over scaled cosine logits `scale * <feature, row>`.
pub fn m2p<T: Scalar>(feature: &[T], classifier: &Matrix<T>, logit_scale: f64) -> Vec<T> {
    let scale = T::lit(logit_scale);
    let logits: Vec<T> = classifier.iter_rows().map(|r| scale * dot(feature, r)).collect();
    softmax(&logits)
}
