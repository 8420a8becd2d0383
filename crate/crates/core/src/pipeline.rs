//! The online engine. For every test sample:
//!
//! 1. pick the most confident views and aggregate them,
//! 2. classify the aggregate with the text classifier,
//! 3. write it to the dynamic memory under its pseudo-label,
//! 4. read out adaptive classifiers from the dynamic (and static) memory,
//! 5. fuse the three predictions.
//!
//! Results depend on stream order, so samples are processed strictly in sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FeatureSet, TextClassifier};
use crate::linalg::{argmax, l2_normalized};
use crate::memory::{DynamicMemory, StaticMemory, WriteOutcome};
use crate::readout::{
    m2p, readout_all, readout_all_projected, ProjectedBank, ProjectionSet, ReadoutConfig, Role,
};
use crate::scalar::{cast_slice, Scalar};

pub const DEFAULT_MEMORY_LENGTH: usize = 50;
pub const DEFAULT_RHO: f64 = 0.1;

/// The three run modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Dynamic memory only, identity projections.
    #[serde(rename = "zs")]
    ZeroShot,
    /// Dynamic and static memory, identity projections.
    #[serde(rename = "tf")]
    TrainingFree,
    /// Dynamic and static memory, trained projections.
    #[serde(rename = "fs")]
    FewShot,
}

impl Mode {
    pub fn uses_static(self) -> bool {
        !matches!(self, Mode::ZeroShot)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::ZeroShot => "DMN-ZS",
            Mode::TrainingFree => "DMN-TF",
            Mode::FewShot => "DMN",
        }
    }
}

/// Weights for text, dynamic-memory and static-memory predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 0.3,
        }
    }
}

impl FusionWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = Self {
            alpha1,
            alpha2,
            alpha3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Config(format!(
                "fusion weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|&a| a == 0.0) {
            return Err(Error::Config("fusion weights are all zero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha1: self.alpha1 * k,
            alpha2: self.alpha2 * k,
            alpha3: self.alpha3 * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub readout: ReadoutConfig,
    pub weights: FusionWeights,
    /// Fraction of views kept by confidence selection.
    pub rho: f64,
    /// Dynamic memory slots per class.
    pub memory_length: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            readout: ReadoutConfig::default(),
            weights: FusionWeights::default(),
            rho: DEFAULT_RHO,
            memory_length: DEFAULT_MEMORY_LENGTH,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.readout.validate()?;
        self.weights.validate()?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.memory_length == 0 {
            return Err(Error::Config("memory length must be positive".into()));
        }
        Ok(())
    }
}

/// All augmented views of one test image; the first view is the unaugmented one.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSample<T> {
    pub views: Vec<Vec<T>>,
    pub group: u32,
    pub label: Option<usize>,
}

/// Splits a feature set into samples by view group. The label of a sample is
/// the label of its first view.
pub fn samples_from_feature_set<T: Scalar>(set: &FeatureSet) -> Vec<TestSample<T>> {
    set.groups()
        .into_iter()
        .map(|range| TestSample {
            group: set.view_groups().map_or(range.start as u32, |g| g[range.start]),
            label: set.label(range.start),
            views: range.map(|i| cast_slice(set.row(i))).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub p_text: Vec<T>,
    pub p_dynamic: Option<Vec<T>>,
    pub p_static: Option<Vec<T>>,
    /// Weighted sum of the component predictions; not renormalized.
    pub p_fused: Vec<T>,
    pub label: usize,
    /// Argmax of `p_text`, the class the sample was written under.
    pub pseudo_label: usize,
    /// Entropy of `p_text` in nats.
    pub entropy: T,
    pub write: WriteOutcome,
}

/// Zero-shot prediction with the text classifier.
pub fn text_predict<T: Scalar>(feature: &[T], text: &TextClassifier<T>, cfg: &ReadoutConfig) -> Vec<T> {
    m2p(feature, text.matrix(), cfg.logit_scale)
}

fn distribution_tol<T: Scalar>(len: usize) -> f64 {
    1e-6f64.max(4.0 * len as f64 * T::epsilon().as_f64())
}

fn check_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::MalformedDistribution("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || x.as_f64() < 0.0) {
        return Err(Error::MalformedDistribution(format!("entry {x}")));
    }
    let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > distribution_tol::<T>(p.len()) {
        return Err(Error::MalformedDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    check_distribution(p)?;
    Ok(-p
        .iter()
        .filter(|x| **x > T::zero())
        .map(|&x| x * x.ln())
        .sum::<T>())
}

/// Argmax class, ties to the lowest index.
pub fn pseudo_label<T: Scalar>(p: &[T]) -> usize {
    argmax(p)
}

/// Number of views kept for a fraction `rho` of `views` views.
pub fn kept_view_count(rho: f64, views: usize) -> usize {
    // Guard against products like 0.3 * 10 = 3.0000000000000004.
    let k = (rho * views as f64 - 1e-9).ceil() as usize;
    k.clamp(1, views)
}

/// Keeps the lowest-entropy views and aggregates them. Returns the
/// normalized mean feature and the mean text prediction of the kept views.
pub fn confidence_select<T: Scalar, V: AsRef<[T]>>(
    views: &[V],
    text: &TextClassifier<T>,
    cfg: &ReadoutConfig,
    rho: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    if views.is_empty() {
        return Err(Error::MissingInput("test sample has no views".into()));
    }
    let preds: Vec<Vec<T>> = views.iter().map(|v| text_predict(v.as_ref(), text, cfg)).collect();
    if views.len() == 1 {
        return Ok((views[0].as_ref().to_vec(), preds.into_iter().next().unwrap()));
    }
    let entropies = preds.iter().map(|p| entropy(p)).collect::<Result<Vec<T>>>()?;
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| entropies[a].partial_cmp(&entropies[b]).unwrap().then(a.cmp(&b)));
    order.truncate(kept_view_count(rho, views.len()));
    order.sort_unstable();

    let dim = views[0].as_ref().len();
    let mut feature = vec![T::zero(); dim];
    let mut probs = vec![T::zero(); text.num_classes()];
    for &i in &order {
        crate::linalg::axpy(&mut feature, T::one(), views[i].as_ref());
        crate::linalg::axpy(&mut probs, T::one(), &preds[i]);
    }
    let (feature, _) = l2_normalized(&feature).ok_or(Error::DegenerateAggregate)?;
    let total: T = probs.iter().copied().sum();
    let probs = probs.into_iter().map(|p| p / total).collect();
    Ok((feature, probs))
}

/// Bank for class `y`: its occupied dynamic slots followed by the text row.
pub fn dynamic_bank<'a, T: Scalar>(
    mem: &'a DynamicMemory<T>,
    text: &'a TextClassifier<T>,
    class: usize,
) -> Result<Vec<&'a [T]>> {
    let mut bank = mem.occupied_features(class)?;
    bank.push(text.row(class));
    Ok(bank)
}

/// Prediction from the dynamic memory extended with the text classifier.
pub fn predict_dynamic<T: Scalar>(
    feature: &[T],
    mem: &DynamicMemory<T>,
    text: &TextClassifier<T>,
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<Vec<T>> {
    let banks = (0..text.num_classes())
        .map(|c| dynamic_bank(mem, text, c))
        .collect::<Result<Vec<_>>>()?;
    let classifier = readout_all(feature, &banks, proj, cfg)?;
    Ok(m2p(feature, classifier.rows(), cfg.logit_scale))
}

/// Prediction from the static shot memory alone.
pub fn predict_static<T: Scalar>(
    feature: &[T],
    memory: &StaticMemory<T>,
    proj: &ProjectionSet<T>,
    cfg: &ReadoutConfig,
) -> Result<Vec<T>> {
    let banks: Vec<Vec<&[T]>> = (0..memory.num_classes())
        .map(|c| memory.class_bank(c).iter().map(Vec::as_slice).collect())
        .collect();
    let classifier = readout_all(feature, &banks, proj, cfg)?;
    Ok(m2p(feature, classifier.rows(), cfg.logit_scale))
}

/// Weighted sum of the available predictions and its argmax. Absent sources
/// contribute nothing whatever their weight.
pub fn fuse<T: Scalar>(
    p_text: &[T],
    p_dynamic: Option<&[T]>,
    p_static: Option<&[T]>,
    w: &FusionWeights,
) -> Result<(Vec<T>, usize)> {
    let sources = [
        (Some(p_text), w.alpha1),
        (p_dynamic, w.alpha2),
        (p_static, w.alpha3),
    ];
    let mut fused = vec![T::zero(); p_text.len()];
    let mut active = false;
    for (p, alpha) in sources {
        let Some(p) = p else { continue };
        if p.len() != fused.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: fused.len(),
            });
        }
        if alpha > 0.0 {
            active = true;
        }
        crate::linalg::axpy(&mut fused, T::lit(alpha), p);
    }
    if !active {
        return Err(Error::NoActiveSource);
    }
    let label = argmax(&fused);
    Ok((fused, label))
}

/// Mutable state of one stream run.
#[derive(Debug, Clone)]
pub struct Engine<T> {
    mode: Mode,
    cfg: PipelineConfig,
    text: TextClassifier<T>,
    memory: DynamicMemory<T>,
    static_memory: Option<StaticMemory<T>>,
    proj: ProjectionSet<T>,
    // Projected keys/values, only kept when the projections are not the identity.
    // Dynamic banks mirror the occupied slot prefix followed by the text row.
    dynamic_cache: Option<Vec<ProjectedBank<T>>>,
    static_cache: Option<Vec<ProjectedBank<T>>>,
}

impl<T: Scalar> Engine<T> {
    /// Checks the inputs against the mode: zero-shot takes no shots and no
    /// projections, training-free takes shots only, few-shot takes both.
    pub fn new(
        mode: Mode,
        text: TextClassifier<T>,
        static_memory: Option<StaticMemory<T>>,
        projections: Option<ProjectionSet<T>>,
        cfg: PipelineConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let dim = text.dim();
        let c = text.num_classes();
        match (mode, &static_memory, &projections) {
            (Mode::ZeroShot, None, None) | (Mode::TrainingFree, Some(_), None) => {}
            (Mode::FewShot, Some(_), Some(p)) if !p.identity_mode() => {}
            (Mode::ZeroShot, ..) => {
                return Err(Error::Config(
                    "zero-shot mode takes neither shots nor projections".into(),
                ))
            }
            (Mode::TrainingFree, None, _) | (Mode::FewShot, None, _) => {
                return Err(Error::MissingInput(format!("{} needs shot features", mode.name())))
            }
            (Mode::TrainingFree, Some(_), Some(_)) => {
                return Err(Error::Config("training-free mode uses identity projections".into()))
            }
            (Mode::FewShot, Some(_), _) => {
                return Err(Error::MissingInput("few-shot mode needs trained projections".into()))
            }
        }
        if let Some(s) = &static_memory {
            if s.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: s.dim(),
                });
            }
            if s.num_classes() != c {
                return Err(Error::LengthMismatch {
                    left: s.num_classes(),
                    right: c,
                });
            }
        }
        let proj = projections.unwrap_or_else(|| ProjectionSet::identity(dim));
        if proj.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: proj.dim(),
            });
        }
        let memory = DynamicMemory::new(c, cfg.memory_length, dim)?;
        let mut engine = Self {
            mode,
            cfg,
            text,
            memory,
            static_memory,
            proj,
            dynamic_cache: None,
            static_cache: None,
        };
        engine.build_caches()?;
        Ok(engine)
    }

    fn build_caches(&mut self) -> Result<()> {
        if self.proj.identity_mode() {
            return Ok(());
        }
        let c = self.text.num_classes();
        let dynamic = (0..c)
            .map(|y| ProjectedBank::new(&dynamic_bank(&self.memory, &self.text, y)?, &self.proj))
            .collect::<Result<Vec<_>>>()?;
        self.dynamic_cache = Some(dynamic);
        if let Some(s) = &self.static_memory {
            let banks = (0..c)
                .map(|y| ProjectedBank::new(s.class_bank(y), &self.proj))
                .collect::<Result<Vec<_>>>()?;
            self.static_cache = Some(banks);
        }
        Ok(())
    }

    /// Clears the dynamic memory, as if no sample had been seen.
    pub fn reset(&mut self) -> Result<()> {
        self.memory = DynamicMemory::new(self.text.num_classes(), self.cfg.memory_length, self.text.dim())?;
        self.build_caches()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn set_weights(&mut self, weights: FusionWeights) -> Result<()> {
        weights.validate()?;
        self.cfg.weights = weights;
        Ok(())
    }

    pub fn memory(&self) -> &DynamicMemory<T> {
        &self.memory
    }

    pub fn static_memory(&self) -> Option<&StaticMemory<T>> {
        self.static_memory.as_ref()
    }

    pub fn text(&self) -> &TextClassifier<T> {
        &self.text
    }

    pub fn projections(&self) -> &ProjectionSet<T> {
        &self.proj
    }

    fn write(&mut self, class: usize, feature: &[T], entropy: T) -> Result<WriteOutcome> {
        let outcome = self.memory.write(class, feature, entropy)?;
        if let (Some(cache), Some(slot)) = (self.dynamic_cache.as_mut(), outcome.slot()) {
            let key = self.proj.project(Role::Key, feature)?;
            let value = self.proj.project(Role::Value, feature)?;
            let bank = &mut cache[class];
            match outcome {
                WriteOutcome::Inserted(i) => {
                    // Slots fill in order, so the new slot sits just before the text row.
                    debug_assert_eq!(i, bank.len() - 1);
                    bank.keys.insert(i, key);
                    bank.values.insert(i, value);
                }
                _ => {
                    bank.keys[slot] = key;
                    bank.values[slot] = value;
                }
            }
        }
        Ok(outcome)
    }

    fn read_dynamic(&self, feature: &[T]) -> Result<Vec<T>> {
        match &self.dynamic_cache {
            None => predict_dynamic(feature, &self.memory, &self.text, &self.proj, &self.cfg.readout),
            Some(banks) => {
                let classifier = readout_all_projected(feature, banks, &self.proj, &self.cfg.readout)?;
                Ok(m2p(feature, classifier.rows(), self.cfg.readout.logit_scale))
            }
        }
    }

    fn read_static(&self, feature: &[T]) -> Result<Option<Vec<T>>> {
        let Some(memory) = &self.static_memory else {
            return Ok(None);
        };
        match &self.static_cache {
            None => predict_static(feature, memory, &self.proj, &self.cfg.readout).map(Some),
            Some(banks) => {
                let classifier = readout_all_projected(feature, banks, &self.proj, &self.cfg.readout)?;
                Ok(Some(m2p(feature, classifier.rows(), self.cfg.readout.logit_scale)))
            }
        }
    }

    /// Processes one test sample. The sample is written to memory before its
    /// own dynamic readout.
    pub fn process<V: AsRef<[T]>>(&mut self, views: &[V]) -> Result<Prediction<T>> {
        let readout = self.cfg.readout;
        let (feature, p_text) = confidence_select(views, &self.text, &readout, self.cfg.rho)?;
        let pseudo = pseudo_label(&p_text);
        let h = entropy(&p_text)?;
        let write = self.write(pseudo, &feature, h)?;
        let p_dynamic = self.read_dynamic(&feature)?;
        let p_static = self.read_static(&feature)?;
        let (p_fused, label) = fuse(&p_text, Some(&p_dynamic), p_static.as_deref(), &self.cfg.weights)?;
        Ok(Prediction {
            p_text,
            p_dynamic: Some(p_dynamic),
            p_static,
            p_fused,
            label,
            pseudo_label: pseudo,
            entropy: h,
            write,
        })
    }

    pub fn process_sample(&mut self, sample: &TestSample<T>) -> Result<Prediction<T>> {
        self.process(&sample.views)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult<T> {
    pub predictions: Vec<Prediction<T>>,
    /// Top-1 accuracy, when every sample carries a label.
    pub accuracy: Option<f64>,
}

impl<T> StreamResult<T> {
    pub fn labels(&self) -> Vec<usize> {
        self.predictions.iter().map(|p| p.label).collect()
    }
}

/// Runs the engine over `samples` in order.
pub fn run_stream<T: Scalar>(engine: &mut Engine<T>, samples: &[TestSample<T>]) -> Result<StreamResult<T>> {
    let predictions = samples
        .iter()
        .map(|s| engine.process_sample(s))
        .collect::<Result<Vec<_>>>()?;
    let truth: Option<Vec<usize>> = samples.iter().map(|s| s.label).collect();
    let accuracy = match truth {
        Some(t) if !t.is_empty() => {
            let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
            Some(crate::eval::evaluate_accuracy(&labels, &t)?)
        }
        _ => None,
    };
    Ok(StreamResult {
        predictions,
        accuracy,
    })
}

/// Accuracy of the plain text classifier on the first view of every sample.
pub fn text_only_accuracy<T: Scalar>(
    samples: &[TestSample<T>],
    text: &TextClassifier<T>,
    cfg: &ReadoutConfig,
) -> Result<f64> {
    let mut pred = Vec::with_capacity(samples.len());
    let mut truth = Vec::with_capacity(samples.len());
    for s in samples {
        truth.push(s.label.ok_or(Error::Unlabeled)?);
        pred.push(argmax(&text_predict(&s.views[0], text, cfg)));
    }
    crate::eval::evaluate_accuracy(&pred, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = crate::linalg::norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn text3() -> TextClassifier<f64> {
        TextClassifier::from_rows(&[e(0, 3), e(1, 3), e(2, 3)]).unwrap()
    }

    #[test]
    fn text_predict_cases() {
        let cfg = ReadoutConfig::default();
        let p = text_predict(&e(1, 3), &text3(), &cfg);
        assert_eq!(pseudo_label(&p), 1);
        let same = TextClassifier::from_rows(&[e(0, 3), e(0, 3)]).unwrap();
        assert!(text_predict(&e(1, 3), &same, &cfg).iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let two = TextClassifier::from_rows(&[e(0, 3), e(1, 3)]).unwrap();
        let p = text_predict(&e(0, 3), &two, &ReadoutConfig { logit_scale: 1.0, ..cfg });
        assert!((p[0] - 0.731_06).abs() < 1e-5 && (p[1] - 0.268_94).abs() < 1e-5);
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[0.5f64, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
        let uniform = vec![0.1f64; 10];
        assert!((entropy(&uniform).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert!(matches!(entropy(&[0.5f64, 0.6]), Err(Error::MalformedDistribution(_))));
        assert!(matches!(entropy(&[-0.5f64, 1.5]), Err(Error::MalformedDistribution(_))));
    }

    #[test]
    fn pseudo_label_cases() {
        assert_eq!(pseudo_label(&[0.1f64, 0.7, 0.2]), 1);
        assert_eq!(pseudo_label(&[0.5f64, 0.5]), 0);
        assert_eq!(pseudo_label(&[0.0f64, 0.0, 0.0, 0.0, 1.0]), 4);
    }

    #[test]
    fn kept_view_counts() {
        assert_eq!(kept_view_count(0.34, 3), 2);
        assert_eq!(kept_view_count(0.1, 64), 7);
        assert_eq!(kept_view_count(0.3, 10), 3);
        assert_eq!(kept_view_count(0.1, 10), 1);
        assert_eq!(kept_view_count(0.01, 3), 1);
        assert_eq!(kept_view_count(1.0, 5), 5);
    }

    #[test]
    fn confidence_select_single_view() {
        let cfg = ReadoutConfig::default();
        let v = unit(&[0.3, 0.4, 0.1]);
        let (f, p) = confidence_select(std::slice::from_ref(&v), &text3(), &cfg, 0.1).unwrap();
        assert_eq!(f, v);
        assert_eq!(p, text_predict(&v, &text3(), &cfg));
    }

    #[test]
    fn confidence_select_keeps_lowest_entropy() {
        // Two classes, scale 1: entropy falls as the view moves toward a text row.
        let text = TextClassifier::from_rows(&[e(0, 2), e(1, 2)]).unwrap();
        let cfg = ReadoutConfig {
            logit_scale: 1.0,
            ..Default::default()
        };
        let v0 = e(0, 2);
        let v1 = unit(&[1.0, 1.0]);
        let v2 = unit(&[1.0, 0.3]);
        let views = [v0.clone(), v1, v2.clone()];
        let h: Vec<f64> = views
            .iter()
            .map(|v| entropy(&text_predict(v, &text, &cfg)).unwrap())
            .collect();
        assert!(h[0] < h[2] && h[2] < h[1]);
        let (f, p) = confidence_select(&views, &text, &cfg, 0.34).unwrap();
        let want_f = unit(&[v0[0] + v2[0], v0[1] + v2[1]]);
        assert!(f.iter().zip(&want_f).all(|(a, b)| (a - b).abs() < 1e-15));
        let p0 = text_predict(&v0, &text, &cfg);
        let p2 = text_predict(&v2, &text, &cfg);
        assert!((p[0] - (p0[0] + p2[0]) / 2.0).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_select_identical_views() {
        let cfg = ReadoutConfig::default();
        let v = unit(&[0.2, 0.9, 0.1]);
        let (f, p) = confidence_select(&[v.clone(), v.clone(), v.clone()], &text3(), &cfg, 1.0).unwrap();
        assert!(f.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
        let want = text_predict(&v, &text3(), &cfg);
        assert!(p.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn confidence_select_degenerate() {
        let cfg = ReadoutConfig::default();
        let err = confidence_select(&[e(0, 3), e(0, 3).iter().map(|x| -x).collect()], &text3(), &cfg, 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateAggregate));
    }

    #[test]
    fn dynamic_bank_shapes() {
        let text = text3();
        let mut mem = DynamicMemory::new(3, 2, 3).unwrap();
        assert_eq!(dynamic_bank(&mem, &text, 1).unwrap(), vec![text.row(1)]);
        let v = unit(&[1.0, 1.0, 0.0]);
        mem.write(1, &v, 0.2).unwrap();
        assert_eq!(dynamic_bank(&mem, &text, 1).unwrap(), vec![v.as_slice(), text.row(1)]);
        mem.write(1, &v, 0.1).unwrap();
        assert_eq!(dynamic_bank(&mem, &text, 1).unwrap().len(), 3);
    }

    #[test]
    fn empty_memory_dynamic_equals_text() {
        let text = text3();
        let cfg = ReadoutConfig::default();
        let mem = DynamicMemory::new(3, 4, 3).unwrap();
        let v = unit(&[0.5, 0.2, 0.1]);
        let pd = predict_dynamic(&v, &mem, &text, &ProjectionSet::identity(3), &cfg).unwrap();
        let pt = text_predict(&v, &text, &cfg);
        assert!(pd.iter().zip(&pt).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn static_fixed_point_and_symmetry() {
        let cfg = ReadoutConfig::default();
        let shot0 = unit(&[1.0, 0.2, 0.0]);
        let shot1 = unit(&[0.0, 1.0, 0.3]);
        let memory = StaticMemory::build(vec![vec![shot0.clone()], vec![shot1.clone()]]).unwrap();
        let banks: Vec<Vec<&[f64]>> = vec![vec![&shot0], vec![&shot1]];
        let c = readout_all(&shot0, &banks, &ProjectionSet::identity(3), &cfg).unwrap();
        assert!(c.rows().row(0).iter().zip(&shot0).all(|(a, b)| (a - b).abs() < 1e-15));
        let _ = predict_static(&shot0, &memory, &ProjectionSet::identity(3), &cfg).unwrap();

        let twin = StaticMemory::build(vec![vec![shot1.clone()], vec![shot1.clone()]]).unwrap();
        let p = predict_static(&shot0, &twin, &ProjectionSet::identity(3), &cfg).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fuse_cases() {
        let w = FusionWeights::new(1.0, 0.0, 0.0).unwrap();
        let (f, l) = fuse(&[0.3f64, 0.7], Some(&[0.9, 0.1]), None, &w).unwrap();
        assert_eq!(f, vec![0.3, 0.7]);
        assert_eq!(l, 1);

        let pt = [0.6f64, 0.4];
        let pd = [0.2f64, 0.8];
        let w = FusionWeights::new(1.0, 1.0, 0.0).unwrap();
        let (f, l) = fuse(&pt, Some(&pd), None, &w).unwrap();
        assert!((f[0] - 0.8).abs() < 1e-15 && (f[1] - 1.2).abs() < 1e-15);
        assert_eq!(l, 1);
        let (_, l10) = fuse(&pt, Some(&pd), None, &w.scaled(10.0)).unwrap();
        assert_eq!(l10, l);

        let w = FusionWeights::new(0.0, 0.0, 1.0).unwrap();
        assert!(matches!(fuse(&pt, Some(&pd), None, &w), Err(Error::NoActiveSource)));
        // Absent static source is ignored even with a large weight.
        let w = FusionWeights::new(1.0, 1.0, 100.0).unwrap();
        assert_eq!(fuse(&pt, Some(&pd), None, &w).unwrap().1, 1);
    }

    #[test]
    fn fusion_weights_validation() {
        assert!(FusionWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(FusionWeights::new(-1.0, 1.0, 0.0).is_err());
        assert!(FusionWeights::new(f64::NAN, 1.0, 0.0).is_err());
    }

    #[test]
    fn first_sample_bank_has_two_entries() {
        let text = text3();
        let mut engine = Engine::new(Mode::ZeroShot, text, None, None, PipelineConfig::default()).unwrap();
        let v = unit(&[0.9, 0.3, 0.1]);
        let pred = engine.process(std::slice::from_ref(&v)).unwrap();
        assert_eq!(pred.write, WriteOutcome::Inserted(0));
        assert!(pred.p_static.is_none());
        let bank = dynamic_bank(engine.memory(), engine.text(), pred.pseudo_label).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank[0], v.as_slice());
    }

    #[test]
    fn replay_is_deterministic() {
        let v = unit(&[0.9, 0.3, 0.1]);
        let run = || {
            let mut engine = Engine::new(Mode::ZeroShot, text3(), None, None, PipelineConfig::default()).unwrap();
            engine.process(std::slice::from_ref(&v)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mode_gating() {
        let s = StaticMemory::build(vec![vec![e(0, 3)], vec![e(1, 3)], vec![e(2, 3)]]).unwrap();
        let cfg = PipelineConfig::default();
        assert!(Engine::new(Mode::ZeroShot, text3(), Some(s.clone()), None, cfg).is_err());
        assert!(matches!(
            Engine::new(Mode::TrainingFree, text3(), None, None, cfg),
            Err(Error::MissingInput(_))
        ));
        assert!(matches!(
            Engine::new(Mode::FewShot, text3(), Some(s.clone()), None, cfg),
            Err(Error::MissingInput(_))
        ));
        assert!(Engine::new(Mode::FewShot, text3(), Some(s.clone()), Some(ProjectionSet::identity(3)), cfg).is_err());
        assert!(Engine::new(Mode::FewShot, text3(), Some(s.clone()), Some(ProjectionSet::zeros(3)), cfg).is_ok());
        assert!(Engine::new(Mode::TrainingFree, text3(), Some(s), None, cfg).is_ok());
    }

    #[test]
    fn samples_follow_view_groups() {
        let rows = vec![e(0, 2).iter().map(|&x| x as f32).collect::<Vec<f32>>(); 5];
        let set = FeatureSet::from_rows(&rows, Some(vec![1, 1, 0, 0, 0]), Some(vec![4, 4, 9, 9, 9])).unwrap();
        let samples = samples_from_feature_set::<f64>(&set);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].views.len(), 2);
        assert_eq!(samples[1].group, 9);
        assert_eq!(samples[1].label, Some(0));
    }
}
