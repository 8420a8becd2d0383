//! Synthetic embedding benchmark.
//!
//! Class means are a random orthonormal set. Text rows and image features are
//! noisy copies of their class mean, projected back to the unit sphere. Noise
//! levels are total noise norms: each coordinate gets `noise / sqrt(D)`
//! standard deviation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{save_feature_set, FeatureSet, Manifest, TextClassifier};
use crate::linalg::{axpy, dot, l2_normalized};
use crate::pipeline::{samples_from_feature_set, text_only_accuracy};
use crate::readout::ReadoutConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub shots_per_class: usize,
    /// Views per test sample; view 0 is the clean sample.
    pub views: usize,
    pub text_noise: f64,
    pub image_noise: f64,
    /// Extra noise applied to augmented views.
    pub view_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            samples_per_class: 100,
            shots_per_class: 4,
            views: 1,
            text_noise: 1.0,
            image_noise: 1.0,
            view_noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 || self.views == 0 {
            return Err(Error::Config(
                "synthetic spec needs positive classes, dim, samples and views".into(),
            ));
        }
        if self.dim < self.num_classes {
            return Err(Error::DimMismatch {
                expected: self.num_classes,
                found: self.dim,
            });
        }
        for n in [self.text_noise, self.image_noise, self.view_noise] {
            if !(n >= 0.0 && n.is_finite()) {
                return Err(Error::Config(format!("noise must be non-negative, got {n}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub text: TextClassifier<f32>,
    /// Labeled, grouped by class, `shots_per_class` rows each. Empty when no shots.
    pub shots: Option<FeatureSet>,
    /// Labeled test rows in stream order, with view groups when `views > 1`.
    pub test: FeatureSet,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn noisy_unit(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f64> {
    let dim = center.len();
    loop {
        let mut v = gaussian(rng, dim, noise / (dim as f64).sqrt());
        axpy(&mut v, 1.0, center);
        if let Some((u, _)) = l2_normalized(&v) {
            return u;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn orthonormal_means(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            axpy(&mut v, -p, b);
        }
        if let Some((u, n)) = l2_normalized(&v) {
            if n > 1e-6 {
                basis.push(u);
            }
        }
    }
    basis
}

/// Generates the benchmark deterministically from `spec.seed`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = orthonormal_means(&mut rng, spec.num_classes, spec.dim);

    let text_rows: Vec<Vec<f32>> = means
        .iter()
        .map(|m| to_f32(&noisy_unit(&mut rng, m, spec.text_noise)))
        .collect();
    let text = TextClassifier::from_feature_set(&FeatureSet::from_rows(&text_rows, None, None)?)?;

    let shots = if spec.shots_per_class > 0 {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..spec.shots_per_class {
                rows.push(to_f32(&noisy_unit(&mut rng, m, spec.image_noise)));
                labels.push(c as i32);
            }
        }
        Some(FeatureSet::from_rows(&rows, Some(labels), None)?)
    } else {
        None
    };

    let mut order: Vec<usize> = (0..spec.num_classes * spec.samples_per_class)
        .map(|i| i % spec.num_classes)
        .collect();
    order.shuffle(&mut rng);
    let mut rows = Vec::with_capacity(order.len() * spec.views);
    let mut labels = Vec::with_capacity(rows.capacity());
    let mut groups = Vec::with_capacity(rows.capacity());
    for (i, &c) in order.iter().enumerate() {
        let base = noisy_unit(&mut rng, &means[c], spec.image_noise);
        for v in 0..spec.views {
            let view = if v == 0 {
                base.clone()
            } else {
                noisy_unit(&mut rng, &base, spec.view_noise)
            };
            rows.push(to_f32(&view));
            labels.push(c as i32);
            groups.push(i as u32);
        }
    }
    let test = FeatureSet::from_rows(&rows, Some(labels), (spec.views > 1).then_some(groups))?;
    Ok(SyntheticData { text, shots, test })
}

/// Text-only accuracy of a generated benchmark.
pub fn synthetic_text_accuracy(data: &SyntheticData, readout: &ReadoutConfig) -> Result<f64> {
    let samples = samples_from_feature_set::<f32>(&data.test);
    text_only_accuracy(&samples, &data.text, readout)
}

/// Bisects `image_noise` until text-only accuracy lands in `[lo, hi]`.
/// Returns the calibrated spec and its accuracy.
pub fn calibrate_image_noise(
    spec: &SyntheticSpec,
    readout: &ReadoutConfig,
    lo: f64,
    hi: f64,
) -> Result<(SyntheticSpec, f64)> {
    let mut spec = spec.clone();
    let (mut low_noise, mut high_noise) = (0.0, 16.0);
    for _ in 0..60 {
        spec.image_noise = 0.5 * (low_noise + high_noise);
        let acc = synthetic_text_accuracy(&make_synthetic(&spec)?, readout)?;
        if acc > hi {
            low_noise = spec.image_noise;
        } else if acc < lo {
            high_noise = spec.image_noise;
        } else {
            return Ok((spec, acc));
        }
    }
    Err(Error::NumericalFailure(
        "calibration did not reach the target accuracy band".into(),
    ))
}

/// Writes text, shots, test files and a manifest into `dir`.
pub fn write_synthetic(data: &SyntheticData, spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_feature_set(&data.text.to_feature_set()?, dir.join("text.embf"))?;
    save_feature_set(&data.test, dir.join("test.embf"))?;
    let mut manifest = Manifest::new(
        (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
        "text.embf",
        "test.embf",
    );
    if let Some(shots) = &data.shots {
        save_feature_set(shots, dir.join("shots.embf"))?;
        manifest.files.shots = Some("shots.embf".into());
    }
    manifest.seed = spec.seed;
    manifest.save(dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            dim: 8,
            samples_per_class: 10,
            shots_per_class: 2,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_text_is_perfect() {
        let spec = SyntheticSpec {
            text_noise: 0.0,
            image_noise: 0.0,
            ..small()
        };
        let data = make_synthetic(&spec).unwrap();
        assert_eq!(synthetic_text_accuracy(&data, &ReadoutConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = make_synthetic(&small()).unwrap();
        let b = make_synthetic(&small()).unwrap();
        assert_eq!(a.test.to_bytes(), b.test.to_bytes());
        assert_eq!(a.shots.unwrap().to_bytes(), b.shots.unwrap().to_bytes());
        let c = make_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.test.to_bytes(), c.test.to_bytes());
    }

    #[test]
    fn views_are_grouped() {
        let data = make_synthetic(&SyntheticSpec { views: 3, ..small() }).unwrap();
        assert_eq!(data.test.len(), 4 * 10 * 3);
        assert_eq!(data.test.groups().len(), 40);
    }

    #[test]
    fn dim_below_classes_rejected() {
        let spec = SyntheticSpec {
            num_classes: 9,
            dim: 8,
            ..small()
        };
        assert!(matches!(make_synthetic(&spec), Err(Error::DimMismatch { .. })));
    }
}
