//! Run reports: a plain structured-text rendering for humans and a JSON
//! summary for scripts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::AlphaSearchResult;
use crate::pipeline::{Engine, FusionWeights, Mode, PipelineConfig, Prediction};
use crate::scalar::Scalar;

/// How the fusion weights of a run were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaSource {
    Manifest,
    Fixed,
    Explicit,
    SearchTest,
    SearchVal,
}

impl AlphaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaSource::Manifest => "manifest",
            AlphaSource::Fixed => "fixed",
            AlphaSource::Explicit => "explicit",
            AlphaSource::SearchTest => "search (test)",
            AlphaSource::SearchVal => "search (val)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchSummary {
    pub best: FusionWeights,
    pub best_accuracy: f64,
    pub evaluations: usize,
}

impl From<&AlphaSearchResult> for SearchSummary {
    fn from(r: &AlphaSearchResult) -> Self {
        Self {
            best: r.best,
            best_accuracy: r.best_accuracy,
            evaluations: r.evaluations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub mode_name: String,
    pub num_classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub text_only_accuracy: Option<f64>,
    pub alpha_source: AlphaSource,
    pub search: Option<SearchSummary>,
    pub config: PipelineConfig,
    pub seed: u64,
    /// Number of classes holding exactly `i` dynamic slots, for each `i`.
    pub occupancy_histogram: Vec<usize>,
    pub dynamic_footprint_bytes: u64,
    pub static_footprint_bytes: u64,
    pub labels: Vec<usize>,
    pub truth: Vec<Option<usize>>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        engine: &Engine<T>,
        predictions: &[Prediction<T>],
        truth: Vec<Option<usize>>,
        accuracy: Option<f64>,
        text_only_accuracy: Option<f64>,
        alpha_source: AlphaSource,
        search: Option<&AlphaSearchResult>,
        seed: u64,
    ) -> Self {
        let mode = engine.mode();
        Self {
            mode,
            mode_name: mode.name().to_string(),
            num_classes: engine.text().num_classes(),
            dim: engine.text().dim(),
            samples: predictions.len(),
            accuracy,
            text_only_accuracy,
            alpha_source,
            search: search.map(SearchSummary::from),
            config: *engine.config(),
            seed,
            occupancy_histogram: engine.memory().occupancy_histogram(),
            dynamic_footprint_bytes: engine.memory().footprint_bytes(),
            static_footprint_bytes: engine.static_memory().map_or(0, |s| s.footprint_bytes()),
            labels: predictions.iter().map(|p| p.label).collect(),
            truth,
        }
    }

    /// Renders the report as `key: value` lines followed by one line per sample.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |a: Option<f64>| a.map_or("n/a".to_string(), |a| format!("{:.4}", a));
        let w = self.config.weights;
        let r = self.config.readout;
        // Writing into a String cannot fail.
        let _ = writeln!(s, "mode: {}", self.mode_name);
        let _ = writeln!(s, "classes: {}", self.num_classes);
        let _ = writeln!(s, "dim: {}", self.dim);
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "accuracy: {}", pct(self.accuracy));
        let _ = writeln!(s, "text_only_accuracy: {}", pct(self.text_only_accuracy));
        let _ = writeln!(s, "[config]");
        let _ = writeln!(s, "alpha: ({}, {}, {})", w.alpha1, w.alpha2, w.alpha3);
        let _ = writeln!(s, "alpha_source: {}", self.alpha_source.as_str());
        let _ = writeln!(s, "beta: {}", r.beta);
        let _ = writeln!(s, "logit_scale: {}", r.logit_scale);
        let _ = writeln!(s, "weighting: {:?}", r.weighting);
        let _ = writeln!(s, "rho: {}", self.config.rho);
        let _ = writeln!(s, "memory_length: {}", self.config.memory_length);
        let _ = writeln!(s, "seed: {}", self.seed);
        if let Some(sr) = &self.search {
            let _ = writeln!(s, "[search]");
            let _ = writeln!(s, "evaluations: {}", sr.evaluations);
            let _ = writeln!(s, "best: ({}, {}, {})", sr.best.alpha1, sr.best.alpha2, sr.best.alpha3);
            let _ = writeln!(s, "best_accuracy: {:.4}", sr.best_accuracy);
        }
        let _ = writeln!(s, "[memory]");
        let hist: Vec<String> = self
            .occupancy_histogram
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(slots, n)| format!("{slots}:{n}"))
            .collect();
        let _ = writeln!(s, "occupancy: {}", hist.join(" "));
        let _ = writeln!(s, "dynamic_footprint_bytes: {}", self.dynamic_footprint_bytes);
        let _ = writeln!(s, "static_footprint_bytes: {}", self.static_footprint_bytes);
        let _ = writeln!(s, "[predictions]");
        for (i, (l, t)) in self.labels.iter().zip(&self.truth).enumerate() {
            match t {
                Some(t) => {
                    let _ = writeln!(s, "{i} {l} {t}");
                }
                None => {
                    let _ = writeln!(s, "{i} {l}");
                }
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `report.txt` and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = dir.join("report.txt");
        fs::write(&text, self.to_text()).map_err(|e| Error::io(&text, e))?;
        let json = dir.join("summary.json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))
    }
}
