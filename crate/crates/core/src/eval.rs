//! Top-1 accuracy and the fusion weight grid search.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{fuse, run_stream, Engine, FusionWeights, Prediction, TestSample};
use crate::scalar::Scalar;

/// Candidate values for the dynamic and static weights; the text weight stays 1.
pub const ALPHA_GRID: [f64; 12] = [
    0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0,
];

pub fn evaluate_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::MissingInput("no predictions to score".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// The discrete (alpha2, alpha3) grid with alpha1 fixed to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearchSpace {
    pub alpha1: f64,
    pub grid: Vec<f64>,
}

impl Default for AlphaSearchSpace {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            grid: ALPHA_GRID.to_vec(),
        }
    }
}

impl AlphaSearchSpace {
    /// Grid points in search order: alpha2 outer, alpha3 inner, both ascending.
    pub fn points(&self) -> impl Iterator<Item = FusionWeights> + '_ {
        self.grid.iter().flat_map(move |&a2| {
            self.grid.iter().map(move |&a3| FusionWeights {
                alpha1: self.alpha1,
                alpha2: a2,
                alpha3: a3,
            })
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len() * self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub weights: FusionWeights,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSearchResult {
    pub best: FusionWeights,
    pub best_accuracy: f64,
    pub evaluations: usize,
    pub table: Vec<GridPoint>,
}

fn pick_best(table: Vec<GridPoint>) -> Result<AlphaSearchResult> {
    let mut best: Option<&GridPoint> = None;
    // Strict improvement keeps the earliest point, i.e. the smallest (alpha2, alpha3).
    for p in &table {
        if best.is_none_or(|b| p.accuracy > b.accuracy) {
            best = Some(p);
        }
    }
    let best = best.ok_or_else(|| Error::Config("empty alpha grid".into()))?.clone();
    Ok(AlphaSearchResult {
        best: best.weights,
        best_accuracy: best.accuracy,
        evaluations: table.len(),
        table,
    })
}

/// Searches the grid by re-fusing cached component predictions.
pub fn alpha_grid_search<T: Scalar>(
    predictions: &[Prediction<T>],
    truth: &[usize],
    space: &AlphaSearchSpace,
) -> Result<AlphaSearchResult> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    let mut table = Vec::with_capacity(space.len());
    for weights in space.points() {
        let labels = predictions
            .iter()
            .map(|p| fuse(&p.p_text, p.p_dynamic.as_deref(), p.p_static.as_deref(), &weights).map(|(_, l)| l))
            .collect::<Result<Vec<_>>>()?;
        table.push(GridPoint {
            weights,
            accuracy: evaluate_accuracy(&labels, truth)?,
        });
    }
    pick_best(table)
}

fn truth_of<T>(samples: &[TestSample<T>]) -> Result<Vec<usize>> {
    samples.iter().map(|s| s.label.ok_or(Error::Unlabeled)).collect()
}

/// Runs the stream once from a fresh memory and searches over the cached predictions.
pub fn search_alpha<T: Scalar>(
    engine: &mut Engine<T>,
    samples: &[TestSample<T>],
    space: &AlphaSearchSpace,
) -> Result<(AlphaSearchResult, Vec<Prediction<T>>)> {
    let truth = truth_of(samples)?;
    engine.reset()?;
    let run = run_stream(engine, samples)?;
    let result = alpha_grid_search(&run.predictions, &truth, space)?;
    Ok((result, run.predictions))
}

/// Reference search that replays the full stream for every grid point.
pub fn search_alpha_naive<T: Scalar>(
    engine: &mut Engine<T>,
    samples: &[TestSample<T>],
    space: &AlphaSearchSpace,
) -> Result<AlphaSearchResult> {
    let original = engine.config().weights;
    let mut table = Vec::with_capacity(space.len());
    for weights in space.points() {
        engine.set_weights(weights)?;
        engine.reset()?;
        let run = run_stream(engine, samples)?;
        table.push(GridPoint {
            weights,
            accuracy: run.accuracy.ok_or(Error::Unlabeled)?,
        });
    }
    engine.set_weights(original)?;
    engine.reset()?;
    pick_best(table)
}
