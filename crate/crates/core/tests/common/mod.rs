//! Naive reference implementations and random instance generators shared by
//! the integration tests. Everything here is plain `f64` loops, written
//! without calling into the library's numeric code.

#![allow(dead_code, clippy::needless_range_loop)]

use dualmem::readout::{Projection, ProjectionSet, Role};
use dualmem::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// A unit vector close to `center`, so banks and queries are correlated.
pub fn near(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let noise = unit_vector(rng, center.len());
    let v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + spread * n).collect();
    normalize(&v)
}

pub fn random_projection_set(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ProjectionSet<f64> {
    let mut p = ProjectionSet::zeros(dim);
    for role in Role::ALL {
        let m = p.get_mut(role);
        for x in m.weight.as_mut_slice() {
            *x = rng.random_range(-scale..scale);
        }
        for x in &mut m.bias {
            *x = rng.random_range(-scale..scale);
        }
    }
    p
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn checked_normalize(v: &[f64]) -> Option<Vec<f64>> {
    (dot(v, v).sqrt() >= 1e-12).then(|| normalize(v))
}

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for i in 0..want.len() {
        diff += (got[i] - want[i]) * (got[i] - want[i]);
        base += want[i] * want[i];
    }
    diff.sqrt() / base.sqrt().max(1e-300)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense copy of one residual map: `w[i][j]`, `b[i]`.
#[derive(Clone)]
pub struct Map {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Map {
    pub fn from_projection(p: &Projection<f64>) -> Self {
        let d = p.bias.len();
        let mut w = vec![vec![0.0; d]; d];
        for (i, row) in w.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = p.weight[(i, j)];
            }
        }
        Self { w, b: p.bias.clone() }
    }

    /// `normalize(x + W x + b)`
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.try_apply(x).expect("degenerate map output")
    }

    /// `None` when the pre-normalization norm is below 1e-12.
    pub fn try_apply(&self, x: &[f64]) -> Option<Vec<f64>> {
        let d = x.len();
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = x[i] + self.b[i];
            for j in 0..d {
                s += self.w[i][j] * x[j];
            }
            y[i] = s;
        }
        checked_normalize(&y)
    }
}

/// Four maps, or `None` for the identity (training-free) readout.
#[derive(Clone)]
pub struct Maps {
    pub q: Map,
    pub k: Map,
    pub v: Map,
    pub o: Map,
}

impl Maps {
    pub fn from_set(p: &ProjectionSet<f64>) -> Option<Self> {
        if p.identity_mode() {
            return None;
        }
        Some(Self {
            q: Map::from_projection(&p.query),
            k: Map::from_projection(&p.key),
            v: Map::from_projection(&p.value),
            o: Map::from_projection(&p.output),
        })
    }
}

#[derive(Clone, Copy)]
pub struct OracleCfg {
    pub beta: f64,
    pub softmax_weighting: bool,
    pub logit_scale: f64,
}

/// Attention readout of one class bank.
pub fn readout_row(query: &[f64], bank: &[Vec<f64>], maps: Option<&Maps>, cfg: OracleCfg) -> Vec<f64> {
    try_readout_row(query, bank, maps, cfg).expect("degenerate readout")
}

/// Same as [`readout_row`], `None` if any normalization is degenerate.
pub fn try_readout_row(query: &[f64], bank: &[Vec<f64>], maps: Option<&Maps>, cfg: OracleCfg) -> Option<Vec<f64>> {
    let d = query.len();
    let q = match maps {
        Some(m) => m.q.try_apply(query)?,
        None => query.to_vec(),
    };
    let mut sims = Vec::new();
    let mut vals = Vec::new();
    for m in bank {
        let k = match maps {
            Some(mp) => mp.k.try_apply(m)?,
            None => m.clone(),
        };
        let v = match maps {
            Some(mp) => mp.v.try_apply(m)?,
            None => m.clone(),
        };
        sims.push(dot(&q, &k));
        vals.push(v);
    }
    let mut weights = Vec::new();
    if cfg.softmax_weighting {
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in &sims {
            let e = (cfg.beta * (s - mx)).exp();
            weights.push(e);
            total += e;
        }
        for w in &mut weights {
            *w /= total;
        }
    } else {
        for s in &sims {
            weights.push((-cfg.beta * (1.0 - s)).exp());
        }
    }
    let mut acc = vec![0.0; d];
    for (w, v) in weights.iter().zip(&vals) {
        for i in 0..d {
            acc[i] += w * v[i];
        }
    }
    match maps {
        Some(m) => m.o.try_apply(&acc),
        None => checked_normalize(&acc),
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn probs(query: &[f64], rows: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let z: Vec<f64> = rows.iter().map(|r| scale * dot(query, r)).collect();
    softmax(&z)
}

pub fn try_classifier(
    query: &[f64],
    banks: &[Vec<Vec<f64>>],
    maps: Option<&Maps>,
    cfg: OracleCfg,
) -> Option<Vec<Vec<f64>>> {
    banks.iter().map(|b| try_readout_row(query, b, maps, cfg)).collect()
}

pub fn classifier(query: &[f64], banks: &[Vec<Vec<f64>>], maps: Option<&Maps>, cfg: OracleCfg) -> Vec<Vec<f64>> {
    banks.iter().map(|b| readout_row(query, b, maps, cfg)).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Cross-entropy on `(a1 P_text + a3 P_static) / (a1 + a3)`, averaged over
/// the `(feature, label, shot)` examples.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    examples: &[(Vec<f64>, usize, usize)],
    shots: &[Vec<Vec<f64>>],
    text: &[Vec<f64>],
    maps: &Maps,
    cfg: OracleCfg,
    a1: f64,
    a3: f64,
    leave_one_out: bool,
) -> f64 {
    let mut total = 0.0;
    for (x, y, shot) in examples {
        let banks: Vec<Vec<Vec<f64>>> = shots
            .iter()
            .enumerate()
            .map(|(c, b)| {
                b.iter()
                    .enumerate()
                    .filter(|(k, _)| !(leave_one_out && c == *y && k == shot))
                    .map(|(_, m)| m.clone())
                    .collect()
            })
            .collect();
        let rows = classifier(x, &banks, Some(maps), cfg);
        let ps = probs(x, &rows, cfg.logit_scale);
        let pt = probs(x, text, cfg.logit_scale);
        total += -((a1 * pt[*y] + a3 * ps[*y]) / (a1 + a3)).ln();
    }
    total / examples.len() as f64
}

pub fn matrix_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Online reference for a single-class memory: returns entropies per slot.
pub fn offline_smallest(entropies: &[f64], capacity: usize) -> Vec<f64> {
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.truncate(capacity);
    sorted
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}
