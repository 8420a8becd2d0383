//! Few-shot training of the four residual projection maps.
//!
//! The objective is cross-entropy on the renormalized fusion of the text
//! prediction and the static-memory prediction,
//!
//! ```text
//! q    = (a1 * P_text + a3 * P_static) / (a1 + a3)
//! loss = mean_i  -ln q_i[y_i]
//! ```
//!
//! The dynamic memory takes no part: there is no test stream at train time.
//! Gradients are derived by hand through the readout, the L2 normalizations
//! and both softmaxes. Parameters are updated with AdamW under a cosine
//! annealed learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TextClassifier;
use crate::linalg::{axpy, dot, softmax};
use crate::memory::StaticMemory;
use crate::pipeline::FusionWeights;
use crate::readout::{attention_weights, Projection, ProjectionSet, ReadoutConfig, Role, Weighting};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Upper bound; the effective batch is `min(batch_size, C * K)`.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Exclude each training sample from the static bank of its own forward pass.
    pub leave_one_out: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 20,
            batch_size: 128,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            leave_one_out: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total_steps`, annealed from `lr0` to 0.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One labeled training feature. `shot` is its index in the static bank of
/// its class, used by leave-one-out.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub feature: Vec<T>,
    pub label: usize,
    pub shot: Option<usize>,
}

/// Every shot of `memory` as a training example.
pub fn examples_from_static<T: Scalar>(memory: &StaticMemory<T>) -> Vec<TrainExample<T>> {
    (0..memory.num_classes())
        .flat_map(|c| {
            memory.class_bank(c).iter().enumerate().map(move |(k, f)| TrainExample {
                feature: f.clone(),
                label: c,
                shot: Some(k),
            })
        })
        .collect()
}

/// Everything the loss needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a, T> {
    pub memory: &'a StaticMemory<T>,
    pub text: &'a TextClassifier<T>,
    pub readout: &'a ReadoutConfig,
    pub weights: &'a FusionWeights,
    pub leave_one_out: bool,
}

/// Gradients with the same layout as a [`ProjectionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub query: Projection<T>,
    pub key: Projection<T>,
    pub value: Projection<T>,
    pub output: Projection<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Projection::zeros(dim),
            key: Projection::zeros(dim),
            value: Projection::zeros(dim),
            output: Projection::zeros(dim),
        }
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

    fn is_finite(&self) -> bool {
        Role::ALL.iter().all(|&r| {
            let p = self.get(r);
            p.weight.as_slice().iter().chain(&p.bias).all(|x| x.is_finite())
        })
    }
}

/// Output of a residual map together with what its backward pass needs.
struct Mapped<T> {
    input: Vec<T>,
    out: Vec<T>,
    norm: T,
}

fn map_forward<T: Scalar>(p: &Projection<T>, x: &[T]) -> Result<Mapped<T>> {
    let (out, norm) = p.apply_with_norm(x)?;
    Ok(Mapped {
        input: x.to_vec(),
        out,
        norm,
    })
}

/// Backward through `y = L2(x + W x + b)`. Accumulates parameter gradients and
/// returns the gradient with respect to `x` when asked.
fn map_backward<T: Scalar>(
    p: &Projection<T>,
    m: &Mapped<T>,
    grad_out: &[T],
    grad: &mut Projection<T>,
    want_input: bool,
) -> Option<Vec<T>> {
    let proj = dot(&m.out, grad_out);
    let du: Vec<T> = grad_out
        .iter()
        .zip(&m.out)
        .map(|(&g, &y)| (g - y * proj) / m.norm)
        .collect();
    grad.weight.add_outer(&du, &m.input);
    axpy(&mut grad.bias, T::one(), &du);
    want_input.then(|| {
        let mut dx = p.weight.matvec_t(&du);
        axpy(&mut dx, T::one(), &du);
        dx
    })
}

struct BankForward<T> {
    keys: Vec<Vec<Mapped<T>>>,
    values: Vec<Vec<Mapped<T>>>,
}

fn project_bank<T: Scalar>(memory: &StaticMemory<T>, proj: &ProjectionSet<T>) -> Result<BankForward<T>> {
    let mut keys = Vec::with_capacity(memory.num_classes());
    let mut values = Vec::with_capacity(memory.num_classes());
    for c in 0..memory.num_classes() {
        let bank = memory.class_bank(c);
        keys.push(bank.iter().map(|m| map_forward(&proj.key, m)).collect::<Result<Vec<_>>>()?);
        values.push(bank.iter().map(|m| map_forward(&proj.value, m)).collect::<Result<Vec<_>>>()?);
    }
    Ok(BankForward { keys, values })
}

struct ClassForward<T> {
    slots: Vec<usize>,
    weights: Vec<T>,
    output: Mapped<T>,
}

struct SampleForward<T> {
    query: Mapped<T>,
    classes: Vec<ClassForward<T>>,
    p_static: Vec<T>,
    fused_target: T,
    loss: T,
}

fn check_trainable<T: Scalar>(proj: &ProjectionSet<T>, ctx: &LossContext<'_, T>) -> Result<()> {
    if proj.identity_mode() {
        return Err(Error::Config("identity projections are not trainable".into()));
    }
    if ctx.memory.num_classes() != ctx.text.num_classes() {
        return Err(Error::LengthMismatch {
            left: ctx.memory.num_classes(),
            right: ctx.text.num_classes(),
        });
    }
    if ctx.weights.alpha1 + ctx.weights.alpha3 <= 0.0 {
        return Err(Error::NoActiveSource);
    }
    Ok(())
}

fn sample_forward<T: Scalar>(
    ex: &TrainExample<T>,
    bank: &BankForward<T>,
    proj: &ProjectionSet<T>,
    ctx: &LossContext<'_, T>,
) -> Result<SampleForward<T>> {
    let c = ctx.text.num_classes();
    if ex.label >= c {
        return Err(Error::ClassOutOfRange {
            class: ex.label,
            num_classes: c,
        });
    }
    let scale = T::lit(ctx.readout.logit_scale);
    let query = map_forward(&proj.query, &ex.feature)?;
    let mut classes = Vec::with_capacity(c);
    let mut logits = Vec::with_capacity(c);
    for y in 0..c {
        let slots: Vec<usize> = (0..bank.keys[y].len())
            .filter(|&k| !(ctx.leave_one_out && y == ex.label && ex.shot == Some(k)))
            .collect();
        if slots.is_empty() {
            return Err(Error::EmptyBank(Some(y)));
        }
        let sims: Vec<T> = slots.iter().map(|&k| dot(&query.out, &bank.keys[y][k].out)).collect();
        let weights = attention_weights(&sims, ctx.readout);
        let mut acc = vec![T::zero(); ex.feature.len()];
        for (&w, &k) in weights.iter().zip(&slots) {
            axpy(&mut acc, w, &bank.values[y][k].out);
        }
        let output = map_forward(&proj.output, &acc)?;
        logits.push(scale * dot(&ex.feature, &output.out));
        classes.push(ClassForward {
            slots,
            weights,
            output,
        });
    }
    let p_static = softmax(&logits);
    let text_logits: Vec<T> = ctx
        .text
        .matrix()
        .iter_rows()
        .map(|r| scale * dot(&ex.feature, r))
        .collect();
    let p_text = softmax(&text_logits);
    let a1 = T::lit(ctx.weights.alpha1);
    let a3 = T::lit(ctx.weights.alpha3);
    let fused_target = (a1 * p_text[ex.label] + a3 * p_static[ex.label]) / (a1 + a3);
    let loss = -fused_target.ln();
    Ok(SampleForward {
        query,
        classes,
        p_static,
        fused_target,
        loss,
    })
}

/// Mean cross-entropy over `batch`.
pub fn training_loss<T: Scalar>(
    batch: &[TrainExample<T>],
    proj: &ProjectionSet<T>,
    ctx: &LossContext<'_, T>,
) -> Result<T> {
    check_trainable(proj, ctx)?;
    if batch.is_empty() {
        return Err(Error::MissingInput("empty training batch".into()));
    }
    let bank = project_bank(ctx.memory, proj)?;
    let mut total = T::zero();
    for ex in batch {
        total = total + sample_forward(ex, &bank, proj, ctx)?.loss;
    }
    let loss = total / T::lit(batch.len() as f64);
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("training loss is {loss}")));
    }
    Ok(loss)
}

/// Mean loss over `batch` and its gradient with respect to every projection
/// parameter.
pub fn backward<T: Scalar>(
    batch: &[TrainExample<T>],
    proj: &ProjectionSet<T>,
    ctx: &LossContext<'_, T>,
) -> Result<(T, Gradients<T>)> {
    check_trainable(proj, ctx)?;
    if batch.is_empty() {
        return Err(Error::MissingInput("empty training batch".into()));
    }
    let dim = proj.dim();
    let c = ctx.text.num_classes();
    let bank = project_bank(ctx.memory, proj)?;
    let mut grads = Gradients::zeros(dim);
    let mut key_grads: Vec<Vec<Vec<T>>> = bank
        .keys
        .iter()
        .map(|b| vec![vec![T::zero(); dim]; b.len()])
        .collect();
    let mut value_grads = key_grads.clone();

    let inv_batch = T::one() / T::lit(batch.len() as f64);
    let scale = T::lit(ctx.readout.logit_scale);
    let beta = T::lit(ctx.readout.beta);
    let a1 = T::lit(ctx.weights.alpha1);
    let a3 = T::lit(ctx.weights.alpha3);
    let mut total = T::zero();

    for ex in batch {
        let fwd = sample_forward(ex, &bank, proj, ctx)?;
        total = total + fwd.loss;

        // d loss / d P_static is nonzero only at the label.
        let g_target = -(a3 / (a1 + a3)) / fwd.fused_target * inv_batch;
        // Softmax backward: dz = P * (g - <g, P>) with g = g_target * e_y.
        let inner = g_target * fwd.p_static[ex.label];
        let dz: Vec<T> = (0..c)
            .map(|y| {
                let g = if y == ex.label { g_target } else { T::zero() };
                fwd.p_static[y] * (g - inner)
            })
            .collect();

        let mut dq = vec![T::zero(); dim];
        for (y, cls) in fwd.classes.iter().enumerate() {
            if dz[y].is_zero() {
                continue;
            }
            let d_row: Vec<T> = ex.feature.iter().map(|&v| dz[y] * scale * v).collect();
            let d_acc = map_backward(&proj.output, &cls.output, &d_row, &mut grads.output, true)
                .expect("input gradient requested");

            let d_weights: Vec<T> = cls
                .slots
                .iter()
                .map(|&k| dot(&d_acc, &bank.values[y][k].out))
                .collect();
            for (&w, &k) in cls.weights.iter().zip(&cls.slots) {
                axpy(&mut value_grads[y][k], w, &d_acc);
            }
            let d_sims: Vec<T> = match ctx.readout.weighting {
                Weighting::SharpenedExp => cls
                    .weights
                    .iter()
                    .zip(&d_weights)
                    .map(|(&a, &da)| beta * a * da)
                    .collect(),
                Weighting::SoftMax => {
                    let inner: T = cls.weights.iter().zip(&d_weights).map(|(&a, &da)| a * da).sum();
                    cls.weights
                        .iter()
                        .zip(&d_weights)
                        .map(|(&a, &da)| beta * a * (da - inner))
                        .collect()
                }
            };
            for (&ds, &k) in d_sims.iter().zip(&cls.slots) {
                axpy(&mut dq, ds, &bank.keys[y][k].out);
                axpy(&mut key_grads[y][k], ds, &fwd.query.out);
            }
        }
        map_backward(&proj.query, &fwd.query, &dq, &mut grads.query, false);
    }

    for y in 0..bank.keys.len() {
        for k in 0..bank.keys[y].len() {
            map_backward(&proj.key, &bank.keys[y][k], &key_grads[y][k], &mut grads.key, false);
            map_backward(&proj.value, &bank.values[y][k], &value_grads[y][k], &mut grads.value, false);
        }
    }

    let loss = total * inv_batch;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("training loss is {loss}")));
    }
    if !grads.is_finite() {
        return Err(Error::NumericalFailure("non-finite gradient".into()));
    }
    Ok((loss, grads))
}

/// AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Gradients<T>,
    pub second: Gradients<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            first: Gradients::zeros(dim),
            second: Gradients::zeros(dim),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update over a flat parameter slice. `step` is the
/// 1-based count including this update. Decay, when enabled, is decoupled:
/// `p <- p - lr * wd * p` before the adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let correction1 = one - b1.powi(step as i32);
    let correction2 = one - b2.powi(step as i32);
    let lr_t = T::lit(lr);
    let eps = T::lit(cfg.epsilon);
    let shrink = one - lr_t * T::lit(cfg.weight_decay);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first).zip(second) {
        if decay {
            *p = *p * shrink;
        }
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one AdamW step to every projection; weight decay touches weight
/// matrices only.
pub fn optimizer_step<T: Scalar>(
    proj: &mut ProjectionSet<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) {
    state.step += 1;
    let step = state.step;
    for role in Role::ALL {
        let g = grads.get(role);
        let p = proj.get_mut(role);
        let m = state.first.get_mut(role);
        let v = state.second.get_mut(role);
        adamw_update(
            p.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
            step,
            lr,
            cfg,
            true,
        );
        adamw_update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, step, lr, cfg, false);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Stateful training loop. On failure the last finite parameters remain
/// available through [`Trainer::projections`].
pub struct Trainer<'a, T> {
    ctx: LossContext<'a, T>,
    cfg: TrainConfig,
    examples: Vec<TrainExample<T>>,
    proj: ProjectionSet<T>,
    state: OptimizerState<T>,
    rng: ChaCha8Rng,
    log: Vec<LogEntry>,
    epoch_losses: Vec<f64>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(ctx: LossContext<'a, T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = ctx.text.dim();
        let proj = ProjectionSet::zeros(dim);
        check_trainable(&proj, &ctx)?;
        Ok(Self {
            examples: examples_from_static(ctx.memory),
            ctx,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            proj,
            state: OptimizerState::new(dim),
            log: Vec::new(),
            epoch_losses: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.batch_size.min(self.examples.len())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.batch_size())
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    /// Mean loss over every training example at the current parameters.
    pub fn full_loss(&self) -> Result<T> {
        training_loss(&self.examples, &self.proj, &self.ctx)
    }

    pub fn run(&mut self) -> Result<()> {
        let total = self.total_steps();
        let batch = self.batch_size();
        let mut step = 0;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch) {
                let items: Vec<TrainExample<T>> = chunk.iter().map(|&i| self.examples[i].clone()).collect();
                let lr = cosine_lr(step, total, self.cfg.learning_rate);
                let (loss, grads) = backward(&items, &self.proj, &self.ctx).map_err(|e| match e {
                    Error::NumericalFailure(msg) => {
                        Error::NumericalFailure(format!("diverged at epoch {epoch}, step {step}: {msg}"))
                    }
                    other => other,
                })?;
                optimizer_step(&mut self.proj, &grads, &mut self.state, &self.cfg, lr);
                let loss = loss.as_f64();
                self.log.push(LogEntry {
                    epoch,
                    step,
                    lr,
                    loss,
                });
                epoch_loss += loss;
                batches += 1;
                step += 1;
            }
            let mean = epoch_loss / batches.max(1) as f64;
            log::info!("epoch {epoch}: mean loss {mean:.6}");
            self.epoch_losses.push(mean);
        }
        Ok(())
    }

    pub fn projections(&self) -> &ProjectionSet<T> {
        &self.proj
    }

    pub fn into_projections(self) -> ProjectionSet<T> {
        self.proj
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }
}

/// Result of a finished run of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub projections: ProjectionSet<T>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<LogEntry>,
    pub epoch_losses: Vec<f64>,
}

/// Trains the projection maps on the shots held in `ctx.memory`.
pub fn train<T: Scalar>(ctx: LossContext<'_, T>, cfg: TrainConfig) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(ctx, cfg)?;
    let initial_loss = trainer.full_loss()?.as_f64();
    trainer.run()?;
    let final_loss = trainer.full_loss()?.as_f64();
    Ok(TrainOutcome {
        initial_loss,
        final_loss,
        log: trainer.log.clone(),
        epoch_losses: trainer.epoch_losses.clone(),
        projections: trainer.into_projections(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn adamw_scalar_step() {
        let cfg = TrainConfig::default();
        let mut p = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &cfg, true);
        // p(1 - lr wd) - lr * m_hat / (sqrt(v_hat) + eps), with m_hat = v_hat = 1
        let want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - 0.899_000_001).abs() < 1e-12);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adamw_no_op_cases() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [0.3f64, -0.7];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg, true);
        assert_eq!(p, [0.3, -0.7]);
        let cfg = TrainConfig::default();
        adamw_update(&mut p, &[1.0, -2.0], &mut m, &mut v, 2, 0.0, &cfg, true);
        assert_eq!(p, [0.3, -0.7]);
    }

    #[test]
    fn decay_skips_biases() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut proj = ProjectionSet::<f64>::zeros(2);
        proj.key.weight[(0, 0)] = 1.0;
        proj.key.bias[0] = 1.0;
        let mut state = OptimizerState::new(2);
        optimizer_step(&mut proj, &Gradients::zeros(2), &mut state, &cfg, 0.1);
        assert!((proj.key.weight[(0, 0)] - 0.95).abs() < 1e-15);
        assert_eq!(proj.key.bias[0], 1.0);
        assert_eq!(state.step, 1);
    }
}
