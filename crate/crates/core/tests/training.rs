mod common;

use common::*;
use dualmem::memory::StaticMemory;
use dualmem::pipeline::{run_stream, Engine, FusionWeights, Mode, PipelineConfig, TestSample};
use dualmem::readout::{ProjectionSet, ReadoutConfig, Role, Weighting};
use dualmem::train::{backward, examples_from_static, train, training_loss, LossContext, TrainConfig, Trainer};
use dualmem::{Error, TextClassifier};
use rand::Rng;

struct Toy {
    text: TextClassifier<f64>,
    memory: StaticMemory<f64>,
    centers: Vec<Vec<f64>>,
}

/// Well separated classes whose text rows point away from the true centers,
/// so the static branch has something to learn.
fn toy(seed: u64, c: usize, k: usize, d: usize) -> Toy {
    toy_with_spread(seed, c, k, d, 0.4)
}

fn toy_with_spread(seed: u64, c: usize, k: usize, d: usize, spread: f64) -> Toy {
    let mut r = rng(seed);
    let centers: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(&mut r, d)).collect();
    let text = TextClassifier::from_rows(&centers.iter().map(|m| near(&mut r, m, 1.2)).collect::<Vec<_>>()).unwrap();
    let memory = StaticMemory::build(
        centers
            .iter()
            .map(|m| (0..k).map(|_| near(&mut r, m, spread)).collect())
            .collect(),
    )
    .unwrap();
    Toy { text, memory, centers }
}

fn ctx<'a>(t: &'a Toy, readout: &'a ReadoutConfig, weights: &'a FusionWeights) -> LossContext<'a, f64> {
    LossContext {
        memory: &t.memory,
        text: &t.text,
        readout,
        weights,
        leave_one_out: false,
    }
}

fn all_params(p: &ProjectionSet<f64>) -> Vec<f64> {
    Role::ALL
        .iter()
        .flat_map(|&r| {
            let m = p.get(r);
            m.weight.as_slice().iter().chain(&m.bias).copied().collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn loss_decreases_on_separable_toy() {
    let t = toy_with_spread(1, 4, 4, 8, 1.0);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 30,
        ..Default::default()
    };
    // Overlapping classes and leave-one-out keep the static branch off saturation.
    let c = LossContext {
        leave_one_out: true,
        ..ctx(&t, &readout, &weights)
    };
    let out = train(c, cfg).unwrap();
    assert!(
        out.final_loss < 0.8 * out.initial_loss,
        "{} -> {}",
        out.initial_loss,
        out.final_loss
    );
    assert_eq!(out.epoch_losses.len(), 30);
    assert_eq!(out.log.len(), 30);
    assert!(!out.projections.identity_mode());
}

#[test]
fn same_seed_same_parameters() {
    let t = toy(2, 3, 5, 6);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        batch_size: 4,
        seed: 11,
        ..Default::default()
    };
    let a = train(ctx(&t, &readout, &weights), cfg).unwrap();
    let b = train(ctx(&t, &readout, &weights), cfg).unwrap();
    assert_eq!(all_params(&a.projections), all_params(&b.projections));
    assert_eq!(a.log, b.log);
    let c = train(ctx(&t, &readout, &weights), TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(all_params(&a.projections), all_params(&c.projections));
}

#[test]
fn zero_steps_keep_zero_init() {
    let t = toy(3, 3, 2, 5);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let out = train(
        ctx(&t, &readout, &weights),
        TrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(all_params(&out.projections).iter().all(|&x| x == 0.0));
    assert_eq!(out.initial_loss, out.final_loss);
    assert!(out.log.is_empty());
}

#[test]
fn duplicated_batch_has_same_gradient() {
    let t = toy(4, 3, 3, 6);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let mut r = rng(40);
    let proj = random_projection_set(&mut r, 6, 0.2);
    let batch = examples_from_static(&t.memory);
    let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
    let (l1, g1) = backward(&batch, &proj, &ctx(&t, &readout, &weights)).unwrap();
    let (l2, g2) = backward(&doubled, &proj, &ctx(&t, &readout, &weights)).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for role in Role::ALL {
        let a = g1.get(role);
        let b = g2.get(role);
        assert!(max_abs_diff(a.weight.as_slice(), b.weight.as_slice()) < 1e-12);
        assert!(max_abs_diff(&a.bias, &b.bias) < 1e-12);
    }
}

#[test]
fn text_only_objective_has_zero_gradient() {
    let t = toy(5, 3, 3, 6);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::new(1.0, 1.0, 0.0).unwrap();
    let proj = random_projection_set(&mut rng(50), 6, 0.2);
    let (_, g) = backward(&examples_from_static(&t.memory), &proj, &ctx(&t, &readout, &weights)).unwrap();
    for role in Role::ALL {
        assert!(g.get(role).is_zero());
    }
}

#[test]
fn gradients_match_fine_differences() {
    // Smaller step than the acceptance check, at the default logit scale.
    for seed in 0..8 {
        let mut r = rng(600 + seed);
        let d = r.random_range(3..=5);
        let t = toy(600 + seed, 3, 2, d);
        let weighting = if seed % 2 == 0 { Weighting::SharpenedExp } else { Weighting::SoftMax };
        let readout = ReadoutConfig {
            weighting,
            ..Default::default()
        };
        let weights = FusionWeights::default();
        let proj = random_projection_set(&mut r, d, 0.2);
        let batch = examples_from_static(&t.memory);
        let c = ctx(&t, &readout, &weights);
        let (_, g) = backward(&batch, &proj, &c).unwrap();
        let h = 1e-6;
        for role in Role::ALL {
            let n = d * d;
            for i in 0..n + d {
                let mut plus = proj.clone();
                let mut minus = proj.clone();
                let (pv, mv, gv) = if i < n {
                    (
                        &mut plus.get_mut(role).weight.as_mut_slice()[i],
                        &mut minus.get_mut(role).weight.as_mut_slice()[i],
                        g.get(role).weight.as_slice()[i],
                    )
                } else {
                    (
                        &mut plus.get_mut(role).bias[i - n],
                        &mut minus.get_mut(role).bias[i - n],
                        g.get(role).bias[i - n],
                    )
                };
                *pv += h;
                *mv -= h;
                let fd = (training_loss(&batch, &plus, &c).unwrap() - training_loss(&batch, &minus, &c).unwrap()) / (2.0 * h);
                assert!((fd - gv).abs() < 1e-6 * (1.0 + gv.abs()), "{role:?}[{i}]: fd {fd} vs {gv}");
            }
        }
    }
}

#[test]
fn identity_projections_are_not_trainable() {
    let t = toy(6, 2, 2, 4);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let err = backward(
        &examples_from_static(&t.memory),
        &ProjectionSet::identity(4),
        &ctx(&t, &readout, &weights),
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn leave_one_out_needs_two_shots() {
    let t = toy(7, 2, 1, 4);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let c = LossContext {
        leave_one_out: true,
        ..ctx(&t, &readout, &weights)
    };
    let err = training_loss(&examples_from_static(&t.memory), &ProjectionSet::zeros(4), &c);
    assert!(matches!(err, Err(Error::EmptyBank(Some(_)))));
}

#[test]
fn trainer_schedule_and_log() {
    let t = toy(8, 5, 3, 6);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        ..Default::default()
    };
    let mut trainer = Trainer::new(ctx(&t, &readout, &weights), cfg).unwrap();
    assert_eq!(trainer.batch_size(), 4);
    assert_eq!(trainer.steps_per_epoch(), 4);
    assert_eq!(trainer.total_steps(), 16);
    trainer.run().unwrap();
    let log = trainer.log();
    assert_eq!(log.len(), 16);
    assert_eq!(log[0].lr, 1e-4);
    assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr && w[1].step == w[0].step + 1));
    assert_eq!(log.last().unwrap().epoch, 3);

    // Batch size never exceeds the number of shots.
    let small = Trainer::new(ctx(&t, &readout, &weights), TrainConfig::default()).unwrap();
    assert_eq!(small.batch_size(), 15);
    assert_eq!(small.total_steps(), 20);
}

#[test]
fn trained_projections_drive_few_shot_engine() {
    let t = toy_with_spread(9, 4, 4, 8, 1.0);
    let readout = ReadoutConfig::default();
    let weights = FusionWeights::default();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 10,
        ..Default::default()
    };
    let c = LossContext {
        leave_one_out: true,
        ..ctx(&t, &readout, &weights)
    };
    let out = train(c, cfg).unwrap();
    let mut r = rng(90);
    let stream: Vec<TestSample<f64>> = (0..40)
        .map(|i| TestSample {
            views: vec![near(&mut r, &t.centers[i % 4], 0.4)],
            group: i as u32,
            label: Some(i % 4),
        })
        .collect();
    let mut engine = Engine::new(
        Mode::FewShot,
        t.text.clone(),
        Some(t.memory.clone()),
        Some(out.projections),
        PipelineConfig::default(),
    )
    .unwrap();
    let fs = run_stream(&mut engine, &stream).unwrap().accuracy.unwrap();
    let mut tf = Engine::new(
        Mode::TrainingFree,
        t.text.clone(),
        Some(t.memory.clone()),
        None,
        PipelineConfig::default(),
    )
    .unwrap();
    let tf = run_stream(&mut tf, &stream).unwrap().accuracy.unwrap();
    assert!(fs >= tf);
}
