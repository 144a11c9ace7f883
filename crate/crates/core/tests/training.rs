//! Optimizer and training-loop tests: analytic update rules, closed-form
//! decay, phase behavior, and bitwise run determinism.

mod common;

use prophet_lab::autodiff::grad_check;
use prophet_lab::captioner::{ModelDims, ModelParams};
use prophet_lab::prophet::{full_loss, Divergence, Variant};
use prophet_lab::synthdata::{make_split, Catalog, GenConfig, Instance};
use prophet_lab::training::{fit, Optimizer, OptimizerKind, TrainConfig};
use prophet_lab::Error;

fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: Catalog::default().vocab_size(),
        embed: 8,
        feat: 32,
        hidden: 12,
        attn: 8,
    }
}

fn tiny_dataset(count: usize) -> Vec<Instance> {
    let (train, _, _) = make_split(
        1,
        &Catalog::default(),
        (count, 1, 1),
        &GenConfig::default(),
    )
    .unwrap();
    train
}

fn sgd_config(lr: f64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: lr,
        grad_clip: None,
        ..TrainConfig::default()
    }
}

// ── optimizer_step ──────────────────────────────────────────────────

#[test]
fn sgd_step_is_p_minus_lr_g() {
    let mut params = ModelParams::init(tiny_dims(), 0);
    let before = params.to_flat();
    let mut grads = vec![0.0; params.num_scalars()];
    grads[0] = 2.0;
    let mut opt = Optimizer::new(&sgd_config(0.1), params.num_scalars());
    opt.step(&mut params, &grads).unwrap();
    let after = params.to_flat();
    common::assert_close(after[0], before[0] - 0.2, 1e-15, "sgd update");
    assert_eq!(&after[1..], &before[1..], "untouched coordinates moved");
}

#[test]
fn adam_first_step_magnitude_is_the_learning_rate() {
    let mut params = ModelParams::init(tiny_dims(), 1);
    let before = params.to_flat();
    let config = TrainConfig {
        optimizer: OptimizerKind::default_adam(),
        learning_rate: 1e-3,
        grad_clip: None,
        ..TrainConfig::default()
    };
    let grads = vec![0.5; params.num_scalars()];
    let mut opt = Optimizer::new(&config, params.num_scalars());
    opt.step(&mut params, &grads).unwrap();
    for (b, a) in before.iter().zip(params.to_flat()) {
        common::assert_close((b - a).abs(), 1e-3, 1e-9, "adam first-step magnitude");
    }
}

#[test]
fn ten_sgd_steps_match_geometric_decay() {
    // Quadratic f(w) = 0.5 a w^2, gradient a w: w_k = w_0 (1 - lr a)^k.
    let mut params = ModelParams::init(tiny_dims(), 2);
    let a = 3.0;
    let lr = 0.05;
    let w0 = params.to_flat()[0];
    let mut opt = Optimizer::new(&sgd_config(lr), params.num_scalars());
    for _ in 0..10 {
        let mut grads = vec![0.0; params.num_scalars()];
        grads[0] = a * params.to_flat()[0];
        opt.step(&mut params, &grads).unwrap();
    }
    let expected = w0 * (1.0 - lr * a).powi(10);
    common::assert_close(params.to_flat()[0], expected, 1e-10, "geometric decay");
}

#[test]
fn non_finite_gradient_error_names_the_tensor() {
    let mut params = ModelParams::init(tiny_dims(), 3);
    let names = params.tensor_names();
    let alpha_pos = names.iter().position(|n| n == "w_alpha").unwrap();
    let offset: usize = params.tensors()[..alpha_pos].iter().map(|t| t.len()).sum();
    let mut grads = vec![0.0; params.num_scalars()];
    grads[offset] = f64::NAN;
    let mut opt = Optimizer::new(&sgd_config(0.1), params.num_scalars());
    match opt.step(&mut params, &grads) {
        Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "w_alpha"),
        other => panic!("expected NonFiniteGradient, got {other:?}"),
    }
}

#[test]
fn gradient_clipping_rescales_to_the_threshold() {
    let mut params = ModelParams::init(tiny_dims(), 4);
    let before = params.to_flat();
    let config = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1.0,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let n = params.num_scalars();
    let grads = vec![2.0; n]; // norm 2 sqrt(n), far above the clip
    let mut opt = Optimizer::new(&config, n);
    opt.step(&mut params, &grads).unwrap();
    let moved: f64 = params
        .to_flat()
        .iter()
        .zip(&before)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    common::assert_close(moved, 1.0, 1e-9, "clipped step norm = clip * lr");
}

// ── TrainConfig validation ──────────────────────────────────────────

#[test]
fn invalid_configs_are_rejected() {
    let bad_lambda = TrainConfig {
        lambda: -0.1,
        ..TrainConfig::default()
    };
    assert!(bad_lambda.validate().is_err());
    let bad_phases = TrainConfig {
        pretrain_epochs: 10,
        total_epochs: 5,
        ..TrainConfig::default()
    };
    assert!(bad_phases.validate().is_err());
    let bad_lr = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad_lr.validate().is_err());
}

// ── fit ─────────────────────────────────────────────────────────────

fn short_config(variant: Variant, pretrain: usize, total: usize) -> TrainConfig {
    TrainConfig {
        variant,
        pretrain_epochs: pretrain,
        total_epochs: total,
        seed: 13,
        ..TrainConfig::default()
    }
}

#[test]
fn variants_are_identical_while_prophet_is_dormant() {
    let dataset = tiny_dataset(6);
    let params = ModelParams::init(tiny_dims(), 5);
    let (p_base, log_base) = fit(
        &dataset,
        &short_config(Variant::Baseline, 3, 3),
        params.clone(),
    )
    .unwrap();
    let (p_dpa, log_dpa) = fit(&dataset, &short_config(Variant::Dpa, 3, 3), params).unwrap();
    assert_eq!(p_base.to_flat(), p_dpa.to_flat(), "dormant-phase divergence");
    assert_eq!(log_base.to_csv(false), log_dpa.to_csv(false));
}

#[test]
fn phase_one_rows_carry_no_prophet_losses() {
    let dataset = tiny_dataset(5);
    let params = ModelParams::init(tiny_dims(), 6);
    let (_, log) = fit(&dataset, &short_config(Variant::Dpa, 2, 4), params).unwrap();
    assert_eq!(log.rows.len(), 4);
    for row in &log.rows[..2] {
        assert_eq!(row.l_hat_ce, 0.0);
        assert_eq!(row.l_att, 0.0);
        assert_eq!(row.total, row.l_ce);
    }
    // Prophet-phase rows do carry the extra terms.
    assert!(log.rows[2].l_hat_ce > 0.0);
}

#[test]
fn lambda_zero_reports_l_att_but_excludes_it_from_the_total() {
    let dataset = tiny_dataset(5);
    let params = ModelParams::init(tiny_dims(), 7);
    let config = TrainConfig {
        lambda: 0.0,
        variant: Variant::Cpa,
        pretrain_epochs: 1,
        total_epochs: 3,
        seed: 13,
        ..TrainConfig::default()
    };
    let (_, log) = fit(&dataset, &config, params).unwrap();
    let row = &log.rows[2];
    assert!(row.l_att > 0.0, "l_att not reported");
    common::assert_close(
        row.total,
        row.l_ce + row.l_hat_ce,
        1e-9,
        "lambda-zero total",
    );
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let dataset = tiny_dataset(5);
    let params = ModelParams::init(tiny_dims(), 8);
    let config = short_config(Variant::Dpa, 1, 4);
    let (p1, log1) = fit(&dataset, &config, params.clone()).unwrap();
    let (p2, log2) = fit(&dataset, &config, params).unwrap();
    let bits = |p: &ModelParams| -> Vec<u64> { p.to_flat().iter().map(|v| v.to_bits()).collect() };
    assert_eq!(bits(&p1), bits(&p2));
    assert_eq!(log1.to_csv(false), log2.to_csv(false));
}

#[test]
fn training_loss_decreases_early_for_all_variants() {
    let dataset = tiny_dataset(10);
    for variant in [Variant::Baseline, Variant::Cpa, Variant::Dpa] {
        let params = ModelParams::init(tiny_dims(), 9);
        let (_, log) = fit(&dataset, &short_config(variant, 3, 3), params).unwrap();
        assert!(
            log.rows[1].total < log.rows[0].total && log.rows[2].total < log.rows[1].total,
            "{variant:?} loss not decreasing: {:?}",
            log.rows.iter().map(|r| r.total).collect::<Vec<_>>()
        );
    }
}

#[test]
fn trained_checkpoint_still_passes_a_gradient_check() {
    let dataset = tiny_dataset(4);
    let params = ModelParams::init(tiny_dims(), 10);
    let (trained, _) = fit(&dataset, &short_config(Variant::Dpa, 1, 3), params).unwrap();
    let instance = &dataset[0];
    let cfg = prophet_lab::prophet::LossConfig {
        lambda: 0.1,
        divergence: Divergence::L1,
        detach_prophet: true,
    };
    let names = trained.tensor_names();
    let index = names.iter().position(|n| n == "w_att_h").unwrap();
    let point = trained.tensors()[index].detached();
    let report = grad_check(
        |tape, x| {
            let mut p = trained.clone();
            *p.tensors_mut()[index] = x.clone();
            let b = full_loss(
                tape,
                &instance.features,
                &instance.caption,
                &p,
                &cfg,
                Variant::Dpa,
            )?;
            Ok(b.total)
        },
        &point,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "rel err {}", report.max_rel_err);
}

#[test]
fn empty_dataset_is_rejected() {
    let params = ModelParams::init(tiny_dims(), 11);
    assert!(matches!(
        fit(&[], &TrainConfig::default(), params),
        Err(Error::EmptySequence)
    ));
}

#[test]
fn runlog_csv_zeroes_timing_by_default() {
    let dataset = tiny_dataset(3);
    let params = ModelParams::init(tiny_dims(), 12);
    let (_, log) = fit(&dataset, &short_config(Variant::Baseline, 1, 2), params).unwrap();
    let csv = log.to_csv(false);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,l_ce,l_hat_ce,l_att,total,seconds"
    );
    for line in lines {
        assert!(line.ends_with(",0.000"), "timing leaked into {line}");
    }
}
