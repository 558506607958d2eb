use super::*;
use crate::numerics::Tensor;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        depth: 1,
        width: 8,
        heads: 2,
        patch: 4,
        image_h: 8,
        image_w: 8,
        channels: 1,
        classes: 4,
        mlp_ratio: 2,
    }
}

fn tiny_data() -> Dataset {
    synthetic(&SyntheticSpec {
        seed: 5,
        train: 24,
        val: 8,
        test: 8,
        size: 8,
        noise: 0.1,
        ..Default::default()
    })
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::benchmark(tiny_model(), 11)
    }
}

/// `−Σ_j t_j log p_j` written out directly from the smoothed target.
fn reference_ce(logits: &[f64], label: usize, alpha: f64) -> f64 {
    let k = logits.len() as f64;
    let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
    logits
        .iter()
        .enumerate()
        .map(|(j, &z)| {
            let t = alpha / k + if j == label { 1.0 - alpha } else { 0.0 };
            -t * (z - lse)
        })
        .sum()
}

#[test]
fn uniform_logits_give_log_k() {
    let logits = Tensor::zeros([1, 10]);
    let loss = smoothed_cross_entropy(&logits, &[3], 0.0).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn smoothed_two_class_case() {
    // Targets (0.95, 0.05); log p = (−ln(1+e⁻²), −2 − ln(1+e⁻²)).
    let expected = (1.0 + (-2f64).exp()).ln() + 0.05 * 2.0;
    let logits = Tensor::new([1, 2], vec![2.0, 0.0]).unwrap();
    let loss = smoothed_cross_entropy(&logits, &[0], 0.1).unwrap();
    assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
    assert!((loss - reference_ce(&[2.0, 0.0], 0, 0.1)).abs() < 1e-12);
}

#[test]
fn loss_is_bounded_below_by_target_entropy() {
    let (alpha, k) = (0.1, 4usize);
    let on = 1.0 - alpha + alpha / k as f64;
    let off = alpha / k as f64;
    let entropy = -(on * on.ln() + (k - 1) as f64 * off * off.ln());
    for scale in [0.0, 1.0, 5.0, 50.0] {
        let logits = Tensor::new([1, 4], vec![scale, 0.0, -scale, 0.5]).unwrap();
        let loss = smoothed_cross_entropy(&logits, &[0], alpha).unwrap();
        assert!(loss >= entropy - 1e-12, "{loss} < {entropy}");
        assert!((loss - reference_ce(logits.data(), 0, alpha)).abs() < 1e-10);
    }
}

#[test]
fn warmup_schedule() {
    assert_eq!(lr_at(0.1, 0, 10), 0.01);
    assert!((lr_at(0.1, 4, 10) - 0.05).abs() < 1e-15);
    assert_eq!(lr_at(0.1, 9, 10), 0.1);
    assert_eq!(lr_at(0.1, 500, 10), 0.1);
    assert_eq!(lr_at(0.1, 0, 0), 0.1);
}

#[test]
fn argmax_prefers_first() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    assert_eq!(argmax(&[1.0]), 0);
}

#[test]
fn config_validation() {
    let good = tiny_config();
    assert!(good.validate().is_ok());
    assert!(TrainConfig {
        batch_size: 0,
        ..good.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        label_smoothing: 1.0,
        ..good.clone()
    }
    .validate()
    .is_err());
    let mut wrong_grid = good
        .with_dropout(Strategy::Random, KeepRate::Point(0.5))
        .unwrap();
    wrong_grid.sampling.as_mut().unwrap().grid_rows = 3;
    assert!(wrong_grid.validate().is_err());
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let data = tiny_data();
    let cfg = tiny_config()
        .with_dropout(Strategy::Random, KeepRate::Interval { lo: 0.25, hi: 1.0 })
        .unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    assert_eq!(a.log.steps.len(), 2 * 3);
    for s in &a.log.steps {
        assert!((0.25..=1.0).contains(&s.keep_rate));
        assert_eq!(s.seq_len, sampler::kept_count(s.keep_rate, 4) + 1);
    }
    assert_eq!(a.log.val_rows().count(), 2);
    let csv = a.log.to_csv();
    assert!(csv.starts_with(TRAINLOG_HEADER));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn cumulative_flops_follow_the_keep_rate() {
    let data = tiny_data();
    let full = train(&tiny_config(), &data).unwrap();
    let half = train(
        &tiny_config()
            .with_dropout(Strategy::Random, KeepRate::Point(0.5))
            .unwrap(),
        &data,
    )
    .unwrap();
    assert!(half.total_flops < full.total_flops);
    let per_image = |k| crate::cost::empirical_flops(&tiny_model(), k).unwrap();
    assert_eq!(full.total_flops, 2 * 24 * per_image(4));
    assert_eq!(half.total_flops, 2 * 24 * per_image(2));
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = synthetic(&SyntheticSpec {
        seed: 5,
        train: 8,
        val: 2,
        test: 2,
        size: 12,
        noise: 0.1,
        ..Default::default()
    });
    assert!(matches!(
        train(&tiny_config(), &data),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn divergence_is_reported() {
    let cfg = TrainConfig {
        base_lr: 1e200,
        warmup_epochs: 0,
        epochs: 3,
        ..tiny_config()
    };
    match train(&cfg, &tiny_data()) {
        Err(Error::DivergedLoss { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.best_val_top1)
        ),
    }
}

#[test]
fn decay_exemption_leaves_gains_untouched_without_gradient_pressure() {
    // Zero lr on everything but the decay path is not expressible, so check
    // the grouping instead.
    let params = ViTParams::init(tiny_model(), 0).unwrap();
    let opt = Sgd::new(
        &params,
        &TrainConfig {
            decay_exempt: true,
            ..tiny_config()
        },
    );
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (n, decays) in names.iter().zip(&opt.decay) {
        assert_eq!(*decays, !is_no_decay(n), "{n}");
    }
    assert!(Sgd::new(&params, &tiny_config()).decay.iter().all(|&d| d));
}

#[test]
fn evaluation_accuracy_in_range() {
    let data = tiny_data();
    let out = train(&tiny_config(), &data).unwrap();
    let r = evaluate(&out.best, &data, &data.splits.test, None, 4).unwrap();
    assert!((0.0..=1.0).contains(&r.top1) && r.loss > 0.0);
    let dropped = evaluate(&out.best, &data, &data.splits.test, Some((0.5, 1)), 4).unwrap();
    assert!((0.0..=1.0).contains(&dropped.top1));
}
