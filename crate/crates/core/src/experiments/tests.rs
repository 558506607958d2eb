use super::*;
use crate::trainer::Augment;

fn tiny_base(seed: u64) -> TrainConfig {
    let model = ModelConfig {
        depth: 1,
        width: 8,
        heads: 2,
        patch: 4,
        image_h: 16,
        image_w: 16,
        channels: 1,
        classes: SYNTHETIC_CLASSES,
        mlp_ratio: 2,
    };
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        warmup_epochs: 1,
        augment: Augment::default(),
        ..TrainConfig::benchmark(model, seed)
    }
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        seed: 9,
        train: 32,
        val: 16,
        test: 16,
        size: 16,
        ..Default::default()
    }
}

fn values(s: &str) -> Vec<AxisValue> {
    parse_values(s).unwrap()
}

#[test]
fn axis_values_parse_and_print() {
    let v: AxisValue = "64@0.25".parse().unwrap();
    assert_eq!(v.value, "64");
    assert_eq!(v.rate, Some(KeepRate::Point(0.25)));
    assert_eq!(v.to_string(), "64@0.25");
    let v: AxisValue = "random@0.5:1".parse().unwrap();
    assert_eq!(v.rate, Some(KeepRate::Interval { lo: 0.5, hi: 1.0 }));
    assert!("@0.5".parse::<AxisValue>().is_err());
    assert!("4@2".parse::<AxisValue>().is_err());
    for a in Axis::ALL {
        assert_eq!(a.name().parse::<Axis>().unwrap(), a);
    }
    assert!("width".parse::<Axis>().is_err());
}

#[test]
fn plan_validation() {
    let ok = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("1,0.5"),
        vec![1],
    );
    assert_eq!(ok.unwrap().repeats, 1);
    assert!(SweepPlan::new(tiny_base(0), tiny_spec(), Axis::KeepRate, vec![], vec![1]).is_err());
    assert!(SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("1"),
        vec![]
    )
    .is_err());
    let mut bad = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("1"),
        vec![1, 2],
    )
    .unwrap();
    bad.repeats = 3;
    assert!(bad.validate().is_err());
}

#[test]
fn hash_tracks_the_plan() {
    let a = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("1,0.5"),
        vec![1],
    )
    .unwrap();
    let mut b = a.clone();
    assert_eq!(a.config_hash(), b.config_hash());
    b.seeds = vec![2];
    assert_ne!(a.config_hash(), b.config_hash());
    assert!(a.sweep_id().starts_with("keep_rate-"));
}

#[test]
fn depth_cells_match_the_base_budget() {
    let base = TrainConfig::benchmark(benchmark_model(), 0);
    let plan = SweepPlan::new(
        base,
        SyntheticSpec::default(),
        Axis::Depth,
        values("2,3,4,6"),
        vec![0],
    )
    .unwrap();
    let target = plan.base_flops().unwrap();
    for v in &plan.values[1..] {
        let (cfg, _) = plan.cell(v, 0).unwrap();
        let n = cfg.model.num_patches();
        let k = kept_count(cfg.sampling.unwrap().rate.mean(), n);
        let flops = empirical_flops(&cfg.model, k).unwrap();
        let err = flops.abs_diff(target) as f64 / target as f64;
        assert!(err <= 0.05, "depth {}: {err}", v.value);
        // Neither neighbour is closer.
        for kk in [k - 1, k + 1] {
            if (1..=n).contains(&kk) {
                let other = empirical_flops(&cfg.model, kk).unwrap();
                assert!(other.abs_diff(target) >= flops.abs_diff(target));
            }
        }
    }
    // The base depth itself keeps every patch.
    assert!(plan.cell(&plan.values[0], 0).unwrap().0.sampling.is_none());
    // Shallower than the base would need a rate above 1.
    assert!(plan.cell(&"1".parse().unwrap(), 0).is_err());
}

#[test]
fn image_size_cells_trade_resolution_for_keep_rate() {
    let base = TrainConfig::benchmark(benchmark_model(), 0);
    let plan = SweepPlan::new(
        base,
        SyntheticSpec::default(),
        Axis::ImageSize,
        values("32,64"),
        vec![0],
    )
    .unwrap();
    let flops: Vec<u64> = plan
        .values
        .iter()
        .map(|v| {
            let (cfg, spec) = plan.cell(v, 0).unwrap();
            assert_eq!(spec.size, cfg.model.image_h);
            let rate = cfg.sampling.map_or(1.0, |s| s.rate.mean());
            empirical_flops(&cfg.model, kept_count(rate, cfg.model.num_patches())).unwrap()
        })
        .collect();
    let rel = flops[0].abs_diff(flops[1]) as f64 / flops[0] as f64;
    assert!(rel <= 0.15, "{flops:?}");
    assert!(plan.cell(&"30".parse().unwrap(), 0).is_err());
}

#[test]
fn variant_and_patch_cells() {
    let base = tiny_base(0);
    let plan = SweepPlan::new(base, tiny_spec(), Axis::Variant, values("tiny"), vec![0]).unwrap();
    let (cfg, _) = plan.cell(&plan.values[0], 0).unwrap();
    assert_eq!(
        (cfg.model.depth, cfg.model.width, cfg.model.heads),
        (12, 192, 3)
    );
    assert_eq!(cfg.model.image_h, 16);
    let plan = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::PatchSize,
        values("8@0.5,3"),
        vec![0],
    )
    .unwrap();
    let (cfg, _) = plan.cell(&plan.values[0], 0).unwrap();
    assert_eq!(cfg.model.num_patches(), 4);
    assert_eq!(cfg.sampling.unwrap().rate, KeepRate::Point(0.5));
    assert!(matches!(
        plan.cell(&plan.values[1], 0),
        Err(Error::IndivisibleImage { .. })
    ));
}

#[test]
fn keep_rate_sweep_records_failures_and_sorts() {
    let plan = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("0.5,1,0,0.25"),
        vec![1, 2],
    )
    .unwrap();
    let report = run_sweep(&plan, None).unwrap();
    assert_eq!(report.cells.len(), 8);
    let order: Vec<&str> = report
        .cells
        .iter()
        .step_by(2)
        .map(|c| c.value.as_str())
        .collect();
    // An invalid rate has no numeric key and sorts last.
    assert_eq!(order, ["0.25", "0.5", "1", "0"]);
    assert!(report.cells[6].outcome.is_err() && report.cells[7].outcome.is_err());
    let ok: Vec<&CellResult> = report.cells.iter().filter(|c| c.outcome.is_ok()).collect();
    assert_eq!(ok.len(), 6);
    // Cost grows with the rate.
    for w in ok.windows(2).filter(|w| w[0].value != w[1].value) {
        assert!(w[0].flops_per_image < w[1].flops_per_image);
    }
    let summary = report.summary();
    assert_eq!(summary.len(), 4);
    assert_eq!(summary[3].runs_ok, 0);
    assert!(summary[..3]
        .iter()
        .all(|s| s.runs_ok == 2 && s.seeds == [1, 2]));

    let cells_csv = report.cells_csv();
    assert_eq!(cells_csv.lines().count(), 9);
    assert!(cells_csv
        .lines()
        .skip(1)
        .all(|l| l.starts_with(&report.config_hash)));
    assert_eq!(cells_csv.matches(",failed,").count(), 2);
    let summary_csv = report.summary_csv();
    assert_eq!(summary_csv.lines().count(), 5);
    // Failed rows are skipped by the plotter, the rest draw.
    assert!(crate::plot::emit_plot(&summary_csv, crate::plot::PlotKind::KeepRateCurve).is_ok());
}

#[test]
fn sweeps_are_reproducible_and_laid_out_on_disk() {
    let plan = SweepPlan::new(
        tiny_base(0),
        tiny_spec(),
        Axis::KeepRate,
        values("1,0.5"),
        vec![3],
    )
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_sweep(&plan, Some(a.path())).unwrap();
    let rb = run_sweep(&plan, Some(b.path())).unwrap();
    assert_eq!(ra, rb);
    let root = a.path().join(&ra.sweep_id);
    for f in ["summary.csv", "cells.csv", "manifest.json"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    for c in &ra.cells {
        for f in [
            "manifest.json",
            "trainlog.csv",
            "checkpoint.pdvt",
            "metrics.csv",
        ] {
            let pa = root.join(&c.cell_id).join(f);
            let pb = b.path().join(&rb.sweep_id).join(&c.cell_id).join(f);
            let (x, y) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
            if f != "manifest.json" {
                assert_eq!(x, y, "{}", pa.display());
            }
        }
    }
}

#[test]
fn strategies_all_complete() {
    let report = run_strategy_compare(
        &tiny_base(0),
        tiny_spec(),
        &Strategy::ALL,
        KeepRate::Point(0.25),
        &[4],
        None,
    )
    .unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert!(c.outcome.is_ok(), "{c:?}");
        assert_eq!(c.tokens, 4 + 1);
    }
}

#[test]
fn robustness_matrix_shape_and_full_column() {
    let data = synthetic(&tiny_spec());
    let (m, outcomes) =
        run_robustness(&tiny_base(2), &data, &[1.0, 0.5], &[1.0, 0.5, 0.25]).unwrap();
    assert_eq!(m.accuracy.len(), 2);
    for (row, out) in m.accuracy.iter().zip(&outcomes) {
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
        let plain = evaluate(&out.best, &data, &data.splits.test, None, 7).unwrap();
        assert_eq!(row[0], plain.top1);
    }
    assert_eq!(m.same_rate_curve(), vec![(0.5, m.accuracy[1][1])]);
    assert_eq!(m.baseline_curve().len(), 3);
    assert_eq!(m.full_eval_curve(), vec![(0.5, m.accuracy[1][0])]);
    let csv = m.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(crate::plot::emit_plot(&csv, crate::plot::PlotKind::Robustness).is_ok());
    assert_eq!(m.curves_csv().lines().count(), 1 + 1 + 3 + 1);
    assert!(run_robustness(&tiny_base(2), &data, &[1.5], &[1.0]).is_err());
}

#[test]
fn single_model_ensemble_is_a_plain_run() {
    let data = synthetic(&tiny_spec());
    let base = tiny_base(6);
    let report = run_ensemble(&base, &data, 1, KeepRate::Point(1.0)).unwrap();
    let plain = train(&base, &data).unwrap();
    let top1 = evaluate(&plain.best, &data, &data.splits.test, None, 5)
        .unwrap()
        .top1;
    assert_eq!(report.member_top1, vec![top1]);
    assert_eq!(report.ensemble_top1, top1);
    assert_eq!(report.total_flops, plain.total_flops);
    assert!(run_ensemble(&base, &data, 0, KeepRate::Point(1.0)).is_err());

    let pair = run_ensemble(&base, &data, 2, KeepRate::Point(0.5)).unwrap();
    assert_eq!(pair.seeds, vec![6, 7]);
    assert_eq!(pair.to_csv().lines().count(), 4);
}
