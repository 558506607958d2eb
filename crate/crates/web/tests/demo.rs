use patchdrop_web::{cost_json, keep_set_grid, savings_plot};

#[test]
fn keep_set_grid_marks_exactly_the_kept_patches() {
    let svg = keep_set_grid("random", 0.25, 14, 14, 3, 0).unwrap();
    assert_eq!(svg.matches(r#"class="kept""#).count(), 49);
    assert_eq!(svg.matches(r#"class="dropped""#).count(), 196 - 49);
    assert!(svg.contains("49 of 196 patches kept"));
    assert_eq!(svg, keep_set_grid("random", 0.25, 14, 14, 3, 0).unwrap());
    assert_ne!(svg, keep_set_grid("random", 0.25, 14, 14, 3, 1).unwrap());
}

#[test]
fn structured_grid_is_a_lattice() {
    let svg = keep_set_grid("structured", 0.25, 14, 14, 0, 0).unwrap();
    let kept: Vec<usize> = svg
        .lines()
        .filter(|l| l.contains(r#"class="kept""#))
        .map(|l| {
            let t = l.split("<title>patch ").nth(1).unwrap();
            t.split('<').next().unwrap().parse().unwrap()
        })
        .collect();
    let mut rows: Vec<usize> = kept.iter().map(|i| i / 14).collect();
    let mut cols: Vec<usize> = kept.iter().map(|i| i % 14).collect();
    rows.dedup();
    cols.sort();
    cols.dedup();
    assert_eq!((rows.len(), cols.len(), kept.len()), (7, 7, 49));
}

#[test]
fn grid_inputs_are_checked() {
    assert!(keep_set_grid("diagonal", 0.5, 4, 4, 0, 0).is_err());
    assert!(keep_set_grid("random", 1.5, 4, 4, 0, 0).is_err());
    assert!(keep_set_grid("random", 0.5, 0, 4, 0, 0).is_err());
    assert!(keep_set_grid("random", 0.5, 65, 4, 0, 0).is_err());
}

#[test]
fn cost_report_for_the_high_resolution_base_model() {
    let json = cost_json("base", 896, 16, 0.25, 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["num_patches"], 3136);
    assert_eq!(v["kept_patches"], 784);
    let g = v["empirical_gflops"].as_f64().unwrap();
    assert!((g / 79.96 - 1.0).abs() < 0.02, "{g}");
    assert!(cost_json("huge", 224, 16, 1.0, 1).is_err());
    assert!(cost_json("base", 224, 15, 1.0, 1).is_err());
    assert!(cost_json("base", 224, 16, 0.0, 1).is_err());
}

#[test]
fn savings_plot_has_one_series_per_rate() {
    let svg = savings_plot("0.5, 0.25", 768).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 2);
    assert_eq!(svg.matches(r#"class="guide""#).count(), 4);
    assert_eq!(svg, savings_plot("0.5,0.25", 768).unwrap());
    assert!(savings_plot("half", 768).is_err());
    assert!(savings_plot("1", 768).is_err());
    assert!(savings_plot("0.5", 0).is_err());
}
