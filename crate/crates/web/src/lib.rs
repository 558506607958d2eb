//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export wraps a plain function returning `Result<String, String>`,
//! so everything the page shows can be tested natively.

use std::fmt::Write as _;

use patchdrop::cost::{cost_report, savings_csv};
use patchdrop::model::Variant;
use patchdrop::plot::{emit_plot, PlotKind};
use patchdrop::sampler::{draw_keep_set, KeepRate, SamplingSpec, Strategy};
use wasm_bindgen::prelude::*;

const CELL: usize = 18;
const GAP: usize = 2;

/// Patch counts for the savings curves: 16 up to 65,536, doubling.
const SAVINGS_TOKENS: [usize; 13] = [
    16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768, 65536,
];

/// SVG of one keep-set draw on a `rows × cols` patch grid: kept patches
/// dark, dropped ones pale, with the index of every kept patch.
pub fn keep_set_grid(
    strategy: &str,
    rate: f64,
    rows: usize,
    cols: usize,
    seed: u64,
    step: u64,
) -> Result<String, String> {
    if rows == 0 || cols == 0 || rows > 64 || cols > 64 {
        return Err(format!("grid {rows}x{cols} must be between 1x1 and 64x64"));
    }
    let strategy: Strategy = strategy
        .parse()
        .map_err(|e: patchdrop::Error| e.to_string())?;
    let spec = SamplingSpec::new(strategy, KeepRate::Point(rate), seed, rows, cols)
        .map_err(|e| e.to_string())?;
    let keep = draw_keep_set(&spec, step).map_err(|e| e.to_string())?;
    let mut kept = vec![false; rows * cols];
    for &i in &keep.indices {
        kept[i] = true;
    }
    let (w, h) = (cols * (CELL + GAP) + GAP, rows * (CELL + GAP) + GAP + 20);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    for (i, &on) in kept.iter().enumerate() {
        let (x, y) = (
            GAP + (i % cols) * (CELL + GAP),
            GAP + (i / cols) * (CELL + GAP),
        );
        let (class, fill) = if on {
            ("kept", "#2c7fb8")
        } else {
            ("dropped", "#e6eef5")
        };
        writeln!(
            s,
            r#"<rect class="{class}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}"><title>patch {i}</title></rect>"#
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{GAP}" y="{}">{strategy}: {} of {} patches kept</text>"#,
        h - 6,
        keep.indices.len(),
        rows * cols
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

/// Cost report for a named variant at one keep rate, as JSON, with the
/// FLOP counts also given in G for display.
pub fn cost_json(
    variant: &str,
    image: usize,
    patch: usize,
    rate: f64,
    batch: usize,
) -> Result<String, String> {
    let v: Variant = variant
        .parse()
        .map_err(|e: patchdrop::Error| e.to_string())?;
    if image == 0 || patch == 0 || image > 2048 {
        return Err(format!("image {image} / patch {patch} out of range"));
    }
    let cfg = v.config(image, patch);
    let r = cost_report(&cfg, rate, batch.max(1)).map_err(|e| e.to_string())?;
    let mut doc = serde_json::to_value(&r).map_err(|e| e.to_string())?;
    doc["empirical_gflops"] = (r.empirical_flops as f64 / 1e9).into();
    doc["theoretical_gflops"] = (r.theoretical_flops as f64 / 1e9).into();
    doc["keep_rate"] = rate.into();
    serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())
}

/// Savings plot for comma-separated keep rates at embedding width `width`.
pub fn savings_plot(rates: &str, width: usize) -> Result<String, String> {
    let rates: Vec<f64> = rates
        .split(',')
        .map(|r| {
            r.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad keep rate {r:?}"))
        })
        .collect::<Result<_, _>>()?;
    if width == 0 {
        return Err("width must be positive".into());
    }
    let csv = savings_csv(&rates, width, &SAVINGS_TOKENS).map_err(|e| e.to_string())?;
    emit_plot(&csv, PlotKind::Savings).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = keepSetSvg)]
pub fn keep_set_svg(
    strategy: &str,
    rate: f64,
    rows: u32,
    cols: u32,
    seed: u32,
    step: u32,
) -> Result<String, JsValue> {
    keep_set_grid(
        strategy,
        rate,
        rows as usize,
        cols as usize,
        seed.into(),
        step.into(),
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = costReport)]
pub fn cost_report_js(
    variant: &str,
    image: u32,
    patch: u32,
    rate: f64,
    batch: u32,
) -> Result<String, JsValue> {
    cost_json(
        variant,
        image as usize,
        patch as usize,
        rate,
        batch as usize,
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = savingsSvg)]
pub fn savings_svg(rates: &str, width: u32) -> Result<String, JsValue> {
    savings_plot(rates, width as usize).map_err(|e| JsValue::from_str(&e))
}
