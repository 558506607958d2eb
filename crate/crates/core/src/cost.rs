//! Compute and memory cost of training with a given number of kept patches.
//!
//! Two views of FLOPs are kept side by side:
//!
//! * the closed form `2·L·N²·d + 4·L·N·d²` for L blocks over N tokens, and
//! * an empirical count read off the MAC meter while the real forward pass
//!   runs on the shape tracer. It includes what the closed form omits: the
//!   patch projection over *all* N patches (embedding happens before
//!   dropout), the MLP, and the classifier head.
//!
//! Only matrix products are counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Params, Variant};
use crate::numerics::{meter, ShapeTracer};
use crate::sampler::{self, kept_count, KeepSet};

/// `2·L·N²·d + 4·L·N·d²`
pub fn theoretical_flops(depth: u64, tokens: u64, width: u64) -> u64 {
    2 * depth * tokens * tokens * width + 4 * depth * tokens * width * width
}

/// Closed-form compute at keep rate `r` relative to `r = 1`:
/// `r·(r·N + 2d) / (N + 2d)`. Tends to `r` for small N and `r²` as N grows.
pub fn relative_compute(rate: f64, tokens: f64, width: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    Ok(rate * (rate * tokens + 2.0 * width) / (tokens + 2.0 * width))
}

/// Forward MACs per image with `kept` patches, measured by running the
/// model on the shape tracer.
pub fn empirical_flops(cfg: &ModelConfig, kept: usize) -> Result<u64> {
    cfg.validate()?;
    let n = cfg.num_patches();
    if kept == 0 || kept > n {
        return Err(Error::InvalidConfig(format!(
            "kept patches {kept} outside [1, {n}]"
        )));
    }
    let params = Params::traced(cfg);
    let mut tracer = ShapeTracer::new();
    let patches = tracer.leaf_shape(&[1, n, cfg.patch_dim()]);
    let (logits, macs) = meter::measure(|| -> Result<Vec<usize>> {
        let tokens = model::embed(&mut tracer, cfg, &params, &patches)?;
        let tokens = if kept < n {
            let keep = KeepSet {
                indices: (0..kept).collect(),
                num_patches: n,
            };
            sampler::apply_dropout(&mut tracer, tokens, &[keep])?
        } else {
            tokens
        };
        model::forward(&mut tracer, cfg, &params, &tokens)
    });
    logits?;
    Ok(macs)
}

/// Per-block stored activations per token, in units of `d`: LN outputs (2),
/// Q/K/V (3), attention output (1) and the two `4d`-wide MLP activations (8).
pub const ACT_PER_TOKEN: u64 = 14;
/// Stored attention maps per head per token pair.
pub const ACT_PER_ATTN: u64 = 1;

/// Analytic count of activations stored for backward:
/// `B·[N·P²C + N·d + L·(14·T·d + h·T²)]` with `T = kept + 1`.
///
/// The first two terms are the patch pixels and their projections, which
/// exist for every patch because dropout comes after embedding.
pub fn activation_memory(cfg: &ModelConfig, kept: usize, batch: usize) -> u64 {
    let (n, d, h, l) = (
        cfg.num_patches() as u64,
        cfg.width as u64,
        cfg.heads as u64,
        cfg.depth as u64,
    );
    let t = kept as u64 + 1;
    let embed = n * cfg.patch_dim() as u64 + n * d;
    let per_block = ACT_PER_TOKEN * t * d + ACT_PER_ATTN * h * t * t;
    batch as u64 * (embed + l * per_block)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub config_id: String,
    pub num_patches: usize,
    pub kept_patches: usize,
    pub token_count: usize,
    pub theoretical_flops: u64,
    pub empirical_flops: u64,
    pub relative_theoretical: f64,
    pub relative_empirical: f64,
    pub activation_elements: u64,
    pub parameter_count: usize,
}

/// Short id such as `base-224-p16`, or `custom-L2-d32-32-p4`.
pub fn config_id(cfg: &ModelConfig) -> String {
    let named = Variant::ALL.into_iter().find(|v| {
        let (l, d, h) = v.dims();
        (
            cfg.depth,
            cfg.width,
            cfg.heads,
            cfg.channels,
            cfg.classes,
            cfg.mlp_ratio,
        ) == (l, d, h, 3, 1000, 4)
    });
    let size = if cfg.image_h == cfg.image_w {
        cfg.image_h.to_string()
    } else {
        format!("{}x{}", cfg.image_h, cfg.image_w)
    };
    match named {
        Some(v) => format!("{}-{size}-p{}", v.name(), cfg.patch),
        None => format!("custom-L{}-d{}-{size}-p{}", cfg.depth, cfg.width, cfg.patch),
    }
}

/// Full cost report at keep rate `rate` (per image; memory for `batch`).
pub fn cost_report(cfg: &ModelConfig, rate: f64, batch: usize) -> Result<CostReport> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    cfg.validate()?;
    let n = cfg.num_patches();
    let k = kept_count(rate, n);
    let (l, d) = (cfg.depth as u64, cfg.width as u64);
    let theoretical = theoretical_flops(l, k as u64 + 1, d);
    let theoretical_full = theoretical_flops(l, n as u64 + 1, d);
    let empirical = empirical_flops(cfg, k)?;
    let empirical_full = empirical_flops(cfg, n)?;
    Ok(CostReport {
        config_id: config_id(cfg),
        num_patches: n,
        kept_patches: k,
        token_count: k + 1,
        theoretical_flops: theoretical,
        empirical_flops: empirical,
        relative_theoretical: theoretical as f64 / theoretical_full as f64,
        relative_empirical: empirical as f64 / empirical_full as f64,
        activation_elements: activation_memory(cfg, k, batch),
        parameter_count: cfg.parameter_count(),
    })
}

pub const COST_CSV_HEADER: &str =
    "config_id,keep_rate,N,k,T,theoretical,empirical,relative_theoretical,relative_empirical,activation_elements";

/// One CSV row per (config, keep rate); this is the data behind the savings
/// curves.
pub fn cost_csv(configs: &[ModelConfig], rates: &[f64], batch: usize) -> Result<String> {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for cfg in configs {
        for &rate in rates {
            let r = cost_report(cfg, rate, batch)?;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.6},{}",
                r.config_id,
                rate,
                r.num_patches,
                r.kept_patches,
                r.token_count,
                r.theoretical_flops,
                r.empirical_flops,
                r.relative_theoretical,
                r.relative_empirical,
                r.activation_elements
            )
            .unwrap();
        }
    }
    Ok(out)
}

pub const SAVINGS_CSV_HEADER: &str = "keep_rate,N,width,relative_theoretical";

/// Theoretical relative compute over a range of token counts: the data for
/// the savings plot, which tends to `r` for small `N` and `r²` for large.
pub fn savings_csv(rates: &[f64], width: usize, tokens: &[usize]) -> Result<String> {
    let mut out = format!("{SAVINGS_CSV_HEADER}\n");
    for &rate in rates {
        for &n in tokens {
            let rel = relative_compute(rate, n as f64, width as f64)?;
            writeln!(out, "{rate},{n},{width},{rel:.6}").unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use num_bigint::BigUint;
    use proptest::prelude::*;

    use super::*;

    fn big_closed_form(l: u64, n: u64, d: u64) -> BigUint {
        let (l, n, d) = (BigUint::from(l), BigUint::from(n), BigUint::from(d));
        BigUint::from(2u32) * &l * &n * &n * &d + BigUint::from(4u32) * &l * &n * &d * &d
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(theoretical_flops(12, 196, 768), 6_257_147_904);
        assert_eq!(theoretical_flops(1, 1, 1), 6);
        assert_eq!(
            theoretical_flops(24, 196, 768),
            2 * theoretical_flops(12, 196, 768)
        );
    }

    #[test]
    fn relative_compute_values() {
        assert_eq!(relative_compute(1.0, 196.0, 768.0).unwrap(), 1.0);
        let r = relative_compute(0.5, 196.0, 768.0).unwrap();
        assert!((r - 0.5 * 1634.0 / 1732.0).abs() < 1e-15);
        assert!((r - 0.4717).abs() < 1e-4);
        for rate in [0.5, 0.25] {
            let r = relative_compute(rate, 1e7, 768.0).unwrap();
            assert!((r - rate * rate).abs() < 1e-3);
        }
        assert!(matches!(
            relative_compute(0.0, 10.0, 1.0),
            Err(Error::InvalidRate(_))
        ));
    }

    #[test]
    fn empirical_anchor_base_224() {
        let macs = empirical_flops(&Variant::Base.config(224, 16), 196).unwrap() as f64;
        assert!((macs / 17.58e9 - 1.0).abs() < 0.02, "{macs}");
    }

    #[test]
    fn empirical_is_monotone_and_linear_in_depth() {
        let cfg = ModelConfig {
            depth: 2,
            width: 32,
            heads: 2,
            patch: 4,
            image_h: 32,
            image_w: 32,
            channels: 1,
            classes: 4,
            mlp_ratio: 4,
        };
        let mut prev = 0;
        for k in 1..=64 {
            let f = empirical_flops(&cfg, k).unwrap();
            assert!(f > prev);
            prev = f;
        }
        let deeper = ModelConfig { depth: 4, ..cfg };
        for k in [1, 17, 64] {
            // f(L) = c + L·b exactly
            let one = empirical_flops(&ModelConfig { depth: 1, ..cfg }, k).unwrap();
            let two = empirical_flops(&cfg, k).unwrap();
            let four = empirical_flops(&deeper, k).unwrap();
            assert_eq!(four - two, 2 * (two - one));
        }
        assert!(empirical_flops(&cfg, 0).is_err());
        assert!(empirical_flops(&cfg, 65).is_err());
    }

    #[test]
    fn empirical_savings_trail_theoretical() {
        for v in Variant::ALL {
            for image in [224, 448, 896] {
                let cfg = v.config(image, 16);
                for rate in [0.05, 0.1, 0.25, 0.5, 0.75, 1.0] {
                    let r = cost_report(&cfg, rate, 1).unwrap();
                    assert!(
                        r.relative_empirical >= r.relative_theoretical,
                        "{} r={rate}",
                        r.config_id
                    );
                    assert!(r.relative_empirical > 0.0 && r.relative_empirical <= 1.0);
                    if rate == 1.0 {
                        assert_eq!((r.relative_empirical, r.relative_theoretical), (1.0, 1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn activation_memory_properties() {
        let cfg = Variant::Base.config(896, 16);
        assert_eq!(activation_memory(&cfg, 3136, 0), 0);
        let ratio =
            activation_memory(&cfg, 784, 8) as f64 / activation_memory(&cfg, 3136, 8) as f64;
        assert!((0.10..=0.25).contains(&ratio), "{ratio}");

        // Attention-dominated regime: halving k shrinks memory by more than half.
        let long = ModelConfig {
            depth: 2,
            width: 16,
            heads: 4,
            patch: 1,
            image_h: 64,
            image_w: 64,
            channels: 1,
            classes: 2,
            mlp_ratio: 4,
        };
        let n = long.num_patches();
        let half =
            activation_memory(&long, n / 2, 1) as f64 / activation_memory(&long, n, 1) as f64;
        assert!(half < 0.5, "{half}");

        let small = ModelConfig {
            depth: 2,
            width: 32,
            heads: 2,
            patch: 4,
            image_h: 32,
            image_w: 32,
            channels: 1,
            classes: 4,
            mlp_ratio: 4,
        };
        let base = activation_memory(&small, 32, 4);
        assert!(activation_memory(&small, 33, 4) > base);
        assert!(activation_memory(&small, 32, 5) > base);
        assert!(activation_memory(&ModelConfig { depth: 3, ..small }, 32, 4) > base);
        assert!(activation_memory(&ModelConfig { width: 64, ..small }, 32, 4) > base);
    }

    #[test]
    fn csv_rows() {
        let csv = cost_csv(&[Variant::Tiny.config(224, 16)], &[1.0, 0.5], 1).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COST_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("tiny-224-p16,1,196,196,197,"));
        assert!(lines[2].starts_with("tiny-224-p16,0.5,196,98,99,"));
    }

    proptest! {
        #[test]
        fn closed_form_matches_big_integer_evaluation(l in 1u64..64, n in 1u64..5000, d in 1u64..4096) {
            prop_assert_eq!(BigUint::from(theoretical_flops(l, n, d)), big_closed_form(l, n, d));
        }
    }
}
