use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{meter, ShapeTracer, Var};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 16,
        heads: 2,
        patch: 4,
        image_h: 8,
        image_w: 8,
        channels: 1,
        classes: 3,
        mlp_ratio: 4,
    }
}

fn random_images(cfg: &ModelConfig, batch: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Tensor::from_fn(
        [batch, cfg.channels, cfg.image_h, cfg.image_w],
        |_| rng.random(),
    ))
    .unwrap()
}

/// Params with non-trivial values everywhere (biases, gains, CLS too), so
/// that gradient checks exercise every slot.
fn perturbed_params(cfg: ModelConfig, seed: u64) -> ViTParams {
    let mut p = ViTParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    p.tensors = p.tensors.map(|_, t| {
        let mut t = t.clone();
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        t
    });
    p
}

fn logits(params: &ViTParams, images: &ImageBatch, keep: Option<&[KeepSet]>) -> Tensor {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let (out, _) = logits_with_keep(&mut tape, &params.config, &pv, images, keep).unwrap();
    tape.value(out).clone()
}

#[test]
fn full_keep_set_matches_dropout_free_path_bitwise() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 1);
    let images = random_images(&cfg, 3, 2);
    let plain = logits(&params, &images, None);
    let all = [KeepSet::all(cfg.num_patches())];
    assert_eq!(plain, logits(&params, &images, Some(&all)));
}

#[test]
fn base_logits_shape_from_197_tokens() {
    let cfg = Variant::Base.config(224, 16);
    let mut tracer = ShapeTracer::new();
    let pv = Params::traced(&cfg);
    let patches = tracer.leaf_shape(&[2, 196, 768]);
    let tokens = embed(&mut tracer, &cfg, &pv, &patches).unwrap();
    assert_eq!(tokens.seq_len(), 197);
    assert_eq!(
        forward(&mut tracer, &cfg, &pv, &tokens).unwrap(),
        vec![2, 1000]
    );
}

#[test]
fn permuting_patch_tokens_leaves_logits_unchanged() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 3);
    let images = random_images(&cfg, 2, 4);
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let patches = tape.leaf(tokenizer::patchify(&images, cfg.patch).unwrap(), false);
    let tokens = embed(&mut tape, &cfg, &pv, &patches).unwrap();
    let base = forward(&mut tape, &cfg, &pv, &tokens).unwrap();
    let permuted_rows = vec![vec![0, 3, 1, 4, 2]];
    let shuffled = tape.gather_rows(&tokens.tokens, &permuted_rows).unwrap();
    let shuffled = TokenBatch {
        tokens: shuffled,
        ..tokens
    };
    let out = forward(&mut tape, &cfg, &pv, &shuffled).unwrap();
    for (a, b) in tape.value(base).data().iter().zip(tape.value(out).data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 5);
    let blk = &params.tensors.blocks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn([1, 1, 16], |_| rng.random_range(-1.0..1.0));

    let mut tape = Tape::new();
    let bv = params.register(&mut tape, false).blocks[0].clone();
    let xv = tape.leaf(x.clone(), false);
    let out = attention(&mut tape, &xv, &bv, cfg.heads).unwrap();

    let affine = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..cols)
            .map(|j| {
                b.data()[j]
                    + (0..rows)
                        .map(|i| x[i] * w.data()[i * cols + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let v = affine(x.data(), &blk.v_w, &blk.v_b);
    let want = affine(&v, &blk.proj_w, &blk.proj_b);
    for (a, b) in tape.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_mac_count_for_base_block() {
    let cfg = Variant::Base.config(224, 16);
    let pv = Params::traced(&cfg);
    let mut tracer = ShapeTracer::new();
    let x = tracer.leaf_shape(&[1, 197, 768]);
    let (_, macs) = meter::measure(|| attention(&mut tracer, &x, &pv.blocks[0], 12).unwrap());
    let (t, d) = (197u64, 768u64);
    assert_eq!(macs, 4 * t * d * d + 2 * t * t * d);
    assert_eq!(macs, 524_391_936);
}

#[test]
fn tape_and_tracer_count_the_same_macs() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 7);
    let images = random_images(&cfg, 3, 8);
    let keep: Vec<KeepSet> = (0..3)
        .map(|_| KeepSet {
            indices: vec![0, 2],
            num_patches: 4,
        })
        .collect();
    let (_, real) = meter::measure(|| logits(&params, &images, Some(&keep)));

    let mut tracer = ShapeTracer::new();
    let pv = Params::traced(&cfg);
    let patches = tracer.leaf_shape(&[3, 4, 16]);
    let (_, traced) = meter::measure(|| {
        let tokens = embed(&mut tracer, &cfg, &pv, &patches).unwrap();
        let tokens = sampler::apply_dropout(&mut tracer, tokens, &keep).unwrap();
        forward(&mut tracer, &cfg, &pv, &tokens).unwrap()
    });
    assert_eq!(real, traced);
}

#[test]
fn predict_probabilities() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 9);
    let images = random_images(&cfg, 4, 10);
    let probs = predict(&params, &images, None).unwrap();
    assert_eq!(probs.shape(), &[4, 3]);
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let full = predict(
        &params,
        &images,
        Some(EvalDropout {
            rate: 1.0,
            seed: 1,
            step: 0,
        }),
    )
    .unwrap();
    assert_eq!(full, probs);
    let dropped = predict(
        &params,
        &images,
        Some(EvalDropout {
            rate: 0.5,
            seed: 1,
            step: 0,
        }),
    )
    .unwrap();
    assert_ne!(dropped, probs);
    assert!(matches!(
        predict(
            &params,
            &images,
            Some(EvalDropout {
                rate: 0.0,
                seed: 1,
                step: 0
            })
        ),
        Err(Error::InvalidRate(_))
    ));
}

/// Loss used by the end-to-end gradient check.
fn loss_value(
    params: &ViTParams,
    images: &ImageBatch,
    labels: &[usize],
    keep: Option<&[KeepSet]>,
) -> f64 {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let (out, _) = logits_with_keep(&mut tape, &params.config, &pv, images, keep).unwrap();
    let loss = tape.smoothed_cross_entropy(&out, labels, 0.1).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 11);
    let images = random_images(&cfg, 2, 12);
    let labels = [2, 0];
    let keep = vec![
        KeepSet {
            indices: vec![0, 1, 3],
            num_patches: 4,
        },
        KeepSet {
            indices: vec![1, 2, 3],
            num_patches: 4,
        },
    ];

    for keep in [None, Some(keep.as_slice())] {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape, true);
        let (out, _) = logits_with_keep(&mut tape, &cfg, &pv, &images, keep).unwrap();
        let loss = tape.smoothed_cross_entropy(&out, &labels, 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let handles: Vec<(String, Var)> = pv.named().into_iter().map(|(n, v)| (n, *v)).collect();

        let h = 1e-5;
        for (i, (name, var)) in handles.iter().enumerate() {
            let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_default();
            let numel = params.named()[i].1.numel();
            let mut numeric = vec![0.0; numel];
            for j in 0..numel {
                let bump = |delta: f64| {
                    let mut p = params.clone();
                    let mut slots: Vec<Tensor> =
                        p.named().into_iter().map(|(_, t)| t.clone()).collect();
                    slots[i].data_mut()[j] += delta;
                    p.tensors = Params::from_ordered(cfg.depth, slots);
                    loss_value(&p, &images, &labels, keep)
                };
                numeric[j] = (bump(h) - bump(-h)) / (2.0 * h);
            }
            if analytic.is_empty() {
                assert!(
                    numeric.iter().all(|v| v.abs() < 1e-9),
                    "{name}: missing gradient"
                );
                continue;
            }
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            // Key biases shift every score of a softmax row equally, so
            // their true gradient is zero; compare those absolutely.
            if scale < 1e-8 {
                assert!(diff < 1e-8, "{name}: abs err {diff}");
                continue;
            }
            let rel = diff / scale;
            assert!(rel < 1e-4, "{name}: rel err {rel}");
        }
    }
}

#[test]
fn dropped_patches_receive_no_gradient() {
    let cfg = tiny_config();
    let params = perturbed_params(cfg, 13);
    let images = random_images(&cfg, 1, 14);
    let keep = [KeepSet {
        indices: vec![1, 2],
        num_patches: 4,
    }];

    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let patches = tape.leaf(tokenizer::patchify(&images, cfg.patch).unwrap(), true);
    let tokens = embed(&mut tape, &cfg, &pv, &patches).unwrap();
    let tokens = sampler::apply_dropout(&mut tape, tokens, &keep).unwrap();
    let out = forward(&mut tape, &cfg, &pv, &tokens).unwrap();
    let loss = tape.smoothed_cross_entropy(&out, &[1], 0.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(patches).unwrap();
    for (row, chunk) in g.chunks(16).enumerate() {
        let dropped = !keep[0].indices.contains(&row);
        assert_eq!(chunk.iter().all(|&v| v == 0.0), dropped, "patch {row}");
    }
    // Positional rows of dropped patches get nothing either.
    let gp = grads.get(pv.pos).unwrap();
    for (slot, chunk) in gp.chunks(16).enumerate() {
        let live = slot == 0 || keep[0].indices.contains(&(slot - 1));
        assert_eq!(chunk.iter().any(|&v| v != 0.0), live, "pos row {slot}");
    }
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = Variant::Base.config(224, 16);
    let (d, n, k, hid) = (768, 196, 1000, 3072);
    let block = 4 * (d * d + d) + 4 * d + (d * hid + hid) + (hid * d + d);
    let want = 16 * 16 * 3 * d + (n + 1) * d + d + 12 * block + 2 * d + d * k + k;
    assert_eq!(cfg.parameter_count(), want);
    let small = tiny_config();
    assert_eq!(
        ViTParams::init(small, 0).unwrap().parameter_count(),
        small.parameter_count()
    );
}

#[test]
fn init_scheme() {
    let p = ViTParams::init(tiny_config(), 3).unwrap();
    for (name, t) in p.named() {
        let slot = name.rsplit('.').next().unwrap();
        if slot == "cls" || slot.ends_with("_b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else if slot.ends_with("_g") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        } else {
            assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
            assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }
    assert_eq!(ViTParams::init(tiny_config(), 3).unwrap(), p);
    assert_ne!(ViTParams::init(tiny_config(), 4).unwrap(), p);
}

#[test]
fn config_validation() {
    let mut c = tiny_config();
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.image_h = 10;
    assert!(matches!(c.validate(), Err(Error::IndivisibleImage { .. })));
    assert_eq!("large".parse::<Variant>().unwrap(), Variant::Large);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let p = perturbed_params(tiny_config(), 15);
    let bytes = write_checkpoint(&p);
    assert_eq!(&bytes[..4], b"PDVT");
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(write_checkpoint(&back), bytes);

    assert!(matches!(read_checkpoint(b""), Err(Error::BadMagic { .. })));
    assert!(matches!(
        read_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::TruncatedFile(_))
    ));
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(
        read_checkpoint(&wrong_version),
        Err(Error::UnsupportedVersion(9))
    ));
}
