//! Images to token sequences: patchify, project, add positions, prepend CLS.
//!
//! Patches are numbered row-major over the patch grid; every kept-index list
//! in the crate refers to this numbering.

use crate::error::{Error, Result};
use crate::numerics::{Ops, Tensor};

/// `[B, C, H, W]` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(
                "image batch",
                format!("expected [B,C,H,W], got {:?}", data.shape()),
            ));
        }
        Ok(ImageBatch { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Patch grid extents `(rows, cols)` for an image, or `IndivisibleImage`.
pub fn grid_dims(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::IndivisibleImage {
            height,
            width,
            patch,
        });
    }
    Ok((height / patch, width / patch))
}

/// `[B,C,H,W]` -> `[B, N, P·P·C]`. Each row holds one patch flattened as
/// `(channel, dy, dx)`.
pub fn patchify(images: &ImageBatch, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = (
        images.batch(),
        images.channels(),
        images.height(),
        images.width(),
    );
    let (rows, cols) = grid_dims(h, w, patch)?;
    let src = images.data.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for gr in 0..rows {
            for gc in 0..cols {
                for ch in 0..c {
                    for dy in 0..patch {
                        let y = gr * patch + dy;
                        let start = ((bi * c + ch) * h + y) * w + gc * patch;
                        out.extend_from_slice(&src[start..start + patch]);
                    }
                }
            }
        }
    }
    Tensor::new([b, rows * cols, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageBatch> {
    let (rows, cols) = grid_dims(height, width, patch)?;
    let s = patches.shape();
    if s.len() != 3 || s[1] != rows * cols || s[2] != patch * patch * channels {
        return Err(Error::shape(
            "unpatchify",
            format!("{s:?} for {channels}x{height}x{width}, P={patch}"),
        ));
    }
    let b = s[0];
    let src = patches.data();
    let mut out = vec![0.0; src.len()];
    let mut it = src.chunks(patch);
    for bi in 0..b {
        for gr in 0..rows {
            for gc in 0..cols {
                for ch in 0..channels {
                    for dy in 0..patch {
                        let y = gr * patch + dy;
                        let start = ((bi * channels + ch) * height + y) * width + gc * patch;
                        out[start..start + patch].copy_from_slice(it.next().unwrap());
                    }
                }
            }
        }
    }
    ImageBatch::new(Tensor::new([b, channels, height, width], out)?)
}

/// Embedded token sequences `[B, T, d]` plus the patch-grid geometry they
/// came from.
#[derive(Clone, Debug)]
pub struct TokenBatch<V> {
    pub tokens: V,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub has_cls: bool,
    /// Original patch indices kept per batch element (ascending), or one
    /// list shared by the batch. `None` means every patch is present.
    pub kept_indices: Option<Vec<Vec<usize>>>,
}

impl<V> TokenBatch<V> {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Sequence length the transformer sees, CLS included.
    pub fn seq_len(&self) -> usize {
        let kept = match &self.kept_indices {
            Some(lists) => lists[0].len(),
            None => self.num_patches(),
        };
        kept + usize::from(self.has_cls)
    }
}

/// Projects patches to width `d`, prepends CLS and adds the positional
/// table: `tokens[b,0] = cls + pos[0]`, `tokens[b,j+1] = patches[b,j]·proj + pos[j+1]`.
///
/// Positions are attached here, before any dropout, so a kept patch carries
/// its position with it.
pub fn embed_tokens<O: Ops>(
    ops: &mut O,
    patches: &O::Var,
    proj: &O::Var,
    pos: &O::Var,
    cls: &O::Var,
    grid: (usize, usize),
) -> Result<TokenBatch<O::Var>> {
    let n = ops.shape(patches).get(1).copied().unwrap_or(0);
    let d = ops.shape(proj).last().copied().unwrap_or(0);
    if n != grid.0 * grid.1 || ops.shape(pos) != [n + 1, d] {
        return Err(Error::shape(
            "embed_tokens",
            format!(
                "patches {:?}, grid {grid:?}, pos {:?}, width {d}",
                ops.shape(patches),
                ops.shape(pos)
            ),
        ));
    }
    let projected = ops.matmul(patches, proj)?;
    let with_cls = ops.prepend_row(&projected, cls)?;
    let tokens = ops.add(&with_cls, pos)?;
    Ok(TokenBatch {
        tokens,
        grid_rows: grid.0,
        grid_cols: grid.1,
        has_cls: true,
        kept_indices: None,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::{meter, ShapeTracer, Tape};

    fn images(b: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        ImageBatch::new(Tensor::from_fn([b, c, h, w], |i| (i % 251) as f64 / 250.0)).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(grid_dims(224, 224, 16).unwrap(), (14, 14));
        assert_eq!(grid_dims(896, 896, 16).map(|(r, c)| r * c).unwrap(), 3136);
        assert_eq!(
            patchify(&images(1, 1, 128, 128), 8).unwrap().shape(),
            &[1, 256, 64]
        );
        assert!(matches!(
            patchify(&images(1, 1, 30, 32), 4),
            Err(Error::IndivisibleImage {
                height: 30,
                width: 32,
                patch: 4
            })
        ));
    }

    #[test]
    fn patch_rows_are_row_major_blocks() {
        let img = ImageBatch::new(Tensor::from_fn([1, 1, 4, 4], |i| i as f64)).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_patches_give_position_table() {
        let (b, n, d) = (2, 4, 3);
        let pos = Tensor::from_fn([n + 1, d], |i| i as f64 * 0.5);
        let mut tape = Tape::new();
        let patches = tape.leaf(Tensor::zeros([b, n, 8]), false);
        let proj = tape.leaf(Tensor::zeros([8, d]), false);
        let pos_v = tape.leaf(pos.clone(), false);
        let cls = tape.leaf(Tensor::zeros([d]), false);
        let tb = embed_tokens(&mut tape, &patches, &proj, &pos_v, &cls, (2, 2)).unwrap();
        assert_eq!(tb.seq_len(), n + 1);
        let t = tape.value(tb.tokens);
        for bi in 0..b {
            assert_eq!(
                &t.data()[bi * (n + 1) * d..(bi + 1) * (n + 1) * d],
                pos.data()
            );
        }
    }

    #[test]
    fn embedding_mac_count_for_base_patchifier() {
        let mut tracer = ShapeTracer::new();
        let patches = tracer.leaf_shape(&[1, 196, 768]);
        let proj = tracer.leaf_shape(&[768, 768]);
        let pos = tracer.leaf_shape(&[197, 768]);
        let cls = tracer.leaf_shape(&[768]);
        let (tb, macs) = meter::measure(|| {
            embed_tokens(&mut tracer, &patches, &proj, &pos, &cls, (14, 14)).unwrap()
        });
        assert_eq!(macs, 115_605_504);
        assert_eq!(tb.tokens, vec![1, 197, 768]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn unpatchify_inverts_patchify(
            b in 1usize..3, c in 1usize..4, gr in 1usize..4, gc in 1usize..4, p in 1usize..5, seed in any::<u64>()
        ) {
            let (h, w) = (gr * p, gc * p);
            let img = ImageBatch::new(Tensor::from_fn([b, c, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 999.0)).unwrap();
            let back = unpatchify(&patchify(&img, p).unwrap(), c, h, w, p).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
