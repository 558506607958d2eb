//! Image-classification datasets: the TID binary format, split files and the
//! seeded synthetic benchmark.
//!
//! TID layout (little-endian):
//!
//! ```text
//! "TID1" | u32 count | u16 H | u16 W | u8 C | u16 K
//! count × ( H·W·C pixel bytes, row-major with channels interleaved | u16 label )
//! ```
//!
//! Split files hold three u32 counts (train, val, test) followed by the
//! three u32 index arrays.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampler::keyed_rng;
use crate::tokenizer::ImageBatch;

pub const TID_MAGIC: &[u8; 4] = b"TID1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 80/10/10 in file order.
    pub fn default_for(count: usize) -> Self {
        let train = count * 8 / 10;
        let val = count / 10;
        Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..count).collect(),
        }
    }

    fn validate(&self, count: usize) -> Result<()> {
        let mut seen = vec![false; count];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= count {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    extent: count,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for list in [&self.train, &self.val, &self.test] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        }
        for list in [&self.train, &self.val, &self.test] {
            for &i in list {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(i * 4..i * 4 + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or(Error::TruncatedFile("split file"))
        };
        let counts = [word(0)?, word(1)?, word(2)?];
        let mut at = 3;
        let mut lists = counts.iter().map(|&n| {
            let list = (at..at + n).map(word).collect::<Result<Vec<_>>>();
            at += n;
            list
        });
        Ok(Splits {
            train: lists.next().unwrap()?,
            val: lists.next().unwrap()?,
            test: lists.next().unwrap()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// `count × H·W·C` bytes, channels interleaved.
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub splits: Splits,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_bytes(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_bytes() {
            return Err(Error::InvalidConfig(
                "pixel store size does not match image count".into(),
            ));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes,
            });
        }
        self.splits.validate(self.len())
    }

    pub fn to_tid_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(15 + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(TID_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        for (img, &label) in self.pixels.chunks(self.image_bytes()).zip(&self.labels) {
            out.extend_from_slice(img);
            out.extend_from_slice(&(label as u16).to_le_bytes());
        }
        out
    }

    /// Parses a TID file; splits default to 80/10/10.
    pub fn from_tid_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TID_MAGIC {
            return Err(Error::BadMagic { expected: "TID1" });
        }
        if bytes.len() < 15 {
            return Err(Error::TruncatedFile("TID header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let (height, width, channels, classes) =
            (u16_at(8), u16_at(10), bytes[12] as usize, u16_at(13));
        let image_bytes = height * width * channels;
        let record = image_bytes + 2;
        let body = &bytes[15..];
        if body.len() < count * record {
            return Err(Error::TruncatedFile("TID records"));
        }
        let mut pixels = Vec::with_capacity(count * image_bytes);
        let mut labels = Vec::with_capacity(count);
        for rec in body[..count * record].chunks(record) {
            pixels.extend_from_slice(&rec[..image_bytes]);
            let label = u16::from_le_bytes([rec[image_bytes], rec[image_bytes + 1]]) as usize;
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            labels.push(label);
        }
        let ds = Dataset {
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
            splits: Splits::default_for(count),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tid_bytes()).map_err(|e| Error::io(path, e))?;
        let split = split_path(path);
        std::fs::write(&split, self.splits.to_bytes()).map_err(|e| Error::io(split, e))
    }

    /// Pixels of image `index` as `[C,H,W]` floats scaled to `[-1,1]`, optionally
    /// flipped horizontally and shifted by `(dy, dx)` with zero padding.
    fn image_chw(&self, index: usize, flip: bool, shift: (isize, isize), out: &mut Vec<f64>) {
        let (h, w, c) = (self.height, self.width, self.channels);
        let img = &self.pixels[index * self.image_bytes()..(index + 1) * self.image_bytes()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + shift.0;
                    let sx0 = x as isize + shift.1;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        img[(sy as usize * w + sx as usize) * c + ch] as f64 / 127.5 - 1.0
                    };
                    out.push(v);
                }
            }
        }
    }

    /// Stacks the given images into a batch, without augmentation.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        self.batch_augmented(indices, &Augment::default(), 0, 0)
    }

    /// Stacks the given images, applying `aug` with randomness keyed by
    /// `(seed, epoch, image index)`.
    pub fn batch_augmented(
        &self,
        indices: &[usize],
        aug: &Augment,
        seed: u64,
        epoch: u64,
    ) -> Result<ImageBatch> {
        let mut data = Vec::with_capacity(indices.len() * self.image_bytes());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    extent: self.len(),
                });
            }
            let mut rng = keyed_rng(&[seed, 0x6175_67, epoch, i as u64]);
            let flip = aug.flip && rng.random_bool(0.5);
            let pad = aug.crop_pad as isize;
            let shift = if pad > 0 {
                (
                    rng.random_range(-pad as i64..=pad as i64) as isize,
                    rng.random_range(-pad as i64..=pad as i64) as isize,
                )
            } else {
                (0, 0)
            };
            self.image_chw(i, flip, shift, &mut data);
        }
        ImageBatch::new(Tensor::new(
            [indices.len(), self.channels, self.height, self.width],
            data,
        )?)
    }
}

/// Light training-time augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Zero-pad by this many pixels, then crop back at a random offset.
    pub crop_pad: usize,
}

fn split_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("split")
}

/// Reads a TID file, plus its `.split` sibling when present.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset::from_tid_bytes(&bytes)?;
    let split = split_path(path);
    if split.exists() {
        let bytes = std::fs::read(&split).map_err(|e| Error::io(&split, e))?;
        ds.splits = Splits::from_bytes(&bytes)?;
        ds.splits.validate(ds.len())?;
    }
    Ok(ds)
}

/// Parameters of the seeded 4-class synthetic benchmark.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Image side in pixels; must be a multiple of [`GLYPH`].
    pub size: usize,
    /// Standard deviation of the additive pixel noise (pixel range 0..1).
    pub noise: f64,
    /// Probability that a cell shows the image's own class glyph.
    pub signal: f64,
    /// Probability that a cell shows a glyph of a uniformly random class.
    pub clutter: f64,
    /// Cells per image carrying the class's key glyph, a decisive but
    /// localized cue.
    pub keys: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            train: 4000,
            val: 500,
            test: 500,
            size: 32,
            noise: 0.2,
            signal: 0.1,
            clutter: 0.3,
            keys: 1,
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 4;

/// Side of one glyph cell in pixels.
pub const GLYPH: usize = 4;

/// Horizontal bar, vertical bar, hollow square, centre dot. All are
/// mirror-symmetric, so horizontal flips preserve labels.
const GLYPHS: [[u8; 16]; SYNTHETIC_CLASSES] = [
    [0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0],
    [1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1],
    [0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0],
];

/// Key glyphs are drawn brighter than texture glyphs.
const KEY_GAIN: f64 = 1.6;

/// Per-class key glyphs: cross, X, corners, solid block.
const KEYS: [[u8; 16]; SYNTHETIC_CLASSES] = [
    [0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0],
    [1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1],
    [1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1],
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
];

/// Grayscale glyph scenes. The image is tiled into 4×4 cells; each cell
/// independently shows the class glyph (probability `signal`), a glyph of a
/// random class (`clutter`), or plain background. Then `keys` distinct
/// random cells are overwritten with the class's key glyph. Glyph contrast
/// and the background level vary per image and Gaussian noise is added.
///
/// The key is an object-like cue: decisive when present, but it occupies a
/// single patch, so it is often dropped at low keep rates. The texture is
/// context: weak per cell, informative in aggregate.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    assert!(
        spec.size > 0 && spec.size % GLYPH == 0,
        "synthetic image size must be a positive multiple of {GLYPH}"
    );
    let count = spec.train + spec.val + spec.test;
    let s = spec.size;
    let cells = s / GLYPH;
    let mut pixels = Vec::with_capacity(count * s * s);
    let mut labels = Vec::with_capacity(count);
    let mut canvas = vec![0.0; s * s];
    for i in 0..count {
        let mut rng = keyed_rng(&[spec.seed, 0x7379_6e74, i as u64]);
        let label = rng.random_range(0..SYNTHETIC_CLASSES);
        let background = rng.random_range(0.1..0.4);
        let contrast = rng.random_range(0.35..0.6);
        let mut cell_glyphs: Vec<Option<(&[u8; 16], f64)>> = (0..cells * cells)
            .map(|_| {
                let u: f64 = rng.random();
                if u < spec.signal {
                    Some((&GLYPHS[label], contrast))
                } else if u < spec.signal + spec.clutter {
                    Some((&GLYPHS[rng.random_range(0..SYNTHETIC_CLASSES)], contrast))
                } else {
                    None
                }
            })
            .collect();
        let key_cells =
            rand::seq::index::sample(&mut rng, cells * cells, spec.keys.min(cells * cells));
        for c in key_cells {
            cell_glyphs[c] = Some((&KEYS[label], KEY_GAIN * contrast));
        }
        canvas.fill(background);
        for (c, glyph) in cell_glyphs.iter().enumerate() {
            let Some((glyph, gain)) = glyph else { continue };
            let (cy, cx) = (c / cells, c % cells);
            for (j, &on) in glyph.iter().enumerate() {
                let (y, x) = (cy * GLYPH + j / GLYPH, cx * GLYPH + j % GLYPH);
                canvas[y * s + x] += gain * on as f64;
            }
        }
        for &v in &canvas {
            let v = (v + spec.noise * gaussian(&mut rng)).clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
        labels.push(label);
    }
    let (a, b) = (spec.train, spec.train + spec.val);
    Dataset {
        height: s,
        width: s,
        channels: 1,
        classes: SYNTHETIC_CLASSES,
        pixels,
        labels,
        splits: Splits {
            train: (0..a).collect(),
            val: (a..b).collect(),
            test: (b..count).collect(),
        },
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let (u1, u2): (f64, f64) = (rng.random(), rng.random());
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        synthetic(&SyntheticSpec {
            seed: 3,
            train: 6,
            val: 2,
            test: 2,
            size: 8,
            noise: 0.1,
            ..Default::default()
        })
    }

    #[test]
    fn tid_round_trip_is_bitwise() {
        let ds = small();
        assert_eq!(ds.len(), 10);
        let bytes = ds.to_tid_bytes();
        let mut back = Dataset::from_tid_bytes(&bytes).unwrap();
        back.splits = ds.splits.clone();
        assert_eq!(back, ds);
        assert_eq!(back.to_tid_bytes(), bytes);
    }

    #[test]
    fn tid_errors() {
        assert!(matches!(
            Dataset::from_tid_bytes(b""),
            Err(Error::BadMagic { .. })
        ));
        let bytes = small().to_tid_bytes();
        assert!(matches!(
            Dataset::from_tid_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile(_))
        ));
        let mut bad = bytes.clone();
        let first_label = 15 + 64;
        bad[first_label..first_label + 2].copy_from_slice(&4u16.to_le_bytes());
        assert!(matches!(
            Dataset::from_tid_bytes(&bad),
            Err(Error::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
    }

    #[test]
    fn files_and_splits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.tid");
        let ds = small();
        ds.save(&path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert!(matches!(
            Splits::from_bytes(&[1, 0, 0]),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = small();
        ds.splits.val.push(0);
        assert!(matches!(ds.validate(), Err(Error::DuplicateIndex(0))));
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let spec = SyntheticSpec {
            seed: 1,
            train: 400,
            val: 0,
            test: 0,
            size: 16,
            noise: 0.2,
            ..Default::default()
        };
        let a = synthetic(&spec);
        assert_eq!(a, synthetic(&spec));
        assert_ne!(a, synthetic(&SyntheticSpec { seed: 2, ..spec }));
        for c in 0..SYNTHETIC_CLASSES {
            let n = a.labels.iter().filter(|&&l| l == c).count();
            assert!((70..=130).contains(&n), "class {c}: {n}");
        }
    }

    #[test]
    fn batches_and_augmentation() {
        let ds = small();
        let plain = ds.batch(&[0, 1]).unwrap();
        assert_eq!(plain.tensor().shape(), &[2, 1, 8, 8]);
        assert!(plain
            .tensor()
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(plain.tensor().data()[0], ds.pixels[0] as f64 / 127.5 - 1.0);

        let flip = Augment {
            flip: true,
            crop_pad: 0,
        };
        let flipped = (0..16)
            .map(|e| ds.batch_augmented(&[0], &flip, 9, e).unwrap())
            .collect::<Vec<_>>();
        let mirrored: Vec<f64> = plain.tensor().data()[..64]
            .chunks(8)
            .flat_map(|r| r.iter().rev().copied())
            .collect();
        assert!(flipped
            .iter()
            .any(|b| b.tensor().data() == mirrored.as_slice()));
        assert!(flipped
            .iter()
            .any(|b| b.tensor().data() == &plain.tensor().data()[..64]));
        assert_eq!(
            ds.batch_augmented(&[0], &flip, 9, 3).unwrap(),
            ds.batch_augmented(&[0], &flip, 9, 3).unwrap()
        );
    }
}
