//! Which patch tokens survive a training step.
//!
//! Every draw is a pure function of `(seed, step, sample)`: the generator is
//! re-keyed per draw, so runs can be resumed at any step without replaying
//! the stream.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Ops;
use crate::tokenizer::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Uniformly random subset of patches.
    Random,
    /// Evenly spaced sub-lattice with a random phase.
    Uniform,
    /// Intersection of randomly chosen grid rows and columns.
    Structured,
    /// One contiguous rectangle at a random position.
    Cropping,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::Uniform,
        Strategy::Structured,
        Strategy::Cropping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uniform => "uniform",
            Strategy::Structured => "structured",
            Strategy::Cropping => "cropping",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sampling strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KeepRate {
    Point(f64),
    /// Resampled uniformly from `[lo, hi]` at every step.
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl KeepRate {
    pub fn validate(self) -> Result<Self> {
        let ok = |r: f64| r > 0.0 && r <= 1.0;
        match self {
            KeepRate::Point(r) if !ok(r) => Err(Error::InvalidRate(r)),
            KeepRate::Interval { lo, .. } if !ok(lo) => Err(Error::InvalidRate(lo)),
            KeepRate::Interval { hi, .. } if !ok(hi) => Err(Error::InvalidRate(hi)),
            KeepRate::Interval { lo, hi } if lo > hi => Err(Error::InvalidConfig(format!(
                "keep-rate interval [{lo}, {hi}] is reversed"
            ))),
            _ => Ok(self),
        }
    }

    /// Expected keep rate.
    pub fn mean(self) -> f64 {
        match self {
            KeepRate::Point(r) => r,
            KeepRate::Interval { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub strategy: Strategy,
    pub rate: KeepRate,
    pub seed: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Draw one keep set per step for the whole batch instead of one per image.
    pub share_across_batch: bool,
}

impl SamplingSpec {
    pub fn new(
        strategy: Strategy,
        rate: KeepRate,
        seed: u64,
        grid_rows: usize,
        grid_cols: usize,
    ) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 {
            return Err(Error::InvalidConfig("empty patch grid".into()));
        }
        Ok(SamplingSpec {
            strategy,
            rate: rate.validate()?,
            seed,
            grid_rows,
            grid_cols,
            share_across_batch: false,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

/// Sorted, unique patch indices kept by one draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepSet {
    pub indices: Vec<usize>,
    pub num_patches: usize,
}

impl KeepSet {
    pub fn all(num_patches: usize) -> Self {
        KeepSet {
            indices: (0..num_patches).collect(),
            num_patches,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn effective_rate(&self) -> f64 {
        self.indices.len() as f64 / self.num_patches as f64
    }
}

/// Number of patches kept at rate `rate` out of `num_patches`:
/// `max(1, floor(rate · num_patches))`.
///
/// The product gets a 1e-9 nudge before flooring so that rates written in
/// decimal (0.29 · 100 = 28.999…) land on the intended integer.
pub fn kept_count(rate: f64, num_patches: usize) -> usize {
    ((rate * num_patches as f64 + 1e-9).floor() as usize).clamp(1, num_patches)
}

const RATE_STREAM: u64 = 0x7261_7465; // "rate"
const KEEP_STREAM: u64 = 0x6b65_6570; // "keep"

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator keyed by a tuple of counters.
pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let key = parts
        .iter()
        .fold(0x5eed_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// The keep rate used at `step`. Only valid for interval specs.
pub fn draw_rate(spec: &SamplingSpec, step: u64) -> Result<f64> {
    let KeepRate::Interval { lo, hi } = spec.rate else {
        return Err(Error::IntervalInactive);
    };
    if lo == hi {
        return Ok(lo);
    }
    let u: f64 = keyed_rng(&[spec.seed, RATE_STREAM, step]).random();
    Ok(lo + (hi - lo) * u)
}

/// Keep rate in force at `step`, for point and interval modes alike.
pub fn rate_at(spec: &SamplingSpec, step: u64) -> Result<f64> {
    match spec.rate {
        KeepRate::Point(r) => Ok(r),
        KeepRate::Interval { .. } => draw_rate(spec, step),
    }
}

pub fn draw_keep_set(spec: &SamplingSpec, step: u64) -> Result<KeepSet> {
    draw_keep_set_for(spec, step, 0)
}

/// Keep set for image `sample` of the batch at `step`.
pub fn draw_keep_set_for(spec: &SamplingSpec, step: u64, sample: u64) -> Result<KeepSet> {
    let rate = rate_at(spec, step)?;
    let rate = KeepRate::Point(rate).validate().map(KeepRate::mean)?;
    let (rows, cols) = (spec.grid_rows, spec.grid_cols);
    let n = rows * cols;
    if n == 0 {
        return Err(Error::InvalidConfig("empty patch grid".into()));
    }
    let k = kept_count(rate, n);
    let mut rng = keyed_rng(&[spec.seed, KEEP_STREAM, step, sample]);
    let mut indices = match spec.strategy {
        Strategy::Random => subset(&mut rng, n, k),
        Strategy::Uniform => uniform_lattice(&mut rng, rows, cols, rate, k),
        Strategy::Structured => structured(&mut rng, rows, cols, rate, k),
        Strategy::Cropping => crop(&mut rng, rows, cols, k),
    };
    indices.sort_unstable();
    debug_assert_eq!(indices.len(), k);
    Ok(KeepSet {
        indices,
        num_patches: n,
    })
}

/// Keep sets for a whole batch: one per image, or a single shared one.
pub fn draw_batch(spec: &SamplingSpec, step: u64, batch: usize) -> Result<Vec<KeepSet>> {
    if spec.share_across_batch {
        return Ok(vec![draw_keep_set(spec, step)?]);
    }
    (0..batch as u64)
        .map(|s| draw_keep_set_for(spec, step, s))
        .collect()
}

/// `k` distinct values from `0..n` by partial Fisher–Yates (unsorted).
fn subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// `count` evenly spaced distinct values in `0..extent`, shifted by `phase`
/// (`phase < extent`).
fn spaced(count: usize, extent: usize, phase: usize) -> impl Iterator<Item = usize> {
    (0..count).map(move |i| (i * extent + phase) / count)
}

/// Rows × cols of a sub-lattice holding at least `k` cells, with the row
/// count close to `√rate · rows`.
fn lattice_dims(rows: usize, cols: usize, rate: f64, k: usize) -> (usize, usize) {
    let mut nr = ((rate.sqrt() * rows as f64 - 1e-9).ceil() as usize).clamp(1, rows);
    let nc = k.div_ceil(nr).clamp(1, cols);
    if nr * nc < k {
        nr = k.div_ceil(nc);
    }
    (nr, nc)
}

fn uniform_lattice(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    rate: f64,
    k: usize,
) -> Vec<usize> {
    let (nr, nc) = lattice_dims(rows, cols, rate, k);
    let row_ids: Vec<usize> = spaced(nr, rows, rng.random_range(0..rows)).collect();
    let col_ids: Vec<usize> = spaced(nc, cols, rng.random_range(0..cols)).collect();
    let cells: Vec<usize> = row_ids
        .iter()
        .flat_map(|&r| col_ids.iter().map(move |&c| r * cols + c))
        .collect();
    if cells.len() == k {
        return cells;
    }
    // Thin the lattice evenly down to k cells.
    let m = cells.len();
    spaced(k, m, rng.random_range(0..m))
        .map(|i| cells[i])
        .collect()
}

fn structured(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64, k: usize) -> Vec<usize> {
    let (nr, nc) = lattice_dims(rows, cols, rate, k);
    let mut row_ids = subset(rng, rows, nr);
    let mut col_ids = subset(rng, cols, nc);
    row_ids.sort_unstable();
    col_ids.sort_unstable();
    let cells: Vec<usize> = row_ids
        .iter()
        .flat_map(|&r| col_ids.iter().map(move |&c| r * cols + c))
        .collect();
    if cells.len() == k {
        return cells;
    }
    subset(rng, cells.len(), k)
        .into_iter()
        .map(|i| cells[i])
        .collect()
}

fn crop(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize) -> Vec<usize> {
    let mut h = ((k as f64 * rows as f64 / cols as f64).sqrt().round() as usize).clamp(1, rows);
    let w = k.div_ceil(h).clamp(1, cols);
    if h * w < k {
        h = k.div_ceil(w);
    }
    let top = rng.random_range(0..=rows - h);
    let left = rng.random_range(0..=cols - w);
    // Row-major cells of the rectangle; a partial last row absorbs any excess.
    (0..h)
        .flat_map(|dy| (0..w).map(move |dx| (top + dy) * cols + left + dx))
        .take(k)
        .collect()
}

/// Keeps the CLS token and the patches in `keep` (ascending original order).
/// `keep` holds one set per batch element or one shared set.
pub fn apply_dropout<O: Ops>(
    ops: &mut O,
    tokens: TokenBatch<O::Var>,
    keep: &[KeepSet],
) -> Result<TokenBatch<O::Var>> {
    if tokens.kept_indices.is_some() {
        return Err(Error::DoubleDropout);
    }
    if !tokens.has_cls {
        return Err(Error::MissingCls);
    }
    let n = tokens.num_patches();
    if let Some(bad) = keep.iter().find(|k| k.num_patches != n) {
        return Err(Error::shape(
            "apply_dropout",
            format!("keep set for {} patches, grid has {n}", bad.num_patches),
        ));
    }
    if keep.is_empty() {
        return Err(Error::shape("apply_dropout", "no keep sets"));
    }
    let rows: Vec<Vec<usize>> = keep
        .iter()
        .map(|k| {
            std::iter::once(0)
                .chain(k.indices.iter().map(|&i| i + 1))
                .collect()
        })
        .collect();
    let gathered = ops.gather_rows(&tokens.tokens, &rows)?;
    Ok(TokenBatch {
        tokens: gathered,
        kept_indices: Some(keep.iter().map(|k| k.indices.clone()).collect()),
        ..tokens
    })
}
