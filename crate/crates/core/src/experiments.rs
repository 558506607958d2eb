//! Experiment drivers on the seeded synthetic benchmark: keep-rate and
//! budget sweeps, the train/eval keep-rate robustness matrix, ensembles and
//! sampling-strategy comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::cost::empirical_flops;
use crate::error::{Error, Result};
use crate::manifest::{self, parse_keep, render_keep, train_config_to_kv, KvConfig, RunManifest};
use crate::model::{self, write_checkpoint, ModelConfig, Variant, ViTParams};
use crate::sampler::{kept_count, KeepRate, SamplingSpec, Strategy};
use crate::trainer::dataset::GLYPH;
use crate::trainer::{
    argmax, evaluate, synthetic, train, Dataset, SyntheticSpec, TrainConfig, TrainOutcome,
    SYNTHETIC_CLASSES,
};

/// The desk-scale benchmark ViT: 2 blocks, width 32, 2 heads, 4×4 patches
/// on 32×32 grayscale images, 4 classes.
pub fn benchmark_model() -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 32,
        heads: 2,
        patch: 4,
        image_h: 32,
        image_w: 32,
        channels: 1,
        classes: SYNTHETIC_CLASSES,
        mlp_ratio: 4,
    }
}

/// Evaluation batch size used by every driver.
const EVAL_BATCH: usize = 256;

/// Salt for the test-time keep sets of robustness evaluation; every model
/// in one matrix sees the same keep sets.
const EVAL_SALT: u64 = 0x6576_616c; // "eval"

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    KeepRate,
    ImageSize,
    PatchSize,
    Variant,
    Depth,
    Strategy,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::KeepRate,
        Axis::ImageSize,
        Axis::PatchSize,
        Axis::Variant,
        Axis::Depth,
        Axis::Strategy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::KeepRate => "keep_rate",
            Axis::ImageSize => "image_size",
            Axis::PatchSize => "patch_size",
            Axis::Variant => "variant",
            Axis::Depth => "depth",
            Axis::Strategy => "strategy",
        }
    }

    /// Relative FLOPs tolerance when a cell without an explicit rate has its
    /// keep rate chosen to match the base cell's budget.
    pub fn budget_tolerance(self) -> Option<f64> {
        match self {
            Axis::ImageSize => Some(0.15),
            Axis::Depth => Some(0.05),
            _ => None,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep axis {s:?}")))
    }
}

/// A point on a sweep axis, written `value` or `value@rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisValue {
    pub value: String,
    pub rate: Option<KeepRate>,
}

impl FromStr for AxisValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (value, rate) = match s.split_once('@') {
            Some((v, r)) => (v, Some(parse_keep(r)?)),
            None => (s, None),
        };
        if value.is_empty() {
            return Err(Error::InvalidConfig(format!("empty axis value in {s:?}")));
        }
        Ok(AxisValue {
            value: value.to_string(),
            rate,
        })
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rate {
            Some(r) => write!(f, "{}@{}", self.value, render_keep(r)),
            None => f.write_str(&self.value),
        }
    }
}

/// Parses a comma-separated list of axis values.
pub fn parse_values(s: &str) -> Result<Vec<AxisValue>> {
    s.split(',').map(|v| v.trim().parse()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub base: TrainConfig,
    pub data: SyntheticSpec,
    pub axis: Axis,
    pub values: Vec<AxisValue>,
    pub repeats: usize,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn new(
        base: TrainConfig,
        data: SyntheticSpec,
        axis: Axis,
        values: Vec<AxisValue>,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let plan = SweepPlan {
            base,
            data,
            axis,
            values,
            repeats: seeds.len(),
            seeds,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep has no axis values".into()));
        }
        if self.seeds.is_empty() || self.repeats != self.seeds.len() {
            return Err(Error::InvalidConfig(format!(
                "repeats ({}) must equal the number of seeds ({})",
                self.repeats,
                self.seeds.len()
            )));
        }
        self.base.validate()
    }

    /// Flat form of the whole plan; its hash names the sweep.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = train_config_to_kv(&self.base);
        kv.remove("seed");
        let d = &self.data;
        let extra = [
            ("axis", self.axis.name().to_string()),
            ("values", join(&self.values)),
            ("repeats", self.repeats.to_string()),
            ("seeds", join(&self.seeds)),
            ("data_seed", d.seed.to_string()),
            ("data_train", d.train.to_string()),
            ("data_val", d.val.to_string()),
            ("data_test", d.test.to_string()),
            ("data_size", d.size.to_string()),
            ("data_noise", d.noise.to_string()),
            ("data_signal", d.signal.to_string()),
            ("data_clutter", d.clutter.to_string()),
            ("data_keys", d.keys.to_string()),
        ];
        kv.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv
    }

    pub fn config_hash(&self) -> String {
        manifest::config_hash("sweep", &self.to_kv())
    }

    pub fn sweep_id(&self) -> String {
        format!("{}-{}", self.axis, &self.config_hash()[..12])
    }

    fn base_sampling(&self) -> (Strategy, KeepRate) {
        self.base
            .sampling
            .map(|s| (s.strategy, s.rate))
            .unwrap_or((Strategy::Random, KeepRate::Point(1.0)))
    }

    /// Forward FLOPs per image of the base cell.
    pub fn base_flops(&self) -> Result<u64> {
        let m = &self.base.model;
        let rate = self.base_sampling().1.mean();
        empirical_flops(m, kept_count(rate, m.num_patches()))
    }

    /// The training config and dataset spec of one cell.
    pub fn cell(&self, v: &AxisValue, seed: u64) -> Result<(TrainConfig, SyntheticSpec)> {
        let (mut strategy, base_rate) = self.base_sampling();
        let mut model = self.base.model;
        let mut data = self.data;
        let mut rate = v.rate;
        let num = || {
            v.value.parse::<usize>().map_err(|_| {
                Error::InvalidConfig(format!("{}: {:?} is not a count", self.axis, v.value))
            })
        };
        match self.axis {
            Axis::KeepRate => {
                if rate.is_some() {
                    return Err(Error::InvalidConfig(
                        "keep_rate values take no @rate".into(),
                    ));
                }
                rate = Some(parse_keep(&v.value)?);
            }
            Axis::ImageSize => {
                let s = num()?;
                if s % GLYPH != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic images must be a multiple of {GLYPH} pixels, got {s}"
                    )));
                }
                (model.image_h, model.image_w, data.size) = (s, s, s);
            }
            Axis::PatchSize => model.patch = num()?,
            Axis::Depth => model.depth = num()?,
            Axis::Variant => {
                (model.depth, model.width, model.heads) = v.value.parse::<Variant>()?.dims();
            }
            Axis::Strategy => strategy = v.value.parse()?,
        }
        model.validate()?;
        let rate = match (rate, self.axis.budget_tolerance()) {
            (Some(r), _) => r.validate()?,
            (None, Some(tol)) => matched_rate(&model, self.base_flops()?, tol)?,
            (None, None) => base_rate,
        };
        let share = self.base.sampling.is_some_and(|s| s.share_across_batch);
        let sampling = if rate == KeepRate::Point(1.0) {
            None
        } else {
            let (rows, cols) = model.grid();
            let mut spec = SamplingSpec::new(strategy, rate, seed, rows, cols)?;
            spec.share_across_batch = share;
            Some(spec)
        };
        let cfg = TrainConfig {
            model,
            sampling,
            seed,
            ..self.base.clone()
        };
        cfg.validate()?;
        Ok((cfg, data))
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Point keep rate `k/N` whose forward FLOPs come closest to `target`;
/// fails if the best is still more than `tol` (relative) away.
pub fn matched_rate(model: &ModelConfig, target: u64, tol: f64) -> Result<KeepRate> {
    let n = model.num_patches();
    // FLOPs grow with k: binary search for the first k at or above target.
    let (mut lo, mut hi) = (1, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if empirical_flops(model, mid)? < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let mut best = (lo, empirical_flops(model, lo)?);
    if lo > 1 {
        let below = empirical_flops(model, lo - 1)?;
        if target.abs_diff(below) < target.abs_diff(best.1) {
            best = (lo - 1, below);
        }
    }
    let err = target.abs_diff(best.1) as f64 / target as f64;
    if err > tol {
        return Err(Error::InvalidConfig(format!(
            "no keep rate brings {} FLOPs within {:.0}% of {target} (closest {} at k={})",
            model.depth,
            tol * 100.0,
            best.1,
            best.0
        )));
    }
    Ok(KeepRate::Point(best.0 as f64 / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub test_top1: f64,
    pub test_loss: f64,
    pub best_epoch: usize,
    pub val_top1: f64,
    /// Cumulative forward FLOPs over the whole run.
    pub train_flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell_id: String,
    pub value: String,
    pub seed: u64,
    /// Expected keep rate; NaN if the cell config itself was invalid.
    pub keep_rate: f64,
    /// Encoder sequence length (kept patches + CLS) at the expected rate.
    pub tokens: usize,
    pub flops_per_image: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub value: String,
    pub keep_rate: f64,
    pub tokens: usize,
    pub flops_per_image: u64,
    pub seeds: Vec<u64>,
    pub runs_ok: usize,
    pub mean_top1: f64,
    /// Sample standard deviation; 0 for a single run.
    pub sd_top1: f64,
    pub mean_train_flops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub sweep_id: String,
    pub config_hash: String,
    pub axis: Axis,
    /// Sorted by axis value, then seed.
    pub cells: Vec<CellResult>,
}

pub const CELLS_CSV_HEADER: &[&str] = &[
    "config_hash",
    "axis",
    "value",
    "seed",
    "cell_id",
    "status",
    "keep_rate",
    "tokens",
    "flops_per_image",
    "train_flops",
    "best_epoch",
    "val_top1",
    "test_top1",
    "test_loss",
    "error",
];

pub const SUMMARY_CSV_HEADER: &[&str] = &[
    "config_hash",
    "axis",
    "value",
    "keep_rate",
    "tokens",
    "flops_per_image",
    "seeds",
    "runs_ok",
    "test_top1",
    "test_top1_sd",
    "train_flops",
];

fn write_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

impl SweepReport {
    pub fn cells_csv(&self) -> String {
        let rows = self.cells.iter().map(|c| {
            let mut r = vec![
                self.config_hash.clone(),
                self.axis.to_string(),
                c.value.clone(),
                c.seed.to_string(),
                c.cell_id.clone(),
            ];
            match &c.outcome {
                Ok(m) => r.extend([
                    "ok".into(),
                    c.keep_rate.to_string(),
                    c.tokens.to_string(),
                    c.flops_per_image.to_string(),
                    m.train_flops.to_string(),
                    m.best_epoch.to_string(),
                    m.val_top1.to_string(),
                    m.test_top1.to_string(),
                    m.test_loss.to_string(),
                    String::new(),
                ]),
                Err(e) => {
                    r.push("failed".into());
                    r.extend(std::iter::repeat_n(String::new(), 8));
                    r.push(e.clone());
                }
            }
            r
        });
        write_csv(CELLS_CSV_HEADER, rows)
    }

    /// One row per axis value, aggregated over seeds. Values where every
    /// run failed keep their row with empty metrics.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for c in &self.cells {
            if out.last().is_none_or(|s| s.value != c.value) {
                out.push(SummaryRow {
                    value: c.value.clone(),
                    keep_rate: c.keep_rate,
                    tokens: c.tokens,
                    flops_per_image: c.flops_per_image,
                    seeds: Vec::new(),
                    runs_ok: 0,
                    mean_top1: f64::NAN,
                    sd_top1: f64::NAN,
                    mean_train_flops: f64::NAN,
                });
            }
            out.last_mut().unwrap().seeds.push(c.seed);
        }
        for row in &mut out {
            let ok: Vec<&CellMetrics> = self
                .cells
                .iter()
                .filter(|c| c.value == row.value)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            row.runs_ok = ok.len();
            if ok.is_empty() {
                continue;
            }
            let n = ok.len() as f64;
            let top1: Vec<f64> = ok.iter().map(|m| m.test_top1).collect();
            row.mean_top1 = top1.iter().sum::<f64>() / n;
            row.sd_top1 = if ok.len() < 2 {
                0.0
            } else {
                let ss: f64 = top1.iter().map(|t| (t - row.mean_top1).powi(2)).sum();
                (ss / (n - 1.0)).sqrt()
            };
            row.mean_train_flops = ok.iter().map(|m| m.train_flops as f64).sum::<f64>() / n;
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let num = |v: f64| {
            if v.is_finite() {
                v.to_string()
            } else {
                String::new()
            }
        };
        let rows = self.summary().into_iter().map(|s| {
            vec![
                self.config_hash.clone(),
                self.axis.to_string(),
                s.value,
                num(s.keep_rate),
                s.tokens.to_string(),
                s.flops_per_image.to_string(),
                s.seeds
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                s.runs_ok.to_string(),
                num(s.mean_top1),
                num(s.sd_top1),
                num(s.mean_train_flops),
            ]
        });
        write_csv(SUMMARY_CSV_HEADER, rows)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Numeric sort key of an axis value: the rate for keep-rate cells, the
/// number itself where it parses, otherwise none (sorted last, by name).
fn sort_key(axis: Axis, v: &AxisValue) -> Option<f64> {
    match axis {
        Axis::KeepRate => parse_keep(&v.value).ok().map(KeepRate::mean),
        _ => v.value.parse().ok(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains and tests every value × seed cell. A cell that fails is recorded
/// with its error and the sweep moves on; only an invalid plan or an I/O
/// failure aborts. With `out_dir`, writes
/// `<out_dir>/<sweep-id>/{summary.csv, cells.csv, manifest.json}` and one
/// `<cell-id>/{manifest.json, trainlog.csv, checkpoint.pdvt, metrics.csv}`
/// directory per cell.
pub fn run_sweep(plan: &SweepPlan, out_dir: Option<&Path>) -> Result<SweepReport> {
    plan.validate()?;
    let mut order: Vec<(usize, &AxisValue)> = plan.values.iter().enumerate().collect();
    order.sort_by(|a, b| {
        let (ka, kb) = (sort_key(plan.axis, a.1), sort_key(plan.axis, b.1));
        match (ka, kb) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.1.value.cmp(&b.1.value),
        }
        .then(a.0.cmp(&b.0))
    });

    let report_id = plan.sweep_id();
    let sweep_dir = out_dir.map(|d| d.join(&report_id));
    if let Some(dir) = &sweep_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        RunManifest::new("sweep", plan.to_kv()).write(dir.join("manifest.json"))?;
    }

    let mut datasets: BTreeMap<usize, Dataset> = BTreeMap::new();
    let mut cells = Vec::new();
    for (rank, (_, value)) in order.into_iter().enumerate() {
        for &seed in &plan.seeds {
            let cell_id = format!("{rank:02}-{}-s{seed}", sanitize(&value.to_string()));
            let mut cell = CellResult {
                cell_id,
                value: value.to_string(),
                seed,
                keep_rate: f64::NAN,
                tokens: 0,
                flops_per_image: 0,
                outcome: Err(String::new()),
            };
            let mut trained = None;
            let run = plan.cell(value, seed).and_then(|(cfg, spec)| {
                let n = cfg.model.num_patches();
                let rate = cfg.sampling.map_or(1.0, |s| s.rate.mean());
                let k = kept_count(rate, n);
                cell.keep_rate = rate;
                cell.tokens = k + 1;
                cell.flops_per_image = empirical_flops(&cfg.model, k)?;
                let data = datasets
                    .entry(spec.size)
                    .or_insert_with(|| synthetic(&spec));
                let out = train(&cfg, data)?;
                let test = evaluate(&out.best, data, &data.splits.test, None, EVAL_BATCH)?;
                let metrics = CellMetrics {
                    test_top1: test.top1,
                    test_loss: test.loss,
                    best_epoch: out.best_epoch,
                    val_top1: out.best_val_top1,
                    train_flops: out.total_flops,
                };
                trained = Some((cfg, out));
                Ok(metrics)
            });
            cell.outcome = run.map_err(|e| e.to_string());

            if let Some(dir) = &sweep_dir {
                let dir = dir.join(&cell.cell_id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let mut kv = match &trained {
                    Some((cfg, _)) => train_config_to_kv(cfg),
                    None => KvConfig::new(),
                };
                kv.insert("sweep".into(), report_id.clone());
                kv.insert("value".into(), cell.value.clone());
                kv.insert("seed".into(), seed.to_string());
                RunManifest::new("sweep-cell", kv).write(dir.join("manifest.json"))?;
                if let Some((_, out)) = &trained {
                    write_file(&dir.join("trainlog.csv"), out.log.to_csv())?;
                    write_file(&dir.join("checkpoint.pdvt"), write_checkpoint(&out.best))?;
                }
                let single = SweepReport {
                    sweep_id: report_id.clone(),
                    config_hash: plan.config_hash(),
                    axis: plan.axis,
                    cells: vec![cell.clone()],
                };
                write_file(&dir.join("metrics.csv"), single.cells_csv())?;
            }
            cells.push(cell);
        }
    }

    let report = SweepReport {
        sweep_id: report_id,
        config_hash: plan.config_hash(),
        axis: plan.axis,
        cells,
    };
    if let Some(dir) = &sweep_dir {
        write_file(&dir.join("summary.csv"), report.summary_csv())?;
        write_file(&dir.join("cells.csv"), report.cells_csv())?;
    }
    Ok(report)
}

/// One training run per strategy and seed at a fixed keep rate.
pub fn run_strategy_compare(
    base: &TrainConfig,
    data: SyntheticSpec,
    strategies: &[Strategy],
    rate: KeepRate,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<SweepReport> {
    let values = strategies
        .iter()
        .map(|s| AxisValue {
            value: s.name().to_string(),
            rate: Some(rate),
        })
        .collect();
    let plan = SweepPlan::new(base.clone(), data, Axis::Strategy, values, seeds.to_vec())?;
    run_sweep(&plan, out_dir)
}

pub const CURVE_SAME_RATE: &str = "trained-with-dropout@same-rate";
pub const CURVE_REDUCED_EVAL: &str = "full-trained@reduced-eval";
pub const CURVE_FULL_EVAL: &str = "dropout-trained@full-eval";

/// Test top-1 of models trained at `train_rates` (1.0 is the baseline)
/// evaluated at each of `eval_rates` with per-image random keep sets.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessMatrix {
    pub train_rates: Vec<f64>,
    pub eval_rates: Vec<f64>,
    /// `accuracy[i][j]`: model trained at `train_rates[i]`, evaluated at
    /// `eval_rates[j]`.
    pub accuracy: Vec<Vec<f64>>,
}

pub const ROBUSTNESS_CSV_HEADER: &str = "train_rate,eval_rate,top1";

fn position(rates: &[f64], r: f64) -> Option<usize> {
    rates.iter().position(|&x| (x - r).abs() < 1e-12)
}

impl RobustnessMatrix {
    pub fn get(&self, train_rate: f64, eval_rate: f64) -> Option<f64> {
        let i = position(&self.train_rates, train_rate)?;
        let j = position(&self.eval_rates, eval_rate)?;
        Some(self.accuracy[i][j])
    }

    /// Each dropout-trained model at its own training rate.
    pub fn same_rate_curve(&self) -> Vec<(f64, f64)> {
        self.train_rates
            .iter()
            .filter(|&&r| r < 1.0)
            .filter_map(|&r| Some((r, self.get(r, r)?)))
            .collect()
    }

    /// The full-trained model across eval rates; empty without a baseline.
    pub fn baseline_curve(&self) -> Vec<(f64, f64)> {
        self.eval_rates
            .iter()
            .filter_map(|&e| Some((e, self.get(1.0, e)?)))
            .collect()
    }

    /// Each dropout-trained model evaluated on every patch.
    pub fn full_eval_curve(&self) -> Vec<(f64, f64)> {
        self.train_rates
            .iter()
            .filter(|&&r| r < 1.0)
            .filter_map(|&r| Some((r, self.get(r, 1.0)?)))
            .collect()
    }

    /// The full matrix, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROBUSTNESS_CSV_HEADER}\n");
        for (t, row) in self.train_rates.iter().zip(&self.accuracy) {
            for (e, a) in self.eval_rates.iter().zip(row) {
                s.push_str(&format!("{t},{e},{a}\n"));
            }
        }
        s
    }

    /// The three named curves as `curve,keep_rate,top1`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,keep_rate,top1\n");
        for (name, pts) in [
            (CURVE_SAME_RATE, self.same_rate_curve()),
            (CURVE_REDUCED_EVAL, self.baseline_curve()),
            (CURVE_FULL_EVAL, self.full_eval_curve()),
        ] {
            for (r, a) in pts {
                s.push_str(&format!("{name},{r},{a}\n"));
            }
        }
        s
    }
}

/// Evaluates already-trained models on the test split. Eval rate 1.0 uses
/// every patch; lower rates draw keep sets from `eval_seed`, identical for
/// every model so the comparison is paired.
pub fn robustness_matrix(
    models: &[(f64, &ViTParams)],
    data: &Dataset,
    eval_rates: &[f64],
    eval_seed: u64,
) -> Result<RobustnessMatrix> {
    for &r in models.iter().map(|(r, _)| r).chain(eval_rates) {
        KeepRate::Point(r).validate()?;
    }
    let mut accuracy = Vec::with_capacity(models.len());
    for (_, params) in models {
        let row = eval_rates
            .iter()
            .map(|&e| {
                let drop = (e < 1.0).then_some((e, eval_seed));
                Ok(evaluate(params, data, &data.splits.test, drop, EVAL_BATCH)?.top1)
            })
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
    }
    Ok(RobustnessMatrix {
        train_rates: models.iter().map(|(r, _)| *r).collect(),
        eval_rates: eval_rates.to_vec(),
        accuracy,
    })
}

/// Trains one Random-strategy model per training rate from `base` and
/// evaluates the cross matrix.
pub fn run_robustness(
    base: &TrainConfig,
    data: &Dataset,
    train_rates: &[f64],
    eval_rates: &[f64],
) -> Result<(RobustnessMatrix, Vec<TrainOutcome>)> {
    let outcomes = train_rates
        .iter()
        .map(|&r| {
            let cfg = TrainConfig {
                sampling: None,
                ..base.clone()
            };
            let cfg = if r < 1.0 {
                cfg.with_dropout(Strategy::Random, KeepRate::Point(r))?
            } else {
                KeepRate::Point(r).validate()?;
                cfg
            };
            train(&cfg, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<(f64, &ViTParams)> = train_rates
        .iter()
        .copied()
        .zip(outcomes.iter().map(|o| &o.best))
        .collect();
    let matrix = robustness_matrix(&models, data, eval_rates, base.seed ^ EVAL_SALT)?;
    Ok((matrix, outcomes))
}

/// Top-1 of the mean of the models' softmax outputs.
pub fn ensemble_top1(models: &[&ViTParams], data: &Dataset, indices: &[usize]) -> Result<f64> {
    if models.is_empty() || indices.is_empty() {
        return Err(Error::InvalidConfig(
            "ensemble needs models and images".into(),
        ));
    }
    let k = data.classes;
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let images = data.batch(chunk)?;
        let mut mean = vec![0.0; chunk.len() * k];
        for m in models {
            let probs = model::predict(m, &images, None)?;
            for (acc, p) in mean.iter_mut().zip(probs.data()) {
                *acc += p / models.len() as f64;
            }
        }
        for (row, &i) in mean.chunks(k).zip(chunk) {
            correct += usize::from(argmax(row) == data.labels[i]);
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleReport {
    pub seeds: Vec<u64>,
    pub member_top1: Vec<f64>,
    pub ensemble_top1: f64,
    /// Summed over all members.
    pub total_flops: u64,
}

impl EnsembleReport {
    /// Per-member rows followed by an `ensemble` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,seed,test_top1\n");
        for (seed, t) in self.seeds.iter().zip(&self.member_top1) {
            s.push_str(&format!("member,{seed},{t}\n"));
        }
        s.push_str(&format!("ensemble,,{}\n", self.ensemble_top1));
        s
    }
}

/// Trains `n_models` copies of `base` at `rate` with seeds `base.seed + i`
/// and averages their softmax outputs on the test split.
pub fn run_ensemble(
    base: &TrainConfig,
    data: &Dataset,
    n_models: usize,
    rate: KeepRate,
) -> Result<EnsembleReport> {
    if n_models == 0 {
        return Err(Error::InvalidConfig(
            "ensemble needs at least one model".into(),
        ));
    }
    let strategy = base.sampling.map_or(Strategy::Random, |s| s.strategy);
    let mut outcomes = Vec::with_capacity(n_models);
    let mut seeds = Vec::with_capacity(n_models);
    for i in 0..n_models as u64 {
        let seed = base.seed + i;
        let cfg = TrainConfig {
            seed,
            sampling: None,
            ..base.clone()
        };
        let cfg = if rate == KeepRate::Point(1.0) {
            cfg
        } else {
            cfg.with_dropout(strategy, rate)?
        };
        outcomes.push(train(&cfg, data)?);
        seeds.push(seed);
    }
    let test = &data.splits.test;
    let member_top1 = outcomes
        .iter()
        .map(|o| Ok(evaluate(&o.best, data, test, None, EVAL_BATCH)?.top1))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<&ViTParams> = outcomes.iter().map(|o| &o.best).collect();
    Ok(EnsembleReport {
        seeds,
        member_top1,
        ensemble_top1: ensemble_top1(&models, data, test)?,
        total_flops: outcomes.iter().map(|o| o.total_flops).sum(),
    })
}

#[cfg(test)]
mod tests;
