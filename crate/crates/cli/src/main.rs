//! `patchdrop`: train ViTs with patch dropout, report compute and memory
//! costs, and run the desk-scale experiment drivers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchdrop::cost::{self, cost_report, empirical_flops};
use patchdrop::experiments::{
    self, benchmark_model, parse_values, run_strategy_compare, run_sweep, Axis, SweepPlan,
};
use patchdrop::manifest::{
    parse_kv, render_keep, train_config_from_kv, train_config_to_kv, KvConfig, RunManifest,
};
use patchdrop::model::{ModelConfig, Variant, ViTParams};
use patchdrop::plot::{emit_plot, PlotKind};
use patchdrop::sampler::{kept_count, KeepRate, Strategy};
use patchdrop::trainer::{
    self, dataset::GLYPH, evaluate, load_dataset, synthetic, Dataset, SyntheticSpec, TrainConfig,
};
use patchdrop::Error;

#[derive(Parser)]
#[command(name = "patchdrop", version, arg_required_else_help = true)]
#[command(about = "Patch dropout for Vision Transformers: training, cost model, experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic benchmark as a TID file plus split file.
    DatasetGen(DatasetGenArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with test-time patch dropout.
    Eval(EvalArgs),
    /// FLOPs and activation-memory report for a model at given keep rates.
    Cost(CostArgs),
    /// Train over a grid of values along one axis.
    Sweep(SweepArgs),
    /// Train/eval keep-rate cross matrix.
    Robustness(RobustnessArgs),
    /// Train several dropout models and average their predictions.
    Ensemble(EnsembleArgs),
    /// Compare sampling strategies at one keep rate.
    Strategies(StrategiesArgs),
    /// Render an experiment CSV as SVG.
    Plot(PlotArgs),
}

/// Training flags; each overrides the same key in `--config`.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key=value` file with any of the flags below (underscored).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    mlp_ratio: Option<String>,
    /// random, uniform, structured or cropping.
    #[arg(long)]
    strategy: Option<String>,
    /// Keep rate `r` or interval `lo:hi`; 1 disables dropout.
    #[arg(long)]
    keep: Option<String>,
    #[arg(long)]
    share_across_batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    warmup_epochs: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    decay_exempt: Option<String>,
    #[arg(long)]
    label_smoothing: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// 0 disables early stopping.
    #[arg(long)]
    early_stop_patience: Option<String>,
    #[arg(long)]
    flip: Option<String>,
    #[arg(long)]
    crop_pad: Option<String>,
}

impl ConfigArgs {
    fn kv(&self) -> Result<KvConfig, Error> {
        let mut kv = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
                parse_kv(&text)?
            }
            None => KvConfig::new(),
        };
        let flags = [
            ("depth", &self.depth),
            ("width", &self.width),
            ("heads", &self.heads),
            ("patch", &self.patch),
            ("image", &self.image),
            ("channels", &self.channels),
            ("classes", &self.classes),
            ("mlp_ratio", &self.mlp_ratio),
            ("strategy", &self.strategy),
            ("keep", &self.keep),
            ("share_across_batch", &self.share_across_batch),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("base_lr", &self.base_lr),
            ("warmup_epochs", &self.warmup_epochs),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("decay_exempt", &self.decay_exempt),
            ("label_smoothing", &self.label_smoothing),
            ("seed", &self.seed),
            ("early_stop_patience", &self.early_stop_patience),
            ("flip", &self.flip),
            ("crop_pad", &self.crop_pad),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                kv.insert(key.to_string(), v.clone());
            }
        }
        Ok(kv)
    }

    /// Benchmark defaults overlaid with the config file and flags.
    fn resolve(&self) -> Result<TrainConfig, Error> {
        self.resolve_with_keep(None)
    }

    /// Like [`ConfigArgs::resolve`], with a keep rate used when neither the
    /// file nor the flags set one.
    fn resolve_with_keep(&self, default_keep: Option<&str>) -> Result<TrainConfig, Error> {
        let mut kv = self.kv()?;
        if let Some(k) = default_keep {
            kv.entry("keep".into()).or_insert_with(|| k.to_string());
        }
        let base = TrainConfig::benchmark(benchmark_model(), 0);
        train_config_from_kv(&base, &kv).map_err(|e| flag_error(e, "--keep"))
    }
}

/// Names the flag when a bare rate error would otherwise be unattributed.
fn flag_error(e: Error, flag: &str) -> Error {
    match e {
        Error::InvalidRate(r) => {
            Error::InvalidConfig(format!("{flag}: keep rate {r} is outside (0, 1]"))
        }
        other => other,
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// TID dataset file (its `.split` sibling is read too). Without it the
    /// synthetic benchmark is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 4000)]
    train_count: usize,
    #[arg(long, default_value_t = 500)]
    val_count: usize,
    #[arg(long, default_value_t = 500)]
    test_count: usize,
}

impl DataArgs {
    fn spec(&self, size: usize) -> Result<SyntheticSpec, Error> {
        if size == 0 || size % GLYPH != 0 {
            return Err(Error::InvalidConfig(format!(
                "--image: synthetic images need a multiple of {GLYPH} pixels, got {size}"
            )));
        }
        Ok(SyntheticSpec {
            seed: self.data_seed,
            train: self.train_count,
            val: self.val_count,
            test: self.test_count,
            size,
            ..Default::default()
        })
    }

    fn load(&self, size: usize) -> Result<Dataset, Error> {
        match &self.data {
            Some(path) => load_dataset(path),
            None => Ok(synthetic(&self.spec(size)?)),
        }
    }

    fn describe(&self, size: usize, kv: &mut KvConfig) -> Result<(), Error> {
        match &self.data {
            Some(path) => {
                kv.insert("data".into(), path.display().to_string());
            }
            None => spec_kv(&self.spec(size)?, "data_", kv),
        }
        Ok(())
    }
}

fn spec_kv(s: &SyntheticSpec, prefix: &str, kv: &mut KvConfig) {
    for (k, v) in [
        ("seed", s.seed.to_string()),
        ("train", s.train.to_string()),
        ("val", s.val.to_string()),
        ("test", s.test.to_string()),
        ("size", s.size.to_string()),
        ("noise", s.noise.to_string()),
        ("signal", s.signal.to_string()),
        ("clutter", s.clutter.to_string()),
        ("keys", s.keys.to_string()),
    ] {
        kv.insert(format!("{prefix}{k}"), v);
    }
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output root; defaults to $PATCHDROP_RUNS_DIR, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the manifest and cost prediction, then stop.
    #[arg(long)]
    dry_run: bool,
}

impl OutArgs {
    fn root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("PATCHDROP_RUNS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<root>/<subcommand>-<hash>`, created, with the manifest written.
    fn run_dir(&self, manifest: &RunManifest) -> Result<PathBuf, Error> {
        let dir = self
            .root()
            .join(format!("{}-{}", manifest.subcommand, manifest.short_hash()));
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        manifest.write(dir.join("manifest.json"))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Destination `.tid` path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    train_count: usize,
    #[arg(long, default_value_t = 500)]
    val_count: usize,
    #[arg(long, default_value_t = 500)]
    test_count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    signal: Option<f64>,
    #[arg(long)]
    clutter: Option<f64>,
    #[arg(long)]
    keys: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Test-time keep rate (random per-image keep sets).
    #[arg(long)]
    eval_keep: Option<f64>,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct CostArgs {
    /// tiny, small, base or large; otherwise the benchmark model.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    image: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Comma-separated keep rates.
    #[arg(long, default_value = "1,0.5,0.25")]
    keep: String,
    /// Batch size for the activation-memory estimate.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// table, csv or json.
    #[arg(long, default_value = "table")]
    format: String,
    /// Also write `cost.csv` and its manifest under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// keep_rate, image_size, patch_size, variant, depth or strategy.
    #[arg(long)]
    axis: String,
    /// Comma-separated `value[@rate]` list.
    #[arg(long)]
    values: String,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long, default_value = "1,0.5,0.25")]
    train_rates: String,
    #[arg(long, default_value = "1,0.75,0.5,0.25,0.1,0.05")]
    eval_rates: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Members, trained with seeds `seed`, `seed+1`, …; `--keep` (default
    /// 0.5) applies to each.
    #[arg(long, default_value_t = 2)]
    models: usize,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct StrategiesArgs {
    /// Compared at `--keep` (default 0.25).
    #[arg(long, default_value = "random,uniform,structured,cropping")]
    strategies: String,
    #[arg(long, default_value = "1")]
    seeds: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// keep_rate_curve, robustness or savings.
    #[arg(long)]
    kind: String,
    /// CSV file, or `-` for stdin.
    #[arg(long)]
    input: PathBuf,
    /// SVG path; stdout if omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn io(path: impl AsRef<Path>, e: std::io::Error) -> Error {
    Error::Io {
        path: path.as_ref().to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| io(path, e))
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{flag}: cannot parse {v:?}")))
        })
        .collect()
}

fn parse_rates(flag: &str, s: &str) -> Result<Vec<f64>, Error> {
    let rates: Vec<f64> = parse_list(flag, s)?;
    for &r in &rates {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "{flag}: keep rate {r} is outside (0, 1]"
            )));
        }
    }
    Ok(rates)
}

fn per_image_flops(cfg: &TrainConfig) -> Result<u64, Error> {
    let rate = cfg.sampling.map_or(1.0, |s| s.rate.mean());
    empirical_flops(&cfg.model, kept_count(rate, cfg.model.num_patches()))
}

fn print_dry_run(manifest: &RunManifest, prediction: &[(&str, String)]) {
    print!("{}", manifest.to_json());
    for (k, v) in prediction {
        println!("{k}: {v}");
    }
}

fn dataset_gen(a: DatasetGenArgs) -> Result<(), Error> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        seed: a.seed,
        train: a.train_count,
        val: a.val_count,
        test: a.test_count,
        size: a.size,
        noise: a.noise.unwrap_or(d.noise),
        signal: a.signal.unwrap_or(d.signal),
        clutter: a.clutter.unwrap_or(d.clutter),
        keys: a.keys.unwrap_or(d.keys),
    };
    if spec.size == 0 || spec.size % GLYPH != 0 {
        return Err(Error::InvalidConfig(format!(
            "--size must be a positive multiple of {GLYPH}"
        )));
    }
    let data = synthetic(&spec);
    data.save(&a.out)?;
    let mut kv = KvConfig::new();
    spec_kv(&spec, "", &mut kv);
    let manifest = RunManifest::new("dataset-gen", kv);
    let mut path = a.out.clone().into_os_string();
    path.push(".manifest.json");
    manifest.write(PathBuf::from(path))?;
    println!(
        "wrote {} images ({}x{}, {} classes) to {}",
        data.len(),
        data.height,
        data.width,
        data.classes,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cfg = a.config.resolve()?;
    let mut kv = train_config_to_kv(&cfg);
    a.data.describe(cfg.model.image_h, &mut kv)?;
    let manifest = RunManifest::new("train", kv);
    if a.out.dry_run {
        let per_image = per_image_flops(&cfg)?;
        let images = if a.data.data.is_some() {
            None
        } else {
            Some(a.data.train_count)
        };
        let mut pred = vec![("forward_flops_per_image", per_image.to_string())];
        if let Some(n) = images {
            pred.push((
                "forward_flops_total",
                (per_image * (n * cfg.epochs) as u64).to_string(),
            ));
        }
        print_dry_run(&manifest, &pred);
        return Ok(());
    }
    let data = a.data.load(cfg.model.image_h)?;
    let out = trainer::train_with(&cfg, &data, |r| {
        eprintln!(
            "epoch {:3} {:5} loss {:.4} top1 {:.4} flops {}",
            r.epoch, r.split, r.loss, r.top1, r.cum_flops
        );
    })?;
    let test = evaluate(&out.best, &data, &data.splits.test, None, 256)?;
    let dir = a.out.run_dir(&manifest)?;
    write(&dir.join("trainlog.csv"), out.log.to_csv())?;
    out.best.save(dir.join("checkpoint.pdvt"))?;
    write(
        &dir.join("metrics.csv"),
        format!(
            "config_hash,best_epoch,val_top1,test_top1,test_loss,train_flops\n{},{},{},{},{},{}\n",
            manifest.config_hash,
            out.best_epoch,
            out.best_val_top1,
            test.top1,
            test.loss,
            out.total_flops
        ),
    )?;
    println!("{}", dir.display());
    println!("test_top1 {:.4} (best epoch {})", test.top1, out.best_epoch);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let params = ViTParams::load(&a.checkpoint)?;
    let cfg = params.config;
    if let Some(r) = a.eval_keep {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "--eval-keep: {r} is outside (0, 1]"
            )));
        }
    }
    let data = a.data.load(cfg.image_h)?;
    if (data.height, data.width, data.channels, data.classes)
        != (cfg.image_h, cfg.image_w, cfg.channels, cfg.classes)
    {
        return Err(Error::InvalidConfig(
            "--data does not match the checkpoint's model".into(),
        ));
    }
    let indices = match a.split.as_str() {
        "train" => &data.splits.train,
        "val" => &data.splits.val,
        "test" => &data.splits.test,
        other => {
            return Err(Error::InvalidConfig(format!(
                "--split: unknown split {other:?}"
            )))
        }
    };
    let drop = a.eval_keep.filter(|&r| r < 1.0).map(|r| (r, a.eval_seed));
    let r = evaluate(&params, &data, indices, drop, 256)?;
    println!("split,eval_keep,loss,top1");
    println!(
        "{},{},{},{}",
        a.split,
        a.eval_keep.unwrap_or(1.0),
        r.loss,
        r.top1
    );
    Ok(())
}

fn cost_model(a: &CostArgs) -> Result<ModelConfig, Error> {
    let mut m = match &a.variant {
        Some(v) => {
            let v: Variant = v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("--variant: unknown variant {v:?}")))?;
            v.config(a.image.unwrap_or(224), a.patch.unwrap_or(16))
        }
        None => {
            let mut m = benchmark_model();
            if let Some(s) = a.image {
                (m.image_h, m.image_w) = (s, s);
            }
            if let Some(p) = a.patch {
                m.patch = p;
            }
            m
        }
    };
    m.depth = a.depth.unwrap_or(m.depth);
    m.width = a.width.unwrap_or(m.width);
    m.heads = a.heads.unwrap_or(m.heads);
    m.validate()?;
    Ok(m)
}

fn cost(a: CostArgs) -> Result<(), Error> {
    let model = cost_model(&a)?;
    let rates = parse_rates("--keep", &a.keep)?;
    let reports = rates
        .iter()
        .map(|&r| cost_report(&model, r, a.batch))
        .collect::<Result<Vec<_>, _>>()?;
    let mut kv = KvConfig::new();
    for (k, v) in [
        ("depth", model.depth),
        ("width", model.width),
        ("heads", model.heads),
        ("patch", model.patch),
        ("image", model.image_h),
        ("channels", model.channels),
        ("classes", model.classes),
        ("mlp_ratio", model.mlp_ratio),
        ("batch", a.batch),
    ] {
        kv.insert(k.into(), v.to_string());
    }
    kv.insert("keep".into(), a.keep.clone());
    let manifest = RunManifest::new("cost", kv);
    let csv = cost::cost_csv(&[model], &rates, a.batch)?;
    match a.format.as_str() {
        "table" => {
            println!(
                "{} ({} patches, {} parameters)",
                reports[0].config_id, reports[0].num_patches, reports[0].parameter_count
            );
            for (rate, r) in rates.iter().zip(&reports) {
                println!(
                    "keep {rate:<5} k={:<5} T={:<5} empirical {:>9.2} G  theoretical {:>9.2} G  relative {:.4} (closed form {:.4})  activations {}",
                    r.kept_patches,
                    r.token_count,
                    r.empirical_flops as f64 / 1e9,
                    r.theoretical_flops as f64 / 1e9,
                    r.relative_empirical,
                    r.relative_theoretical,
                    r.activation_elements
                );
            }
            println!("config_hash {}", manifest.config_hash);
        }
        "csv" => print!("{csv}"),
        "json" => {
            let doc = serde_json::json!({ "manifest": manifest, "reports": reports });
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("serializable")
            );
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "--format: unknown format {other:?}"
            )));
        }
    }
    if let Some(root) = &a.out {
        let dir = root.join(format!("cost-{}", manifest.short_hash()));
        std::fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        manifest.write(dir.join("manifest.json"))?;
        write(&dir.join("cost.csv"), csv)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), Error> {
    let base = a.config.resolve()?;
    let axis: Axis = a.axis.parse()?;
    let values = parse_values(&a.values).map_err(|e| flag_error(e, "--values"))?;
    let seeds: Vec<u64> = parse_list("--seeds", &a.seeds)?;
    let spec = a.data.spec(base.model.image_h)?;
    let plan = SweepPlan::new(base, spec, axis, values, seeds)?;
    if a.out.dry_run {
        let manifest = RunManifest::new("sweep", plan.to_kv());
        let mut pred = Vec::new();
        for v in &plan.values {
            let line = match plan.cell(v, plan.seeds[0]) {
                Ok((cfg, _)) => {
                    let rate = cfg.sampling.map_or(1.0, |s| s.rate.mean());
                    format!(
                        "keep {rate:.4}, forward flops/image {}",
                        per_image_flops(&cfg)?
                    )
                }
                Err(e) => format!("invalid: {e}"),
            };
            pred.push((v.value.as_str(), line));
        }
        print_dry_run(&manifest, &pred);
        return Ok(());
    }
    let report = run_sweep(&plan, Some(&a.out.root()))?;
    eprintln!("{}", a.out.root().join(&report.sweep_id).display());
    print!("{}", report.summary_csv());
    let failed = report.cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} cells failed; see cells.csv",
            report.cells.len()
        );
    }
    Ok(())
}

fn robustness(a: RobustnessArgs) -> Result<(), Error> {
    let base = a.config.resolve()?;
    let train_rates = parse_rates("--train-rates", &a.train_rates)?;
    let eval_rates = parse_rates("--eval-rates", &a.eval_rates)?;
    let mut kv = train_config_to_kv(&base);
    kv.insert("train_rates".into(), a.train_rates.clone());
    kv.insert("eval_rates".into(), a.eval_rates.clone());
    a.data.describe(base.model.image_h, &mut kv)?;
    let manifest = RunManifest::new("robustness", kv);
    if a.out.dry_run {
        let pred: Vec<(&str, String)> = train_rates
            .iter()
            .map(|&r| {
                let k = kept_count(r, base.model.num_patches());
                Ok((
                    "train forward flops/image",
                    format!("r={r}: {}", empirical_flops(&base.model, k)?),
                ))
            })
            .collect::<Result<_, Error>>()?;
        print_dry_run(&manifest, &pred);
        return Ok(());
    }
    let data = a.data.load(base.model.image_h)?;
    let (matrix, _) = experiments::run_robustness(&base, &data, &train_rates, &eval_rates)?;
    let dir = a.out.run_dir(&manifest)?;
    let csv = matrix.to_csv();
    write(&dir.join("robustness.csv"), &csv)?;
    write(&dir.join("curves.csv"), matrix.curves_csv())?;
    write(
        &dir.join("robustness.svg"),
        emit_plot(&csv, PlotKind::Robustness)?,
    )?;
    eprintln!("{}", dir.display());
    print!("{csv}");
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> Result<(), Error> {
    let base = a.config.resolve_with_keep(Some("0.5"))?;
    let rate = base.sampling.map_or(KeepRate::Point(1.0), |s| s.rate);
    let mut kv = train_config_to_kv(&base);
    kv.insert("models".into(), a.models.to_string());
    a.data.describe(base.model.image_h, &mut kv)?;
    let manifest = RunManifest::new("ensemble", kv);
    if a.out.dry_run {
        let k = kept_count(rate.mean(), base.model.num_patches());
        let per = empirical_flops(&base.model, k)?;
        print_dry_run(
            &manifest,
            &[("member forward flops/image", per.to_string())],
        );
        return Ok(());
    }
    if a.models == 0 {
        return Err(Error::InvalidConfig("--models must be at least 1".into()));
    }
    let data = a.data.load(base.model.image_h)?;
    let report = experiments::run_ensemble(&base, &data, a.models, rate)?;
    let dir = a.out.run_dir(&manifest)?;
    write(&dir.join("ensemble.csv"), report.to_csv())?;
    eprintln!("{}", dir.display());
    print!("{}", report.to_csv());
    println!("total_train_flops {}", report.total_flops);
    Ok(())
}

fn strategies(a: StrategiesArgs) -> Result<(), Error> {
    let base = a.config.resolve_with_keep(Some("0.25"))?;
    let strategies: Vec<Strategy> = parse_list("--strategies", &a.strategies)?;
    let rate = base.sampling.map_or(KeepRate::Point(1.0), |s| s.rate);
    let seeds: Vec<u64> = parse_list("--seeds", &a.seeds)?;
    let spec = a.data.spec(base.model.image_h)?;
    if a.out.dry_run {
        let values = strategies
            .iter()
            .map(|s| format!("{s}@{}", render_keep(rate)))
            .collect::<Vec<_>>()
            .join(",");
        let plan = SweepPlan::new(base, spec, Axis::Strategy, parse_values(&values)?, seeds)?;
        let k = kept_count(rate.mean(), plan.base.model.num_patches());
        let per = empirical_flops(&plan.base.model, k)?;
        print_dry_run(
            &RunManifest::new("sweep", plan.to_kv()),
            &[("forward flops/image", per.to_string())],
        );
        return Ok(());
    }
    let report = run_strategy_compare(&base, spec, &strategies, rate, &seeds, Some(&a.out.root()))?;
    eprintln!("{}", a.out.root().join(&report.sweep_id).display());
    print!("{}", report.summary_csv());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<(), Error> {
    let kind: PlotKind = a.kind.parse()?;
    let csv = if a.input.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| io("<stdin>", e))?;
        s
    } else {
        std::fs::read_to_string(&a.input).map_err(|e| io(&a.input, e))?
    };
    let svg = emit_plot(&csv, kind)?;
    match &a.output {
        Some(path) => {
            write(path, &svg)?;
            let mut kv = KvConfig::new();
            kv.insert("kind".into(), kind.name().into());
            kv.insert("input".into(), a.input.display().to_string());
            let mut m = path.clone().into_os_string();
            m.push(".manifest.json");
            RunManifest::new("plot", kv).write(PathBuf::from(m))?;
        }
        None => print!("{svg}"),
    }
    Ok(())
}

/// Configuration and input-schema problems are the caller's fault (exit
/// 2); everything else is a runtime failure (exit 1).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidRate(_)
        | Error::IndivisibleImage { .. }
        | Error::IntervalInactive
        | Error::SchemaMismatch(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::DatasetGen(a) => dataset_gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cost(a) => cost(a),
        Command::Sweep(a) => sweep(a),
        Command::Robustness(a) => robustness(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Strategies(a) => strategies(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "usage error" } else { "error" };
            eprintln!("patchdrop: {kind}: {e}");
            ExitCode::from(code)
        }
    }
}
