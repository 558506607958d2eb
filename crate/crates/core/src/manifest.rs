//! Run manifests and the flat `key=value` config format.
//!
//! A config is a sorted map of keys to strings. Every key that affects
//! outputs is hashed; the hash is embedded in every CSV an experiment
//! writes, so equal hashes mean equal outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{KeepRate, SamplingSpec, Strategy};
use crate::trainer::{Augment, TrainConfig};

pub type KvConfig = BTreeMap<String, String>;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later duplicates override earlier ones.
pub fn parse_kv(text: &str) -> Result<KvConfig> {
    let mut out = KvConfig::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "line {}: expected key=value, got {line:?}",
                n + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn render_kv(kv: &KvConfig) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Hex SHA-256 over the subcommand and the rendered config.
pub fn config_hash(subcommand: &str, kv: &KvConfig) -> String {
    let mut h = Sha256::new();
    h.update(subcommand.as_bytes());
    h.update(b"\n");
    h.update(render_kv(kv).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Every key understood by [`train_config_from_kv`].
pub const TRAIN_KEYS: &[&str] = &[
    "depth",
    "width",
    "heads",
    "patch",
    "image",
    "channels",
    "classes",
    "mlp_ratio",
    "strategy",
    "keep",
    "share_across_batch",
    "epochs",
    "batch_size",
    "base_lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "decay_exempt",
    "label_smoothing",
    "seed",
    "early_stop_patience",
    "flip",
    "crop_pad",
];

/// `0.5` for a point rate, `0.5:1` for an interval.
pub fn parse_keep(s: &str) -> Result<KeepRate> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("keep rate {t:?} is not a number")))
    };
    let rate = match s.split_once(':') {
        Some((lo, hi)) => KeepRate::Interval {
            lo: num(lo)?,
            hi: num(hi)?,
        },
        None => KeepRate::Point(num(s)?),
    };
    rate.validate()
}

pub fn render_keep(rate: KeepRate) -> String {
    match rate {
        KeepRate::Point(r) => format!("{r}"),
        KeepRate::Interval { lo, hi } => format!("{lo}:{hi}"),
    }
}

/// The flat form of a training config; round-trips through
/// [`train_config_from_kv`]. Images are square.
pub fn train_config_to_kv(cfg: &TrainConfig) -> KvConfig {
    let m = &cfg.model;
    let (strategy, keep, share) = match &cfg.sampling {
        Some(s) => (s.strategy, s.rate, s.share_across_batch),
        None => (Strategy::Random, KeepRate::Point(1.0), false),
    };
    let pairs: [(&str, String); 23] = [
        ("depth", m.depth.to_string()),
        ("width", m.width.to_string()),
        ("heads", m.heads.to_string()),
        ("patch", m.patch.to_string()),
        ("image", m.image_h.to_string()),
        ("channels", m.channels.to_string()),
        ("classes", m.classes.to_string()),
        ("mlp_ratio", m.mlp_ratio.to_string()),
        ("strategy", strategy.name().to_string()),
        ("keep", render_keep(keep)),
        ("share_across_batch", share.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("base_lr", cfg.base_lr.to_string()),
        ("warmup_epochs", cfg.warmup_epochs.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("decay_exempt", cfg.decay_exempt.to_string()),
        ("label_smoothing", cfg.label_smoothing.to_string()),
        ("seed", cfg.seed.to_string()),
        (
            "early_stop_patience",
            cfg.early_stop_patience.unwrap_or(0).to_string(),
        ),
        ("flip", cfg.augment.flip.to_string()),
        ("crop_pad", cfg.augment.crop_pad.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn field<T: std::str::FromStr>(kv: &KvConfig, key: &str) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        })
        .transpose()
}

/// Overlays `kv` on `base`. Unknown keys are rejected; `keep=1` without an
/// interval means no patch dropout.
pub fn train_config_from_kv(base: &TrainConfig, kv: &KvConfig) -> Result<TrainConfig> {
    if let Some(k) = kv.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str())) {
        return Err(Error::InvalidConfig(format!("unknown key {k:?}")));
    }
    let mut flat = train_config_to_kv(base);
    flat.extend(kv.iter().map(|(k, v)| (k.clone(), v.clone())));
    let get = |key: &str| -> Result<usize> {
        Ok(field(&flat, key)?.expect("every key has a base value"))
    };
    let image = get("image")?;
    let model = ModelConfig {
        depth: get("depth")?,
        width: get("width")?,
        heads: get("heads")?,
        patch: get("patch")?,
        image_h: image,
        image_w: image,
        channels: get("channels")?,
        classes: get("classes")?,
        mlp_ratio: get("mlp_ratio")?,
    };
    model.validate()?;
    let keep = parse_keep(&flat["keep"])?;
    let strategy: Strategy = flat["strategy"].parse()?;
    let sampling = if keep == KeepRate::Point(1.0) {
        None
    } else {
        let (rows, cols) = model.grid();
        let seed = field(&flat, "seed")?.unwrap();
        let mut spec = SamplingSpec::new(strategy, keep, seed, rows, cols)?;
        spec.share_across_batch = field(&flat, "share_across_batch")?.unwrap();
        Some(spec)
    };
    let patience: usize = get("early_stop_patience")?;
    let cfg = TrainConfig {
        model,
        sampling,
        epochs: get("epochs")?,
        batch_size: get("batch_size")?,
        base_lr: field(&flat, "base_lr")?.unwrap(),
        warmup_epochs: get("warmup_epochs")?,
        momentum: field(&flat, "momentum")?.unwrap(),
        weight_decay: field(&flat, "weight_decay")?.unwrap(),
        decay_exempt: field(&flat, "decay_exempt")?.unwrap(),
        label_smoothing: field(&flat, "label_smoothing")?.unwrap(),
        seed: field(&flat, "seed")?.unwrap(),
        early_stop_patience: (patience > 0).then_some(patience),
        augment: Augment {
            flip: field(&flat, "flip")?.unwrap(),
            crop_pad: get("crop_pad")?,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: KvConfig,
    pub config_hash: String,
    pub version: String,
    /// Seconds since the Unix epoch; honours `SOURCE_DATE_EPOCH`.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: KvConfig) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        RunManifest {
            subcommand: subcommand.to_string(),
            config_hash: config_hash(subcommand, &config),
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
        }
    }

    /// First 12 hex digits of the config hash, used in directory names.
    pub fn short_hash(&self) -> &str {
        &self.config_hash[..12]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TrainConfig {
        TrainConfig::benchmark(crate::experiments::benchmark_model(), 3)
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# comment\n epochs = 4 \n\nkeep=0.5:1 # trailing\nepochs=5\n").unwrap();
        assert_eq!(kv["epochs"], "5");
        assert_eq!(kv["keep"], "0.5:1");
        assert_eq!(kv.len(), 2);
        assert!(parse_kv("epochs 4").is_err());
        assert!(parse_kv("=4").is_err());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = base()
            .with_dropout(
                Strategy::Structured,
                KeepRate::Interval { lo: 0.5, hi: 1.0 },
            )
            .unwrap();
        let kv = train_config_to_kv(&cfg);
        assert_eq!(kv.len(), TRAIN_KEYS.len());
        assert_eq!(train_config_from_kv(&base(), &kv).unwrap(), cfg);
        assert_eq!(train_config_from_kv(&cfg, &KvConfig::new()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_bad_keys_rejected() {
        let kv = parse_kv("epoch=3").unwrap();
        assert!(
            matches!(train_config_from_kv(&base(), &kv), Err(Error::InvalidConfig(m)) if m.contains("epoch"))
        );
        let kv = parse_kv("keep=1.5").unwrap();
        assert!(matches!(
            train_config_from_kv(&base(), &kv),
            Err(Error::InvalidRate(_))
        ));
        let kv = parse_kv("patch=5").unwrap();
        assert!(train_config_from_kv(&base(), &kv).is_err());
    }

    #[test]
    fn keep_one_disables_dropout() {
        let kv = parse_kv("keep=1.0\nstrategy=uniform").unwrap();
        assert_eq!(train_config_from_kv(&base(), &kv).unwrap().sampling, None);
        let kv = parse_kv("keep=0.25").unwrap();
        let cfg = train_config_from_kv(&base(), &kv).unwrap();
        assert_eq!(cfg.sampling.unwrap().rate, KeepRate::Point(0.25));
    }

    #[test]
    fn hash_tracks_every_field() {
        let kv = train_config_to_kv(&base());
        let h = config_hash("train", &kv);
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash("train", &kv.clone()));
        assert_ne!(h, config_hash("sweep", &kv));
        for key in TRAIN_KEYS {
            let mut changed = kv.clone();
            changed.get_mut(*key).unwrap().push('0');
            assert_ne!(h, config_hash("train", &changed), "{key}");
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = RunManifest::new("cost", parse_kv("variant=base\nimage=896").unwrap());
        assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
        assert_eq!(m.short_hash().len(), 12);
    }
}
