use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{Ops, Tape, Tensor, Var};
use crate::sampler::keyed_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub q_w: T,
    pub q_b: T,
    pub k_w: T,
    pub k_b: T,
    pub v_w: T,
    pub v_b: T,
    pub proj_w: T,
    pub proj_b: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
}

/// Every learned tensor of the ViT, generic over what is stored per slot
/// (values, tape handles, shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_proj: T,
    pub pos: T,
    pub cls: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub head_w: T,
    pub head_b: T,
}

const BLOCK_SLOTS: [&str; 16] = [
    "ln1_g", "ln1_b", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "proj_w", "proj_b", "ln2_g",
    "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

impl<T> BlockParams<T> {
    fn slots(&self) -> [&T; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.q_w,
            &self.q_b,
            &self.k_w,
            &self.k_b,
            &self.v_w,
            &self.v_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn from_slots(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("block slot");
        BlockParams {
            ln1_g: next(),
            ln1_b: next(),
            q_w: next(),
            q_b: next(),
            k_w: next(),
            k_b: next(),
            v_w: next(),
            v_b: next(),
            proj_w: next(),
            proj_b: next(),
            ln2_g: next(),
            ln2_b: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }
}

impl<T> Params<T> {
    /// `(name, slot)` pairs in canonical order; checkpoints and the
    /// optimizer both rely on this order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            for (slot, v) in BLOCK_SLOTS.iter().zip(blk.slots()) {
                out.push((format!("blocks.{i}.{slot}"), v));
            }
        }
        out.extend([
            ("norm_g".to_string(), &self.norm_g),
            ("norm_b".to_string(), &self.norm_b),
            ("head_w".to_string(), &self.head_w),
            ("head_b".to_string(), &self.head_b),
        ]);
        out
    }

    /// Rebuilds from values listed in [`Params::named`] order.
    pub fn from_ordered(depth: usize, values: impl IntoIterator<Item = T>) -> Self {
        let mut it = values.into_iter();
        let patch_proj = it.next().expect("patch_proj");
        let pos = it.next().expect("pos");
        let cls = it.next().expect("cls");
        let blocks = (0..depth)
            .map(|_| BlockParams::from_slots(it.by_ref().take(16)))
            .collect();
        Params {
            patch_proj,
            pos,
            cls,
            blocks,
            norm_g: it.next().expect("norm_g"),
            norm_b: it.next().expect("norm_b"),
            head_w: it.next().expect("head_w"),
            head_b: it.next().expect("head_b"),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let depth = self.blocks.len();
        Params::from_ordered(depth, self.named().into_iter().map(|(n, v)| f(&n, v)))
    }
}

impl Params<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, hid) = (cfg.width, cfg.hidden());
        let block = BlockParams {
            ln1_g: vec![d],
            ln1_b: vec![d],
            q_w: vec![d, d],
            q_b: vec![d],
            k_w: vec![d, d],
            k_b: vec![d],
            v_w: vec![d, d],
            v_b: vec![d],
            proj_w: vec![d, d],
            proj_b: vec![d],
            ln2_g: vec![d],
            ln2_b: vec![d],
            fc1_w: vec![d, hid],
            fc1_b: vec![hid],
            fc2_w: vec![hid, d],
            fc2_b: vec![d],
        };
        let p = Params {
            patch_proj: vec![cfg.patch_dim(), d],
            pos: vec![cfg.num_patches() + 1, d],
            cls: vec![d],
            blocks: vec![block; cfg.depth],
            norm_g: vec![d],
            norm_b: vec![d],
            head_w: vec![d, cfg.classes],
            head_b: vec![cfg.classes],
        };
        p.named().into_iter().map(|(n, s)| (n, s.clone())).collect()
    }

    /// Shape-only parameter handles for the tracer.
    pub fn traced(cfg: &ModelConfig) -> Self {
        Params::from_ordered(cfg.depth, Self::shapes(cfg).into_iter().map(|(_, s)| s))
    }
}

/// Learned parameters together with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    pub config: ModelConfig,
    pub tensors: Params<Tensor>,
}

/// Init family for a parameter, decided by its name.
fn init_kind(name: &str) -> Init {
    let slot = name.rsplit('.').next().unwrap_or(name);
    if slot == "cls" || slot.ends_with("_b") {
        Init::Zeros
    } else if slot.ends_with("_g") {
        Init::Ones
    } else {
        Init::TruncNormal
    }
}

enum Init {
    Zeros,
    Ones,
    TruncNormal,
}

/// N(0, 0.02²) truncated at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let (u1, u2): (f64, f64) = (rng.random(), rng.random());
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return 0.02 * z;
        }
    }
}

impl ViTParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = Params::shapes(&config);
        let tensors =
            shapes
                .into_iter()
                .enumerate()
                .map(|(i, (name, shape))| match init_kind(&name) {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::TruncNormal => {
                        let mut rng = keyed_rng(&[seed, 0x696e_6974, i as u64]);
                        Tensor::from_fn(shape, |_| trunc_normal(&mut rng))
                    }
                });
        Ok(ViTParams {
            config,
            tensors: Params::from_ordered(config.depth, tensors),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.tensors.named()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Leaves on the tape for every parameter.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Params<Var> {
        self.tensors.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Whether a parameter is a bias, norm, CLS or positional slot (the group
/// usually exempted from weight decay).
pub fn is_no_decay(name: &str) -> bool {
    let slot = name.rsplit('.').next().unwrap_or(name);
    matches!(slot, "cls" | "pos") || slot.ends_with("_b") || slot.ends_with("_g")
}
