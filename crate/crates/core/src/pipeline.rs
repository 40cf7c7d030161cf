//! Glue between datasets, the model and the trainer.

use crate::datagrid::{
    normalize_channels, stratified_split, tile_patches, ChannelStats, GridStack, LabelGrid, PatchSet,
    Split, SplitAssignment,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{fit, EpochRecord, FitResult, TrainConfig};

pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Normalized patches with their split assignment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub patches: PatchSet,
    pub split: SplitAssignment,
    pub stats: ChannelStats,
}

impl Prepared {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split.indices(split)
    }
}

fn round_to_f32(stats: ChannelStats) -> ChannelStats {
    let r = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
    ChannelStats {
        mean: r(&stats.mean),
        std: r(&stats.std),
    }
}

/// Tiles, splits by `split_seed`, and normalizes every patch with statistics
/// of the training patches' valid cells. The statistics are rounded to f32
/// so they survive a checkpoint round trip unchanged.
pub fn prepare(stack: &GridStack, labels: &LabelGrid, z: usize, split_seed: u64) -> Result<Prepared> {
    let raw = tile_patches(stack, Some(labels), z)?;
    let split = stratified_split(&raw, SPLIT_FRACTIONS, split_seed)?;
    let mut train_mask = vec![false; stack.cells()];
    for p in split.indices(Split::Train) {
        let (r0, c0) = raw.origins[p];
        for r in r0..(r0 + z).min(stack.height) {
            for c in c0..(c0 + z).min(stack.width) {
                let cell = r * stack.width + c;
                train_mask[cell] = stack.mask[cell];
            }
        }
    }
    let train_view = GridStack {
        mask: train_mask,
        ..stack.clone()
    };
    let stats = round_to_f32(ChannelStats::compute(&train_view)?);
    let patches = normalized_patches(stack, Some(labels), z, &stats)?;
    Ok(Prepared { patches, split, stats })
}

pub fn normalized_patches(
    stack: &GridStack,
    labels: Option<&LabelGrid>,
    z: usize,
    stats: &ChannelStats,
) -> Result<PatchSet> {
    let (norm, _) = normalize_channels(stack, Some(stats))?;
    tile_patches(&norm, labels, z)
}

/// Model seed, dropout seed and split seed all derive from one run seed.
pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x30DE1)
}

pub fn split_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x5B117)
}

/// Initializes a model from `config.seed` and fits it on the train split.
pub fn train_model(
    prepared: &Prepared,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    if prepared.patches.channels != model_config.in_channels {
        return Err(Error::invalid(format!(
            "data has {} channels, model expects {}",
            prepared.patches.channels, model_config.in_channels
        )));
    }
    let mut model = ModelParams::init(model_config, model_seed(config.seed))?;
    let train = prepared.indices(Split::Train);
    let val = prepared.indices(Split::Val);
    fit(&mut model, &prepared.patches, &train, &val, config, on_epoch)
}

fn scalar(v: f32) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v]).expect("valid shape")
}

/// Checkpoint carrying the normalization statistics and split seed.
pub fn checkpoint_with_meta(model: ModelParams<f32>, stats: &ChannelStats, split_seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(model);
    let c = stats.mean.len();
    ck.meta.insert(
        "norm_mean".into(),
        Tensor::from_vec(&[c], stats.mean.iter().map(|&v| v as f32).collect())?,
    );
    ck.meta.insert(
        "norm_std".into(),
        Tensor::from_vec(&[c], stats.std.iter().map(|&v| v as f32).collect())?,
    );
    // 16-bit limbs are exact in f32
    let limbs = (0..4).map(|i| ((split_seed >> (16 * i)) & 0xFFFF) as f32).collect();
    ck.meta.insert("split_seed".into(), Tensor::from_vec(&[4], limbs)?);
    ck.meta.insert("format".into(), scalar(1.0));
    Ok(ck)
}

pub fn stats_from_checkpoint(ck: &Checkpoint) -> Result<ChannelStats> {
    let get = |k: &str| {
        ck.meta
            .get(k)
            .map(|t| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>())
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks {k}")))
    };
    Ok(ChannelStats {
        mean: get("norm_mean")?,
        std: get("norm_std")?,
    })
}

pub fn split_seed_from_checkpoint(ck: &Checkpoint) -> Option<u64> {
    let t = ck.meta.get("split_seed")?;
    if t.len() != 4 {
        return None;
    }
    Some(
        t.data()
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))),
    )
}
