//! Finite-difference verification of every differentiable building block.

use std::time::{Duration, Instant};

use indexmap::IndexMap;

use crate::error::Result;
use crate::losses::{combined_loss, dice_loss, focal_loss, LossConfig};
use crate::model::{ModelConfig, ModelParams, Session};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::{finite_diff_check_many, BatchNormState, Mode, Tape, Tensor, Var};

/// Default tolerance on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Tolerance for batchnorm and the whole network.
pub const LOOSE_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteItem {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub elapsed: Duration,
}

impl SuiteItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn randn(shape: &[usize], seed: u64, stream: u64) -> Tensor<f64> {
    Tensor::randn(shape, derive_seed(seed, stream), 1.0).expect("valid shape")
}

/// `sum(y ⊙ r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient w.r.t. `y` is `r`.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(randn(tape.shape(y), seed, 0xF00D));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn labels_and_mask(n: usize, k: usize, seed: u64) -> (Vec<u8>, Vec<bool>) {
    let mut rng = CounterRng::new(seed, 0x1AB);
    let labels = (0..n).map(|_| rng.next_below(k) as u8).collect();
    let mask = (0..n).map(|_| rng.next_f64() > 0.15).collect();
    (labels, mask)
}

/// Probabilities from random logits, kept away from the clamp region.
fn probs(n: usize, k: usize, hw: usize, seed: u64) -> Tensor<f64> {
    let logits = randn(&[n, k, hw, hw], seed, 0xB0B);
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits);
    let p = tape.softmax_channel(l).expect("finite");
    tape.value(p).clone()
}

fn item(
    name: &'static str,
    tolerance: f64,
    inputs: &[Tensor<f64>],
    max_coords: Option<usize>,
    seed: u64,
    f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<SuiteItem> {
    let start = Instant::now();
    let r = finite_diff_check_many(f, inputs, STEP, max_coords, seed)?;
    Ok(SuiteItem {
        name,
        max_rel_error: r.max_rel_error,
        tolerance,
        checked: r.checked,
        elapsed: start.elapsed(),
    })
}

/// Reduced network used by the suite: 3 input channels, features
/// `[4, 8, 16, 32]`, 16×16 patches.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        num_classes: 5,
        encoder_features: vec![4, 8, 16, 32],
        dropout_p: 0.3,
        patch_size: 16,
    }
}

/// Runs every check. Items are reported in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteItem>> {
    let mut out = Vec::new();
    let s = |k: u64| derive_seed(seed, k);

    let a = randn(&[2, 3, 4, 4], seed, 1);
    let b = randn(&[2, 3, 4, 4], seed, 2);
    out.push(item("add", TOLERANCE, &[a.clone(), b.clone()], None, s(1), |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?);

    let bias = randn(&[3], seed, 3);
    out.push(item("add_bias", TOLERANCE, &[a.clone(), bias], None, s(2), |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, seed)
    })?);

    let gate = randn(&[2, 1, 4, 4], seed, 4);
    out.push(item("mul_broadcast", TOLERANCE, &[a.clone(), gate], None, s(3), |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, seed)
    })?);

    let c = randn(&[2, 2, 4, 4], seed, 5);
    out.push(item("concat_channels", TOLERANCE, &[a.clone(), c], None, s(4), |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        project(t, y, seed)
    })?);

    let x = randn(&[2, 3, 8, 8], seed, 6);
    let w = randn(&[4, 3, 3, 3], seed, 7);
    let wb = randn(&[4], seed, 8);
    out.push(item("conv2d", TOLERANCE, &[x.clone(), w, wb], None, s(5), |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        project(t, y, seed)
    })?);

    let xs = randn(&[1, 2, 7, 7], seed, 9);
    let ws = randn(&[3, 2, 3, 3], seed, 10);
    let bs = randn(&[3], seed, 11);
    out.push(item("conv2d_stride2", TOLERANCE, &[xs, ws, bs], None, s(6), |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y, seed)
    })?);

    out.push(item("relu", TOLERANCE, &[a.clone()], None, s(7), |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, seed)
    })?);

    out.push(item("sigmoid", TOLERANCE, &[a.clone()], None, s(8), |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, seed)
    })?);

    let logits = randn(&[2, 5, 4, 4], seed, 12);
    out.push(item("softmax_channel", TOLERANCE, &[logits], None, s(9), |t, v| {
        let y = t.softmax_channel(v[0])?;
        project(t, y, seed)
    })?);

    let pool_in = randn(&[1, 2, 4, 4], seed, 13);
    out.push(item("maxpool2d", TOLERANCE, &[pool_in], None, s(10), |t, v| {
        let y = t.maxpool2d(v[0])?;
        project(t, y, seed)
    })?);

    out.push(item("upsample_nearest2", TOLERANCE, &[a.clone()], None, s(11), |t, v| {
        let y = t.upsample_nearest2(v[0])?;
        project(t, y, seed)
    })?);

    let bn_x = randn(&[4, 3, 5, 5], seed, 14);
    let gamma = randn(&[3], seed, 15);
    let beta = randn(&[3], seed, 16);
    out.push(item("batchnorm2d", LOOSE_TOLERANCE, &[bn_x, gamma, beta], None, s(12), |t, v| {
        let mut st = BatchNormState::<f64>::new(3)?;
        let y = t.batchnorm2d(v[0], v[1], v[2], &mut st, Mode::Train)?;
        project(t, y, seed)
    })?);

    out.push(item("dropout", TOLERANCE, &[a.clone()], None, s(13), |t, v| {
        let y = t.dropout(v[0], 0.3, seed, Mode::Train)?;
        project(t, y, seed)
    })?);

    let cfg = LossConfig::default();
    let p = probs(2, 5, 4, seed);
    let (labels, mask) = labels_and_mask(2 * 16, 5, seed);
    out.push(item("focal_loss", TOLERANCE, &[p.clone()], None, s(14), |t, v| {
        focal_loss(t, v[0], &labels, &mask, &cfg)
    })?);
    out.push(item("dice_loss", TOLERANCE, &[p.clone()], None, s(15), |t, v| {
        dice_loss(t, v[0], &labels, &mask, &cfg)
    })?);
    let weighted = LossConfig {
        lambda_fl: 0.7,
        lambda_dice: 1.3,
        gamma: 1.5,
        alpha: 0.8,
        ..cfg
    };
    out.push(item("combined_loss", TOLERANCE, &[p], None, s(16), |t, v| {
        Ok(combined_loss(t, v[0], &labels, &mask, &weighted)?.0)
    })?);

    out.push(network_item(seed)?);
    Ok(out)
}

/// Combined loss of the reduced network in training mode, differentiated
/// w.r.t. the input batch and every parameter tensor (a sample of
/// coordinates per tensor).
fn network_item(seed: u64) -> Result<SuiteItem> {
    let cfg = reduced_config();
    let model = ModelParams::<f64>::init(&cfg, derive_seed(seed, 0xA11))?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let z = cfg.patch_size;
    let x = randn(&[2, cfg.in_channels, z, z], seed, 0x1A);
    let (labels, mask) = labels_and_mask(2 * z * z, cfg.num_classes, seed);
    let mut inputs = vec![x];
    inputs.extend(model.params.values().cloned());
    let loss_cfg = LossConfig::default();
    let mut scratch = model.clone();
    item("attention_unet", LOOSE_TOLERANCE, &inputs, Some(6), derive_seed(seed, 17), |t, v| {
        let vars: IndexMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let mut session = Session::with_vars(&mut scratch, vars, Mode::Train, seed)?;
        let out = session.forward(t, v[0])?;
        Ok(combined_loss(t, out.probs, &labels, &mask, &loss_cfg)?.0)
    })
}
