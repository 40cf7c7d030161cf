//! Attention U-Net over channel-stacked patches.
//!
//! Layout for `encoder_features = [f1, .., fL]`:
//!
//! * encoder level `i`: two `conv3×3 → batchnorm → relu` stages to `fi`
//!   channels, then 2×2 max pooling (the last level is the bottleneck and is
//!   not pooled);
//! * decoder level `i` (from `L−1` down to 1): up-conv (nearest ×2, `conv3×3`,
//!   batchnorm, relu) to `fi` channels, an additive attention gate on the
//!   level-`i` skip, concatenation `[gated skip, up]`, two conv-bn-relu stages
//!   back to `fi`, dropout;
//! * head: `conv1×1` to `K` channels and a channel softmax.
//!
//! Parameters are stored under stable dotted names in declaration order,
//! e.g. `enc1.conv1.w`, `dec2.att.psi.b`, `head.w`.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{BatchNormState, Mode, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_features: Vec<usize>,
    pub dropout_p: f64,
    pub patch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 21,
            num_classes: 5,
            encoder_features: vec![64, 128, 256, 512],
            dropout_p: 0.3,
            patch_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.encoder_features.len()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels < 2 {
            return Err(Error::invalid("need at least two encoder levels"));
        }
        if self.encoder_features.windows(2).any(|w| w[0] >= w[1]) || self.encoder_features[0] == 0 {
            return Err(Error::invalid(format!(
                "encoder features must be strictly increasing and positive, got {:?}",
                self.encoder_features
            )));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid("need ≥ 1 input channel and ≥ 2 classes"));
        }
        let div = 1usize << (levels - 1);
        if self.patch_size == 0 || self.patch_size % div != 0 {
            return Err(Error::invalid(format!(
                "patch size {} not divisible by {div}",
                self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn attention_width(features: usize) -> usize {
        (features / 2).max(1)
    }

    /// Every parameter as `(name, shape)`, in forward order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let f = &self.encoder_features;
        let mut out = Vec::new();
        // convs feeding a batchnorm carry no bias: the normalization removes it
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
        };
        let biased_conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            out.push((format!("{name}.gamma"), vec![c]));
            out.push((format!("{name}.beta"), vec![c]));
        };
        let mut prev = self.in_channels;
        for (i, &c) in f.iter().enumerate() {
            let l = i + 1;
            conv(&mut out, format!("enc{l}.conv1"), c, prev, 3);
            bn(&mut out, format!("enc{l}.bn1"), c);
            conv(&mut out, format!("enc{l}.conv2"), c, c, 3);
            bn(&mut out, format!("enc{l}.bn2"), c);
            prev = c;
        }
        for i in (0..f.len() - 1).rev() {
            let l = i + 1;
            let (c, deeper) = (f[i], f[i + 1]);
            let fint = Self::attention_width(c);
            conv(&mut out, format!("dec{l}.up"), c, deeper, 3);
            bn(&mut out, format!("dec{l}.up_bn"), c);
            biased_conv(&mut out, format!("dec{l}.att.wg"), fint, c, 1);
            biased_conv(&mut out, format!("dec{l}.att.wx"), fint, c, 1);
            biased_conv(&mut out, format!("dec{l}.att.psi"), 1, fint, 1);
            conv(&mut out, format!("dec{l}.conv1"), c, 2 * c, 3);
            bn(&mut out, format!("dec{l}.bn1"), c);
            conv(&mut out, format!("dec{l}.conv2"), c, c, 3);
            bn(&mut out, format!("dec{l}.bn2"), c);
        }
        biased_conv(&mut out, "head".into(), self.num_classes, f[0], 1);
        out
    }

    /// Batchnorm layer names with their channel counts.
    pub fn batchnorm_layers(&self) -> Vec<(String, usize)> {
        self.inventory()
            .into_iter()
            .filter_map(|(name, shape)| name.strip_suffix(".gamma").map(|n| (n.to_string(), shape[0])))
            .collect()
    }
}

/// Learnable weights plus batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor<T>>,
    pub batchnorm: IndexMap<String, BatchNormState<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal convolution weights, zero biases, unit gamma, zero beta.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (idx, (name, shape)) in config.inventory().into_iter().enumerate() {
            let t = if name.ends_with(".w") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                Tensor::randn(&shape, derive_seed(seed, idx as u64), (2.0 / fan_in).sqrt())?
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())?
            } else {
                Tensor::zeros(&shape)?
            };
            params.insert(name, t);
        }
        let batchnorm = config
            .batchnorm_layers()
            .into_iter()
            .map(|(name, c)| Ok((name, BatchNormState::new(c)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
            batchnorm,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            batchnorm: self.batchnorm.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Result of one forward pass.
pub struct ForwardOutput {
    pub probs: Var,
    /// Attention coefficient maps `[N,1,H,W]`, deepest decoder level first.
    pub attention: Vec<Var>,
}

/// Parameters registered as tape leaves for one forward pass.
pub struct Session<'p, T: Scalar> {
    model: &'p mut ModelParams<T>,
    vars: IndexMap<String, Var>,
    mode: Mode,
    dropout_seed: u64,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// Registers every parameter, in declaration order, as a gradient leaf.
    pub fn new(model: &'p mut ModelParams<T>, tape: &mut Tape<T>, mode: Mode, dropout_seed: u64) -> Self {
        let vars = model
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), true)))
            .collect();
        Self {
            model,
            vars,
            mode,
            dropout_seed,
        }
    }

    /// Uses caller-recorded values for the parameters instead of `model.params`.
    /// `vars` must name every parameter; batchnorm state still comes from `model`.
    pub fn with_vars(model: &'p mut ModelParams<T>, vars: IndexMap<String, Var>, mode: Mode, dropout_seed: u64) -> Result<Self> {
        if let Some(missing) = model.params.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::invalid(format!("no value supplied for parameter {missing}")));
        }
        Ok(Self {
            model,
            vars,
            mode,
            dropout_seed,
        })
    }

    /// Leaf handles keyed by parameter name.
    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    fn conv(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b")).copied();
        let pad = tape.shape(w)[2] / 2;
        tape.conv2d(x, w, b, 1, pad)
    }

    fn batchnorm(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let state = self
            .model
            .batchnorm
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown batchnorm {name}")))?;
        tape.batchnorm2d(x, gamma, beta, state, self.mode)
    }

    fn conv_bn_relu(&mut self, tape: &mut Tape<T>, conv: &str, bn: &str, x: Var) -> Result<Var> {
        let y = self.conv(tape, conv, x)?;
        let y = self.batchnorm(tape, bn, y)?;
        tape.relu(y)
    }

    fn double_conv(&mut self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv_bn_relu(tape, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), x)?;
        self.conv_bn_relu(tape, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), y)
    }

    /// Two conv-bn-relu stages at `level` (1-based) followed by 2×2 max pooling.
    pub fn encoder_block(&mut self, tape: &mut Tape<T>, x: Var, level: usize) -> Result<(Var, Var)> {
        let features = self.double_conv(tape, &format!("enc{level}"), x)?;
        let pooled = tape.maxpool2d(features)?;
        Ok((features, pooled))
    }

    /// Additive attention: `α = σ(ψ(relu(Wg·g + Wx·x)))`, returns `(skip ⊙ α, α)`.
    /// A gate coarser than the skip is upsampled by nearest ×2 steps first.
    pub fn attention_gate(
        &mut self,
        tape: &mut Tape<T>,
        skip: Var,
        gate: Var,
        level: usize,
    ) -> Result<(Var, Var)> {
        let prefix = format!("dec{level}.att");
        let mut g = gate;
        while tape.shape(g)[2] < tape.shape(skip)[2] {
            g = tape.upsample_nearest2(g)?;
        }
        let (ss, gs) = (tape.shape(skip), tape.shape(g));
        if ss[0] != gs[0] || ss[2..] != gs[2..] {
            return Err(Error::ShapeMismatch {
                op: "attention_gate",
                left: ss.to_vec(),
                right: gs.to_vec(),
            });
        }
        let pg = self.conv(tape, &format!("{prefix}.wg"), g)?;
        let px = self.conv(tape, &format!("{prefix}.wx"), skip)?;
        let sum = tape.add(pg, px)?;
        let act = tape.relu(sum)?;
        let psi = self.conv(tape, &format!("{prefix}.psi"), act)?;
        let alpha = tape.sigmoid(psi)?;
        let gated = tape.mul(skip, alpha)?;
        Ok((gated, alpha))
    }

    fn decoder_block(&mut self, tape: &mut Tape<T>, deeper: Var, skip: Var, level: usize) -> Result<(Var, Var)> {
        let prefix = format!("dec{level}");
        let up = tape.upsample_nearest2(deeper)?;
        let up = self.conv_bn_relu(tape, &format!("{prefix}.up"), &format!("{prefix}.up_bn"), up)?;
        let (gated, alpha) = self.attention_gate(tape, skip, up, level)?;
        let cat = tape.concat_channels(gated, up)?;
        let y = self.double_conv(tape, &prefix, cat)?;
        let seed = derive_seed(self.dropout_seed, level as u64);
        let y = tape.dropout(y, self.model.config.dropout_p, seed, self.mode)?;
        Ok((y, alpha))
    }

    /// `[N, C, z, z]` → class probabilities `[N, K, z, z]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<ForwardOutput> {
        let cfg = self.model.config.clone();
        let shape = tape.value(x).dims4()?;
        let expected = [shape[0], cfg.in_channels, cfg.patch_size, cfg.patch_size];
        if shape != expected {
            return Err(Error::ShapeMismatch {
                op: "forward (expected vs actual)",
                left: expected.to_vec(),
                right: shape.to_vec(),
            });
        }
        let levels = cfg.levels();
        let mut skips = Vec::with_capacity(levels - 1);
        let mut h = x;
        for level in 1..levels {
            let (features, pooled) = self.encoder_block(tape, h, level)?;
            skips.push(features);
            h = pooled;
        }
        h = self.double_conv(tape, &format!("enc{levels}"), h)?;
        let mut attention = Vec::with_capacity(levels - 1);
        for level in (1..levels).rev() {
            let (y, alpha) = self.decoder_block(tape, h, skips[level - 1], level)?;
            attention.push(alpha);
            h = y;
        }
        let logits = self.conv(tape, "head", h)?;
        let probs = tape.softmax_channel(logits)?;
        Ok(ForwardOutput { probs, attention })
    }
}

/// One forward pass; returns the output handles and the parameter leaves.
pub fn forward<T: Scalar>(
    model: &mut ModelParams<T>,
    tape: &mut Tape<T>,
    x: Var,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(ForwardOutput, IndexMap<String, Var>)> {
    let mut session = Session::new(model, tape, mode, dropout_seed);
    let out = session.forward(tape, x)?;
    Ok((out, session.vars))
}

/// Per-cell argmax over the class axis; ties go to the lowest class.
pub fn predict_classes<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = probs.dims4()?;
    if k > 255 {
        return Err(Error::invalid("more than 255 classes"));
    }
    let hw = h * w;
    let d = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"MUNW";
const CHECKPOINT_VERSION: u16 = 1;
const RUNNING_PREFIX: &str = "running:";
pub const META_PREFIX: &str = "meta:";

/// A model plus free-form `meta:` tensors (normalization statistics, patch size, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub meta: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Records `patch_size` and `dropout_p` as meta entries so the config
    /// can be recovered on load.
    pub fn new(model: ModelParams<f32>) -> Self {
        let mut meta = IndexMap::new();
        let scalar = |v: f32| Tensor::raw(vec![1], vec![v]);
        meta.insert("patch_size".to_string(), scalar(model.config.patch_size as f32));
        meta.insert("dropout_p".to_string(), scalar(model.config.dropout_p as f32));
        Self { model, meta }
    }

    fn entries(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> =
            self.model.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (name, st) in &self.model.batchnorm {
            out.push((format!("{RUNNING_PREFIX}{name}.mean"), &st.running_mean));
            out.push((format!("{RUNNING_PREFIX}{name}.var"), &st.running_var));
        }
        for (k, v) in &self.meta {
            out.push((format!("{META_PREFIX}{k}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad checkpoint magic".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let mut raw: IndexMap<String, Tensor<f32>> = IndexMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                reason: "tensor name is not UTF-8".into(),
            })?;
            let rank = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            let payload = r.take(len * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Format {
                offset: at,
                reason: format!("{name}: {e}"),
            })?;
            raw.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: "trailing bytes after last tensor".into(),
            });
        }
        Self::assemble(raw)
    }

    fn assemble(mut raw: IndexMap<String, Tensor<f32>>) -> Result<Self> {
        let mut meta = IndexMap::new();
        let mut running = IndexMap::new();
        let mut params = IndexMap::new();
        for (name, t) in raw.drain(..) {
            if let Some(k) = name.strip_prefix(META_PREFIX) {
                meta.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(RUNNING_PREFIX) {
                running.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let config = infer_config(&params, &meta)?;
        let expected = config.inventory();
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((en, es), (n, t))| en != n || es.as_slice() != t.shape())
        {
            return Err(Error::invalid(
                "checkpoint parameters do not match the inferred architecture",
            ));
        }
        let mut batchnorm = IndexMap::new();
        for (name, c) in config.batchnorm_layers() {
            let mean = running.shift_remove(&format!("{name}.mean"));
            let var = running.shift_remove(&format!("{name}.var"));
            let (Some(m), Some(v)) = (mean, var) else {
                return Err(Error::invalid(format!("checkpoint lacks running statistics for {name}")));
            };
            if m.shape() != [c] || v.shape() != [c] {
                return Err(Error::invalid(format!("running statistics of {name} have wrong shape")));
            }
            batchnorm.insert(
                name,
                BatchNormState {
                    running_mean: m,
                    running_var: v,
                },
            );
        }
        Ok(Self {
            model: ModelParams {
                config,
                params,
                batchnorm,
            },
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn infer_config(params: &IndexMap<String, Tensor<f32>>, meta: &IndexMap<String, Tensor<f32>>) -> Result<ModelConfig> {
    let mut features = Vec::new();
    let mut in_channels = 0;
    while let Some(w) = params.get(&format!("enc{}.conv1.w", features.len() + 1)) {
        if features.is_empty() {
            in_channels = w.shape()[1];
        }
        features.push(w.shape()[0]);
    }
    let head = params
        .get("head.w")
        .ok_or_else(|| Error::invalid("checkpoint has no head.w"))?;
    let scalar = |key: &str| meta.get(key).and_then(|t| t.data().first().copied());
    let defaults = ModelConfig::default();
    let config = ModelConfig {
        in_channels,
        num_classes: head.shape()[0],
        encoder_features: features,
        // shortest f32 decimal, so 0.3 comes back as 0.3
        dropout_p: scalar("dropout_p").map_or(defaults.dropout_p, |v| v.to_string().parse().unwrap_or(v as f64)),
        patch_size: scalar("patch_size").map_or(defaults.patch_size, |v| v as usize),
    };
    config.validate()?;
    Ok(config)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
