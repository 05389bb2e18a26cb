//! Scaled-down UNet-style segmentation network.
//!
//! The encoder halves resolution with stride-2 convolutions, the decoder
//! restores it with nearest-neighbor upsampling, and skip connections are
//! channel concatenations. Every convolution except the 1x1 head is followed
//! by batch normalization and ReLU. Parameters are partitioned into the
//! batchnorm affine set (gamma/beta, the only tensors adaptation may update)
//! and the frozen set (all convolution weights and biases).
//!
//! The 2D network is applied slice-wise to 3D subjects.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// EMA momentum for running statistics during pretraining.
pub const BN_MOMENTUM: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SHTTACKP";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_base_width() -> usize {
    8
}

fn default_depth() -> usize {
    3
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_width < 1 || self.in_channels < 1 {
            return Err(Error::Config("base_width and in_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    BnAffine,
    Frozen,
}

#[derive(Debug, Clone)]
struct Param {
    tensor: Tensor,
    kind: ParamKind,
}

/// Named network parameters plus batchnorm running-statistic buffers.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    config: NetworkConfig,
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

/// One convolution layer of the plan, in construction order.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
    pub has_bn: bool,
}

/// The network's convolution layers in forward order.
pub fn conv_layers(config: &NetworkConfig) -> Vec<ConvLayer> {
    let mut layers = Vec::new();
    let mut push = |name: &str, cin: usize, cout: usize, ksize: usize, stride: usize, has_bn: bool| {
        layers.push(ConvLayer { name: name.to_string(), cin, cout, ksize, stride, has_bn });
    };
    let w0 = config.width(0);
    push("stem.conv1", config.in_channels, w0, 3, 1, true);
    push("stem.conv2", w0, w0, 3, 1, true);
    for level in 1..=config.depth {
        let (wi_prev, wi) = (config.width(level - 1), config.width(level));
        push(&format!("down{}.conv", level), wi_prev, wi, 3, 2, true);
        push(&format!("stage{}.conv", level), wi, wi, 3, 1, true);
    }
    for level in (1..=config.depth).rev() {
        let (wi, wi_prev) = (config.width(level), config.width(level - 1));
        push(&format!("up{}.conv1", level), wi, wi_prev, 3, 1, true);
        push(&format!("up{}.conv2", level), 2 * wi_prev, wi_prev, 3, 1, true);
    }
    push("head", config.width(0), config.num_classes, 1, 1, false);
    layers
}

/// Deterministic He-style initialization: conv weights ~ N(0, 2/fan_in),
/// biases 0, gamma 1, beta 0, running stats (0, 1).
pub fn build(config: &NetworkConfig) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for layer in conv_layers(config) {
        let fan_in = layer.cin * layer.ksize * layer.ksize;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = layer.cout * fan_in;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(std * normal_sample(&mut rng));
        }
        params.insert(
            format!("{}.weight", layer.name),
            Param {
                tensor: Tensor::new(vec![layer.cout, layer.cin, layer.ksize, layer.ksize], weights)?,
                kind: ParamKind::Frozen,
            },
        );
        params.insert(
            format!("{}.bias", layer.name),
            Param { tensor: Tensor::zeros(vec![layer.cout]), kind: ParamKind::Frozen },
        );
        if layer.has_bn {
            let bn = bn_name(&layer.name);
            params.insert(
                format!("{}.gamma", bn),
                Param { tensor: Tensor::full(vec![layer.cout], 1.0), kind: ParamKind::BnAffine },
            );
            params.insert(
                format!("{}.beta", bn),
                Param { tensor: Tensor::zeros(vec![layer.cout]), kind: ParamKind::BnAffine },
            );
            buffers.insert(format!("{}.running_mean", bn), Tensor::zeros(vec![layer.cout]));
            buffers.insert(format!("{}.running_var", bn), Tensor::full(vec![layer.cout], 1.0));
        }
    }
    Ok(ParameterStore { config: config.clone(), params, buffers })
}

fn bn_name(conv_name: &str) -> String {
    match conv_name.strip_suffix(".conv") {
        Some(prefix) => format!("{}.bn", prefix),
        None => conv_name.replace(".conv", ".bn"),
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl ParameterStore {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.params.get(name).map(|p| p.kind)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Names of the batchnorm scale/bias tensors, the adaptable set.
    pub fn adaptable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::BnAffine)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total number of parameter scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Overwrite one parameter's values (shape must match).
    pub fn set_values(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{}`", name)))?;
        if values.len() != param.tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_values",
                detail: format!("{}: {} values for {} slots", name, values.len(), param.tensor.numel()),
            });
        }
        param.tensor.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Blend fresh batch statistics into the running buffers (pretraining).
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)], momentum: f64) {
        for (bn, mean, var) in stats {
            if let Some(buf) = self.buffers.get_mut(&format!("{}.running_mean", bn)) {
                for (r, m) in buf.values_mut().iter_mut().zip(mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
            }
            if let Some(buf) = self.buffers.get_mut(&format!("{}.running_var", bn)) {
                for (r, v) in buf.values_mut().iter_mut().zip(var) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
    }
}

/// Batch-normalization statistics policy for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; batch stats reported for running-average updates.
    Train,
    /// Frozen running statistics from pretraining; fully deterministic.
    Eval,
    /// Batch statistics without touching the running buffers (test-time
    /// adaptation and post-adaptation inference).
    Adapt,
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    BnAffine,
    All,
}

impl GradScope {
    fn requires_grad(&self, kind: ParamKind) -> bool {
        match self {
            GradScope::None => false,
            GradScope::BnAffine => kind == ParamKind::BnAffine,
            GradScope::All => true,
        }
    }
}

/// One recorded forward pass through the network.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub softmax: Var,
    /// Tape handle of every bound parameter, by name.
    pub params: BTreeMap<String, Var>,
    /// (bn name, batch mean, batch var) per BN layer, in Train mode only.
    pub bn_batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

struct NetCtx<'a> {
    store: &'a ParameterStore,
    vars: BTreeMap<String, Var>,
    mode: ForwardMode,
    bn_batch_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl NetCtx<'_> {
    fn conv_bn_relu(&mut self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let pad = 1; // all 3x3 convolutions are unit-padded
        let w = self.vars[&format!("{}.weight", name)];
        let b = self.vars[&format!("{}.bias", name)];
        let y = tape.conv2d(x, w, Some(b), stride, pad)?;
        let bn = bn_name(name);
        let gamma = self.vars[&format!("{}.gamma", bn)];
        let beta = self.vars[&format!("{}.beta", bn)];
        let stats = match self.mode {
            ForwardMode::Train | ForwardMode::Adapt => BnStats::Batch,
            ForwardMode::Eval => BnStats::Fixed {
                mean: self.store.buffer(&format!("{}.running_mean", bn)).expect("running mean").values().to_vec(),
                var: self.store.buffer(&format!("{}.running_var", bn)).expect("running var").values().to_vec(),
            },
        };
        let y = tape.batch_norm(y, gamma, beta, BN_EPS, stats)?;
        if self.mode == ForwardMode::Train {
            if let Some((mean, var)) = tape.bn_stats(y) {
                self.bn_batch_stats.push((bn, mean, var));
            }
        }
        Ok(tape.relu(y))
    }
}

/// Forward a batch of B×C×H×W images; returns logits and channel softmax,
/// both B×K×H×W.
pub fn forward(
    tape: &mut Tape,
    store: &ParameterStore,
    images: &Tensor,
    mode: ForwardMode,
    grad: GradScope,
) -> Result<ForwardPass> {
    let config = &store.config;
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != config.in_channels {
        return Err(Error::ShapeMismatch {
            op: "segnet_forward",
            detail: format!("expected B×{}×H×W batch, got {:?}", config.in_channels, shape),
        });
    }
    let div = 1usize << config.depth;
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(Error::ShapeMismatch {
            op: "segnet_forward",
            detail: format!(
                "spatial dims {}x{} must be divisible by 2^depth = {}",
                shape[2], shape[3], div
            ),
        });
    }

    let mut vars = BTreeMap::new();
    for (name, param) in &store.params {
        vars.insert(name.clone(), tape.leaf(&param.tensor, grad.requires_grad(param.kind)));
    }
    let mut ctx = NetCtx { store, vars, mode, bn_batch_stats: Vec::new() };

    let x = tape.leaf(images, false);
    let mut h = ctx.conv_bn_relu(tape, "stem.conv1", x, 1)?;
    h = ctx.conv_bn_relu(tape, "stem.conv2", h, 1)?;

    let mut skips = Vec::with_capacity(config.depth);
    for level in 1..=config.depth {
        skips.push(h);
        h = ctx.conv_bn_relu(tape, &format!("down{}.conv", level), h, 2)?;
        h = ctx.conv_bn_relu(tape, &format!("stage{}.conv", level), h, 1)?;
    }
    for level in (1..=config.depth).rev() {
        h = tape.upsample2x(h)?;
        h = ctx.conv_bn_relu(tape, &format!("up{}.conv1", level), h, 1)?;
        let skip = skips.pop().expect("one skip per level");
        h = tape.concat_channels(h, skip)?;
        h = ctx.conv_bn_relu(tape, &format!("up{}.conv2", level), h, 1)?;
    }

    let wh = ctx.vars["head.weight"];
    let bh = ctx.vars["head.bias"];
    let logits = tape.conv2d(h, wh, Some(bh), 1, 0)?;
    let softmax = tape.softmax_channels(logits)?;

    Ok(ForwardPass { logits, softmax, params: ctx.vars, bn_batch_stats: ctx.bn_batch_stats })
}

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class.
pub fn argmax_channels(values: &[f64], b: usize, k: usize, plane: usize) -> Vec<u8> {
    let mut labels = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = values[(bi * k) * plane + p];
            for ch in 1..k {
                let v = values[(bi * k + ch) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            labels[bi * plane + p] = best as u8;
        }
    }
    labels
}

// ----- checkpoint I/O -----

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: NetworkConfig,
    seed: u64,
    entries: Vec<CheckpointEntry>,
}

impl ParameterStore {
    /// Write the store as a checkpoint: 8-byte magic, little-endian u64
    /// manifest length, JSON manifest, then f32 little-endian payloads in
    /// manifest order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for (name, p) in &self.params {
            entries.push(CheckpointEntry {
                name: name.clone(),
                kind: match p.kind {
                    ParamKind::BnAffine => "bn_affine".into(),
                    ParamKind::Frozen => "frozen".into(),
                },
                shape: p.tensor.shape().to_vec(),
            });
        }
        for (name, t) in &self.buffers {
            entries.push(CheckpointEntry { name: name.clone(), kind: "buffer".into(), shape: t.shape().to_vec() });
        }
        let manifest = CheckpointManifest {
            version: 1,
            config: self.config.clone(),
            seed: self.config.seed,
            entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        let mut file = std::fs::File::create(path)?;
        file.write_all(CHECKPOINT_MAGIC)?;
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        for entry in &manifest.entries {
            let tensor = match entry.kind.as_str() {
                "buffer" => &self.buffers[&entry.name],
                _ => &self.params[&entry.name].tensor,
            };
            for v in tensor.values() {
                file.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParameterStore> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::CheckpointFormat("file too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic; not a checkpoint file".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| Error::CheckpointFormat("file too short for manifest length".into()))?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)
            .map_err(|_| Error::CheckpointFormat("truncated manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
        manifest.config.validate()?;

        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let mut offset = 0usize;
        for entry in &manifest.entries {
            let numel: usize = entry.shape.iter().product();
            let nbytes = numel * 4;
            if offset + nbytes > payload.len() {
                return Err(Error::CheckpointFormat(format!(
                    "truncated payload at `{}`: need {} bytes, have {}",
                    entry.name,
                    nbytes,
                    payload.len() - offset
                )));
            }
            let mut values = Vec::with_capacity(numel);
            for i in 0..numel {
                let b = &payload[offset + 4 * i..offset + 4 * i + 4];
                values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            offset += nbytes;
            let tensor = Tensor::new(entry.shape.clone(), values)?;
            match entry.kind.as_str() {
                "bn_affine" => {
                    params.insert(entry.name.clone(), Param { tensor, kind: ParamKind::BnAffine });
                }
                "frozen" => {
                    params.insert(entry.name.clone(), Param { tensor, kind: ParamKind::Frozen });
                }
                "buffer" => {
                    buffers.insert(entry.name.clone(), tensor);
                }
                other => {
                    return Err(Error::CheckpointFormat(format!("unknown entry kind `{}`", other)));
                }
            }
        }
        if offset != payload.len() {
            return Err(Error::CheckpointFormat(format!(
                "payload has {} trailing bytes",
                payload.len() - offset
            )));
        }
        Ok(ParameterStore { config: manifest.config, params, buffers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig { in_channels: 1, num_classes: 3, base_width: 4, depth: 2, seed: 11 }
    }

    fn ramp_images(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let n = b * c * h * w;
        let values: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        Tensor::new(vec![b, c, h, w], values).unwrap()
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build(&small_config()).unwrap();
        let b = build(&small_config()).unwrap();
        for name in a.param_names() {
            let (x, y) = (a.get(name).unwrap(), b.get(name).unwrap());
            assert_eq!(x.values(), y.values(), "{}", name);
        }
        let mut other = small_config();
        other.seed = 12;
        let c = build(&other).unwrap();
        assert_ne!(a.get("stem.conv1.weight").unwrap().values(), c.get("stem.conv1.weight").unwrap().values());
    }

    #[test]
    fn gamma_one_beta_zero_at_init() {
        let store = build(&small_config()).unwrap();
        for name in store.adaptable_names() {
            let t = store.get(&name).unwrap();
            let want = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            assert!(t.values().iter().all(|v| *v == want), "{}", name);
        }
    }

    #[test]
    fn parameter_count_matches_architecture_enumeration() {
        // Independent enumeration over the documented layer table.
        let config = NetworkConfig { in_channels: 1, num_classes: 4, base_width: 8, depth: 3, seed: 0 };
        let store = build(&config).unwrap();
        let mut expected = 0usize;
        for layer in conv_layers(&config) {
            expected += layer.cout * layer.cin * layer.ksize * layer.ksize + layer.cout;
            if layer.has_bn {
                expected += 2 * layer.cout;
            }
        }
        assert_eq!(store.num_scalars(), expected);
        // frozen value from the architecture table in docs/architecture.md
        assert_eq!(store.num_scalars(), 122_700);
        // 14 BN layers -> 28 adaptable tensors
        assert_eq!(store.adaptable_names().len(), 28);
        let bn_scalars: usize = store
            .adaptable_names()
            .iter()
            .map(|n| store.get(n).unwrap().numel())
            .sum();
        assert_eq!(bn_scalars, 704);
    }

    #[test]
    fn adaptable_set_is_exactly_the_bn_affine_partition() {
        let store = build(&small_config()).unwrap();
        let adaptable = store.adaptable_names();
        for name in &adaptable {
            assert!(name.ends_with(".gamma") || name.ends_with(".beta"), "{}", name);
        }
        for name in store.frozen_names() {
            assert!(name.contains("conv") || name.starts_with("head"), "{}", name);
            assert!(!adaptable.contains(&name));
        }
        let total = adaptable.len() + store.frozen_names().len();
        assert_eq!(total, store.param_names().count());
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let store = build(&small_config()).unwrap();
        let images = ramp_images(2, 1, 16, 16);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &images, ForwardMode::Eval, GradScope::None).unwrap();
        assert_eq!(tape.shape(pass.logits), &[2, 3, 16, 16]);
        assert_eq!(tape.shape(pass.softmax), &[2, 3, 16, 16]);
        let sv = tape.values(pass.softmax);
        for p in 0..256 {
            let sum: f64 = (0..3).map(|k| sv[k * 256 + p]).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn indivisible_spatial_dims_are_rejected() {
        let store = build(&small_config()).unwrap();
        let images = ramp_images(1, 1, 10, 16);
        let mut tape = Tape::new();
        let err = forward(&mut tape, &store, &images, ForwardMode::Eval, GradScope::None).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{}", err);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let store = build(&small_config()).unwrap();
        let images = ramp_images(1, 1, 16, 16);
        let mut t1 = Tape::new();
        let p1 = forward(&mut t1, &store, &images, ForwardMode::Eval, GradScope::None).unwrap();
        let mut t2 = Tape::new();
        let p2 = forward(&mut t2, &store, &images, ForwardMode::Eval, GradScope::None).unwrap();
        assert_eq!(t1.values(p1.logits), t2.values(p2.logits));
    }

    #[test]
    fn every_bn_affine_parameter_receives_a_gradient() {
        let store = build(&small_config()).unwrap();
        let images = ramp_images(2, 1, 16, 16);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &images, ForwardMode::Adapt, GradScope::BnAffine).unwrap();
        // any scalar loss touching all channels
        let sq = tape.mul(pass.softmax, pass.softmax).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        for name in store.adaptable_names() {
            let var = pass.params[&name];
            let g = tape.grad(var).unwrap_or_else(|| panic!("missing grad for {}", name));
            assert_eq!(g.len(), store.get(&name).unwrap().numel());
        }
        for name in store.frozen_names() {
            assert!(tape.grad(pass.params[&name]).is_none(), "{} should not get a gradient", name);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let store = build(&small_config()).unwrap();
        store.save(&path).unwrap();
        let loaded1 = ParameterStore::load(&path).unwrap();
        let path2 = dir.path().join("net2.ckpt");
        loaded1.save(&path2).unwrap();
        let loaded2 = ParameterStore::load(&path2).unwrap();

        let images = ramp_images(1, 1, 16, 16);
        let mut t1 = Tape::new();
        let p1 = forward(&mut t1, &loaded1, &images, ForwardMode::Eval, GradScope::None).unwrap();
        let mut t2 = Tape::new();
        let p2 = forward(&mut t2, &loaded2, &images, ForwardMode::Eval, GradScope::None).unwrap();
        assert_eq!(t1.values(p1.logits), t2.values(p2.logits));

        // partition tags survive the roundtrip
        assert_eq!(loaded1.adaptable_names(), store.adaptable_names());
        assert_eq!(loaded1.config(), store.config());
    }

    #[test]
    fn truncated_checkpoint_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let store = build(&small_config()).unwrap();
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
        let err = ParameterStore::load(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointFormat(_)), "{}", err);
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_class() {
        let values = vec![0.4, 0.3, 0.4, 0.3, 0.2, 0.4];
        // K=3, plane=2: pixel0 -> class0 (0.4 vs 0.4 vs 0.2), pixel1 -> class2
        let labels = argmax_channels(&values, 1, 3, 2);
        assert_eq!(labels, vec![0, 2]);
    }
}
