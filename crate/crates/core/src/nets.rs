//! Configurable 3D encoder-decoder networks for both cascade stages.
//!
//! Each encoder level runs two `conv3d -> batchnorm -> relu` blocks and then max
//! pools; the bottleneck runs two more blocks; each decoder level upsamples with a
//! transposed convolution, concatenates the matching encoder features (upsampled
//! first) and runs two blocks. A final 3x3x3 convolution maps to the output
//! channels. [`SemanticNet`] applies a channel softmax over four classes,
//! [`InstanceNet`] a sigmoid over one channel and takes `(CT, memory)` as input.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, AutodiffError, Graph, Parameter, RunningStats, Tensor, Var};
use crate::volume::write_atomic;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid net config: {0}")]
    InvalidConfig(String),
    #[error("spatial extents {dims:?} must be divisible by {factor}")]
    Divisibility { dims: Vec<usize>, factor: usize },
    #[error("input shape {found:?} does not match expected {expected}")]
    Shape { expected: String, found: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    /// Channels at the first level.
    pub base_width: usize,
    /// Channel multiplier per level.
    pub width_growth: usize,
}

impl NetConfig {
    pub fn semantic() -> Self {
        Self { in_channels: 1, out_channels: 4, depth: 3, base_width: 8, width_growth: 2 }
    }

    pub fn instance() -> Self {
        Self { in_channels: 2, out_channels: 1, depth: 3, base_width: 8, width_growth: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_width < 1 || self.width_growth < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(NetError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }

    /// Channel width at each level; index `depth` is the bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_width * self.width_growth.pow(l as u32)).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_spatial(&self, dims: &[usize]) -> Result<()> {
        let f = self.size_factor();
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(NetError::Divisibility { dims: dims.to_vec(), factor: f });
        }
        Ok(())
    }

    /// Trainable scalar count:
    ///
    /// * conv block `ci -> co`: `27*ci*co + co` weights and bias plus `2*co` norm scale/shift
    /// * encoder level `l`: blocks `in_l -> w_l` and `w_l -> w_l` (`in_0` = input channels)
    /// * bottleneck: blocks `w_{D-1} -> w_D` and `w_D -> w_D`
    /// * decoder level `l`: transposed conv `64*w_{l+1}*w_l + w_l`, blocks `2*w_l -> w_l`, `w_l -> w_l`
    /// * head: `27*w_0*out + out`
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let block = |ci: usize, co: usize| 27 * ci * co + co + 2 * co;
        let mut total = 0;
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { w[l - 1] };
            total += block(cin, w[l]) + block(w[l], w[l]);
        }
        total += block(w[self.depth - 1], w[self.depth]) + block(w[self.depth], w[self.depth]);
        for l in 0..self.depth {
            total += 64 * w[l + 1] * w[l] + w[l] + block(2 * w[l], w[l]) + block(w[l], w[l]);
        }
        total + 27 * w[0] * self.out_channels + self.out_channels
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct Level {
    first: ConvBn,
    second: ConvBn,
}

#[derive(Debug, Clone)]
struct Up {
    w: usize,
    b: usize,
}

/// Parameter and statistic indices are resolved at construction.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: NetConfig,
    params: Vec<Parameter<f32>>,
    stats: Vec<RunningStats<f32>>,
    stat_names: Vec<String>,
    encoder: Vec<Level>,
    bottleneck: Level,
    ups: Vec<Up>,
    decoder: Vec<Level>,
    head: Up,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter<f32>>,
    stats: Vec<RunningStats<f32>>,
    stat_names: Vec<String>,
}

impl Builder {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        self.params.push(Parameter::new(name, Tensor::new(shape, data)));
        self.params.len() - 1
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f32) -> usize {
        self.params.push(Parameter::new(name, Tensor::full(shape, v)));
        self.params.len() - 1
    }

    fn conv_bn(&mut self, name: &str, ci: usize, co: usize) -> ConvBn {
        let std = (2.0 / (27 * ci) as f64).sqrt();
        let w = self.normal(format!("{name}.conv.weight"), vec![co, ci, 3, 3, 3], std);
        let b = self.constant(format!("{name}.conv.bias"), vec![co], 0.0);
        let gamma = self.constant(format!("{name}.bn.gamma"), vec![co], 1.0);
        let beta = self.constant(format!("{name}.bn.beta"), vec![co], 0.0);
        self.stats.push(RunningStats::new(co));
        self.stat_names.push(format!("{name}.bn"));
        ConvBn { w, b, gamma, beta, stats: self.stats.len() - 1 }
    }

    fn level(&mut self, name: &str, ci: usize, co: usize) -> Level {
        Level { first: self.conv_bn(&format!("{name}.0"), ci, co), second: self.conv_bn(&format!("{name}.1"), co, co) }
    }
}

impl UNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new(), stats: Vec::new(), stat_names: Vec::new() };
        let mut encoder = Vec::new();
        for l in 0..cfg.depth {
            let cin = if l == 0 { cfg.in_channels } else { w[l - 1] };
            encoder.push(b.level(&format!("enc{l}"), cin, w[l]));
        }
        let bottleneck = b.level("bottleneck", w[cfg.depth - 1], w[cfg.depth]);
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..cfg.depth).rev() {
            let std = (2.0 / (8 * w[l + 1]) as f64).sqrt();
            let uw = b.normal(format!("up{l}.weight"), vec![w[l + 1], w[l], 4, 4, 4], std);
            let ub = b.constant(format!("up{l}.bias"), vec![w[l]], 0.0);
            ups.push(Up { w: uw, b: ub });
            decoder.push(b.level(&format!("dec{l}"), 2 * w[l], w[l]));
        }
        let hstd = (1.0 / (27 * w[0]) as f64).sqrt();
        let hw = b.normal("head.weight".into(), vec![cfg.out_channels, w[0], 3, 3, 3], hstd);
        let hb = b.constant("head.bias".into(), vec![cfg.out_channels], 0.0);
        Ok(Self {
            cfg,
            params: b.params,
            stats: b.stats,
            stat_names: b.stat_names,
            encoder,
            bottleneck,
            ups,
            decoder,
            head: Up { w: hw, b: hb },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<f32>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<f32>] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(NetError::Shape { expected: format!("[N, {}, D, H, W]", self.cfg.in_channels), found: shape.to_vec() });
        }
        self.cfg.check_spatial(&shape[2..])
    }

    fn block(&self, g: &mut Graph<f32>, pv: &[Var], stats: &mut [RunningStats<f32>], cb: &ConvBn, x: Var, training: bool) -> Result<Var> {
        let y = g.conv3d(x, pv[cb.w], pv[cb.b])?;
        let y = g.batchnorm(y, pv[cb.gamma], pv[cb.beta], &mut stats[cb.stats], training)?;
        Ok(g.relu(y))
    }

    fn level(&self, g: &mut Graph<f32>, pv: &[Var], stats: &mut [RunningStats<f32>], lv: &Level, x: Var, training: bool) -> Result<Var> {
        let y = self.block(g, pv, stats, &lv.first, x, training)?;
        self.block(g, pv, stats, &lv.second, y, training)
    }

    fn forward_impl(&self, g: &mut Graph<f32>, x: Var, stats: &mut [RunningStats<f32>], training: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(g.value(x).shape())?;
        let pv: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for lv in &self.encoder {
            h = self.level(g, &pv, stats, lv, h, training)?;
            skips.push(h);
            h = g.maxpool3d(h)?;
        }
        h = self.level(g, &pv, stats, &self.bottleneck, h, training)?;
        for (up, lv) in self.ups.iter().zip(&self.decoder) {
            let skip = skips.pop().expect("one skip per level");
            let u = g.deconv3d(h, pv[up.w], pv[up.b])?;
            let cat = g.concat_channels(u, skip)?;
            h = self.level(g, &pv, stats, lv, cat, training)?;
        }
        let logits = g.conv3d(h, pv[self.head.w], pv[self.head.b])?;
        Ok((logits, pv))
    }

    /// Training-mode forward: batch statistics, running statistics updated.
    /// Returns the logits and the graph vars of every parameter.
    pub fn forward_train(&mut self, g: &mut Graph<f32>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.forward_impl(g, x, &mut stats, true);
        self.stats = stats;
        out
    }

    /// Inference-mode forward returning logits.
    pub fn forward_eval(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let mut stats = self.stats.clone();
        Ok(self.forward_impl(g, x, &mut stats, false)?.0)
    }

    /// Move gradients from a differentiated graph into the parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<f32>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(g.take_grad(v).unwrap_or_else(|| vec![0.0; p.value.len()]));
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        Ok(crate::autodiff::adam_step(&mut self.params, cfg)?)
    }

    /// Logits for a constant input tensor, inference mode.
    pub fn infer_logits(&self, input: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.input(input);
        let y = self.forward_eval(&mut g, x)?;
        Ok(g.take_value(y))
    }
}

/// Stage-1 net: CT patch to four class posteriors (background, cervical, thoracic, lumbar).
#[derive(Debug, Clone)]
pub struct SemanticNet(pub UNet);

/// Stage-2 net: (CT, memory) patch to the probability of the next vertebra.
#[derive(Debug, Clone)]
pub struct InstanceNet(pub UNet);

impl SemanticNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        if cfg.in_channels != 1 || cfg.out_channels != 4 {
            return Err(NetError::InvalidConfig("semantic net needs 1 input and 4 output channels".into()));
        }
        Ok(Self(UNet::new(cfg, seed)?))
    }

    /// Per-voxel class logits of a `[1, 1, D, H, W]` patch.
    pub fn logits(&self, patch: Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.infer_logits(patch)
    }

    /// Per-voxel class posteriors summing to one over the channel axis.
    pub fn forward_semantic(&self, patch: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.input(patch);
        let y = self.0.forward_eval(&mut g, x)?;
        let p = g.softmax_channels(y)?;
        Ok(g.take_value(p))
    }
}

impl InstanceNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        if cfg.in_channels != 2 || cfg.out_channels != 1 {
            return Err(NetError::InvalidConfig("instance net needs 2 input and 1 output channel".into()));
        }
        Ok(Self(UNet::new(cfg, seed)?))
    }

    /// Stack `(CT, memory)` into a `[1, 2, D, H, W]` input.
    pub fn stack_input(ct: &Tensor<f32>, memory: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = ct.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 || memory.shape() != s {
            return Err(NetError::Shape { expected: format!("two equal [1, 1, D, H, W] tensors, CT is {s:?}"), found: memory.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(2 * ct.len());
        data.extend_from_slice(ct.data());
        data.extend_from_slice(memory.data());
        Ok(Tensor::new(vec![1, 2, s[2], s[3], s[4]], data))
    }

    /// Probability map of the next vertebra given CT and the memory of segmented ones.
    pub fn forward_instance(&self, ct: &Tensor<f32>, memory: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::inference();
        let x = g.input(Self::stack_input(ct, memory)?);
        let y = self.0.forward_eval(&mut g, x)?;
        let p = g.sigmoid(y);
        Ok(g.take_value(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Semantic,
    Instance,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the value; Adam `m` and `v` follow contiguously.
    offset: usize,
    step_count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEntry {
    name: String,
    channels: usize,
    /// Byte offset of the running mean; the running variance follows.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: NetKind,
    config: NetConfig,
    adam: AdamConfig,
    payload: String,
    tensors: Vec<TensorEntry>,
    batchnorm: Vec<StatsEntry>,
}

const CHECKPOINT_FORMAT: &str = "spine-cascade-checkpoint";

fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(buf: &[u8], offset: usize, n: usize) -> Result<Vec<f32>> {
    let end = offset + 4 * n;
    let bytes = buf.get(offset..end).ok_or_else(|| NetError::Checkpoint(format!("payload too short for [{offset}, {end})")))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Write the manifest to `path` and the raw little-endian payload next to it (`.bin`).
pub fn save_checkpoint(net: &UNet, kind: NetKind, adam: &AdamConfig, path: &Path) -> Result<()> {
    let payload_path = path.with_extension("bin");
    let payload_name = payload_path
        .file_name()
        .ok_or_else(|| NetError::Checkpoint(format!("bad path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let mut buf = Vec::new();
    let mut tensors = Vec::new();
    for p in &net.params {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: buf.len(), step_count: p.step_count });
        push_f32s(&mut buf, p.value.data());
        push_f32s(&mut buf, &p.adam_m);
        push_f32s(&mut buf, &p.adam_v);
    }
    let mut batchnorm = Vec::new();
    for (name, s) in net.stat_names.iter().zip(&net.stats) {
        batchnorm.push(StatsEntry { name: name.clone(), channels: s.mean.len(), offset: buf.len() });
        push_f32s(&mut buf, &s.mean);
        push_f32s(&mut buf, &s.var);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        kind,
        config: net.cfg.clone(),
        adam: *adam,
        payload: payload_name,
        tensors,
        batchnorm,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    write_atomic(&payload_path, &buf).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    write_atomic(path, text.as_bytes()).map_err(|e| NetError::Checkpoint(e.to_string()))
}

/// Load a checkpoint, verifying that every stored tensor matches the layout the
/// stored config builds.
pub fn load_checkpoint(path: &Path) -> Result<(UNet, NetKind, AdamConfig)> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(format!("bad manifest: {e}")))?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(NetError::Checkpoint(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let buf = fs::read(path.parent().unwrap_or(Path::new(".")).join(&m.payload))?;
    let mut net = UNet::new(m.config.clone(), 0)?;
    if m.tensors.len() != net.params.len() || m.batchnorm.len() != net.stats.len() {
        return Err(NetError::Checkpoint("tensor count does not match config".into()));
    }
    for (p, e) in net.params.iter_mut().zip(&m.tensors) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(NetError::Checkpoint(format!("tensor {} {:?} does not match config ({} {:?})", e.name, e.shape, p.name, p.value.shape())));
        }
        let n = p.value.len();
        p.value = Tensor::new(e.shape.clone(), read_f32s(&buf, e.offset, n)?);
        p.adam_m = read_f32s(&buf, e.offset + 4 * n, n)?;
        p.adam_v = read_f32s(&buf, e.offset + 8 * n, n)?;
        p.step_count = e.step_count;
    }
    for ((s, name), e) in net.stats.iter_mut().zip(&net.stat_names).zip(&m.batchnorm) {
        if *name != e.name || s.mean.len() != e.channels {
            return Err(NetError::Checkpoint(format!("batchnorm {} does not match config", e.name)));
        }
        s.mean = read_f32s(&buf, e.offset, e.channels)?;
        s.var = read_f32s(&buf, e.offset + 4 * e.channels, e.channels)?;
    }
    Ok((net, m.kind, m.adam))
}
