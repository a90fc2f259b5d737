//! Block-wise convolutional feature extractor with auxiliary branches
//! and per-branch cosine classifiers.
//!
//! The trunk is a stack of Conv-BatchNorm-LeakyReLU blocks, each followed by
//! 2x2 max pooling. Auxiliary branches split at configured block indices and
//! own independently initialized copies of the remaining blocks plus their
//! own classifier, so each branch can learn a different posterior.

use crate::derive_seed;
use crate::tensor::{kernels, Graph, ParamId, ParamSet, Tensor, TensorError, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
/// Guard for normalizing (near-)zero feature vectors instead of erroring.
pub const NORM_EPS: f64 = 1e-12;
const KERNEL: usize = 3;
const PAD: usize = 1;

pub type BackboneResult<T> = Result<T, BackboneError>;

#[derive(Debug)]
pub enum BackboneError {
    InvalidConfig(String),
    Tensor(TensorError),
    Checkpoint { offset: u64, message: String },
    Io(std::io::Error),
}

impl fmt::Display for BackboneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            BackboneError::Tensor(e) => write!(f, "{e}"),
            BackboneError::Checkpoint { offset, message } => {
                write!(f, "checkpoint error at byte {offset}: {message}")
            }
            BackboneError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for BackboneError {}

impl From<TensorError> for BackboneError {
    fn from(e: TensorError) -> Self {
        BackboneError::Tensor(e)
    }
}

impl From<std::io::Error> for BackboneError {
    fn from(e: std::io::Error) -> Self {
        BackboneError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub convs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input (C, H, W).
    pub input: (usize, usize, usize),
    pub blocks: Vec<BlockSpec>,
    /// 1-based block indices where auxiliary branches split; strictly inside (0, B).
    pub branch_points: Vec<usize>,
    pub leaky_slope: f64,
    /// Identity shortcut across each block's conv stack when the channel
    /// counts match (fidelity runs; inactive for the desk default).
    pub residual: bool,
    /// Cosine classifier scale.
    pub tau: f64,
}

impl BackboneConfig {
    /// 4 blocks of one conv each, 16->32->64->128 channels, branches at
    /// blocks 2 and 3, for 3x32x32 inputs.
    pub fn desk_default() -> Self {
        BackboneConfig {
            input: (3, 32, 32),
            blocks: vec![
                BlockSpec { channels: 16, convs: 1 },
                BlockSpec { channels: 32, convs: 1 },
                BlockSpec { channels: 64, convs: 1 },
                BlockSpec { channels: 128, convs: 1 },
            ],
            branch_points: vec![2, 3],
            leaky_slope: 0.1,
            residual: false,
            tau: 20.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map(|b| b.channels).unwrap_or(0)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> BackboneResult<()> {
        let b = self.blocks.len();
        if b == 0 {
            return Err(BackboneError::InvalidConfig("need at least one block".into()));
        }
        if self.blocks.iter().any(|s| s.channels == 0 || s.convs == 0) {
            return Err(BackboneError::InvalidConfig("block channels and convs must be >= 1".into()));
        }
        let (c, h, w) = self.input;
        if c == 0 {
            return Err(BackboneError::InvalidConfig("input needs at least one channel".into()));
        }
        let div = 1usize << b;
        if h % div != 0 || w % div != 0 {
            return Err(BackboneError::InvalidConfig(format!(
                "input {h}x{w} must be divisible by 2^{b} (each block halves the spatial dims)"
            )));
        }
        let mut prev = 0;
        for &bp in &self.branch_points {
            if bp == 0 || bp >= b {
                return Err(BackboneError::InvalidConfig(format!(
                    "branch point {bp} must lie strictly inside (0, {b})"
                )));
            }
            if bp <= prev {
                return Err(BackboneError::InvalidConfig(
                    "branch points must be strictly increasing".into(),
                ));
            }
            prev = bp;
        }
        if !(self.leaky_slope.is_finite() && self.tau.is_finite() && self.tau > 0.0) {
            return Err(BackboneError::InvalidConfig("leaky_slope and tau must be finite, tau > 0".into()));
        }
        Ok(())
    }

    /// Branch points for a requested classifier count on a 4-block backbone:
    /// 1 -> none, 2 -> {2}, 3 -> {2,3}, 4 -> {1,2,3}.
    pub fn branch_points_for_ncls(ncls: usize) -> BackboneResult<Vec<usize>> {
        match ncls {
            1 => Ok(vec![]),
            2 => Ok(vec![2]),
            3 => Ok(vec![2, 3]),
            4 => Ok(vec![1, 2, 3]),
            other => Err(BackboneError::InvalidConfig(format!(
                "ncls must be 1..=4 for the 4-block backbone, got {other}"
            ))),
        }
    }
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    fn new(channels: usize) -> Self {
        BnState { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// One Conv-BatchNorm-LeakyReLU unit.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub kernel: ParamId,
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub bn_stats: usize,
}

/// A block: conv units followed by 2x2 max pooling (and an optional identity
/// shortcut across the conv stack).
#[derive(Clone, Debug)]
pub struct Block {
    pub units: Vec<ConvUnit>,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct BranchTail {
    pub branch_point: usize,
    pub blocks: Vec<Block>,
}

/// L2-normalized-row weight matrix [K, D] for cosine classification.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    pub matrix: Tensor,
}

/// Train or eval mode for forward passes (gates batch-norm behavior).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shared trunk + per-branch tails + per-branch cosine classifiers.
/// Branch 0 is the main branch (the full trunk); branch j >= 1 shares trunk
/// blocks 1..branch_point and owns fresh copies of the rest.
#[derive(Clone, Debug)]
pub struct BranchedNetwork {
    pub cfg: BackboneConfig,
    pub num_classes: usize,
    pub params: ParamSet,
    pub trunk: Vec<Block>,
    pub tails: Vec<BranchTail>,
    pub classifiers: Vec<ParamId>,
    pub bn_stats: Vec<BnState>,
}

impl BranchedNetwork {
    pub fn n_classifiers(&self) -> usize {
        1 + self.tails.len()
    }

    pub fn tau(&self) -> f64 {
        self.cfg.tau
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Graph forward in train mode (updates running statistics): trunk up to
    /// the branch point, that branch's tail, then global average pooling.
    pub fn forward_features_train(
        &mut self,
        g: &mut Graph,
        images: &Tensor,
        branch: usize,
    ) -> TensorResult<Var> {
        let feats = self.forward_all_train(g, images)?;
        Ok(feats[branch])
    }

    /// Train-mode features for every branch (shared trunk computed once).
    pub fn forward_all_train(&mut self, g: &mut Graph, images: &Tensor) -> TensorResult<Vec<Var>> {
        self.check_input(images)?;
        let slope = self.cfg.leaky_slope;
        let residual = self.cfg.residual;
        let mut x = g.input(images.clone());
        let mut trunk_outputs = Vec::with_capacity(self.trunk.len());
        for block in &self.trunk {
            x = block_forward_graph(
                g,
                &self.params,
                &mut self.bn_stats,
                block,
                x,
                Mode::Train,
                slope,
                residual,
            )?;
            trunk_outputs.push(x);
        }
        let mut features = Vec::with_capacity(1 + self.tails.len());
        features.push(g.global_avg_pool(x)?);
        for tail in &self.tails {
            let mut t = trunk_outputs[tail.branch_point - 1];
            for block in &tail.blocks {
                t = block_forward_graph(
                    g,
                    &self.params,
                    &mut self.bn_stats,
                    block,
                    t,
                    Mode::Train,
                    slope,
                    residual,
                )?;
            }
            features.push(g.global_avg_pool(t)?);
        }
        Ok(features)
    }

    /// Pure eval-mode forward (running statistics, no graph): [N, D] features.
    pub fn forward_eval(&self, images: &Tensor, branch: usize) -> TensorResult<Tensor> {
        self.check_input(images)?;
        if branch >= self.n_classifiers() {
            return Err(TensorError::InvalidArgument {
                op: "forward_eval",
                message: format!("branch {branch} out of range ({} classifiers)", self.n_classifiers()),
            });
        }
        let slope = self.cfg.leaky_slope;
        let residual = self.cfg.residual;
        let upto = if branch == 0 {
            self.trunk.len()
        } else {
            self.tails[branch - 1].branch_point
        };
        let mut x = images.clone();
        for block in &self.trunk[..upto] {
            x = block_forward_eval(&self.params, &self.bn_stats, block, &x, slope, residual)?;
        }
        if branch > 0 {
            for block in &self.tails[branch - 1].blocks {
                x = block_forward_eval(&self.params, &self.bn_stats, block, &x, slope, residual)?;
            }
        }
        kernels::global_avg_pool_fwd(&x)
    }

    /// Eval-mode activations after the first `upto` trunk blocks ([N,C,h,w]).
    pub fn forward_trunk_prefix_eval(&self, images: &Tensor, upto: usize) -> TensorResult<Tensor> {
        self.check_input(images)?;
        let mut x = images.clone();
        for block in &self.trunk[..upto] {
            x = block_forward_eval(
                &self.params,
                &self.bn_stats,
                block,
                &x,
                self.cfg.leaky_slope,
                self.cfg.residual,
            )?;
        }
        Ok(x)
    }

    fn check_input(&self, images: &Tensor) -> TensorResult<()> {
        let [_, c, h, w] = images.dims4("forward")?;
        let (ec, eh, ew) = self.cfg.input;
        if (c, h, w) != (ec, eh, ew) {
            return Err(TensorError::InvalidArgument {
                op: "forward",
                message: format!("input {c}x{h}x{w} does not match config {ec}x{eh}x{ew}"),
            });
        }
        Ok(())
    }

    /// Copies trunk parameters and statistics into every tail (and the main
    /// classifier into every branch classifier), making all branches compute
    /// identical functions. Diagnostic helper for distillation tests.
    pub fn clone_tails_from_trunk(&mut self) {
        for ti in 0..self.tails.len() {
            let bp = self.tails[ti].branch_point;
            for (bi, block) in self.tails[ti].blocks.clone().iter().enumerate() {
                let src = &self.trunk[bp + bi];
                for (ui, unit) in block.units.iter().enumerate() {
                    let su = &src.units[ui];
                    for (dst, srcp) in [
                        (unit.kernel, su.kernel),
                        (unit.bn_scale, su.bn_scale),
                        (unit.bn_shift, su.bn_shift),
                    ] {
                        let v = self.params.value(srcp).clone();
                        self.params.get_mut(dst).value = v;
                    }
                    self.bn_stats[unit.bn_stats] = self.bn_stats[su.bn_stats].clone();
                }
            }
        }
        let main = self.params.value(self.classifiers[0]).clone();
        for &c in &self.classifiers[1..] {
            self.params.get_mut(c).value = main.clone();
        }
    }
}

/// Initializes trunk, branch tails, and classifiers with independent
/// fan-in-scaled uniform draws.
pub fn build_network(cfg: &BackboneConfig, num_classes: usize, seed: u64) -> BackboneResult<BranchedNetwork> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(BackboneError::InvalidConfig("need at least one class".into()));
    }
    let mut params = ParamSet::new();
    let mut bn_stats = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1217]));

    let make_block = |params: &mut ParamSet,
                          bn_stats: &mut Vec<BnState>,
                          rng: &mut ChaCha8Rng,
                          prefix: &str,
                          in_ch: usize,
                          spec: &BlockSpec| {
        let mut units = Vec::with_capacity(spec.convs);
        let mut cin = in_ch;
        for u in 0..spec.convs {
            let fan_in = cin * KERNEL * KERNEL;
            let bound = (3.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..spec.channels * cin * KERNEL * KERNEL)
                .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
                .collect();
            let kernel = params.add(
                format!("{prefix}.u{u}.kernel"),
                Tensor::new(&[spec.channels, cin, KERNEL, KERNEL], data).expect("sized"),
                false,
            );
            let bn_scale = params.add(format!("{prefix}.u{u}.bn_scale"), Tensor::filled(&[spec.channels], 1.0), true);
            let bn_shift = params.add(format!("{prefix}.u{u}.bn_shift"), Tensor::zeros(&[spec.channels]), true);
            bn_stats.push(BnState::new(spec.channels));
            units.push(ConvUnit { kernel, bn_scale, bn_shift, bn_stats: bn_stats.len() - 1 });
            cin = spec.channels;
        }
        Block { units, in_channels: in_ch, out_channels: spec.channels }
    };

    let mut trunk = Vec::with_capacity(cfg.blocks.len());
    let mut in_ch = cfg.input.0;
    for (bi, spec) in cfg.blocks.iter().enumerate() {
        trunk.push(make_block(&mut params, &mut bn_stats, &mut rng, &format!("trunk.b{bi}"), in_ch, spec));
        in_ch = spec.channels;
    }

    let mut tails = Vec::with_capacity(cfg.branch_points.len());
    for &bp in &cfg.branch_points {
        let mut blocks = Vec::new();
        let mut tin = cfg.blocks[bp - 1].channels;
        for (bi, spec) in cfg.blocks.iter().enumerate().skip(bp) {
            blocks.push(make_block(
                &mut params,
                &mut bn_stats,
                &mut rng,
                &format!("branch{bp}.b{bi}"),
                tin,
                spec,
            ));
            tin = spec.channels;
        }
        tails.push(BranchTail { branch_point: bp, blocks });
    }

    let d = cfg.feature_dim();
    let n_cls = 1 + tails.len();
    let mut classifiers = Vec::with_capacity(n_cls);
    for b in 0..n_cls {
        let bound = (3.0 / d as f64).sqrt();
        let data: Vec<f64> = (0..num_classes * d)
            .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
            .collect();
        classifiers.push(params.add(
            format!("classifier.{b}"),
            Tensor::new(&[num_classes, d], data).expect("sized"),
            true,
        ));
    }

    Ok(BranchedNetwork { cfg: cfg.clone(), num_classes, params, trunk, tails, classifiers, bn_stats })
}

/// Graph forward through one block (shared by trainer and LRL).
#[allow(clippy::too_many_arguments)]
pub fn block_forward_graph(
    g: &mut Graph,
    params: &ParamSet,
    bn_stats: &mut [BnState],
    block: &Block,
    input: Var,
    mode: Mode,
    slope: f64,
    residual: bool,
) -> TensorResult<Var> {
    let mut x = input;
    for unit in &block.units {
        let kernel = g.param(params, unit.kernel);
        let scale = g.param(params, unit.bn_scale);
        let shift = g.param(params, unit.bn_shift);
        let conv = g.conv2d(x, kernel, 1, PAD)?;
        let stats = &mut bn_stats[unit.bn_stats];
        let normed = g.batch_norm(
            conv,
            scale,
            shift,
            &mut stats.mean,
            &mut stats.var,
            mode == Mode::Train,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        x = g.leaky_relu(normed, slope);
    }
    if residual && block.in_channels == block.out_channels {
        x = g.add(x, input)?;
    }
    g.max_pool2d(x)
}

/// Eval-mode kernel forward through one block (no graph, running stats).
pub fn block_forward_eval(
    params: &ParamSet,
    bn_stats: &[BnState],
    block: &Block,
    input: &Tensor,
    slope: f64,
    residual: bool,
) -> TensorResult<Tensor> {
    let mut x = input.clone();
    for unit in &block.units {
        let conv = kernels::conv2d_fwd(&x, params.value(unit.kernel), 1, PAD)?;
        let stats = &bn_stats[unit.bn_stats];
        let (mut normed, _, _) = kernels::bn_apply(
            &conv,
            &stats.mean,
            &stats.var,
            params.value(unit.bn_scale).data(),
            params.value(unit.bn_shift).data(),
            BN_EPS,
        );
        for v in normed.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        x = normed;
    }
    if residual && block.in_channels == block.out_channels {
        for (a, b) in x.data_mut().iter_mut().zip(input.data()) {
            *a += b;
        }
    }
    let (pooled, _) = kernels::max_pool2x2_fwd(&x)?;
    Ok(pooled)
}

/// Pre-softmax cosine scores: logit[i,k] = tau * <f_i/||f_i||, w_k/||w_k||>.
pub fn cosine_logits(g: &mut Graph, features: Var, weights: Var, tau: f64) -> TensorResult<Var> {
    let f = g.l2_normalize(features, NORM_EPS);
    let w = g.l2_normalize(weights, NORM_EPS);
    let wt = g.transpose(w)?;
    let raw = g.matmul(f, wt)?;
    Ok(g.scale(raw, tau))
}

/// Eval-path cosine scores on plain tensors.
pub fn cosine_logits_eval(features: &Tensor, weights: &ClassifierWeights, tau: f64) -> TensorResult<Tensor> {
    kernels::cosine_logits_plain(features, &weights.matrix, tau, NORM_EPS)
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "FFWT", version u16, config echo, then a
// manifest of (name, shape, dtype, offset) entries followed by raw
// little-endian f64 data. Running statistics are stored alongside parameters.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"FFWT";
const CKPT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    cfg: BackboneConfig,
    num_classes: usize,
}

pub fn save_checkpoint(net: &BranchedNetwork, path: &Path) -> BackboneResult<()> {
    let bytes = checkpoint_bytes(net)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn checkpoint_bytes(net: &BranchedNetwork) -> BackboneResult<Vec<u8>> {
    let echo = serde_json::to_vec(&ConfigEcho { cfg: net.cfg.clone(), num_classes: net.num_classes })
        .expect("config serializes");
    let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (_, p) in net.params.iter() {
        entries.push((p.name.clone(), p.value.shape().to_vec(), p.value.data()));
    }
    for (i, s) in net.bn_stats.iter().enumerate() {
        entries.push((format!("stats.{i}.mean"), vec![s.mean.len()], &s.mean));
        entries.push((format!("stats.{i}.var"), vec![s.var.len()], &s.var));
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(&echo);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F64);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * 8) as u64;
    }
    buf.extend_from_slice(&offset.to_le_bytes());
    for (_, _, data) in &entries {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn load_checkpoint(path: &Path) -> BackboneResult<BranchedNetwork> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> BackboneResult<BranchedNetwork> {
    let err = |offset: usize, message: String| BackboneError::Checkpoint { offset: offset as u64, message };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> BackboneResult<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(BackboneError::Checkpoint {
                offset: *pos as u64,
                message: "truncated checkpoint".into(),
            });
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let echo_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let echo: ConfigEcho = serde_json::from_slice(take(&mut pos, echo_len)?)
        .map_err(|e| err(pos, format!("bad config echo: {e}")))?;
    let entry_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut manifest: Vec<(String, Vec<usize>, u64)> = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| err(pos, "entry name is not utf-8".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(err(pos, format!("unsupported dtype {dtype}")));
        }
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        manifest.push((name, shape, offset));
    }
    let data_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let data_start = pos;
    if data_start + data_len != bytes.len() {
        return Err(err(pos, format!("data section is {} bytes, expected {data_len}", bytes.len() - data_start)));
    }

    let mut net = build_network(&echo.cfg, echo.num_classes, 0)?;
    let mut lookup: std::collections::BTreeMap<&str, (&[usize], u64)> = std::collections::BTreeMap::new();
    for (name, shape, offset) in &manifest {
        lookup.insert(name.as_str(), (shape, *offset));
    }
    let read_entry = |name: &str, expected: usize| -> BackboneResult<Vec<f64>> {
        let (shape, offset) = lookup
            .get(name)
            .ok_or_else(|| err(data_start, format!("missing entry '{name}'")))?;
        let numel: usize = shape.iter().product();
        if numel != expected {
            return Err(err(data_start, format!("entry '{name}' has {numel} values, expected {expected}")));
        }
        let start = data_start + *offset as usize;
        if start + numel * 8 > bytes.len() {
            return Err(err(start, format!("entry '{name}' data out of bounds")));
        }
        Ok(bytes[start..start + numel * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let ids: Vec<ParamId> = net.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, len) = {
            let p = net.params.get(id);
            (p.name.clone(), p.value.len())
        };
        let data = read_entry(&name, len)?;
        net.params.get_mut(id).value.data_mut().copy_from_slice(&data);
    }
    for i in 0..net.bn_stats.len() {
        let c = net.bn_stats[i].mean.len();
        net.bn_stats[i].mean = read_entry(&format!("stats.{i}.mean"), c)?;
        net.bn_stats[i].var = read_entry(&format!("stats.{i}.var"), c)?;
    }
    if manifest.len() != net.params.len() + 2 * net.bn_stats.len() {
        return Err(err(data_start, format!("checkpoint has {} entries, network expects {}", manifest.len(), net.params.len() + 2 * net.bn_stats.len())));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            input: (3, 16, 16),
            blocks: vec![
                BlockSpec { channels: 4, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 16, convs: 1 },
            ],
            branch_points: vec![2, 3],
            leaky_slope: 0.1,
            residual: false,
            tau: 20.0,
        }
    }

    #[test]
    fn classifier_count_follows_branch_points() {
        let mut cfg = tiny_cfg();
        cfg.branch_points = vec![];
        assert_eq!(build_network(&cfg, 5, 1).unwrap().n_classifiers(), 1);
        let net = build_network(&tiny_cfg(), 5, 1).unwrap();
        assert_eq!(net.n_classifiers(), 3);
    }

    #[test]
    fn invalid_spatial_dims_rejected() {
        let mut cfg = tiny_cfg();
        cfg.input = (3, 20, 20); // not divisible by 2^4
        assert!(matches!(build_network(&cfg, 5, 1), Err(BackboneError::InvalidConfig(_))));
    }

    #[test]
    fn different_seeds_give_different_tails() {
        let a = build_network(&tiny_cfg(), 5, 1).unwrap();
        let b = build_network(&tiny_cfg(), 5, 2).unwrap();
        let tail_param = a.tails[0].blocks[0].units[0].kernel;
        assert_ne!(a.params.value(tail_param).data(), b.params.value(tail_param).data());
    }

    #[test]
    fn zero_input_eval_forward_is_finite() {
        let net = build_network(&tiny_cfg(), 5, 3).unwrap();
        let images = Tensor::zeros(&[2, 3, 16, 16]);
        for branch in 0..net.n_classifiers() {
            let f = net.forward_eval(&images, branch).unwrap();
            assert!(f.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn duplicated_image_duplicates_feature_row() {
        let net = build_network(&tiny_cfg(), 5, 4).unwrap();
        let mut data = vec![0.0; 2 * 3 * 16 * 16];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i % 17) as f64) / 17.0;
        }
        // Duplicate the image across the batch.
        let half = data.len() / 2;
        let (a, b) = data.split_at_mut(half);
        b.copy_from_slice(a);
        let images = Tensor::new(&[2, 3, 16, 16], data).unwrap();
        let f = net.forward_eval(&images, 0).unwrap();
        let d = net.feature_dim();
        assert_eq!(&f.data()[..d], &f.data()[d..]);
    }

    #[test]
    fn mutating_tail_only_affects_its_branch() {
        let mut net = build_network(&tiny_cfg(), 5, 5).unwrap();
        let images = Tensor::filled(&[1, 3, 16, 16], 0.4);
        let before: Vec<Tensor> = (0..3).map(|b| net.forward_eval(&images, b).unwrap()).collect();
        // Perturb branch 1's first tail kernel.
        let pid = net.tails[0].blocks[0].units[0].kernel;
        net.params.get_mut(pid).value.data_mut()[0] += 0.5;
        let after: Vec<Tensor> = (0..3).map(|b| net.forward_eval(&images, b).unwrap()).collect();
        assert_eq!(before[0], after[0]);
        assert_ne!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
        // Perturb a trunk block before every branch point: all branches move.
        let pid = net.trunk[0].units[0].kernel;
        net.params.get_mut(pid).value.data_mut()[0] += 0.5;
        let final_: Vec<Tensor> = (0..3).map(|b| net.forward_eval(&images, b).unwrap()).collect();
        for b in 0..3 {
            assert_ne!(after[b], final_[b]);
        }
    }

    #[test]
    fn cosine_logits_hits_tau_for_aligned_vectors() {
        let mut g = Graph::new();
        let f = g.input(Tensor::new(&[1, 3], vec![0.3, -0.4, 1.2]).unwrap());
        let w = g.input(Tensor::new(&[2, 3], vec![0.6, -0.8, 2.4, 1.2, 0.3, -0.3]).unwrap());
        let logits = cosine_logits(&mut g, f, w, 20.0).unwrap();
        // Row 0 of w is 2x the feature: cosine 1, logit tau.
        assert!((g.value(logits).data()[0] - 20.0).abs() < 1e-9);
        for &v in g.value(logits).data() {
            assert!(v.abs() <= 20.0 + 1e-6);
        }
    }

    #[test]
    fn cosine_logits_orthogonal_is_zero_and_scale_invariant() {
        let feats = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = ClassifierWeights { matrix: Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap() };
        let logits = cosine_logits_eval(&feats, &w, 20.0).unwrap();
        assert!(logits.data()[0].abs() < 1e-12);

        let f3 = Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap();
        let w2 = ClassifierWeights { matrix: Tensor::new(&[2, 2], vec![0.5, 0.5, -0.2, 0.9]).unwrap() };
        let a = cosine_logits_eval(&feats, &w2, 20.0).unwrap();
        let b = cosine_logits_eval(&f3, &w2, 20.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = build_network(&tiny_cfg(), 5, 6).unwrap();
        let images = Tensor::filled(&[2, 3, 16, 16], 0.25);
        let a = net.forward_eval(&images, 1).unwrap();
        let b = net.forward_eval(&images, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_and_stable() {
        let net = build_network(&tiny_cfg(), 5, 7).unwrap();
        let bytes = checkpoint_bytes(&net).unwrap();
        let restored = checkpoint_from_bytes(&bytes).unwrap();
        for (id, p) in net.params.iter() {
            assert_eq!(&p.value, restored.params.value(id), "param {}", p.name);
        }
        assert_eq!(net.bn_stats, restored.bn_stats);
        let bytes2 = checkpoint_bytes(&restored).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(
            checkpoint_from_bytes(b"NOTACKPT"),
            Err(BackboneError::Checkpoint { .. })
        ));
    }
}
