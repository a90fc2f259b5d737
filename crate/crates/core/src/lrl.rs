//! Local representation learner: per-episode fine-tuning of a cloned last
//! block. Support images are re-augmented twice per epoch — one copy builds
//! novel weights, the other serves as fake queries carrying the loss — and
//! only the cloned block learns; the pre-trained extractor stays frozen. An
//! unsquared L2 penalty keeps the cloned block's features near the frozen
//! ones.

use crate::augment::{self, AugmentError, ImageBatch, LightAugment};
use crate::backbone::{
    block_forward_eval, block_forward_graph, cosine_logits, BnState, BranchedNetwork, Mode,
};
use crate::data::Dataset;
use crate::derive_seed;
use crate::episodes::{
    classify_features, episode_accuracy, task_seed, weights_from_features, Episode, EpisodeResult,
    EpisodeSpec, SplitView,
};
use crate::tensor::{kernels, Graph, ParamSet, Tensor, TensorError, TensorResult, Var};
use crate::trainer::{clip_grad_norm, sgd_nesterov_step, DropoutMode, OptimizerState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

pub type LrlResult<T> = Result<T, LrlError>;

#[derive(Debug)]
pub enum LrlError {
    InvalidConfig(String),
    Tensor(TensorError),
    Augment(AugmentError),
    Episode(crate::episodes::EpisodeError),
}

impl fmt::Display for LrlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrlError::InvalidConfig(m) => write!(f, "invalid lrl config: {m}"),
            LrlError::Tensor(e) => write!(f, "{e}"),
            LrlError::Augment(e) => write!(f, "{e}"),
            LrlError::Episode(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LrlError {}

impl From<TensorError> for LrlError {
    fn from(e: TensorError) -> Self {
        LrlError::Tensor(e)
    }
}

impl From<AugmentError> for LrlError {
    fn from(e: AugmentError) -> Self {
        LrlError::Augment(e)
    }
}

impl From<crate::episodes::EpisodeError> for LrlError {
    fn from(e: crate::episodes::EpisodeError) -> Self {
        LrlError::Episode(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrlConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate divides by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Weight of the feature-drift penalty.
    pub gamma: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; keeps the fine-tune stable even when the
    /// penalty weight is pushed to extremes.
    pub max_grad_norm: Option<f64>,
    pub light: LightAugment,
    pub dropout: DropoutMode,
    pub patch_frac: f64,
    /// Fake-query sets generated per epoch (1 = one fake query per support).
    pub fake_multiplicity: usize,
    pub seed: u64,
}

impl LrlConfig {
    /// 200 epochs, decay x10 at 80/120/160, gamma 0.1, and the shot-dependent
    /// initial learning rate (1e-2 for 1-shot, 1e-1 for 5-shot).
    pub fn table_defaults(k_shot: usize, seed: u64) -> Self {
        LrlConfig {
            epochs: 200,
            lr: default_lr_for_shot(k_shot),
            lr_decay_epochs: vec![80, 120, 160],
            lr_decay_factor: 10.0,
            gamma: 0.1,
            momentum: 0.9,
            max_grad_norm: Some(10.0),
            light: LightAugment::default(),
            dropout: DropoutMode::SelfMix,
            patch_frac: 0.5,
            fake_multiplicity: 1,
            seed,
        }
    }

    pub fn validate(&self) -> LrlResult<()> {
        if self.epochs == 0 {
            return Err(LrlError::InvalidConfig("epochs must be >= 1".into()));
        }
        if let Some(&max_decay) = self.lr_decay_epochs.iter().max() {
            if self.epochs <= max_decay {
                return Err(LrlError::InvalidConfig(format!(
                    "epochs ({}) must exceed the last decay epoch ({max_decay})",
                    self.epochs
                )));
            }
        }
        if self.lr < 0.0 || self.gamma < 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(LrlError::InvalidConfig("lr and gamma must be >= 0, decay factor > 0".into()));
        }
        if self.fake_multiplicity == 0 {
            return Err(LrlError::InvalidConfig("fake_multiplicity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_decay_factor.powi(drops as i32)
    }
}

pub fn default_lr_for_shot(k_shot: usize) -> f64 {
    if k_shot >= 5 {
        1e-1
    } else {
        1e-2
    }
}

/// Trainable clone of the network's last block (plus its frozen running
/// statistics) and the optimizer state for it.
pub struct LrlState {
    pub params: ParamSet,
    pub block: crate::backbone::Block,
    pub stats: Vec<BnState>,
    opt: OptimizerState,
}

impl LrlState {
    /// Clones the last trunk block; only these parameters receive updates.
    pub fn clone_last_block(net: &BranchedNetwork) -> Self {
        let src = net.trunk.last().expect("network has blocks");
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let mut units = Vec::with_capacity(src.units.len());
        for (u, unit) in src.units.iter().enumerate() {
            let kernel = params.add(
                format!("clone.u{u}.kernel"),
                net.params.value(unit.kernel).clone(),
                false,
            );
            let bn_scale = params.add(
                format!("clone.u{u}.bn_scale"),
                net.params.value(unit.bn_scale).clone(),
                true,
            );
            let bn_shift = params.add(
                format!("clone.u{u}.bn_shift"),
                net.params.value(unit.bn_shift).clone(),
                true,
            );
            stats.push(net.bn_stats[unit.bn_stats].clone());
            units.push(crate::backbone::ConvUnit {
                kernel,
                bn_scale,
                bn_shift,
                bn_stats: stats.len() - 1,
            });
        }
        let block = crate::backbone::Block {
            units,
            in_channels: src.in_channels,
            out_channels: src.out_channels,
        };
        let opt = OptimizerState::new(&params);
        LrlState { params, block, stats, opt }
    }
}

/// Applies the transform set (light augmentation, then regional dropout)
/// twice, independently, to the support images: the first copy builds novel
/// weights, the second provides fake queries. Real queries are never touched.
pub fn make_fake_batch(
    support: &ImageBatch,
    cfg: &LrlConfig,
    seed: u64,
) -> LrlResult<(ImageBatch, Vec<ImageBatch>)> {
    let weight_batch = transform_once(support, cfg, derive_seed(seed, &[1]))?;
    let mut fakes = Vec::with_capacity(cfg.fake_multiplicity);
    for m in 0..cfg.fake_multiplicity {
        fakes.push(transform_once(support, cfg, derive_seed(seed, &[2, m as u64]))?);
    }
    Ok((weight_batch, fakes))
}

fn transform_once(batch: &ImageBatch, cfg: &LrlConfig, seed: u64) -> LrlResult<ImageBatch> {
    let lit = augment::light_augment(batch, derive_seed(seed, &[1]), &cfg.light)?;
    let out = match cfg.dropout {
        DropoutMode::None => lit,
        DropoutMode::SelfMix => augment::self_mix(&lit, derive_seed(seed, &[2]), cfg.patch_frac)?,
        DropoutMode::Cutout => augment::cutout(&lit, derive_seed(seed, &[2]), cfg.patch_frac)?,
        DropoutMode::Cutmix => augment::cutmix(&lit, derive_seed(seed, &[2]), cfg.patch_frac)?,
    };
    Ok(out)
}

/// Frozen-path and bias-path features for a set of images, eval mode:
/// f_global from the pre-trained network, f_bias through the cloned block.
pub fn lrl_features_eval(
    net: &BranchedNetwork,
    state: &LrlState,
    images: &Tensor,
) -> TensorResult<(Tensor, Tensor)> {
    let prefix = net.forward_trunk_prefix_eval(images, net.trunk.len() - 1)?;
    let f_global = kernels::global_avg_pool_fwd(&block_forward_eval(
        &net.params,
        &net.bn_stats,
        net.trunk.last().expect("blocks"),
        &prefix,
        net.cfg.leaky_slope,
        net.cfg.residual,
    )?)?;
    let f_bias = kernels::global_avg_pool_fwd(&block_forward_eval(
        &state.params,
        &state.stats,
        &state.block,
        &prefix,
        net.cfg.leaky_slope,
        net.cfg.residual,
    )?)?;
    Ok((f_global, f_bias))
}

/// Eq.-style novel weights at inference: row j is the mean over k of
/// (f_global + f_bias) for class j's support images.
pub fn lrl_weights_eval(
    net: &BranchedNetwork,
    state: &LrlState,
    images: &Tensor,
    n_way: usize,
    k_shot: usize,
) -> TensorResult<crate::backbone::ClassifierWeights> {
    let (fg, fb) = lrl_features_eval(net, state, images)?;
    let summed = Tensor::new(
        fg.shape(),
        fg.data().iter().zip(fb.data()).map(|(a, b)| a + b).collect(),
    )?;
    Ok(weights_from_features(&summed, n_way, k_shot))
}

pub struct LrlLossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
}

/// One fine-tuning step's graph: fake-query cross entropy on cosine scores
/// against weights built from the same epoch's weight images, plus
/// gamma * sum of ||f_global - f_bias|| over the weight images.
#[allow(clippy::too_many_arguments)]
fn build_epoch_loss(
    net: &BranchedNetwork,
    state: &mut LrlState,
    g: &mut Graph,
    weight_batch: &ImageBatch,
    fakes: &[ImageBatch],
    n_way: usize,
    k_shot: usize,
    gamma: f64,
) -> LrlResult<(Var, f64, f64)> {
    let slope = net.cfg.leaky_slope;
    let residual = net.cfg.residual;
    let last = net.trunk.len() - 1;
    let m = n_way * k_shot;

    // Shared frozen prefix over weight images and all fake-query sets.
    let mut all_pixels = weight_batch.pixels.data().to_vec();
    for f in fakes {
        all_pixels.extend_from_slice(f.pixels.data());
    }
    let total_images = m * (1 + fakes.len());
    let shape = weight_batch.pixels.shape();
    let stacked = Tensor::new(&[total_images, shape[1], shape[2], shape[3]], all_pixels)?;
    let prefix = net.forward_trunk_prefix_eval(&stacked, last)?;

    // Frozen global features (constants in the graph).
    let f_global_all = kernels::global_avg_pool_fwd(&block_forward_eval(
        &net.params,
        &net.bn_stats,
        &net.trunk[last],
        &prefix,
        slope,
        residual,
    )?)?;

    // Bias path: cloned block in eval mode, gradients flow to the clone only.
    let prefix_var = g.input(prefix);
    let bias_maps = block_forward_graph(
        g,
        &state.params,
        &mut state.stats,
        &state.block,
        prefix_var,
        Mode::Eval,
        slope,
        residual,
    )?;
    let f_bias_all = g.global_avg_pool(bias_maps)?;

    let d = f_global_all.shape()[1];
    let split_rows = |t: &Tensor, from: usize, to: usize| -> Tensor {
        Tensor::new(&[to - from, d], t.data()[from * d..to * d].to_vec()).expect("sized")
    };
    let f_global_w = g.input(split_rows(&f_global_all, 0, m));
    let f_global_q = g.input(split_rows(&f_global_all, m, total_images));

    let f_bias_w = g.reshape(f_bias_all, &[total_images, d])?;
    // Row ranges of the bias features: weight images first, then fakes.
    let (f_bias_w, f_bias_q) = {
        let all = f_bias_w;
        // Slice via concat-inverse: use matmul with selector matrices would
        // be wasteful; reshape keeps one node, so split with two selector
        // products instead.
        let mut sel_w = Tensor::zeros(&[m, total_images]);
        for i in 0..m {
            sel_w.data_mut()[i * total_images + i] = 1.0;
        }
        let mut sel_q = Tensor::zeros(&[total_images - m, total_images]);
        for i in 0..total_images - m {
            sel_q.data_mut()[i * total_images + m + i] = 1.0;
        }
        let sw = g.input(sel_w);
        let sq = g.input(sel_q);
        (g.matmul(sw, all)?, g.matmul(sq, all)?)
    };

    // Novel weights: per-class mean of f_global + f_bias over weight images.
    let local_w = g.add(f_global_w, f_bias_w)?;
    let mut group = Tensor::zeros(&[n_way, m]);
    for j in 0..n_way {
        for i in 0..k_shot {
            group.data_mut()[j * m + j * k_shot + i] = 1.0 / k_shot as f64;
        }
    }
    let group_var = g.input(group);
    let weights = g.matmul(group_var, local_w)?;

    // Fake-query cross entropy.
    let local_q = g.add(f_global_q, f_bias_q)?;
    let logits = cosine_logits(g, local_q, weights, net.tau())?;
    let n_fake = total_images - m;
    let mut labels = Tensor::zeros(&[n_fake, n_way]);
    for i in 0..n_fake {
        let slot = (i % m) / k_shot;
        labels.data_mut()[i * n_way + slot] = 1.0;
    }
    let ce = g.softmax_cross_entropy(logits, &labels)?;

    // Drift penalty over the weight images.
    let delta = g.sub(f_global_w, f_bias_w)?;
    let penalty = g.row_norm_sum(delta);
    let scaled = g.scale(penalty, gamma);
    let total = g.add(ce, scaled)?;
    Ok((total, g.value(ce).item(), g.value(penalty).item()))
}

/// Builds the epoch loss once and reports its components (diagnostics/tests).
pub fn lrl_loss_parts(
    net: &BranchedNetwork,
    state: &mut LrlState,
    weight_batch: &ImageBatch,
    fakes: &[ImageBatch],
    n_way: usize,
    k_shot: usize,
    gamma: f64,
) -> LrlResult<LrlLossParts> {
    let mut g = Graph::new();
    let (total, ce, penalty) =
        build_epoch_loss(net, state, &mut g, weight_batch, fakes, n_way, k_shot, gamma)?;
    Ok(LrlLossParts { total: g.value(total).item(), cross_entropy: ce, penalty })
}

pub struct LrlOutcome {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub state: LrlState,
}

/// Fine-tunes the cloned block on one episode and classifies its real
/// queries. The pre-trained network is read-only throughout; final novel
/// weights come from the untransformed support images in eval mode.
pub fn lrl_finetune(
    net: &BranchedNetwork,
    dataset: &Dataset,
    episode: &Episode,
    cfg: &LrlConfig,
) -> LrlResult<LrlOutcome> {
    cfg.validate()?;
    let (n_way, k_shot) = (episode.n_way, episode.k_shot);
    let support_pixels = dataset.batch_tensor(&episode.support);
    let slot_labels: Vec<usize> = (0..n_way * k_shot).map(|i| i / k_shot).collect();
    let support_batch = ImageBatch {
        pixels: support_pixels.clone(),
        labels: slot_labels,
        label_mix: None,
    };

    let mut state = LrlState::clone_last_block(net);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let eseed = derive_seed(cfg.seed, &[0x11C1, epoch as u64]);
        let (weight_batch, fakes) = make_fake_batch(&support_batch, cfg, eseed)?;
        let mut g = Graph::new();
        let (loss, _, _) =
            build_epoch_loss(net, &mut state, &mut g, &weight_batch, &fakes, n_way, k_shot, cfg.gamma)?;
        g.backward(loss, &mut state.params)?;
        if let Some(max_norm) = cfg.max_grad_norm {
            clip_grad_norm(&mut state.params, max_norm)?;
        }
        sgd_nesterov_step(&mut state.params, &mut state.opt, lr, cfg.momentum, 0.0)?;
    }

    let weights = lrl_weights_eval(net, &state, &support_pixels, n_way, k_shot)?;
    let query_pixels = dataset.batch_tensor(&episode.queries);
    let (fg_q, fb_q) = lrl_features_eval(net, &state, &query_pixels)?;
    let local_q = Tensor::new(
        fg_q.shape(),
        fg_q.data().iter().zip(fb_q.data()).map(|(a, b)| a + b).collect(),
    )?;
    let predictions = classify_features(&local_q, &weights, net.tau())?;
    let accuracy = episode_accuracy(episode, &predictions);
    Ok(LrlOutcome { predictions, accuracy, state })
}

/// Episodic evaluation with LRL fine-tuning per task. Task sampling matches
/// `episodes::evaluate` (same seeds), so LRL and non-LRL runs see identical
/// episodes.
pub fn evaluate_lrl(
    net: &BranchedNetwork,
    dataset: &Dataset,
    novel_class_ids: &[u32],
    spec: &EpisodeSpec,
    cfg: &LrlConfig,
) -> LrlResult<EpisodeResult> {
    let split = SplitView::build(dataset, novel_class_ids)?;
    let accuracies: Vec<f64> = (0..spec.num_tasks)
        .into_par_iter()
        .map(|task| -> LrlResult<f64> {
            let ts = task_seed(spec.seed, task);
            let episode = crate::episodes::sample_episode(&split, spec, ts)?;
            let mut task_cfg = cfg.clone();
            task_cfg.seed = derive_seed(ts, &[0x11C1]);
            let outcome = lrl_finetune(net, dataset, &episode, &task_cfg)?;
            Ok(outcome.accuracy)
        })
        .collect::<LrlResult<_>>()?;
    Ok(EpisodeResult::from_accuracies(accuracies))
}
