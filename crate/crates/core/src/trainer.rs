//! Base-class training: per-branch cosine cross entropy plus the pairwise
//! KL knowledge-sharing regularizer, optimized with Nesterov SGD under a
//! stepwise learning-rate schedule.

use crate::augment::{self, AugmentError, ImageBatch, LightAugment};
use crate::backbone::{cosine_logits, cosine_logits_eval, BranchedNetwork, ClassifierWeights};
use crate::data::Dataset;
use crate::derive_seed;
use crate::tensor::{Graph, ParamSet, Tensor, TensorError, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Augment(AugmentError),
    InvalidConfig(String),
    EmptyDataset,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Augment(e) => write!(f, "{e}"),
            TrainError::InvalidConfig(m) => write!(f, "invalid train config: {m}"),
            TrainError::EmptyDataset => write!(f, "training split has no images"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<AugmentError> for TrainError {
    fn from(e: AugmentError) -> Self {
        TrainError::Augment(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    None,
    SelfMix,
    Cutout,
    Cutmix,
}

impl std::str::FromStr for DropoutMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(DropoutMode::None),
            "selfmix" => Ok(DropoutMode::SelfMix),
            "cutout" => Ok(DropoutMode::Cutout),
            "cutmix" => Ok(DropoutMode::Cutmix),
            other => Err(format!("unknown dropout mode '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// (epoch, lr) pairs; strictly increasing epochs, first entry at 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: DropoutMode,
    /// Probability of applying the regional dropout to each image.
    pub dropout_prob: f64,
    pub patch_frac: f64,
    pub label_smoothing: f64,
    pub kl_enabled: bool,
    /// Detach the target side of each KL term instead of letting both
    /// branches learn from each other.
    pub kl_detach_target: bool,
    /// Optional per-branch weights for the CE terms (default: all 1).
    pub branch_ce_weights: Option<Vec<f64>>,
    pub augment: LightAugment,
    pub seed: u64,
}

impl TrainConfig {
    /// 15 epochs x 100 iterations with the paper's decay ratios compressed
    /// to desk scale (steps at epochs 5/10/13).
    pub fn desk_default() -> Self {
        TrainConfig {
            epochs: 15,
            iters_per_epoch: 100,
            batch_size: 16,
            lr_schedule: vec![(0, 0.1), (5, 0.006), (10, 0.0012), (13, 0.00024)],
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: DropoutMode::SelfMix,
            dropout_prob: 1.0,
            patch_frac: 0.5,
            label_smoothing: 0.0,
            kl_enabled: true,
            kl_detach_target: false,
            branch_ce_weights: None,
            augment: LightAugment::default(),
            seed: 1,
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs, iters, and batch size must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(TrainError::InvalidConfig("lr schedule must start at epoch 0".into()));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(TrainError::InvalidConfig("lr schedule epochs must be strictly increasing".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(TrainError::InvalidConfig("dropout_prob must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainError::InvalidConfig("label smoothing must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant lookup: the entry with the largest epoch <= `epoch`.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    let mut lr = schedule.first().map(|&(_, l)| l).unwrap_or(0.0);
    for &(e, l) in schedule {
        if e <= epoch {
            lr = l;
        }
    }
    lr
}

/// Per-parameter velocity buffers for Nesterov SGD.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        OptimizerState {
            velocity: params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// One Nesterov step: g <- grad + wd*w, v <- m*v + g, w <- w - lr*(g + m*v).
/// Decay-exempt parameters skip the weight-decay addition. Gradients are
/// cleared afterwards; a parameter without a gradient is an error.
pub fn sgd_nesterov_step(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> TensorResult<()> {
    for (id, p) in params.iter_mut() {
        let grad = p.grad.take().ok_or_else(|| TensorError::MissingGrad { param: p.name.clone() })?;
        let v = &mut state.velocity[id.0];
        let w = p.value.data_mut();
        let wd = if p.decay_exempt { 0.0 } else { weight_decay };
        for i in 0..w.len() {
            let g = grad[i] + wd * w[i];
            v[i] = momentum * v[i] + g;
            w[i] -= lr * (g + momentum * v[i]);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> TensorResult<f64> {
    let mut total = 0.0;
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            total += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// Everything `total_loss` needs besides the already-augmented batch.
#[derive(Clone, Debug)]
pub struct LossOptions {
    pub label_smoothing: f64,
    pub kl_enabled: bool,
    pub kl_detach_target: bool,
    pub branch_ce_weights: Option<Vec<f64>>,
}

impl LossOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossOptions {
            label_smoothing: cfg.label_smoothing,
            kl_enabled: cfg.kl_enabled,
            kl_detach_target: cfg.kl_detach_target,
            branch_ce_weights: cfg.branch_ce_weights.clone(),
        }
    }

    pub fn plain() -> Self {
        LossOptions {
            label_smoothing: 0.0,
            kl_enabled: true,
            kl_detach_target: false,
            branch_ce_weights: None,
        }
    }
}

pub struct LossBreakdown {
    pub loss: Var,
    /// Batch-mean cross entropy per branch.
    pub branch_ce: Vec<f64>,
    /// Batch-mean KL per ordered pair (i, j), i != j, in row-major pair order.
    pub pairwise_kl: Vec<f64>,
}

/// Label distribution rows for the batch: one-hot, cutmix-mixed, then
/// optionally smoothed ((1-eps)*row + eps/K, which keeps rows summing to 1).
pub fn label_rows(batch: &ImageBatch, num_classes: usize, smoothing: f64) -> TensorResult<Tensor> {
    let n = batch.len();
    let mut rows = Tensor::zeros(&[n, num_classes]);
    for i in 0..n {
        let row = &mut rows.data_mut()[i * num_classes..(i + 1) * num_classes];
        match batch.label_mix.as_ref().map(|m| m[i]) {
            Some((partner, lambda)) => {
                row[batch.labels[i]] += 1.0 - lambda;
                row[partner] += lambda;
            }
            None => row[batch.labels[i]] = 1.0,
        }
        if smoothing > 0.0 {
            let off = smoothing / num_classes as f64;
            for v in row.iter_mut() {
                *v = (1.0 - smoothing) * *v + off;
            }
        }
    }
    Ok(rows)
}

/// The training objective: sum over branches of batch-mean cross entropy on
/// the tau-scaled cosine logits, plus 1/(2*N_cls) times the sum of pairwise
/// KL divergences between branch posteriors (both directions per pair).
pub fn total_loss(
    net: &mut BranchedNetwork,
    g: &mut Graph,
    batch: &ImageBatch,
    opts: &LossOptions,
) -> TrainResult<LossBreakdown> {
    let n_cls = net.n_classifiers();
    if let Some(wts) = &opts.branch_ce_weights {
        if wts.len() != n_cls {
            return Err(TrainError::InvalidConfig(format!(
                "{} branch weights for {} classifiers",
                wts.len(),
                n_cls
            )));
        }
    }
    let labels = label_rows(batch, net.num_classes, opts.label_smoothing)?;
    let tau = net.tau();
    let features = net.forward_all_train(g, &batch.pixels)?;
    let mut logits = Vec::with_capacity(n_cls);
    for (b, &f) in features.iter().enumerate() {
        let w = g.param(&net.params, net.classifiers[b]);
        logits.push(cosine_logits(g, f, w, tau)?);
    }

    let mut branch_ce = Vec::with_capacity(n_cls);
    let mut loss: Option<Var> = None;
    for (b, &z) in logits.iter().enumerate() {
        let ce = g.softmax_cross_entropy(z, &labels)?;
        branch_ce.push(g.value(ce).item());
        let weighted = match opts.branch_ce_weights.as_ref().map(|w| w[b]) {
            Some(w) if w != 1.0 => g.scale(ce, w),
            _ => ce,
        };
        loss = Some(match loss {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let mut loss = loss.expect("at least one branch");

    let mut pairwise_kl = Vec::new();
    if opts.kl_enabled && n_cls > 1 {
        let probs: Vec<Var> = logits
            .iter()
            .map(|&z| g.softmax(z))
            .collect::<TensorResult<_>>()?;
        let mut kl_sum: Option<Var> = None;
        for i in 0..n_cls {
            for j in 0..n_cls {
                if i == j {
                    continue;
                }
                let kl = g.kl_divergence(probs[i], probs[j], opts.kl_detach_target)?;
                pairwise_kl.push(g.value(kl).item());
                kl_sum = Some(match kl_sum {
                    Some(acc) => g.add(acc, kl)?,
                    None => kl,
                });
            }
        }
        if let Some(total) = kl_sum {
            let scaled = g.scale(total, 1.0 / (2.0 * n_cls as f64));
            loss = g.add(loss, scaled)?;
        }
    }

    Ok(LossBreakdown { loss, branch_ce, pairwise_kl })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub per_branch_ce: Vec<f64>,
    pub mean_kl: f64,
    /// Number of ordered KL pairs per iteration: N_cls * (N_cls - 1).
    pub kl_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Top-1 accuracy of the main classifier over the base split, eval mode.
    pub base_accuracy: f64,
}

/// Image indices of the base split, flattened, with labels remapped to
/// contiguous base-class slots (the classifier row order).
pub struct BaseSplit {
    pub image_indices: Vec<usize>,
    pub slot_labels: Vec<usize>,
    pub num_classes: usize,
}

impl BaseSplit {
    pub fn build(dataset: &Dataset, base_class_ids: &[u32]) -> TrainResult<Self> {
        let by_class = dataset.indices_by_class();
        let mut image_indices = Vec::new();
        let mut slot_labels = Vec::new();
        for (slot, &cid) in base_class_ids.iter().enumerate() {
            for &idx in &by_class[cid as usize] {
                image_indices.push(idx);
                slot_labels.push(slot);
            }
        }
        if image_indices.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(BaseSplit { image_indices, slot_labels, num_classes: base_class_ids.len() })
    }
}

fn sample_batch(dataset: &Dataset, split: &BaseSplit, batch_size: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let pick = rng.random_range(0..split.image_indices.len());
        indices.push(split.image_indices[pick]);
        labels.push(split.slot_labels[pick]);
    }
    let pixels = dataset.batch_tensor(&indices);
    ImageBatch { pixels, labels, label_mix: None }
}

fn apply_dropout(batch: &ImageBatch, cfg: &TrainConfig, seed: u64) -> TrainResult<ImageBatch> {
    let out = match cfg.dropout {
        DropoutMode::None => batch.clone(),
        DropoutMode::SelfMix => with_prob(batch, cfg.dropout_prob, seed, |b, s| augment::self_mix(b, s, cfg.patch_frac))?,
        DropoutMode::Cutout => with_prob(batch, cfg.dropout_prob, seed, |b, s| augment::cutout(b, s, cfg.patch_frac))?,
        // Cutmix pairs images, so the probability gates the whole batch.
        DropoutMode::Cutmix => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF1A6]));
            if rng.random::<f64>() < cfg.dropout_prob {
                augment::cutmix(batch, seed, cfg.patch_frac)?
            } else {
                batch.clone()
            }
        }
    };
    Ok(out)
}

/// Applies `f` to the whole batch, then keeps each image's augmented version
/// with probability `prob` (per-image gate, seeded).
fn with_prob<F>(batch: &ImageBatch, prob: f64, seed: u64, f: F) -> TrainResult<ImageBatch>
where
    F: Fn(&ImageBatch, u64) -> Result<ImageBatch, AugmentError>,
{
    let augmented = f(batch, seed)?;
    if prob >= 1.0 {
        return Ok(augmented);
    }
    let mut out = augmented;
    let sz = batch.pixels.len() / batch.len().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF1A6]));
    for i in 0..batch.len() {
        if rng.random::<f64>() >= prob {
            out.pixels.data_mut()[i * sz..(i + 1) * sz]
                .copy_from_slice(&batch.pixels.data()[i * sz..(i + 1) * sz]);
        }
    }
    Ok(out)
}

/// Full training loop over the base split. Deterministic in `cfg.seed`; the
/// network is updated in place and a per-epoch report is returned.
pub fn train(
    net: &mut BranchedNetwork,
    dataset: &Dataset,
    base_class_ids: &[u32],
    cfg: &TrainConfig,
) -> TrainResult<TrainingReport> {
    cfg.validate()?;
    let split = BaseSplit::build(dataset, base_class_ids)?;
    if split.num_classes != net.num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "network has {} classes but base split has {}",
            net.num_classes, split.num_classes
        )));
    }
    let opts = LossOptions::from_config(cfg);
    let mut opt = OptimizerState::new(&net.params);
    let mut report = TrainingReport { epochs: Vec::with_capacity(cfg.epochs), base_accuracy: 0.0 };
    let n_cls = net.n_classifiers();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch);
        let mut loss_sum = 0.0;
        let mut ce_sums = vec![0.0; n_cls];
        let mut kl_sum = 0.0;
        let mut kl_pairs = 0;
        for iter in 0..cfg.iters_per_epoch {
            let iter_seed = derive_seed(cfg.seed, &[1, epoch as u64, iter as u64]);
            let batch = sample_batch(dataset, &split, cfg.batch_size, derive_seed(iter_seed, &[2]));
            let batch = augment::light_augment(&batch, derive_seed(iter_seed, &[3]), &cfg.augment)?;
            let batch = apply_dropout(&batch, cfg, derive_seed(iter_seed, &[4]))?;
            let mut g = Graph::new();
            let breakdown = total_loss(net, &mut g, &batch, &opts)?;
            g.backward(breakdown.loss, &mut net.params)?;
            sgd_nesterov_step(&mut net.params, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += g.value(breakdown.loss).item();
            for (s, c) in ce_sums.iter_mut().zip(&breakdown.branch_ce) {
                *s += c;
            }
            kl_pairs = breakdown.pairwise_kl.len();
            kl_sum += breakdown.pairwise_kl.iter().sum::<f64>() / breakdown.pairwise_kl.len().max(1) as f64;
        }
        let iters = cfg.iters_per_epoch as f64;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / iters,
            per_branch_ce: ce_sums.iter().map(|s| s / iters).collect(),
            mean_kl: kl_sum / iters,
            kl_pairs,
        });
    }
    report.base_accuracy = base_split_accuracy(net, dataset, &split)?;
    Ok(report)
}

/// Top-1 accuracy of the main classifier on the base split in eval mode.
pub fn base_split_accuracy(net: &BranchedNetwork, dataset: &Dataset, split: &BaseSplit) -> TrainResult<f64> {
    let weights = ClassifierWeights { matrix: net.params.value(net.classifiers[0]).clone() };
    let mut correct = 0usize;
    // Batched to bound memory.
    let chunk = 256;
    for block in split.image_indices.chunks(chunk).zip(split.slot_labels.chunks(chunk)) {
        let (indices, labels) = block;
        let images = dataset.batch_tensor(indices);
        let feats = net.forward_eval(&images, 0)?;
        let logits = cosine_logits_eval(&feats, &weights, net.tau())?;
        let k = net.num_classes;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.image_indices.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_network, BackboneConfig, BlockSpec};
    use crate::data::{generate_synthetic, SynthSpec};

    fn tiny_cfg(branch_points: Vec<usize>) -> BackboneConfig {
        BackboneConfig {
            input: (3, 16, 16),
            blocks: vec![
                BlockSpec { channels: 4, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 16, convs: 1 },
            ],
            branch_points,
            leaky_slope: 0.1,
            residual: false,
            tau: 20.0,
        }
    }

    fn tiny_batch(n: usize, k: usize) -> ImageBatch {
        let mut data = vec![0.0; n * 3 * 16 * 16];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 31 + 7) % 97) as f64 / 97.0;
        }
        ImageBatch {
            pixels: Tensor::new(&[n, 3, 16, 16], data).unwrap(),
            labels: (0..n).map(|i| i % k).collect(),
            label_mix: None,
        }
    }

    #[test]
    fn lr_at_follows_paper_schedule() {
        let schedule = vec![(0, 0.1), (20, 0.006), (40, 0.0012), (50, 0.00024)];
        assert_eq!(lr_at(&schedule, 0), 0.1);
        assert_eq!(lr_at(&schedule, 19), 0.1);
        assert_eq!(lr_at(&schedule, 45), 0.0012);
        assert_eq!(lr_at(&schedule, 60), 0.00024);
        assert_eq!(lr_at(&[(0, 0.5)], 1000), 0.5);
        // Non-increasing over epochs for decay schedules.
        let mut prev = f64::INFINITY;
        for e in 0..60 {
            let lr = lr_at(&schedule, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), false);
        params.accumulate_grad(id, &[0.5, 0.25]);
        let mut state = OptimizerState::new(&params);
        sgd_nesterov_step(&mut params, &mut state, 0.1, 0.0, 0.0).unwrap();
        let w = params.value(id).data();
        assert!((w[0] - 0.95).abs() < 1e-15);
        assert!((w[1] + 2.025).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_step_unroll_matches_recurrence() {
        // f(w) = w^2/2, grad = w; lr 0.1, momentum 0.9.
        let (lr, m) = (0.1, 0.9);
        let mut expect_w = 1.0f64;
        let mut expect_v = 0.0f64;
        for _ in 0..2 {
            let g = expect_w;
            expect_v = m * expect_v + g;
            expect_w -= lr * (g + m * expect_v);
        }

        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(&[1], vec![1.0]).unwrap(), false);
        let mut state = OptimizerState::new(&params);
        for _ in 0..2 {
            let w = params.value(id).data()[0];
            params.accumulate_grad(id, &[w]);
            sgd_nesterov_step(&mut params, &mut state, lr, m, 0.0).unwrap();
        }
        assert!((params.value(id).data()[0] - expect_w).abs() < 1e-15);
    }

    #[test]
    fn sgd_decay_only_shrinks_by_expected_factor() {
        let (lr, m, wd) = (0.1, 0.9, 0.01);
        let w0 = 2.0;
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(&[1], vec![w0]).unwrap(), false);
        params.accumulate_grad(id, &[0.0]);
        let mut state = OptimizerState::new(&params);
        sgd_nesterov_step(&mut params, &mut state, lr, m, wd).unwrap();
        let expected = w0 * (1.0 - lr * wd * (1.0 + m));
        assert!((params.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_decay_for_exempt_params() {
        let mut params = ParamSet::new();
        let id = params.add("bn", Tensor::new(&[1], vec![2.0]).unwrap(), true);
        params.accumulate_grad(id, &[0.0]);
        let mut state = OptimizerState::new(&params);
        sgd_nesterov_step(&mut params, &mut state, 0.1, 0.9, 0.01).unwrap();
        assert_eq!(params.value(id).data()[0], 2.0);
    }

    #[test]
    fn sgd_reports_missing_grad_by_name() {
        let mut params = ParamSet::new();
        params.add("lonely", Tensor::zeros(&[1]), false);
        let mut state = OptimizerState::new(&params);
        let err = sgd_nesterov_step(&mut params, &mut state, 0.1, 0.9, 0.0).unwrap_err();
        match err {
            TensorError::MissingGrad { param } => assert_eq!(param, "lonely"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn single_branch_loss_reduces_to_plain_cross_entropy() {
        let mut net = build_network(&tiny_cfg(vec![]), 4, 1).unwrap();
        let batch = tiny_batch(4, 4);
        let mut g = Graph::new();
        let breakdown = total_loss(&mut net, &mut g, &batch, &LossOptions::plain()).unwrap();
        assert!(breakdown.pairwise_kl.is_empty());
        assert_eq!(breakdown.branch_ce.len(), 1);
        let diff = (g.value(breakdown.loss).item() - breakdown.branch_ce[0]).abs();
        assert!(diff < 1e-12, "loss differs from CE by {diff}");
    }

    #[test]
    fn identical_branches_have_zero_kl() {
        let mut net = build_network(&tiny_cfg(vec![2, 3]), 4, 1).unwrap();
        net.clone_tails_from_trunk();
        let batch = tiny_batch(4, 4);
        let mut g = Graph::new();
        let breakdown = total_loss(&mut net, &mut g, &batch, &LossOptions::plain()).unwrap();
        assert_eq!(breakdown.pairwise_kl.len(), 6);
        for kl in &breakdown.pairwise_kl {
            assert!(kl.abs() < 1e-9, "kl {kl}");
        }
    }

    #[test]
    fn loss_matches_independent_recompute() {
        let mut net = build_network(&tiny_cfg(vec![2, 3]), 4, 9).unwrap();
        let batch = tiny_batch(4, 4);
        let mut g = Graph::new();
        let breakdown = total_loss(&mut net, &mut g, &batch, &LossOptions::plain()).unwrap();
        // Recompute from eval... no: train-mode normalization differs from
        // eval; recompute from the branch CE/KL values instead, which were
        // read from the same graph but combine through independent scalar
        // arithmetic here.
        let n_cls = 3.0;
        let expected: f64 = breakdown.branch_ce.iter().sum::<f64>()
            + breakdown.pairwise_kl.iter().sum::<f64>() / (2.0 * n_cls);
        let got = g.value(breakdown.loss).item();
        assert!((got - expected).abs() < 1e-10, "got {got}, expected {expected}");
    }

    #[test]
    fn kl_pair_count_matches_ncls() {
        for (bps, expected_pairs) in [(vec![], 0), (vec![2], 2), (vec![2, 3], 6), (vec![1, 2, 3], 12)] {
            let mut net = build_network(&tiny_cfg(bps), 4, 2).unwrap();
            let batch = tiny_batch(4, 4);
            let mut g = Graph::new();
            let breakdown = total_loss(&mut net, &mut g, &batch, &LossOptions::plain()).unwrap();
            assert_eq!(breakdown.pairwise_kl.len(), expected_pairs);
        }
    }

    fn train_setup() -> (crate::data::Dataset, Vec<u32>) {
        let spec = SynthSpec {
            num_classes: 4,
            images_per_class: 12,
            height: 16,
            width: 16,
            ..SynthSpec::desk_default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        (ds, vec![0, 1, 2, 3])
    }

    fn small_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            iters_per_epoch: 2,
            batch_size: 4,
            lr_schedule: vec![(0, 0.05)],
            ..TrainConfig::desk_default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (ds, base) = train_setup();
        let mut net = build_network(&tiny_cfg(vec![2, 3]), 4, 3).unwrap();
        let before = net.params.checksum();
        let cfg = TrainConfig { lr_schedule: vec![(0, 0.0)], ..small_train_cfg() };
        train(&mut net, &ds, &base, &cfg).unwrap();
        assert_eq!(net.params.checksum(), before);
    }

    #[test]
    fn fixed_seed_reproduces_loss_trace() {
        let (ds, base) = train_setup();
        let run = || {
            let mut net = build_network(&tiny_cfg(vec![2, 3]), 4, 3).unwrap();
            let cfg = TrainConfig { epochs: 2, ..small_train_cfg() };
            train(&mut net, &ds, &base, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        let ta: Vec<f64> = a.epochs.iter().map(|e| e.mean_loss).collect();
        let tb: Vec<f64> = b.epochs.iter().map(|e| e.mean_loss).collect();
        assert_eq!(ta, tb);
        assert_eq!(a.base_accuracy, b.base_accuracy);
    }

    #[test]
    fn all_dropout_modes_train_to_finite_losses() {
        let (ds, base) = train_setup();
        for mode in [DropoutMode::None, DropoutMode::SelfMix, DropoutMode::Cutout, DropoutMode::Cutmix] {
            let mut net = build_network(&tiny_cfg(vec![2, 3]), 4, 3).unwrap();
            let cfg = TrainConfig { dropout: mode, ..small_train_cfg() };
            let report = train(&mut net, &ds, &base, &cfg).unwrap();
            for e in &report.epochs {
                assert!(e.mean_loss.is_finite(), "{mode:?} loss {}", e.mean_loss);
            }
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = crate::data::Dataset::new(4, 3, 16, 16);
        let mut net = build_network(&tiny_cfg(vec![]), 4, 3).unwrap();
        assert!(matches!(
            train(&mut net, &ds, &[0, 1, 2, 3], &small_train_cfg()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn label_rows_sum_to_one_with_smoothing_and_cutmix() {
        let mut batch = tiny_batch(3, 3);
        batch.label_mix = Some(vec![(1, 0.25), (0, 0.0), (2, 1.0)]);
        let rows = label_rows(&batch, 3, 0.1).unwrap();
        for r in 0..3 {
            let s: f64 = rows.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
