//! Episodic n-way k-shot evaluation: task sampling from the novel split,
//! support-mean weight generation, cosine-argmax query classification, and
//! 95%-confidence aggregation over tasks.

use crate::backbone::{cosine_logits_eval, BranchedNetwork, ClassifierWeights};
use crate::data::Dataset;
use crate::derive_seed;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

pub type EpisodeResultT<T> = Result<T, EpisodeError>;

#[derive(Debug)]
pub enum EpisodeError {
    InvalidSplit(String),
    Tensor(TensorError),
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpisodeError::InvalidSplit(m) => write!(f, "invalid split: {m}"),
            EpisodeError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EpisodeError {}

impl From<TensorError> for EpisodeError {
    fn from(e: TensorError) -> Self {
        EpisodeError::Tensor(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// T test queries per class.
    pub queries_per_class: usize,
    pub num_tasks: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    /// 5-way k-shot with T=15 queries; 200 tasks is the desk-scale stand-in
    /// for the full protocol's 2,000.
    pub fn desk_default(k_shot: usize, seed: u64) -> Self {
        EpisodeSpec { n_way: 5, k_shot, queries_per_class: 15, num_tasks: 200, seed }
    }
}

/// One sampled task: dataset image indices, slot-major (class slot j owns
/// `support[j*k..(j+1)*k]` and `queries[j*T..(j+1)*T]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    /// Dataset class id per slot.
    pub class_ids: Vec<u32>,
    pub support: Vec<usize>,
    pub queries: Vec<usize>,
}

impl Episode {
    pub fn query_slot(&self, query_index: usize) -> usize {
        query_index / self.queries_per_class
    }
}

/// View of the novel split: class ids with their image indices.
#[derive(Clone, Debug)]
pub struct SplitView {
    pub classes: Vec<(u32, Vec<usize>)>,
}

impl SplitView {
    pub fn build(dataset: &Dataset, class_ids: &[u32]) -> EpisodeResultT<Self> {
        let by_class = dataset.indices_by_class();
        let mut classes = Vec::with_capacity(class_ids.len());
        for &cid in class_ids {
            if cid as usize >= by_class.len() {
                return Err(EpisodeError::InvalidSplit(format!(
                    "class {cid} not present in dataset"
                )));
            }
            classes.push((cid, by_class[cid as usize].clone()));
        }
        Ok(SplitView { classes })
    }
}

/// Draws one episode. Classes are sampled without replacement, then k+T
/// distinct examples per class; support and query sets are disjoint.
pub fn sample_episode(split: &SplitView, spec: &EpisodeSpec, task_seed: u64) -> EpisodeResultT<Episode> {
    if split.classes.len() < spec.n_way {
        return Err(EpisodeError::InvalidSplit(format!(
            "{} classes available, {} needed",
            split.classes.len(),
            spec.n_way
        )));
    }
    let needed = spec.k_shot + spec.queries_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    // Partial Fisher-Yates over class positions.
    let mut order: Vec<usize> = (0..split.classes.len()).collect();
    for i in 0..spec.n_way {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    let mut episode = Episode {
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        queries_per_class: spec.queries_per_class,
        class_ids: Vec::with_capacity(spec.n_way),
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        queries: Vec::with_capacity(spec.n_way * spec.queries_per_class),
    };
    for &ci in order.iter().take(spec.n_way) {
        let (cid, images) = &split.classes[ci];
        if images.len() < needed {
            return Err(EpisodeError::InvalidSplit(format!(
                "class {cid} has {} images, needs {needed}",
                images.len()
            )));
        }
        let mut picks: Vec<usize> = (0..images.len()).collect();
        for i in 0..needed {
            let j = rng.random_range(i..picks.len());
            picks.swap(i, j);
        }
        episode.class_ids.push(*cid);
        episode.support.extend(picks[..spec.k_shot].iter().map(|&p| images[p]));
        episode
            .queries
            .extend(picks[spec.k_shot..needed].iter().map(|&p| images[p]));
    }
    Ok(episode)
}

/// Novel-class weights: row j is the arithmetic mean of the k un-normalized
/// support features of class j (normalization happens inside cosine scoring).
pub fn novel_weights(
    net: &BranchedNetwork,
    dataset: &Dataset,
    episode: &Episode,
    branch: usize,
) -> EpisodeResultT<ClassifierWeights> {
    let images = dataset.batch_tensor(&episode.support);
    let feats = net.forward_eval(&images, branch)?;
    Ok(weights_from_features(&feats, episode.n_way, episode.k_shot))
}

/// Mean of every k consecutive feature rows.
pub fn weights_from_features(features: &Tensor, n_way: usize, k_shot: usize) -> ClassifierWeights {
    let d = features.shape()[1];
    let mut matrix = Tensor::zeros(&[n_way, d]);
    for j in 0..n_way {
        for i in 0..k_shot {
            let row = &features.data()[(j * k_shot + i) * d..(j * k_shot + i + 1) * d];
            for (w, v) in matrix.data_mut()[j * d..(j + 1) * d].iter_mut().zip(row) {
                *w += v;
            }
        }
        for w in matrix.data_mut()[j * d..(j + 1) * d].iter_mut() {
            *w /= k_shot as f64;
        }
    }
    ClassifierWeights { matrix }
}

/// Argmax over tau-scaled cosine scores; ties break to the lowest class index.
pub fn classify_features(features: &Tensor, weights: &ClassifierWeights, tau: f64) -> EpisodeResultT<Vec<usize>> {
    let logits = cosine_logits_eval(features, weights, tau)?;
    let k = weights.matrix.shape()[0];
    let n = features.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Classifies the episode's queries with the given novel weights.
pub fn classify_queries(
    net: &BranchedNetwork,
    dataset: &Dataset,
    episode: &Episode,
    weights: &ClassifierWeights,
    branch: usize,
) -> EpisodeResultT<Vec<usize>> {
    let images = dataset.batch_tensor(&episode.queries);
    let feats = net.forward_eval(&images, branch)?;
    classify_features(&feats, weights, net.tau())
}

pub fn episode_accuracy(episode: &Episode, predictions: &[usize]) -> f64 {
    let correct = predictions
        .iter()
        .enumerate()
        .filter(|(q, &p)| p == episode.query_slot(*q))
        .count();
    correct as f64 / predictions.len().max(1) as f64
}

/// Per-task accuracies with their mean and 95% confidence half-width
/// (1.96 * sample std / sqrt(num_tasks)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub per_task_accuracy: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

impl EpisodeResult {
    pub fn from_accuracies(per_task_accuracy: Vec<f64>) -> Self {
        let n = per_task_accuracy.len();
        let mean = per_task_accuracy.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = if n >= 2 {
            let var = per_task_accuracy.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EpisodeResult { per_task_accuracy, mean, ci95 }
    }
}

/// Runs `spec.num_tasks` episodes with per-task seeds derived from
/// `spec.seed`, in parallel; parallel and serial runs produce identical
/// results because each task owns its seed and results aggregate in order.
pub fn evaluate(
    net: &BranchedNetwork,
    dataset: &Dataset,
    novel_class_ids: &[u32],
    spec: &EpisodeSpec,
) -> EpisodeResultT<EpisodeResult> {
    let split = SplitView::build(dataset, novel_class_ids)?;
    let accuracies: Vec<f64> = (0..spec.num_tasks)
        .into_par_iter()
        .map(|task| -> EpisodeResultT<f64> {
            let episode = sample_episode(&split, spec, task_seed(spec.seed, task))?;
            let weights = novel_weights(net, dataset, &episode, 0)?;
            let predictions = classify_queries(net, dataset, &episode, &weights, 0)?;
            Ok(episode_accuracy(&episode, &predictions))
        })
        .collect::<EpisodeResultT<_>>()?;
    Ok(EpisodeResult::from_accuracies(accuracies))
}

pub fn task_seed(spec_seed: u64, task_index: usize) -> u64 {
    derive_seed(spec_seed, &[0x7A5F, task_index as u64])
}

/// Ensemble variant: every branch builds its own novel weights from its own
/// features, and query posteriors (softmax of tau-scaled cosine scores) are
/// averaged across branches before the argmax. Not used by default; inference
/// normally relies on the main classifier alone.
pub fn evaluate_ensemble(
    net: &BranchedNetwork,
    dataset: &Dataset,
    novel_class_ids: &[u32],
    spec: &EpisodeSpec,
) -> EpisodeResultT<EpisodeResult> {
    let split = SplitView::build(dataset, novel_class_ids)?;
    let accuracies: Vec<f64> = (0..spec.num_tasks)
        .into_par_iter()
        .map(|task| -> EpisodeResultT<f64> {
            let episode = sample_episode(&split, spec, task_seed(spec.seed, task))?;
            let sup = dataset.batch_tensor(&episode.support);
            let qry = dataset.batch_tensor(&episode.queries);
            let mut mean_probs: Option<Tensor> = None;
            for branch in 0..net.n_classifiers() {
                let sup_feats = net.forward_eval(&sup, branch)?;
                let weights = weights_from_features(&sup_feats, episode.n_way, episode.k_shot);
                let q_feats = net.forward_eval(&qry, branch)?;
                let logits = cosine_logits_eval(&q_feats, &weights, net.tau())?;
                let probs = crate::tensor::kernels::softmax_rows(&logits)?;
                mean_probs = Some(match mean_probs {
                    None => probs,
                    Some(mut acc) => {
                        for (a, p) in acc.data_mut().iter_mut().zip(probs.data()) {
                            *a += p;
                        }
                        acc
                    }
                });
            }
            let probs = mean_probs.expect("at least one branch");
            let k = episode.n_way;
            let predictions: Vec<usize> = (0..episode.queries.len())
                .map(|i| {
                    let row = &probs.data()[i * k..(i + 1) * k];
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            Ok(episode_accuracy(&episode, &predictions))
        })
        .collect::<EpisodeResultT<_>>()?;
    Ok(EpisodeResult::from_accuracies(accuracies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_network, BackboneConfig, BlockSpec};
    use crate::data::{generate_synthetic, SynthSpec};

    fn tiny_net(seed: u64) -> BranchedNetwork {
        let cfg = BackboneConfig {
            input: (3, 16, 16),
            blocks: vec![
                BlockSpec { channels: 4, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 8, convs: 1 },
                BlockSpec { channels: 16, convs: 1 },
            ],
            branch_points: vec![],
            leaky_slope: 0.1,
            residual: false,
            tau: 20.0,
        };
        build_network(&cfg, 4, seed).unwrap()
    }

    fn tiny_data() -> (Dataset, Vec<u32>) {
        let spec = SynthSpec {
            num_classes: 8,
            images_per_class: 20,
            height: 16,
            width: 16,
            ..SynthSpec::desk_default()
        };
        (generate_synthetic(&spec).unwrap(), (0..8).collect())
    }

    #[test]
    fn episode_shape_matches_spec() {
        let (ds, novel) = tiny_data();
        let split = SplitView::build(&ds, &novel).unwrap();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 15, num_tasks: 1, seed: 4 };
        let ep = sample_episode(&split, &spec, 99).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.queries.len(), 75);
        // Disjoint support/query sets.
        for s in &ep.support {
            assert!(!ep.queries.contains(s));
        }
        // Classes distinct.
        let mut ids = ep.class_ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), 5);
    }

    #[test]
    fn episode_can_exhaust_a_class() {
        let (ds, novel) = tiny_data();
        let split = SplitView::build(&ds, &novel).unwrap();
        // 20 images per class: k = 20 - T with T = 15.
        let spec = EpisodeSpec { n_way: 3, k_shot: 5, queries_per_class: 15, num_tasks: 1, seed: 4 };
        let ep = sample_episode(&split, &spec, 123).unwrap();
        assert_eq!(ep.support.len() / 3 + ep.queries.len() / 3, 20);
        let spec_too_big = EpisodeSpec { k_shot: 6, ..spec };
        assert!(sample_episode(&split, &spec_too_big, 123).is_err());
    }

    #[test]
    fn different_task_seeds_usually_differ() {
        let (ds, novel) = tiny_data();
        let split = SplitView::build(&ds, &novel).unwrap();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 2, num_tasks: 1, seed: 4 };
        let mut distinct = 0;
        for t in 0..100 {
            let a = sample_episode(&split, &spec, task_seed(1, t)).unwrap();
            let b = sample_episode(&split, &spec, task_seed(2, t)).unwrap();
            if a != b {
                distinct += 1;
            }
        }
        assert!(distinct > 90, "only {distinct} of 100 task pairs differed");
    }

    #[test]
    fn novel_weights_are_support_means() {
        let net = tiny_net(5);
        let (ds, _) = tiny_data();
        let split = SplitView::build(&ds, &[0, 1, 2, 3, 4]).unwrap();
        let spec = EpisodeSpec { n_way: 3, k_shot: 5, queries_per_class: 2, num_tasks: 1, seed: 4 };
        let ep = sample_episode(&split, &spec, 7).unwrap();
        let w = novel_weights(&net, &ds, &ep, 0).unwrap();
        // Direct mean oracle.
        let feats = net.forward_eval(&ds.batch_tensor(&ep.support), 0).unwrap();
        let d = feats.shape()[1];
        for j in 0..3 {
            for c in 0..d {
                let mean: f64 = (0..5).map(|i| feats.data()[(j * 5 + i) * d + c]).sum::<f64>() / 5.0;
                assert!((w.matrix.data()[j * d + c] - mean).abs() < 1e-12);
            }
        }
        // k = 1: the weight row is the single support feature.
        let spec1 = EpisodeSpec { k_shot: 1, ..spec };
        let ep1 = sample_episode(&split, &spec1, 8).unwrap();
        let w1 = novel_weights(&net, &ds, &ep1, 0).unwrap();
        let f1 = net.forward_eval(&ds.batch_tensor(&ep1.support), 0).unwrap();
        assert_eq!(w1.matrix.data(), f1.data());
    }

    #[test]
    fn opposite_features_cancel_to_zero_weight() {
        let feats = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, -1.0, 2.0, -0.5]).unwrap();
        let w = weights_from_features(&feats, 1, 2);
        assert_eq!(w.matrix.data(), &[0.0, 0.0, 0.0]);
        // Degenerate zero weight still classifies (eps-guarded normalization).
        let q = Tensor::new(&[1, 3], vec![0.3, 0.3, 0.3]).unwrap();
        let preds = classify_features(&q, &w, 20.0).unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn scaled_weights_do_not_change_predictions() {
        let net = tiny_net(6);
        let (ds, novel) = tiny_data();
        let split = SplitView::build(&ds, &novel).unwrap();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 15, num_tasks: 1, seed: 4 };
        let ep = sample_episode(&split, &spec, 3).unwrap();
        let w = novel_weights(&net, &ds, &ep, 0).unwrap();
        let mut scaled = w.clone();
        for v in scaled.matrix.data_mut() {
            *v *= 7.5;
        }
        let a = classify_queries(&net, &ds, &ep, &w, 0).unwrap();
        let b = classify_queries(&net, &ds, &ep, &scaled, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn query_equal_to_sole_support_is_classified_correctly() {
        let net = tiny_net(7);
        let (ds, novel) = tiny_data();
        let split = SplitView::build(&ds, &novel).unwrap();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 1, num_tasks: 1, seed: 4 };
        let ep = sample_episode(&split, &spec, 11).unwrap();
        let w = novel_weights(&net, &ds, &ep, 0).unwrap();
        // Feed the support images themselves as queries.
        let feats = net.forward_eval(&ds.batch_tensor(&ep.support), 0).unwrap();
        let preds = classify_features(&feats, &w, net.tau()).unwrap();
        assert_eq!(preds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ci95_matches_hand_computation() {
        let r = EpisodeResult::from_accuracies(vec![1.0, 0.0]);
        assert!((r.mean - 0.5).abs() < 1e-15);
        // std = sqrt(0.5), ci = 1.96 * 0.7071.. / sqrt(2)
        let expected = 1.96 * (0.5f64).sqrt() / (2.0f64).sqrt();
        assert!((r.ci95 - expected).abs() < 1e-12);
        assert!((r.ci95 - 0.98).abs() < 1e-3);

        let uniform = EpisodeResult::from_accuracies(vec![0.42; 10]);
        assert!(uniform.ci95.abs() < 1e-15);
    }

    #[test]
    fn result_is_order_invariant() {
        let accs = vec![0.2, 0.8, 0.5, 1.0, 0.4];
        let mut rev = accs.clone();
        rev.reverse();
        let a = EpisodeResult::from_accuracies(accs);
        let b = EpisodeResult::from_accuracies(rev);
        assert!((a.mean - b.mean).abs() < 1e-15);
        assert!((a.ci95 - b.ci95).abs() < 1e-15);
    }

    #[test]
    fn random_net_sits_at_chance_level() {
        let net = tiny_net(8);
        let (ds, novel) = tiny_data();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 15, num_tasks: 200, seed: 21 };
        let result = evaluate(&net, &ds, &novel, &spec).unwrap();
        // Untrained features still carry some class signal, so chance level
        // is a lower bound; check the statistical band around 0.2 from above
        // only loosely and below strictly.
        assert!(result.mean > 0.2 - 3.0 * result.ci95.max(1e-3));
        assert!(result.per_task_accuracy.len() == 200);
    }

    #[test]
    fn evaluation_does_not_mutate_the_network() {
        let net = tiny_net(9);
        let (ds, novel) = tiny_data();
        let before = net.params.checksum();
        let stats_before = net.bn_stats.clone();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 5, num_tasks: 8, seed: 2 };
        evaluate(&net, &ds, &novel, &spec).unwrap();
        assert_eq!(net.params.checksum(), before);
        assert_eq!(net.bn_stats, stats_before);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let net = tiny_net(10);
        let (ds, novel) = tiny_data();
        let spec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 5, num_tasks: 16, seed: 5 };
        let a = evaluate(&net, &ds, &novel, &spec).unwrap();
        let b = evaluate(&net, &ds, &novel, &spec).unwrap();
        assert_eq!(a, b);
    }
}
