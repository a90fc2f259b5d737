//! Self-verification suites: finite-difference checks for every
//! differentiable operation, self-mix structural properties, the
//! single-classifier loss reduction, and an evaluator-vs-oracle comparison.
//! Shared by the `selfcheck` CLI command and the acceptance tests.

use crate::augment::{self, ImageBatch};
use crate::backbone::{build_network, BackboneConfig, BlockSpec, ClassifierWeights};
use crate::data::{generate_synthetic, SynthSpec};
use crate::derive_seed;
use crate::episodes::{self, EpisodeSpec, SplitView};
use crate::tensor::{Fault, GradCheck, Graph, ParamSet, Tensor, TensorResult, Var};
use crate::trainer::{total_loss, LossOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: true, detail: detail.into() }
    }

    fn fail(name: impl Into<String>, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: false, detail: detail.into() }
    }
}

fn rng_for(op: &str, instance: usize) -> ChaCha8Rng {
    let tag = op.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(derive_seed(0xC11EC4, &[tag, instance as u64]))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + rng.random::<f64>() * (hi - lo)).collect()
}

/// Values bounded away from zero, for kink-free leaky-relu checks.
fn nonzero_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.1 + rng.random::<f64>() * 0.9;
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Well-separated values so max-pool argmaxes are stable under +-h wiggles.
fn separated_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    values
}

type LossBuilder<'a> = Box<dyn FnMut(&mut Graph, &ParamSet) -> TensorResult<Var> + 'a>;

/// Runs one finite-difference check instance and reports it.
fn check_one(
    name: &str,
    instance: usize,
    fault: Option<Fault>,
    params: &mut ParamSet,
    build: LossBuilder<'_>,
) -> CheckResult {
    let check = GradCheck { fault, ..GradCheck::default() };
    match check.run(params, build) {
        Ok(outcome) => {
            let detail = format!(
                "max rel err {:.3e} over {} coords (worst {})",
                outcome.max_rel_err, outcome.coordinates_checked, outcome.worst
            );
            if outcome.passed(1e-3) {
                CheckResult::pass(format!("grad/{name}[{instance}]"), detail)
            } else {
                CheckResult::fail(format!("grad/{name}[{instance}]"), detail)
            }
        }
        Err(e) => CheckResult::fail(format!("grad/{name}[{instance}]"), e.to_string()),
    }
}

/// Finite-difference suite over every differentiable operation,
/// `instances` random cases each.
pub fn gradient_suite(instances: usize, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut results = Vec::new();

    for i in 0..instances {
        // conv2d: gradients for both input and kernel, varying stride/pad.
        {
            let mut rng = rng_for("conv2d", i);
            let (c, f) = (1 + i % 3, 1 + (i + 1) % 3);
            let stride = 1 + i % 2;
            let pad = i % 2;
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[2, c, 5, 5], uniform(&mut rng, 2 * c * 25, -1.0, 1.0)).unwrap(), false);
            let k = params.add("k", Tensor::new(&[f, c, 3, 3], uniform(&mut rng, f * c * 9, -0.7, 0.7)).unwrap(), false);
            let r = Tensor::new(&[2, f, 5, 5], uniform(&mut rng, 2 * f * 25, -1.0, 1.0)).unwrap();
            let oh = (5 + 2 * pad - 3) / stride + 1;
            let r = Tensor::new(&[2, f, oh, oh], r.data()[..2 * f * oh * oh].to_vec()).unwrap();
            results.push(check_one("conv2d", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let kv = g.param(ps, k);
                let y = g.conv2d(xv, kv, stride, pad)?;
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.mean(prod))
            })));
        }

        // batch_norm, train and eval modes.
        for train in [true, false] {
            let mut rng = rng_for(if train { "bn_train" } else { "bn_eval" }, i);
            let c = 2 + i % 2;
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[3, c, 2, 2], uniform(&mut rng, 12 * c, -2.0, 2.0)).unwrap(), false);
            let s = params.add("scale", Tensor::new(&[c], uniform(&mut rng, c, 0.5, 1.5)).unwrap(), true);
            let b = params.add("shift", Tensor::new(&[c], uniform(&mut rng, c, -0.5, 0.5)).unwrap(), true);
            let r = Tensor::new(&[3, c, 2, 2], uniform(&mut rng, 12 * c, -1.0, 1.0)).unwrap();
            let rm = uniform(&mut rng, c, -0.3, 0.3);
            let rv: Vec<f64> = uniform(&mut rng, c, 0.5, 1.5);
            results.push(check_one(
                if train { "batch_norm_train" } else { "batch_norm_eval" },
                i,
                fault,
                &mut params,
                Box::new(move |g, ps| {
                    let xv = g.param(ps, x);
                    let sv = g.param(ps, s);
                    let bv = g.param(ps, b);
                    let mut rm = rm.clone();
                    let mut rvv = rv.clone();
                    let y = g.batch_norm(xv, sv, bv, &mut rm, &mut rvv, train, 0.9, 1e-5)?;
                    let rt = g.input(r.clone());
                    let prod = g.mul(y, rt)?;
                    Ok(g.mean(prod))
                }),
            ));
        }

        // leaky_relu (inputs away from the kink).
        {
            let mut rng = rng_for("leaky_relu", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[8], nonzero_uniform(&mut rng, 8)).unwrap(), false);
            let r = Tensor::new(&[8], uniform(&mut rng, 8, -1.0, 1.0)).unwrap();
            results.push(check_one("leaky_relu", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let y = g.leaky_relu(xv, 0.1);
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // l2_normalize rows.
        {
            let mut rng = rng_for("l2_normalize", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[3, 4], nonzero_uniform(&mut rng, 12)).unwrap(), false);
            let r = Tensor::new(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap();
            results.push(check_one("l2_normalize", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let y = g.l2_normalize(xv, 1e-12);
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // softmax_cross_entropy through the logits.
        {
            let mut rng = rng_for("softmax_cross_entropy", i);
            let (n, k) = (3, 4);
            let mut params = ParamSet::new();
            let z = params.add("logits", Tensor::new(&[n, k], uniform(&mut rng, n * k, -2.0, 2.0)).unwrap(), false);
            let labels = {
                let mut rows = Tensor::zeros(&[n, k]);
                for row in 0..n {
                    let hot = rng.random_range(0..k);
                    for col in 0..k {
                        rows.data_mut()[row * k + col] = if col == hot { 0.85 } else { 0.05 };
                    }
                }
                rows
            };
            results.push(check_one("softmax_cross_entropy", i, fault, &mut params, Box::new(move |g, ps| {
                let zv = g.param(ps, z);
                g.softmax_cross_entropy(zv, &labels)
            })));
        }

        // kl_divergence through two softmaxes, gradients into both sides.
        {
            let mut rng = rng_for("kl_divergence", i);
            let (n, k) = (3, 4);
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::new(&[n, k], uniform(&mut rng, n * k, -1.5, 1.5)).unwrap(), false);
            let b = params.add("b", Tensor::new(&[n, k], uniform(&mut rng, n * k, -1.5, 1.5)).unwrap(), false);
            results.push(check_one("kl_divergence", i, fault, &mut params, Box::new(move |g, ps| {
                let av = g.param(ps, a);
                let bv = g.param(ps, b);
                let p = g.softmax(av)?;
                let q = g.softmax(bv)?;
                g.kl_divergence(p, q, false)
            })));
        }

        // matmul.
        {
            let mut rng = rng_for("matmul", i);
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::new(&[3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap(), false);
            let b = params.add("b", Tensor::new(&[4, 2], uniform(&mut rng, 8, -1.0, 1.0)).unwrap(), false);
            let r = Tensor::new(&[3, 2], uniform(&mut rng, 6, -1.0, 1.0)).unwrap();
            results.push(check_one("matmul", i, fault, &mut params, Box::new(move |g, ps| {
                let av = g.param(ps, a);
                let bv = g.param(ps, b);
                let y = g.matmul(av, bv)?;
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // elementwise add / sub / mul and scalar scale, composed.
        {
            let mut rng = rng_for("elementwise", i);
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::new(&[6], uniform(&mut rng, 6, -1.0, 1.0)).unwrap(), false);
            let b = params.add("b", Tensor::new(&[6], uniform(&mut rng, 6, -1.0, 1.0)).unwrap(), false);
            let factor = 0.5 + rng.random::<f64>();
            results.push(check_one("elementwise", i, fault, &mut params, Box::new(move |g, ps| {
                let av = g.param(ps, a);
                let bv = g.param(ps, b);
                let sum = g.add(av, bv)?;
                let diff = g.sub(av, bv)?;
                let prod = g.mul(sum, diff)?;
                let scaled = g.scale(prod, factor);
                Ok(g.mean(scaled))
            })));
        }

        // max_pool2d (well-separated values).
        {
            let mut rng = rng_for("max_pool2d", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[1, 2, 4, 4], separated_values(&mut rng, 32)).unwrap(), false);
            let r = Tensor::new(&[1, 2, 2, 2], uniform(&mut rng, 8, -1.0, 1.0)).unwrap();
            results.push(check_one("max_pool2d", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let y = g.max_pool2d(xv)?;
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // global_average_pool.
        {
            let mut rng = rng_for("global_average_pool", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[2, 3, 2, 2], uniform(&mut rng, 24, -1.0, 1.0)).unwrap(), false);
            let r = Tensor::new(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0)).unwrap();
            results.push(check_one("global_average_pool", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let y = g.global_avg_pool(xv)?;
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // concat along both axes, reshape, transpose, and reductions.
        {
            let mut rng = rng_for("shape_ops", i);
            let axis = i % 2;
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::new(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0)).unwrap(), false);
            let b = params.add("b", Tensor::new(&[2, 3], uniform(&mut rng, 6, -1.0, 1.0)).unwrap(), false);
            let rlen = 12;
            let r = Tensor::new(&[rlen], uniform(&mut rng, rlen, -1.0, 1.0)).unwrap();
            results.push(check_one("concat_reshape_transpose", i, fault, &mut params, Box::new(move |g, ps| {
                let av = g.param(ps, a);
                let bv = g.param(ps, b);
                let bt = g.transpose(bv)?;
                let btt = g.transpose(bt)?;
                let cat = g.concat(&[av, btt], axis)?;
                let flat = g.reshape(cat, &[rlen])?;
                let rv = g.input(r.clone());
                let prod = g.mul(flat, rv)?;
                let total = g.sum(prod);
                let m = g.mean(prod);
                g.add(total, m)
            })));
        }

        // softmax alone.
        {
            let mut rng = rng_for("softmax", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[2, 5], uniform(&mut rng, 10, -2.0, 2.0)).unwrap(), false);
            let r = Tensor::new(&[2, 5], uniform(&mut rng, 10, -1.0, 1.0)).unwrap();
            results.push(check_one("softmax", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                let y = g.softmax(xv)?;
                let rv = g.input(r.clone());
                let prod = g.mul(y, rv)?;
                Ok(g.sum(prod))
            })));
        }

        // row_norm_sum (rows bounded away from the origin).
        {
            let mut rng = rng_for("row_norm_sum", i);
            let mut params = ParamSet::new();
            let x = params.add("x", Tensor::new(&[3, 4], nonzero_uniform(&mut rng, 12)).unwrap(), false);
            results.push(check_one("row_norm_sum", i, fault, &mut params, Box::new(move |g, ps| {
                let xv = g.param(ps, x);
                Ok(g.row_norm_sum(xv))
            })));
        }
    }

    // Composed network: the full training objective on a tiny branched net,
    // checking backward end to end over every registered parameter.
    for i in 0..instances.min(3) {
        let cfg = BackboneConfig {
            input: (1, 8, 8),
            blocks: vec![
                BlockSpec { channels: 2, convs: 1 },
                BlockSpec { channels: 3, convs: 1 },
                BlockSpec { channels: 4, convs: 1 },
            ],
            branch_points: vec![1, 2],
            leaky_slope: 0.1,
            residual: false,
            tau: 20.0,
        };
        let mut net = build_network(&cfg, 3, 1000 + i as u64).expect("valid config");
        let mut rng = rng_for("composed", i);
        let pixels = Tensor::new(&[3, 1, 8, 8], uniform(&mut rng, 3 * 64, 0.0, 1.0)).unwrap();
        let batch = ImageBatch { pixels, labels: vec![0, 1, 2], label_mix: None };
        let opts = LossOptions::plain();
        // Pull the parameters out so the generic checker can drive them.
        let mut params = std::mem::take(&mut net.params);
        let result = check_one("composed_network", i, fault, &mut params, Box::new(|g, ps| {
            net.params = ps.clone();
            let breakdown = total_loss(&mut net, g, &batch, &opts).map_err(|e| match e {
                crate::trainer::TrainError::Tensor(t) => t,
                other => crate::tensor::TensorError::InvalidArgument {
                    op: "composed",
                    message: other.to_string(),
                },
            })?;
            Ok(breakdown.loss)
        }));
        results.push(result);
    }

    results
}

/// Self-mix structural property run: over `trials` random batches, labels are
/// untouched, pixels outside dst are bit-identical, dst content equals the
/// coordinate-mapped src content of the original, and src/dst top-lefts differ.
pub fn self_mix_property_suite(trials: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F);
    let mut violations = Vec::new();
    for trial in 0..trials {
        let (h, w) = (4 + 2 * (trial % 4), 4 + 2 * ((trial / 2) % 4));
        let c = 1 + trial % 3;
        let n = 1 + trial % 3;
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.random::<f64>()).collect();
        let batch = ImageBatch {
            pixels: Tensor::new(&[n, c, h, w], data).unwrap(),
            labels: (0..n).collect(),
            label_mix: None,
        };
        let frac = [0.25, 0.5, 0.75][trial % 3];
        let (out, regions) = match augment::self_mix_with_regions(&batch, trial as u64, frac) {
            Ok(v) => v,
            Err(e) => {
                violations.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        if out.labels != batch.labels {
            violations.push(format!("trial {trial}: labels changed"));
        }
        for (img, &(src, dst)) in regions.iter().enumerate() {
            if (src.x, src.y) == (dst.x, dst.y) {
                violations.push(format!("trial {trial} img {img}: src == dst top-left"));
            }
            let sz = c * h * w;
            let orig = &batch.pixels.data()[img * sz..(img + 1) * sz];
            let new = &out.pixels.data()[img * sz..(img + 1) * sz];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let idx = (ch * h + y) * w + x;
                        let in_dst = x >= dst.x && x < dst.x + dst.w && y >= dst.y && y < dst.y + dst.h;
                        let expected = if in_dst {
                            orig[(ch * h + (y - dst.y + src.y)) * w + (x - dst.x + src.x)]
                        } else {
                            orig[idx]
                        };
                        if new[idx].to_bits() != expected.to_bits() {
                            violations.push(format!("trial {trial} img {img}: pixel ({ch},{y},{x}) mismatch"));
                        }
                    }
                }
            }
        }
        if violations.len() > 5 {
            break;
        }
    }
    if violations.is_empty() {
        vec![CheckResult::pass("selfmix/properties", format!("{trials} trials, zero violations"))]
    } else {
        vec![CheckResult::fail("selfmix/properties", violations.join("; "))]
    }
}

/// Loss reduction checks: single classifier equals plain cross entropy;
/// cloned identical branches have zero pairwise KL.
pub fn loss_reduction_suite() -> Vec<CheckResult> {
    let mut results = Vec::new();
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
    let mut rng = ChaCha8Rng::seed_from_u64(0x10E5);
    let pixels = Tensor::new(&[4, 3, 16, 16], (0..4 * 3 * 256).map(|_| rng.random::<f64>()).collect()).unwrap();
    let batch = ImageBatch { pixels, labels: vec![0, 1, 2, 3], label_mix: None };

    let mut net = build_network(&cfg, 4, 42).expect("valid");
    let mut g = Graph::new();
    match total_loss(&mut net, &mut g, &batch, &LossOptions::plain()) {
        Ok(b) => {
            let diff = (g.value(b.loss).item() - b.branch_ce[0]).abs();
            if diff < 1e-12 && b.pairwise_kl.is_empty() {
                results.push(CheckResult::pass("loss/single_branch_reduction", format!("diff {diff:.2e}")));
            } else {
                results.push(CheckResult::fail("loss/single_branch_reduction", format!("diff {diff:.2e}")));
            }
        }
        Err(e) => results.push(CheckResult::fail("loss/single_branch_reduction", e.to_string())),
    }

    let cfg3 = BackboneConfig { branch_points: vec![2, 3], ..cfg };
    let mut net3 = build_network(&cfg3, 4, 43).expect("valid");
    net3.clone_tails_from_trunk();
    let mut g3 = Graph::new();
    match total_loss(&mut net3, &mut g3, &batch, &LossOptions::plain()) {
        Ok(b) => {
            let worst = b.pairwise_kl.iter().cloned().fold(0.0f64, |a, x| a.max(x.abs()));
            if b.pairwise_kl.len() == 6 && worst < 1e-9 {
                results.push(CheckResult::pass("loss/identical_branches_zero_kl", format!("worst |kl| {worst:.2e}")));
            } else {
                results.push(CheckResult::fail(
                    "loss/identical_branches_zero_kl",
                    format!("{} pairs, worst |kl| {worst:.2e}", b.pairwise_kl.len()),
                ));
            }
        }
        Err(e) => results.push(CheckResult::fail("loss/identical_branches_zero_kl", e.to_string())),
    }
    results
}

/// Brute-force nearest-cosine classification, written as an independent
/// scalar code path (no shared normalize/matmul kernels).
pub fn brute_force_predictions(features: &Tensor, weights: &ClassifierWeights) -> Vec<usize> {
    let d = features.shape()[1];
    let n = features.shape()[0];
    let k = weights.matrix.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let f = &features.data()[i * d..(i + 1) * d];
        let fn2 = f.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for j in 0..k {
            let wrow = &weights.matrix.data()[j * d..(j + 1) * d];
            let wn = wrow.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let mut dot = 0.0;
            for c in 0..d {
                dot += (f[c] / fn2) * (wrow[c] / wn);
            }
            if dot > best_cos {
                best_cos = dot;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Evaluator-vs-oracle comparison over `episodes_to_check` tasks on a frozen
/// randomly initialized network, plus a hand-rolled ci95 recomputation.
pub fn evaluator_oracle_suite(episodes_to_check: usize) -> Vec<CheckResult> {
    let cfg = BackboneConfig {
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
    };
    let net = match build_network(&cfg, 5, 2024) {
        Ok(n) => n,
        Err(e) => return vec![CheckResult::fail("evaluator/oracle", e.to_string())],
    };
    let spec = SynthSpec {
        num_classes: 8,
        images_per_class: 20,
        height: 16,
        width: 16,
        ..SynthSpec::desk_default()
    };
    let ds = generate_synthetic(&spec).expect("valid spec");
    let novel: Vec<u32> = (0..8).collect();
    let split = match SplitView::build(&ds, &novel) {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::fail("evaluator/oracle", e.to_string())],
    };
    let espec = EpisodeSpec { n_way: 5, k_shot: 1, queries_per_class: 15, num_tasks: episodes_to_check, seed: 77 };
    let mut disagreements = 0usize;
    let mut accuracies = Vec::with_capacity(episodes_to_check);
    for task in 0..episodes_to_check {
        let ep = match episodes::sample_episode(&split, &espec, episodes::task_seed(espec.seed, task)) {
            Ok(e) => e,
            Err(e) => return vec![CheckResult::fail("evaluator/oracle", e.to_string())],
        };
        let weights = episodes::novel_weights(&net, &ds, &ep, 0).expect("forward");
        let preds = episodes::classify_queries(&net, &ds, &ep, &weights, 0).expect("forward");
        let feats = net.forward_eval(&ds.batch_tensor(&ep.queries), 0).expect("forward");
        let oracle = brute_force_predictions(&feats, &weights);
        disagreements += preds.iter().zip(&oracle).filter(|(a, b)| a != b).count();
        accuracies.push(episodes::episode_accuracy(&ep, &preds));
    }
    let mut results = Vec::new();
    if disagreements == 0 {
        results.push(CheckResult::pass(
            "evaluator/oracle",
            format!("{episodes_to_check} episodes, 0 disagreements"),
        ));
    } else {
        results.push(CheckResult::fail(
            "evaluator/oracle",
            format!("{disagreements} disagreements over {episodes_to_check} episodes"),
        ));
    }
    // ci95 against a from-scratch recomputation.
    let result = episodes::EpisodeResult::from_accuracies(accuracies.clone());
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let sd = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let ci = 1.96 * sd / n.sqrt();
    if (result.ci95 - ci).abs() < 1e-9 && (result.mean - mean).abs() < 1e-12 {
        results.push(CheckResult::pass("evaluator/ci95", format!("ci95 {ci:.4}")));
    } else {
        results.push(CheckResult::fail(
            "evaluator/ci95",
            format!("got {} expected {ci}", result.ci95),
        ));
    }
    results
}

/// The full self-verification run used by the CLI. `fault` deliberately
/// breaks the leaky-relu backward pass to prove the gradient suite fails
/// when it should.
pub fn run_selfcheck(fault: Option<Fault>) -> Vec<CheckResult> {
    let mut results = Vec::new();
    results.extend(gradient_suite(3, fault));
    results.extend(self_mix_property_suite(200));
    results.extend(loss_reduction_suite());
    results.extend(evaluator_oracle_suite(5));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_selfcheck_passes() {
        let results = run_selfcheck(None);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn faulted_selfcheck_fails_in_the_gradient_suite() {
        let results = run_selfcheck(Some(Fault::LeakyReluBackwardSlopeSign));
        assert!(results.iter().any(|r| !r.passed && r.name.starts_with("grad/")));
    }
}
