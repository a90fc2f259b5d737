//! Computation graph: forward ops append nodes, `backward` replays the tape
//! in reverse creation order (which is a topological order, since every op
//! only references earlier nodes).

use super::kernels;
use super::{ParamId, ParamSet, Tensor, TensorError, TensorResult};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate defect injectable into the backward pass, used by the
/// self-check command to prove the gradient suite catches real faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip the sign of the leaky-relu negative-side slope in backward only.
    LeakyReluBackwardSlopeSign,
}

enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    LeakyRelu { input: Var, slope: f64 },
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    BatchNorm { input: Var, scale: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    L2NormalizeRows { input: Var, eps: f64, norms: Vec<f64> },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Tensor },
    KlDivergence { p: Var, q: Var, detach_q: bool },
    RowNormSum { input: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-use tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Clamp floor applied inside KL logarithms so zero probabilities stay finite.
pub const KL_EPS: f64 = 1e-12;

const LABEL_SUM_TOL: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf bound to a registered parameter; backward accumulates into it.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.elementwise_pair("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.elementwise_pair("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.elementwise_pair("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.value(a).shape(), data).expect("same shape");
        self.push(t, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let [m, k] = self.value(a).dims2("matmul")?;
        let [kb, n] = self.value(b).dims2("matmul")?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_into(self.value(a).data(), m, k, self.value(b).data(), n, out.data_mut());
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let [m, n] = self.value(a).dims2("transpose")?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[j * m + i] = self.value(a).data()[i * n + j];
            }
        }
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> TensorResult<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(TensorError::InvalidArgument {
                op: "reshape",
                message: format!("cannot reshape {:?} to {:?}", self.value(a).shape(), shape),
            });
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TensorResult<Var> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                message: "needs at least one input".into(),
            });
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                message: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&shape);
        let mut offset = 0;
        for &v in inputs {
            let len_axis = self.value(v).shape()[axis];
            for o in 0..outer {
                let src = &self.value(v).data()[o * len_axis * inner..(o + 1) * len_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out.data_mut()[dst_start..dst_start + len_axis * inner].copy_from_slice(src);
            }
            offset += len_axis;
        }
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total / n), Op::Mean(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(self.value(a).shape(), data).expect("same shape");
        self.push(t, Op::LeakyRelu { input: a, slope })
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> TensorResult<Var> {
        let out = kernels::conv2d_fwd(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, padding }))
    }

    pub fn max_pool2d(&mut self, input: Var) -> TensorResult<Var> {
        let (out, argmax) = kernels::max_pool2x2_fwd(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> TensorResult<Var> {
        let out = kernels::global_avg_pool_fwd(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    /// Batch normalization over [N,C,H,W]. Train mode normalizes by batch
    /// statistics and updates `running_*` in place with
    /// `run = momentum*run + (1-momentum)*batch`; eval mode normalizes by the
    /// running statistics and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> TensorResult<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm")?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: self.value(input).shape().to_vec(),
                right: self.value(scale).shape().to_vec(),
            });
        }
        let m = n * h * w;
        let (out, xhat, inv_std) = if train {
            if m < 2 {
                return Err(TensorError::DegenerateBatch { elements: m });
            }
            let (mean, var) = kernels::bn_batch_stats(self.value(input))?;
            // Unbiased variance feeds the running estimate.
            let unbias = m as f64 / (m as f64 - 1.0);
            for ch in 0..c {
                running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mean[ch];
                running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * var[ch] * unbias;
            }
            kernels::bn_apply(
                self.value(input),
                &mean,
                &var,
                self.value(scale).data(),
                self.value(shift).data(),
                eps,
            )
        } else {
            kernels::bn_apply(
                self.value(input),
                running_mean,
                running_var,
                self.value(scale).data(),
                self.value(shift).data(),
                eps,
            )
        };
        Ok(self.push(out, Op::BatchNorm { input, scale, shift, xhat, inv_std, train }))
    }

    /// L2-normalize every last-axis row: v / max(||v||, eps).
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Var {
        let (out, norms) = kernels::l2_normalize_rows(self.value(input), eps);
        self.push(out, Op::L2NormalizeRows { input, eps, norms })
    }

    /// Row-wise softmax of [N,K].
    pub fn softmax(&mut self, input: Var) -> TensorResult<Var> {
        let out = kernels::softmax_rows(self.value(input))?;
        Ok(self.push(out, Op::Softmax(input)))
    }

    /// Mean over rows of -sum_k y_k log softmax(logits)_k, log-sum-exp
    /// stabilized. `labels` rows are fixed distributions (one-hot, smoothed,
    /// or mixed) and must each sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> TensorResult<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.shape() != self.value(logits).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: self.value(logits).shape().to_vec(),
                right: labels.shape().to_vec(),
            });
        }
        validate_rows_sum_to_one("softmax_cross_entropy", labels)?;
        let probs = kernels::softmax_rows(self.value(logits))?;
        let mut total = 0.0;
        for r in 0..n {
            let row = &self.value(logits).data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            let dot: f64 = labels.data()[r * k..(r + 1) * k]
                .iter()
                .zip(row)
                .map(|(y, z)| y * z)
                .sum();
            total += lse - dot;
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, probs: probs.data().to_vec(), labels: labels.clone() },
        ))
    }

    /// Mean over rows of sum_k p_k log(p_k/q_k). Both arguments must be
    /// probability rows; gradients flow into both unless `detach_q`.
    pub fn kl_divergence(&mut self, p: Var, q: Var, detach_q: bool) -> TensorResult<Var> {
        self.elementwise_pair("kl_divergence", p, q)?;
        let [n, k] = self.value(p).dims2("kl_divergence")?;
        validate_rows_sum_to_one("kl_divergence", self.value(p))?;
        validate_rows_sum_to_one("kl_divergence", self.value(q))?;
        let mut total = 0.0;
        for r in 0..n {
            for i in r * k..(r + 1) * k {
                let pv = self.value(p).data()[i];
                let qv = self.value(q).data()[i];
                total += pv * (pv.max(KL_EPS).ln() - qv.max(KL_EPS).ln());
            }
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(value, Op::KlDivergence { p, q, detach_q }))
    }

    /// Sum over last-axis rows of the unsquared Euclidean norm of each row.
    pub fn row_norm_sum(&mut self, input: Var) -> Var {
        let (rows, width) = self.value(input).rows();
        let mut norms = vec![0.0; rows];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &self.value(input).data()[r * width..(r + 1) * width];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[r] = norm;
            total += norm;
        }
        self.push(Tensor::scalar(total), Op::RowNormSum { input, norms })
    }

    /// Reverse-mode sweep from a scalar loss. Every parameter reachable from
    /// `loss` gets its gradient accumulated into `params` (repeated calls
    /// without an optimizer step keep accumulating).
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> TensorResult<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, params);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamSet,
    ) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; contribution.len()]);
            for (dst, src) in slot.iter_mut().zip(contribution) {
                *dst += src;
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                acc(grads, *a, &da);
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.value(*a).dims2("matmul").expect("validated");
                let n = self.value(*b).shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, m, n, self.value(*b).data(), k, &mut da);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn_acc(self.value(*a).data(), m, k, g, n, &mut db);
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Transpose(a) => {
                let [m, n] = self.value(*a).dims2("transpose").expect("validated");
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                acc(grads, *a, &da);
            }
            Op::Reshape(a) => acc(grads, *a, g),
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len_axis = self.value(v).shape()[*axis];
                    let mut dv = vec![0.0; self.value(v).len()];
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        dv[o * len_axis * inner..(o + 1) * len_axis * inner]
                            .copy_from_slice(&g[src_start..src_start + len_axis * inner]);
                    }
                    acc(grads, v, &dv);
                    offset += len_axis;
                }
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                acc(grads, *a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let da = vec![g[0] / n; self.value(*a).len()];
                acc(grads, *a, &da);
            }
            Op::LeakyRelu { input, slope } => {
                let mut slope = *slope;
                if self.fault == Some(Fault::LeakyReluBackwardSlopeSign) {
                    slope = -slope;
                }
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*input).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                acc(grads, *input, &da);
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let d_out = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let (din, dker) = kernels::conv2d_bwd(
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    *padding,
                    &d_out,
                )
                .expect("validated in forward");
                acc(grads, *input, din.data());
                acc(grads, *kernel, dker.data());
            }
            Op::MaxPool2d { input, argmax } => {
                let d_out = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let din = kernels::max_pool2x2_bwd(argmax, self.value(*input).shape(), &d_out);
                acc(grads, *input, din.data());
            }
            Op::GlobalAvgPool(a) => {
                let d_out = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let din = kernels::global_avg_pool_bwd(self.value(*a).shape(), &d_out);
                acc(grads, *a, din.data());
            }
            Op::BatchNorm { input, scale, shift, xhat, inv_std, train } => {
                let d_out = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let (din, dscale, dshift) =
                    kernels::bn_bwd(&d_out, xhat, inv_std, self.value(*scale).data(), *train);
                acc(grads, *input, din.data());
                acc(grads, *scale, &dscale);
                acc(grads, *shift, &dshift);
            }
            Op::L2NormalizeRows { input, eps, norms } => {
                let (rows, width) = self.value(*input).rows();
                let y = node.value.data();
                let mut da = vec![0.0; rows * width];
                for r in 0..rows {
                    let gr = &g[r * width..(r + 1) * width];
                    let yr = &y[r * width..(r + 1) * width];
                    if norms[r] >= *eps {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..width {
                            da[r * width + i] = (gr[i] - yr[i] * dot) / norms[r];
                        }
                    } else {
                        for i in 0..width {
                            da[r * width + i] = gr[i] / eps;
                        }
                    }
                }
                acc(grads, *input, &da);
            }
            Op::Softmax(a) => {
                let [n, k] = node.value.dims2("softmax").expect("validated");
                let y = node.value.data();
                let mut da = vec![0.0; n * k];
                for r in 0..n {
                    let gr = &g[r * k..(r + 1) * k];
                    let yr = &y[r * k..(r + 1) * k];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        da[r * k + i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(grads, *a, &da);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let [n, k] = self.value(*logits).dims2("ce").expect("validated");
                let gscale = g[0] / n as f64;
                let mut da = vec![0.0; n * k];
                for i in 0..n * k {
                    da[i] = (probs[i] - labels.data()[i]) * gscale;
                }
                acc(grads, *logits, &da);
            }
            Op::KlDivergence { p, q, detach_q } => {
                let [n, k] = self.value(*p).dims2("kl").expect("validated");
                let gscale = g[0] / n as f64;
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                let mut dp = vec![0.0; n * k];
                let mut dq = vec![0.0; n * k];
                for i in 0..n * k {
                    let pc = pv[i].max(KL_EPS);
                    let qc = qv[i].max(KL_EPS);
                    let logratio = pc.ln() - qc.ln();
                    dp[i] = gscale * (logratio + if pv[i] >= KL_EPS { 1.0 } else { 0.0 });
                    if qv[i] >= KL_EPS {
                        dq[i] = -gscale * pv[i] / qc;
                    }
                }
                acc(grads, *p, &dp);
                if !detach_q {
                    acc(grads, *q, &dq);
                }
            }
            Op::RowNormSum { input, norms } => {
                let (rows, width) = self.value(*input).rows();
                let x = self.value(*input).data();
                let mut da = vec![0.0; rows * width];
                for r in 0..rows {
                    // Subgradient 0 at the origin.
                    if norms[r] > 0.0 {
                        for i in 0..width {
                            da[r * width + i] = g[0] * x[r * width + i] / norms[r];
                        }
                    }
                }
                acc(grads, *input, &da);
            }
        }
    }
}

fn validate_rows_sum_to_one(op: &'static str, t: &Tensor) -> TensorResult<()> {
    let (rows, width) = t.rows();
    for r in 0..rows {
        let s: f64 = t.data()[r * width..(r + 1) * width].iter().sum();
        if (s - 1.0).abs() > LABEL_SUM_TOL {
            return Err(TensorError::InvalidArgument {
                op,
                message: format!("row {r} sums to {s}, expected 1"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_grad(params: &ParamSet, id: ParamId) -> Vec<f64> {
        params.grad(id).unwrap().to_vec()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap(), false);
        let mut g = Graph::new();
        let wv = g.param(&params, w);
        let loss = g.sum(wv);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(param_grad(&params, w), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_squared_norm_is_two_w() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap(), false);
        let mut g = Graph::new();
        let wv = g.param(&params, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut params).unwrap();
        assert_eq!(param_grad(&params, w), vec![1.0, -3.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::zeros(&[2]), false);
        let mut g = Graph::new();
        let wv = g.param(&params, w);
        let err = g.backward(wv, &mut params).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2], vec![2.0, -2.0]).unwrap());
        let y = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(y).data(), &[2.0, -0.2]);
    }

    #[test]
    fn cross_entropy_trivial_cases() {
        let mut g = Graph::new();
        // Confident correct logits: loss ~ 0.
        let z = g.input(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let loss = g.softmax_cross_entropy(z, &y).unwrap();
        assert!(g.value(loss).item().abs() < 1e-9);
        // Uniform logits: loss = ln K exactly.
        let k = 7;
        let z = g.input(Tensor::filled(&[1, k], 0.42));
        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let y = Tensor::new(&[1, k], onehot).unwrap();
        let loss = g.softmax_cross_entropy(z, &y).unwrap();
        assert!((g.value(loss).item() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label_rows() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[1, 3]));
        let y = Tensor::new(&[1, 3], vec![0.5, 0.2, 0.2]).unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(z, &y),
            Err(TensorError::InvalidArgument { .. })
        ));
    }

    #[test]
    fn kl_divergence_identity_and_ln2() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap());
        let kl = g.kl_divergence(p, p, false).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);

        let p = g.input(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let q = g.input(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let kl = g.kl_divergence(p, q, false).unwrap();
        assert!((g.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_detach_q_blocks_gradient() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::new(&[1, 2], vec![0.2, -0.1]).unwrap(), false);
        let b = params.add("b", Tensor::new(&[1, 2], vec![0.4, 0.3]).unwrap(), false);
        let mut g = Graph::new();
        let av = g.param(&params, a);
        let bv = g.param(&params, b);
        let p = g.softmax(av).unwrap();
        let q = g.softmax(bv).unwrap();
        let kl = g.kl_divergence(p, q, true).unwrap();
        g.backward(kl, &mut params).unwrap();
        assert!(params.grad(a).is_ok());
        assert!(params.grad(b).is_err());
    }

    #[test]
    fn l2_normalize_scale_invariance() {
        for alpha in [0.5, 2.0, 10.0] {
            let v = vec![0.3, -1.2, 0.44, 2.0];
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let mut g = Graph::new();
            let a = g.input(Tensor::new(&[4], v).unwrap());
            let b = g.input(Tensor::new(&[4], scaled).unwrap());
            let na = g.l2_normalize(a, 1e-12);
            let nb = g.l2_normalize(b, 1e-12);
            for (x, y) in g.value(na).data().iter().zip(g.value(nb).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_constant_input_is_zeroed() {
        let mut params = ParamSet::new();
        let scale = params.add("s", Tensor::filled(&[3], 1.0), true);
        let shift = params.add("b", Tensor::zeros(&[3]), true);
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 3, 2, 2], 5.0));
        let sv = g.param(&params, scale);
        let bv = g.param(&params, shift);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = g
            .batch_norm(x, sv, bv, &mut rm, &mut rv, true, 0.9, 1e-5)
            .unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
        // Running stats moved toward the batch (mean 5, var 0).
        assert!((rm[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_normalizes_random_batch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8 * 3 * 4 * 4).map(|_| rng.random::<f64>() * 4.0 - 1.0).collect();
        let mut params = ParamSet::new();
        let scale = params.add("s", Tensor::filled(&[3], 1.0), true);
        let shift = params.add("b", Tensor::zeros(&[3]), true);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[8, 3, 4, 4], data).unwrap());
        let sv = g.param(&params, scale);
        let bv = g.param(&params, shift);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = g
            .batch_norm(x, sv, bv, &mut rm, &mut rv, true, 0.9, 1e-5)
            .unwrap();
        let m = 8 * 4 * 4;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for img in 0..8 {
                for i in 0..16 {
                    mean += g.value(y).data()[(img * 3 + ch) * 16 + i];
                }
            }
            mean /= m as f64;
            for img in 0..8 {
                for i in 0..16 {
                    let d = g.value(y).data()[(img * 3 + ch) * 16 + i] - mean;
                    var += d * d;
                }
            }
            var /= m as f64;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_degenerate_train_batch() {
        let mut params = ParamSet::new();
        let scale = params.add("s", Tensor::filled(&[1], 1.0), true);
        let shift = params.add("b", Tensor::zeros(&[1]), true);
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1, 1, 1, 1], 5.0));
        let sv = g.param(&params, scale);
        let bv = g.param(&params, shift);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let err = g
            .batch_norm(x, sv, bv, &mut rm, &mut rv, true, 0.9, 1e-5)
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateBatch { .. }));
    }

    #[test]
    fn identical_graphs_give_bit_identical_gradients() {
        let run = || {
            let mut params = ParamSet::new();
            let w = params.add("w", Tensor::new(&[2, 2], vec![0.3, -0.7, 1.1, 0.9]).unwrap(), false);
            let mut g = Graph::new();
            let wv = g.param(&params, w);
            let x = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let y = g.matmul(wv, x).unwrap();
            let a = g.leaky_relu(y, 0.1);
            let loss = g.mean(a);
            g.backward(loss, &mut params).unwrap();
            params.grad(w).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }
}
