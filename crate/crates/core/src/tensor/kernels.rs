//! Plain-array numeric kernels shared by the autodiff graph and the
//! no-gradient eval path. Every kernel uses a fixed summation order so
//! repeated runs are bit-identical.

use super::{Tensor, TensorError, TensorResult};

pub(crate) fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// c[m,n] = a[m,k] * b[k,n], overwriting c.
pub(crate) fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,k] += a[m,n] * b[k,n]^T  (i.e. a * b-transposed), accumulating.
pub(crate) fn matmul_nt_acc(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + kk] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n], accumulating.
pub(crate) fn matmul_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Lowers one image [C,H,W] to a column matrix [C*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    col.fill(0.0);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into one image [C,H,W].
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_check(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> TensorResult<[usize; 8]> {
    let [n, c, h, w] = input.dims4("conv2d")?;
    let [f, kc, kh, kw] = kernel.dims4("conv2d")?;
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            message: "stride must be >= 1".into(),
        });
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            message: format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    Ok([n, c, h, w, f, kh, kw, 0])
}

/// Direct cross-correlation: input [N,C,H,W] * kernel [F,C,kh,kw] -> [N,F,H',W'].
pub fn conv2d_fwd(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> TensorResult<Tensor> {
    let [n, c, h, w, f, kh, kw, _] = conv_check(input, kernel, stride, pad)?;
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let mut col = vec![0.0; ckk * oh * ow];
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for img in 0..n {
        im2col(&input.data()[img * c * h * w..], c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        matmul_into(
            kernel.data(),
            f,
            ckk,
            &col,
            oh * ow,
            &mut out.data_mut()[img * f * oh * ow..(img + 1) * f * oh * ow],
        );
    }
    Ok(out)
}

/// Gradients of conv2d with respect to input and kernel.
pub fn conv2d_bwd(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
) -> TensorResult<(Tensor, Tensor)> {
    let [n, c, h, w, f, kh, kw, _] = conv_check(input, kernel, stride, pad)?;
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let mut col = vec![0.0; ckk * oh * ow];
    let mut dcol = vec![0.0; ckk * oh * ow];
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    for img in 0..n {
        let dout_img = &d_out.data()[img * f * oh * ow..(img + 1) * f * oh * ow];
        im2col(&input.data()[img * c * h * w..], c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        // dK += dOut * col^T
        matmul_nt_acc(dout_img, f, oh * ow, &col, ckk, d_kernel.data_mut());
        // dcol = K^T * dOut, then scatter back
        dcol.fill(0.0);
        matmul_tn_acc(kernel.data(), f, ckk, dout_img, oh * ow, &mut dcol);
        col2im_acc(
            &dcol,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut d_input.data_mut()[img * c * h * w..(img + 1) * c * h * w],
        );
    }
    Ok((d_input, d_kernel))
}

/// 2x2 max pooling with stride 2. Returns pooled values and the flat input
/// index of each maximum (first occurrence wins on ties).
pub fn max_pool2x2_fwd(input: &Tensor) -> TensorResult<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = input.dims4("max_pool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            message: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let x = input.data();
    let o = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                let oi = plane * oh * ow + oy * ow + ox;
                o[oi] = x[best];
                argmax[oi] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2x2_bwd(argmax: &[u32], input_shape: &[usize], d_out: &Tensor) -> Tensor {
    let mut d_in = Tensor::zeros(input_shape);
    let di = d_in.data_mut();
    for (g, &i) in d_out.data().iter().zip(argmax) {
        di[i as usize] += g;
    }
    d_in
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avg_pool_fwd(input: &Tensor) -> TensorResult<Tensor> {
    let [n, c, h, w] = input.dims4("global_average_pool")?;
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for plane in 0..n * c {
        let mut acc = 0.0;
        for &v in &input.data()[plane * h * w..(plane + 1) * h * w] {
            acc += v;
        }
        out.data_mut()[plane] = acc / hw;
    }
    Ok(out)
}

pub fn global_avg_pool_bwd(input_shape: &[usize], d_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let hw = (h * w) as f64;
    let mut d_in = Tensor::zeros(input_shape);
    for plane in 0..input_shape[0] * input_shape[1] {
        let g = d_out.data()[plane] / hw;
        for v in &mut d_in.data_mut()[plane * h * w..(plane + 1) * h * w] {
            *v = g;
        }
    }
    d_in
}

/// Per-channel mean and biased variance over the N,H,W axes of [N,C,H,W].
pub fn bn_batch_stats(input: &Tensor) -> TensorResult<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = input.dims4("batch_norm")?;
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let mut acc = 0.0;
            for &v in &input.data()[base..base + h * w] {
                acc += v;
            }
            mean[ch] += acc;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let mu = mean[ch];
            let mut acc = 0.0;
            for &v in &input.data()[base..base + h * w] {
                let d = v - mu;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for v in &mut var {
        *v /= m;
    }
    Ok((mean, var))
}

/// Normalize with given per-channel mean/var, then scale and shift.
/// Returns (output, xhat, inv_std).
pub fn bn_apply(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = match input.shape() {
        [a, b, c2, d] => [*a, *b, *c2, *d],
        _ => unreachable!("bn_apply expects 4-d input"),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = vec![0.0; input.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            for i in base..base + h * w {
                let xh = (input.data()[i] - mu) * is;
                xhat[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Batch-norm backward. In train mode the batch statistics depend on the
/// input, which couples the per-channel gradients; in eval mode the mapping
/// is a fixed affine transform.
pub fn bn_bwd(
    d_out: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    train: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = match d_out.shape() {
        [a, b, c2, d] => [*a, *b, *c2, *d],
        _ => unreachable!("bn_bwd expects 4-d input"),
    };
    let m = (n * h * w) as f64;
    let mut d_scale = vec![0.0; c];
    let mut d_shift = vec![0.0; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let mut ds = 0.0;
            let mut db = 0.0;
            for i in base..base + h * w {
                ds += d_out.data()[i] * xhat[i];
                db += d_out.data()[i];
            }
            d_scale[ch] += ds;
            d_shift[ch] += db;
        }
    }
    let mut d_in = Tensor::zeros(d_out.shape());
    if train {
        // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
        // with dxhat = dy*scale; the two sums reduce to scale*d_shift and
        // scale*d_scale per channel.
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let g = scale[ch];
                let is = inv_std[ch];
                let sum_dxhat = g * d_shift[ch];
                let sum_dxhat_xhat = g * d_scale[ch];
                for i in base..base + h * w {
                    let dxhat = d_out.data()[i] * g;
                    d_in.data_mut()[i] = is / m * (m * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                }
            }
        }
    } else {
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                let k = scale[ch] * inv_std[ch];
                for i in base..base + h * w {
                    d_in.data_mut()[i] = d_out.data()[i] * k;
                }
            }
        }
    }
    (d_in, d_scale, d_shift)
}

/// Row-wise softmax of a [N,K] tensor, with max-subtraction stabilization.
pub fn softmax_rows(input: &Tensor) -> TensorResult<Tensor> {
    let [n, k] = input.dims2("softmax")?;
    let mut out = Tensor::zeros(input.shape());
    for r in 0..n {
        let row = &input.data()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.data_mut()[r * k..(r + 1) * k];
        let mut z = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    Ok(out)
}

/// L2-normalize each last-axis row: v / max(||v||, eps). Returns (output, norms).
pub fn l2_normalize_rows(input: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, width) = input.rows();
    let mut out = Tensor::zeros(input.shape());
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &input.data()[r * width..(r + 1) * width];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        norms[r] = norm;
        let denom = norm.max(eps);
        for (d, &x) in out.data_mut()[r * width..(r + 1) * width].iter_mut().zip(row) {
            *d = x / denom;
        }
    }
    (out, norms)
}

/// logits [N,D] x weights [K,D] -> cosine scores scaled by tau, no graph.
pub fn cosine_logits_plain(features: &Tensor, weights: &Tensor, tau: f64, eps: f64) -> TensorResult<Tensor> {
    let [n, d] = features.dims2("cosine_logits")?;
    let [k, dw] = weights.dims2("cosine_logits")?;
    if d != dw {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_logits",
            left: features.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let (fbar, _) = l2_normalize_rows(features, eps);
    let (wbar, _) = l2_normalize_rows(weights, eps);
    let mut out = Tensor::zeros(&[n, k]);
    matmul_nt_acc(fbar.data(), n, d, wbar.data(), k, out.data_mut());
    for v in out.data_mut() {
        *v *= tau;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.5]).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d_fwd(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let x = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let y = conv2d_fwd(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv_matches_direct_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::new(&[1, 2, 5, 5], (0..50).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let k = Tensor::new(&[3, 2, 3, 3], (0..54).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let y = conv2d_fwd(&x, &k, stride, pad).unwrap();
            let oh = conv_out_dim(5, 3, stride, pad);
            let ow = oh;
            for f in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                            * k.data()[((f * 2 + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(f * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "stride {stride} pad {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_fwd(&x, &k, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pool_takes_first_max_on_ties() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (y, argmax) = max_pool2x2_fwd(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let v = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let (y, norms) = l2_normalize_rows(&v, 1e-12);
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        assert!((norms[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax_rows(&x).unwrap();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
