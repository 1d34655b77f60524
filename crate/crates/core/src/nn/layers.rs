//! Forward and backward kernels for the individual layer kinds.
//!
//! All kernels take batch-major tensors: images are `(N, C, H, W)`, dense
//! activations `(N, D)`.

use super::gemm::{gemm, Mat};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Valid-padding, stride-1 convolution. Returns the output and the im2col
/// matrix `(C*K*K) x (N*OH*OW)` for reuse in the backward pass.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::InvalidNetwork(format!("conv2d expects NCHW input, got {:?}", input.shape())));
    };
    let &[oc, wc, k, k2] = weight.shape() else {
        return Err(Error::InvalidNetwork("conv2d weight must be 4-d".into()));
    };
    if wc != c || k != k2 || k > h || k > w || bias.shape() != [oc] {
        return Err(Error::ShapeMismatch { expected: vec![oc, c, k, k], got: weight.shape().to_vec() });
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let plane = oh * ow;
    let cols = im2col(input.data(), n, c, h, w, k);
    let ckk = c * k * k;

    let mut out_mat = vec![0.0; oc * n * plane];
    gemm(Mat::new(weight.data(), oc, ckk), Mat::new(&cols, ckk, n * plane), 0.0, &mut out_mat);

    let mut out = vec![0.0; n * oc * plane];
    let b = bias.data();
    for o in 0..oc {
        for img in 0..n {
            let src = &out_mat[o * n * plane + img * plane..][..plane];
            let dst = &mut out[(img * oc + o) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b[o];
            }
        }
    }
    Ok((Tensor::new(vec![n, oc, oh, ow], out)?, cols))
}

/// Gradients of a convolution. `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    dout: &Tensor,
    cols: &[f64],
    weight: &Tensor,
    input_shape: &[usize],
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::InvalidNetwork("conv2d expects NCHW input".into()));
    };
    let &[oc, _, k, _] = weight.shape() else {
        return Err(Error::InvalidNetwork("conv2d weight must be 4-d".into()));
    };
    let (oh, ow) = (h - k + 1, w - k + 1);
    dout.expect_shape(&[n, oc, oh, ow])?;
    let plane = oh * ow;
    let ckk = c * k * k;

    // (N, OC, P) -> (OC, N*P)
    let mut dmat = vec![0.0; oc * n * plane];
    let mut db = vec![0.0; oc];
    for img in 0..n {
        for o in 0..oc {
            let src = &dout.data()[(img * oc + o) * plane..][..plane];
            dmat[o * n * plane + img * plane..][..plane].copy_from_slice(src);
            db[o] += src.iter().sum::<f64>();
        }
    }

    let mut dw = vec![0.0; oc * ckk];
    gemm(Mat::new(&dmat, oc, n * plane), Mat::new(cols, ckk, n * plane).t(), 0.0, &mut dw);

    let dx = if need_dx {
        let mut dcols = vec![0.0; ckk * n * plane];
        gemm(Mat::new(weight.data(), oc, ckk).t(), Mat::new(&dmat, oc, n * plane), 0.0, &mut dcols);
        Some(Tensor::new(input_shape.to_vec(), col2im(&dcols, n, c, h, w, k))?)
    } else {
        None
    };
    Ok((dx, Tensor::new(weight.shape().to_vec(), dw)?, Tensor::new(vec![oc], db)?))
}

fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let ncols = n * oh * ow;
    let mut cols = vec![0.0; c * k * k * ncols];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst_row = &mut cols[row * ncols..][..ncols];
                for img in 0..n {
                    let src = &x[(img * c + ch) * h * w..][..h * w];
                    for i in 0..oh {
                        let s = &src[(i + ki) * w + kj..][..ow];
                        dst_row[(img * oh + i) * ow..][..ow].copy_from_slice(s);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let ncols = n * oh * ow;
    let mut x = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src_row = &cols[row * ncols..][..ncols];
                for img in 0..n {
                    let dst = &mut x[(img * c + ch) * h * w..][..h * w];
                    for i in 0..oh {
                        let d = &mut dst[(i + ki) * w + kj..][..ow];
                        for (dv, sv) in d.iter_mut().zip(&src_row[(img * oh + i) * ow..][..ow]) {
                            *dv += sv;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order. Returns the output and the flat argmax of every window.
pub fn maxpool_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::InvalidNetwork("maxpool expects NCHW input".into()));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidNetwork(format!("maxpool needs even spatial extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool_backward(dout: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor> {
    if dout.len() != argmax.len() {
        return Err(Error::ShapeMismatch { expected: vec![argmax.len()], got: dout.shape().to_vec() });
    }
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (&g, &a) in dout.data().iter().zip(argmax) {
        dx[a as usize] += g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// `out = x W^T + b`, with `x` flattened to `(N, D)` and `W` of shape `(O, D)`.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.shape()[0];
    let d = input.len() / n;
    let &[o, wd] = weight.shape() else {
        return Err(Error::InvalidNetwork("dense weight must be 2-d".into()));
    };
    if wd != d || bias.shape() != [o] {
        return Err(Error::ShapeMismatch { expected: vec![o, d], got: weight.shape().to_vec() });
    }
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(Mat::new(input.data(), n, d), Mat::new(weight.data(), o, d).t(), 1.0, &mut out);
    Tensor::new(vec![n, o], out)
}

/// Returns `(dx, dW, db)`; `dx` has the (unflattened) input shape.
pub fn dense_backward(
    dout: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let n = input.shape()[0];
    let d = input.len() / n;
    let o = weight.shape()[0];
    dout.expect_shape(&[n, o])?;

    let mut dw = vec![0.0; o * d];
    gemm(Mat::new(dout.data(), n, o).t(), Mat::new(input.data(), n, d), 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for row in dout.data().chunks_exact(o) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let dx = if need_dx {
        let mut dx = vec![0.0; n * d];
        gemm(Mat::new(dout.data(), n, o), Mat::new(weight.data(), o, d), 0.0, &mut dx);
        Some(Tensor::new(input.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(vec![o, d], dw)?, Tensor::new(vec![o], db)?))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(dout: &Tensor, input: &Tensor) -> Result<Tensor> {
    dout.expect_shape(input.shape())?;
    let data = dout
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Softmax cross-entropy averaged over the batch. Returns the loss and the
/// gradient with respect to the logits, `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, classes] = logits.shape() else {
        return Err(Error::InvalidNetwork("logits must be (N, classes)".into()));
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n], got: vec![labels.len()] });
    }
    let mut grad = Vec::with_capacity(n * classes);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::new(vec![n, classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones() {
        let x = Tensor::filled(&[1, 1, 8, 8], 1.0);
        let w = Tensor::filled(&[1, 1, 5, 5], 1.0);
        let b = Tensor::zeros(&[1]);
        let (out, _) = conv2d_forward(&x, &w, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 25.0));
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (n, c, h, w, oc, k) = (2, 3, 6, 7, 4, 3);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let wt: Vec<f64> = (0..oc * c * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b = vec![0.5, -0.25, 0.0, 1.0];
        let xt = Tensor::new(vec![n, c, h, w], x.clone()).unwrap();
        let wtt = Tensor::new(vec![oc, c, k, k], wt.clone()).unwrap();
        let (out, _) = conv2d_forward(&xt, &wtt, &Tensor::from_slice(&b)).unwrap();
        let (oh, ow) = (h - k + 1, w - k + 1);
        for img in 0..n {
            for o in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for ch in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    acc += x[((img * c + ch) * h + i + ki) * w + j + kj]
                                        * wt[((o * c + ch) * k + ki) * k + kj];
                                }
                            }
                        }
                        let got = out.data()[((img * oc + o) * oh + i) * ow + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn relu_example() {
        let out = relu_forward(&Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]).unwrap();
        let (out, arg) = maxpool_forward(&x).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
        assert!(maxpool_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn uniform_logits_loss_is_ln_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn xent_gradient_two_classes() {
        let (_, g) = softmax_xent(&Tensor::zeros(&[1, 2]), &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
        let (_, g) = softmax_xent(&Tensor::zeros(&[2, 2]), &[0, 0]).unwrap();
        assert_eq!(g.data(), &[-0.25, 0.25, -0.25, 0.25]);
    }

    #[test]
    fn xent_rejects_bad_labels() {
        assert!(matches!(
            softmax_xent(&Tensor::zeros(&[1, 10]), &[10]),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }
}
