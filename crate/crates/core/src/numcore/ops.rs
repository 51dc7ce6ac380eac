use crate::error::{Error, Result};

use super::Tensor;

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
///
/// Each output element accumulates its `k` products in increasing `k` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: [{m}, {k}] x [{k2}, {n}]"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aik) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt inner dims differ: [{m}, {k}] x [{n}, {k2}]^T"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn inner dims differ: [{k}, {m}]^T x [{k2}, {n}]"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax over a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), softmax_slice(x.data())).expect("shape preserved")
}

/// Row-wise softmax of a 2-D tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        data.extend(softmax_slice(row));
    }
    Tensor::new(x.shape(), data).expect("shape preserved")
}

/// Given `y = softmax(x)` and upstream `dy`, returns `dx`.
pub fn softmax_backward_slice(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(&yi, &gi)| yi * (gi - inner))
        .collect()
}

/// `sqrt(mean(x²) + eps)`; zero when both the row and `eps` are zero.
fn rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    (ms + eps).sqrt()
}

/// RMS normalization over the last dimension: `y = gain · x / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::contract(format!(
            "rms_norm eps must be >= 0, got {eps}"
        )));
    }
    let n = *x.shape().last().expect("tensor has at least one dim");
    if gain.numel() != n {
        return Err(Error::shape(format!(
            "rms_norm gain has {} values for last dim {n}",
            gain.numel()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let r = rms(row, eps);
        let inv = if r > 0.0 { 1.0 / r } else { 0.0 };
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = g * *v * inv;
        }
    }
    Ok(out)
}

/// Gradients of [`rms_norm`] with respect to `x` and `gain`.
pub fn rms_norm_backward(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Tensor) {
    let n = gain.numel();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = vec![0.0; n];
    for ((xr, dyr), dxr) in x
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.data_mut().chunks_mut(n))
    {
        let r = rms(xr, eps);
        if r == 0.0 {
            continue;
        }
        let inv = 1.0 / r;
        let mut proj = 0.0;
        for i in 0..n {
            proj += dyr[i] * gain.data()[i] * xr[i];
            dgain[i] += dyr[i] * xr[i] * inv;
        }
        let k = proj * inv * inv * inv / n as f64;
        for i in 0..n {
            dxr[i] = gain.data()[i] * dyr[i] * inv - k * xr[i];
        }
    }
    (dx, Tensor::from_vec(dgain))
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Cross-entropy of `logits` against `label`, with its gradient `softmax(logits) - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + total.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// `x · wᵀ + b` for `x: [t, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul_nt(x, w)?;
    match b {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// Backward of [`linear`]: returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dx = matmul(dy, w)?;
    let dw = matmul_tn(dy, x)?;
    let db = dy.sum_rows();
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_reference_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0], vec![7.0, 1e-3]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let z = matmul(&Tensor::zeros(&[2, 2]), &b.slice_rows(0, 2).unwrap()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_variants_agree_with_matmul() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::new(&[4, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let bt = b.transpose().unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = a.transpose().unwrap();
        let c = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul_tn(&a, &c).unwrap(), matmul(&at, &c).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_slice(&[0.7, 0.7, 0.7]);
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_slice(&[2.0, 1.0, 0.0, -1.0]);
        let expect = [0.6439, 0.2369, 0.0871, 0.0321];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let shifted = softmax_slice(&[2.0 + 40.0, 1.0 + 40.0, 40.0, -1.0 + 40.0]);
        for (a, b) in y.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_examples() {
        let g = Tensor::ones(&[2]);
        let y = rms_norm(&Tensor::from_vec(vec![3.0, 4.0]), &g, 0.0).unwrap();
        assert!((y.data()[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);

        let z = rms_norm(
            &Tensor::zeros(&[4]),
            &Tensor::from_vec(vec![2.0, -1.0, 3.0, 5.0]),
            1e-6,
        )
        .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let u = rms_norm(&Tensor::ones(&[4]), &Tensor::ones(&[4]), 1e-12).unwrap();
        assert!(u.data().iter().all(|&v| (v - 1.0).abs() < 1e-11));
    }

    #[test]
    fn rms_norm_rejects_negative_eps() {
        let g = Tensor::ones(&[2]);
        assert!(rms_norm(&Tensor::ones(&[2]), &g, -1.0).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu(-1.0) + 1.0 - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let (loss, grad) = cross_entropy(&[0.0; 8], 3);
        assert!((loss - 8f64.ln()).abs() < 1e-14);
        assert!((grad[3] - (1.0 / 8.0 - 1.0)).abs() < 1e-15);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
    }
}
