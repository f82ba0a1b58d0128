//! Value-level kernels. The differentiable graph calls these for its forward
//! pass, so a graph result and a direct kernel call agree bit-for-bit.

use super::Tensor;
use crate::error::{Result, TcdError};

/// Floor applied to `q` before taking its logarithm in KL divergence.
pub const KL_CLAMP: f64 = 1e-12;
/// Floor applied to vector norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TcdError::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(TcdError::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TcdError::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TcdError::Contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(TcdError::Numeric("softmax input is not finite".into()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |t: usize| base + t * inner;
            let max = (0..len).map(|t| xd[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (xd[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[idx(t)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row statistics cached by the layer-norm forward pass.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps < 0.0 {
        return Err(TcdError::Contract("layer_norm eps must be >= 0".into()));
    }
    let n = *x.shape().last().ok_or_else(|| TcdError::Contract("layer_norm on scalar".into()))?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(TcdError::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.numel() / n;
    let (xd, g, b) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![0.0; xd.len()];
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..n {
            let h = (row[c] - mean) * is;
            xhat[r * n + c] = h;
            out[r * n + c] = g[c] * h + b[c];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, LayerNormCache { xhat, inv_std }))
}

/// Layer normalization over the last dimension with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(t, _)| t)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Divides each row by `max(‖row‖, eps)`; returns the unclamped norms too.
pub(crate) fn row_normalize_cached(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let (rows, cols) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[r] = n;
        let d = n.max(eps);
        for c in 0..cols {
            out[r * cols + c] = row[c] / d;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
}

pub fn row_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    row_normalize_cached(x, eps).map(|(t, _)| t)
}

/// Cosine similarity with both norms floored at `eps`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TcdError::dim("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(dot)
}

/// Pairwise cosine similarities between the rows of `a` and the rows of `b`.
pub fn cross_relation(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_nt(&row_normalize(a, COSINE_EPS)?, &row_normalize(b, COSINE_EPS)?)
}

/// Pairwise cosine-similarity matrix of the rows of `reps`.
pub fn relation_matrix(reps: &Tensor) -> Result<Tensor> {
    let n = row_normalize(reps, COSINE_EPS)?;
    matmul_nt(&n, &n)
}

/// `Σ p ln(p / max(q, 1e-12))`, with `0·ln 0 = 0`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(TcdError::dim("kl_div", &[p.len()], &[q.len()]));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi * (pi.ln() - qi.max(KL_CLAMP).ln());
        }
    }
    Ok(total)
}

/// Log-probability of `target` under `softmax(logits)`.
pub fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

/// Mean negative log-likelihood of `targets` over rows where `mask` is set.
pub fn cross_entropy_masked(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (rows, v) = logits.dims2()?;
    if targets.len() != rows || mask.len() != rows {
        return Err(TcdError::dim("cross_entropy_masked", logits.shape(), &[targets.len(), mask.len()]));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        if mask[r] {
            if targets[r] >= v {
                return Err(TcdError::Vocabulary { id: targets[r], size: v });
            }
            total -= log_softmax_at(logits.row(r), targets[r]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TcdError::Empty("cross_entropy_masked: no masked positions".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let id = Tensor::identity(2);
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&id, &x).unwrap(), x);

        let z = Tensor::zeros(&[2, 3]);
        let any = m(&[&[1.0, -2.0, 3.0, 4.0], &[0.5, 6.0, 7.0, 8.0], &[9.0, 1.0, 2.0, 3.0]]);
        assert_eq!(matmul(&z, &any).unwrap(), Tensor::zeros(&[2, 4]));

        // [[1,2],[3,4]]·[[5],[6]] = [[1·5+2·6],[3·5+4·6]]
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&x, &b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TcdError::Dimension { .. }));
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[7.0, 8.0, 9.0], &[1.0, 0.0, -1.0]]);
        let bt = m(&[&[7.0, 1.0], &[8.0, 0.0], &[9.0, -1.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &bt).unwrap());
        let at = m(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]);
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&at, &b).unwrap());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        for c in [-7.0, 0.0, 3.5, 400.0] {
            let s = softmax(&Tensor::vector(vec![c, c + 3f64.ln()]).unwrap(), 0).unwrap();
            assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-300);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = m(&[&[0.0, 1.0], &[0.0, 1.0 + 3f64.ln()]]);
        let s = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(s.at(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(0, 1), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(1, 1), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::vector(vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(TcdError::Numeric(_))));
        let x = Tensor::vector(vec![f64::INFINITY, 0.0]).unwrap();
        assert!(matches!(softmax(&x, 0), Err(TcdError::Numeric(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let y = layer_norm(&m(&[&[1.0, 3.0]]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let b = Tensor::vector(vec![0.25, -2.0]).unwrap();
        let y = layer_norm(&m(&[&[5.0, 5.0]]), &one, &b, 1e-12).unwrap();
        assert_eq!(y.data(), b.data());

        let y = layer_norm(&m(&[&[1.0, 7.0], &[-3.0, 2.0]]), &zero, &b, 1e-12).unwrap();
        assert_eq!(y.data(), &[0.25, -2.0, 0.25, -2.0]);
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine_sim(&[0.3, -2.0], &[0.3, -2.0], COSINE_EPS).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0], COSINE_EPS).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0], COSINE_EPS).unwrap(),
            0.7071068,
            epsilon = 1e-7
        );
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0], COSINE_EPS).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0], COSINE_EPS).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_div(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
        // 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = 0.5 ln(4/3) = 0.143841036...
        assert_abs_diff_eq!(kl_div(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.1438410, epsilon = 1e-6);
        assert_abs_diff_eq!(kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(kl_div(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 7;
        let logits = Tensor::zeros(&[1, v]);
        let ce = cross_entropy_masked(&logits, &[3], &[true]).unwrap();
        assert_abs_diff_eq!(ce, (v as f64).ln(), epsilon = 1e-14);

        let mut sharp = Tensor::zeros(&[1, 3]);
        sharp.data_mut()[2] = 1e3;
        assert!(cross_entropy_masked(&sharp, &[2], &[true]).unwrap() < 1e-12);

        let logits = m(&[&[0.1, 2.0, -1.0], &[3.0, 0.0, 0.5], &[1.0, 1.0, 1.0]]);
        let ce = cross_entropy_masked(&logits, &[1, 2, 0], &[true, true, false]).unwrap();
        // per-position brute force: -ln(e^{l_t} / Σ e^{l})
        let pos = |r: &[f64], t: usize| -(r[t].exp() / r.iter().map(|x| x.exp()).sum::<f64>()).ln();
        let oracle = 0.5 * (pos(&[0.1, 2.0, -1.0], 1) + pos(&[3.0, 0.0, 0.5], 2));
        assert_abs_diff_eq!(ce, oracle, epsilon = 1e-14);

        assert!(matches!(
            cross_entropy_masked(&logits, &[0, 0, 0], &[false; 3]),
            Err(TcdError::Empty(_))
        ));
    }

    #[test]
    fn gelu_origin_is_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.8413447460685429, epsilon = 1e-15);
    }
}
