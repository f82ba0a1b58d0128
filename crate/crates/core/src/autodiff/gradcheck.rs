use super::{Graph, NodeId, Tensor};
use crate::error::{Result, TcdError};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences, over every coordinate of `x`.
///
/// The per-coordinate error is `|a − d| / max(|a| + |d|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<F>(f: F, x: &Tensor, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_floored(f, x, coords, 1e-8)
}

/// [`grad_check_coords`] with `|a − d| / max(|a| + |d|, floor)`. A floor near
/// the finite-difference noise level keeps directions with an exactly zero
/// gradient (e.g. the key bias under softmax) from reading as large errors.
pub fn grad_check_floored<F>(f: F, x: &Tensor, coords: &[usize], floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |v: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf(v.clone(), false);
        let out = f(&mut g, leaf)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    scalar(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for &c in coords {
        if c >= x.numel() {
            return Err(TcdError::Contract(format!("grad_check coordinate {c} out of range")));
        }
        let mut plus = x.clone();
        plus.data_mut()[c] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[c] -= FD_STEP;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
        let a = analytic.data()[c];
        worst = worst.max((a - fd).abs() / (a.abs() + fd.abs()).max(floor));
    }
    Ok(worst)
}

fn scalar(g: &Graph, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if !v.is_scalar() {
        return Err(TcdError::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok(v.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = random(&[4, 3], 1);
        let err = grad_check(|g, x| { let s = g.square(x); Ok(g.sum(s)) }, &x).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_then_sum() {
        let x = random(&[3, 5], 2);
        let gamma = random(&[5], 3);
        let beta = random(&[5], 4);
        let w = random(&[3, 5], 5);
        let err = grad_check(
            |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let wn = g.constant(w.clone());
                let y = g.layer_norm(x, ga, be, 1e-12)?;
                // weight the rows so the sum is not identically zero in x
                let z = g.mul(y, wn)?;
                Ok(g.sum(z))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn check_all(name: &str, shape: &[usize], f: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) {
        for seed in 0..3 {
            let x = random(shape, 100 + seed);
            let err = grad_check(&f, &x).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }

    #[test]
    fn every_primitive_passes() {
        let w = random(&[3, 4], 7);
        let t = random(&[2, 4], 8);
        let row = random(&[4], 9);
        let col = random(&[2, 1], 10);
        check_all("matmul", &[2, 3], |g, x| { let w = g.constant(w.clone()); let y = g.matmul(x, w)?; g.mse_const(y, &t) });
        check_all("matmul_nt", &[2, 4], |g, x| { let w = g.constant(w.clone()); let y = g.matmul_nt(x, w)?; let y = g.square(y); Ok(g.sum(y)) });
        check_all("add_row", &[4], |g, r| { let x = g.constant(t.clone()); let y = g.add_row(x, r)?; let y = g.square(y); Ok(g.mean(y)) });
        check_all("mul_col", &[2, 4], |g, x| { let c = g.constant(col.clone()); let y = g.mul_col(x, c)?; g.mse_const(y, &t) });
        check_all("mul_col(col)", &[2, 1], |g, c| { let x = g.constant(t.clone()); let y = g.mul_col(x, c)?; let y = g.square(y); Ok(g.sum(y)) });
        check_all("softmax0", &[2, 4], |g, x| { let y = g.softmax(x, 0)?; g.mse_const(y, &t) });
        check_all("softmax1", &[2, 4], |g, x| { let y = g.softmax(x, 1)?; g.mse_const(y, &t) });
        check_all("gelu", &[2, 4], |g, x| { let y = g.gelu(x); g.mse_const(y, &t) });
        check_all("layer_norm gamma", &[4], |g, gm| { let x = g.constant(t.clone()); let b = g.constant(row.clone()); let y = g.layer_norm(x, gm, b, 1e-12)?; g.mse_const(y, &t.scaled(0.5)) });
        check_all("row_normalize", &[2, 4], |g, x| { let y = g.row_normalize(x, 1e-8)?; g.mse_const(y, &t) });
        check_all("relation", &[3, 4], |g, x| { let s = g.relation_matrix(x)?; g.mse_const(s, &Tensor::identity(3)) });
        check_all("gather+scatter", &[3, 4], |g, x| {
            let a = g.gather_rows(x, &[2, 0])?;
            let b = g.gather_rows(x, &[1])?;
            let y = g.scatter_rows(&[(a, vec![0, 2]), (b, vec![1])], 3)?;
            let y = g.square(y);
            Ok(g.sum(y))
        });
        check_all("pick", &[2, 4], |g, x| { let p = g.pick(x, &[(0, 1), (1, 3)])?; let p = g.square(p); Ok(g.sum(p)) });
        check_all("slices+concat", &[4, 4], |g, x| {
            let a = g.slice_cols(x, 0, 2)?;
            let b = g.slice_cols(x, 2, 4)?;
            let c = g.concat_cols(&[b, a])?;
            let r1 = g.slice_rows(c, 0, 1)?;
            let r2 = g.slice_rows(c, 2, 4)?;
            let d = g.concat_rows(&[r2, r1])?;
            g.mse_const(d, &random(&[3, 4], 11))
        });
        check_all("kl", &[3, 2], |g, x| {
            let p = g.softmax(x, 1)?;
            let q = g.mean_rows(p)?;
            g.kl_div(&[0.5, 0.5], q)
        });
        check_all("cross_entropy", &[3, 5], |g, x| g.cross_entropy_masked(x, &[1, 4, 0], &[true, false, true]));
        check_all("weighted_sum", &[2, 4], |g, x| {
            let a = g.mse_const(x, &t)?;
            let s = g.square(x);
            let b = g.mean(s);
            g.weighted_sum(&[(a, 2.0), (b, 0.5)])
        });
    }
}
