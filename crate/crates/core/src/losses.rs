//! Training objectives. Every loss returns its value together with the exact
//! gradient with respect to its direct input.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

/// Mean binary cross-entropy over all entries.
pub fn bce_reconstruction(pred: &Matrix, target: &Matrix) -> Result<LossValue> {
    pred.ensure_same_shape(target, "bce_reconstruction")?;
    if target.as_slice().iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("bce targets must lie in [0, 1]"));
    }
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push((p - t) / (p * (1.0 - p)) / n);
    }
    Ok(LossValue {
        value: value / n,
        grad: Matrix::new(pred.rows(), pred.cols(), grad)?,
    })
}

pub fn mse_reconstruction(pred: &Matrix, target: &Matrix) -> Result<LossValue> {
    pred.ensure_same_shape(target, "mse_reconstruction")?;
    let n = pred.len().max(1) as f64;
    let diff = pred.zip_map(target, "mse_reconstruction", |p, t| p - t)?;
    let value = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok(LossValue {
        value,
        grad: diff.map(|d| 2.0 * d / n),
    })
}

/// Rows scaled to unit length, plus the original norms.
fn normalize_rows(m: &Matrix, what: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::invalid(format!("{what} row {r} has zero norm")));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pairwise cosine similarities of already-normalized rows.
pub fn cosine_matrix(features: &Matrix) -> Result<Matrix> {
    let (unit, _) = normalize_rows(features, "features")?;
    unit.matmul_nt(&unit)
}

/// Mean over unordered pairs `i < j` of `(cos(a_i, a_j) - cos(b_i, b_j))²`,
/// with the gradient taken with respect to `codes`.
pub fn cosine_preservation(features: &Matrix, codes: &Matrix) -> Result<LossValue> {
    let target = cosine_matrix(features)?;
    cosine_preservation_with_target(&target, codes)
}

/// [`cosine_preservation`] with the feature cosines precomputed.
pub fn cosine_preservation_with_target(target: &Matrix, codes: &Matrix) -> Result<LossValue> {
    let m = codes.rows();
    if m < 2 {
        return Err(Error::invalid("cosine preservation needs at least two rows"));
    }
    if target.shape() != (m, m) {
        return Err(Error::Shape {
            op: "cosine_preservation",
            expected: (m, m),
            got: target.shape(),
        });
    }
    let (unit, norms) = normalize_rows(codes, "codes")?;
    let cos = unit.matmul_nt(&unit)?;
    let pairs = (m * (m - 1) / 2) as f64;

    // dL/dcos_ij for i < j, mirrored so that dL/dû = S·û.
    let mut value = 0.0;
    let mut s = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let d = target.get(i, j) - cos.get(i, j);
            value += d * d;
            let g = -2.0 * d / pairs;
            s.set(i, j, g);
            s.set(j, i, g);
        }
    }
    let mut grad = s.matmul(&unit)?;
    // Through the normalization: dL/db = (g - (g·û) û) / |b|.
    for (r, &norm) in norms.iter().enumerate().take(m) {
        let u = unit.row(r);
        let g = grad.row(r);
        let radial: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
        let updated: Vec<f64> = g.iter().zip(u).map(|(gv, uv)| (gv - radial * uv) / norm).collect();
        grad.row_mut(r).copy_from_slice(&updated);
    }
    Ok(LossValue {
        value: value / pairs,
        grad,
    })
}

/// `(1/K) Σ_k ((1/M) Σ_i X_ik)²`: squared per-bit means.
pub fn balance_regularizer(x: &Matrix) -> Result<LossValue> {
    let (m, k) = x.shape();
    if m == 0 || k == 0 {
        return Err(Error::invalid("balance regularizer needs a non-empty matrix"));
    }
    let means: Vec<f64> = x.column_sums().into_iter().map(|s| s / m as f64).collect();
    let value = means.iter().map(|v| v * v).sum::<f64>() / k as f64;
    let mut grad = Matrix::zeros(m, k);
    for r in 0..m {
        for (g, mean) in grad.row_mut(r).iter_mut().zip(&means) {
            *g = 2.0 * mean / (m as f64 * k as f64);
        }
    }
    Ok(LossValue { value, grad })
}

/// `primary + alpha · reg`, gradients weighted the same way.
pub fn combine(primary: &LossValue, reg: &LossValue, alpha: f64) -> Result<LossValue> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let mut grad = primary.grad.clone();
    grad.add_scaled(&reg.grad, alpha)?;
    Ok(LossValue {
        value: primary.value + alpha * reg.value,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, seeded_gaussian, RngStream};
    use proptest::prelude::*;

    fn assert_grad_matches<F>(analytic: &Matrix, f: F, x: &Matrix, tol: f64)
    where
        F: Fn(&Matrix) -> f64,
    {
        let numeric = finite_diff_grad(
            |flat| f(&Matrix::new(x.rows(), x.cols(), flat.to_vec()).unwrap()),
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.as_slice().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-7) < tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn bce_examples() {
        let half = Matrix::filled(2, 3, 0.5);
        let l = bce_reconstruction(&half, &half).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);

        let target = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let near = Matrix::from_rows(&[[1e-9, 1.0 - 1e-9]]).unwrap();
        assert!(bce_reconstruction(&near, &target).unwrap().value < 1e-8);

        assert!(bce_reconstruction(&half, &Matrix::filled(2, 3, 1.5)).is_err());
        assert!(bce_reconstruction(&half, &Matrix::filled(3, 2, 0.5)).is_err());
    }

    #[test]
    fn bce_gradient_check() {
        let mut rng = RngStream::new(21);
        let pred = Matrix::new(4, 5, (0..20).map(|_| rng.uniform_range(0.05, 0.95)).collect()).unwrap();
        let target = Matrix::new(4, 5, (0..20).map(|_| rng.uniform()).collect()).unwrap();
        let l = bce_reconstruction(&pred, &target).unwrap();
        assert_grad_matches(&l.grad, |p| bce_reconstruction(p, &target).unwrap().value, &pred, 1e-5);
    }

    #[test]
    fn mse_examples_and_gradient() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mse_reconstruction(&a, &a).unwrap().value, 0.0);
        assert_eq!(mse_reconstruction(&a.map(|v| v + 1.0), &a).unwrap().value, 1.0);
        assert!(mse_reconstruction(&a, &Matrix::zeros(1, 2)).is_err());

        let mut rng = RngStream::new(5);
        let p = seeded_gaussian(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let t = seeded_gaussian(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let l = mse_reconstruction(&p, &t).unwrap();
        assert_grad_matches(&l.grad, |x| mse_reconstruction(x, &t).unwrap().value, &p, 1e-4);
    }

    #[test]
    fn cosine_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [2.0, 1.0], [-1.0, 3.0]]).unwrap();
        let scaled = Matrix::from_rows(&[[3.0, 0.0], [0.2, 0.1], [-2.0, 6.0]]).unwrap();
        assert!(cosine_preservation(&a, &scaled).unwrap().value < 1e-24);

        let a = Matrix::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        assert!((cosine_preservation(&a, &b).unwrap().value - 4.0).abs() < 1e-12);

        let zero_row = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert!(cosine_preservation(&zero_row, &b).is_err());
        assert!(cosine_preservation(&b, &zero_row).is_err());
        assert!(cosine_preservation(&a.row_range(0, 1), &b.row_range(0, 1)).is_err());
    }

    #[test]
    fn cosine_gradient_check() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed);
            let a = seeded_gaussian(&mut rng, 5, 6, 0.0, 1.0).unwrap();
            let b = seeded_gaussian(&mut rng, 5, 4, 0.0, 1.0).unwrap();
            let l = cosine_preservation(&a, &b).unwrap();
            assert_grad_matches(&l.grad, |x| cosine_preservation(&a, x).unwrap().value, &b, 1e-4);
        }
    }

    #[test]
    fn balance_examples_and_gradient() {
        let balanced = Matrix::column_vector(&[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(balance_regularizer(&balanced).unwrap().value, 0.0);
        assert_eq!(balance_regularizer(&Matrix::filled(5, 1, 1.0)).unwrap().value, 1.0);

        let x = seeded_gaussian(&mut RngStream::new(3), 6, 4, 0.2, 1.0).unwrap();
        let l = balance_regularizer(&x).unwrap();
        assert_grad_matches(&l.grad, |m| balance_regularizer(m).unwrap().value, &x, 1e-4);
    }

    #[test]
    fn combine_examples() {
        let p = LossValue { value: 0.5, grad: Matrix::filled(1, 2, 1.0) };
        let r = LossValue { value: 0.5, grad: Matrix::filled(1, 2, 3.0) };
        assert_eq!(combine(&p, &r, 0.0).unwrap(), p);
        let c = combine(&p, &r, 1.0).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.grad.as_slice(), &[4.0, 4.0]);
        let alpha = 0.3;
        let diff = combine(&p, &r, 2.0 * alpha).unwrap().value - combine(&p, &r, alpha).unwrap().value;
        assert!((diff - alpha * r.value).abs() < 1e-15);
        assert!(combine(&p, &r, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn cosine_loss_ignores_row_scale(seed in any::<u64>(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
            let mut rng = RngStream::new(seed);
            let a = seeded_gaussian(&mut rng, 6, 5, 0.0, 1.0).unwrap();
            let b = seeded_gaussian(&mut rng, 6, 3, 0.0, 1.0).unwrap();
            let mut scaled = a.clone();
            for (r, s) in scales.iter().enumerate() {
                scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            let base = cosine_preservation(&a, &b).unwrap().value;
            let other = cosine_preservation(&scaled, &b).unwrap().value;
            prop_assert!((base - other).abs() < 1e-10);
        }

        #[test]
        fn balance_zero_iff_balanced(bits in prop::collection::vec(any::<bool>(), 2..40)) {
            let m = bits.len() & !1;
            let col: Vec<f64> = bits[..m].iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let positives = bits[..m].iter().filter(|&&b| b).count();
            let r = balance_regularizer(&Matrix::column_vector(&col)).unwrap().value;
            prop_assert_eq!(r == 0.0, positives * 2 == m);
        }
    }
}
