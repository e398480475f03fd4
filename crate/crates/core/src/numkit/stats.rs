use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Result, RevarError};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Result of an ordinary least-squares fit with intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub intercept: f64,
    /// One coefficient per feature column.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

/// Least squares of `targets` on `[1 | features]`.
///
/// Solved through a twice-orthogonalised Gram-Schmidt QR; a column whose
/// component orthogonal to the preceding ones is below `1e-10` of its norm
/// is reported as singular (feature index, not counting the intercept).
/// Constant targets give `r_squared = 0`.
pub fn ols_fit(features: &Matrix, targets: &[f64]) -> Result<OlsFit> {
    let n = features.rows();
    let p = features.cols();
    if targets.len() != n {
        return Err(RevarError::Dimension {
            context: "ols_fit targets",
            expected: n,
            got: targets.len(),
        });
    }
    if n == 0 {
        return Err(RevarError::param("ols_fit needs at least one row"));
    }
    if n < p + 1 {
        // more unknowns than equations: the first column past n is dependent
        return Err(RevarError::Singular { column: n.saturating_sub(1) });
    }

    let k = p + 1;
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut r = vec![vec![0.0; k]; k];
    for j in 0..k {
        let mut v: Vec<f64> = if j == 0 {
            vec![1.0; n]
        } else {
            features.col(j - 1)
        };
        let norm0 = dot(&v, &v).sqrt();
        if !norm0.is_finite() {
            return Err(RevarError::param(format!(
                "ols_fit feature column {} is not finite",
                j - 1
            )));
        }
        for _pass in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let c = dot(qi, &v);
                r[i][j] += c;
                for (vv, qq) in v.iter_mut().zip(qi) {
                    *vv -= c * qq;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(RevarError::Singular {
                column: j.saturating_sub(1),
            });
        }
        r[j][j] = norm;
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }

    let qty: Vec<f64> = q.iter().map(|qi| dot(qi, targets)).collect();
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in i + 1..k {
            s -= r[i][j] * beta[j];
        }
        beta[i] = s / r[i][i];
    }

    let residuals: Vec<f64> = (0..n)
        .map(|row| {
            let fitted = beta[0] + dot(&beta[1..], features.row(row));
            targets[row] - fitted
        })
        .collect();
    let ybar = mean(targets);
    let ss_tot: f64 = targets.iter().map(|y| (y - ybar).powi(2)).sum();
    let ss_res: f64 = residuals.iter().map(|e| e * e).sum();
    let r_squared = if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    };

    Ok(OlsFit {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        r_squared,
        residuals,
    })
}

/// Ranks starting at 1, ties sharing the average of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(RevarError::Dimension {
            context: "spearman",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(RevarError::param(format!(
            "spearman needs at least 3 points, got {}",
            a.len()
        )));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let ma = mean(&ra);
    let mb = mean(&rb);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn exact_linear_relation() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let fit = ols_fit(&x, &[2.0, 4.0, 6.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_fit_is_perfect() {
        let mut rng = Rng::new(4);
        let rows: Vec<[f64; 2]> = (0..40).map(|_| [rng.normal(0.0, 1.0), rng.normal(3.0, 2.0)]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let fit = ols_fit(&x, &x.col(1)).unwrap();
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_targets_give_zero_r2() {
        let x = Matrix::from_rows(&[[1.0], [5.0], [2.0], [7.0]]).unwrap();
        let fit = ols_fit(&x, &[3.0; 4]).unwrap();
        assert_eq!(fit.r_squared, 0.0);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_names_column() {
        // column 1 is twice column 0
        let x = Matrix::from_rows(&[[1.0, 2.0, 0.3], [2.0, 4.0, -1.0], [3.0, 6.0, 0.5], [5.0, 10.0, 2.0]])
            .unwrap();
        match ols_fit(&x, &[1.0, 2.0, 3.0, 4.0]) {
            Err(RevarError::Singular { column }) => assert_eq!(column, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
        // constant column duplicates the intercept
        let x = Matrix::from_rows(&[[1.0, 4.0], [1.0, 2.0], [1.0, 3.0]]).unwrap();
        assert!(matches!(
            ols_fit(&x, &[1.0, 2.0, 3.0]),
            Err(RevarError::Singular { column: 0 })
        ));
    }

    #[test]
    fn intercept_only_fit() {
        let x = Matrix::zeros(4, 0);
        let fit = ols_fit(&x, &[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert_eq!(fit.r_squared.abs(), 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks [1.5,1.5,3] on both sides
        assert!((spearman(&[1.0, 1.0, 2.0], &[5.0, 5.0, 9.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn residuals_orthogonal_to_features(seed in 0u64..500, n in 6usize..40, p in 1usize..4) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.normal(1.0, 3.0)).collect()).collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 5.0)).collect();
            let fit = ols_fit(&x, &y).unwrap();
            let rnorm = dot(&fit.residuals, &fit.residuals).sqrt();
            for c in 0..p {
                let col = x.col(c);
                let cn = dot(&col, &col).sqrt();
                prop_assert!(dot(&col, &fit.residuals).abs() <= 1e-8 * cn * rnorm.max(1.0));
            }
            prop_assert!(fit.residuals.iter().sum::<f64>().abs() <= 1e-8 * (n as f64).sqrt() * rnorm.max(1.0));
            prop_assert!(fit.r_squared <= 1.0 + 1e-12);
        }

        #[test]
        fn spearman_monotone_invariant(seed in 0u64..500, n in 3usize..50) {
            let mut rng = Rng::new(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
            let base = spearman(&a, &b).unwrap();
            let ta: Vec<f64> = a.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let tb: Vec<f64> = b.iter().map(|x| x.powi(3) - 2.0).collect();
            prop_assert!((spearman(&ta, &tb).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
