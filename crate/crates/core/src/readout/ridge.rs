use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ReadoutError;
use crate::stats::{mean, sample_std};

/// Ridge readout on standardized features with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    /// Weights in standardized feature units.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// The normal equations were singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

impl ReadoutModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }

    pub fn predict(&self, rows: &[&[f64]]) -> Vec<f64> {
        rows.iter().map(|x| self.predict_one(x)).collect()
    }

    /// Slopes in raw feature units.
    pub fn raw_slopes(&self) -> Vec<f64> {
        self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect()
    }
}

fn standardized(rows: &[&[f64]]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>), ReadoutError> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(ReadoutError::DimensionMismatch {
            feature: "design".into(),
            got: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(d),
            expected: d,
        });
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(ReadoutError::NonFinite);
    }
    let mut means = Vec::with_capacity(d);
    let mut scales = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let m = mean(&col).unwrap_or(0.0);
        let s = sample_std(&col).unwrap_or(0.0);
        means.push(m);
        // Constant columns stay centered at zero and carry no weight.
        scales.push(if s > 0.0 { s } else { 1.0 });
    }
    let x = DMatrix::from_fn(n, d, |i, j| (rows[i][j] - means[j]) / scales[j]);
    Ok((x, means, scales))
}

/// Fits one ridge model per target column, sharing the design.
pub fn ridge_fit_many(rows: &[&[f64]], targets: &[Vec<f64>], lambda: f64) -> Result<Vec<ReadoutModel>, ReadoutError> {
    if rows.is_empty() {
        return Err(ReadoutError::Empty);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ReadoutError::BadLambda(lambda));
    }
    for y in targets {
        if y.len() != rows.len() {
            return Err(ReadoutError::LengthMismatch {
                got: y.len(),
                expected: rows.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ReadoutError::NonFinite);
        }
    }
    let (x, means, scales) = standardized(rows)?;
    let d = x.ncols();
    let mut gram = x.tr_mul(&x);
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let ybar: Vec<f64> = targets.iter().map(|y| mean(y).unwrap_or(0.0)).collect();
    let rhs = DMatrix::from_fn(rows.len(), targets.len(), |i, k| targets[k][i] - ybar[k]);
    let xty = x.tr_mul(&rhs);

    let (w, pinv) = if d == 0 {
        (DMatrix::zeros(0, targets.len()), false)
    } else {
        match gram.clone().cholesky() {
            Some(ch) if lambda > 0.0 || well_conditioned(&gram) => (ch.solve(&xty), false),
            _ => {
                log::debug!("ridge normal equations singular; using pseudo-inverse");
                let p = gram.pseudo_inverse(1e-10).map_err(|_| ReadoutError::Solve)?;
                (p * xty, true)
            }
        }
    };
    Ok((0..targets.len())
        .map(|k| ReadoutModel {
            weights: w.column(k).iter().copied().collect(),
            intercept: ybar[k],
            lambda,
            mean: means.clone(),
            scale: scales.clone(),
            pseudo_inverse: pinv,
        })
        .collect())
}

/// Rejects numerically singular Gram matrices that Cholesky still accepts.
fn well_conditioned(gram: &DMatrix<f64>) -> bool {
    let diag_max = gram.diagonal().iter().cloned().fold(0.0, f64::max);
    if diag_max == 0.0 {
        return false;
    }
    let ev = gram.clone().symmetric_eigenvalues();
    ev.min() > 1e-12 * ev.max().max(diag_max)
}

pub fn ridge_fit(rows: &[&[f64]], y: &[f64], lambda: f64) -> Result<ReadoutModel, ReadoutError> {
    Ok(ridge_fit_many(rows, &[y.to_vec()], lambda)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn exact_line_without_penalty() {
        let x = col(&[1.0, 2.0, 3.0]);
        let m = ridge_fit(&refs(&x), &[2.0, 4.0, 6.0], 0.0).unwrap();
        assert!((m.raw_slopes()[0] - 2.0).abs() < 1e-12);
        assert!(m.predict_one(&[0.0]).abs() < 1e-12);
        assert!(!m.pseudo_inverse);
    }

    #[test]
    fn unit_penalty_hand_value() {
        let x = col(&[1.0, 2.0, 3.0]);
        let m = ridge_fit(&refs(&x), &[2.0, 4.0, 6.0], 1.0).unwrap();
        assert!((m.raw_slopes()[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((m.intercept - 4.0).abs() < 1e-12);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let x = col(&[1.0, 2.0, 3.0]);
        let m = ridge_fit(&refs(&x), &[2.0, 4.0, 9.0], 1e12).unwrap();
        assert!(m.weights[0].abs() < 1e-9);
        assert!((m.predict_one(&[10.0]) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_falls_back() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 3.0 * i as f64 + 1.0).collect();
        let m = ridge_fit(&refs(&x), &y, 0.0).unwrap();
        assert!(m.pseudo_inverse);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((m.predict_one(xi) - yi).abs() < 1e-8);
        }
    }

    #[test]
    fn input_errors() {
        assert_eq!(ridge_fit(&[], &[], 1.0), Err(ReadoutError::Empty));
        let x = col(&[1.0]);
        assert_eq!(ridge_fit(&refs(&x), &[1.0], -1.0), Err(ReadoutError::BadLambda(-1.0)));
        assert!(matches!(
            ridge_fit(&refs(&x), &[1.0, 2.0], 1.0),
            Err(ReadoutError::LengthMismatch { .. })
        ));
    }
}
