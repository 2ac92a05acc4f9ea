use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{contract, Result};
use crate::rng::{normals, Domain};

pub const EIGEN_FLOOR: f64 = 1e-12;
pub const RIDGE: f64 = 1e-8;

/// Symmetrises and floors eigenvalues at `floor`.
pub fn floor_psd(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Lower factor `F` with `F Fᵀ = Σ`: Cholesky, or the eigen square root when
/// Cholesky fails on a semidefinite input.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = s.clone().cholesky() {
        return c.l();
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// Residual covariance of the least-squares fit `X_t = A X_{t−1} + c + η_t`.
pub fn fit_var1_cov(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t, d) = x.shape();
    if d == 0 || t < 2 * d || t < 3 {
        return contract(format!("VAR(1) fit needs at least 2·d rows ({t} rows, d = {d})"));
    }
    let n = t - 1;
    let mut z = DMatrix::from_element(n, d + 1, 1.0);
    z.view_mut((0, 0), (n, d)).copy_from(&x.rows(0, n));
    let y = x.rows(1, n).into_owned();
    let ztz = z.tr_mul(&z);
    let zty = z.tr_mul(&y);
    let coef = match ztz.clone().cholesky() {
        Some(c) if c.l().diagonal().iter().all(|v| *v > 1e-7 * ztz.diagonal().max().sqrt()) => c.solve(&zty),
        _ => {
            log::warn!("VAR(1) regressors are rank deficient; ridge {RIDGE:e}");
            let scale = ztz.diagonal().max().max(1.0);
            let mut r = ztz.clone();
            for i in 0..d + 1 {
                r[(i, i)] += RIDGE * scale;
            }
            let Some(c) = r.cholesky() else {
                return contract("VAR(1) normal equations are not positive definite after ridge");
            };
            // iterated refinement removes the ridge shrinkage on the
            // identifiable directions
            let mut coef = c.solve(&zty);
            for _ in 0..20 {
                coef += c.solve(&(&zty - &ztz * &coef));
            }
            coef
        }
    };
    let resid = y - z * coef;
    let cov = resid.tr_mul(&resid) / n as f64;
    Ok(floor_psd(&cov, EIGEN_FLOOR))
}

/// `features + s·F·z` row by row with `F Fᵀ = Σ`.
pub fn add_correlated_noise(features: &DMatrix<f64>, sigma: &DMatrix<f64>, scale: f64, seed: u64) -> Result<DMatrix<f64>> {
    let (t, d) = features.shape();
    if sigma.shape() != (d, d) {
        return contract("noise covariance does not match the feature count");
    }
    let f = psd_factor(sigma) * scale;
    let z = DMatrix::from_vec(d, t, normals(seed, Domain::Dslob, super::tags::NOISE, 0, t * d));
    let eta = (f * z).transpose();
    Ok(features + eta)
}

/// Scalar `s` such that the mean ratio of noise variance to feature
/// variance equals `ratio`; constant features are skipped.
pub fn snr_scale(features: &DMatrix<f64>, sigma: &DMatrix<f64>, ratio: f64) -> f64 {
    let r = mean_ratio(features, sigma);
    if r > 0.0 {
        (ratio / r).sqrt()
    } else {
        0.0
    }
}

/// Mean over features of `Σ_ii / Var(f_i)`.
pub fn mean_ratio(features: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    let mut k = 0;
    for (i, col) in features.column_iter().enumerate() {
        let m = col.mean();
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        if v > 1e-300 {
            acc += sigma[(i, i)] / v;
            k += 1;
        }
    }
    if k == 0 {
        0.0
    } else {
        acc / k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_covariance_recovered() {
        let d = [1.0f64, 4.0, 0.25];
        let t = 10_000;
        let z = normals(1, Domain::Test, 0, 0, t * 3);
        let x = DMatrix::from_fn(t, 3, |i, j| d[j].sqrt() * z[i * 3 + j]);
        let s = fit_var1_cov(&x).unwrap();
        for i in 0..3 {
            assert!((s[(i, i)] / d[i] - 1.0).abs() < 0.1);
            for j in 0..3 {
                if i != j {
                    assert!(s[(i, j)].abs() < 0.1 * (d[i] * d[j]).sqrt());
                }
            }
        }
        assert!(s.clone().cholesky().is_some());
    }

    #[test]
    fn linear_features_have_no_residual() {
        let x = DMatrix::from_fn(200, 3, |i, j| (j + 1) as f64 * i as f64 + 0.5);
        let s = fit_var1_cov(&x).unwrap();
        assert!(s.norm() < 1e-8, "{}", s.norm());
        assert!(s.cholesky().is_some());
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(fit_var1_cov(&DMatrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn zero_covariance_leaves_input() {
        let x = DMatrix::from_fn(50, 4, |i, j| (i * j) as f64);
        let y = add_correlated_noise(&x, &DMatrix::zeros(4, 4), 1.0, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn noise_covariance_recovered() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 0.5]);
        let x = DMatrix::zeros(10_000, 3);
        let y = add_correlated_noise(&x, &s, 0.7, 4).unwrap();
        let m = y.row_mean();
        let c = DMatrix::from_fn(3, 3, |i, j| {
            y.column(i).iter().zip(y.column(j).iter()).map(|(a, b)| (a - m[i]) * (b - m[j])).sum::<f64>() / 9999.0
        });
        let want = &s * 0.49;
        assert!((c - &want).norm() < 0.1 * want.norm());
        let other = add_correlated_noise(&x, &s, 0.7, 5).unwrap();
        assert_ne!(y, other);
    }

    #[test]
    fn snr_scale_matches_ratio() {
        let z = normals(6, Domain::Test, 0, 0, 2000);
        let x = DMatrix::from_fn(1000, 2, |i, j| 3.0 * z[2 * i + j]);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0]));
        let k = snr_scale(&x, &s, 0.25);
        assert!((mean_ratio(&x, &(&s * (k * k))) - 0.25).abs() < 1e-12);
    }
}
