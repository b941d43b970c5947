//! Kernel ridge regression with an RBF kernel.
//!
//! kappa(x, x') = exp(-bandwidth * ||x - x'||^2); the fitted weights solve
//! (K + ridge * I) w = y exactly, and predictions are sum_i w_i kappa(x, x_i).
//! Defaults: ridge = 1, bandwidth = 1/3 (one over the covariate count).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::rules::RuleError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelRidgeConfig {
    pub ridge: f64,
    pub bandwidth: f64,
}

impl Default for KernelRidgeConfig {
    fn default() -> Self {
        KernelRidgeConfig {
            ridge: 1.0,
            bandwidth: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRidge {
    pub config: KernelRidgeConfig,
    pub train_x: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

fn rbf(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-bandwidth * sq).exp()
}

/// Exact linear solve for the kernel ridge weights.
pub fn fit_kernel_ridge(
    xs: &[Vec<f64>],
    ys: &[f64],
    config: &KernelRidgeConfig,
) -> Result<KernelRidge, RuleError> {
    assert!(!xs.is_empty(), "kernel ridge fit needs at least one row");
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = rbf(&xs[i], &xs[j], config.bandwidth);
        }
        k[(i, i)] += config.ridge;
    }
    let y = DVector::from_column_slice(ys);
    let solved = if config.ridge > 0.0 {
        // K is PSD, so K + ridge I is positive definite
        k.clone().cholesky().map(|c| c.solve(&y))
    } else {
        None
    };
    let w = match solved {
        Some(w) => w,
        None => k.lu().solve(&y).ok_or(RuleError::LinearSolve { size: n })?,
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(RuleError::LinearSolve { size: n });
    }
    Ok(KernelRidge {
        config: *config,
        train_x: xs.to_vec(),
        weights,
    })
}

impl KernelRidge {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.train_x
            .iter()
            .zip(&self.weights)
            .map(|(xi, wi)| wi * rbf(x, xi, self.config.bandwidth))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_half_shrinkage() {
        // K = 1, ridge = 1: w = y/2, prediction at x0 is y0/2
        let m = fit_kernel_ridge(
            &[vec![10.0, 0.0, 0.5]],
            &[3.0],
            &KernelRidgeConfig::default(),
        )
        .unwrap();
        assert!((m.predict(&[10.0, 0.0, 0.5]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_ridge_interpolates_distinct_points() {
        let xs = vec![vec![0.0, 0.0, 0.1], vec![5.0, 1.0, 0.9]];
        let ys = vec![2.0, -1.0];
        let cfg = KernelRidgeConfig {
            ridge: 0.0,
            bandwidth: 1.0 / 3.0,
        };
        let m = fit_kernel_ridge(&xs, &ys, &cfg).unwrap();
        assert!((m.predict(&xs[0]) - 2.0).abs() < 1e-8);
        assert!((m.predict(&xs[1]) + 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_ridge_duplicate_rows_singular() {
        let xs = vec![vec![1.0, 1.0, 0.5], vec![1.0, 1.0, 0.5]];
        let cfg = KernelRidgeConfig {
            ridge: 0.0,
            bandwidth: 1.0 / 3.0,
        };
        assert!(fit_kernel_ridge(&xs, &[1.0, 2.0], &cfg).is_err());
    }

    #[test]
    fn vanishing_bandwidth_all_ones_kernel() {
        // two identical-feature rows, bandwidth ~ 0, ridge 1:
        // K = all ones, (K+I)^-1 y = ((2y1-y2)/3, (2y2-y1)/3),
        // prediction at the shared point = (y1+y2)/3
        let xs = vec![vec![1.0, 2.0, 0.3], vec![1.0, 2.0, 0.3]];
        let ys = vec![4.0, 1.0];
        let cfg = KernelRidgeConfig {
            ridge: 1.0,
            bandwidth: 1e-12,
        };
        let m = fit_kernel_ridge(&xs, &ys, &cfg).unwrap();
        let expect = (ys[0] + ys[1]) / 2.0 * (2.0 / 3.0);
        assert!((m.predict(&xs[0]) - expect).abs() < 1e-9);
    }
}
