//! Classical baseline: a scalar deformation feature (median-filtered
//! maximum-intensity position) fed into small-scale Gaussian process
//! regression with an RBF kernel.

use crate::error::{Error, Result};

/// Median filter with edge replication; `k` must be odd.
pub fn median_filter(x: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::contract(format!("median filter width must be odd, got {k}")));
    }
    if x.is_empty() {
        return Err(Error::contract("median filter on empty input"));
    }
    let half = (k / 2) as isize;
    let n = x.len() as isize;
    let mut out = Vec::with_capacity(x.len());
    let mut buf = Vec::with_capacity(k);
    for i in 0..n {
        buf.clear();
        for j in -half..=half {
            let idx = (i + j).clamp(0, n - 1) as usize;
            buf.push(x[idx]);
        }
        buf.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        out.push(buf[k / 2]);
    }
    Ok(out)
}

/// Normalized pixel index of the intensity maximum after median filtering;
/// always in [0, 1]. Ties resolve to the shallowest index.
pub fn mip_feature(ascan: &[f32], median_k: usize) -> Result<f64> {
    let filtered = median_filter(ascan, median_k)?;
    let mut best = 0usize;
    for (i, v) in filtered.iter().enumerate() {
        if *v > filtered[best] {
            best = i;
        }
    }
    if ascan.len() < 2 {
        return Ok(0.0);
    }
    Ok(best as f64 / (ascan.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    fn validate(&self) -> Result<()> {
        if self.length_scale <= 0.0 || self.signal_var <= 0.0 || self.noise_var <= 0.0 {
            return Err(Error::contract(format!(
                "GP hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Exact GP regressor over scalar inputs with a cached Cholesky factor of
/// `K + noise*I`. Prior mean is zero: predictions far from all data revert
/// to 0 with variance `signal_var`.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub hyper: GpHyper,
    /// Lower-triangular Cholesky factor, row-major n x n.
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn rbf(a: f64, b: f64, hyper: &GpHyper) -> f64 {
    let d = a - b;
    hyper.signal_var * (-d * d / (2.0 * hyper.length_scale * hyper.length_scale)).exp()
}

/// Fits the exact GP on at most a few thousand points (cubic solve).
pub fn gp_fit(x: &[f64], y: &[f64], hyper: GpHyper) -> Result<GpModel> {
    hyper.validate()?;
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::contract(format!(
            "GP needs matching non-empty inputs/targets, got {}/{}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let mut k = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rbf(x[i], x[j], &hyper);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += hyper.noise_var;
    }
    let chol = cholesky(&k, n)?;
    let alpha = chol_solve(&chol, n, y);
    Ok(GpModel { x: x.to_vec(), y: y.to_vec(), hyper, chol, alpha })
}

/// Predictive mean and variance at a query point.
pub fn gp_predict(model: &GpModel, query: f64) -> (f64, f64) {
    let n = model.x.len();
    let kstar: Vec<f64> = model.x.iter().map(|&xi| rbf(query, xi, &model.hyper)).collect();
    let mean: f64 = kstar.iter().zip(&model.alpha).map(|(a, b)| a * b).sum();
    // var = k(x,x) - v^T v with v = L^-1 k*
    let v = forward_sub(&model.chol, n, &kstar);
    let quad: f64 = v.iter().map(|t| t * t).sum();
    let var = (model.hyper.signal_var - quad).max(0.0);
    (mean, var)
}

impl GpModel {
    pub fn predict(&self, query: f64) -> (f64, f64) {
        gp_predict(self, query)
    }
}

/// Row-major lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(k: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = k[i * n + j];
            for p in 0..j {
                sum -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Conditioning(format!(
                        "kernel matrix not positive definite at pivot {i} (noise variance too small?)"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l[i * n + j] * y[j];
        }
        y[i] = sum / l[i * n + i];
    }
    y
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let y = forward_sub(l, n, b);
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for j in i + 1..n {
            sum -= l[j * n + i] * x[j];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Uniform-stride subsample to at most `cap` points, then grid search over
/// length scale and relative noise on held-out validation MAE; signal
/// variance is pinned to the target variance.
pub fn gp_fit_auto(
    x: &[f64],
    y: &[f64],
    val_x: &[f64],
    val_y: &[f64],
    cap: usize,
) -> Result<GpModel> {
    let (xs, ys) = subsample_pair(x, y, cap);
    let var = variance(&ys).max(1e-12);
    let mut best: Option<(f64, GpHyper)> = None;
    for &ls in &[0.02, 0.05, 0.1, 0.2, 0.4] {
        for &rel_noise in &[1e-4, 1e-3, 1e-2] {
            let hyper = GpHyper { length_scale: ls, signal_var: var, noise_var: rel_noise * var };
            // Screen on a smaller subsample; refit the winner at full cap.
            let (sx, sy) = subsample_pair(&xs, &ys, 600.min(cap));
            let Ok(m) = gp_fit(&sx, &sy, hyper) else { continue };
            let mae = if val_x.is_empty() {
                0.0
            } else {
                val_x
                    .iter()
                    .zip(val_y)
                    .map(|(&vx, &vy)| (gp_predict(&m, vx).0 - vy).abs())
                    .sum::<f64>()
                    / val_x.len() as f64
            };
            if best.map_or(true, |(b, _)| mae < b) {
                best = Some((mae, hyper));
            }
        }
    }
    let (_, hyper) = best.ok_or_else(|| {
        Error::Conditioning("no GP hyperparameter candidate produced a solvable system".into())
    })?;
    gp_fit(&xs, &ys, hyper)
}

fn subsample_pair(x: &[f64], y: &[f64], cap: usize) -> (Vec<f64>, Vec<f64>) {
    if x.len() <= cap || cap == 0 {
        return (x.to_vec(), y.to_vec());
    }
    let stride = x.len() as f64 / cap as f64;
    let idx: Vec<usize> = (0..cap).map(|i| (i as f64 * stride) as usize).collect();
    (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| y[i]).collect())
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_filter_matches_sliding_window_sort() {
        let x = [5.0f32, 1.0, 4.0, 2.0, 3.0];
        let got = median_filter(&x, 3).unwrap();
        assert_eq!(got, vec![5.0, 4.0, 2.0, 3.0, 3.0]);
        // Independent check: explicit sort of each replicated window.
        let n = x.len() as isize;
        for i in 0..n {
            let mut w: Vec<f32> = (-1..=1)
                .map(|j| x[(i + j).clamp(0, n - 1) as usize])
                .collect();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got[i as usize], w[1]);
        }
        assert!(median_filter(&x, 2).is_err());
    }

    #[test]
    fn mip_feature_examples() {
        assert_eq!(mip_feature(&[0.1, 0.9, 0.3], 1).unwrap(), 0.5);
        // Shift invariance of the argmax.
        let base = [0.1f32, 0.3, 0.8, 0.2, 0.4, 0.1, 0.05];
        let shifted: Vec<f32> = base.iter().map(|v| v + 0.17).collect();
        assert_eq!(mip_feature(&base, 3).unwrap(), mip_feature(&shifted, 3).unwrap());
        // Always within [0,1].
        assert!((0.0..=1.0).contains(&mip_feature(&base, 5).unwrap()));
    }

    #[test]
    fn gp_interpolates_training_points_at_low_noise() {
        let x = [0.0, 0.25, 0.5, 0.75, 1.0];
        let y = [1.0, -0.5, 0.2, 0.8, -1.0];
        let m = gp_fit(&x, &y, GpHyper { length_scale: 0.2, signal_var: 1.0, noise_var: 1e-10 })
            .unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mean, var) = gp_predict(&m, *xi);
            assert!((mean - yi).abs() < 1e-4, "at {xi}: {mean} vs {yi}");
            assert!(var >= 0.0);
        }
    }

    #[test]
    fn gp_reverts_to_prior_far_from_data() {
        let x = [0.4, 0.45, 0.5];
        let y = [3.0, 2.0, 2.5];
        let hyper = GpHyper { length_scale: 0.05, signal_var: 2.0, noise_var: 1e-4 };
        let m = gp_fit(&x, &y, hyper).unwrap();
        let (mean, var) = gp_predict(&m, 40.0);
        assert!(mean.abs() < 1e-9, "prior mean {mean}");
        assert!((var - hyper.signal_var).abs() < 1e-9, "prior var {var}");
        // Variance never exceeds signal + noise anywhere.
        for q in 0..100 {
            let (_, v) = gp_predict(&m, q as f64 * 0.01);
            assert!(v >= 0.0 && v <= hyper.signal_var + hyper.noise_var + 1e-12);
        }
    }

    #[test]
    fn gp_matches_direct_dense_solve_on_five_points() {
        let x = [0.0, 0.2, 0.35, 0.7, 0.95];
        let y = [0.3, -0.1, 0.5, 0.9, -0.7];
        let hyper = GpHyper { length_scale: 0.15, signal_var: 1.3, noise_var: 1e-3 };
        let m = gp_fit(&x, &y, hyper).unwrap();

        // Independent route: Gaussian elimination with partial pivoting on
        // (K + noise I) alpha = y, mean = k*^T alpha.
        let n = x.len();
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = rbf(x[i], x[j], &hyper);
            }
            a[i * n + i] += hyper.noise_var;
        }
        let mut rhs = y.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p * n + col].abs().partial_cmp(&a[q * n + col].abs()).unwrap())
                .unwrap();
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            rhs.swap(col, piv);
            for row in col + 1..n {
                let f = a[row * n + col] / a[col * n + col];
                for j in col..n {
                    a[row * n + j] -= f * a[col * n + j];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut alpha = vec![0.0f64; n];
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in i + 1..n {
                s -= a[i * n + j] * alpha[j];
            }
            alpha[i] = s / a[i * n + i];
        }

        for q in [0.0, 0.1, 0.33, 0.6, 0.8, 1.0] {
            let kstar: Vec<f64> = x.iter().map(|&xi| rbf(q, xi, &hyper)).collect();
            let direct: f64 = kstar.iter().zip(&alpha).map(|(a, b)| a * b).sum();
            let (mean, _) = gp_predict(&m, q);
            assert!((mean - direct).abs() < 1e-8, "query {q}: {mean} vs {direct}");
        }
    }

    #[test]
    fn gp_rejects_degenerate_noise() {
        // Duplicate inputs with zero-ish noise make the system singular.
        let x = [0.5, 0.5, 0.5];
        let y = [1.0, 2.0, 3.0];
        let err =
            gp_fit(&x, &y, GpHyper { length_scale: 0.1, signal_var: 1.0, noise_var: 1e-300 })
                .unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
    }
}
