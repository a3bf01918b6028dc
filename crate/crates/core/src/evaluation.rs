//! Evaluation statistics: MAE/rMAE/CC, Wilcoxon signed-rank comparison,
//! boxplot statistics, inference-time benchmarking, and the model
//! comparison report.

use std::time::Instant;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

// ---------------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------------

fn check_paired(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "paired metric needs equal non-empty vectors, got {}/{}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

fn mean_and_pop_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation of the absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    check_paired(pred, target)?;
    Ok(mean_and_pop_std(pred.iter().zip(target).map(|(p, t)| (p - t).abs())))
}

/// Per-sample absolute error divided by `f_ref`; mean and population std.
pub fn rmae(pred: &[f64], target: &[f64], f_ref: f64) -> Result<(f64, f64)> {
    check_paired(pred, target)?;
    if f_ref <= 0.0 {
        return Err(Error::contract(format!("rMAE reference must be positive, got {f_ref}")));
    }
    Ok(mean_and_pop_std(pred.iter().zip(target).map(|(p, t)| (p - t).abs() / f_ref)))
}

/// Pearson correlation coefficient; errors when either side has zero
/// variance.
pub fn pearson_cc(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_paired(pred, target)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (p, t) in pred.iter().zip(target) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::Degenerate("correlation undefined for zero-variance input".into()));
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; ties get midranks. Returns `(W, p)` with `W = min(W+, W-)`.
/// Exact p by full sign enumeration for n <= 12, tie-corrected normal
/// approximation with continuity correction beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!(
            "signed-rank test needs equal non-empty vectors, got {}/{}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = diffs.len();

    // Midranks of |d|.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).expect("finite diffs"));
    let mut ranks = vec![0.0f64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg_rank;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }

    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let p = if n <= 12 {
        // Exact conditional distribution of W+ over all 2^n sign patterns
        // of the observed ranks.
        let mut le = 0u64;
        let mut ge = 0u64;
        let patterns = 1u64 << n;
        for mask in 0..patterns {
            let mut s = 0.0f64;
            for (bit, r) in ranks.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    s += r;
                }
            }
            if s <= w_plus {
                le += 1;
            }
            if s >= w_plus {
                ge += 1;
            }
        }
        let tail = le.min(ge) as f64 / patterns as f64;
        (2.0 * tail).min(1.0)
    } else {
        let nf = n as f64;
        let mean = total / 2.0;
        let tie_term: f64 =
            tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Err(Error::Degenerate("signed-rank variance collapsed under ties".into()));
        }
        // Continuity correction toward the mean; W <= mean by construction.
        let z = (w - mean + 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * normal.cdf(z)).min(1.0)
    };
    Ok((w, p))
}

// ---------------------------------------------------------------------------
// Boxplot statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub notch_lo: f64,
    pub notch_hi: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile (R type 7) on a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Quartiles, 1.5*IQR whiskers clamped to the data, outliers beyond, and
/// the median comparison notch `median +- 1.57*IQR/sqrt(n)`.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.len() < 5 {
        return Err(Error::contract(format!(
            "boxplot needs at least 5 values, got {}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let median = quantile_sorted(&sorted, 0.5);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let fence_lo = q1 - 1.5 * iqr;
    let fence_hi = q3 + 1.5 * iqr;
    let whisker_lo = sorted.iter().copied().find(|v| *v >= fence_lo).unwrap_or(q1);
    let whisker_hi = sorted.iter().rev().copied().find(|v| *v <= fence_hi).unwrap_or(q3);
    let outliers = sorted.iter().copied().filter(|v| *v < fence_lo || *v > fence_hi).collect();
    let notch = 1.57 * iqr / (values.len() as f64).sqrt();
    Ok(BoxplotStats {
        median,
        q1,
        q3,
        whisker_lo,
        whisker_hi,
        notch_lo: median - notch,
        notch_hi: median + notch,
        outliers,
    })
}

// ---------------------------------------------------------------------------
// Inference timing
// ---------------------------------------------------------------------------

/// Anything that maps windows to forces; lets tests time stub predictors.
pub trait ForcePredictor {
    fn predict(&self, windows: &[&[f32]]) -> Result<Vec<f32>>;

    /// Window shape compatibility check.
    fn check_dims(&self, t_s: usize, d_c: usize) -> Result<()>;
}

impl ForcePredictor for Model {
    fn predict(&self, windows: &[&[f32]]) -> Result<Vec<f32>> {
        self.predict_batch(windows)
    }

    fn check_dims(&self, t_s: usize, d_c: usize) -> Result<()> {
        if self.spec.t_s != t_s || self.spec.d_c != d_c {
            return Err(Error::dim(format!(
                "model expects {}x{} windows, dataset has {t_s}x{d_c}",
                self.spec.t_s, self.spec.d_c
            )));
        }
        Ok(())
    }
}

/// Wall-clock mean and population std (ms) of a single forward pass over
/// `reps` timed calls after 10 warm-up calls.
pub fn time_inference(
    model: &dyn ForcePredictor,
    window: &[f32],
    reps: usize,
) -> Result<(f64, f64)> {
    if reps < 2 {
        return Err(Error::contract(format!("timing needs reps >= 2, got {reps}")));
    }
    for _ in 0..10 {
        model.predict(&[window])?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        model.predict(&[window])?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(mean_and_pop_std(samples.into_iter()))
}

// ---------------------------------------------------------------------------
// Model comparison report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ModelEval {
    pub name: String,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmae_mean: f64,
    pub rmae_std: f64,
    pub cc: f64,
    /// Wall-clock per forward pass, ms; absent when timing was skipped.
    pub it_mean_ms: Option<f64>,
    pub it_std_ms: Option<f64>,
    pub boxplot: BoxplotStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub models: Vec<ModelEval>,
    /// Two-sided signed-rank p-values on absolute errors; `None` on the
    /// diagonal and for degenerate comparisons.
    pub pairwise_p: Vec<Vec<Option<f64>>>,
    /// rMAE normalizer: mean absolute target force over the test set.
    pub f_ref: f64,
    pub n_samples: usize,
}

impl EvalReport {
    /// Deterministic metrics as CSV (no timing columns; see `timing_csv`).
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("# n={} f_ref={:.9e} std=population\n", self.n_samples, self.f_ref);
        out.push_str("model,mae_mean,mae_std,rmae_mean,rmae_std,cc\n");
        for m in &self.models {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9}\n",
                m.name, m.mae_mean, m.mae_std, m.rmae_mean, m.rmae_std, m.cc
            ));
        }
        out.push_str("model_a,model_b,p_value\n");
        for i in 0..self.models.len() {
            for j in i + 1..self.models.len() {
                let p = self.pairwise_p[i][j]
                    .map(|p| format!("{p:.9e}"))
                    .unwrap_or_else(|| "n/a".into());
                out.push_str(&format!(
                    "{},{},{}\n",
                    self.models[i].name, self.models[j].name, p
                ));
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("model,it_mean_ms,it_std_ms\n");
        for m in &self.models {
            match (m.it_mean_ms, m.it_std_ms) {
                (Some(mean), Some(std)) => {
                    out.push_str(&format!("{},{:.6},{:.6}\n", m.name, mean, std))
                }
                _ => out.push_str(&format!("{},n/a,n/a\n", m.name)),
            }
        }
        out
    }

    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from(
            "model,median,q1,q3,whisker_lo,whisker_hi,notch_lo,notch_hi,n_outliers\n",
        );
        for m in &self.models {
            let b = &m.boxplot;
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
                m.name,
                b.median,
                b.q1,
                b.q3,
                b.whisker_lo,
                b.whisker_hi,
                b.notch_lo,
                b.notch_hi,
                b.outliers.len()
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Console summary, one row per model.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>16} {:>18} {:>8} {:>14}\n",
            "model", "MAE (mN)", "rMAE", "CC", "IT (ms)"
        );
        for m in &self.models {
            let it = match (m.it_mean_ms, m.it_std_ms) {
                (Some(mean), Some(std)) => format!("{mean:.2} +- {std:.2}"),
                _ => "-".into(),
            };
            out.push_str(&format!(
                "{:<18} {:>7.2} +- {:<6.2} {:>8.4} +- {:<7.4} {:>8.4} {:>14}\n",
                m.name, m.mae_mean, m.mae_std, m.rmae_mean, m.rmae_std, m.cc, it
            ));
        }
        out
    }
}

/// Full metric suite per model, pairwise signed-rank tests on absolute
/// errors, boxplot statistics, and (when `reps >= 2`) inference timings.
/// Metric values are deterministic given the models and data.
pub fn compare_models(
    models: &[(String, &dyn ForcePredictor)],
    test: &Dataset,
    reps: usize,
) -> Result<EvalReport> {
    if models.is_empty() || test.is_empty() {
        return Err(Error::contract("comparison needs at least one model and a non-empty test set"));
    }
    let windows: Vec<&[f32]> = (0..test.len()).map(|i| test.window(i)).collect();
    let targets: Vec<f64> = test.forces().iter().map(|f| *f as f64).collect();
    let f_ref = targets.iter().map(|t| t.abs()).sum::<f64>() / targets.len() as f64;
    if f_ref <= 0.0 {
        return Err(Error::Degenerate("test set has all-zero forces; rMAE undefined".into()));
    }

    let mut evals = Vec::with_capacity(models.len());
    let mut abs_errors: Vec<Vec<f64>> = Vec::with_capacity(models.len());
    for (name, model) in models {
        model.check_dims(test.t_s(), test.d_c())?;
        let preds: Vec<f64> =
            model.predict(&windows)?.into_iter().map(|p| p as f64).collect();
        let errs: Vec<f64> =
            preds.iter().zip(&targets).map(|(p, t)| (p - t).abs()).collect();
        let (mae_mean, mae_std) = mae(&preds, &targets)?;
        let (rmae_mean, rmae_std) = rmae(&preds, &targets, f_ref)?;
        let cc = pearson_cc(&preds, &targets)?;
        let boxplot = boxplot_stats(&errs)?;
        evals.push(ModelEval {
            name: name.clone(),
            mae_mean,
            mae_std,
            rmae_mean,
            rmae_std,
            cc,
            it_mean_ms: None,
            it_std_ms: None,
            boxplot,
        });
        abs_errors.push(errs);
    }

    let n = models.len();
    let mut pairwise = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let p = match wilcoxon_signed_rank(&abs_errors[i], &abs_errors[j]) {
                Ok((_, p)) => Some(p),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            pairwise[i][j] = p;
            pairwise[j][i] = p;
        }
    }

    // Timing after all metric work, single-threaded, one model at a time.
    if reps >= 2 {
        for ((_, model), eval) in models.iter().zip(&mut evals) {
            let (mean, std) = time_inference(*model, windows[0], reps)?;
            eval.it_mean_ms = Some(mean);
            eval.it_std_ms = Some(std);
        }
    }

    Ok(EvalReport { models: evals, pairwise_p: pairwise, f_ref, n_samples: test.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), (1.0, 0.0));
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_matches_two_pass_oracle() {
        let mut rng = StdRng::seed_from_u64(1);
        let p: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (mean, std) = mae(&p, &t).unwrap();
        let errs: Vec<f64> = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).collect();
        let m = errs.iter().sum::<f64>() / 100.0;
        let v = errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 100.0;
        assert!((mean - m).abs() < 1e-12);
        assert!((std - v.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmae_examples_and_identity() {
        assert_eq!(rmae(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), (0.0, 0.0));
        // All errors equal e with f_ref = 2e -> (0.5, 0).
        let (m, s) = rmae(&[2.0, 4.0], &[1.0, 3.0], 2.0).unwrap();
        assert_eq!((m, s), (0.5, 0.0));

        let mut rng = StdRng::seed_from_u64(2);
        let p: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f_ref = 1.7;
        let (rm, _) = rmae(&p, &t, f_ref).unwrap();
        let (am, _) = mae(&p, &t).unwrap();
        assert!((rm * f_ref - am).abs() < 1e-12);
    }

    #[test]
    fn pearson_cc_affine_and_degenerate_cases() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson_cc(&y, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_cc(&neg, &x).unwrap() + 1.0).abs() < 1e-12);
        let c = vec![1.0; 50];
        assert!(matches!(pearson_cc(&c, &x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pearson_cc_matches_covariance_formula() {
        let mut rng = StdRng::seed_from_u64(3);
        let p: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = 128.0;
        let (mp, mt) = (p.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
        let cov = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum::<f64>() / n;
        let sp = (p.iter().map(|a| (a - mp) * (a - mp)).sum::<f64>() / n).sqrt();
        let st = (t.iter().map(|b| (b - mt) * (b - mt)).sum::<f64>() / n).sqrt();
        let direct = cov / (sp * st);
        assert!((pearson_cc(&p, &t).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_three_positive_differences() {
        let a = [2.0, 3.0, 4.0];
        let b = [1.0, 1.0, 1.0];
        let (w, p) = wilcoxon_signed_rank(&a, &b).unwrap();
        // W+ = 6, W- = 0 -> W = 0; exact two-sided p = 2 * (1/8).
        assert_eq!(w, 0.0);
        assert!((p - 0.25).abs() < 1e-12, "{p}");
    }

    #[test]
    fn wilcoxon_identical_vectors_degenerate() {
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn wilcoxon_detects_large_shift_with_normal_approximation() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = 2000;
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.5 + rng.gen_range(-0.05..0.05)).collect();
        let (_, p) = wilcoxon_signed_rank(&shifted, &base).unwrap();
        assert!(p < 0.05, "approximate p = {p}");
        // Subsampled exact test agrees in direction.
        let sub_a: Vec<f64> = shifted.iter().step_by(200).copied().collect();
        let sub_b: Vec<f64> = base.iter().step_by(200).copied().collect();
        let (_, p_exact) = wilcoxon_signed_rank(&sub_a, &sub_b).unwrap();
        assert!(p_exact < 0.05, "exact p = {p_exact}");
    }

    #[test]
    fn wilcoxon_handles_midrank_ties() {
        // |d| values 1,1,2,2 -> midranks 1.5,1.5,3.5,3.5.
        let a = [2.0, 0.0, 3.0, -1.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        let (w, p) = wilcoxon_signed_rank(&a, &b).unwrap();
        // W+ = 1.5 + 3.5 = 5, W- = 1.5 + 3.5 = 5.
        assert_eq!(w, 5.0);
        assert!((0.0..=1.0).contains(&p));
        assert!(p > 0.9, "perfectly balanced case should not be significant: {p}");
    }

    #[test]
    fn boxplot_one_to_seven() {
        let v: Vec<f64> = (1..=7).map(|i| i as f64).collect();
        let b = boxplot_stats(&v).unwrap();
        assert_eq!(b.median, 4.0);
        assert_eq!(b.q1, 2.5);
        assert_eq!(b.q3, 5.5);
        assert!(b.outliers.is_empty());
        assert_eq!(b.whisker_lo, 1.0);
        assert_eq!(b.whisker_hi, 7.0);
        let notch = 1.57 * 3.0 / 7.0f64.sqrt();
        assert!((b.notch_hi - (4.0 + notch)).abs() < 1e-12);
    }

    #[test]
    fn boxplot_constant_data_collapses() {
        let v = vec![2.5; 9];
        let b = boxplot_stats(&v).unwrap();
        assert_eq!((b.median, b.q1, b.q3), (2.5, 2.5, 2.5));
        assert_eq!(b.whisker_lo, 2.5);
        assert_eq!(b.whisker_hi, 2.5);
        assert!(b.outliers.is_empty());
    }

    #[test]
    fn boxplot_flags_far_outlier() {
        let mut v: Vec<f64> = vec![1.0, 1.1, 0.9, 1.05, 0.95, 1.02];
        v.push(1000.0);
        let b = boxplot_stats(&v).unwrap();
        assert_eq!(b.outliers, vec![1000.0]);
        assert!(b.whisker_hi < 1000.0);
    }

    struct StubPredictor {
        t_s: usize,
        d_c: usize,
        delay: Option<std::time::Duration>,
        f: Box<dyn Fn(&[f32]) -> f32 + Sync>,
    }

    impl ForcePredictor for StubPredictor {
        fn predict(&self, windows: &[&[f32]]) -> Result<Vec<f32>> {
            if let Some(d) = self.delay {
                std::thread::sleep(d);
            }
            Ok(windows.iter().map(|w| (self.f)(w)).collect())
        }

        fn check_dims(&self, t_s: usize, d_c: usize) -> Result<()> {
            if self.t_s != t_s || self.d_c != d_c {
                return Err(Error::dim("stub dims"));
            }
            Ok(())
        }
    }

    #[test]
    fn timing_measures_stub_latency() {
        let stub = StubPredictor {
            t_s: 1,
            d_c: 4,
            delay: Some(std::time::Duration::from_millis(5)),
            f: Box::new(|_| 0.0),
        };
        let window = vec![0.0f32; 4];
        let (mean, std) = time_inference(&stub, &window, 20).unwrap();
        assert!((5.0..9.0).contains(&mean), "mean {mean} ms");
        assert!(std >= 0.0);
        assert!(time_inference(&stub, &window, 1).is_err());
    }

    fn toy_dataset(n: usize, t_s: usize, d_c: usize) -> Dataset {
        use crate::data::{window, AscanStream};
        let mut rng = StdRng::seed_from_u64(7);
        let n_scans = t_s + n;
        let ts: Vec<f64> = (0..n_scans).map(|i| i as f64 * 1e-3).collect();
        let data: Vec<f32> = (0..n_scans * d_c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let oct = AscanStream::new(ts, d_c, data).unwrap();
        let pairs: Vec<(usize, f32)> = (0..n)
            .map(|i| (t_s - 1 + i, 1.0 + (i as f32 * 0.37).sin().abs() * 10.0))
            .collect();
        window(&oct, &pairs, t_s).unwrap()
    }

    #[test]
    fn compare_perfect_oracle_and_self_comparison() {
        let ds = toy_dataset(40, 2, 6);
        let targets = ds.forces();
        let windows: Vec<Vec<f32>> = (0..ds.len()).map(|i| ds.window(i).to_vec()).collect();
        let lookup = move |w: &[f32]| -> f32 {
            let idx = windows.iter().position(|x| x.as_slice() == w).unwrap();
            targets[idx]
        };
        let oracle = StubPredictor { t_s: 2, d_c: 6, delay: None, f: Box::new(lookup) };
        let noisy = StubPredictor {
            t_s: 2,
            d_c: 6,
            delay: None,
            f: Box::new(|w: &[f32]| w.iter().sum::<f32>()),
        };
        let models: Vec<(String, &dyn ForcePredictor)> = vec![
            ("oracle".into(), &oracle),
            ("oracle_twin".into(), &oracle),
            ("noisy".into(), &noisy),
        ];
        let report = compare_models(&models, &ds, 0).unwrap();
        assert!(report.models[0].mae_mean == 0.0);
        assert!(report.models[0].rmae_mean == 0.0);
        assert!((report.models[0].cc - 1.0).abs() < 1e-9);
        // Identical error vectors -> degenerate -> n/a.
        assert!(report.pairwise_p[0][1].is_none());
        assert!(report.pairwise_p[0][2].is_some());
        // Symmetry of the matrix.
        assert_eq!(report.pairwise_p[0][2], report.pairwise_p[2][0]);
        // CSV shape: metrics header + 3 rows + pair header + 3 pairs.
        let csv = report.metrics_csv();
        assert!(csv.contains("oracle_twin"));
        assert!(csv.contains("n/a"));
        let json = report.to_json();
        assert!(json.contains("pairwise_p"));
    }
}
