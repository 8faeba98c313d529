//! Evaluation metrics for generated traces: correlation distance, moments
//! distance and novelty, plus the windowed cross-correlation they build on.
//!
//! Every metric has a naive reference twin in [`oracle`] used by property
//! tests and the acceptance suite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Feature, TraceTensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("correlation vectors have different dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("lag {lag} leaves an overlap of {overlap} (< 2)")]
    LagTooLarge { lag: usize, overlap: usize },
    #[error("metric undefined for fewer than 2 users")]
    TooFewUsers,
}

/// Across-user mean Pearson coefficients for each feature pair, in fixed
/// row-major upper-triangular order. With two features this is a single entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrVector {
    pub entries: Vec<f64>,
}

/// Mean, population standard deviation and skewness of a lumped sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriple {
    pub mu: f64,
    pub sigma: f64,
    pub skew: f64,
}

/// Pearson correlation coefficient of two equal-length sequences.
/// A constant sequence yields 0 by convention.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mean_x;
        let dy = yi - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-user download/upload Pearson coefficients averaged across users.
pub fn corr_vector(trace: &TraceTensor) -> Result<CorrVector, MetricsError> {
    if trace.steps() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: trace.steps(),
        });
    }
    let mut sum = 0.0;
    for u in 0..trace.users() {
        let dl = trace.series(u, Feature::Download);
        let ul = trace.series(u, Feature::Upload);
        sum += pearson(&dl, &ul)?;
    }
    Ok(CorrVector {
        entries: vec![sum / trace.users() as f64],
    })
}

/// Euclidean distance between two correlation vectors.
pub fn corr_distance(data: &CorrVector, gen: &CorrVector) -> Result<f64, MetricsError> {
    if data.entries.len() != gen.entries.len() {
        return Err(MetricsError::DimensionMismatch(
            data.entries.len(),
            gen.entries.len(),
        ));
    }
    let sq: f64 = data
        .entries
        .iter()
        .zip(&gen.entries)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq.sqrt())
}

/// Population moments of a flat slice; skewness is 0 when sigma is 0.
pub fn moments_of(values: &[f64]) -> MomentTriple {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &v in values {
        let d = v - mu;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= n;
    m3 /= n;
    let sigma = m2.sqrt();
    let skew = if sigma > 0.0 { m3 / (sigma * sigma * sigma) } else { 0.0 };
    MomentTriple { mu, sigma, skew }
}

/// Moments of one feature with all user trace steps lumped together.
pub fn moments(trace: &TraceTensor, feature: Feature) -> Result<MomentTriple, MetricsError> {
    let values = trace.feature_values(feature);
    if values.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: values.len(),
        });
    }
    Ok(moments_of(&values))
}

/// Squared Euclidean distance between two moment triples (un-normalized).
pub fn moments_distance(data: &MomentTriple, gen: &MomentTriple) -> f64 {
    (data.mu - gen.mu).powi(2)
        + (data.sigma - gen.sigma).powi(2)
        + (data.skew - gen.skew).powi(2)
}

/// Lagged cross-correlation: Pearson of `x[0..L-k]` against `y[k..L]`.
pub fn cross_correlation(x: &[f64], y: &[f64], lag: usize) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let overlap = x.len().saturating_sub(lag);
    if overlap < 2 {
        return Err(MetricsError::LagTooLarge { lag, overlap });
    }
    pearson(&x[..overlap], &y[lag..])
}

/// Largest lag examined by the novelty metric for sequences of length `steps`.
pub fn novelty_max_lag(steps: usize) -> usize {
    let by_formula = (10.0 * (steps as f64 / 2.0).log10()).floor() as usize;
    by_formula.min(steps.saturating_sub(2))
}

/// Cross-user novelty of a batch for one feature: 1 minus the mean (over
/// users) of the best lagged cross-correlation to any other user's trace.
pub fn novelty(trace: &TraceTensor, feature: Feature) -> Result<f64, MetricsError> {
    if trace.users() < 2 {
        return Err(MetricsError::TooFewUsers);
    }
    if trace.steps() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: trace.steps(),
        });
    }
    let max_lag = novelty_max_lag(trace.steps());
    let series: Vec<Vec<f64>> = (0..trace.users())
        .map(|u| trace.series(u, feature))
        .collect();
    let mut total_best = 0.0;
    for (i, xi) in series.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (j, xj) in series.iter().enumerate() {
            if i == j {
                continue;
            }
            for lag in 0..=max_lag {
                best = best.max(cross_correlation(xi, xj, lag)?);
            }
        }
        total_best += best;
    }
    Ok(1.0 - total_best / trace.users() as f64)
}

/// Slow reference implementations, written directly from the defining
/// formulas. They exist to verify the fast path and are used by property
/// tests and the acceptance suite; do not use them for real workloads.
pub mod oracle {
    use super::MomentTriple;
    use crate::trace::{Feature, TraceTensor};

    pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let cov: f64 = (0..x.len()).map(|i| (x[i] - mx) * (y[i] - my)).sum();
        let vx: f64 = (0..x.len()).map(|i| (x[i] - mx) * (x[i] - mx)).sum();
        let vy: f64 = (0..y.len()).map(|i| (y[i] - my) * (y[i] - my)).sum();
        if vx == 0.0 || vy == 0.0 {
            return 0.0;
        }
        cov / vx.sqrt() / vy.sqrt()
    }

    pub fn corr_vector(trace: &TraceTensor) -> Vec<f64> {
        let mut per_user = Vec::new();
        for u in 0..trace.users() {
            let dl = trace.series(u, Feature::Download);
            let ul = trace.series(u, Feature::Upload);
            per_user.push(pearson(&dl, &ul));
        }
        vec![per_user.iter().sum::<f64>() / per_user.len() as f64]
    }

    pub fn corr_distance(a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0;
        for i in 0..a.len() {
            sum += (a[i] - b[i]) * (a[i] - b[i]);
        }
        sum.sqrt()
    }

    pub fn moments(trace: &TraceTensor, feature: Feature) -> MomentTriple {
        let values = trace.feature_values(feature);
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let m2 = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let m3 = values.iter().map(|v| (v - mu).powi(3)).sum::<f64>() / n;
        let sigma = m2.sqrt();
        let skew = if sigma > 0.0 { m3 / sigma.powi(3) } else { 0.0 };
        MomentTriple { mu, sigma, skew }
    }

    pub fn moments_distance(a: &MomentTriple, b: &MomentTriple) -> f64 {
        (a.mu - b.mu).powi(2) + (a.sigma - b.sigma).powi(2) + (a.skew - b.skew).powi(2)
    }

    pub fn cross_correlation(x: &[f64], y: &[f64], lag: usize) -> f64 {
        let shifted_x: Vec<f64> = x[..x.len() - lag].to_vec();
        let shifted_y: Vec<f64> = y[lag..].to_vec();
        pearson(&shifted_x, &shifted_y)
    }

    pub fn novelty(trace: &TraceTensor, feature: Feature) -> f64 {
        let max_lag = super::novelty_max_lag(trace.steps());
        let users = trace.users();
        let mut sum_best = 0.0;
        for i in 0..users {
            let xi = trace.series(i, feature);
            let mut best = f64::NEG_INFINITY;
            for j in 0..users {
                if j == i {
                    continue;
                }
                let xj = trace.series(j, feature);
                for lag in 0..=max_lag {
                    let r = cross_correlation(&xi, &xj, lag);
                    if r > best {
                        best = r;
                    }
                }
            }
            sum_best += best;
        }
        1.0 - sum_best / users as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn random_tensor(seed: u64, users: usize, steps: usize) -> TraceTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..users * steps * 2).map(|_| rng.gen::<f64>()).collect();
        TraceTensor::from_values(users, steps, values, crate::trace::Normalization::Raw).unwrap()
    }

    #[test]
    fn pearson_perfect_and_inverse() {
        assert_close(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-12);
        assert_close(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, 1e-12);
    }

    #[test]
    fn pearson_direct_formula_case() {
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_close(r, 0.8, 1e-12);
    }

    #[test]
    fn pearson_constant_sequence_is_zero() {
        assert_eq!(pearson(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_rejects_bad_lengths() {
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn corr_vector_is_mean_over_users() {
        // User 0 has r = 1, user 1 has r = -1; mean is 0.
        let mut t = TraceTensor::zeros(2, 3);
        for (k, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            t.set(0, k, Feature::Download, *v);
            t.set(0, k, Feature::Upload, *v);
            t.set(1, k, Feature::Download, *v);
            t.set(1, k, Feature::Upload, 4.0 - *v);
        }
        let cv = corr_vector(&t).unwrap();
        assert_eq!(cv.entries.len(), 1);
        assert_close(cv.entries[0], 0.0, 1e-12);
    }

    #[test]
    fn corr_distance_cases() {
        let d = corr_distance(
            &CorrVector { entries: vec![0.5] },
            &CorrVector { entries: vec![0.1] },
        )
        .unwrap();
        assert_close(d, 0.4, 1e-12);
        let d3 = corr_distance(
            &CorrVector {
                entries: vec![0.2, 0.4, 0.6],
            },
            &CorrVector {
                entries: vec![0.2, 0.1, 0.6],
            },
        )
        .unwrap();
        assert_close(d3, 0.3, 1e-12);
        assert!(corr_distance(
            &CorrVector { entries: vec![0.1] },
            &CorrVector { entries: vec![0.1, 0.2] }
        )
        .is_err());
    }

    #[test]
    fn moments_of_step_series() {
        let m = moments_of(&[0.0, 0.0, 0.0, 1.0]);
        assert_close(m.mu, 0.25, 1e-12);
        assert_close(m.sigma, 0.4330127018922193, 1e-12);
        assert_close(m.skew, 2.0 / 3.0f64.sqrt(), 1e-12);
    }

    #[test]
    fn moments_constant_and_symmetric() {
        let c = moments_of(&[4.0, 4.0, 4.0]);
        assert_eq!((c.mu, c.sigma, c.skew), (4.0, 0.0, 0.0));
        let s = moments_of(&[1.0, 2.0, 3.0]);
        assert_close(s.skew, 0.0, 1e-12);
    }

    #[test]
    fn moments_distance_cases() {
        let a = MomentTriple {
            mu: 0.25,
            sigma: 0.4330127018922193,
            skew: 1.1547005383792515,
        };
        let b = MomentTriple {
            mu: 0.75,
            sigma: 0.4330127018922193,
            skew: -1.1547005383792515,
        };
        assert_close(moments_distance(&a, &a), 0.0, 1e-12);
        assert_close(moments_distance(&a, &b), 5.583333333333333, 1e-9);
        let c = MomentTriple {
            mu: 1.25,
            sigma: 0.4330127018922193,
            skew: 1.1547005383792515,
        };
        assert_close(moments_distance(&a, &c), 1.0, 1e-12);
    }

    #[test]
    fn cross_correlation_alignment() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        assert_close(cross_correlation(&x, &x, 0).unwrap(), 1.0, 1e-12);
        // y is x shifted forward by 2 steps.
        let mut y = [0.0; 6];
        y[2..].copy_from_slice(&x[..4]);
        assert_close(cross_correlation(&x, &y, 2).unwrap(), 1.0, 1e-12);
        assert!(cross_correlation(&x, &x, 5).is_err());
    }

    #[test]
    fn novelty_lag_bound() {
        assert_eq!(novelty_max_lag(12), 7);
        assert_eq!(novelty_max_lag(2), 0);
        // The formula would allow lag 3 at K=4, but overlap needs 2 points.
        assert_eq!(novelty_max_lag(4), 2);
    }

    #[test]
    fn novelty_of_identical_traces_is_zero() {
        let mut t = TraceTensor::zeros(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        for u in 0..4 {
            for k in 0..12 {
                t.set(u, k, Feature::Download, row[k]);
                t.set(u, k, Feature::Upload, row[k]);
            }
        }
        assert_close(novelty(&t, Feature::Download).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn novelty_requires_two_users() {
        let t = random_tensor(0, 1, 8);
        assert!(matches!(
            novelty(&t, Feature::Download),
            Err(MetricsError::TooFewUsers)
        ));
    }

    #[test]
    fn metrics_match_oracles_on_random_tensors() {
        for seed in 0..50 {
            let t = random_tensor(seed, 5, 8);
            let cv = corr_vector(&t).unwrap();
            let cv_o = oracle::corr_vector(&t);
            assert_close(cv.entries[0], cv_o[0], 1e-9);

            for f in Feature::ALL {
                let m = moments(&t, f).unwrap();
                let m_o = oracle::moments(&t, f);
                assert_close(m.mu, m_o.mu, 1e-9);
                assert_close(m.sigma, m_o.sigma, 1e-9);
                assert_close(m.skew, m_o.skew, 1e-9);
            }

            let n = novelty(&t, Feature::Download).unwrap();
            let n_o = oracle::novelty(&t, Feature::Download);
            assert_close(n, n_o, 1e-9);

            let x = t.series(0, Feature::Download);
            let y = t.series(1, Feature::Download);
            for lag in 0..=novelty_max_lag(t.steps()) {
                assert_close(
                    cross_correlation(&x, &y, lag).unwrap(),
                    oracle::cross_correlation(&x, &y, lag),
                    1e-9,
                );
            }
        }
    }

    #[test]
    fn lag_shifted_copy_scores_below_independent_noise() {
        // Replacing a lag-shifted clone with fresh noise should raise novelty
        // nearly always; require 95% over seeds.
        let mut successes = 0;
        let trials = 60;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let users = 6;
            let steps = 24;
            let mut t = random_tensor(seed, users, steps);
            // Make user 1 a lag-2 copy of user 0.
            for k in 0..steps {
                let src = (k + steps - 2) % steps;
                let v = t.get(0, src, Feature::Download);
                t.set(1, k, Feature::Download, v);
            }
            let with_copy = novelty(&t, Feature::Download).unwrap();
            for k in 0..steps {
                t.set(1, k, Feature::Download, rng.gen::<f64>());
            }
            let with_noise = novelty(&t, Feature::Download).unwrap();
            if with_copy < with_noise {
                successes += 1;
            }
        }
        assert!(
            successes as f64 >= 0.95 * trials as f64,
            "only {successes}/{trials} seeds ranked correctly"
        );
    }

    proptest! {
        #[test]
        fn pearson_scale_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 4..20),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().rev().map(|v| v * 0.5 + 1.0).collect();
            let scaled: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            let r1 = pearson(&xs, &ys).unwrap();
            let r2 = pearson(&scaled, &ys).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-9);
            let sym = pearson(&ys, &xs).unwrap();
            prop_assert!((r1 - sym).abs() < 1e-12);
        }

        #[test]
        fn distances_are_symmetric_and_bounded(
            a in proptest::collection::vec(-1.0f64..1.0, 3),
            b in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let ca = CorrVector { entries: a.clone() };
            let cb = CorrVector { entries: b.clone() };
            let d1 = corr_distance(&ca, &cb).unwrap();
            let d2 = corr_distance(&cb, &ca).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!(d1 <= 2.0 * 3.0f64.sqrt() + 1e-12);
            prop_assert!(d1 >= 0.0);
            if a == b {
                prop_assert!(d1 == 0.0);
            }

            let ma = MomentTriple { mu: a[0], sigma: a[1].abs(), skew: a[2] };
            let mb = MomentTriple { mu: b[0], sigma: b[1].abs(), skew: b[2] };
            let md1 = moments_distance(&ma, &mb);
            let md2 = moments_distance(&mb, &ma);
            prop_assert!((md1 - md2).abs() < 1e-12);
            prop_assert!(md1 >= 0.0);
        }

        #[test]
        fn novelty_stays_in_range(seed in 0u64..500) {
            let t = random_tensor(seed, 4, 10);
            let n = novelty(&t, Feature::Download).unwrap();
            prop_assert!((0.0..=2.0).contains(&n));
        }
    }
}
