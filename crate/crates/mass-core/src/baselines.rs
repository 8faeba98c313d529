//! Benchmark generators: a min/max uniform fit and a maximum-likelihood fit
//! over a fixed set of candidate distribution families. Both sample features
//! independently, which is what keeps them from reproducing cross-feature
//! correlation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::trace::{Feature, Normalization, TraceTensor};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("empty trace")]
    EmptyTrace,
}

const MAX_ITERS: usize = 200;
const TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Uniform,
    Normal,
    LogNormal,
    Exponential,
    Gamma,
    Beta,
    Weibull,
}

impl Family {
    fn param_count(self) -> usize {
        match self {
            Family::Exponential => 1,
            _ => 2,
        }
    }
}

/// A fitted, seedable sampler for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Normal { mu: f64, sigma: f64 },
    LogNormal { mu_log: f64, sigma_log: f64 },
    Exponential { lambda: f64 },
    Gamma { shape: f64, scale: f64 },
    Beta { alpha: f64, beta: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl Sampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampler::Constant { value } => value,
            Sampler::Uniform { lo, hi } => rng.gen_range(lo..=hi),
            Sampler::Normal { mu, sigma } => {
                rand_distr::Normal::new(mu, sigma).unwrap().sample(rng)
            }
            Sampler::LogNormal { mu_log, sigma_log } => {
                rand_distr::LogNormal::new(mu_log, sigma_log).unwrap().sample(rng)
            }
            Sampler::Exponential { lambda } => {
                rand_distr::Exp::new(lambda).unwrap().sample(rng)
            }
            Sampler::Gamma { shape, scale } => {
                rand_distr::Gamma::new(shape, scale).unwrap().sample(rng)
            }
            Sampler::Beta { alpha, beta } => {
                rand_distr::Beta::new(alpha, beta).unwrap().sample(rng)
            }
            Sampler::Weibull { shape, scale } => {
                rand_distr::Weibull::new(scale, shape).unwrap().sample(rng)
            }
        }
    }

    /// CDF of the fitted distribution (step function for constants).
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Sampler::Constant { value } => {
                if x >= value {
                    1.0
                } else {
                    0.0
                }
            }
            Sampler::Uniform { lo, hi } => statrs::distribution::Uniform::new(lo, hi)
                .unwrap()
                .cdf(x),
            Sampler::Normal { mu, sigma } => {
                statrs::distribution::Normal::new(mu, sigma).unwrap().cdf(x)
            }
            Sampler::LogNormal { mu_log, sigma_log } => {
                statrs::distribution::LogNormal::new(mu_log, sigma_log)
                    .unwrap()
                    .cdf(x)
            }
            Sampler::Exponential { lambda } => {
                statrs::distribution::Exp::new(lambda).unwrap().cdf(x)
            }
            Sampler::Gamma { shape, scale } => statrs::distribution::Gamma::new(shape, 1.0 / scale)
                .unwrap()
                .cdf(x),
            Sampler::Beta { alpha, beta } => statrs::distribution::Beta::new(alpha, beta)
                .unwrap()
                .cdf(x),
            Sampler::Weibull { shape, scale } => {
                statrs::distribution::Weibull::new(shape, scale).unwrap().cdf(x)
            }
        }
    }
}

/// Min/max uniform fit of one feature.
pub fn uniform_fit(trace: &TraceTensor, feature: Feature) -> Result<Sampler, FitError> {
    let values = trace.feature_values(feature);
    if values.is_empty() {
        return Err(FitError::EmptyTrace);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(if lo == hi {
        Sampler::Constant { value: lo }
    } else {
        Sampler::Uniform { lo, hi }
    })
}

/// Outcome of a maximum-likelihood family fit.
#[derive(Debug, Clone)]
pub struct DistFit {
    pub family: Family,
    pub sampler: Sampler,
    pub log_likelihood: f64,
    /// True when every family failed and the min/max uniform fit took over.
    pub fallback: bool,
}

struct Candidate {
    family: Family,
    sampler: Sampler,
    log_likelihood: f64,
}

/// Maximum-likelihood fit over the candidate families, lumping all user steps
/// of one feature. The best log-likelihood wins; ties go to the family with
/// fewer parameters.
pub fn dist_fit(trace: &TraceTensor, feature: Feature) -> Result<DistFit, FitError> {
    let values = trace.feature_values(feature);
    if values.len() < 10 {
        return Err(FitError::TooFewObservations {
            need: 10,
            got: values.len(),
        });
    }
    let (_, var) = mean_and_var(&values);
    if var == 0.0 {
        // Degenerate data: every family collapses, fall back to the range fit.
        return Ok(DistFit {
            family: Family::Uniform,
            sampler: uniform_fit(trace, feature)?,
            log_likelihood: f64::NEG_INFINITY,
            fallback: true,
        });
    }

    let mut candidates = Vec::new();
    for fit in [
        fit_uniform, fit_normal, fit_lognormal, fit_exponential, fit_gamma, fit_beta,
        fit_weibull,
    ] {
        if let Some(c) = fit(&values) {
            if c.log_likelihood.is_finite() {
                candidates.push(c);
            }
        }
    }

    match candidates.into_iter().max_by(|a, b| {
        (a.log_likelihood, std::cmp::Reverse(a.family.param_count()))
            .partial_cmp(&(b.log_likelihood, std::cmp::Reverse(b.family.param_count())))
            .unwrap_or(std::cmp::Ordering::Equal)
    }) {
        Some(best) => Ok(DistFit {
            family: best.family,
            sampler: best.sampler,
            log_likelihood: best.log_likelihood,
            fallback: false,
        }),
        None => {
            let sampler = uniform_fit(trace, feature)?;
            Ok(DistFit {
                family: Family::Uniform,
                sampler,
                log_likelihood: f64::NEG_INFINITY,
                fallback: true,
            })
        }
    }
}

fn fit_uniform(x: &[f64]) -> Option<Candidate> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    Some(Candidate {
        family: Family::Uniform,
        sampler: Sampler::Uniform { lo, hi },
        log_likelihood: -(x.len() as f64) * (hi - lo).ln(),
    })
}

fn mean_and_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

fn fit_normal(x: &[f64]) -> Option<Candidate> {
    let n = x.len() as f64;
    let (mu, var) = mean_and_var(x);
    if var <= 0.0 {
        return None;
    }
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);
    Some(Candidate {
        family: Family::Normal,
        sampler: Sampler::Normal {
            mu,
            sigma: var.sqrt(),
        },
        log_likelihood: ll,
    })
}

fn fit_lognormal(x: &[f64]) -> Option<Candidate> {
    if x.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let logs: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mu, var) = mean_and_var(&logs);
    if var <= 0.0 {
        return None;
    }
    let ll = -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0)
        - logs.iter().sum::<f64>();
    Some(Candidate {
        family: Family::LogNormal,
        sampler: Sampler::LogNormal {
            mu_log: mu,
            sigma_log: var.sqrt(),
        },
        log_likelihood: ll,
    })
}

fn fit_exponential(x: &[f64]) -> Option<Candidate> {
    if x.iter().any(|&v| v < 0.0) {
        return None;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return None;
    }
    let lambda = 1.0 / mean;
    Some(Candidate {
        family: Family::Exponential,
        sampler: Sampler::Exponential { lambda },
        log_likelihood: n * lambda.ln() - n,
    })
}

fn fit_gamma(x: &[f64]) -> Option<Candidate> {
    if x.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if s <= 0.0 {
        return None;
    }
    // Newton on ln(k) - digamma(k) = s, standard closed-form start.
    let mut k = (3.0 - s + ((s - 3.0) * (s - 3.0) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..MAX_ITERS {
        let f = k.ln() - digamma(k) - s;
        let fp = 1.0 / k - trigamma(k);
        let step = f / fp;
        k -= step;
        if !(k.is_finite() && k > 0.0) {
            return None;
        }
        if step.abs() < TOLERANCE {
            break;
        }
    }
    let scale = mean / k;
    let ll = (k - 1.0) * n * mean_log - n * mean / scale - n * k * scale.ln() - n * ln_gamma(k);
    Some(Candidate {
        family: Family::Gamma,
        sampler: Sampler::Gamma { shape: k, scale },
        log_likelihood: ll,
    })
}

fn trigamma(x: f64) -> f64 {
    let h = 1e-6;
    (digamma(x + h) - digamma(x - h)) / (2.0 * h)
}

fn fit_beta(x: &[f64]) -> Option<Candidate> {
    if x.iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return None;
    }
    let n = x.len() as f64;
    let (m, v) = mean_and_var(x);
    if v <= 0.0 || v >= m * (1.0 - m) {
        return None;
    }
    // Method-of-moments start, then Newton with a numeric Jacobian.
    let common = m * (1.0 - m) / v - 1.0;
    let mut alpha = m * common;
    let mut beta = (1.0 - m) * common;
    let g1 = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let g2 = x.iter().map(|v| (1.0 - v).ln()).sum::<f64>() / n;
    for _ in 0..MAX_ITERS {
        let psi_ab = digamma(alpha + beta);
        let f1 = digamma(alpha) - psi_ab - g1;
        let f2 = digamma(beta) - psi_ab - g2;
        let t_ab = trigamma(alpha + beta);
        let j11 = trigamma(alpha) - t_ab;
        let j12 = -t_ab;
        let j22 = trigamma(beta) - t_ab;
        let det = j11 * j22 - j12 * j12;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (f1 * j22 - f2 * j12) / det;
        let db = (f2 * j11 - f1 * j12) / det;
        alpha -= da;
        beta -= db;
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return None;
        }
        if da.abs().max(db.abs()) < TOLERANCE {
            break;
        }
    }
    let ln_beta_fn = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
    let ll = (alpha - 1.0) * n * g1 + (beta - 1.0) * n * g2 - n * ln_beta_fn;
    Some(Candidate {
        family: Family::Beta,
        sampler: Sampler::Beta { alpha, beta },
        log_likelihood: ll,
    })
}

fn fit_weibull(x: &[f64]) -> Option<Candidate> {
    if x.iter().any(|&v| v <= 0.0) {
        return None;
    }
    let n = x.len() as f64;
    let mean_log = x.iter().map(|v| v.ln()).sum::<f64>() / n;
    let mut k = 1.0;
    for _ in 0..MAX_ITERS {
        let (mut sxk, mut sxk_log, mut sxk_log2) = (0.0, 0.0, 0.0);
        for &v in x {
            let xk = v.powf(k);
            let lv = v.ln();
            sxk += xk;
            sxk_log += xk * lv;
            sxk_log2 += xk * lv * lv;
        }
        let f = sxk_log / sxk - 1.0 / k - mean_log;
        let fp = (sxk_log2 * sxk - sxk_log * sxk_log) / (sxk * sxk) + 1.0 / (k * k);
        let step = f / fp;
        k -= step;
        if !(k.is_finite() && k > 0.0) {
            return None;
        }
        if step.abs() < TOLERANCE {
            break;
        }
    }
    let scale = (x.iter().map(|v| v.powf(k)).sum::<f64>() / n).powf(1.0 / k);
    let ll: f64 = x
        .iter()
        .map(|&v| {
            k.ln() - k * scale.ln() + (k - 1.0) * v.ln() - (v / scale).powf(k)
        })
        .sum();
    Some(Candidate {
        family: Family::Weibull,
        sampler: Sampler::Weibull { shape: k, scale },
        log_likelihood: ll,
    })
}

/// Draw a `users x steps` batch with independent per-feature samplers.
pub fn baseline_generate(
    dl: &Sampler,
    ul: &Sampler,
    users: usize,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> TraceTensor {
    let mut values = Vec::with_capacity(users * steps * 2);
    for _ in 0..users * steps {
        values.push(dl.sample(rng));
        values.push(ul.sample(rng));
    }
    TraceTensor::from_values(users, steps, values, Normalization::Raw).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use rand::SeedableRng;

    fn tensor_of(values: Vec<f64>) -> TraceTensor {
        let n = values.len() / 2;
        TraceTensor::from_values(1, n, values, Normalization::Raw).unwrap()
    }

    #[test]
    fn uniform_fit_respects_observed_range() {
        let t = tensor_of(vec![2.0, 1.0, 4.0, 1.0, 6.0, 1.0]);
        let s = uniform_fit(&t, Feature::Download).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = s.sample(&mut rng);
            assert!((2.0..=6.0).contains(&v));
        }
    }

    #[test]
    fn uniform_fit_of_constant_is_constant() {
        let t = tensor_of(vec![3.0, 0.0, 3.0, 0.0, 3.0, 0.0]);
        let s = uniform_fit(&t, Feature::Download).unwrap();
        assert_eq!(s, Sampler::Constant { value: 3.0 });
    }

    #[test]
    fn uniform_fit_sample_mean_converges() {
        let t = tensor_of((0..200).flat_map(|i| [i as f64 / 199.0, 0.0]).collect());
        let s = uniform_fit(&t, Feature::Download).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    fn recovery_trial(family: Family, seed: u64) -> Family {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = match family {
            Family::Beta => Sampler::Beta { alpha: 2.0, beta: 5.0 },
            Family::Gamma => Sampler::Gamma { shape: 3.0, scale: 0.5 },
            Family::LogNormal => Sampler::LogNormal { mu_log: 0.0, sigma_log: 0.5 },
            _ => unreachable!(),
        };
        let n = 10_000;
        let values: Vec<f64> = (0..n).flat_map(|_| [source.sample(&mut rng), 0.0]).collect();
        let t = TraceTensor::from_values(n, 1, values, Normalization::Raw).unwrap();
        dist_fit(&t, Feature::Download).unwrap().family
    }

    #[test]
    fn dist_fit_recovers_generating_families() {
        for family in [Family::Beta, Family::Gamma, Family::LogNormal] {
            let mut hits = 0;
            for seed in 0..10 {
                if recovery_trial(family, 100 + seed) == family {
                    hits += 1;
                }
            }
            assert!(hits >= 9, "{family:?} recovered only {hits}/10 times");
        }
    }

    #[test]
    fn dist_fit_on_uniform_data_is_close_in_ks_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let t = TraceTensor::from_values(
            n,
            1,
            values.iter().flat_map(|&v| [v, 0.0]).collect(),
            Normalization::Raw,
        )
        .unwrap();
        let fit = dist_fit(&t, Feature::Download).unwrap();
        assert!(
            matches!(fit.family, Family::Uniform | Family::Beta),
            "picked {:?}",
            fit.family
        );
        // KS distance between the fitted CDF and the source sample.
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ks = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let emp_hi = (i + 1) as f64 / n as f64;
                let emp_lo = i as f64 / n as f64;
                let c = fit.sampler.cdf(v);
                (c - emp_lo).abs().max((emp_hi - c).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(ks < 0.05, "ks {ks}");
    }

    #[test]
    fn dist_fit_constant_data_falls_back() {
        let t = TraceTensor::from_values(
            12,
            1,
            (0..12).flat_map(|_| [2.0, 0.0]).collect(),
            Normalization::Raw,
        )
        .unwrap();
        let fit = dist_fit(&t, Feature::Download).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.sampler, Sampler::Constant { value: 2.0 });
    }

    #[test]
    fn dist_fit_needs_ten_observations() {
        let t = tensor_of(vec![1.0, 0.0, 2.0, 0.0]);
        assert!(matches!(
            dist_fit(&t, Feature::Download),
            Err(FitError::TooFewObservations { .. })
        ));
    }

    #[test]
    fn baseline_features_are_statistically_independent() {
        let dl = Sampler::Uniform { lo: 0.0, hi: 1.0 };
        let ul = Sampler::Beta { alpha: 2.0, beta: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = baseline_generate(&dl, &ul, 100, 12, &mut rng);
        let dls = batch.feature_values(Feature::Download);
        let uls = batch.feature_values(Feature::Upload);
        let r = metrics::pearson(&dls, &uls).unwrap();
        assert!(r.abs() < 0.1, "r {r}");
    }

    #[test]
    fn baseline_generate_is_seeded() {
        let dl = Sampler::Uniform { lo: 0.0, hi: 1.0 };
        let ul = Sampler::Uniform { lo: 0.0, hi: 1.0 };
        let a = baseline_generate(&dl, &ul, 5, 6, &mut ChaCha8Rng::seed_from_u64(3));
        let b = baseline_generate(&dl, &ul, 5, 6, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
