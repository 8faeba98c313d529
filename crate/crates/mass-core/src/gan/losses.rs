//! Loss functions for generator and discriminator training, with exact
//! reverse-mode gradients composed through both networks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{
    disc_backward_user, disc_forward_user, disc_layout, gen_backward_user, gen_forward_user,
    gen_layout, DiscUserCache,
};
use super::{GanError, GanModel, LatentBatch, TargetStats, FEATURE_DIM};
use crate::metrics::{self, CorrVector, MomentTriple};
use crate::trace::TraceTensor;

/// Probabilities are clamped away from the log singularities by this margin.
pub const LOG_CLAMP: f64 = 1e-7;

/// Whether statistic losses act on raw generated samples or on discriminator
/// logit representations of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsMode {
    Raw,
    Representation,
}

/// Which generator loss a gradient is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenLossKind {
    Discrimination,
    CorrDist,
    MomDist,
    Total,
}

/// Component values of one generator loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GenEval {
    pub l_disc: f64,
    pub l_corr: f64,
    pub l_mom: f64,
    /// `l_disc + delta_corr * l_corr + delta_mom * l_mom`.
    pub total: f64,
}

fn ln_clamped(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// Generator discrimination loss: mean log(1 - D) over per-trace probabilities.
pub fn loss_discrimination(trace_probs: &[f64]) -> f64 {
    let b = trace_probs.len() as f64;
    trace_probs.iter().map(|&d| ln_clamped(1.0 - d)).sum::<f64>() / b
}

/// Discriminator training loss over matched real/generated batches.
pub fn loss_discriminator_train(
    probs_real: &[f64],
    probs_gen: &[f64],
) -> Result<f64, GanError> {
    if probs_real.len() != probs_gen.len() {
        return Err(GanError::BatchMismatch(probs_real.len(), probs_gen.len()));
    }
    let k = probs_real.len() as f64;
    let sum: f64 = probs_real
        .iter()
        .zip(probs_gen)
        .map(|(&r, &g)| -ln_clamped(r) - ln_clamped(1.0 - g))
        .sum();
    Ok(sum / k)
}

/// Zero the opposite feature channel of a trace (for single-feature
/// representations fed to the discriminator).
fn isolate_channel(values: &[f64], keep: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (i, v) in values.iter().enumerate() {
        if i % FEATURE_DIM == keep {
            out[i] = *v;
        }
    }
    out
}

/// Statistic sequences of one user's generated trace under a mode: for the
/// correlation loss a (download-ish, upload-ish) pair, for the moments loss a
/// single flat sample.
fn corr_sequences(
    model: &GanModel,
    user_values: &[f64],
    steps: usize,
    mode: StatsMode,
) -> (Vec<f64>, Vec<f64>) {
    match mode {
        StatsMode::Raw => {
            let dl: Vec<f64> = (0..steps).map(|t| user_values[t * FEATURE_DIM]).collect();
            let ul: Vec<f64> = (0..steps)
                .map(|t| user_values[t * FEATURE_DIM + 1])
                .collect();
            (dl, ul)
        }
        StatsMode::Representation => {
            let lay = disc_layout(&model.config);
            let dl_trace = isolate_channel(user_values, 0);
            let ul_trace = isolate_channel(user_values, 1);
            let dl = disc_forward_user(&model.disc_params, &lay, steps, &dl_trace).logits;
            let ul = disc_forward_user(&model.disc_params, &lay, steps, &ul_trace).logits;
            (dl, ul)
        }
    }
}

fn mom_sample(
    model: &GanModel,
    user_values: &[f64],
    steps: usize,
    mode: StatsMode,
) -> Vec<f64> {
    match mode {
        StatsMode::Raw => user_values.to_vec(),
        StatsMode::Representation => {
            let lay = disc_layout(&model.config);
            disc_forward_user(&model.disc_params, &lay, steps, user_values).logits
        }
    }
}

/// Correlation-distance loss of a generated batch against the target
/// correlation. In raw mode this equals `corr_distance` applied to the
/// target as a 1-vector and `corr_vector` of the batch.
pub fn loss_corr_dist(
    model: &GanModel,
    batch: &TraceTensor,
    stats: &TargetStats,
    mode: StatsMode,
) -> Result<f64, GanError> {
    let target = CorrVector {
        entries: vec![stats.c_target],
    };
    match mode {
        StatsMode::Raw => Ok(metrics::corr_distance(&target, &metrics::corr_vector(batch)?)?),
        StatsMode::Representation => {
            let mut sum = 0.0;
            for u in 0..batch.users() {
                let (x, y) = corr_sequences(model, batch.user_values(u), batch.steps(), mode);
                sum += metrics::pearson(&x, &y)?;
            }
            let mean = sum / batch.users() as f64;
            Ok(metrics::corr_distance(&target, &CorrVector { entries: vec![mean] })?)
        }
    }
}

/// Moments-distance loss of a generated batch: squared errors of the
/// batch-mean per-user moment estimates against the targets.
pub fn loss_mom_dist(
    model: &GanModel,
    batch: &TraceTensor,
    stats: &TargetStats,
    mode: StatsMode,
) -> Result<f64, GanError> {
    let mut mean = MomentTriple {
        mu: 0.0,
        sigma: 0.0,
        skew: 0.0,
    };
    for u in 0..batch.users() {
        let sample = mom_sample(model, batch.user_values(u), batch.steps(), mode);
        let m = metrics::moments_of(&sample);
        mean.mu += m.mu;
        mean.sigma += m.sigma;
        mean.skew += m.skew;
    }
    let b = batch.users() as f64;
    mean.mu /= b;
    mean.sigma /= b;
    mean.skew /= b;
    Ok((stats.mu_target - mean.mu).powi(2)
        + (stats.sigma_target - mean.sigma).powi(2)
        + (stats.skew_target - mean.skew).powi(2))
}

/// Pearson coefficient with its derivative with respect to both sequences.
/// Constant sequences yield r = 0 with zero derivatives.
fn pearson_with_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, vec![0.0; x.len()], vec![0.0; y.len()]);
    }
    let denom = (sxx * syy).sqrt();
    let r = sxy / denom;
    let dx: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| ((b - my) - sxy * (a - mx) / sxx) / denom)
        .collect();
    let dy: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| ((a - mx) - sxy * (b - my) / syy) / denom)
        .collect();
    (r, dx, dy)
}

/// Moment triple of a sample with derivatives of sigma and skewness with
/// respect to every element (the mean's derivative is uniformly 1/n).
fn moments_with_grad(v: &[f64]) -> (MomentTriple, Vec<f64>, Vec<f64>) {
    let n = v.len() as f64;
    let m = metrics::moments_of(v);
    if m.sigma == 0.0 {
        return (m, vec![0.0; v.len()], vec![0.0; v.len()]);
    }
    let m2 = m.sigma * m.sigma;
    let m3 = m.skew * m.sigma.powi(3);
    let mut d_sigma = Vec::with_capacity(v.len());
    let mut d_skew = Vec::with_capacity(v.len());
    for &vj in v {
        let d = vj - m.mu;
        let dm2 = 2.0 * d / n;
        let dm3 = 3.0 * (d * d - m2) / n;
        d_sigma.push(d / (n * m.sigma));
        d_skew.push(dm3 / m2.powf(1.5) - 1.5 * m3 * dm2 / m2.powf(2.5));
    }
    (m, d_sigma, d_skew)
}

fn fixed_chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    // Chunk boundaries depend only on n so parallel reductions stay
    // deterministic regardless of thread scheduling.
    const CHUNKS: usize = 8;
    if n == 0 {
        return Vec::new();
    }
    let size = n.div_ceil(CHUNKS.min(n));
    (0..n)
        .step_by(size)
        .map(|s| s..(s + size).min(n))
        .collect()
}

struct UserWork {
    gen: super::net::GenUserCache,
    disc_full: Option<DiscUserCache>,
    disc_dl: Option<DiscUserCache>,
    disc_ul: Option<DiscUserCache>,
    trace_prob: f64,
    r: f64,
    dr_dx: Vec<f64>,
    dr_dy: Vec<f64>,
    mom: MomentTriple,
    d_sigma: Vec<f64>,
    d_skew: Vec<f64>,
}

/// Evaluate the generator loss components on a latent batch.
pub fn generator_losses(
    model: &GanModel,
    z: &LatentBatch,
    stats: &TargetStats,
    mode: StatsMode,
    delta_corr: f64,
    delta_mom: f64,
) -> Result<GenEval, GanError> {
    let batch = super::generator_forward(model, z)?;
    let probs = super::discriminator_forward(model, &batch)?;
    let l_disc = loss_discrimination(&probs.trace_probs);
    let l_corr = loss_corr_dist(model, &batch, stats, mode)?;
    let l_mom = loss_mom_dist(model, &batch, stats, mode)?;
    Ok(GenEval {
        l_disc,
        l_corr,
        l_mom,
        total: l_disc + delta_corr * l_corr + delta_mom * l_mom,
    })
}

/// Compute the selected generator loss and its exact gradient with respect
/// to the generator parameters.
pub fn generator_gradients(
    model: &GanModel,
    z: &LatentBatch,
    stats: &TargetStats,
    mode: StatsMode,
    delta_corr: f64,
    delta_mom: f64,
    kind: GenLossKind,
) -> Result<(GenEval, Vec<f64>), GanError> {
    model.validate()?;
    let g_lay = gen_layout(&model.config);
    let d_lay = disc_layout(&model.config);
    let steps = z.steps;
    let b = z.users;

    let need_disc = matches!(kind, GenLossKind::Discrimination | GenLossKind::Total)
        || mode == StatsMode::Representation;
    let need_corr_branches =
        mode == StatsMode::Representation && matches!(kind, GenLossKind::CorrDist | GenLossKind::Total);

    // Phase A: per-user forwards and local statistics, in fixed chunks.
    let chunk_work: Vec<Vec<UserWork>> = fixed_chunks(b)
        .into_par_iter()
        .map(|range| {
            range
                .map(|u| {
                    let gen = gen_forward_user(&model.gen_params, &g_lay, steps, z.user(u));
                    let x = &gen.outputs;
                    let disc_full = need_disc
                        .then(|| disc_forward_user(&model.disc_params, &d_lay, steps, x));
                    let trace_prob = disc_full.as_ref().map_or(0.5, |c| {
                        c.logits.iter().map(|&l| super::lstm::sigmoid(l)).sum::<f64>()
                            / steps as f64
                    });

                    let (seq_x, seq_y, disc_dl, disc_ul) = match mode {
                        StatsMode::Raw => {
                            let (x_seq, y_seq) = corr_sequences(model, x, steps, StatsMode::Raw);
                            (x_seq, y_seq, None, None)
                        }
                        StatsMode::Representation => {
                            let dl_trace = isolate_channel(x, 0);
                            let ul_trace = isolate_channel(x, 1);
                            let dl =
                                disc_forward_user(&model.disc_params, &d_lay, steps, &dl_trace);
                            let ul =
                                disc_forward_user(&model.disc_params, &d_lay, steps, &ul_trace);
                            let (lx, ly) = (dl.logits.clone(), ul.logits.clone());
                            if need_corr_branches {
                                (lx, ly, Some(dl), Some(ul))
                            } else {
                                (lx, ly, None, None)
                            }
                        }
                    };
                    let (r, dr_dx, dr_dy) = pearson_with_grad(&seq_x, &seq_y);

                    let mom_sample_values = match mode {
                        StatsMode::Raw => x.to_vec(),
                        StatsMode::Representation => {
                            disc_full.as_ref().expect("disc cache").logits.clone()
                        }
                    };
                    let (mom, d_sigma, d_skew) = moments_with_grad(&mom_sample_values);

                    UserWork {
                        gen,
                        disc_full,
                        disc_dl,
                        disc_ul,
                        trace_prob,
                        r,
                        dr_dx,
                        dr_dy,
                        mom,
                        d_sigma,
                        d_skew,
                    }
                })
                .collect()
        })
        .collect();
    let work: Vec<UserWork> = chunk_work.into_iter().flatten().collect();

    // Phase B: batch-level loss values and upstream scalars.
    let bf = b as f64;
    let mean_r = work.iter().map(|w| w.r).sum::<f64>() / bf;
    let l_corr = metrics::corr_distance(
        &CorrVector {
            entries: vec![stats.c_target],
        },
        &CorrVector {
            entries: vec![mean_r],
        },
    )?;
    let mean_mu = work.iter().map(|w| w.mom.mu).sum::<f64>() / bf;
    let mean_sigma = work.iter().map(|w| w.mom.sigma).sum::<f64>() / bf;
    let mean_skew = work.iter().map(|w| w.mom.skew).sum::<f64>() / bf;
    let l_mom = (stats.mu_target - mean_mu).powi(2)
        + (stats.sigma_target - mean_sigma).powi(2)
        + (stats.skew_target - mean_skew).powi(2);
    let l_disc = if need_disc {
        let trace_probs: Vec<f64> = work.iter().map(|w| w.trace_prob).collect();
        loss_discrimination(&trace_probs)
    } else {
        0.0
    };
    let eval = GenEval {
        l_disc,
        l_corr,
        l_mom,
        total: l_disc + delta_corr * l_corr + delta_mom * l_mom,
    };

    let corr_diff = stats.c_target - mean_r;
    let g_r = if corr_diff == 0.0 {
        0.0
    } else {
        -corr_diff.signum() / bf
    };
    let g_mu = -2.0 * (stats.mu_target - mean_mu) / bf;
    let g_sigma = -2.0 * (stats.sigma_target - mean_sigma) / bf;
    let g_skew = -2.0 * (stats.skew_target - mean_skew) / bf;

    let (w_disc, w_corr, w_mom) = match kind {
        GenLossKind::Discrimination => (1.0, 0.0, 0.0),
        GenLossKind::CorrDist => (0.0, 1.0, 0.0),
        GenLossKind::MomDist => (0.0, 0.0, 1.0),
        GenLossKind::Total => (1.0, delta_corr, delta_mom),
    };

    // Phase C: per-user output gradients composed back through the networks.
    let chunk_grads: Vec<Vec<f64>> = fixed_chunks(b)
        .into_par_iter()
        .map(|range| {
            let mut grad = vec![0.0; g_lay.total];
            for u in range {
                let w = &work[u];
                let x = &w.gen.outputs;
                let n_out = steps * FEATURE_DIM;
                let mut d_x = vec![0.0; n_out];
                let mut d_logits_full = vec![0.0; steps];

                if w_disc != 0.0 {
                    let d_bar = w.trace_prob;
                    if 1.0 - d_bar > LOG_CLAMP {
                        let d_dbar = -w_disc / (bf * (1.0 - d_bar));
                        let cache = w.disc_full.as_ref().expect("disc cache");
                        for t in 0..steps {
                            let p = super::lstm::sigmoid(cache.logits[t]);
                            d_logits_full[t] += d_dbar * p * (1.0 - p) / steps as f64;
                        }
                    }
                }

                match mode {
                    StatsMode::Raw => {
                        if w_corr != 0.0 && g_r != 0.0 {
                            for t in 0..steps {
                                d_x[t * FEATURE_DIM] += w_corr * g_r * w.dr_dx[t];
                                d_x[t * FEATURE_DIM + 1] += w_corr * g_r * w.dr_dy[t];
                            }
                        }
                        if w_mom != 0.0 {
                            let n = x.len() as f64;
                            for j in 0..x.len() {
                                d_x[j] += w_mom
                                    * (g_mu / n
                                        + g_sigma * w.d_sigma[j]
                                        + g_skew * w.d_skew[j]);
                            }
                        }
                    }
                    StatsMode::Representation => {
                        if w_corr != 0.0 && g_r != 0.0 {
                            let mut d_branch = vec![0.0; n_out];
                            let dl_cache = w.disc_dl.as_ref().expect("dl cache");
                            let d_logits: Vec<f64> =
                                w.dr_dx.iter().map(|d| w_corr * g_r * d).collect();
                            disc_backward_user(
                                &model.disc_params,
                                &d_lay,
                                steps,
                                dl_cache,
                                &d_logits,
                                None,
                                Some(&mut d_branch),
                            );
                            for t in 0..steps {
                                d_x[t * FEATURE_DIM] += d_branch[t * FEATURE_DIM];
                            }
                            let mut d_branch = vec![0.0; n_out];
                            let ul_cache = w.disc_ul.as_ref().expect("ul cache");
                            let d_logits: Vec<f64> =
                                w.dr_dy.iter().map(|d| w_corr * g_r * d).collect();
                            disc_backward_user(
                                &model.disc_params,
                                &d_lay,
                                steps,
                                ul_cache,
                                &d_logits,
                                None,
                                Some(&mut d_branch),
                            );
                            for t in 0..steps {
                                d_x[t * FEATURE_DIM + 1] += d_branch[t * FEATURE_DIM + 1];
                            }
                        }
                        if w_mom != 0.0 {
                            let n = steps as f64;
                            for t in 0..steps {
                                d_logits_full[t] += w_mom
                                    * (g_mu / n
                                        + g_sigma * w.d_sigma[t]
                                        + g_skew * w.d_skew[t]);
                            }
                        }
                    }
                }

                if d_logits_full.iter().any(|&d| d != 0.0) {
                    let mut d_from_disc = vec![0.0; n_out];
                    disc_backward_user(
                        &model.disc_params,
                        &d_lay,
                        steps,
                        w.disc_full.as_ref().expect("disc cache"),
                        &d_logits_full,
                        None,
                        Some(&mut d_from_disc),
                    );
                    for j in 0..n_out {
                        d_x[j] += d_from_disc[j];
                    }
                }

                gen_backward_user(&model.gen_params, &g_lay, steps, &w.gen, &d_x, &mut grad);
            }
            grad
        })
        .collect();

    let mut grad = vec![0.0; g_lay.total];
    for chunk in chunk_grads {
        for (g, c) in grad.iter_mut().zip(chunk) {
            *g += c;
        }
    }

    if !grad.iter().all(|v| v.is_finite()) || !eval.total.is_finite() {
        let params_norm = model.gen_params.iter().map(|v| v * v).sum::<f64>().sqrt();
        return Err(GanError::NonFinite {
            what: "generator gradient".into(),
            params_norm,
        });
    }
    Ok((eval, grad))
}

/// Evaluate just the selected generator loss value (used by gradient checks).
pub fn generator_loss_value(
    model: &GanModel,
    z: &LatentBatch,
    stats: &TargetStats,
    mode: StatsMode,
    delta_corr: f64,
    delta_mom: f64,
    kind: GenLossKind,
) -> Result<f64, GanError> {
    let eval = generator_losses(model, z, stats, mode, delta_corr, delta_mom)?;
    Ok(match kind {
        GenLossKind::Discrimination => eval.l_disc,
        GenLossKind::CorrDist => eval.l_corr,
        GenLossKind::MomDist => eval.l_mom,
        GenLossKind::Total => eval.total,
    })
}

/// Discriminator training loss on matched real/generated batches.
pub fn discriminator_loss(
    model: &GanModel,
    real: &TraceTensor,
    z: &LatentBatch,
) -> Result<f64, GanError> {
    let gen_batch = super::generator_forward(model, z)?;
    let real_out = super::discriminator_forward(model, real)?;
    let gen_out = super::discriminator_forward(model, &gen_batch)?;
    loss_discriminator_train(&real_out.trace_probs, &gen_out.trace_probs)
}

/// Discriminator training loss and its exact gradient with respect to the
/// discriminator parameters.
pub fn discriminator_gradients(
    model: &GanModel,
    real: &TraceTensor,
    z: &LatentBatch,
) -> Result<(f64, Vec<f64>), GanError> {
    model.validate()?;
    if real.users() != z.users {
        return Err(GanError::BatchMismatch(real.users(), z.users));
    }
    if real.steps() != z.steps {
        return Err(GanError::BatchMismatch(real.steps(), z.steps));
    }
    let g_lay = gen_layout(&model.config);
    let d_lay = disc_layout(&model.config);
    let steps = z.steps;
    let b = z.users;
    let bf = b as f64;

    struct DiscWork {
        real_cache: DiscUserCache,
        gen_cache: DiscUserCache,
        d_real: f64,
        d_gen: f64,
    }

    let chunk_out: Vec<(Vec<f64>, f64)> = fixed_chunks(b)
        .into_par_iter()
        .map(|range| {
            let mut grad = vec![0.0; d_lay.total];
            let mut loss = 0.0;
            for u in range {
                let gen_user = gen_forward_user(&model.gen_params, &g_lay, steps, z.user(u));
                let real_cache =
                    disc_forward_user(&model.disc_params, &d_lay, steps, real.user_values(u));
                let gen_cache =
                    disc_forward_user(&model.disc_params, &d_lay, steps, &gen_user.outputs);
                let mean_prob = |c: &DiscUserCache| {
                    c.logits.iter().map(|&l| super::lstm::sigmoid(l)).sum::<f64>() / steps as f64
                };
                let w = DiscWork {
                    d_real: mean_prob(&real_cache),
                    d_gen: mean_prob(&gen_cache),
                    real_cache,
                    gen_cache,
                };
                loss += -ln_clamped(w.d_real) - ln_clamped(1.0 - w.d_gen);

                // d/dD of -ln(D) and -ln(1-D), zero inside the clamp region.
                let d_dreal = if w.d_real > LOG_CLAMP {
                    -1.0 / (bf * w.d_real)
                } else {
                    0.0
                };
                let d_dgen = if 1.0 - w.d_gen > LOG_CLAMP {
                    1.0 / (bf * (1.0 - w.d_gen))
                } else {
                    0.0
                };

                let mut apply = |cache: &DiscUserCache, upstream: f64| {
                    if upstream == 0.0 {
                        return;
                    }
                    let d_logits: Vec<f64> = cache
                        .logits
                        .iter()
                        .map(|&l| {
                            let p = super::lstm::sigmoid(l);
                            upstream * p * (1.0 - p) / steps as f64
                        })
                        .collect();
                    disc_backward_user(
                        &model.disc_params,
                        &d_lay,
                        steps,
                        cache,
                        &d_logits,
                        Some(&mut grad),
                        None,
                    );
                };
                apply(&w.real_cache, d_dreal);
                apply(&w.gen_cache, d_dgen);
            }
            (grad, loss)
        })
        .collect();

    let mut grad = vec![0.0; d_lay.total];
    let mut loss = 0.0;
    for (chunk, l) in chunk_out {
        loss += l;
        for (g, c) in grad.iter_mut().zip(chunk) {
            *g += c;
        }
    }
    loss /= bf;

    if !grad.iter().all(|v| v.is_finite()) || !loss.is_finite() {
        let params_norm = model.disc_params.iter().map(|v| v * v).sum::<f64>().sqrt();
        return Err(GanError::NonFinite {
            what: "discriminator gradient".into(),
            params_norm,
        });
    }
    Ok((loss, grad))
}
