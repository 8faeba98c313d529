//! Conditional gradient descent: alternating generator/discriminator updates
//! with periodic benchmark validations that checkpoint the best model and
//! steer which statistic loss is descended.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, Sampler};
use crate::context::{ContextLabel, ContextSplit};
use crate::gan::losses::{
    discriminator_gradients, generator_gradients, loss_corr_dist, loss_mom_dist, GenLossKind,
    StatsMode,
};
use crate::gan::{GanConfig, GanError, GanModel, LatentBatch, TargetStats};
use crate::trace::{Feature, Normalization, TraceTensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data has {got} steps but the configured sequence length is {need}")]
    SequenceTooShort { got: usize, need: usize },
    #[error("training data has no users")]
    NoUsers,
    #[error("context {0} is not significant; train against GLOBAL instead")]
    InsignificantContext(ContextLabel),
    #[error("epoch {epoch} aborted, parameters restored: {source}")]
    EpochAborted {
        epoch: usize,
        #[source]
        source: GanError,
    },
    #[error(transparent)]
    Gan(#[from] GanError),
}

/// Loop-level knobs; architecture sizes live in [`GanConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Validate at least every P epochs.
    pub validation_period: usize,
    /// Length of the forced single-statistic window after an improvement.
    pub delta_window: usize,
    /// Consecutive non-improving validations tolerated before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: StatsMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            validation_period: 50,
            delta_window: 25,
            patience: 5,
            learning_rate: 2e-4,
            seed: 0,
            mode: StatsMode::Raw,
        }
    }
}

/// Above any attainable statistic loss, per the initialization rule.
const L_WORST_INIT: f64 = 1e9;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Mutable state of one training run.
pub struct TrainState {
    pub epoch: usize,
    pub delta_corr: f64,
    pub delta_mom: f64,
    pub delta_window_remaining: usize,
    pub l_worst_prev: f64,
    pub candidate: Option<GanModel>,
    pub failed_validations: usize,
    best_total: f64,
    rng: ChaCha8Rng,
    gen_opt: Adam,
    disc_opt: Adam,
}

impl TrainState {
    pub fn new(model: &GanModel, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            delta_corr: 1.0,
            delta_mom: 1.0,
            delta_window_remaining: 0,
            l_worst_prev: L_WORST_INIT,
            candidate: None,
            failed_validations: 0,
            best_total: f64::INFINITY,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            gen_opt: Adam::new(model.gen_params.len(), cfg.learning_rate),
            disc_opt: Adam::new(model.disc_params.len(), cfg.learning_rate),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_disc: f64,
    pub l_corr: f64,
    pub l_mom: f64,
    pub l_total: f64,
    /// Discriminator training loss of this epoch's update.
    pub l_d: f64,
    pub delta_corr: f64,
    pub delta_mom: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub l_corr: f64,
    pub l_mom: f64,
    pub l_worst: f64,
    pub uni_l_corr: f64,
    pub uni_l_mom: f64,
    pub improved: bool,
}

/// Result of a full conditional-gradient-descent run.
pub struct TrainOutcome {
    pub model: GanModel,
    pub stats: TargetStats,
    pub log: Vec<EpochRecord>,
    pub epochs_run: usize,
    /// True when no validation ever improved and the final parameters were
    /// returned instead of a saved candidate.
    pub no_candidate_warning: bool,
}

fn sample_batch(
    data: &TraceTensor,
    users: usize,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> TraceTensor {
    let pool = data.users();
    let chosen: Vec<usize> = if pool >= users {
        rand::seq::index::sample(rng, pool, users).into_vec()
    } else {
        (0..users).map(|_| rng.gen_range(0..pool)).collect()
    };
    let start = if data.steps() > steps {
        rng.gen_range(0..=data.steps() - steps)
    } else {
        0
    };
    data.window(&chosen, start, steps)
}

/// One discriminator update followed by one generator update on fresh
/// minibatches. On a non-finite loss the previous parameters are restored.
pub fn train_epoch(
    state: &mut TrainState,
    model: &mut GanModel,
    data: &TraceTensor,
    stats: &TargetStats,
    mode: StatsMode,
) -> Result<EpochRecord, TrainError> {
    let cfg = model.config.clone();
    if data.steps() < cfg.seq_len {
        return Err(TrainError::SequenceTooShort {
            got: data.steps(),
            need: cfg.seq_len,
        });
    }
    if data.users() == 0 {
        return Err(TrainError::NoUsers);
    }

    let snapshot = (model.gen_params.clone(), model.disc_params.clone());
    let result = (|| -> Result<EpochRecord, GanError> {
        let real = sample_batch(data, cfg.batch_users, cfg.seq_len, &mut state.rng);
        let z_disc = LatentBatch::draw(&mut state.rng, cfg.batch_users, cfg.seq_len);
        let (l_d, d_grad) = discriminator_gradients(model, &real, &z_disc)?;
        state.disc_opt.step(&mut model.disc_params, &d_grad);

        let z_gen = LatentBatch::draw(&mut state.rng, cfg.batch_users, cfg.seq_len);
        let (eval, g_grad) = generator_gradients(
            model,
            &z_gen,
            stats,
            mode,
            state.delta_corr,
            state.delta_mom,
            GenLossKind::Total,
        )?;
        state.gen_opt.step(&mut model.gen_params, &g_grad);

        Ok(EpochRecord {
            epoch: state.epoch,
            l_disc: eval.l_disc,
            l_corr: eval.l_corr,
            l_mom: eval.l_mom,
            l_total: eval.total,
            l_d,
            delta_corr: state.delta_corr,
            delta_mom: state.delta_mom,
            validation: None,
        })
    })();

    match result {
        Ok(rec) => {
            state.epoch += 1;
            Ok(rec)
        }
        Err(source) => {
            model.gen_params = snapshot.0;
            model.disc_params = snapshot.1;
            Err(TrainError::EpochAborted {
                epoch: state.epoch,
                source,
            })
        }
    }
}

/// Generate a fresh batch from the model plus a same-size batch from the
/// uniform-fit baseline, and compute the statistic losses on both.
pub fn benchmark_validation(
    model: &GanModel,
    stats: &TargetStats,
    uni: &(Sampler, Sampler),
    mode: StatsMode,
    rng: &mut ChaCha8Rng,
) -> Result<ValidationRecord, GanError> {
    let cfg = &model.config;
    let z = LatentBatch::draw(rng, cfg.batch_users, cfg.seq_len);
    let batch = crate::gan::generator_forward(model, &z)?;
    let l_corr = loss_corr_dist(model, &batch, stats, mode)?;
    let l_mom = loss_mom_dist(model, &batch, stats, mode)?;

    let uni_batch = baselines::baseline_generate(&uni.0, &uni.1, cfg.batch_users, cfg.seq_len, rng);
    let uni_l_corr = loss_corr_dist(model, &uni_batch, stats, mode)?;
    let uni_l_mom = loss_mom_dist(model, &uni_batch, stats, mode)?;

    Ok(ValidationRecord {
        l_corr,
        l_mom,
        l_worst: l_corr.max(l_mom),
        uni_l_corr,
        uni_l_mom,
        improved: false,
    })
}

/// Indicator update dropping the statistic that currently performs better;
/// ties are broken by a fair coin.
pub fn update_deltas(l_corr: f64, l_mom: f64, coin: bool) -> (f64, f64) {
    use std::cmp::Ordering;
    match l_corr.partial_cmp(&l_mom) {
        Some(Ordering::Greater) => (1.0, 0.0),
        Some(Ordering::Less) => (0.0, 1.0),
        _ => {
            if coin {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

/// Run the full conditional-gradient-descent procedure from a fresh model.
pub fn conditional_gradient_descent(
    gan_cfg: GanConfig,
    train_cfg: &TrainConfig,
    data: &TraceTensor,
) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let init_seed = rng.gen::<u64>();
    let model = GanModel::init(gan_cfg, init_seed);
    run_descent(model, train_cfg, data)
}

/// Fine-tune a trained global model on one significant context cohort.
/// Target statistics are recomputed from the context's traces.
pub fn fine_tune(
    global: &GanModel,
    split: &ContextSplit,
    train_cfg: &TrainConfig,
    epochs_ft: usize,
) -> Result<TrainOutcome, TrainError> {
    if !split.significant {
        return Err(TrainError::InsignificantContext(split.label));
    }
    let mut cfg = train_cfg.clone();
    cfg.max_epochs = epochs_ft;
    run_descent(global.clone(), &cfg, &split.trace)
}

fn run_descent(
    mut model: GanModel,
    cfg: &TrainConfig,
    data: &TraceTensor,
) -> Result<TrainOutcome, TrainError> {
    // Training always happens in minmax space; the op is idempotent, so
    // already-normalized callers are unaffected.
    let data = data.normalize(Normalization::MinMax);
    if data.steps() < model.config.seq_len {
        return Err(TrainError::SequenceTooShort {
            got: data.steps(),
            need: model.config.seq_len,
        });
    }
    if data.users() == 0 {
        return Err(TrainError::NoUsers);
    }
    let stats = TargetStats::from_tensor(&data)?;
    let uni = (
        baselines::uniform_fit(&data, Feature::Download).map_err(|_| TrainError::NoUsers)?,
        baselines::uniform_fit(&data, Feature::Upload).map_err(|_| TrainError::NoUsers)?,
    );

    let mut state = TrainState::new(&model, cfg);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        if state.delta_window_remaining == 0 {
            state.delta_corr = 1.0;
            state.delta_mom = 1.0;
        } else {
            state.delta_window_remaining -= 1;
        }

        let mut record = train_epoch(&mut state, &mut model, &data, &stats, cfg.mode)?;

        let new_minimum = record.l_total < state.best_total;
        if new_minimum {
            state.best_total = record.l_total;
        }
        let periodic = (epoch + 1) % cfg.validation_period == 0;

        if periodic || new_minimum {
            let mut v = benchmark_validation(&model, &stats, &uni, cfg.mode, &mut state.rng)?;
            if v.l_worst < state.l_worst_prev {
                v.improved = true;
                state.l_worst_prev = v.l_worst;
                state.candidate = Some(model.clone());
                state.failed_validations = 0;
                let coin = state.rng.gen::<bool>();
                let (dc, dm) = update_deltas(v.l_corr, v.l_mom, coin);
                state.delta_corr = dc;
                state.delta_mom = dm;
                state.delta_window_remaining = cfg.delta_window;
            } else {
                state.failed_validations += 1;
            }
            let exhausted = state.failed_validations >= cfg.patience;
            record.validation = Some(v);
            log.push(record);
            if exhausted {
                stopped_early = true;
                break;
            }
        } else {
            log.push(record);
        }
    }

    let _ = stopped_early;
    let epochs_run = state.epoch;
    let (final_model, warning) = match state.candidate.take() {
        Some(m) => (m, false),
        None => (model, true),
    };
    Ok(TrainOutcome {
        model: final_model,
        stats,
        log,
        epochs_run,
        no_candidate_warning: warning,
    })
}

/// Serialize the training log as line-delimited JSON records.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("serializable record"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
