//! The recurrent GAN: an LSTM generator with a range-bounded output head and
//! a bidirectional LSTM discriminator, plus the training losses and their
//! exact reverse-mode gradients.

mod lstm;
pub mod losses;
mod net;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::trace::{Normalization, TraceTensor};

pub const LATENT_DIM: usize = 2;
pub const FEATURE_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("model parameter vector has wrong length: expected {expected}, got {got}")]
    BadModel { expected: usize, got: usize },
    #[error("batch size mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("non-finite {what} encountered (params norm {params_norm:.3e})")]
    NonFinite { what: String, params_norm: f64 },
    #[error("metric error: {0}")]
    Metrics(#[from] metrics::MetricsError),
}

/// Architecture descriptor shared by generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Training sequence length K.
    pub seq_len: usize,
    /// Training batch size b (users per minibatch).
    pub batch_users: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            num_layers: 2,
            seq_len: 12,
            batch_users: 100,
        }
    }
}

/// Generator and discriminator parameter sets with their shared config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub config: GanConfig,
    pub gen_params: Vec<f64>,
    pub disc_params: Vec<f64>,
}

impl GanModel {
    pub fn gen_param_count(cfg: &GanConfig) -> usize {
        net::gen_layout(cfg).total
    }

    pub fn disc_param_count(cfg: &GanConfig) -> usize {
        net::disc_layout(cfg).total
    }

    /// Seeded initialization: uniform weights scaled by fan-in, zero biases
    /// except the forget gates, which start open.
    pub fn init(config: GanConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Self::init_params(&mut rng, &config, true);
        let disc = Self::init_params(&mut rng, &config, false);
        Self {
            config,
            gen_params: gen,
            disc_params: disc,
        }
    }

    fn init_params(rng: &mut ChaCha8Rng, cfg: &GanConfig, generator: bool) -> Vec<f64> {
        let scale = 1.0 / (cfg.hidden_size as f64).sqrt();
        let mut fill = |params: &mut [f64], lay: &lstm::LstmLayout| {
            for v in &mut params[lay.w_ih..lay.w_ih + 4 * lay.hidden * lay.input] {
                *v = rng.gen_range(-scale..scale);
            }
            for v in &mut params[lay.w_hh..lay.w_hh + 4 * lay.hidden * lay.hidden] {
                *v = rng.gen_range(-scale..scale);
            }
            for v in &mut params[lay.bias + lay.hidden..lay.bias + 2 * lay.hidden] {
                *v = 1.0;
            }
        };
        if generator {
            let lay = net::gen_layout(cfg);
            let mut params = vec![0.0; lay.total];
            for l in &lay.layers {
                fill(&mut params, l);
            }
            for v in &mut params[lay.head_w..lay.head_w + FEATURE_DIM * cfg.hidden_size] {
                *v = rng.gen_range(-scale..scale);
            }
            params
        } else {
            let lay = net::disc_layout(cfg);
            let mut params = vec![0.0; lay.total];
            for (f, b) in &lay.layers {
                fill(&mut params, f);
                fill(&mut params, b);
            }
            for v in &mut params[lay.head_w..lay.head_w + 2 * cfg.hidden_size] {
                *v = rng.gen_range(-scale..scale);
            }
            params
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let expected = Self::gen_param_count(&self.config);
        if self.gen_params.len() != expected {
            return Err(GanError::BadModel {
                expected,
                got: self.gen_params.len(),
            });
        }
        let expected = Self::disc_param_count(&self.config);
        if self.disc_params.len() != expected {
            return Err(GanError::BadModel {
                expected,
                got: self.disc_params.len(),
            });
        }
        if !self
            .gen_params
            .iter()
            .chain(&self.disc_params)
            .all(|v| v.is_finite())
        {
            return Err(GanError::NonFinite {
                what: "model parameters".into(),
                params_norm: f64::NAN,
            });
        }
        Ok(())
    }
}

/// A batch of latent sequences, i.i.d. uniform on the unit square per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub users: usize,
    pub steps: usize,
    /// `users x steps x 2` row-major, all entries in [0, 1].
    pub values: Vec<f64>,
}

impl LatentBatch {
    pub fn draw<R: RngCore>(rng: &mut R, users: usize, steps: usize) -> Self {
        let values = (0..users * steps * LATENT_DIM)
            .map(|_| rng.gen::<f64>())
            .collect();
        Self {
            users,
            steps,
            values,
        }
    }

    pub fn from_seed(seed: u64, users: usize, steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::draw(&mut rng, users, steps)
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.values[u * self.steps * LATENT_DIM..(u + 1) * self.steps * LATENT_DIM]
    }
}

/// Statistics of the training data that the generator is fitted against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    /// Mean per-user Pearson correlation between download and upload.
    pub c_target: f64,
    pub mu_target: f64,
    pub sigma_target: f64,
    pub skew_target: f64,
}

impl TargetStats {
    /// Compute targets from a training tensor: the across-user mean Pearson
    /// coefficient, and the across-user means of each user's lumped moments.
    pub fn from_tensor(trace: &TraceTensor) -> Result<Self, GanError> {
        let c = metrics::corr_vector(trace)?.entries[0];
        let mut mu = 0.0;
        let mut sigma = 0.0;
        let mut skew = 0.0;
        for u in 0..trace.users() {
            let m = metrics::moments_of(trace.user_values(u));
            mu += m.mu;
            sigma += m.sigma;
            skew += m.skew;
        }
        let n = trace.users() as f64;
        Ok(Self {
            c_target: c,
            mu_target: mu / n,
            sigma_target: sigma / n,
            skew_target: skew / n,
        })
    }
}

/// Run the generator over a latent batch; output values lie in (0, 1).
pub fn generator_forward(model: &GanModel, z: &LatentBatch) -> Result<TraceTensor, GanError> {
    model.validate()?;
    let lay = net::gen_layout(&model.config);
    let mut values = Vec::with_capacity(z.users * z.steps * FEATURE_DIM);
    for u in 0..z.users {
        let cache = net::gen_forward_user(&model.gen_params, &lay, z.steps, z.user(u));
        values.extend_from_slice(&cache.outputs);
    }
    Ok(TraceTensor::from_values(z.users, z.steps, values, Normalization::Raw)
        .expect("generator output shape"))
}

/// Per-step probabilities and logits for a batch of traces.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    pub users: usize,
    pub steps: usize,
    /// `users x steps` pre-sigmoid logits.
    pub logits: Vec<f64>,
    /// `users x steps` probabilities, strictly inside (0, 1).
    pub probs: Vec<f64>,
    /// Per-trace probability: mean of the step probabilities.
    pub trace_probs: Vec<f64>,
}

/// Run the discriminator over a batch of traces.
pub fn discriminator_forward(
    model: &GanModel,
    trace: &TraceTensor,
) -> Result<DiscOutput, GanError> {
    model.validate()?;
    let lay = net::disc_layout(&model.config);
    let steps = trace.steps();
    let mut logits = Vec::with_capacity(trace.users() * steps);
    for u in 0..trace.users() {
        let cache = net::disc_forward_user(&model.disc_params, &lay, steps, trace.user_values(u));
        logits.extend_from_slice(&cache.logits);
    }
    let probs: Vec<f64> = logits.iter().map(|&l| lstm::sigmoid(l)).collect();
    let trace_probs: Vec<f64> = (0..trace.users())
        .map(|u| probs[u * steps..(u + 1) * steps].iter().sum::<f64>() / steps as f64)
        .collect();
    Ok(DiscOutput {
        users: trace.users(),
        steps,
        logits,
        probs,
        trace_probs,
    })
}
