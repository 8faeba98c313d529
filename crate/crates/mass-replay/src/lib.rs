//! Trace replay: fetch context traces from the generation API, schedule
//! per-epoch rates under Markov app transitions and live signal context, and
//! drive them through rate-controlled TCP/UDP performance streams.

pub mod bias;
pub mod engine;
pub mod markov;
pub mod wire;

use std::collections::HashMap;

use mass_core::context::{AppPart, ContextLabel, SignalPart};
use mass_core::trace::TraceTensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid {name}: {reason}")]
    Config { name: String, reason: String },
    #[error("trace API unreachable after {attempts} attempts: {last_error}")]
    ApiUnreachable { attempts: usize, last_error: String },
    #[error("trace for context {0} missing from cache")]
    MissingTrace(ContextLabel),
    #[error("cached trace has {got} steps, need {need}")]
    ShortTrace { got: usize, need: usize },
    #[error("throughput ratios need positive values, got intended ({0}, {1}), measured ({2}, {3})")]
    NonPositiveThroughput(f64, f64, f64, f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Replay configuration, sourced from the documented environment variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub mass_host: String,
    pub perf_host: String,
    pub seq_len: usize,
    pub max_down_mbps: f64,
    pub max_up_mbps: f64,
    pub buffer_bytes: usize,
    pub down_port: u16,
    pub up_port: u16,
    pub epoch_time_s: f64,
    pub initial_context: AppPart,
    pub interact_stay_prob: f64,
    pub stream_stay_prob: f64,
    pub use_signal: bool,
    pub udp_prob: f64,
    pub continuous: bool,
    /// Honored as a no-op with a warning; the built-in client always runs.
    pub use_iperf: bool,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            mass_host: "localhost".into(),
            perf_host: "localhost".into(),
            seq_len: 10,
            max_down_mbps: 1.0,
            max_up_mbps: 1.0,
            buffer_bytes: 1024,
            down_port: 5557,
            up_port: 6666,
            epoch_time_s: 5.0,
            initial_context: AppPart::Interact,
            interact_stay_prob: 0.5,
            stream_stay_prob: 0.5,
            use_signal: true,
            udp_prob: 0.5,
            continuous: false,
            use_iperf: false,
        }
    }
}

impl ReplayConfig {
    /// Build from an environment-style lookup using the documented variable
    /// names (`MASS_HOST`, `PERF_HOST`, `SEQ_LEN`, ...).
    pub fn from_lookup(
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(Self, Vec<String>), ReplayError> {
        let mut cfg = Self::default();
        let mut warnings = Vec::new();

        fn parse<T: std::str::FromStr>(
            lookup: &impl Fn(&str) -> Option<String>,
            name: &str,
            into: &mut T,
        ) -> Result<(), ReplayError> {
            if let Some(raw) = lookup(name) {
                *into = raw.parse().map_err(|_| ReplayError::Config {
                    name: name.into(),
                    reason: format!("cannot parse {raw:?}"),
                })?;
            }
            Ok(())
        }
        fn parse_flag(
            lookup: &impl Fn(&str) -> Option<String>,
            name: &str,
            into: &mut bool,
        ) -> Result<(), ReplayError> {
            if let Some(raw) = lookup(name) {
                *into = match raw.as_str() {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => {
                        return Err(ReplayError::Config {
                            name: name.into(),
                            reason: format!("expected 0 or 1, got {raw:?}"),
                        })
                    }
                };
            }
            Ok(())
        }

        parse(&lookup, "MASS_HOST", &mut cfg.mass_host)?;
        parse(&lookup, "PERF_HOST", &mut cfg.perf_host)?;
        parse(&lookup, "SEQ_LEN", &mut cfg.seq_len)?;
        parse(&lookup, "MAX_DOWN", &mut cfg.max_down_mbps)?;
        parse(&lookup, "MAX_UP", &mut cfg.max_up_mbps)?;
        parse(&lookup, "BUFFER", &mut cfg.buffer_bytes)?;
        parse(&lookup, "DOWN_PORT", &mut cfg.down_port)?;
        parse(&lookup, "UP_PORT", &mut cfg.up_port)?;
        parse(&lookup, "EPOCH_TIME", &mut cfg.epoch_time_s)?;
        if let Some(raw) = lookup("INITIAL_CONTEXT") {
            cfg.initial_context = match raw.as_str() {
                "INTERACT" => AppPart::Interact,
                "STREAM" => AppPart::Stream,
                _ => {
                    return Err(ReplayError::Config {
                        name: "INITIAL_CONTEXT".into(),
                        reason: format!("expected INTERACT or STREAM, got {raw:?}"),
                    })
                }
            };
        }
        parse(&lookup, "INTERACT_STAY_PROB", &mut cfg.interact_stay_prob)?;
        parse(&lookup, "STREAM_STAY_PROB", &mut cfg.stream_stay_prob)?;
        parse_flag(&lookup, "USE_SIGNAL", &mut cfg.use_signal)?;
        parse(&lookup, "UDP_PROB", &mut cfg.udp_prob)?;
        parse_flag(&lookup, "CONTINUOUS", &mut cfg.continuous)?;
        parse_flag(&lookup, "USE_IPERF", &mut cfg.use_iperf)?;
        if cfg.use_iperf {
            warnings.push(
                "USE_IPERF is accepted but not implemented; the built-in replay client runs"
                    .to_string(),
            );
        }
        cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn from_env() -> Result<(Self, Vec<String>), ReplayError> {
        Self::from_lookup(|name| std::env::var(name).ok())
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ReplayError::Config {
                    name: name.into(),
                    reason: format!("probability {v} outside [0, 1]"),
                })
            }
        };
        prob("INTERACT_STAY_PROB", self.interact_stay_prob)?;
        prob("STREAM_STAY_PROB", self.stream_stay_prob)?;
        prob("UDP_PROB", self.udp_prob)?;
        for (name, v) in [("MAX_DOWN", self.max_down_mbps), ("MAX_UP", self.max_up_mbps)] {
            if !(v > 0.0) {
                return Err(ReplayError::Config {
                    name: name.into(),
                    reason: format!("rate {v} must be positive"),
                });
            }
        }
        if self.seq_len == 0 || self.buffer_bytes == 0 || !(self.epoch_time_s > 0.0) {
            return Err(ReplayError::Config {
                name: "SEQ_LEN/BUFFER/EPOCH_TIME".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Contexts the client requests traces for: the four signal/app combos
    /// when signal awareness is on, otherwise the two app contexts.
    pub fn supported_contexts(&self) -> Vec<ContextLabel> {
        if self.use_signal {
            vec![
                ContextLabel::StreamHigh,
                ContextLabel::StreamLow,
                ContextLabel::InteractHigh,
                ContextLabel::InteractLow,
            ]
        } else {
            vec![ContextLabel::Stream, ContextLabel::Interact]
        }
    }
}

/// Where trace batches come from (REST adapter, in-process generator, or a
/// scripted stub in tests).
pub trait TraceSource {
    fn fetch(
        &mut self,
        context: ContextLabel,
        users: usize,
        seq_len: usize,
    ) -> Result<TraceTensor, ReplayError>;
}

/// Live RSSI provider; replay consumes one reading per epoch.
pub trait SignalSource {
    fn rssi(&mut self) -> Option<f64>;
}

/// Fixed RSSI (or none), for radio-less runs.
pub struct ConstantSignal(pub Option<f64>);

impl SignalSource for ConstantSignal {
    fn rssi(&mut self) -> Option<f64> {
        self.0
    }
}

/// Scripted RSSI readings, cycled; empty entries mean no reading.
pub struct ScriptedSignal {
    values: Vec<Option<f64>>,
    index: usize,
}

impl ScriptedSignal {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        Self { values, index: 0 }
    }

    /// One reading per line; blank lines mean no reading.
    pub fn parse(text: &str) -> Result<Self, ReplayError> {
        let mut values = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                values.push(None);
            } else {
                values.push(Some(line.parse().map_err(|_| ReplayError::Config {
                    name: "signal script".into(),
                    reason: format!("bad RSSI value {line:?}"),
                })?));
            }
        }
        Ok(Self::new(values))
    }
}

impl SignalSource for ScriptedSignal {
    fn rssi(&mut self) -> Option<f64> {
        if self.values.is_empty() {
            return None;
        }
        let v = self.values[self.index % self.values.len()];
        self.index += 1;
        v
    }
}

/// Fetch one trace per supported context up front so the epoch loop never
/// touches the network mid-sequence.
pub fn precache_traces(
    cfg: &ReplayConfig,
    source: &mut dyn TraceSource,
) -> Result<HashMap<ContextLabel, TraceTensor>, ReplayError> {
    let mut cache = HashMap::new();
    for context in cfg.supported_contexts() {
        let trace = source.fetch(context, 1, cfg.seq_len)?;
        if trace.steps() < cfg.seq_len {
            return Err(ReplayError::ShortTrace {
                got: trace.steps(),
                need: cfg.seq_len,
            });
        }
        cache.insert(context, trace);
    }
    Ok(cache)
}

/// REST adapter for the trace generation API, with bounded retry.
pub struct RestTraceSource {
    base_url: String,
    client: reqwest::blocking::Client,
    pub attempts: usize,
    pub backoff: std::time::Duration,
}

impl RestTraceSource {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            client: reqwest::blocking::Client::new(),
            attempts: 3,
            backoff: std::time::Duration::from_millis(200),
        }
    }
}

impl TraceSource for RestTraceSource {
    fn fetch(
        &mut self,
        context: ContextLabel,
        users: usize,
        seq_len: usize,
    ) -> Result<TraceTensor, ReplayError> {
        let url = format!("{}/generate?format=json", self.base_url);
        let body = serde_json::json!({
            "context": context.as_str(),
            "users": users,
            "seq_len": seq_len,
        });
        let mut last_error = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt as u32 - 1));
            }
            match self.client.post(&url).json(&body).send() {
                Ok(resp) if resp.status().is_success() => {
                    let v: serde_json::Value = resp.json().map_err(|e| {
                        ReplayError::ApiUnreachable {
                            attempts: attempt + 1,
                            last_error: e.to_string(),
                        }
                    })?;
                    return parse_trace_json(&v, users, seq_len);
                }
                Ok(resp) => last_error = format!("http status {}", resp.status()),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(ReplayError::ApiUnreachable {
            attempts: self.attempts,
            last_error,
        })
    }
}

fn parse_trace_json(
    v: &serde_json::Value,
    users: usize,
    seq_len: usize,
) -> Result<TraceTensor, ReplayError> {
    use mass_core::trace::Feature;
    let arr = v["trace"].as_array().ok_or_else(|| ReplayError::ApiUnreachable {
        attempts: 1,
        last_error: "response has no trace array".into(),
    })?;
    let mut out = TraceTensor::zeros(users, seq_len);
    for (u, user) in arr.iter().take(users).enumerate() {
        let steps = user.as_array().ok_or_else(|| ReplayError::ApiUnreachable {
            attempts: 1,
            last_error: "user entry is not an array".into(),
        })?;
        for (k, step) in steps.iter().take(seq_len).enumerate() {
            let pair = step.as_array().filter(|p| p.len() == 2).ok_or_else(|| {
                ReplayError::ApiUnreachable {
                    attempts: 1,
                    last_error: "step entry is not a [dl, ul] pair".into(),
                }
            })?;
            out.set(u, k, Feature::Download, pair[0].as_f64().unwrap_or(0.0));
            out.set(u, k, Feature::Upload, pair[1].as_f64().unwrap_or(0.0));
        }
    }
    Ok(out)
}

/// Resolve the signal context from an RSSI reading.
pub fn signal_context(rssi: Option<f64>, use_signal: bool) -> SignalPart {
    match rssi {
        Some(v) if use_signal && v < -75.0 => SignalPart::Low,
        _ => SignalPart::High,
    }
}
