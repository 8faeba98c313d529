//! The replay engine: turn cached context traces plus live signal readings
//! into a per-epoch schedule, then drive both directions concurrently.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mass_core::context::{AppPart, ContextLabel, SignalPart};
use mass_core::trace::{Feature, TraceTensor};

use crate::markov::{next_app_context, StayProbs};
use crate::wire::{client_stream, ClientOutcome, Direction, StreamRequest, Transport};
use crate::{precache_traces, signal_context, ReplayConfig, ReplayError, SignalSource, TraceSource};

/// One scheduled replay epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStep {
    pub app_context: AppPart,
    pub signal_context: SignalPart,
    pub dl_rate_mbps: f64,
    pub ul_rate_mbps: f64,
    pub transport: Transport,
}

/// The full per-epoch schedule of one replay sequence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub steps: Vec<EpochStep>,
}

/// One measured stream, one line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    pub direction: Direction,
    pub epoch: usize,
    pub transport: Transport,
    pub requested_mbps: f64,
    pub achieved_mbps: f64,
    pub bytes: u64,
    pub duration_s: f64,
    pub complete: bool,
}

impl PerfRecord {
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.direction.as_str(),
            self.epoch,
            self.transport.as_str(),
            self.requested_mbps,
            self.achieved_mbps,
            self.bytes,
            self.duration_s,
            self.complete
        )
    }

    pub fn parse_tsv_line(line: &str) -> Result<Self, ReplayError> {
        let bad = |reason: &str| ReplayError::Config {
            name: "history line".into(),
            reason: reason.into(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(bad("expected 8 tab-separated fields"));
        }
        let direction = match fields[0] {
            "up" => Direction::Up,
            "down" => Direction::Down,
            _ => return Err(bad("bad direction")),
        };
        let transport = match fields[2] {
            "tcp" => Transport::Tcp,
            "udp" => Transport::Udp,
            _ => return Err(bad("bad transport")),
        };
        Ok(PerfRecord {
            direction,
            epoch: fields[1].parse().map_err(|_| bad("bad epoch"))?,
            transport,
            requested_mbps: fields[3].parse().map_err(|_| bad("bad requested"))?,
            achieved_mbps: fields[4].parse().map_err(|_| bad("bad achieved"))?,
            bytes: fields[5].parse().map_err(|_| bad("bad bytes"))?,
            duration_s: fields[6].parse().map_err(|_| bad("bad duration"))?,
            complete: fields[7].parse().map_err(|_| bad("bad complete"))?,
        })
    }
}

pub fn records_to_tsv(records: &[PerfRecord]) -> String {
    records
        .iter()
        .map(PerfRecord::to_tsv_line)
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

/// Resolve the context label an epoch replays under.
fn epoch_label(cfg: &ReplayConfig, app: AppPart, signal: SignalPart) -> ContextLabel {
    if cfg.use_signal {
        ContextLabel::compose(Some(signal), Some(app))
    } else {
        ContextLabel::compose(None, Some(app))
    }
}

/// Build the deterministic schedule for one sequence: the app context walks
/// its Markov chain, the signal context follows the provider, and each
/// epoch's rates come from the pre-cached trace of the resolved context.
pub fn build_plan(
    cfg: &ReplayConfig,
    cache: &HashMap<ContextLabel, TraceTensor>,
    signal: &mut dyn SignalSource,
    rng: &mut ChaCha8Rng,
) -> Result<ReplayPlan, ReplayError> {
    let probs = StayProbs {
        interact: cfg.interact_stay_prob,
        stream: cfg.stream_stay_prob,
    };
    let mut steps = Vec::with_capacity(cfg.seq_len);
    let mut app = cfg.initial_context;
    for epoch in 0..cfg.seq_len {
        if epoch > 0 {
            app = next_app_context(app, probs, rng);
        }
        let sig = signal_context(signal.rssi(), cfg.use_signal);
        let label = epoch_label(cfg, app, sig);
        let trace = cache
            .get(&label)
            .ok_or(ReplayError::MissingTrace(label))?;
        let dl_norm = trace.get(0, epoch, Feature::Download);
        let ul_norm = trace.get(0, epoch, Feature::Upload);
        let transport = if rng.gen::<f64>() < cfg.udp_prob {
            Transport::Udp
        } else {
            Transport::Tcp
        };
        steps.push(EpochStep {
            app_context: app,
            signal_context: sig,
            dl_rate_mbps: dl_norm * cfg.max_down_mbps,
            ul_rate_mbps: ul_norm * cfg.max_up_mbps,
            transport,
        });
    }
    Ok(ReplayPlan { steps })
}

fn stream_record(
    direction: Direction,
    epoch: usize,
    transport: Transport,
    rate_mbps: f64,
    duration_s: f64,
    outcome: ClientOutcome,
) -> PerfRecord {
    let bytes = outcome.effective_bytes();
    PerfRecord {
        direction,
        epoch,
        transport,
        requested_mbps: rate_mbps,
        achieved_mbps: bytes as f64 * 8.0 / duration_s / 1e6,
        bytes,
        duration_s,
        complete: outcome.complete,
    }
}

/// Replay one scheduled sequence: per epoch, the upload and download streams
/// run concurrently and both finish before the next epoch starts. Connection
/// failures produce zero-throughput records and the replay continues.
pub fn execute_plan(cfg: &ReplayConfig, plan: &ReplayPlan, epoch_base: usize) -> Vec<PerfRecord> {
    let mut records = Vec::with_capacity(plan.steps.len() * 2);
    for (i, step) in plan.steps.iter().enumerate() {
        let epoch = epoch_base + i;
        let up_host = cfg.perf_host.clone();
        let (up_port, transport) = (cfg.up_port, step.transport);
        let (ul_rate, duration, msg) = (step.ul_rate_mbps, cfg.epoch_time_s, cfg.buffer_bytes);

        let up_handle = std::thread::spawn(move || {
            if ul_rate <= 0.0 {
                return ClientOutcome {
                    bytes: 0,
                    acked_bytes: None,
                    complete: true,
                };
            }
            client_stream(
                &up_host,
                up_port,
                transport,
                &StreamRequest {
                    direction: Direction::Up,
                    duration_s: duration,
                    rate_mbps: ul_rate,
                    msg_size: msg,
                },
            )
        });

        let down_outcome = if step.dl_rate_mbps <= 0.0 {
            ClientOutcome {
                bytes: 0,
                acked_bytes: None,
                complete: true,
            }
        } else {
            client_stream(
                &cfg.perf_host,
                cfg.down_port,
                step.transport,
                &StreamRequest {
                    direction: Direction::Down,
                    duration_s: cfg.epoch_time_s,
                    rate_mbps: step.dl_rate_mbps,
                    msg_size: cfg.buffer_bytes,
                },
            )
        };
        let up_outcome = up_handle.join().expect("upload thread");

        records.push(stream_record(
            Direction::Up,
            epoch,
            step.transport,
            step.ul_rate_mbps,
            cfg.epoch_time_s,
            up_outcome,
        ));
        records.push(stream_record(
            Direction::Down,
            epoch,
            step.transport,
            step.dl_rate_mbps,
            cfg.epoch_time_s,
            down_outcome,
        ));
    }
    records
}

/// A full replay run: pre-cache, schedule, execute. In continuous mode a
/// fresh trace sequence is fetched after each completed one; `sequences`
/// bounds the run (`None` repeats until the process is stopped).
pub struct ReplayOutcome {
    pub plans: Vec<ReplayPlan>,
    pub records: Vec<PerfRecord>,
}

pub fn run_replay(
    cfg: &ReplayConfig,
    source: &mut dyn TraceSource,
    signal: &mut dyn SignalSource,
    seed: u64,
    sequences: Option<usize>,
) -> Result<ReplayOutcome, ReplayError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = sequences.unwrap_or(usize::MAX);
    let runs = if cfg.continuous { total } else { total.min(1) };
    let mut plans = Vec::new();
    let mut records = Vec::new();
    for seq in 0..runs.max(1) {
        let cache = precache_traces(cfg, source)?;
        let plan = build_plan(cfg, &cache, signal, &mut rng)?;
        records.extend(execute_plan(cfg, &plan, seq * cfg.seq_len));
        plans.push(plan);
    }
    Ok(ReplayOutcome { plans, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_cache(cfg: &ReplayConfig, value: f64) -> HashMap<ContextLabel, TraceTensor> {
        let mut cache = HashMap::new();
        for context in cfg.supported_contexts() {
            let values = vec![value; cfg.seq_len * 2];
            cache.insert(
                context,
                TraceTensor::from_values(
                    1,
                    cfg.seq_len,
                    values,
                    mass_core::trace::Normalization::Raw,
                )
                .unwrap(),
            );
        }
        cache
    }

    #[test]
    fn plan_is_deterministic_for_equal_seeds() {
        let cfg = ReplayConfig {
            seq_len: 20,
            ..ReplayConfig::default()
        };
        let cache = constant_cache(&cfg, 0.5);
        let mut sig_a = crate::ScriptedSignal::new(vec![Some(-80.0), Some(-60.0), None]);
        let mut sig_b = crate::ScriptedSignal::new(vec![Some(-80.0), Some(-60.0), None]);
        let plan_a =
            build_plan(&cfg, &cache, &mut sig_a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let plan_b =
            build_plan(&cfg, &cache, &mut sig_b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(plan_a, plan_b);
        let plan_c = build_plan(
            &cfg,
            &cache,
            &mut crate::ConstantSignal(Some(-80.0)),
            &mut ChaCha8Rng::seed_from_u64(10),
        )
        .unwrap();
        assert_ne!(plan_a, plan_c);
    }

    #[test]
    fn plan_starts_from_initial_context_and_scales_rates() {
        let cfg = ReplayConfig {
            seq_len: 5,
            max_down_mbps: 4.0,
            max_up_mbps: 2.0,
            initial_context: AppPart::Stream,
            ..ReplayConfig::default()
        };
        let cache = constant_cache(&cfg, 0.5);
        let plan = build_plan(
            &cfg,
            &cache,
            &mut crate::ConstantSignal(Some(-60.0)),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(plan.steps[0].app_context, AppPart::Stream);
        for step in &plan.steps {
            assert_eq!(step.dl_rate_mbps, 2.0);
            assert_eq!(step.ul_rate_mbps, 1.0);
            assert_eq!(step.signal_context, SignalPart::High);
        }
    }

    #[test]
    fn udp_probability_extremes_pin_transport() {
        let mut cfg = ReplayConfig {
            seq_len: 30,
            udp_prob: 1.0,
            ..ReplayConfig::default()
        };
        let cache = constant_cache(&cfg, 0.5);
        let plan = build_plan(
            &cfg,
            &cache,
            &mut crate::ConstantSignal(None),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(plan.steps.iter().all(|s| s.transport == Transport::Udp));

        cfg.udp_prob = 0.0;
        let plan = build_plan(
            &cfg,
            &cache,
            &mut crate::ConstantSignal(None),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(plan.steps.iter().all(|s| s.transport == Transport::Tcp));
    }

    #[test]
    fn low_signal_selects_low_context_traces() {
        let cfg = ReplayConfig {
            seq_len: 4,
            ..ReplayConfig::default()
        };
        // LOW contexts carry 0.25, HIGH contexts 0.75.
        let mut cache = HashMap::new();
        for context in cfg.supported_contexts() {
            let value = match context {
                ContextLabel::StreamLow | ContextLabel::InteractLow => 0.25,
                _ => 0.75,
            };
            cache.insert(
                context,
                TraceTensor::from_values(
                    1,
                    cfg.seq_len,
                    vec![value; cfg.seq_len * 2],
                    mass_core::trace::Normalization::Raw,
                )
                .unwrap(),
            );
        }
        let plan = build_plan(
            &cfg,
            &cache,
            &mut crate::ConstantSignal(Some(-90.0)),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for step in &plan.steps {
            assert_eq!(step.signal_context, SignalPart::Low);
            assert_eq!(step.dl_rate_mbps, 0.25);
        }
    }

    #[test]
    fn history_lines_round_trip() {
        let record = PerfRecord {
            direction: Direction::Up,
            epoch: 3,
            transport: Transport::Udp,
            requested_mbps: 1.5,
            achieved_mbps: 1.43,
            bytes: 893_952,
            duration_s: 5.0,
            complete: true,
        };
        let line = record.to_tsv_line();
        assert_eq!(PerfRecord::parse_tsv_line(&line).unwrap(), record);
        assert!(PerfRecord::parse_tsv_line("up\t1\ttcp").is_err());
    }

    #[test]
    fn zero_rate_epochs_send_nothing() {
        // No perf server is listening; zero-rate streams must not try to
        // connect, so those records come back complete.
        let cfg = ReplayConfig {
            seq_len: 2,
            epoch_time_s: 0.05,
            perf_host: "127.0.0.1".into(),
            down_port: 1,
            up_port: 1,
            udp_prob: 0.0,
            ..ReplayConfig::default()
        };
        let plan = ReplayPlan {
            steps: (0..2)
                .map(|_| EpochStep {
                    app_context: AppPart::Interact,
                    signal_context: SignalPart::High,
                    dl_rate_mbps: 0.0,
                    ul_rate_mbps: 0.0,
                    transport: Transport::Tcp,
                })
                .collect(),
        };
        let records = execute_plan(&cfg, &plan, 0);
        assert_eq!(records.len(), 4);
        for r in &records {
            assert_eq!(r.bytes, 0);
            assert!(r.complete);
        }
    }

    struct CountingSource(usize);

    impl TraceSource for CountingSource {
        fn fetch(
            &mut self,
            _context: ContextLabel,
            users: usize,
            seq_len: usize,
        ) -> Result<TraceTensor, ReplayError> {
            self.0 += 1;
            Ok(TraceTensor::zeros(users, seq_len))
        }
    }

    #[test]
    fn replay_never_fetches_mid_sequence() {
        let cfg = ReplayConfig {
            seq_len: 3,
            epoch_time_s: 0.02,
            perf_host: "127.0.0.1".into(),
            down_port: 1,
            up_port: 1,
            ..ReplayConfig::default()
        };
        let mut source = CountingSource(0);
        let mut signal = crate::ConstantSignal(None);
        let out = run_replay(&cfg, &mut source, &mut signal, 5, Some(1)).unwrap();
        assert_eq!(out.records.len(), 6);
        // All zero-rate (zeros tensor), so instant; one fetch per context.
        assert_eq!(source.0, cfg.supported_contexts().len());
    }

    #[test]
    fn continuous_mode_refetches_each_sequence() {
        let cfg = ReplayConfig {
            seq_len: 2,
            epoch_time_s: 0.02,
            perf_host: "127.0.0.1".into(),
            down_port: 1,
            up_port: 1,
            continuous: true,
            ..ReplayConfig::default()
        };
        let mut source = CountingSource(0);
        let mut signal = crate::ConstantSignal(None);
        let out = run_replay(&cfg, &mut source, &mut signal, 5, Some(3)).unwrap();
        assert_eq!(out.plans.len(), 3);
        assert_eq!(source.0, 3 * cfg.supported_contexts().len());
        // Epoch indices keep counting across sequences.
        assert_eq!(out.records.last().unwrap().epoch, 5);
    }
}
