//! Raw sample ingestion, context labeling and the train/test pipeline.

use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Feature, TraceTensor};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least 2 eligible users, got {0}")]
    TooFewUsers(usize),
    #[error("unknown context label {0:?}")]
    UnknownContext(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Signal-strength half of a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalPart {
    High,
    Low,
}

/// Application-type half of a context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppPart {
    Stream,
    Interact,
}

/// App-store categories treated as streaming workloads.
pub const STREAM_CATEGORIES: [&str; 4] = [
    "MUSIC_AND_AUDIO",
    "MAPS_AND_NAVIGATION",
    "SPORTS",
    "VIDEO_PLAYERS",
];

/// One of the nine context labels selecting a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ContextLabel {
    Global,
    High,
    Low,
    Stream,
    Interact,
    StreamHigh,
    StreamLow,
    InteractHigh,
    InteractLow,
}

impl ContextLabel {
    pub const ALL: [ContextLabel; 9] = [
        ContextLabel::Global,
        ContextLabel::High,
        ContextLabel::Low,
        ContextLabel::Stream,
        ContextLabel::Interact,
        ContextLabel::StreamHigh,
        ContextLabel::StreamLow,
        ContextLabel::InteractHigh,
        ContextLabel::InteractLow,
    ];

    /// The eight non-global candidate splits.
    pub const CANDIDATES: [ContextLabel; 8] = [
        ContextLabel::High,
        ContextLabel::Low,
        ContextLabel::Stream,
        ContextLabel::Interact,
        ContextLabel::StreamHigh,
        ContextLabel::StreamLow,
        ContextLabel::InteractHigh,
        ContextLabel::InteractLow,
    ];

    /// Decompose into (signal part, app part); GLOBAL has neither.
    pub fn parts(self) -> (Option<SignalPart>, Option<AppPart>) {
        match self {
            ContextLabel::Global => (None, None),
            ContextLabel::High => (Some(SignalPart::High), None),
            ContextLabel::Low => (Some(SignalPart::Low), None),
            ContextLabel::Stream => (None, Some(AppPart::Stream)),
            ContextLabel::Interact => (None, Some(AppPart::Interact)),
            ContextLabel::StreamHigh => (Some(SignalPart::High), Some(AppPart::Stream)),
            ContextLabel::StreamLow => (Some(SignalPart::Low), Some(AppPart::Stream)),
            ContextLabel::InteractHigh => (Some(SignalPart::High), Some(AppPart::Interact)),
            ContextLabel::InteractLow => (Some(SignalPart::Low), Some(AppPart::Interact)),
        }
    }

    pub fn compose(signal: Option<SignalPart>, app: Option<AppPart>) -> ContextLabel {
        match (signal, app) {
            (None, None) => ContextLabel::Global,
            (Some(SignalPart::High), None) => ContextLabel::High,
            (Some(SignalPart::Low), None) => ContextLabel::Low,
            (None, Some(AppPart::Stream)) => ContextLabel::Stream,
            (None, Some(AppPart::Interact)) => ContextLabel::Interact,
            (Some(SignalPart::High), Some(AppPart::Stream)) => ContextLabel::StreamHigh,
            (Some(SignalPart::Low), Some(AppPart::Stream)) => ContextLabel::StreamLow,
            (Some(SignalPart::High), Some(AppPart::Interact)) => ContextLabel::InteractHigh,
            (Some(SignalPart::Low), Some(AppPart::Interact)) => ContextLabel::InteractLow,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ContextLabel::Global => "GLOBAL",
            ContextLabel::High => "HIGH",
            ContextLabel::Low => "LOW",
            ContextLabel::Stream => "STREAM",
            ContextLabel::Interact => "INTERACT",
            ContextLabel::StreamHigh => "STREAM_HIGH",
            ContextLabel::StreamLow => "STREAM_LOW",
            ContextLabel::InteractHigh => "INTERACT_HIGH",
            ContextLabel::InteractLow => "INTERACT_LOW",
        }
    }

    pub fn parse(name: &str) -> Result<ContextLabel, PipelineError> {
        ContextLabel::ALL
            .into_iter()
            .find(|c| c.as_str() == name)
            .ok_or_else(|| PipelineError::UnknownContext(name.to_string()))
    }
}

impl std::fmt::Display for ContextLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One raw telemetry sample (10s of traffic observed every 10 minutes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user: String,
    pub timestamp: i64,
    pub rx_bytes: f64,
    pub tx_bytes: f64,
    pub rssi: Option<f64>,
    pub app_category: Option<String>,
}

/// Aggregation knobs for [`ingest`].
#[derive(Debug, Clone)]
pub struct AggregationConfig {
    /// Expected samples per hourly bucket; a trailing bucket with fewer is dropped.
    pub samples_per_bucket: usize,
    /// Bucket-mean RSSI below this is labeled LOW.
    pub rssi_threshold: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            samples_per_bucket: 6,
            rssi_threshold: -75.0,
        }
    }
}

/// One aggregated hourly step with its context labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyStep {
    pub dl: f64,
    pub ul: f64,
    pub signal: Option<SignalPart>,
    pub app: Option<AppPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSeries {
    pub user: String,
    pub steps: Vec<HourlyStep>,
}

/// A labeled per-user hourly dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<UserSeries>,
}

impl Dataset {
    /// Mean of one feature over every step of every user.
    pub fn feature_mean(&self, feature: Feature) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for u in &self.users {
            for s in &u.steps {
                sum += match feature {
                    Feature::Download => s.dl,
                    Feature::Upload => s.ul,
                };
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Aggregate raw samples into per-user labeled hourly series.
///
/// Samples are bucketed into fixed wall-clock hours; each hourly step carries
/// the mean download/upload volume of its bucket. The signal label is LOW iff
/// the bucket-mean RSSI falls below the threshold (buckets without RSSI
/// inherit the previous label, HIGH if none). The app label carries forward
/// the last category that mapped to a known store category.
pub fn ingest(mut records: Vec<SampleRecord>, cfg: &AggregationConfig) -> Dataset {
    records.sort_by(|a, b| (&a.user, a.timestamp).cmp(&(&b.user, b.timestamp)));

    let mut by_user: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user.clone()).or_default().push(r);
    }

    let mut users = Vec::new();
    for (user, samples) in by_user {
        let mut steps: Vec<HourlyStep> = Vec::new();
        let mut last_signal: Option<SignalPart> = None;
        let mut last_app: Option<AppPart> = None;

        let mut buckets: Vec<(i64, Vec<&SampleRecord>)> = Vec::new();
        for s in &samples {
            let hour = s.timestamp.div_euclid(3600);
            match buckets.last_mut() {
                Some((h, group)) if *h == hour => group.push(s),
                _ => buckets.push((hour, vec![s])),
            }
        }
        // Drop a partial trailing bucket so step counts stay exact.
        if let Some((_, group)) = buckets.last() {
            if group.len() < cfg.samples_per_bucket {
                buckets.pop();
            }
        }

        for (_, group) in &buckets {
            let n = group.len() as f64;
            let dl = group.iter().map(|s| s.rx_bytes).sum::<f64>() / n;
            let ul = group.iter().map(|s| s.tx_bytes).sum::<f64>() / n;

            let rssi_values: Vec<f64> = group.iter().filter_map(|s| s.rssi).collect();
            let signal = if rssi_values.is_empty() {
                Some(last_signal.unwrap_or(SignalPart::High))
            } else {
                let mean = rssi_values.iter().sum::<f64>() / rssi_values.len() as f64;
                Some(if mean < cfg.rssi_threshold {
                    SignalPart::Low
                } else {
                    SignalPart::High
                })
            };
            last_signal = signal;

            for s in group.iter() {
                if let Some(cat) = &s.app_category {
                    last_app = Some(if STREAM_CATEGORIES.contains(&cat.as_str()) {
                        AppPart::Stream
                    } else {
                        AppPart::Interact
                    });
                }
            }
            let app = Some(last_app.unwrap_or(AppPart::Interact));

            steps.push(HourlyStep {
                dl,
                ul,
                signal,
                app,
            });
        }

        if !steps.is_empty() {
            users.push(UserSeries { user, steps });
        }
    }
    Dataset { users }
}

/// Read samples from CSV with header `user,timestamp,rx_bytes,tx_bytes,rssi,app_category`;
/// empty fields stand for absent values.
pub fn read_sample_csv<R: Read>(reader: R) -> Result<Vec<SampleRecord>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        user: String,
        timestamp: i64,
        rx_bytes: f64,
        tx_bytes: f64,
        rssi: Option<f64>,
        app_category: Option<String>,
    }
    let mut out = Vec::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        out.push(SampleRecord {
            user: row.user,
            timestamp: row.timestamp,
            rx_bytes: row.rx_bytes,
            tx_bytes: row.tx_bytes,
            rssi: row.rssi,
            app_category: row.app_category.filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

/// Thresholds governing context significance.
#[derive(Debug, Clone)]
pub struct SplitThresholds {
    /// Minimum users carrying a full-length sub-series in the context.
    pub min_users: usize,
    /// Required sub-series length (the configured training sequence length).
    pub min_steps: usize,
    /// Relative mean-difference cutoff versus the global means.
    pub mean_delta: f64,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        Self {
            min_users: 5,
            min_steps: 12,
            mean_delta: 0.10,
        }
    }
}

/// One candidate context cohort with its significance verdict.
#[derive(Debug, Clone)]
pub struct ContextSplit {
    pub label: ContextLabel,
    /// The cohort as a labeled dataset (variable-length per user).
    pub cohort: Dataset,
    /// Rectangular tensor over qualifying users, truncated to a common length.
    pub trace: TraceTensor,
    pub significant: bool,
    pub mean_delta_dl: f64,
    pub mean_delta_ul: f64,
    pub qualifying_users: usize,
}

fn step_matches(step: &HourlyStep, label: ContextLabel) -> bool {
    let (signal, app) = label.parts();
    let signal_ok = signal.map_or(true, |s| step.signal == Some(s));
    let app_ok = app.map_or(true, |a| step.app == Some(a));
    signal_ok && app_ok
}

/// Produce all eight candidate context splits, each flagged significant or not.
/// Insignificant splits are retained so callers can fall back to GLOBAL.
pub fn context_split(dataset: &Dataset, thresholds: &SplitThresholds) -> Vec<ContextSplit> {
    let global_dl = dataset.feature_mean(Feature::Download);
    let global_ul = dataset.feature_mean(Feature::Upload);

    ContextLabel::CANDIDATES
        .iter()
        .map(|&label| {
            let cohort = Dataset {
                users: dataset
                    .users
                    .iter()
                    .filter_map(|u| {
                        let steps: Vec<HourlyStep> = u
                            .steps
                            .iter()
                            .filter(|s| step_matches(s, label))
                            .cloned()
                            .collect();
                        (!steps.is_empty()).then(|| UserSeries {
                            user: u.user.clone(),
                            steps,
                        })
                    })
                    .collect(),
            };

            let qualifying: Vec<&UserSeries> = cohort
                .users
                .iter()
                .filter(|u| u.steps.len() >= thresholds.min_steps)
                .collect();
            let qualifying_users = qualifying.len();

            let rel = |cohort_mean: f64, global_mean: f64| {
                if global_mean == 0.0 {
                    0.0
                } else {
                    (cohort_mean - global_mean) / global_mean
                }
            };
            let mean_delta_dl = rel(cohort.feature_mean(Feature::Download), global_dl);
            let mean_delta_ul = rel(cohort.feature_mean(Feature::Upload), global_ul);

            let significant = qualifying_users >= thresholds.min_users
                && (mean_delta_dl.abs() > thresholds.mean_delta
                    || mean_delta_ul.abs() > thresholds.mean_delta);

            let trace = tensorize(&qualifying);

            ContextSplit {
                label,
                cohort,
                trace,
                significant,
                mean_delta_dl,
                mean_delta_ul,
                qualifying_users,
            }
        })
        .collect()
}

/// Build a rectangular tensor from user series, truncating every user to the
/// shortest retained length.
fn tensorize(users: &[&UserSeries]) -> TraceTensor {
    let steps = users.iter().map(|u| u.steps.len()).min().unwrap_or(0);
    let mut t = TraceTensor::zeros(users.len(), steps);
    for (row, u) in users.iter().enumerate() {
        for (k, s) in u.steps.iter().take(steps).enumerate() {
            t.set(row, k, Feature::Download, s.dl);
            t.set(row, k, Feature::Upload, s.ul);
        }
    }
    t
}

/// Split users 50/50 into train and test tensors.
///
/// Users with fewer than `min_steps` usable steps are discarded first; the
/// remaining users are shuffled deterministically by `seed`. With an odd
/// count the extra user goes to the training side.
pub fn split_train_test(
    dataset: &Dataset,
    seed: u64,
    min_steps: usize,
) -> Result<(TraceTensor, TraceTensor), PipelineError> {
    let eligible: Vec<&UserSeries> = dataset
        .users
        .iter()
        .filter(|u| u.steps.len() >= min_steps)
        .collect();
    if eligible.len() < 2 {
        return Err(PipelineError::TooFewUsers(eligible.len()));
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let half = eligible.len().div_ceil(2);
    let train: Vec<&UserSeries> = order[..half].iter().map(|&i| eligible[i]).collect();
    let test: Vec<&UserSeries> = order[half..].iter().map(|&i| eligible[i]).collect();
    Ok((tensorize(&train), tensorize(&test)))
}

/// Convert a whole dataset to a rectangular tensor (no user filtering).
pub fn dataset_to_tensor(dataset: &Dataset) -> TraceTensor {
    let users: Vec<&UserSeries> = dataset.users.iter().collect();
    tensorize(&users)
}

/// Wrap a tensor as an unlabeled dataset (synthetic sources carry no context).
pub fn tensor_to_dataset(trace: &TraceTensor) -> Dataset {
    let users = (0..trace.users())
        .map(|u| UserSeries {
            user: format!("u{u:04}"),
            steps: (0..trace.steps())
                .map(|k| HourlyStep {
                    dl: trace.get(u, k, Feature::Download),
                    ul: trace.get(u, k, Feature::Upload),
                    signal: None,
                    app: None,
                })
                .collect(),
        })
        .collect();
    Dataset { users }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(
        user: &str,
        ts: i64,
        rx: f64,
        tx: f64,
        rssi: Option<f64>,
        app: Option<&str>,
    ) -> SampleRecord {
        SampleRecord {
            user: user.to_string(),
            timestamp: ts,
            rx_bytes: rx,
            tx_bytes: tx,
            rssi,
            app_category: app.map(str::to_string),
        }
    }

    fn full_hour(user: &str, hour: i64, rx: f64, tx: f64, rssi: f64) -> Vec<SampleRecord> {
        (0..6)
            .map(|i| sample(user, hour * 3600 + i * 600, rx, tx, Some(rssi), None))
            .collect()
    }

    #[test]
    fn hourly_mean_of_six_samples() {
        let tx = [0.0, 6.0, 12.0, 6.0, 0.0, 6.0];
        let records: Vec<SampleRecord> = tx
            .iter()
            .enumerate()
            .map(|(i, &v)| sample("u1", i as i64 * 600, 2.0 * v, v, Some(-60.0), None))
            .collect();
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.users[0].steps.len(), 1);
        assert_eq!(ds.users[0].steps[0].ul, 5.0);
        assert_eq!(ds.users[0].steps[0].dl, 10.0);
    }

    #[test]
    fn rssi_threshold_labels_low() {
        let mut records = full_hour("u1", 0, 1.0, 1.0, -80.0);
        records.extend(full_hour("u1", 1, 1.0, 1.0, -60.0));
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[0].signal, Some(SignalPart::Low));
        assert_eq!(ds.users[0].steps[1].signal, Some(SignalPart::High));
    }

    #[test]
    fn exactly_threshold_rssi_is_high() {
        let records = full_hour("u1", 0, 1.0, 1.0, -75.0);
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[0].signal, Some(SignalPart::High));
    }

    #[test]
    fn missing_rssi_inherits_previous_label() {
        let mut records = full_hour("u1", 0, 1.0, 1.0, -80.0);
        records.extend(
            (0..6).map(|i| sample("u1", 3600 + i * 600, 1.0, 1.0, None, None)),
        );
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[1].signal, Some(SignalPart::Low));
    }

    #[test]
    fn missing_rssi_with_no_history_is_high() {
        let records: Vec<SampleRecord> =
            (0..6).map(|i| sample("u1", i * 600, 1.0, 1.0, None, None)).collect();
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[0].signal, Some(SignalPart::High));
    }

    #[test]
    fn app_label_carries_forward_past_unmapped_samples() {
        let mut records: Vec<SampleRecord> = (0..6)
            .map(|i| {
                let app = if i == 0 { Some("VIDEO_PLAYERS") } else { None };
                sample("u1", 36000 + i * 600, 1.0, 1.0, Some(-60.0), app)
            })
            .collect();
        records.extend(
            (0..6).map(|i| sample("u1", 39600 + i * 600, 1.0, 1.0, Some(-60.0), None)),
        );
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[0].app, Some(AppPart::Stream));
        assert_eq!(ds.users[0].steps[1].app, Some(AppPart::Stream));
    }

    #[test]
    fn non_stream_category_maps_to_interact() {
        let records: Vec<SampleRecord> = (0..6)
            .map(|i| sample("u1", i * 600, 1.0, 1.0, Some(-60.0), Some("SOCIAL")))
            .collect();
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps[0].app, Some(AppPart::Interact));
    }

    #[test]
    fn partial_trailing_bucket_is_dropped() {
        let mut records = full_hour("u1", 0, 1.0, 1.0, -60.0);
        records.push(sample("u1", 3600, 9.0, 9.0, Some(-60.0), None));
        let ds = ingest(records, &AggregationConfig::default());
        assert_eq!(ds.users[0].steps.len(), 1);
    }

    #[test]
    fn ingestion_is_permutation_invariant() {
        let mut records = full_hour("u1", 0, 3.0, 1.0, -80.0);
        records.extend(full_hour("u1", 1, 5.0, 2.0, -60.0));
        records.extend(full_hour("u2", 0, 7.0, 3.0, -70.0));
        let sorted = ingest(records.clone(), &AggregationConfig::default());
        records.reverse();
        records.swap(0, 7);
        let shuffled = ingest(records, &AggregationConfig::default());
        assert_eq!(sorted, shuffled);
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        let ds = ingest(Vec::new(), &AggregationConfig::default());
        assert!(ds.users.is_empty());
    }

    fn labeled_user(user: &str, n: usize, dl: f64, signal: SignalPart, app: AppPart) -> UserSeries {
        UserSeries {
            user: user.to_string(),
            steps: (0..n)
                .map(|_| HourlyStep {
                    dl,
                    ul: dl / 2.0,
                    signal: Some(signal),
                    app: Some(app),
                })
                .collect(),
        }
    }

    #[test]
    fn context_significance_thresholds() {
        // 7 STREAM users well above the global mean, 7 INTERACT users below.
        let mut users = Vec::new();
        for i in 0..7 {
            users.push(labeled_user(
                &format!("s{i}"),
                12,
                2.0,
                SignalPart::High,
                AppPart::Stream,
            ));
            users.push(labeled_user(
                &format!("i{i}"),
                12,
                1.0,
                SignalPart::High,
                AppPart::Interact,
            ));
        }
        let ds = Dataset { users };
        let splits = context_split(&ds, &SplitThresholds::default());
        assert_eq!(splits.len(), 8);
        let by_label = |l: ContextLabel| splits.iter().find(|s| s.label == l).unwrap();

        let stream = by_label(ContextLabel::Stream);
        assert!(stream.significant);
        assert!(stream.mean_delta_dl > 0.10);

        // Nobody has LOW signal: cohort empty, insignificant.
        let low = by_label(ContextLabel::Low);
        assert!(!low.significant);
        assert_eq!(low.qualifying_users, 0);

        // HIGH covers everyone, so its mean equals the global mean.
        let high = by_label(ContextLabel::High);
        assert!(!high.significant);
        assert!(high.mean_delta_dl.abs() < 1e-12);
    }

    #[test]
    fn context_with_too_few_users_is_insignificant() {
        let mut users = Vec::new();
        for i in 0..4 {
            users.push(labeled_user(
                &format!("s{i}"),
                12,
                10.0,
                SignalPart::High,
                AppPart::Stream,
            ));
        }
        for i in 0..8 {
            users.push(labeled_user(
                &format!("i{i}"),
                12,
                1.0,
                SignalPart::High,
                AppPart::Interact,
            ));
        }
        let ds = Dataset { users };
        let splits = context_split(&ds, &SplitThresholds::default());
        let stream = splits
            .iter()
            .find(|s| s.label == ContextLabel::Stream)
            .unwrap();
        assert_eq!(stream.qualifying_users, 4);
        assert!(!stream.significant, "4 qualifying users is below the floor");
    }

    #[test]
    fn small_mean_delta_is_insignificant() {
        let mut users = Vec::new();
        for i in 0..6 {
            users.push(labeled_user(
                &format!("s{i}"),
                12,
                1.03,
                SignalPart::High,
                AppPart::Stream,
            ));
            users.push(labeled_user(
                &format!("i{i}"),
                12,
                1.0,
                SignalPart::High,
                AppPart::Interact,
            ));
        }
        let ds = Dataset { users };
        let splits = context_split(&ds, &SplitThresholds::default());
        let stream = splits
            .iter()
            .find(|s| s.label == ContextLabel::Stream)
            .unwrap();
        assert!(stream.mean_delta_dl.abs() < 0.10);
        assert!(!stream.significant);
    }

    #[test]
    fn unlabeled_steps_make_every_candidate_empty() {
        let users = (0..6)
            .map(|i| UserSeries {
                user: format!("u{i}"),
                steps: (0..12)
                    .map(|_| HourlyStep {
                        dl: 1.0,
                        ul: 1.0,
                        signal: None,
                        app: None,
                    })
                    .collect(),
            })
            .collect();
        let ds = Dataset { users };
        let splits = context_split(&ds, &SplitThresholds::default());
        for s in &splits {
            assert!(!s.significant);
            assert!(s.cohort.users.is_empty());
        }
    }

    #[test]
    fn split_is_even_and_seeded() {
        let users = (0..100)
            .map(|i| {
                labeled_user(
                    &format!("u{i}"),
                    12,
                    1.0 + i as f64,
                    SignalPart::High,
                    AppPart::Interact,
                )
            })
            .collect();
        let ds = Dataset { users };
        let (train, test) = split_train_test(&ds, 7, 10).unwrap();
        assert_eq!(train.users(), 50);
        assert_eq!(test.users(), 50);
        let (train2, test2) = split_train_test(&ds, 7, 10).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = split_train_test(&ds, 8, 10).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn short_users_are_excluded_before_splitting() {
        let mut users: Vec<UserSeries> = (0..4)
            .map(|i| labeled_user(&format!("u{i}"), 12, 1.0, SignalPart::High, AppPart::Interact))
            .collect();
        users.push(labeled_user("short", 8, 1.0, SignalPart::High, AppPart::Interact));
        let ds = Dataset { users };
        let (train, test) = split_train_test(&ds, 1, 10).unwrap();
        assert_eq!(train.users() + test.users(), 4);
    }

    #[test]
    fn too_few_eligible_users_errors() {
        let ds = Dataset {
            users: vec![labeled_user("u0", 12, 1.0, SignalPart::High, AppPart::Interact)],
        };
        assert!(split_train_test(&ds, 1, 10).is_err());
    }

    #[test]
    fn csv_round_trip_with_absent_fields() {
        let csv = "user,timestamp,rx_bytes,tx_bytes,rssi,app_category\n\
                   u1,0,10,5,-80,VIDEO_PLAYERS\n\
                   u1,600,12,6,,\n";
        let records = read_sample_csv(csv.as_bytes()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].rssi, Some(-80.0));
        assert_eq!(records[0].app_category.as_deref(), Some("VIDEO_PLAYERS"));
        assert_eq!(records[1].rssi, None);
        assert_eq!(records[1].app_category, None);
    }
}
