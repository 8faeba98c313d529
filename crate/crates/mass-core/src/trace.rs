//! Trace tensors: batches of per-user (download, upload) time series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace tensor needs {expected} values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("malformed text trace at line {line}: {reason}")]
    TextFormat { line: usize, reason: String },
    #[error("user series have unequal lengths")]
    RaggedUsers,
}

/// The two features carried by every trace step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feature {
    Download,
    Upload,
}

impl Feature {
    pub const ALL: [Feature; 2] = [Feature::Download, Feature::Upload];

    pub fn index(self) -> usize {
        match self {
            Feature::Download => 0,
            Feature::Upload => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    /// Negative values clamped to zero, scale untouched.
    Pos,
    /// Per-user per-feature mapping of [min, max] onto [0, 1].
    MinMax,
}

/// A `users x steps x 2` batch of traces, stored row-major as
/// `[user][step][feature]` with feature 0 = download, 1 = upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTensor {
    users: usize,
    steps: usize,
    values: Vec<f64>,
    normalization: Normalization,
}

impl TraceTensor {
    pub fn zeros(users: usize, steps: usize) -> Self {
        Self {
            users,
            steps,
            values: vec![0.0; users * steps * 2],
            normalization: Normalization::Raw,
        }
    }

    pub fn from_values(
        users: usize,
        steps: usize,
        values: Vec<f64>,
        normalization: Normalization,
    ) -> Result<Self, TraceError> {
        if values.len() != users * steps * 2 {
            return Err(TraceError::ValueCount {
                expected: users * steps * 2,
                got: values.len(),
            });
        }
        Ok(Self {
            users,
            steps,
            values,
            normalization,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, user: usize, step: usize, feature: Feature) -> f64 {
        self.values[(user * self.steps + step) * 2 + feature.index()]
    }

    pub fn set(&mut self, user: usize, step: usize, feature: Feature, value: f64) {
        self.values[(user * self.steps + step) * 2 + feature.index()] = value;
    }

    /// One user's series for one feature, in step order.
    pub fn series(&self, user: usize, feature: Feature) -> Vec<f64> {
        (0..self.steps)
            .map(|k| self.get(user, k, feature))
            .collect()
    }

    /// All values of one feature, users concatenated in order.
    pub fn feature_values(&self, feature: Feature) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.users * self.steps);
        for u in 0..self.users {
            for k in 0..self.steps {
                out.push(self.get(u, k, feature));
            }
        }
        out
    }

    /// The `user x step x 2` block for one user, flattened (2K values).
    pub fn user_values(&self, user: usize) -> &[f64] {
        let start = user * self.steps * 2;
        &self.values[start..start + self.steps * 2]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Select a window of steps for a subset of users (for minibatching).
    pub fn window(&self, users: &[usize], start: usize, len: usize) -> TraceTensor {
        let mut out = TraceTensor::zeros(users.len(), len);
        out.normalization = self.normalization;
        for (row, &u) in users.iter().enumerate() {
            for k in 0..len {
                for f in Feature::ALL {
                    out.set(row, k, f, self.get(u, start + k, f));
                }
            }
        }
        out
    }

    pub fn normalize(&self, mode: Normalization) -> TraceTensor {
        let mut out = self.clone();
        match mode {
            Normalization::Raw => {}
            Normalization::Pos => {
                for v in &mut out.values {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Normalization::MinMax => {
                for u in 0..self.users {
                    for f in Feature::ALL {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for k in 0..self.steps {
                            let v = self.get(u, k, f);
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                        let span = hi - lo;
                        for k in 0..self.steps {
                            let v = self.get(u, k, f);
                            // Constant series map to all zeros.
                            let n = if span > 0.0 { (v - lo) / span } else { 0.0 };
                            out.set(u, k, f, n);
                        }
                    }
                }
            }
        }
        out.normalization = mode;
        out
    }

    /// Circularly shift one user's steps forward by `offset`; values falling
    /// off the end re-enter at the beginning.
    pub fn shift_user(&mut self, user: usize, offset: usize) {
        let k = self.steps;
        if k == 0 {
            return;
        }
        let offset = offset % k;
        if offset == 0 {
            return;
        }
        let old: Vec<f64> = self.user_values(user).to_vec();
        for step in 0..k {
            let src = (step + k - offset) % k;
            for f in Feature::ALL {
                self.set(user, step, f, old[src * 2 + f.index()]);
            }
        }
    }

    /// Render in the text interchange format: one `<download> <upload>` line
    /// per step, users separated by a single blank line.
    pub fn write_text(&self) -> String {
        let mut out = String::new();
        for u in 0..self.users {
            if u > 0 {
                out.push('\n');
            }
            for k in 0..self.steps {
                out.push_str(&format!(
                    "{} {}\n",
                    self.get(u, k, Feature::Download),
                    self.get(u, k, Feature::Upload)
                ));
            }
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<TraceTensor, TraceError> {
        let mut users: Vec<Vec<(f64, f64)>> = Vec::new();
        let mut current: Vec<(f64, f64)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    users.push(std::mem::take(&mut current));
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<f64, TraceError> {
                s.and_then(|v| v.parse().ok())
                    .ok_or_else(|| TraceError::TextFormat {
                        line: idx + 1,
                        reason: format!("expected `<download> <upload>`, got {line:?}"),
                    })
            };
            let dl = parse(parts.next())?;
            let ul = parse(parts.next())?;
            current.push((dl, ul));
        }
        if !current.is_empty() {
            users.push(current);
        }
        let steps = users.first().map_or(0, Vec::len);
        if users.iter().any(|u| u.len() != steps) {
            return Err(TraceError::RaggedUsers);
        }
        let mut out = TraceTensor::zeros(users.len(), steps);
        for (u, series) in users.iter().enumerate() {
            for (k, &(dl, ul)) in series.iter().enumerate() {
                out.set(u, k, Feature::Download, dl);
                out.set(u, k, Feature::Upload, ul);
            }
        }
        Ok(out)
    }
}
