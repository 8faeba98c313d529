//! REST trace-generation service: a registry of per-context generator
//! checkpoints behind `POST /generate`, with JSON and plain-text output.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use mass_core::checkpoint::Checkpoint;
use mass_core::context::ContextLabel;
use mass_core::gan::{generator_forward, GanModel, LatentBatch};
use mass_core::trace::Normalization;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("checkpoint directory {0} has no GLOBAL checkpoint")]
    MissingGlobal(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] mass_core::checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable map from context label to a loaded generator model.
pub struct ModelRegistry {
    models: HashMap<ContextLabel, Arc<GanModel>>,
}

impl ModelRegistry {
    pub fn new(models: HashMap<ContextLabel, GanModel>) -> Result<Self, ServerError> {
        if !models.contains_key(&ContextLabel::Global) {
            return Err(ServerError::MissingGlobal("<in-memory>".into()));
        }
        Ok(Self {
            models: models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        })
    }

    /// Load `<CONTEXT>.ckpt` files from a directory. A missing or corrupt
    /// GLOBAL checkpoint refuses startup; other corrupt checkpoints are
    /// skipped with a warning.
    pub fn load(dir: &Path) -> Result<(Self, Vec<String>), ServerError> {
        let mut models = HashMap::new();
        let mut warnings = Vec::new();
        for context in ContextLabel::ALL {
            let path = dir.join(Checkpoint::file_name(context));
            if !path.exists() {
                continue;
            }
            match Checkpoint::load(&path) {
                Ok(ckpt) => {
                    models.insert(context, Arc::new(ckpt.model()));
                }
                Err(err) if context == ContextLabel::Global => {
                    return Err(ServerError::Checkpoint(err));
                }
                Err(err) => {
                    warnings.push(format!("skipping {}: {err}", path.display()));
                }
            }
        }
        if !models.contains_key(&ContextLabel::Global) {
            return Err(ServerError::MissingGlobal(dir.display().to_string()));
        }
        Ok((Self { models }, warnings))
    }

    /// Context lookup; anything absent resolves to GLOBAL.
    pub fn resolve(&self, context: ContextLabel) -> &Arc<GanModel> {
        self.models
            .get(&context)
            .unwrap_or_else(|| &self.models[&ContextLabel::Global])
    }

    pub fn contexts(&self) -> Vec<ContextLabel> {
        let mut out: Vec<ContextLabel> = self.models.keys().copied().collect();
        out.sort();
        out
    }
}

#[derive(Debug, Deserialize)]
struct GenerateBody {
    context: Option<String>,
    users: Option<i64>,
    seq_len: Option<i64>,
    normalize: Option<String>,
    shuffle: Option<bool>,
    /// Extension: seeded requests are reproducible; absent uses server entropy.
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct GenerateQuery {
    format: Option<String>,
}

/// A fully validated generate request.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub context: ContextLabel,
    pub users: usize,
    pub seq_len: usize,
    pub normalize: Normalization,
    pub shuffle: bool,
    pub seed: Option<u64>,
}

impl Default for GenerateRequest {
    fn default() -> Self {
        Self {
            context: ContextLabel::Global,
            users: 1,
            seq_len: 100,
            normalize: Normalization::Pos,
            shuffle: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Text,
}

fn bad_request(msg: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, msg.into()).into_response()
}

fn parse_request(body: &[u8]) -> Result<GenerateRequest, String> {
    let defaults = GenerateRequest::default();
    if body.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(defaults);
    }
    let raw: GenerateBody =
        serde_json::from_slice(body).map_err(|e| format!("malformed request body: {e}"))?;
    let users = raw.users.unwrap_or(defaults.users as i64);
    let seq_len = raw.seq_len.unwrap_or(defaults.seq_len as i64);
    if users <= 0 {
        return Err(format!("users must be positive, got {users}"));
    }
    if seq_len <= 0 {
        return Err(format!("seq_len must be positive, got {seq_len}"));
    }
    let normalize = match raw.normalize.as_deref() {
        None => defaults.normalize,
        Some("pos") => Normalization::Pos,
        Some("minmax") => Normalization::MinMax,
        Some(other) => return Err(format!("unknown normalize value {other:?}")),
    };
    // Unknown context names fall back to GLOBAL, like absent checkpoints.
    let context = raw
        .context
        .as_deref()
        .and_then(|s| ContextLabel::parse(s).ok())
        .unwrap_or(ContextLabel::Global);
    Ok(GenerateRequest {
        context,
        users: users as usize,
        seq_len: seq_len as usize,
        normalize,
        shuffle: raw.shuffle.unwrap_or(defaults.shuffle),
        seed: raw.seed,
    })
}

/// Run one generate request against a registry.
pub fn generate(
    registry: &ModelRegistry,
    request: &GenerateRequest,
) -> mass_core::trace::TraceTensor {
    let model = registry.resolve(request.context);
    let mut rng = match request.seed {
        Some(seed) => ChaCha8Rng::seed_from_u64(seed),
        None => ChaCha8Rng::from_entropy(),
    };
    let z = LatentBatch::draw(&mut rng, request.users, request.seq_len);
    let mut trace = generator_forward(model, &z).expect("validated checkpoint");
    trace = trace.normalize(request.normalize);
    if request.shuffle {
        use rand::Rng;
        for u in 0..trace.users() {
            let offset = rng.gen_range(0..request.seq_len);
            trace.shift_user(u, offset);
        }
    }
    trace
}

fn render_json(trace: &mass_core::trace::TraceTensor) -> String {
    use mass_core::trace::Feature;
    let users: Vec<Vec<[f64; 2]>> = (0..trace.users())
        .map(|u| {
            (0..trace.steps())
                .map(|k| {
                    [
                        trace.get(u, k, Feature::Download),
                        trace.get(u, k, Feature::Upload),
                    ]
                })
                .collect()
        })
        .collect();
    serde_json::to_string(&serde_json::json!({ "trace": users })).expect("serializable trace")
}

async fn handle_generate(
    State(registry): State<Arc<ModelRegistry>>,
    Query(query): Query<GenerateQuery>,
    body: Bytes,
) -> Response {
    let format = match query.format.as_deref() {
        None | Some("json") => OutputFormat::Json,
        Some("text") => OutputFormat::Text,
        Some(other) => return bad_request(format!("unknown format {other:?}")),
    };
    let request = match parse_request(&body) {
        Ok(r) => r,
        Err(msg) => return bad_request(msg),
    };
    let trace = generate(&registry, &request);
    match format {
        OutputFormat::Json => (
            StatusCode::OK,
            [("content-type", "application/json")],
            render_json(&trace),
        )
            .into_response(),
        OutputFormat::Text => (
            StatusCode::OK,
            [("content-type", "text/plain")],
            trace.write_text(),
        )
            .into_response(),
    }
}

async fn handle_health() -> Response {
    (
        StatusCode::OK,
        [("content-type", "application/json")],
        "{\"status\":\"ok\"}",
    )
        .into_response()
}

pub fn router(registry: Arc<ModelRegistry>) -> Router {
    Router::new()
        .route("/generate", post(handle_generate))
        .route("/health", get(handle_health))
        .with_state(registry)
}

/// Bind and serve until the process exits. Returns the bound address through
/// the callback before blocking (tests bind port 0).
pub async fn serve(
    registry: Arc<ModelRegistry>,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(registry)).await
}
