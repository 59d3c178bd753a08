//! HTTP inference endpoints over a loaded checkpoint: model metadata,
//! session seeding, decoding with latent overrides, and traversals.

pub mod hexfloat;

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use mdvae::autodiff::Tensor;
use mdvae::chem::{canonical_key, emit_smiles, GraphJson};
use mdvae::dataset::{BuiltinProperty, PropertySpec};
use mdvae::decoder::decode_sample;
use mdvae::encoder::standard_normal;
use mdvae::evaluation::{linspace, predict_properties};
use mdvae::heads::GroupHead;
use mdvae::model::{Model, ModelError};
use mdvae::training::Checkpoint;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_SESSION_CAPACITY: usize = 1024;
pub const MAX_TRAVERSE_STEPS: usize = 1001;
pub const BOND_ALPHABET: [&str; 3] = ["single", "double", "triple"];

/// Immutable inference bundle; swapped whole on reload.
#[derive(Debug)]
pub struct Loaded {
    pub model: Model,
    pub specs: Vec<PropertySpec>,
    pub size_histogram: Vec<usize>,
    heads: Vec<GroupHead>,
}

impl Loaded {
    pub fn new(model: Model, specs: Vec<PropertySpec>, size_histogram: Vec<usize>) -> Self {
        let heads = model.group_heads();
        Self { model, specs, size_histogram, heads }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        Ok(Self::new(ck.model()?, ck.specs.clone(), ck.size_histogram.clone()))
    }

    pub fn max_atoms(&self) -> usize {
        self.size_histogram.len().saturating_sub(1).max(1)
    }

    fn property_name(&self, j: usize) -> String {
        self.specs.get(j).map_or_else(|| format!("property_{j}"), |s| s.name.clone())
    }
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub seed: u64,
    /// n × L per-node latents, never modified.
    pub latents: Tensor,
}

impl Session {
    pub fn zbar(&self) -> Vec<f64> {
        let z = &self.latents;
        let mut m = vec![0.0; z.cols];
        for r in 0..z.rows {
            for (a, v) in m.iter_mut().zip(z.row_slice(r)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= z.rows as f64);
        m
    }
}

struct Shared {
    model: RwLock<Option<Arc<Loaded>>>,
    sessions: Mutex<LruCache<String, Arc<Session>>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        Self {
            shared: Arc::new(Shared {
                model: RwLock::new(None),
                sessions: Mutex::new(LruCache::new(cap)),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn with_model(loaded: Loaded) -> Self {
        let s = Self::new(DEFAULT_SESSION_CAPACITY);
        s.load(loaded);
        s
    }

    /// Replace the model; sessions drawn for the old one are dropped.
    pub fn load(&self, loaded: Loaded) {
        *self.shared.model.write().expect("model lock") = Some(Arc::new(loaded));
        self.shared.sessions.lock().expect("session lock").clear();
    }

    pub fn model(&self) -> Result<Arc<Loaded>, ApiError> {
        self.shared.model.read().expect("model lock").clone().ok_or_else(ApiError::no_model)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.shared
            .sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}")))
    }

    pub fn session_count(&self) -> usize {
        self.shared.sessions.lock().expect("session lock").len()
    }

    fn insert(&self, session: Session) -> Arc<Session> {
        let s = Arc::new(session);
        self.shared.sessions.lock().expect("session lock").put(s.id.clone(), s.clone());
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into() }
    }

    fn no_model() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no model loaded")
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

// ---- wire types ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedDim {
    pub dim: usize,
    pub property: String,
    /// Ascending powers; `coefficients_hex` carries the exact bits.
    pub coefficients: Vec<f64>,
    pub coefficients_hex: Vec<String>,
    pub noise_sigma: f64,
    pub noise_sigma_hex: String,
}

/// A head tying several dims to several properties through a mixing matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub latent_dims: Vec<usize>,
    pub properties: Vec<String>,
    pub polynomials_hex: Vec<Vec<String>>,
    pub mixing_hex: Vec<Vec<String>>,
    pub noise_sigma_hex: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyInfo {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub latent_dim: usize,
    pub targeted: Vec<TargetedDim>,
    pub groups: Vec<GroupInfo>,
    pub properties: Vec<PropertyInfo>,
    pub atoms: Vec<String>,
    pub bonds: Vec<String>,
    pub min_atoms: usize,
    pub max_atoms: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRequest {
    pub n_atoms: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResponse {
    pub session: String,
    pub n: usize,
    pub seed: u64,
    pub zbar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    pub dim: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub session: String,
    #[serde(default)]
    pub overrides: Vec<Override>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeQuery {
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub property: String,
    /// Head output in normalized units.
    pub value: f64,
    /// The same in source units.
    pub denormalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub graph: GraphJson,
    pub smiles: String,
    pub canonical_key: String,
    pub valid: bool,
    pub computed: BTreeMap<String, f64>,
    pub predicted: Vec<Prediction>,
    /// Node-mean latent after overrides; overridden entries are exact.
    pub zbar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraverseRequest {
    pub session: String,
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

// ---- operations ----

pub fn model_info(m: &Loaded) -> ModelInfo {
    let hex = |v: &[f64]| v.iter().map(|&x| hexfloat::format(x)).collect::<Vec<_>>();
    let mut targeted = Vec::new();
    let mut groups = Vec::new();
    for head in &m.heads {
        let g = &head.group;
        if g.is_singleton() {
            let c = &head.polynomials[0];
            targeted.push(TargetedDim {
                dim: g.latent_dims[0],
                property: m.property_name(g.properties[0]),
                coefficients: c.clone(),
                coefficients_hex: hex(c),
                noise_sigma: head.noise_sigma[0],
                noise_sigma_hex: hexfloat::format(head.noise_sigma[0]),
            });
        } else {
            groups.push(GroupInfo {
                latent_dims: g.latent_dims.clone(),
                properties: g.properties.iter().map(|&p| m.property_name(p)).collect(),
                polynomials_hex: head.polynomials.iter().map(|c| hex(c)).collect(),
                mixing_hex: head.mixing.iter().map(|r| hex(r)).collect(),
                noise_sigma_hex: hex(&head.noise_sigma),
            });
        }
    }
    targeted.sort_by_key(|t| t.dim);
    ModelInfo {
        latent_dim: m.model.config.latent,
        targeted,
        groups,
        properties: m.specs.iter().map(|s| PropertyInfo { name: s.name.clone(), mean: s.mean, std: s.std }).collect(),
        atoms: m.model.registry.atoms().iter().map(|a| a.symbol.clone()).collect(),
        bonds: BOND_ALPHABET.iter().map(|s| s.to_string()).collect(),
        min_atoms: 1,
        max_atoms: m.max_atoms(),
    }
}

/// New session from the prior; `n_atoms` defaults to a draw from the
/// training size distribution.
pub fn seed_session(m: &Loaded, req: &SeedRequest, seed: u64, id: String) -> Result<Session, ApiError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = match req.n_atoms {
        Some(n) if n == 0 || n > m.max_atoms() => {
            return Err(ApiError::bad(format!("n_atoms must be in 1..={}, got {n}", m.max_atoms())));
        }
        Some(n) => n,
        None => match WeightedIndex::new(&m.size_histogram) {
            Ok(w) => w.sample(&mut rng).max(1),
            Err(_) => m.max_atoms(),
        },
    };
    let l = m.model.config.latent;
    Ok(Session { id, seed, latents: Tensor::new(n, l, standard_normal(n * l, &mut rng)) })
}

pub fn decode_session(
    m: &Loaded,
    session: &Session,
    overrides: &[Override],
    temperature: f64,
) -> Result<DecodeResponse, ApiError> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(ApiError::bad(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    let mut z = session.latents.clone();
    if z.cols != m.model.config.latent {
        return Err(ApiError::bad("session latents do not match the loaded model"));
    }
    let mut zbar = session.zbar();
    for o in overrides {
        if m.model.groups.locate_dim(o.dim).is_none() {
            return Err(ApiError::bad(format!("latent dim {} is not tied to a property", o.dim)));
        }
        if !o.value.is_finite() {
            return Err(ApiError::bad(format!("override for dim {} is not finite", o.dim)));
        }
        let shift = o.value - zbar[o.dim];
        for r in 0..z.rows {
            z.data[r * z.cols + o.dim] += shift;
        }
        zbar[o.dim] = o.value;
    }
    let graph = decode_sample(&m.model, &z, temperature, session.seed).map_err(|e| ApiError::internal(e.to_string()))?;
    let registry = &m.model.registry;
    let predicted = predict_properties(&m.heads, &zbar, m.specs.len())
        .map_err(|e| ApiError::internal(e.to_string()))?
        .into_iter()
        .enumerate()
        .map(|(j, value)| Prediction {
            property: m.property_name(j),
            value,
            denormalized: m.specs.get(j).map_or(value, |s| s.denormalize(value)),
        })
        .collect();
    let computed = BuiltinProperty::ALL.iter().map(|p| (p.name().to_owned(), p.compute(&graph, registry))).collect();
    Ok(DecodeResponse {
        canonical_key: canonical_key(&graph, registry).map(|k| k.to_hex()).unwrap_or_default(),
        smiles: emit_smiles(&graph, registry),
        valid: graph.is_valid(registry),
        graph: graph.to_json(registry),
        computed,
        predicted,
        zbar,
    })
}

pub fn traverse_session(
    m: &Loaded,
    session: &Session,
    req: &TraverseRequest,
    temperature: f64,
) -> Result<Vec<DecodeResponse>, ApiError> {
    if req.steps == 0 || req.steps > MAX_TRAVERSE_STEPS {
        return Err(ApiError::bad(format!("steps must be in 1..={MAX_TRAVERSE_STEPS}, got {}", req.steps)));
    }
    if !(req.lo.is_finite() && req.hi.is_finite()) || (req.steps > 1 && !(req.lo < req.hi)) {
        return Err(ApiError::bad(format!("range [{}, {}] is empty", req.lo, req.hi)));
    }
    linspace(req.lo, req.hi, req.steps)
        .into_iter()
        .map(|value| decode_session(m, session, &[Override { dim: req.dim, value }], temperature))
        .collect()
}

// ---- HTTP ----

async fn get_model(State(st): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(model_info(st.model()?.as_ref())))
}

async fn post_seed(
    State(st): State<AppState>,
    body: Result<Json<SeedRequest>, JsonRejection>,
) -> Result<Json<SeedResponse>, ApiError> {
    let Json(req) = body?;
    let m = st.model()?;
    let seed = req.seed.unwrap_or_else(rand::random);
    let id = format!("s{:x}", st.shared.next_id.fetch_add(1, Ordering::Relaxed));
    let session = st.insert(seed_session(&m, &req, seed, id)?);
    Ok(Json(SeedResponse { session: session.id.clone(), n: session.latents.rows, seed, zbar: session.zbar() }))
}

async fn post_decode(
    State(st): State<AppState>,
    query: Result<Query<DecodeQuery>, QueryRejection>,
    body: Result<Json<DecodeRequest>, JsonRejection>,
) -> Result<Json<DecodeResponse>, ApiError> {
    let Query(q) = query?;
    let Json(req) = body?;
    let m = st.model()?;
    let session = st.session(&req.session)?;
    let t = q.temperature.unwrap_or(0.0);
    blocking(move || decode_session(&m, &session, &req.overrides, t)).await.map(Json)
}

async fn post_traverse(
    State(st): State<AppState>,
    query: Result<Query<DecodeQuery>, QueryRejection>,
    body: Result<Json<TraverseRequest>, JsonRejection>,
) -> Result<Json<Vec<DecodeResponse>>, ApiError> {
    let Query(q) = query?;
    let Json(req) = body?;
    let m = st.model()?;
    let session = st.session(&req.session)?;
    let t = q.temperature.unwrap_or(0.0);
    blocking(move || traverse_session(&m, &session, &req, t)).await.map(Json)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

/// Routes with CORS for `origin`, or any origin when `None`.
pub fn router(state: AppState, origin: Option<HeaderValue>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE])
        .allow_origin(match origin {
            Some(o) => AllowOrigin::exact(o),
            None => AllowOrigin::any(),
        });
    Router::new()
        .route("/api/model", get(get_model))
        .route("/api/seed", post(post_seed))
        .route("/api/decode", post(post_decode))
        .route("/api/traverse", post(post_traverse))
        .layer(cors)
        .with_state(state)
}

/// Serve `state` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState, origin: Option<&str>) -> std::io::Result<()> {
    let origin = origin
        .map(HeaderValue::from_str)
        .transpose()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad origin: {e}")))?;
    axum::serve(listener, router(state, origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
