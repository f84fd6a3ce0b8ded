use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{image_png, PredictionPayload, ServerState, SharedState};
use crate::error::Error;
use crate::training::{intervene_output, resolve_overrides, InterventionMode, InterventionRequest};

const DEFAULT_PAGE: usize = 20;
const MAX_PAGE: usize = 200;

#[derive(Debug)]
struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body {
            error: String,
        }
        (self.0, Json(Body { error: self.1 })).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownExample(_) => StatusCode::NOT_FOUND,
            Error::ConceptIndex { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn unprocessable(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/schema", get(schema))
        .route("/api/examples", get(examples))
        .route("/api/predict", post(predict))
        .route("/api/intervene", post(intervene))
        .route("/api/saliency/{example_id}/{concept_index}", get(saliency))
        .route("/api/intervention-curve", get(curve))
        .with_state(state)
}

async fn schema(State(s): State<SharedState>) -> Response {
    Json(s.snapshot().schema.clone()).into_response()
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    split: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ExampleSummary {
    id: String,
    class_label: usize,
    /// `data:image/png;base64,...`
    thumbnail: String,
}

#[derive(Debug, Serialize)]
struct ExamplePage {
    split: String,
    total: usize,
    offset: usize,
    limit: usize,
    items: Vec<ExampleSummary>,
}

async fn examples(State(s): State<SharedState>, Query(q): Query<PageQuery>) -> ApiResult<Json<ExamplePage>> {
    let st = s.snapshot();
    let split = q.split.unwrap_or_else(|| {
        if st.splits.contains_key("test") { "test" } else { "all" }.to_string()
    });
    let ids = st
        .splits
        .get(&split)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no split named `{split}`")))?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let mut items = Vec::new();
    for id in ids.iter().skip(offset).take(limit) {
        let ex = st.example(id).ok_or_else(|| Error::UnknownExample(id.clone()))?;
        let png = image_png(&ex.input)?;
        items.push(ExampleSummary {
            id: id.clone(),
            class_label: ex.class_label,
            thumbnail: format!(
                "data:image/png;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(png)
            ),
        });
    }
    Ok(Json(ExamplePage {
        split,
        total: ids.len(),
        offset,
        limit,
        items,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictBody {
    example_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterveneBody {
    example_id: String,
    #[serde(default)]
    overrides: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    mode: InterventionMode,
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))
}

/// Keys must be integers and values 0/1 (or booleans). Non-integer keys and
/// non-numeric values are malformed; negative keys and other numbers are
/// out of range.
fn parse_overrides(raw: &BTreeMap<String, serde_json::Value>) -> ApiResult<BTreeMap<usize, u8>> {
    let mut out = BTreeMap::new();
    for (key, value) in raw {
        let index: i64 = key
            .trim()
            .parse()
            .map_err(|_| bad_request(format!("override key `{key}` is not a concept index")))?;
        let index = usize::try_from(index).map_err(|_| unprocessable(format!("concept index {index} is negative")))?;
        let v = match value {
            serde_json::Value::Bool(b) => u8::from(*b),
            serde_json::Value::Number(n) => match n.as_u64() {
                Some(v @ (0 | 1)) => v as u8,
                _ => return Err(unprocessable(format!("override for concept {index} must be 0 or 1, got {n}"))),
            },
            other => return Err(bad_request(format!("override for concept {index} is not a number: {other}"))),
        };
        out.insert(index, v);
    }
    Ok(out)
}

fn payload(st: &ServerState, req: &InterventionRequest) -> ApiResult<PredictionPayload> {
    let ex = st
        .example(&req.example_id)
        .ok_or_else(|| Error::UnknownExample(req.example_id.clone()))?;
    let overrides = resolve_overrides(&st.schema, req, ex.concepts.as_deref())?;
    let out = st.model.forward(&ex.input)?;
    let outcome = intervene_output(&st.model, &out, &overrides)?;
    Ok(PredictionPayload::build(&st.schema, ex, &outcome, &overrides, true))
}

async fn predict(State(s): State<SharedState>, body: Bytes) -> ApiResult<Json<PredictionPayload>> {
    let b: PredictBody = parse_json(&body)?;
    let req = InterventionRequest {
        example_id: b.example_id,
        overrides: BTreeMap::new(),
        mode: InterventionMode::Individual,
    };
    Ok(Json(payload(&s.snapshot(), &req)?))
}

async fn intervene(State(s): State<SharedState>, body: Bytes) -> ApiResult<Json<PredictionPayload>> {
    let b: InterveneBody = parse_json(&body)?;
    let overrides = parse_overrides(&b.overrides)?;
    let req = InterventionRequest {
        example_id: b.example_id,
        overrides,
        mode: b.mode,
    };
    Ok(Json(payload(&s.snapshot(), &req)?))
}

async fn saliency(State(s): State<SharedState>, Path((id, concept)): Path<(String, String)>) -> ApiResult<Response> {
    let concept: usize = concept
        .parse()
        .map_err(|_| bad_request(format!("`{concept}` is not a concept index")))?;
    let png = s.snapshot().saliency_png(&id, concept).map_err(|e| match e {
        Error::ConceptIndex { .. } => ApiError(StatusCode::NOT_FOUND, e.to_string()),
        other => other.into(),
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn curve(State(s): State<SharedState>) -> ApiResult<Response> {
    let st = s.snapshot();
    let points = st
        .curve
        .as_ref()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no intervention sweep cached for this checkpoint".into()))?;
    Ok(Json(points).into_response())
}
