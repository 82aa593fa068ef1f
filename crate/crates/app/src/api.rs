//! HTTP API over a [`Session`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::AppError;
use crate::ops::{Decision, MethodName, MovisName};
use crate::session::{EvaluateRequest, ExplainRequest, ManipulateRequest, Session};

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match &self {
            AppError::NotFound(_) => StatusCode::NOT_FOUND,
            AppError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            AppError::Conflict(_) => StatusCode::CONFLICT,
            AppError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<JsonRejection> for AppError {
    fn from(r: JsonRejection) -> Self {
        AppError::Invalid(r.body_text())
    }
}

impl From<QueryRejection> for AppError {
    fn from(r: QueryRejection) -> Self {
        AppError::Invalid(r.body_text())
    }
}

type ApiResult<T> = Result<T, AppError>;
type AppState = Arc<Session>;

/// Runs blocking model work off the async executor.
async fn blocking<T, F>(session: AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Session) -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&session)).await.map_err(AppError::internal)?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/images", post(upload))
        .route("/images/{id}/image.png", get(image_png))
        .route("/images/{id}/detections", get(detections))
        .route("/explanations", post(explain))
        .route("/explanations/{id}/heatmap.png", get(heatmap))
        .route("/manipulate", post(manipulate))
        .route("/manipulated/{id}/image.png", get(manipulated_png))
        .route("/evaluations", post(evaluate))
        .route("/visualizations", get(visualization))
        .route("/study/next", post(study_next))
        .route("/study/answer", post(study_answer))
        .route("/study/vote", post(study_vote))
        .route("/study/ranking", get(study_ranking))
        .with_state(session)
}

async fn upload(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let record = blocking(s, move |s| s.upload(&body)).await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn image_png(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(s, move |s| s.image_png(&id)).await?))
}

async fn detections(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(blocking(s, move |s| s.detections(&id)).await?).into_response())
}

async fn explain(State(s): State<AppState>, req: Result<Json<ExplainRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = req?;
    Ok(Json(blocking(s, move |s| s.explain(&req)).await?).into_response())
}

async fn heatmap(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(s, move |s| s.heatmap_png(&id)).await?))
}

async fn manipulate(
    State(s): State<AppState>,
    req: Result<Json<ManipulateRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = req?;
    Ok(Json(blocking(s, move |s| s.manipulate(&req)).await?).into_response())
}

async fn manipulated_png(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(png(blocking(s, move |s| s.manipulated_png(&id)).await?))
}

async fn evaluate(State(s): State<AppState>, req: Result<Json<EvaluateRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = req?;
    Ok(Json(blocking(s, move |s| s.evaluate(&req)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct VisualizationQuery {
    image_id: String,
    movis_method: MovisName,
    decision: Decision,
    method: MethodName,
}

async fn visualization(
    State(s): State<AppState>,
    q: Result<Query<VisualizationQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = q?;
    Ok(png(blocking(s, move |s| s.visualization(&q.image_id, q.movis_method.0, q.decision, q.method.0)).await?))
}

async fn study_next(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.study_next()).await?).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub question_id: String,
    pub score: i8,
}

async fn study_answer(
    State(s): State<AppState>,
    req: Result<Json<AnswerRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = req?;
    Ok(Json(blocking(s, move |s| s.study_answer(&req.question_id, req.score)).await?).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VoteRequest {
    pub option: String,
}

async fn study_vote(State(s): State<AppState>, req: Result<Json<VoteRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = req?;
    Ok(Json(blocking(s, move |s| s.vote(&req.option)).await?).into_response())
}

async fn study_ranking(State(s): State<AppState>) -> ApiResult<Response> {
    Ok(Json(blocking(s, |s| s.ranking()).await?).into_response())
}

pub async fn serve(session: Arc<Session>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
