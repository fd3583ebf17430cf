//! HTTP surface of the inference service and a matching client.

use std::sync::Arc;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use super::{InferenceClient, InferenceError, InferenceRequest, InferenceResponse, InferenceService, Op};

fn status_for(e: &InferenceError) -> StatusCode {
    match e {
        InferenceError::NotFound(_) => StatusCode::NOT_FOUND,
        InferenceError::EmptyInput | InferenceError::SchemaViolation(_) | InferenceError::NotACoverPage(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        InferenceError::Overloaded(_) | InferenceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        InferenceError::BadRequest(_) => StatusCode::BAD_REQUEST,
    }
}

struct ApiError(InferenceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(self.0)).into_response()
    }
}

async fn dispatch(
    service: Arc<InferenceService>,
    allowed: &[Op],
    request: InferenceRequest,
) -> Result<Json<InferenceResponse>, ApiError> {
    if !allowed.contains(&request.op()) {
        return Err(ApiError(InferenceError::BadRequest(format!("{} is not served on this route", request.op().as_str()))));
    }
    service.handle(request).await.map(Json).map_err(ApiError)
}

pub fn router(service: Arc<InferenceService>) -> Router {
    Router::new()
        .route("/v1/classify/clip", post(|State(s), Json(r)| dispatch(s, &[Op::ClassifyClip], r)))
        .route("/v1/classify/vlm", post(|State(s), Json(r)| dispatch(s, &[Op::ClassifyVlm], r)))
        .route("/v1/ocr", post(|State(s), Json(r)| dispatch(s, &[Op::Ocr], r)))
        .route("/v1/detect", post(|State(s), Json(r)| dispatch(s, &[Op::DetectDetector, Op::DetectVlm], r)))
        .route("/v1/parse", post(|State(s), Json(r)| dispatch(s, &[Op::Parse], r)))
        .route("/v1/stats", get(|State(s): State<Arc<InferenceService>>| async move { Json(s.service_stats()) }))
        .with_state(service)
}

pub async fn serve(listener: tokio::net::TcpListener, service: Arc<InferenceService>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

fn route_for(op: Op) -> &'static str {
    match op {
        Op::ClassifyClip => "/v1/classify/clip",
        Op::ClassifyVlm => "/v1/classify/vlm",
        Op::Ocr => "/v1/ocr",
        Op::DetectDetector | Op::DetectVlm => "/v1/detect",
        Op::Parse => "/v1/parse",
    }
}

/// Calls a remote inference service over HTTP.
#[derive(Clone)]
pub struct HttpInferenceClient {
    base: String,
    http: reqwest::Client,
}

impl HttpInferenceClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpInferenceClient { base: base_url.into().trim_end_matches('/').to_owned(), http: reqwest::Client::new() }
    }
}

#[async_trait]
impl InferenceClient for HttpInferenceClient {
    async fn call(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        let url = format!("{}{}", self.base, route_for(request.op()));
        let resp = self
            .http
            .post(url)
            .json(&request)
            .send()
            .await
            .map_err(|e| InferenceError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return resp.json().await.map_err(|e| InferenceError::Unavailable(format!("bad response body: {e}")));
        }
        match resp.json::<InferenceError>().await {
            Ok(e) => Err(e),
            Err(_) if status == StatusCode::SERVICE_UNAVAILABLE => Err(InferenceError::Unavailable(status.to_string())),
            Err(_) => Err(InferenceError::BadRequest(status.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScaledClock;
    use crate::domain::{BlobKey, DocumentId, PipelineConfig};
    use crate::store::BlobStore;
    use crate::worldgen::{generate_corpus, Calibration, CorpusSpec};

    #[tokio::test]
    async fn http_round_trip_and_status_codes() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default_config();
        let blobs = Arc::new(BlobStore::open(dir.path()).unwrap());
        let corpus = generate_corpus(&CorpusSpec::new(1, 3), &config, &Calibration::default()).unwrap();
        let d = &corpus[0];
        for (p, b) in d.document.pages.iter().zip(d.page_blobs()) {
            blobs.put(&p.blob_key, &b).unwrap();
        }
        let service = Arc::new(InferenceService::new(&config, Calibration::default(), blobs, Arc::new(ScaledClock::new(0.001))));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(serve(listener, service.clone()));
        let client = HttpInferenceClient::new(format!("http://{addr}"));

        let p = &d.document.pages[0];
        let ok = client
            .call(InferenceRequest::Ocr { document_id: d.document.id.clone(), page_index: 0, page_key: p.blob_key.clone() })
            .await
            .unwrap();
        let direct = service
            .handle(InferenceRequest::Ocr { document_id: d.document.id.clone(), page_index: 0, page_key: p.blob_key.clone() })
            .await
            .unwrap();
        assert_eq!(ok.result, direct.result);

        let missing = client
            .call(InferenceRequest::Ocr { document_id: DocumentId::new("x"), page_index: 0, page_key: BlobKey::new("none") })
            .await;
        assert!(matches!(missing, Err(InferenceError::NotFound(_))));

        let empty = client
            .call(InferenceRequest::Parse { document_id: DocumentId::new("x"), text: String::new(), schema: vec!["a".into()] })
            .await;
        assert_eq!(empty.unwrap_err(), InferenceError::EmptyInput);

        let raw = reqwest::Client::new()
            .post(format!("http://{addr}/v1/ocr"))
            .json(&InferenceRequest::Parse { document_id: DocumentId::new("x"), text: "a".into(), schema: vec!["a".into()] })
            .send()
            .await
            .unwrap();
        assert_eq!(raw.status(), StatusCode::BAD_REQUEST);

        let stats: serde_json::Value = reqwest::get(format!("http://{addr}/v1/stats")).await.unwrap().json().await.unwrap();
        assert!(stats["calls"].as_u64().unwrap() >= 3);

        service.set_available(false);
        let down = client
            .call(InferenceRequest::Ocr { document_id: d.document.id.clone(), page_index: 0, page_key: p.blob_key.clone() })
            .await;
        assert!(matches!(down, Err(InferenceError::Unavailable(_))));
    }
}
