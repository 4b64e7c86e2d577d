//! HTTP routes of the annotation service.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use refnet_core::groundtruth::Resolution;
use refnet_core::preprocess::fuse_slices;
use refnet_core::volumetry::gray_png;

use crate::error::ServiceError;
use crate::rle::RleMask;
use crate::store::Store;

type ApiResult<T> = std::result::Result<T, ServiceError>;

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/volumes", get(list))
        .route("/api/volumes/{id}/meta", get(meta))
        .route("/api/volumes/{id}/bscans/{index}", get(bscan))
        .route("/api/volumes/{id}/labels/{grader}/{index}", get(get_labels).put(put_labels))
        .route("/api/volumes/{id}/merge", post(merge).get(merged_summary))
        .route("/api/volumes/{id}/merged/{index}", get(merged_row))
        .route("/api/volumes/{id}/predictions/{index}", get(prediction))
        .route("/api/volumes/{id}/resolutions", post(resolutions))
        .fallback(|uri: axum::http::Uri| async move { ServiceError::NotFound(format!("no route for {uri}")) })
        .with_state(store)
}

fn parse_index(s: &str) -> ApiResult<usize> {
    s.parse()
        .map_err(|_| ServiceError::BadRequest(format!("B-scan index must be a non-negative integer, got {s:?}")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))
}

async fn list(State(store): State<Arc<Store>>) -> impl IntoResponse {
    Json(store.list())
}

async fn meta(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.meta(&id)?))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

async fn bscan(
    State(store): State<Arc<Store>>,
    Path((id, index)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let v = store.volume(&id)?;
    let index = parse_index(&index)?;
    let s = v.oct.shape;
    if index >= s.n_bscans {
        return Err(ServiceError::NotFound(format!("B-scan {index} out of range for {id}")));
    }
    let modality = q.get("modality").map(String::as_str).unwrap_or("oct");
    let need_octa = || {
        v.octa
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound(format!("{id} has no OCTA volume")))
    };
    let pixels: Vec<u8> = match modality {
        "oct" => v.oct.bscan(index).iter().map(|&x| to_u8(x)).collect(),
        "octa" => need_octa()?.bscan(index).iter().map(|&x| to_u8(x)).collect(),
        "fused" => {
            let raw = q
                .get("beta")
                .ok_or_else(|| ServiceError::BadRequest("fused modality needs a beta parameter".into()))?;
            let beta: f64 = raw
                .parse()
                .ok()
                .filter(|b: &f64| (0.0..=1.0).contains(b))
                .ok_or_else(|| ServiceError::BadRequest(format!("beta must lie in [0, 1], got {raw:?}")))?;
            let octa = need_octa()?;
            fuse_slices(v.oct.bscan(index), octa.bscan(index), beta)
                .into_iter()
                .map(to_u8)
                .collect()
        }
        other => {
            return Err(ServiceError::BadRequest(format!(
                "unknown modality {other:?}; expected oct, octa or fused"
            )))
        }
    };
    let png = gray_png(s.width, s.depth, &pixels)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_labels(
    State(store): State<Arc<Store>>,
    Path((id, grader, index)): Path<(String, String, String)>,
) -> ApiResult<impl IntoResponse> {
    let index = parse_index(&index)?;
    Ok(Json(store.get_labels(&id, &grader, index)?))
}

#[derive(Deserialize)]
struct PutLabels {
    mask: RleMask,
    expected_version: u64,
}

async fn put_labels(
    State(store): State<Arc<Store>>,
    Path((id, grader, index)): Path<(String, String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let index = parse_index(&index)?;
    let req: PutLabels = parse_json(&body)?;
    Ok(Json(store.put_labels(&id, &grader, index, &req.mask, req.expected_version)?))
}

async fn merge(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.merge(&id)?))
}

async fn merged_summary(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.merged_summary(&id)?))
}

async fn merged_row(
    State(store): State<Arc<Store>>,
    Path((id, index)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.merged_row(&id, parse_index(&index)?)?))
}

async fn prediction(
    State(store): State<Arc<Store>>,
    Path((id, index)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(store.prediction_row(&id, parse_index(&index)?)?))
}

#[derive(Deserialize)]
struct Resolutions {
    resolutions: Vec<Resolution>,
}

async fn resolutions(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: Resolutions = parse_json(&body)?;
    Ok(Json(store.resolve(&id, &req.resolutions)?))
}
