use accrual_core::expfam::NIGParams;
use accrual_core::io::model_to_string;
use accrual_core::model::{ConditionMeta, FitMeta, FittedModel, Hyperparameters, SexSpecific};
use accrual_core::wire::{forecast, ErrorBody, ForecastResponse, ModelSummary, PatientQuery};
use accrual_service::{app, AppState, LoadedModel};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use ndarray::array;
use std::path::Path;
use tower::ServiceExt;

fn toy_model() -> FittedModel {
    let mut conditions: Vec<ConditionMeta> = ["A", "B", "P"].iter().map(|c| ConditionMeta::plain(*c)).collect();
    conditions[2].sex_specific = Some(SexSpecific::MaleOnly);
    let nig = |u: f64| NIGParams { u, v: 40.0, alpha: 30.0, beta: 30.0 * 64.0 };
    let meta = FitMeta {
        iterations: 12,
        final_delta: 1e-5,
        converged: true,
        seed: 3,
        epsilon: 1e-4,
        hyperparameters: Hyperparameters::weakly_informative(3, 2),
    };
    FittedModel::from_posterior(
        conditions,
        vec![30.0, 70.0],
        array![[8.0, 1.0], [2.0, 6.0], [3.0, 3.0]],
        array![[2.0, 9.0], [8.0, 4.0], [5.0, 5.0]],
        array![[nig(45.0), nig(60.0)], [nig(70.0), nig(55.0)], [nig(65.0), nig(65.0)]],
        meta,
    )
    .unwrap()
}

fn loaded() -> LoadedModel {
    let text = model_to_string(&toy_model()).unwrap();
    LoadedModel::from_bytes(text.as_bytes(), Path::new("toy.json")).unwrap()
}

async fn call(state: AppState, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post(body: &str) -> Request<Body> {
    Request::post("/v1/forecast").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn healthz_reports_version_and_hash() {
    let l = loaded();
    let sha = l.sha256.clone();
    let (status, body) = call(AppState::with_model(l), get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["version"], accrual_service::VERSION);
    assert_eq!(v["model_sha256"], sha.as_str());
    assert_eq!(sha.len(), 64);
}

#[tokio::test]
async fn summary_equals_model_fields() {
    let l = loaded();
    let model = l.model.clone();
    let (status, body) = call(AppState::with_model(l), get("/v1/model/summary")).await;
    assert_eq!(status, StatusCode::OK);
    let s: ModelSummary = serde_json::from_slice(&body).unwrap();
    assert_eq!(s.k, 2);
    assert_eq!(s.theta_bar, model.theta_bar);
    for m in 0..3 {
        for k in 0..2 {
            assert_eq!(s.pi_bar[m][k], model.pi_bar[[m, k]]);
            let (mean, sd) = model.onset_summary(m, k);
            assert_eq!(s.onset_mean[m][k], mean);
            assert_eq!(s.onset_sd[m][k], Some(sd));
        }
    }
    assert_eq!(s.conditions, model.conditions);
    let raw: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(raw.get("K").is_some() && raw.get("schema_version").is_some());
}

#[tokio::test]
async fn no_model_is_503_with_error_body() {
    for req in [get("/v1/model/summary"), post(r#"{"baseline_age": 1, "current_age": 2}"#)] {
        let (status, body) = call(AppState::default(), req).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        let e: ErrorBody = serde_json::from_slice(&body).unwrap();
        assert_eq!(e.error, "no_model");
    }
    let (status, _) = call(AppState::default(), get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn forecast_matches_direct_call_and_is_repeatable() {
    let l = loaded();
    let q = r#"{"sex": "male", "baseline_age": 40, "current_age": 60,
                "observed": [{"code": "A", "age": 54}], "horizon": 10, "grid_step": 0.5}"#;
    let query: PatientQuery = serde_json::from_str(q).unwrap();
    let direct = forecast(&l.model, &l.sha256, &query).unwrap();
    let state = AppState::with_model(l);
    let (status, body) = call(state.clone(), post(q)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let (_, again) = call(state, post(q)).await;
    assert_eq!(body, again);
    let resp: ForecastResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp, direct);
    for c in &resp.conditions {
        assert!(c.prob_within.is_some());
        assert_eq!(c.curve.age.len(), c.curve.risk.len());
        assert!(c.curve.risk.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[tokio::test]
async fn empty_history_near_birth_gives_prior_weights() {
    let l = loaded();
    let theta = l.model.theta_bar.clone();
    let (status, body) = call(AppState::with_model(l), post(r#"{"baseline_age": 0, "current_age": 0}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: ForecastResponse = serde_json::from_slice(&body).unwrap();
    for (p, t) in resp.cluster_probs.iter().zip(&theta) {
        assert!((p - t).abs() < 1e-6, "{p} vs {t}");
    }
}

#[tokio::test]
async fn malformed_age_names_the_field() {
    let (status, body) =
        call(AppState::with_model(loaded()), post(r#"{"baseline_age": 40, "current_age": "sixty"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.fields[0].field, "current_age");

    let (status, body) = call(
        AppState::with_model(loaded()),
        post(r#"{"baseline_age": 40, "current_age": 60, "observed": [{"code": "A", "age": "x"}]}"#),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.fields[0].field, "observed[0].age");

    let (status, _) = call(AppState::with_model(loaded()), post("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn invariant_violations_are_400_with_fields() {
    let (status, body) = call(
        AppState::with_model(loaded()),
        post(r#"{"baseline_age": 40, "current_age": 60, "observed": [{"code": "A", "age": 65}]}"#),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error, "invalid_query");
    assert_eq!(e.fields[0].field, "observed[0].age");
    assert!(e.fields[0].message.contains("after current age"));

    let (status, body) = call(
        AppState::with_model(loaded()),
        post(r#"{"sex": "female", "baseline_age": 40, "current_age": 60, "unreliable": ["P"]}"#),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.fields[0].field, "unreliable[0]");
}

#[tokio::test]
async fn unknown_code_is_422() {
    let (status, body) = call(
        AppState::with_model(loaded()),
        post(r#"{"baseline_age": 40, "current_age": 60, "unreliable": ["ZZZ"]}"#),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.unknown_codes, vec!["ZZZ".to_string()]);
}

#[tokio::test]
async fn unknown_route_is_404_json() {
    let (status, body) = call(AppState::with_model(loaded()), get("/v2/nothing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(serde_json::from_slice::<ErrorBody>(&body).is_ok());
}

#[tokio::test]
async fn large_summary_stays_small() {
    let (m, k) = (80, 50);
    let conditions = (0..m).map(|i| ConditionMeta::plain(format!("C{i:02}"))).collect();
    let nig = ndarray::Array2::from_shape_fn((m, k), |(i, j)| NIGParams {
        u: 40.0 + i as f64 / 3.0 + j as f64 / 7.0,
        v: 123.456789,
        alpha: 61.7283945,
        beta: 5432.10987654,
    });
    let a = ndarray::Array2::from_shape_fn((m, k), |(i, j)| 1.0 + (i * k + j) as f64 / 17.0);
    let model = FittedModel::from_posterior(
        conditions,
        (0..k).map(|j| 10.0 + j as f64 / 3.0).collect(),
        a.clone(),
        a.mapv(|x| 300.0 / x),
        nig,
        FitMeta {
            iterations: 1,
            final_delta: 0.0,
            converged: true,
            seed: 0,
            epsilon: 0.0,
            hyperparameters: Hyperparameters::weakly_informative(m, k),
        },
    )
    .unwrap();
    let text = model_to_string(&model).unwrap();
    let l = LoadedModel::from_bytes(text.as_bytes(), Path::new("big.json")).unwrap();
    let (status, body) = call(AppState::with_model(l), get("/v1/model/summary")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.len() < 1_000_000, "{} bytes", body.len());
}
