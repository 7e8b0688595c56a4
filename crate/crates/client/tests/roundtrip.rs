use complai_client::Client;
use complai_core::api::SliceRequest;
use complai_core::synth::write_loan_demo;
use complai_core::tabular::{Predicate, SliceOp, SliceQuery};
use complai_service::{serve, AppState};
use tempfile::TempDir;
use tokio::net::TcpListener;

async fn spawn(state: AppState) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    format!("http://{addr}")
}

#[tokio::test]
async fn client_against_live_service() {
    let dir = TempDir::new().unwrap();
    let mut cfg = write_loan_demo(dir.path(), 8).unwrap().config;
    cfg.oot = None;
    let state = AppState::new();
    let base = spawn(state.clone()).await;
    let client = Client::new(&base).unwrap();

    assert!(!client.health().await.unwrap().ready);
    assert_eq!(client.report().await.unwrap_err().code(), Some("NotReady"));

    state.load_in_background(cfg, None).await.unwrap().unwrap();
    assert!(client.health().await.unwrap().ready);

    let report = client.report().await.unwrap();
    let meta = client.meta().await.unwrap();
    assert_eq!(meta.rows, report.rows);
    assert_eq!(meta.protected, vec!["gender", "married"]);
    assert_eq!(client.schema().await.unwrap().features.len(), 6);
    assert!(client.drift().await.unwrap().is_none());
    assert_eq!(client.fairness().await.unwrap(), report.fairness);

    let all = client.slice(&SliceRequest::default()).await.unwrap();
    assert_eq!(all.performance, report.performance);
    let empty = SliceRequest {
        query: SliceQuery {
            predicates: vec![Predicate::new("applicant_income", SliceOp::Lt, -1.0)],
        },
        metric_weights: None,
    };
    let err = client.slice(&empty).await.unwrap_err();
    assert_eq!(err.code(), Some("EmptySlice"));

    let bad = serde_json::json!({"gender": "Other"});
    assert_eq!(
        client.whatif(&bad).await.unwrap_err().code(),
        Some("SchemaViolation")
    );
    let digest = &report.counterfactuals[0];
    let schema = client.schema().await.unwrap();
    let loaded = state.get().unwrap();
    let row = &loaded.session.validation.rows[digest.row];
    let obj: serde_json::Map<String, serde_json::Value> = schema
        .features
        .iter()
        .zip(&row.0)
        .map(|(f, v)| (f.name.clone(), serde_json::to_value(v).unwrap()))
        .collect();
    let r = client
        .whatif(&serde_json::Value::Object(obj))
        .await
        .unwrap();
    assert_eq!(r.prediction.label, digest.prediction);
    let changed: Vec<&str> = r.diff.iter().map(|c| c.feature.as_str()).collect();
    let expected: Vec<&str> = digest.changes.iter().map(|c| c.feature.as_str()).collect();
    assert_eq!(changed, expected);
}

#[test]
fn rejects_non_http_base() {
    assert!(Client::new("localhost:8501").is_err());
    assert_eq!(Client::new("http://x:1/").unwrap().base(), "http://x:1");
}
