use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use cotloop_core::domain::{AnswerFormat, AnswerValue};
use cotloop_core::sampling::{
    complete_with_retry, sample_rationales, Backend, BackendError, BackendRequest, BackendResponse, HttpBackend,
    HttpBackendConfig, ReplayBackend, ReplayRecord, RetryPolicy, SamplingConfig, SamplingError, Stage, Usage,
};

/// Replies to each index from a per-index script, then echoes the index.
struct Scripted {
    scripts: Mutex<Vec<VecDeque<Result<BackendResponse, BackendError>>>>,
    calls: AtomicUsize,
    delay_first: bool,
}

impl Scripted {
    fn new(scripts: Vec<Vec<Result<BackendResponse, BackendError>>>) -> Self {
        Self {
            scripts: Mutex::new(scripts.into_iter().map(VecDeque::from).collect()),
            calls: AtomicUsize::new(0),
            delay_first: false,
        }
    }
}

fn reply(text: &str) -> BackendResponse {
    BackendResponse {
        text: text.into(),
        token_logprobs: Some(vec![-0.1, -0.2]),
        usage: Usage { prompt_tokens: 3, completion_tokens: 2 },
    }
}

#[async_trait]
impl Backend for Scripted {
    async fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.delay_first && req.index == 0 {
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        let next = self.scripts.lock().unwrap().get_mut(req.index).and_then(|q| q.pop_front());
        next.unwrap_or_else(|| Ok(reply(&format!("Step {}. The answer is {}.", req.index, req.index))))
    }
}

fn config(n: usize) -> SamplingConfig {
    SamplingConfig { n, retry: RetryPolicy::immediate(3), ..SamplingConfig::default() }
}

fn answers(rs: &[cotloop_core::domain::Rationale]) -> Vec<Option<AnswerValue>> {
    rs.iter().map(|r| r.answer.clone()).collect()
}

#[tokio::test]
async fn results_keep_request_order_under_concurrency() {
    let mut backend = Scripted::new(vec![]);
    backend.delay_first = true;
    let rs = sample_rationales(&backend, "s", "Q: x\nA:", &config(6), &AnswerFormat::default()).await.unwrap();
    assert_eq!(rs.iter().map(|r| r.index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert_eq!(answers(&rs), (0..6).map(|i| AnswerValue::numeric(&i.to_string())).collect::<Vec<_>>());
    assert_eq!(rs[0].sublogics, vec!["Step 0.", "The answer is 0."]);
    assert!(rs[0].unnormalized_prob.is_some());
}

#[tokio::test]
async fn greedy_issues_one_request() {
    let backend = Scripted::new(vec![]);
    let cfg = SamplingConfig { greedy: true, ..config(5) };
    let rs = sample_rationales(&backend, "s", "p", &cfg, &AnswerFormat::default()).await.unwrap();
    assert_eq!(rs.len(), 1);
    assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn transient_failures_are_retried_within_budget() {
    let flaky = vec![
        Err(BackendError::Transient("503".into())),
        Err(BackendError::RateLimited { retry_after: None }),
        Ok(reply("The answer is 26.")),
    ];
    let backend = Scripted::new(vec![flaky]);
    let rs = sample_rationales(&backend, "s", "p", &config(1), &AnswerFormat::default()).await.unwrap();
    assert_eq!(rs[0].answer, AnswerValue::numeric("26"));
    assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn exhausted_budget_and_fatal_errors_surface() {
    let failing = (0..3).map(|_| Err(BackendError::Transient("down".into()))).collect();
    let backend = Scripted::new(vec![failing]);
    let err = sample_rationales(&backend, "s", "p", &config(1), &AnswerFormat::default()).await.unwrap_err();
    assert!(matches!(err, SamplingError::BackendExhausted { attempts: 3, .. }), "{err:?}");

    let backend = Scripted::new(vec![vec![Err(BackendError::Fatal("bad key".into()))]]);
    let err = sample_rationales(&backend, "s", "p", &config(1), &AnswerFormat::default()).await.unwrap_err();
    assert!(matches!(err, SamplingError::Backend { .. }));
    assert_eq!(backend.calls.load(Ordering::SeqCst), 1);

    let empty = BackendResponse { text: String::new(), token_logprobs: None, usage: Usage::default() };
    let backend = Scripted::new(vec![vec![Ok(empty.clone()), Ok(empty.clone()), Ok(empty)]]);
    assert!(sample_rationales(&backend, "s", "p", &config(1), &AnswerFormat::default()).await.is_err());
}

#[tokio::test]
async fn invalid_config_is_rejected() {
    let backend = Scripted::new(vec![]);
    let cfg = SamplingConfig { max_in_flight: 0, ..config(2) };
    let err = sample_rationales(&backend, "s", "p", &cfg, &AnswerFormat::default()).await.unwrap_err();
    assert!(matches!(err, SamplingError::InvalidConfig(_)));
}

#[tokio::test]
async fn replay_backend_serves_fixture_by_stage() {
    let backend = ReplayBackend::from_records([
        ReplayRecord {
            sample_id: "s".into(),
            index: 0,
            completion: "The answer is 25.".into(),
            token_logprobs: None,
            stage: Stage::Sample,
        },
        ReplayRecord {
            sample_id: "s".into(),
            index: 0,
            completion: "The answer is 26.".into(),
            token_logprobs: None,
            stage: Stage::Answer,
        },
    ]);
    let cfg = config(1);
    let sample = complete_with_retry(&backend, &cfg.request("s", 0, "p"), &cfg.retry).await.unwrap();
    let answer = complete_with_retry(&backend, &cfg.answer_request("s", 0, "p"), &cfg.retry).await.unwrap();
    assert_eq!((sample.text.as_str(), answer.text.as_str()), ("The answer is 25.", "The answer is 26."));
    let missing = complete_with_retry(&backend, &cfg.request("s", 1, "p"), &cfg.retry).await;
    assert!(matches!(missing, Err(SamplingError::Backend { .. })));
    assert_eq!(backend.calls(), 3);
}

#[derive(Default)]
struct Mock {
    bodies: Mutex<Vec<serde_json::Value>>,
    headers: Mutex<Vec<Option<String>>>,
    throttle: AtomicUsize,
}

async fn completions(
    State(mock): State<Arc<Mock>>,
    headers: HeaderMap,
    Json(body): Json<serde_json::Value>,
) -> axum::response::Response {
    mock.bodies.lock().unwrap().push(body);
    mock.headers.lock().unwrap().push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
    if mock.throttle.load(Ordering::SeqCst) > 0 {
        mock.throttle.fetch_sub(1, Ordering::SeqCst);
        return (StatusCode::TOO_MANY_REQUESTS, [("retry-after", "0")], "slow down").into_response();
    }
    Json(serde_json::json!({
        "choices": [{"text": " 16 - 3 = 13. 13 * 2 = 26. The answer is 26.", "logprobs": {"token_logprobs": [null, -0.5, -0.25]}}],
        "usage": {"prompt_tokens": 40, "completion_tokens": 12}
    }))
    .into_response()
}

async fn serve(mock: Arc<Mock>) -> String {
    let app = Router::new().route("/v1/completions", post(completions)).with_state(mock);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

#[tokio::test]
async fn http_backend_wire_format_and_rate_limit_retry() {
    let mock = Arc::new(Mock::default());
    mock.throttle.store(1, Ordering::SeqCst);
    let base = serve(mock.clone()).await;
    let backend = HttpBackend::new(HttpBackendConfig {
        base_url: base,
        api_key: Some("sk-test".into()),
        model: Some("text-davinci-002".into()),
        timeout: Duration::from_secs(5),
    })
    .unwrap();
    let cfg = SamplingConfig { top_k: Some(40), ..config(1) };
    let rs = sample_rationales(&backend, "s", "Q: x\nA:", &cfg, &AnswerFormat::default()).await.unwrap();
    assert_eq!(rs[0].answer, AnswerValue::numeric("26"));
    assert_eq!(rs[0].token_logprobs, Some(vec![-0.5, -0.25]));

    let bodies = mock.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 2, "429 must be retried once");
    let body = &bodies[1];
    assert_eq!(body["model"], "text-davinci-002");
    assert_eq!(body["prompt"], "Q: x\nA:");
    assert_eq!(body["temperature"], 0.7);
    assert_eq!(body["n"], 1);
    assert_eq!(body["logprobs"], 1);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["stop"], serde_json::json!(["\nQ:"]));
    assert_eq!(body["top_k"], 40);
    assert_eq!(mock.headers.lock().unwrap()[1].as_deref(), Some("Bearer sk-test"));
}

#[tokio::test]
async fn http_backend_classifies_statuses() {
    let app = Router::new()
        .route("/bad/completions", post(|| async { (StatusCode::UNAUTHORIZED, "no") }))
        .route("/down/completions", post(|| async { StatusCode::BAD_GATEWAY }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let call = |path: &str| {
        let backend = HttpBackend::new(HttpBackendConfig {
            base_url: format!("http://{addr}/{path}"),
            api_key: None,
            model: None,
            timeout: Duration::from_secs(5),
        })
        .unwrap();
        async move { backend.complete(&config(1).request("s", 0, "p")).await }
    };
    assert!(matches!(call("bad").await, Err(BackendError::Fatal(_))));
    assert!(matches!(call("down").await, Err(BackendError::Transient(_))));
}
