mod common;

use std::io::Read;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use common::{atom, reply, session, CENTER, PEAK};
use demandforge::netgraph::{Approach, Movement};
use demandforge::refine::{get_counts, HttpClient, MockClient};
use demandforge_api::server::{CountsView, FeedbackView, IntersectionView, Status};
use demandforge_api::{router, AppState};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

async fn call(app: &Arc<AppState>, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn get_json(app: &Arc<AppState>, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_json(app: &Arc<AppState>, uri: &str, body: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::POST, uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn all_counts(app: &Arc<AppState>) -> Vec<Bytes> {
    let mut out = Vec::new();
    for t in 0..96 {
        let (s, b) = call(app, Method::GET, &format!("/api/counts?segment={t}"), None).await;
        assert_eq!(s, StatusCode::OK);
        out.push(b);
    }
    out
}

fn assert_pure_view(app: &Arc<AppState>, bodies: &[Bytes]) {
    let snap = app.snapshot();
    for (t, body) in bodies.iter().enumerate() {
        let view: CountsView = serde_json::from_slice(body).unwrap();
        assert_eq!(view.segment, t);
        for l in &view.locations {
            let want = get_counts(&snap.solutions, snap.incidence(), l.location, t).unwrap();
            assert_eq!(l.count, want, "segment {t} location {}", l.location);
        }
    }
}

fn feedback_body(text: &str) -> String {
    format!(r#"{{"segment":{PEAK},"intersection":{CENTER},"text":"{text}"}}"#)
}

#[tokio::test]
async fn counts_equal_module_counts() {
    let s = session();
    let app = s.app(Box::new(MockClient::default()));
    let (status, v) = get_json(&app, "/api/counts?segment=68").await;
    assert_eq!(status, StatusCode::OK);
    let view: CountsView = serde_json::from_value(v).unwrap();
    assert_eq!(view.locations.len(), s.pipeline.network.locations().len());
    for l in &view.locations {
        let want = get_counts(&s.state.solutions, &s.pipeline.incidence, l.location, PEAK).unwrap();
        assert_eq!(l.count, want);
        assert_eq!(l.cv, s.pipeline.bands_cv.get(l.location, PEAK));
        assert!(l.ld.is_none());
    }
    assert!(view.locations.iter().any(|l| l.cv.is_some()));
    assert_pure_view(&app, &all_counts(&app).await);
}

#[tokio::test]
async fn grid_has_nine_intersections() {
    let s = session();
    let app = s.app(Box::new(MockClient::default()));
    let (status, v) = get_json(&app, "/api/intersections").await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<IntersectionView> = serde_json::from_value(v).unwrap();
    assert_eq!(list.len(), 9);
    assert_eq!(list.iter().map(|i| i.id).collect::<Vec<_>>(), (1..=9).collect::<Vec<_>>());
    assert!(list.iter().all(|i| i.approaches == Approach::ALL));
    assert!(list.iter().all(|i| i.locations.len() == 12));
}

#[tokio::test]
async fn bad_requests_are_json_errors() {
    let s = session();
    let app = s.app(Box::new(MockClient::default()));
    for uri in ["/api/counts", "/api/counts?segment=96", "/api/counts?segment=x", "/api/report?source=M"] {
        let (status, v) = get_json(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(v["error"], "bad_request");
        assert!(v["detail"].as_str().is_some_and(|d| !d.is_empty()));
    }
    let (status, v) = get_json(&app, "/api/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].is_string());
    for body in [
        "{".to_string(),
        r#"{"segment":68,"intersection":5}"#.to_string(),
        feedback_body(" "),
    ] {
        let (status, v) = post_json(&app, "/api/feedback", &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(v["error"], "bad_request");
    }
    let (status, v) = post_json(
        &app,
        "/api/feedback",
        r#"{"segment":68,"intersection":99,"text":"more eastbound"}"#,
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_feedback");
}

#[tokio::test]
async fn infeasible_feedback_is_422_and_leaves_state_untouched() {
    let s = session();
    let bad = reply(&[
        atom(CENTER, "EB", "total", "lower", 500.0, "target"),
        atom(CENTER, "EB", "total", "upper", 300.0, "target"),
        atom(CENTER, "EB", "total", "lower", 100.0, "adjacent"),
    ]);
    let app = s.app(Box::new(MockClient::new([bad])));
    let before = all_counts(&app).await;
    let (_, constraints_before) = call(&app, Method::GET, "/api/constraints", None).await;

    let (status, v) = post_json(&app, "/api/feedback", &feedback_body("more eastbound traffic please")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "infeasible");
    assert!(v["detail"].as_str().unwrap().contains("infeasible"));
    assert_eq!(v["verdicts"]["syntactic"], true);
    assert_eq!(v["verdicts"]["feasible"], false);
    assert!(v["verdicts"]["semantic"].is_null());
    assert_eq!(v["tallies"]["infeasible"], 1);

    assert_eq!(all_counts(&app).await, before);
    let (_, constraints_after) = call(&app, Method::GET, "/api/constraints", None).await;
    assert_eq!(constraints_after, constraints_before);
    let (_, st) = get_json(&app, "/api/status").await;
    let st: Status = serde_json::from_value(st).unwrap();
    assert_eq!((st.iteration, st.constraints), (0, 0));
    assert!(st.last_error.is_some_and(|e| e.contains("infeasible")));
}

#[tokio::test]
async fn malformed_and_wrong_direction_replies_are_422() {
    let s = session();
    let eb = s.state.intersection_counts(&s.state.solutions[PEAK], CENTER)[&(Approach::EB, Movement::Total)];
    let cap = (eb / 2) as f64;
    let down = reply(&[
        atom(CENTER, "EB", "total", "upper", cap, "target"),
        atom(CENTER, "EB", "total", "upper", cap * 1.1, "adjacent"),
    ]);
    let app = s.app(Box::new(MockClient::new(["def f(): pass".to_string(), down])));
    let (status, v) = post_json(&app, "/api/feedback", &feedback_body("increase eastbound")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "syntactic");
    assert_eq!(v["verdicts"]["syntactic"], false);

    let (status, v) = post_json(&app, "/api/feedback", &feedback_body("increase eastbound")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "semantic");
    assert_eq!(v["verdicts"]["feasible"], true);
    assert_eq!(v["verdicts"]["semantic"], false);
    assert!(v["after"]["EB"]["total"].as_i64().unwrap() <= cap as i64);
    assert!(app.snapshot().specs.is_empty());
}

#[tokio::test]
async fn accepted_feedback_then_resolve() {
    let s = session();
    let before = s.state.intersection_counts(&s.state.solutions[PEAK], CENTER);
    let eb = before[&(Approach::EB, Movement::Total)];
    let target = (eb + 15) as f64;
    let up = reply(&[
        atom(CENTER, "EB", "total", "lower", target, "target"),
        atom(CENTER, "EB", "total", "lower", (target * 0.9).floor(), "adjacent"),
    ]);
    let app = s.app(Box::new(MockClient::new([up])));
    let (status, v) = post_json(&app, "/api/feedback", &feedback_body("we need more eastbound volume")).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let view: FeedbackView = serde_json::from_value(v).unwrap();
    assert!(view.accepted);
    assert!(view.verdicts.syntactic && view.verdicts.feasible == Some(true) && view.verdicts.semantic == Some(true));
    assert_eq!(view.before["EB"]["total"], eb);
    let after_eb = view.after.as_ref().unwrap()["EB"]["total"];
    assert!(after_eb as f64 >= target);
    assert_eq!(view.iteration, 1);

    let (_, counts) = get_json(&app, &format!("/api/counts?segment={PEAK}")).await;
    let counts: CountsView = serde_json::from_value(counts).unwrap();
    let shown = counts
        .locations
        .iter()
        .find(|l| l.intersection == CENTER && l.approach == Approach::EB && l.movement == Movement::Total)
        .unwrap();
    assert_eq!(shown.count, after_eb);
    assert_eq!(counts.iteration, 1);
    assert_pure_view(&app, &all_counts(&app).await);

    let (status, v) = call(&app, Method::POST, "/api/resolve", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&v).unwrap();
    assert_eq!(v["segments"], 96);
    assert_eq!(v["constraints_hold"], true);
    assert_eq!(v["constraints"], view.spec.as_ref().unwrap().atoms.len());
    assert_pure_view(&app, &all_counts(&app).await);

    let (_, st) = get_json(&app, "/api/status").await;
    let st: Status = serde_json::from_value(st).unwrap();
    assert_eq!((st.done, st.total, st.iteration), (96, 96, 1));
    assert!(st.last_error.is_none());
}

#[tokio::test]
async fn report_endpoint() {
    let s = session();
    let app = s.app(Box::new(MockClient::default()));
    let (status, v) = get_json(&app, "/api/report").await;
    assert_eq!(status, StatusCode::OK);
    let want = serde_json::to_value(
        s.pipeline
            .report(&s.state, demandforge::counts::SourceKind::CV)
            .unwrap(),
    )
    .unwrap();
    assert_eq!(v, want);
    assert!(!v["cells"].as_array().unwrap().is_empty());
    let (status, v) = get_json(&app, "/api/report?source=ld").await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["cells"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn client_timeout_is_504() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            std::thread::spawn(move || {
                let mut stream = stream;
                let mut buf = [0u8; 1024];
                while matches!(stream.read(&mut buf), Ok(n) if n > 0) {}
            });
        }
    });
    let s = session();
    let client = HttpClient::new(format!("http://{addr}/complete"), None, Duration::from_millis(300));
    let app = s.app(Box::new(client));
    let before = all_counts(&app).await;
    let (status, v) = post_json(&app, "/api/feedback", &feedback_body("more eastbound")).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT, "{v}");
    assert_eq!(v["error"], "timeout");
    assert_eq!(all_counts(&app).await, before);
}

#[tokio::test]
async fn writes_are_serialized() {
    let s = session();
    let eb = s.state.intersection_counts(&s.state.solutions[PEAK], CENTER)[&(Approach::EB, Movement::Total)];
    let up = |b: f64| reply(&[atom(CENTER, "EB", "total", "lower", b, "target"), atom(CENTER, "EB", "total", "lower", (b * 0.9).floor(), "adjacent")]);
    let app = s.app(Box::new(MockClient::new([up((eb + 5) as f64), up((eb + 10) as f64)])));
    let a = {
        let app = app.clone();
        tokio::spawn(async move { post_json(&app, "/api/feedback", &feedback_body("more eastbound")).await })
    };
    let b = {
        let app = app.clone();
        tokio::spawn(async move { post_json(&app, "/api/feedback", &feedback_body("more eastbound")).await })
    };
    let (ra, rb) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!(ra.0, StatusCode::OK, "{}", ra.1);
    assert_eq!(rb.0, StatusCode::OK, "{}", rb.1);
    let mut iterations = [ra.1["iteration"].as_u64().unwrap(), rb.1["iteration"].as_u64().unwrap()];
    iterations.sort();
    assert_eq!(iterations, [1, 2]);
    assert_eq!(app.snapshot().specs.len(), 2);
    assert!(app.snapshot().constraints_hold());
}
