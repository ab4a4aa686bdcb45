use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use annotation_service::{
    router, Coordinator, ManualClock, NextTask, ServiceConfig, ServiceError, SharedCoordinator,
};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{DateTime, Utc};
use fusion_core::corpus::{Corpus, Dialogue, Role, Utterance};
use fusion_core::humeval::{
    build_pairs, select_eval_utterances, AggregationMode, Choice, EvalSystems, PairSet,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const BASELINES: [&str; 3] = ["gpt-5", "gemini-2.5", "grok-4"];

fn corpus(tag: &str) -> Corpus {
    let dialogues = (0..2)
        .map(|d| {
            let utterances = (0..6)
                .map(|i| {
                    let role = if i % 2 == 0 {
                        Role::Counselor
                    } else {
                        Role::Client
                    };
                    Utterance::new(role, format!("{tag} says line {d}.{i}")).unwrap()
                })
                .collect();
            Dialogue::new(format!("dlg{d}"), "en", utterances).unwrap()
        })
        .collect();
    Corpus::new("en", dialogues).unwrap()
}

/// 2 dialogues x 2 utterances x 3 baselines = 12 pairs.
fn pair_set() -> PairSet {
    let proposed = corpus("fusion");
    let baselines: Vec<(String, Corpus)> = BASELINES
        .iter()
        .map(|b| (b.to_string(), corpus(b)))
        .collect();
    let systems = EvalSystems {
        proposed: ("proposed", &proposed),
        baselines: &baselines,
    };
    let sel = select_eval_utterances(&systems, 2, 2, 9).unwrap();
    build_pairs(&sel.keys, &systems, 9).unwrap()
}

fn t0() -> DateTime<Utc> {
    DateTime::from_timestamp(1_700_000_000, 0).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    set: PairSet,
    clock: ManualClock,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: tempfile::tempdir().unwrap(),
            set: pair_set(),
            clock: ManualClock::new(t0()),
        }
    }

    fn open(&self, trusted: bool, config: ServiceConfig) -> Result<Coordinator, ServiceError> {
        Coordinator::open(
            self.set.pairs.clone(),
            trusted.then(|| self.set.assignments.clone()),
            &self.dir.path().join("judgments.jsonl"),
            config,
            Arc::new(self.clock.clone()),
        )
    }

    fn shared(&self, trusted: bool, config: ServiceConfig) -> SharedCoordinator {
        Arc::new(Mutex::new(self.open(trusted, config).unwrap()))
    }
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, String) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn task_submit_progress_results_flow() {
    let fx = Fixture::new();
    let app = router(fx.shared(true, ServiceConfig::default()), None);

    let (status, body) = call(&app, get("/api/progress")).await;
    assert_eq!(status, StatusCode::OK);
    let progress: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(
        progress,
        json!({"total_pairs": 12, "fully_judged": 0, "in_flight": 0, "per_annotator": {}})
    );

    let (status, body) = call(&app, get("/api/task?annotator=ann1")).await;
    assert_eq!(status, StatusCode::OK);
    let task: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(task["status"], "task");
    let pair_id = task["pair_id"].as_str().unwrap().to_string();

    let (status, _) = call(
        &app,
        post(
            "/api/judgment",
            json!({"annotator": "ann1", "pair_id": pair_id, "choice": "left", "elapsed_s": 4.2}),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let log = std::fs::read_to_string(fx.dir.path().join("judgments.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let (status, body) = call(
        &app,
        post(
            "/api/judgment?annotator=ann1",
            json!({"pair_id": pair_id, "choice": "right"}),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body.contains("duplicate_judgment"));

    let (_, body) = call(&app, get("/api/progress")).await;
    let progress: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(progress["fully_judged"], 1);
    assert_eq!(progress["per_annotator"]["ann1"], 1);

    let (status, body) = call(&app, get("/api/results")).await;
    assert_eq!(status, StatusCode::OK);
    let results: Value = serde_json::from_str(&body).unwrap();
    let judged: u64 = results["baselines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["win"].as_u64().unwrap() + b["lose"].as_u64().unwrap())
        .sum();
    assert_eq!(judged, 1);

    let (status, body) = call(
        &app,
        post(
            "/api/judgment",
            json!({"annotator": "ann1", "pair_id": "nope", "choice": "left"}),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body.contains("unknown_pair"));

    let (status, _) = call(&app, get("/api/task")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn blind_mode_withholds_results() {
    let fx = Fixture::new();
    let app = router(fx.shared(false, ServiceConfig::default()), None);
    let (status, body) = call(&app, get("/api/results")).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert!(body.contains("results_unavailable_in_blind_mode"));
}

#[tokio::test]
async fn allow_list_rejects_strangers() {
    let fx = Fixture::new();
    let config = ServiceConfig {
        annotators: Some(HashSet::from(["a1".to_string()])),
        ..ServiceConfig::default()
    };
    let app = router(fx.shared(true, config), None);
    let (status, body) = call(&app, get("/api/task?annotator=mallory")).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert!(body.contains("unknown_annotator"));
    let (status, _) = call(&app, get("/api/task?annotator=a1")).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn expired_lease_is_rejected() {
    let fx = Fixture::new();
    let app = router(fx.shared(true, ServiceConfig::default()), None);
    let (_, body) = call(&app, get("/api/task?annotator=slow")).await;
    let task: Value = serde_json::from_str(&body).unwrap();
    fx.clock.advance(Duration::from_secs(601));
    let (status, body) = call(
        &app,
        post(
            "/api/judgment",
            json!({"annotator": "slow", "pair_id": task["pair_id"], "choice": "left"}),
        ),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body.contains("lease_expired"));
}

/// Every annotator-facing payload must be free of system names and source
/// text.
#[tokio::test]
async fn annotator_payloads_are_blinded() {
    let fx = Fixture::new();
    let app = router(fx.shared(true, ServiceConfig::default()), None);
    let forbidden: Vec<&str> = BASELINES
        .iter()
        .copied()
        .chain([
            "proposed",
            "baseline_id",
            "proposed_side",
            "history_system_id",
            "source",
        ])
        .collect();
    let mut payloads = Vec::new();
    for _ in 0..13 {
        let (_, body) = call(&app, get("/api/task?annotator=blind")).await;
        payloads.push(body.clone());
        let task: Value = serde_json::from_str(&body).unwrap();
        if task["status"] != "task" {
            assert_eq!(task["status"], "no_tasks_remaining");
            assert_eq!(task["judged"], 12);
            break;
        }
        // texts carry the system tag; only the tag-free fields may appear
        let keys: HashSet<&str> = task
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(
            keys,
            HashSet::from([
                "status",
                "pair_id",
                "history",
                "left_text",
                "right_text",
                "lease_expires"
            ])
        );
        let (_, ack) = call(
            &app,
            post("/api/judgment", json!({"annotator": "blind", "pair_id": task["pair_id"], "choice": "right", "elapsed_s": 1.0})),
        )
        .await;
        payloads.push(ack);
    }
    let (_, progress) = call(&app, get("/api/progress")).await;
    payloads.push(progress);
    for payload in &payloads {
        let v: Value = serde_json::from_str(payload).unwrap();
        let mut stripped = v.clone();
        // candidate texts legitimately contain the fixture's system tags
        if let Some(obj) = stripped.as_object_mut() {
            obj.remove("left_text");
            obj.remove("right_text");
            obj.remove("history");
        }
        let text = stripped.to_string();
        for word in &forbidden {
            assert!(!text.contains(word), "{word} leaked in {payload}");
        }
    }
}

#[test]
fn concurrent_annotators_get_distinct_pairs_unless_replicated() {
    let fx = Fixture::new();
    for replicas in [1usize, 2] {
        let dir = tempfile::tempdir().unwrap();
        let coordinator = Arc::new(Mutex::new(
            Coordinator::open(
                fx.set.pairs.clone(),
                None,
                &dir.path().join("log.jsonl"),
                ServiceConfig {
                    required_replicas: replicas,
                    ..ServiceConfig::default()
                },
                Arc::new(fx.clock.clone()),
            )
            .unwrap(),
        ));
        let handles: Vec<_> = (0..8)
            .map(|a| {
                let c = coordinator.clone();
                std::thread::spawn(move || {
                    let id = format!("ann{a}");
                    let mut judged = Vec::new();
                    loop {
                        let next = c.lock().unwrap().next_task(&id).unwrap();
                        match next {
                            NextTask::Task { task, .. } => {
                                c.lock()
                                    .unwrap()
                                    .submit(&id, &task.pair_id, Choice::Left, 1.0)
                                    .unwrap();
                                judged.push(task.pair_id);
                            }
                            NextTask::NoTasksRemaining { .. } => break judged,
                        }
                    }
                })
            })
            .collect();
        let all: Vec<String> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        assert_eq!(all.len(), 12 * replicas);
        let mut counts = std::collections::HashMap::new();
        for p in &all {
            *counts.entry(p.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&n| n == replicas));
        let progress = coordinator.lock().unwrap().progress();
        assert_eq!(progress.fully_judged, 12);
        assert_eq!(progress.in_flight, 0);
    }
}

#[test]
fn leases_are_not_double_booked() {
    let fx = Fixture::new();
    let mut c = fx.open(true, ServiceConfig::default()).unwrap();
    let a = c.next_task("a").unwrap();
    let b = c.next_task("b").unwrap();
    let (NextTask::Task { task: ta, .. }, NextTask::Task { task: tb, .. }) = (&a, &b) else {
        panic!("expected tasks");
    };
    assert_ne!(ta.pair_id, tb.pair_id);
    // asking again returns the held lease, not a second one
    let again = c.next_task("a").unwrap();
    let NextTask::Task { task: ta2, .. } = again else {
        panic!()
    };
    assert_eq!(ta2.pair_id, ta.pair_id);
    assert_eq!(c.progress().in_flight, 2);
}

#[test]
fn restart_keeps_every_acknowledged_judgment() {
    let fx = Fixture::new();
    let mut acked = Vec::new();
    {
        let mut c = fx.open(true, ServiceConfig::default()).unwrap();
        for _ in 0..5 {
            let NextTask::Task { task, .. } = c.next_task("r").unwrap() else {
                panic!()
            };
            c.submit("r", &task.pair_id, Choice::Right, 2.0).unwrap();
            acked.push(task.pair_id);
        }
        // killed here: the coordinator is dropped without any shutdown step
    }
    // a crash mid-append leaves a torn record behind
    let log = fx.dir.path().join("judgments.jsonl");
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    std::io::Write::write_all(&mut f, b"{\"pair_id\":\"p0").unwrap();
    drop(f);

    let mut c = fx.open(true, ServiceConfig::default()).unwrap();
    let replayed: Vec<&str> = c.judgments().iter().map(|j| j.pair_id.as_str()).collect();
    assert_eq!(
        replayed,
        acked.iter().map(String::as_str).collect::<Vec<_>>()
    );
    assert_eq!(c.progress().fully_judged, 5);
    assert!(matches!(
        c.submit("r", &acked[0], Choice::Left, 1.0),
        Err(ServiceError::DuplicateJudgment { .. })
    ));
    let report = c.results(AggregationMode::Pooled).unwrap();
    assert_eq!(
        report
            .baselines
            .iter()
            .map(|b| b.win + b.lose)
            .sum::<usize>(),
        5
    );
    // the log is appendable again after the repair
    let NextTask::Task { task, .. } = c.next_task("r").unwrap() else {
        panic!()
    };
    c.submit("r", &task.pair_id, Choice::Left, 1.0).unwrap();
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 6);
}

#[test]
fn undecided_needs_opt_in() {
    let fx = Fixture::new();
    let mut c = fx.open(true, ServiceConfig::default()).unwrap();
    let NextTask::Task { task, .. } = c.next_task("u").unwrap() else {
        panic!()
    };
    assert!(matches!(
        c.submit("u", &task.pair_id, Choice::Undecided, 1.0),
        Err(ServiceError::UndecidedNotAllowed)
    ));
}

#[tokio::test]
async fn static_files_are_served() {
    let fx = Fixture::new();
    let web = fx.dir.path().join("web");
    std::fs::create_dir_all(&web).unwrap();
    std::fs::write(web.join("index.html"), "<html>annotate</html>").unwrap();
    let app = router(fx.shared(false, ServiceConfig::default()), Some(&web));
    let (status, body) = call(&app, get("/index.html")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.contains("annotate"));
    let (status, _) = call(&app, get("/api/progress")).await;
    assert_eq!(status, StatusCode::OK);
}
