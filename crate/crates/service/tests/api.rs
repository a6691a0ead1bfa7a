use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use igr_core::simgen::{gen_students, GenderMode};
use igr_core::RngSpec;
use igr_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &Path) -> Router {
    router(
        AppState::open(ServiceConfig {
            workdir: dir.to_path_buf(),
            static_dir: None,
        })
        .unwrap(),
    )
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let b = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = b
        .body(body.map_or(Body::empty(), |v| Body::from(v.to_string())))
        .unwrap();
    send(app, req).await
}

async fn upload(app: &Router, uri: &str, fields: &[(&str, &str)]) -> (StatusCode, Value) {
    let boundary = "XBOUNDARYX";
    let mut body = String::new();
    for (name, content) in fields {
        body.push_str(&format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.csv\"\r\nContent-Type: text/csv\r\n\r\n{content}\r\n"
        ));
    }
    body.push_str(&format!("--{boundary}--\r\n"));
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header(
            "content-type",
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(body))
        .unwrap();
    send(app, req).await
}

/// Run a job endpoint and wait for its result.
async fn job(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, v) = call(app, "POST", uri, Some(body)).await;
    if s != StatusCode::ACCEPTED {
        return (s, v);
    }
    let poll = v["poll"].as_str().unwrap().to_string();
    loop {
        let (_, j) = call(app, "GET", &poll, None).await;
        match j["status"].as_str().unwrap() {
            "running" => tokio::time::sleep(std::time::Duration::from_millis(5)).await,
            "done" => return (StatusCode::OK, j["result"].clone()),
            _ => {
                return (
                    StatusCode::from_u16(j["error"]["status"].as_u64().unwrap() as u16).unwrap(),
                    j["error"]["body"].clone(),
                )
            }
        }
    }
}

fn covariate_csv(n: usize) -> String {
    let s = gen_students(n, GenderMode::FixedHalf, RngSpec::new(4)).unwrap();
    let mut buf = Vec::new();
    s.covariates.write_csv(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn example(schema: &Value, path: &str) -> Value {
    schema["endpoints"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["path"] == path)
        .unwrap()["body"]["example"]
        .clone()
}

/// A session with covariates, a 1000-member pool and one restriction.
async fn prepared(app: &Router) -> (String, Value) {
    let (_, schema) = call(app, "GET", "/api/schema", None).await;
    let (s, v) = call(app, "POST", "/api/sessions", None).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    let base = format!("/api/sessions/{id}");
    let (s, v) = upload(
        app,
        &format!("{base}/covariates"),
        &[
            ("file", &covariate_csv(40)),
            ("sidecar", r#"{"salient":"gender"}"#),
        ],
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["n_units"], 40);
    let (s, v) = job(
        app,
        &format!("{base}/enumerate"),
        example(&schema, "/api/sessions/{id}/enumerate"),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["pool_size"].as_u64().unwrap() > 990);
    (id, schema)
}

#[tokio::test]
async fn happy_path_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, schema) = prepared(&app).await;
    let base = format!("/api/sessions/{id}");
    let (s, v) = job(
        &app,
        &format!("{base}/score"),
        example(&schema, "/api/sessions/{id}/score"),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["metrics"][0]["cache_hit"], false);
    let n = v["metrics"][0]["scores"].as_array().unwrap().len();

    let body = json!({ "fitness": { "metrics": [{ "metric": "max_mahalanobis" }], "aggregator": "identity", "normalization": "none" }, "rule": { "kind": "top_m", "m_accept": 50 } });
    let (s, v) = call(&app, "POST", &format!("{base}/restrict"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["accepted"], 50);
    assert_eq!(v["accept_mask"].as_array().unwrap().len(), n);
    assert_eq!(v["cache_hit"], true);
    let r = &v["report"];
    assert_eq!(
        r["scores"]["histogram"]["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum::<u64>() as usize,
        n
    );
    assert!(r["correlation"]["histogram"]["counts"].is_array());
    assert_eq!(r["acceptance"]["accepted"], 50);

    let (s, summary) = call(&app, "GET", &base, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(summary["design"]["accepted"], 50);
    assert_eq!(summary["locked"], false);
}

#[tokio::test]
async fn weight_changes_reuse_metric_scores() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, schema) = prepared(&app).await;
    let uri = format!("/api/sessions/{id}/restrict");
    let mut body = example(&schema, "/api/sessions/{id}/restrict");
    let (_, first) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(first["cache_hit"], false);
    assert_eq!(first["cache"]["metric_misses"].as_array().unwrap().len(), 2);
    body["fitness"]["metrics"][0]["weight"] = json!(0.8);
    body["fitness"]["metrics"][1]["weight"] = json!(0.2);
    let (s, second) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(second["cache_hit"], true);
    assert_eq!(second["cache"]["fitness_hit"], false);
    assert!(second["cache"]["metric_misses"]
        .as_array()
        .unwrap()
        .is_empty());
    let (_, third) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(third["cache"]["fitness_hit"], true);
    assert_eq!(third["accept_mask"], second["accept_mask"]);
    let (_, s) = job(
        &app,
        &format!("/api/sessions/{id}/score"),
        json!({ "metrics": [{ "metric": "sum_max_abs_smd" }], "include_scores": false }),
    )
    .await;
    assert_eq!(s["metrics"][0]["cache_hit"], true);
    assert!(s["metrics"][0].get("scores").is_none());
}

#[tokio::test]
async fn lock_contract_and_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, schema) = prepared(&app).await;
    let base = format!("/api/sessions/{id}");
    let mut body = example(&schema, "/api/sessions/{id}/restrict");
    body["mirror_group"] = json!("cyclic");
    body["orbits"] = json!(true);
    let (s, v) = call(
        &app,
        "POST",
        &format!("{base}/restrict"),
        Some(body.clone()),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");

    // outcomes are refused before the design is locked
    let y: String = std::iter::once("y".to_string())
        .chain((0..40).map(|i| format!("{}", i % 7)))
        .collect::<Vec<_>>()
        .join("\n");
    let (s, _) = upload(&app, &format!("{base}/outcomes"), &[("file", &y)]).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, v) = call(
        &app,
        "POST",
        &format!("{base}/lock"),
        Some(json!({ "mode": "code_reference" })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let digest = v["digest"].as_str().unwrap().to_string();
    assert_eq!(v["manifest"]["digest"], digest);

    body["fitness"]["metrics"][0]["weight"] = json!(0.9);
    let (s, v) = call(&app, "POST", &format!("{base}/restrict"), Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "conflict");
    let (s, _) = call(
        &app,
        "POST",
        &format!("{base}/enumerate"),
        Some(example(&schema, "/api/sessions/{id}/enumerate")),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = upload(
        &app,
        &format!("{base}/covariates"),
        &[("file", &covariate_csv(40))],
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", &format!("{base}/lock"), Some(json!({}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "DELETE", &base, None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, draw) = call(
        &app,
        "POST",
        &format!("{base}/randomize"),
        Some(json!({ "seed": 3 })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{draw}");
    assert_eq!(draw["sequence"], 0);
    let (s, _) = upload(&app, &format!("{base}/outcomes"), &[("file", &y)]).await;
    assert_eq!(s, StatusCode::OK);
    let (s, t) = call(&app, "POST", &format!("{base}/test"), Some(json!({}))).await;
    assert_eq!(s, StatusCode::OK, "{t}");
    assert_eq!(t["pool_index"], draw["pool_index"]);
    let p = t["p_value"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert_eq!(t["null_stats"].as_array().unwrap().len(), 50);

    let (s, _) = call(&app, "GET", &format!("{base}/bundle/audit.jsonl"), None).await;
    assert_eq!(s, StatusCode::OK);
    let audit = std::fs::read_to_string(
        dir.path()
            .join("sessions")
            .join(&id)
            .join("bundle/audit.jsonl"),
    )
    .unwrap();
    assert_eq!(audit.lines().count(), 1);
    let report = igr_core::bundle::verify_bundle(
        &dir.path().join("sessions").join(&id).join("bundle"),
        true,
    )
    .unwrap();
    assert!(report.ok(), "{report:?}");
}

#[tokio::test]
async fn validation_errors_name_fields() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, schema) = prepared(&app).await;
    let uri = format!("/api/sessions/{id}/restrict");
    let mut body = example(&schema, "/api/sessions/{id}/restrict");
    body["rule"]["m_accept"] = json!("fifty");
    let (s, v) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "rule.m_accept");

    body["rule"]["m_accept"] = json!(50);
    body["colour"] = json!("red");
    let (s, v) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"].as_str().unwrap().contains("colour"));

    body.as_object_mut().unwrap().remove("colour");
    body["fitness"]["metrics"] = json!([]);
    let (s, v) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "fitness");

    body = example(&schema, "/api/sessions/{id}/restrict");
    body["rule"]["m_accept"] = json!(100_000);
    let (s, v) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "rule.m_accept");

    let (s, v) = call(
        &app,
        "POST",
        &format!("/api/sessions/{id}/enumerate"),
        Some(json!({ "mechanism": { "kind": "complete" }, "pool_size": 0, "seed": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "pool_size");

    let (s, v) = call(&app, "POST", &format!("/api/sessions/{id}/evolve"), Some(json!({ "fitness": example(&schema, "/api/sessions/{id}/evolve")["fitness"], "ga": { "crossover_rate": 2.0 }, "seed": 1 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "ga");

    let (s, v) = upload(
        &app,
        &format!("/api/sessions/{id}/clusters"),
        &[("file", "cluster\n0\n1\n"), ("extra", "x")],
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "extra");

    let (s, _) = call(&app, "GET", "/api/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn evolve_job_replaces_pool() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (id, schema) = prepared(&app).await;
    let (s, v) = job(
        &app,
        &format!("/api/sessions/{id}/evolve"),
        example(&schema, "/api/sessions/{id}/evolve"),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["trace"].as_array().unwrap().len(), 6);
    assert_eq!(v["pool_version"], 3);
    let (_, summary) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(summary["pool_size"], v["pool_size"]);
    assert_eq!(summary["design"], Value::Null);
}

#[tokio::test]
async fn event_log_replays_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app1 = app(dir.path());
    let (id, schema) = prepared(&app1).await;
    let base = format!("/api/sessions/{id}");
    let (_, restricted) = call(
        &app1,
        "POST",
        &format!("{base}/restrict"),
        Some(example(&schema, "/api/sessions/{id}/restrict")),
    )
    .await;
    // a rejected request is not an event
    let (s, _) = call(
        &app1,
        "POST",
        &format!("{base}/randomize"),
        Some(json!({ "seed": 1 })),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    call(&app1, "POST", &format!("{base}/lock"), Some(json!({}))).await;
    let (_, draw) = call(
        &app1,
        "POST",
        &format!("{base}/randomize"),
        Some(json!({ "seed": 9, "stream": 2 })),
    )
    .await;

    let (_, log) = call(&app1, "GET", &format!("{base}/events"), None).await;
    let names: Vec<&str> = log["events"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["event"]["event"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["covariates", "enumerate", "restrict", "lock", "randomize"]
    );
    let (s, rep) = call(&app1, "POST", &format!("{base}/replay"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(rep["consistent"], true);
    assert_eq!(rep["events"], 5);
    let (_, before) = call(&app1, "GET", &base, None).await;

    let app2 = app(dir.path());
    let (_, after) = call(&app2, "GET", &base, None).await;
    assert_eq!(before, after);
    assert_eq!(after["last_draw"], draw["pool_index"]);
    assert_eq!(after["design"]["threshold"], restricted["threshold"]);
    let audit = std::fs::read_to_string(
        dir.path()
            .join("sessions")
            .join(&id)
            .join("bundle/audit.jsonl"),
    )
    .unwrap();
    assert_eq!(audit.lines().count(), 1);
}

#[tokio::test]
async fn schema_lists_routes_and_unlocked_delete() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, schema) = call(&app, "GET", "/api/schema", None).await;
    assert_eq!(s, StatusCode::OK);
    let eps = schema["endpoints"].as_array().unwrap();
    assert_eq!(eps.len(), 21);
    for e in eps.iter().filter(|e| e["mode"] == "job") {
        assert_eq!(e["method"], "POST");
    }
    let (_, v) = call(&app, "POST", "/api/sessions", None).await;
    let id = v["id"].as_str().unwrap();
    let (s, _) = call(&app, "DELETE", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(!dir.path().join("sessions").join(id).exists());
    let (_, list) = call(&app, "GET", "/api/sessions", None).await;
    assert!(list["sessions"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn network_upload_and_exposure_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, v) = call(&app, "POST", "/api/sessions", None).await;
    let base = format!("/api/sessions/{}", v["id"].as_str().unwrap());
    let (s, _) = upload(&app, &format!("{base}/network"), &[("edges", "a,b\n0,1\n")]).await;
    assert_eq!(s, StatusCode::CONFLICT);
    upload(
        &app,
        &format!("{base}/covariates"),
        &[("file", &covariate_csv(20))],
    )
    .await;
    let edges: String = std::iter::once("source,target".to_string())
        .chain((0..19).map(|i| format!("{i},{}", i + 1)))
        .collect::<Vec<_>>()
        .join("\n");
    let coords: String = std::iter::once("unit_id,x,y".to_string())
        .chain((0..20).map(|i| format!("{i},{i},0")))
        .collect::<Vec<_>>()
        .join("\n");
    let (s, v) = upload(
        &app,
        &format!("{base}/network"),
        &[("edges", &edges), ("coords", &coords)],
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["edges"], 19);
    job(
        &app,
        &format!("{base}/enumerate"),
        json!({ "mechanism": { "kind": "complete" }, "pool_size": 200, "seed": 5 }),
    )
    .await;
    let (s, v) = job(
        &app,
        &format!("{base}/score"),
        json!({ "metrics": [
        { "metric": "frac_ctrl_exposed", "exposure": { "kind": "fraction_q", "q": 0.25 } },
        { "metric": "inv_min_euclidean" }
    ] }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["metrics"][1]["name"], "InvMinEuclideanDist");
    let body = json!({
        "fitness": { "metrics": [{ "metric": "frac_ctrl_exposed", "exposure": { "kind": "fraction_q", "q": 0.25 } }], "aggregator": "identity", "normalization": "none" },
        "rule": { "kind": "top_m", "m_accept": 20 },
        "mirror_group": "cyclic"
    });
    let (s, v) = call(
        &app,
        "POST",
        &format!("{base}/restrict"),
        Some(body.clone()),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["path"], "mirror_group");
    let mut body = body;
    body["allow_asymmetric"] = json!(true);
    let (s, v) = call(&app, "POST", &format!("{base}/restrict"), Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["accepted"].as_u64().unwrap() >= 20);
}
