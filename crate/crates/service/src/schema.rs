//! Machine-readable endpoint description served at `/api/schema`.

use serde_json::{json, Value};

/// Every route with its method, execution mode, body kind and an example
/// request body.
pub fn describe() -> Value {
    let ep = |method: &str, path: &str, mode: &str, body: Value, returns: &str| json!({ "method": method, "path": path, "mode": mode, "body": body, "returns": returns });
    let none = Value::Null;
    let multipart = |required: &[&str], optional: &[&str]| json!({ "kind": "multipart", "required": required, "optional": optional });
    let body = |ty: &str, example: Value| json!({ "kind": "json", "type": ty, "example": example });
    let fitness = json!({
        "metrics": [
            { "metric": "max_mahalanobis", "weight": 0.5 },
            { "metric": "sum_max_abs_smd", "weight": 0.5 }
        ],
        "aggregator": "weighted_sum",
        "normalization": "pool_minmax"
    });
    json!({
        "service": "igr",
        "core_version": igr_core::CORE_VERSION,
        "errors": {
            "409": "mutation of a locked session, or a step out of order",
            "422": "validation failure; error.fields lists offending paths",
            "404": "unknown session, job or bundle file"
        },
        "jobs": "job endpoints answer 202 with job_id; poll GET /api/jobs/{id} until status is done or failed",
        "endpoints": [
            ep("GET", "/api/schema", "sync", none.clone(), "this document"),
            ep("GET", "/api/health", "sync", none.clone(), "status and core version"),
            ep("POST", "/api/sessions", "sync", none.clone(), "new session id"),
            ep("GET", "/api/sessions", "sync", none.clone(), "session ids"),
            ep("GET", "/api/sessions/{id}", "sync", none.clone(), "session summary"),
            ep("DELETE", "/api/sessions/{id}", "sync", none.clone(), "204; unlocked sessions only"),
            ep("POST", "/api/sessions/{id}/covariates", "sync", multipart(&["file"], &["sidecar"]), "covariate summary"),
            ep("POST", "/api/sessions/{id}/network", "sync", multipart(&["edges"], &["coords"]), "network summary"),
            ep("POST", "/api/sessions/{id}/clusters", "sync", multipart(&["file"], &[]), "cluster summary"),
            ep("POST", "/api/sessions/{id}/enumerate", "job", body("EnumerateRequest", json!({
                "mechanism": { "kind": "complete", "arms": 2 }, "pool_size": 1000, "seed": 1
            })), "pool size and provenance"),
            ep("POST", "/api/sessions/{id}/score", "job", body("ScoreRequest", json!({
                "metrics": [{ "metric": "max_mahalanobis" }]
            })), "per-metric score vectors with cache_hit flags"),
            ep("POST", "/api/sessions/{id}/restrict", "sync", body("RestrictRequest", json!({
                "fitness": fitness, "rule": { "kind": "top_m", "m_accept": 50 }
            })), "accept mask, cache metadata and diagnostics report"),
            ep("POST", "/api/sessions/{id}/evolve", "job", body("EvolveRequest", json!({
                "fitness": fitness, "ga": { "generations": 5 }, "seed": 2
            })), "evolved pool size and per-generation trace; replaces the pool"),
            ep("POST", "/api/sessions/{id}/lock", "sync", body("LockRequest", json!({ "mode": "matrix" })), "bundle digest and manifest"),
            ep("GET", "/api/sessions/{id}/bundle/{file}", "sync", none.clone(), "manifest.json, allocations.csv or audit.jsonl"),
            ep("POST", "/api/sessions/{id}/randomize", "sync", body("RandomizeRequest", json!({ "seed": 3 })), "official allocation"),
            ep("POST", "/api/sessions/{id}/outcomes", "sync", multipart(&["file"], &["column"]), "outcome summary; locked sessions only"),
            ep("POST", "/api/sessions/{id}/test", "sync", body("TestRequest", json!({ "statistic": { "kind": "diff_in_means" } })), "Fisher randomization test"),
            ep("GET", "/api/sessions/{id}/events", "sync", none.clone(), "event log"),
            ep("POST", "/api/sessions/{id}/replay", "sync", none.clone(), "replay consistency report"),
            ep("GET", "/api/jobs/{id}", "sync", none, "job status and result")
        ]
    })
}
