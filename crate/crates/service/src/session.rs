//! Event-sourced session state. Every accepted mutation is an [`Event`];
//! applying the same events to a fresh session reproduces every response.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use igr_core::bundle::{append_draw, preregister, BundleMode, MANIFEST};
use igr_core::design::{add_mirrors, AcceptedDesign, MirrorGroup};
use igr_core::enumerate::{group_formation_mechanism, Mechanism};
use igr_core::fitness::{
    combine, extend_scores, score_metric, FitnessConfig, PoolScores, RestrictionRule,
};
use igr_core::genetic::{evolve, GaConfig};
use igr_core::inference::{fisher_test, Statistic};
use igr_core::metrics::{DesignContext, Metric};
use igr_core::{
    dedup, AllocationPool, ClusterMap, CovariateMatrix, CovariateSidecar, InterferenceNetwork,
    RngSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};

fn yes() -> bool {
    true
}
fn two() -> u8 {
    2
}
fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismRequest {
    Complete {
        #[serde(default = "two")]
        arms: u8,
    },
    Cluster {
        #[serde(default = "two")]
        arms: u8,
    },
    GroupFormation {
        compositions: Vec<f64>,
        group_size: usize,
    },
}

/// Resolve a mechanism request against the study inputs.
pub fn build_mechanism(m: &MechanismRequest, ctx: &DesignContext) -> ApiResult<Mechanism> {
    Ok(match m {
        MechanismRequest::Complete { arms } => Mechanism::Complete {
            n: ctx.n_units(),
            arms: *arms,
        },
        MechanismRequest::Cluster { arms } => {
            let c = ctx
                .clusters
                .as_ref()
                .ok_or_else(|| ApiError::Conflict("upload a cluster map first".into()))?;
            Mechanism::Cluster {
                n_clusters: c.n_clusters(),
                arms: *arms,
            }
        }
        MechanismRequest::GroupFormation {
            compositions,
            group_size,
        } => group_formation_mechanism(&ctx.covariates, compositions, *group_size)
            .map_err(|e| ApiError::at("mechanism", e))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateRequest {
    pub mechanism: MechanismRequest,
    pub pool_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
    #[serde(default = "yes")]
    pub dedup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub metrics: Vec<Metric>,
    #[serde(default = "yes")]
    pub include_scores: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictRequest {
    pub fitness: FitnessConfig,
    pub rule: RestrictionRule,
    /// Close the accepted set under this arm-relabeling group.
    #[serde(default)]
    pub mirror_group: Option<MirrorGroup>,
    /// Accept whole orbits in score order instead of appending mirrors to
    /// the top `m_accept`.
    #[serde(default)]
    pub orbits: bool,
    #[serde(default)]
    pub allow_asymmetric: bool,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveRequest {
    pub fitness: FitnessConfig,
    #[serde(default)]
    pub ga: GaConfig,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockRequest {
    #[serde(default)]
    pub mode: Option<BundleMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizeRequest {
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestRequest {
    #[serde(default)]
    pub statistic: Statistic,
    /// Observed allocation; defaults to the latest official draw.
    #[serde(default)]
    pub pool_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "body", rename_all = "snake_case")]
pub enum Event {
    Covariates {
        csv: String,
        sidecar: CovariateSidecar,
    },
    Network {
        edges_csv: String,
        coords_csv: Option<String>,
    },
    Clusters {
        csv: String,
    },
    Enumerate(EnumerateRequest),
    Score(ScoreRequest),
    Restrict(RestrictRequest),
    Evolve(EvolveRequest),
    Lock(LockRequest),
    Randomize(RandomizeRequest),
    Outcomes {
        csv: String,
        column: Option<String>,
    },
    Test(TestRequest),
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Covariates { .. } => "covariates",
            Event::Network { .. } => "network",
            Event::Clusters { .. } => "clusters",
            Event::Enumerate(_) => "enumerate",
            Event::Score(_) => "score",
            Event::Restrict(_) => "restrict",
            Event::Evolve(_) => "evolve",
            Event::Lock(_) => "lock",
            Event::Randomize(_) => "randomize",
            Event::Outcomes { .. } => "outcomes",
            Event::Test(_) => "test",
        }
    }

    /// Events still accepted once the design is locked.
    pub fn allowed_when_locked(&self) -> bool {
        matches!(
            self,
            Event::Randomize(_) | Event::Outcomes { .. } | Event::Test(_)
        )
    }
}

/// One line of a session's `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: usize,
    pub event: Event,
    pub response_sha256: String,
}

pub fn response_digest(v: &Value) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_vec(v).expect("json value serializes"),
    ))
}

impl Serialize for Ref<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        igr_core::ext::reals::serialize(self.0, s)
    }
}
struct Ref<'a>(&'a [f64]);

fn reals(v: &[f64]) -> Value {
    serde_json::to_value(Ref(v)).expect("reals serialize")
}

fn real(v: f64) -> Value {
    reals(&[v])[0].clone()
}

fn key_of<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    dir: PathBuf,
    replaying: bool,
    ctx: Option<Arc<DesignContext>>,
    pool: Option<Arc<AllocationPool>>,
    pool_version: u64,
    /// Per-metric score vectors of the current pool, keyed by metric.
    metric_cache: HashMap<String, Arc<Vec<f64>>>,
    /// Aggregated scores of the current pool, keyed by fitness config hash.
    fitness_cache: HashMap<String, Arc<PoolScores>>,
    design: Option<Arc<AcceptedDesign>>,
    outcomes: Option<Arc<Vec<f64>>>,
    last_draw: Option<usize>,
    events: usize,
}

impl Session {
    /// `dir` receives the bundle. While `replaying`, official draws are not
    /// appended to the bundle audit trail again.
    pub fn new(id: String, dir: PathBuf, replaying: bool) -> Self {
        Self {
            id,
            dir,
            replaying,
            ctx: None,
            pool: None,
            pool_version: 0,
            metric_cache: HashMap::new(),
            fitness_cache: HashMap::new(),
            design: None,
            outcomes: None,
            last_draw: None,
            events: 0,
        }
    }

    pub fn set_replaying(&mut self, on: bool) {
        self.replaying = on;
    }

    pub fn events(&self) -> usize {
        self.events
    }

    pub fn is_locked(&self) -> bool {
        self.design.as_ref().is_some_and(|d| d.is_locked())
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.dir.join("bundle")
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn ctx(&self) -> ApiResult<&DesignContext> {
        self.ctx
            .as_deref()
            .ok_or_else(|| ApiError::Conflict("upload covariates first".into()))
    }

    fn pool(&self) -> ApiResult<&Arc<AllocationPool>> {
        self.pool
            .as_ref()
            .ok_or_else(|| ApiError::Conflict("enumerate a pool first".into()))
    }

    fn design(&self) -> ApiResult<&Arc<AcceptedDesign>> {
        self.design
            .as_ref()
            .ok_or_else(|| ApiError::Conflict("restrict the pool first".into()))
    }

    /// Cheap checks run before an event is queued as a background job.
    pub fn precheck(&self, ev: &Event) -> ApiResult<()> {
        if self.is_locked() && !ev.allowed_when_locked() {
            return Err(ApiError::locked());
        }
        match ev {
            Event::Enumerate(r) => {
                self.ctx()?;
                if r.pool_size == 0 {
                    return Err(ApiError::field("pool_size", "pool size must be at least 1"));
                }
            }
            Event::Score(_) => {
                self.pool()?;
            }
            Event::Evolve(r) => {
                self.pool()?;
                r.fitness
                    .validate()
                    .map_err(|e| ApiError::at("fitness", e))?;
                r.ga.validate().map_err(|e| ApiError::at("ga", e))?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn apply(&mut self, ev: &Event) -> ApiResult<Value> {
        self.precheck(ev)?;
        let out = match ev {
            Event::Covariates { csv, sidecar } => self.covariates(csv, sidecar),
            Event::Network {
                edges_csv,
                coords_csv,
            } => self.network(edges_csv, coords_csv.as_deref()),
            Event::Clusters { csv } => self.clusters(csv),
            Event::Enumerate(r) => self.enumerate(r),
            Event::Score(r) => self.score(r),
            Event::Restrict(r) => self.restrict(r),
            Event::Evolve(r) => self.evolve(r),
            Event::Lock(r) => self.lock(r),
            Event::Randomize(r) => self.randomize(r),
            Event::Outcomes { csv, column } => self.upload_outcomes(csv, column.as_deref()),
            Event::Test(r) => self.test(r),
        }?;
        self.events += 1;
        Ok(out)
    }

    fn reset_pool(&mut self, pool: Option<AllocationPool>) {
        self.pool = pool.map(Arc::new);
        self.pool_version += 1;
        self.metric_cache.clear();
        self.fitness_cache.clear();
        self.design = None;
    }

    fn set_ctx(&mut self, ctx: DesignContext) {
        self.ctx = Some(Arc::new(ctx));
        self.reset_pool(None);
    }

    fn covariates(&mut self, csv: &str, sidecar: &CovariateSidecar) -> ApiResult<Value> {
        let x = CovariateMatrix::from_csv_reader(csv.as_bytes(), sidecar)
            .map_err(|e| ApiError::at("file", e))?;
        let mut ctx = DesignContext::new(x);
        if let Some(old) = &self.ctx {
            let n = ctx.n_units();
            ctx.network = old.network.clone().filter(|g| g.n_units() == n);
            ctx.clusters = old.clusters.clone().filter(|c| c.n_units() == n);
        }
        let summary = json!({
            "n_units": ctx.n_units(),
            "columns": ctx.covariates.columns().iter().map(|c| &c.name).collect::<Vec<_>>(),
            "salient": ctx.covariates.salient_name(),
            "network_kept": ctx.network.is_some(),
            "clusters_kept": ctx.clusters.is_some(),
        });
        self.set_ctx(ctx);
        Ok(summary)
    }

    fn network(&mut self, edges_csv: &str, coords_csv: Option<&str>) -> ApiResult<Value> {
        let mut ctx = self.ctx()?.clone();
        let n = ctx.n_units();
        let edges = InterferenceNetwork::edges_from_csv_reader(edges_csv.as_bytes())
            .map_err(|e| ApiError::at("edges", e))?;
        let mut net =
            InterferenceNetwork::from_edges(n, &edges).map_err(|e| ApiError::at("edges", e))?;
        if let Some(c) = coords_csv {
            let coords = InterferenceNetwork::coords_from_csv_reader(c.as_bytes(), n)
                .map_err(|e| ApiError::at("coords", e))?;
            net = net
                .with_coords(coords)
                .map_err(|e| ApiError::at("coords", e))?;
        }
        let summary =
            json!({ "n_units": n, "edges": net.n_edges(), "coords": net.coords().is_some() });
        ctx.network = Some(net);
        self.set_ctx(ctx);
        Ok(summary)
    }

    fn clusters(&mut self, csv: &str) -> ApiResult<Value> {
        let mut ctx = self.ctx()?.clone();
        let map =
            ClusterMap::from_csv_reader(csv.as_bytes()).map_err(|e| ApiError::at("file", e))?;
        if map.n_units() != ctx.n_units() {
            return Err(ApiError::field(
                "file",
                format!(
                    "cluster map covers {} units, covariates have {}",
                    map.n_units(),
                    ctx.n_units()
                ),
            ));
        }
        let summary = json!({ "n_units": map.n_units(), "n_clusters": map.n_clusters(), "sizes": map.sizes() });
        ctx.clusters = Some(map);
        self.set_ctx(ctx);
        Ok(summary)
    }

    fn enumerate(&mut self, r: &EnumerateRequest) -> ApiResult<Value> {
        let mech = build_mechanism(&r.mechanism, self.ctx()?)?;
        let drawn = mech
            .draw(r.pool_size, RngSpec::with_stream(r.seed, r.stream))
            .map_err(|e| ApiError::at("mechanism", e))?;
        let pool = if r.dedup { dedup(drawn) } else { drawn };
        let size = pool.len();
        let provenance = serde_json::to_value(&pool.provenance)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        self.reset_pool(Some(pool));
        Ok(json!({
            "pool_version": self.pool_version,
            "pool_size": size,
            "duplicates_removed": r.pool_size - size,
            "provenance": provenance,
        }))
    }

    /// Per-metric vectors for `metrics`, computing and caching misses.
    fn metric_scores(
        &mut self,
        metrics: &[&Metric],
        path: &str,
    ) -> ApiResult<(Vec<Arc<Vec<f64>>>, Vec<bool>)> {
        let pool = self.pool()?.clone();
        let ctx = self.ctx()?.clone();
        let mut out = Vec::new();
        let mut hits = Vec::new();
        for (i, m) in metrics.iter().enumerate() {
            let key = m.cache_key();
            if let Some(v) = self.metric_cache.get(&key) {
                out.push(v.clone());
                hits.push(true);
                continue;
            }
            let v = Arc::new(
                score_metric(&pool.candidates, m, &ctx)
                    .map_err(|e| ApiError::at(&format!("{path}[{i}]"), e))?,
            );
            self.metric_cache.insert(key, v.clone());
            out.push(v);
            hits.push(false);
        }
        Ok((out, hits))
    }

    fn score(&mut self, r: &ScoreRequest) -> ApiResult<Value> {
        if r.metrics.is_empty() {
            return Err(ApiError::field("metrics", "list at least one metric"));
        }
        let metrics: Vec<&Metric> = r.metrics.iter().collect();
        let (vals, hits) = self.metric_scores(&metrics, "metrics")?;
        let items: Vec<Value> = r
            .metrics
            .iter()
            .zip(vals.iter().zip(&hits))
            .map(|(m, (v, hit))| {
                let mut o = json!({ "name": m.name(), "key": m.cache_key(), "cache_hit": hit });
                if r.include_scores {
                    o["scores"] = reals(v);
                }
                o
            })
            .collect();
        Ok(json!({ "pool_version": self.pool_version, "metrics": items }))
    }

    fn restrict(&mut self, r: &RestrictRequest) -> ApiResult<Value> {
        r.fitness
            .validate()
            .map_err(|e| ApiError::at("fitness", e))?;
        let pool = self.pool()?.clone();
        let ctx = self.ctx()?.clone();
        let metrics: Vec<&Metric> = r.fitness.metrics.iter().map(|w| &w.metric).collect();
        let (vals, hits) = self.metric_scores(&metrics, "fitness.metrics")?;
        let fkey = key_of(&r.fitness);
        let fitness_hit = self.fitness_cache.contains_key(&fkey);
        let scores = match self.fitness_cache.get(&fkey) {
            Some(s) => s.clone(),
            None => {
                let per_metric = vals.iter().map(|v| v.as_ref().clone()).collect();
                let s = Arc::new(
                    combine(per_metric, &r.fitness).map_err(|e| ApiError::at("fitness", e))?,
                );
                self.fitness_cache.insert(fkey.clone(), s.clone());
                s
            }
        };
        let pool = pool.as_ref().clone();
        let design = match (r.mirror_group, r.orbits) {
            (Some(g), true) => {
                if !r.allow_asymmetric && !r.fitness.is_symmetric() {
                    return Err(ApiError::field(
                        "allow_asymmetric",
                        "fitness is not symmetric under arm relabeling; set allow_asymmetric to mirror anyway",
                    ));
                }
                AcceptedDesign::restrict_orbits(pool, &scores, r.fitness.clone(), r.rule, g, &ctx)
                    .map_err(|e| ApiError::at("rule.m_accept", e))?
            }
            (None, true) => {
                return Err(ApiError::field(
                    "orbits",
                    "orbit restriction needs a mirror_group",
                ))
            }
            (g, false) => {
                let d = AcceptedDesign::restrict(pool, &scores, r.fitness.clone(), r.rule)
                    .map_err(|e| ApiError::at("rule.m_accept", e))?;
                match g {
                    Some(g) => add_mirrors(d, &ctx, g, r.allow_asymmetric)
                        .map_err(|e| ApiError::at("mirror_group", e))?,
                    None => d,
                }
            }
        };
        let full = extend_scores(&scores, &design.pool.candidates, &design.fitness, &ctx)?;
        let report = igr_core::diagnostics::diagnose(&design, Some(&full), r.bins.max(1))?;
        let metric_hits: Vec<String> = metrics
            .iter()
            .zip(&hits)
            .filter(|(_, &h)| h)
            .map(|(m, _)| m.name())
            .collect();
        let metric_misses: Vec<String> = metrics
            .iter()
            .zip(&hits)
            .filter(|(_, &h)| !h)
            .map(|(m, _)| m.name())
            .collect();
        let out = json!({
            "pool_version": self.pool_version,
            "fitness_key": fkey,
            "cache_hit": metric_misses.is_empty(),
            "cache": { "fitness_hit": fitness_hit, "metric_hits": metric_hits, "metric_misses": metric_misses },
            "pool_size": design.pool.len(),
            "accepted": design.n_accepted(),
            "threshold": real(design.threshold),
            "accept_mask": design.accept_mask,
            "scores": reals(&design.scores),
            "report": report,
        });
        self.design = Some(Arc::new(design));
        Ok(out)
    }

    fn evolve(&mut self, r: &EvolveRequest) -> ApiResult<Value> {
        let pool = self.pool()?.clone();
        let ctx = self.ctx()?.clone();
        let out = evolve(
            &pool,
            &r.fitness,
            &ctx,
            &r.ga,
            RngSpec::with_stream(r.seed, r.stream),
        )
        .map_err(|e| ApiError::at("fitness", e))?;
        let best = out.fitness.iter().copied().fold(f64::INFINITY, f64::min);
        let resp = json!({
            "pool_size": out.pool.len(),
            "best_fitness": real(best),
            "trace": out.trace,
            "stopped_early": out.stopped_early,
        });
        self.reset_pool(Some(out.pool));
        let mut resp = resp;
        resp["pool_version"] = json!(self.pool_version);
        Ok(resp)
    }

    fn lock(&mut self, r: &LockRequest) -> ApiResult<Value> {
        let mut d = self.design()?.as_ref().clone();
        let mode = r.mode.unwrap_or(BundleMode::Matrix);
        let dir = self.bundle_dir();
        let digest = preregister(&mut d, &dir, mode).map_err(|e| match e {
            igr_core::Error::Bundle(m) => ApiError::field("mode", m),
            e => e.into(),
        })?;
        let manifest: Value = serde_json::from_slice(
            &std::fs::read(dir.join(MANIFEST)).map_err(|e| ApiError::Internal(e.to_string()))?,
        )
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        self.design = Some(Arc::new(d));
        Ok(json!({ "digest": digest, "mode": mode, "manifest": manifest }))
    }

    fn randomize(&mut self, r: &RandomizeRequest) -> ApiResult<Value> {
        let mut d = self.design()?.as_ref().clone();
        let z = d.draw_official(RngSpec::with_stream(r.seed, r.stream))?;
        let rec = d.audit.last().expect("draw recorded").clone();
        if !self.replaying {
            append_draw(&self.bundle_dir(), &rec)?;
        }
        self.last_draw = Some(rec.pool_index);
        self.design = Some(Arc::new(d));
        Ok(
            json!({ "sequence": rec.sequence, "pool_index": rec.pool_index, "rng": rec.rng, "allocation": z }),
        )
    }

    fn upload_outcomes(&mut self, csv: &str, column: Option<&str>) -> ApiResult<Value> {
        if !self.is_locked() {
            return Err(ApiError::Conflict(
                "outcomes are accepted only after the design is locked and pre-registered".into(),
            ));
        }
        let n = self.ctx()?.n_units();
        let table = CovariateMatrix::from_csv_reader(csv.as_bytes(), &CovariateSidecar::default())
            .map_err(|e| ApiError::at("file", e))?;
        let col = match column {
            Some(c) => table.column(c),
            None if table.columns().len() == 1 => table.columns().first(),
            None => table.column("y"),
        }
        .ok_or_else(|| {
            ApiError::field(
                "column",
                "name the outcome column (or send a single column, or one named 'y')",
            )
        })?;
        if col.values.len() != n {
            return Err(ApiError::field(
                "file",
                format!("{} outcomes for {n} units", col.values.len()),
            ));
        }
        let name = col.name.clone();
        self.outcomes = Some(Arc::new(col.values.clone()));
        Ok(json!({ "column": name, "n_units": n }))
    }

    fn test(&mut self, r: &TestRequest) -> ApiResult<Value> {
        let d = self.design()?.clone();
        if !d.is_locked() {
            return Err(ApiError::Conflict("lock the design before testing".into()));
        }
        let y = self
            .outcomes
            .clone()
            .ok_or_else(|| ApiError::Conflict("upload outcomes first".into()))?;
        let idx = r.pool_index.or(self.last_draw).ok_or_else(|| {
            ApiError::field("pool_index", "no official draw yet; give pool_index")
        })?;
        let z = d.pool.candidates.get(idx).ok_or_else(|| {
            ApiError::field("pool_index", format!("pool has {} members", d.pool.len()))
        })?;
        let t = fisher_test(&d, self.ctx()?, &y, z, &r.statistic).map_err(|e| match e {
            igr_core::Error::NotAccepted => ApiError::field("pool_index", e.to_string()),
            e => ApiError::at("statistic", e),
        })?;
        Ok(json!({
            "pool_index": idx,
            "statistic": r.statistic,
            "observed": t.observed,
            "p_value": t.p_value,
            "null_stats": t.null_stats,
        }))
    }

    pub fn summary(&self) -> Value {
        let ctx = self.ctx.as_deref();
        json!({
            "id": self.id,
            "events": self.events,
            "n_units": ctx.map(|c| c.n_units()),
            "columns": ctx.map(|c| c.covariates.columns().iter().map(|c| c.name.clone()).collect::<Vec<_>>()),
            "network": ctx.and_then(|c| c.network.as_ref()).map(|g| json!({"edges": g.n_edges(), "coords": g.coords().is_some()})),
            "clusters": ctx.and_then(|c| c.clusters.as_ref()).map(|c| c.n_clusters()),
            "pool_version": self.pool_version,
            "pool_size": self.pool.as_ref().map(|p| p.len()),
            "cached_metrics": self.metric_cache.len(),
            "design": self.design.as_ref().map(|d| json!({
                "fitness": d.fitness,
                "rule": d.rule,
                "accepted": d.n_accepted(),
                "pool_size": d.pool.len(),
                "threshold": real(d.threshold),
                "mirror_group": d.mirror_group,
                "digest": d.bundle_hash,
                "draws": d.audit.len(),
            })),
            "locked": self.is_locked(),
            "outcomes": self.outcomes.is_some(),
            "last_draw": self.last_draw,
        })
    }
}

/// Result of replaying a log against a fresh session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub events: usize,
    pub consistent: bool,
    pub mismatches: Vec<usize>,
}

/// Replay `entries` into a fresh session whose bundle goes to `dir`.
pub fn replay(id: &str, dir: &Path, entries: &[LogEntry]) -> (Session, ReplayReport) {
    let mut s = Session::new(id.to_string(), dir.to_path_buf(), true);
    let mut mismatches = Vec::new();
    for e in entries {
        match s.apply(&e.event) {
            Ok(v) if response_digest(&v) == e.response_sha256 => {}
            _ => mismatches.push(e.seq),
        }
    }
    let report = ReplayReport {
        events: entries.len(),
        consistent: mismatches.is_empty(),
        mismatches,
    };
    (s, report)
}
