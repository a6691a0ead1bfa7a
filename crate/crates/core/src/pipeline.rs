//! Simulation harness: generate data, build each design's accepted set, re-run
//! the experiment under every accepted allocation, and aggregate bias,
//! variance, RMSE and rejection rate over replicates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{dedup, AllocationPool, Candidate};
use crate::design::{AcceptedDesign, MirrorGroup};
use crate::enumerate::Mechanism;
use crate::error::{invalid, Error, Result};
use crate::fitness::{
    combine, score_metric, score_pool, score_with_ranges, FitnessConfig, RestrictionRule,
};
use crate::genetic::{evolve, ConstraintMode, GaConfig};
use crate::inference::{Prepared, Statistic};
use crate::metrics::{DesignContext, ExposureSpec, Metric};
use crate::par;
use crate::rng::RngSpec;
use crate::simgen::{
    effects_from_sizes, gen_settlements, gen_students, outcome_groupform, outcome_interference,
    outcome_multiarm, GenderMode, SettlementParams, SettlementSample, StudentSample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Vignette {
    /// Complete randomization into `arms` equal arms; arm 0 is control and
    /// `effect_sizes[h - 1]` is the effect size of arm `h`.
    MultiArm {
        n: usize,
        arms: u8,
        effect_sizes: Vec<f64>,
        gender: GenderMode,
    },
    /// Group formation with one treated and one control group per
    /// composition.
    GroupFormation {
        n: usize,
        compositions: Vec<f64>,
        group_size: usize,
        effect_sizes: Vec<f64>,
    },
    /// School-level randomization with network spillover.
    Interference { params: SettlementParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignKind {
    /// `m` direct draws from the vignette's base mechanism (CR or GFR).
    Benchmark,
    Igr {
        fitness: FitnessConfig,
        #[serde(default)]
        mirror_group: Option<MirrorGroup>,
    },
    Igrg {
        fitness: FitnessConfig,
        #[serde(default)]
        ga: GaConfig,
        #[serde(default)]
        mirror_group: Option<MirrorGroup>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub name: String,
    #[serde(rename = "design")]
    pub kind: DesignKind,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub vignette: Vignette,
    /// Enumerated pool size `M`.
    pub pool_size: usize,
    /// Accepted set size `m`.
    pub m_accept: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub designs: Vec<DesignSpec>,
    /// Name of the design relative columns are computed against.
    pub reference: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_accept == 0 || self.m_accept > self.pool_size {
            return invalid(format!(
                "need 1 <= m ({}) <= M ({})",
                self.m_accept, self.pool_size
            ));
        }
        if self.replicates == 0 {
            return invalid("need at least one replicate");
        }
        if !self.designs.iter().any(|d| d.name == self.reference) {
            return invalid(format!(
                "reference design {:?} is not in the design list",
                self.reference
            ));
        }
        for d in &self.designs {
            match &d.kind {
                DesignKind::Benchmark => {}
                DesignKind::Igr { fitness, .. } => fitness.validate()?,
                DesignKind::Igrg { fitness, ga, .. } => {
                    fitness.validate()?;
                    ga.validate()?;
                }
            }
        }
        Ok(())
    }
}

/// One comparison (estimand) of a vignette.
#[derive(Debug, Clone, PartialEq)]
struct Comparison {
    label: String,
    statistic: Statistic,
    truth: f64,
}

enum Data {
    Students {
        sample: StudentSample,
        /// Effect per arm (multi-arm, index 0 = control) or per composition.
        tau: Vec<f64>,
    },
    Settlements {
        sample: SettlementSample,
        effect: f64,
    },
}

struct Replicate<'a> {
    cfg: &'a ExperimentConfig,
    data: Data,
    ctx: DesignContext,
    mechanism: Mechanism,
    comparisons: Vec<Comparison>,
}

impl<'a> Replicate<'a> {
    fn generate(cfg: &'a ExperimentConfig, rng: RngSpec) -> Result<Self> {
        match &cfg.vignette {
            Vignette::MultiArm {
                n,
                arms,
                effect_sizes,
                gender,
            } => {
                if effect_sizes.len() + 1 != *arms as usize {
                    return invalid("multi-arm vignette needs one effect size per treated arm");
                }
                let sample = gen_students(*n, *gender, rng)?;
                let mut tau = vec![0.0];
                tau.extend(effects_from_sizes(effect_sizes, sample.exam()));
                let comparisons = (1..*arms)
                    .map(|h| Comparison {
                        label: format!("arm {h} vs 0"),
                        statistic: Statistic::DiffInMeans {
                            treated: h,
                            control: 0,
                        },
                        truth: tau[h as usize],
                    })
                    .collect();
                Ok(Self {
                    cfg,
                    ctx: DesignContext::new(sample.covariates.clone()),
                    data: Data::Students { sample, tau },
                    mechanism: Mechanism::Complete { n: *n, arms: *arms },
                    comparisons,
                })
            }
            Vignette::GroupFormation {
                n,
                compositions,
                group_size,
                effect_sizes,
            } => {
                if effect_sizes.len() != compositions.len() {
                    return invalid(
                        "group-formation vignette needs one effect size per composition",
                    );
                }
                let sample = gen_students(*n, GenderMode::FixedHalf, rng)?;
                let tau = effects_from_sizes(effect_sizes, sample.exam());
                let comparisons = compositions
                    .iter()
                    .zip(&tau)
                    .enumerate()
                    .map(|(j, (&c, &t))| Comparison {
                        label: format!("groups {} vs {} (composition {c})", 2 * j, 2 * j + 1),
                        statistic: Statistic::CompositionContrast {
                            composition: c,
                            treated: 1,
                            control: 0,
                        },
                        truth: t,
                    })
                    .collect();
                let salient = sample
                    .covariates
                    .salient()?
                    .iter()
                    .map(|&v| v as u8)
                    .collect();
                Ok(Self {
                    cfg,
                    ctx: DesignContext::new(sample.covariates.clone()),
                    data: Data::Students { sample, tau },
                    mechanism: Mechanism::GroupFormation {
                        salient,
                        compositions: compositions.clone(),
                        group_size: *group_size,
                    },
                    comparisons,
                })
            }
            Vignette::Interference { params } => {
                let sample = gen_settlements(params, rng)?;
                let effect = sample.effect();
                Ok(Self {
                    cfg,
                    ctx: sample.context(),
                    mechanism: Mechanism::Cluster {
                        n_clusters: params.n_schools,
                        arms: 2,
                    },
                    comparisons: vec![Comparison {
                        label: "treated vs control".into(),
                        statistic: Statistic::default(),
                        truth: effect,
                    }],
                    data: Data::Settlements { sample, effect },
                })
            }
        }
    }

    fn outcome(&self, c: &Candidate) -> Result<Vec<f64>> {
        match &self.data {
            Data::Students { sample, tau } => match &self.cfg.vignette {
                Vignette::GroupFormation { compositions, .. } => {
                    outcome_groupform(sample, c, compositions, tau)
                }
                _ => outcome_multiarm(sample, &self.ctx.unit_arms(c)?, tau),
            },
            Data::Settlements { sample, effect } => outcome_interference(
                &sample.xb,
                &sample.network,
                &self.ctx.unit_arms(c)?,
                *effect,
                *effect,
                sample.params.q,
            ),
        }
    }

    /// Re-run the experiment under every accepted allocation.
    fn evaluate(&self, accepted: &[Candidate]) -> Result<Vec<ComparisonStats>> {
        let refs: Vec<&Candidate> = accepted.iter().collect();
        let prepared: Vec<Prepared> = self
            .comparisons
            .iter()
            .map(|c| c.statistic.prepare(&refs, &self.ctx))
            .collect::<Result<_>>()?;
        // per accepted allocation: (estimate, p-value) for each comparison
        let runs: Vec<Result<Vec<(f64, f64)>>> = par::map_range(accepted.len(), |j| {
            let y = self.outcome(&accepted[j])?;
            Ok(prepared
                .iter()
                .map(|p| {
                    let t = p.test(&y, j);
                    (t.observed, t.p_value)
                })
                .collect())
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(self
            .comparisons
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                let est: Vec<f64> = runs.iter().map(|r| r[c].0).collect();
                let rejected = runs.iter().filter(|r| r[c].1 <= self.cfg.alpha).count();
                ComparisonStats::from_estimates(&comp.label, comp.truth, &est, rejected)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonStats {
    pub comparison: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Population variance (divisor `m`), so that `rmse² = bias² + variance`.
    pub variance: f64,
    pub rmse: f64,
    pub rejection_rate: f64,
}

impl ComparisonStats {
    pub fn from_estimates(label: &str, truth: f64, est: &[f64], rejected: usize) -> Self {
        let m = est.len() as f64;
        let mean = est.iter().sum::<f64>() / m;
        let variance = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m;
        let mse = est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / m;
        Self {
            comparison: label.into(),
            truth,
            mean_estimate: mean,
            bias: mean - truth,
            variance,
            rmse: mse.sqrt(),
            rejection_rate: rejected as f64 / m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub design: String,
    pub accepted: usize,
    /// Best fitness in the enumerated pool (IGR/IGRg).
    #[serde(default, with = "crate::ext::opt_real")]
    pub best_initial: Option<f64>,
    /// Best fitness in the evolved pool (IGRg).
    #[serde(default, with = "crate::ext::opt_real")]
    pub best_evolved: Option<f64>,
    #[serde(default, with = "crate::ext::opt_real")]
    pub threshold: Option<f64>,
    pub comparisons: Vec<ComparisonStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub design: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub design: String,
    pub comparison: String,
    pub bias: MeanSd,
    pub variance: MeanSd,
    pub rmse: MeanSd,
    pub rejection_rate: MeanSd,
    /// `100 · RMSE / RMSE_ref`, per replicate.
    pub pct_rmse: Option<MeanSd>,
    /// `100 · |bias| / |bias_ref|`, per replicate.
    pub pct_abs_bias: Option<MeanSd>,
    /// `100 · var / var_ref`, per replicate.
    pub pct_var: Option<MeanSd>,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub name: String,
    pub reference: String,
    pub replicates: Vec<ReplicateResult>,
    pub failures: Vec<Failure>,
    pub summary: Vec<SummaryRow>,
}

impl ResultsTable {
    pub fn row(&self, design: &str, comparison: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.design == design && r.comparison == comparison)
    }

    pub fn rows_for(&self, design: &str) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|r| r.design == design).collect()
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "design",
            "comparison",
            "bias_mean",
            "bias_sd",
            "var_mean",
            "var_sd",
            "rmse_mean",
            "rmse_sd",
            "rej_mean",
            "rej_sd",
            "pct_rmse_mean",
            "pct_rmse_sd",
            "pct_abs_bias_mean",
            "pct_abs_bias_sd",
            "pct_var_mean",
            "pct_var_sd",
            "replicates",
        ])?;
        let ms = |v: &Option<MeanSd>| match v {
            Some(m) => [m.mean.to_string(), m.sd.to_string()],
            None => [String::new(), String::new()],
        };
        for r in &self.summary {
            let mut rec = vec![r.design.clone(), r.comparison.clone()];
            for m in [&r.bias, &r.variance, &r.rmse, &r.rejection_rate] {
                rec.push(m.mean.to_string());
                rec.push(m.sd.to_string());
            }
            for m in [&r.pct_rmse, &r.pct_abs_bias, &r.pct_var] {
                rec.extend(ms(m));
            }
            rec.push(r.replicates.to_string());
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_replicates_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "replicate",
            "design",
            "comparison",
            "truth",
            "mean_estimate",
            "bias",
            "variance",
            "rmse",
            "rejection_rate",
            "accepted",
        ])?;
        for r in &self.replicates {
            for c in &r.comparisons {
                out.write_record([
                    r.replicate.to_string(),
                    r.design.clone(),
                    c.comparison.clone(),
                    c.truth.to_string(),
                    c.mean_estimate.to_string(),
                    c.bias.to_string(),
                    c.variance.to_string(),
                    c.rmse.to_string(),
                    c.rejection_rate.to_string(),
                    r.accepted.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Write `summary.csv`, `replicates.csv` and `results.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_summary_csv(std::fs::File::create(dir.join("summary.csv"))?)?;
        self.write_replicates_csv(std::fs::File::create(dir.join("replicates.csv"))?)?;
        std::fs::write(dir.join("results.json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn orbit_group(spec: Option<MirrorGroup>) -> MirrorGroup {
    spec.unwrap_or(MirrorGroup::Cyclic)
}

fn restrict_scored(
    pool: AllocationPool,
    fitness: &FitnessConfig,
    m: usize,
    group: MirrorGroup,
    ctx: &DesignContext,
) -> Result<(AcceptedDesign, f64)> {
    let per_metric = fitness
        .metrics
        .iter()
        .map(|wm| score_metric(&pool.candidates, &wm.metric, ctx))
        .collect::<Result<Vec<_>>>()?;
    let scores = combine(per_metric, fitness)?;
    let best = min_of(&scores.fitness);
    let d = AcceptedDesign::restrict_orbits(
        pool,
        &scores,
        fitness.clone(),
        RestrictionRule::top_m(m),
        group,
        ctx,
    )?;
    Ok((d, best))
}

fn run_design(
    rep: &Replicate,
    r: usize,
    di: usize,
    spec: &DesignSpec,
    pool: &mut Option<AllocationPool>,
    seed: RngSpec,
) -> Result<ReplicateResult> {
    let cfg = rep.cfg;
    let m = cfg.m_accept;
    let mut result = ReplicateResult {
        replicate: r,
        design: spec.name.clone(),
        accepted: m,
        best_initial: None,
        best_evolved: None,
        threshold: None,
        comparisons: Vec::new(),
    };
    let mut enumerated = || -> Result<AllocationPool> {
        if pool.is_none() {
            *pool = Some(dedup(
                rep.mechanism
                    .draw(cfg.pool_size, seed.derive(&[r as u64, 2]))?,
            ));
        }
        Ok(pool.clone().unwrap())
    };
    let accepted: Vec<Candidate> = match &spec.kind {
        DesignKind::Benchmark => {
            rep.mechanism
                .draw(m, seed.derive(&[r as u64, 1, di as u64]))?
                .candidates
        }
        DesignKind::Igr {
            fitness,
            mirror_group,
        } => {
            let (d, best) = restrict_scored(
                enumerated()?,
                fitness,
                m,
                orbit_group(*mirror_group),
                &rep.ctx,
            )?;
            result.best_initial = Some(best);
            result.threshold = Some(d.threshold);
            d.accepted().into_iter().cloned().collect()
        }
        DesignKind::Igrg {
            fitness,
            ga,
            mirror_group,
        } => {
            let base = enumerated()?;
            let evolved = evolve(
                &base,
                fitness,
                &rep.ctx,
                ga,
                seed.derive(&[r as u64, 3, di as u64]),
            )?;
            // both bests on the initial pool's scale
            let initial = score_pool(&base, fitness, &rep.ctx)?;
            let rescored =
                score_with_ranges(&evolved.pool.candidates, fitness, &initial.ranges, &rep.ctx)?;
            result.best_initial = Some(min_of(&initial.fitness));
            result.best_evolved = Some(min_of(&rescored));
            let (d, _) = restrict_scored(
                evolved.pool,
                fitness,
                m,
                orbit_group(*mirror_group),
                &rep.ctx,
            )?;
            result.threshold = Some(d.threshold);
            d.accepted().into_iter().cloned().collect()
        }
    };
    result.accepted = accepted.len();
    result.comparisons = rep.evaluate(&accepted)?;
    Ok(result)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsTable> {
    cfg.validate()?;
    let seed = RngSpec::new(cfg.seed);
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for r in 0..cfg.replicates {
        let rep = match Replicate::generate(cfg, seed.derive(&[r as u64, 0])) {
            Ok(rep) => rep,
            Err(e) => {
                for d in &cfg.designs {
                    failures.push(Failure {
                        replicate: r,
                        design: d.name.clone(),
                        error: format!("data generation: {e}"),
                    });
                }
                continue;
            }
        };
        let mut pool = None;
        for (di, spec) in cfg.designs.iter().enumerate() {
            match run_design(&rep, r, di, spec, &mut pool, seed) {
                Ok(res) => replicates.push(res),
                Err(e) => failures.push(Failure {
                    replicate: r,
                    design: spec.name.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    let summary = summarize(cfg, &replicates);
    Ok(ResultsTable {
        name: cfg.name.clone(),
        reference: cfg.reference.clone(),
        replicates,
        failures,
        summary,
    })
}

fn summarize(cfg: &ExperimentConfig, reps: &[ReplicateResult]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let find =
        |r: usize, design: &str| reps.iter().find(|x| x.replicate == r && x.design == design);
    for d in &cfg.designs {
        let mine: Vec<&ReplicateResult> = reps.iter().filter(|x| x.design == d.name).collect();
        let Some(first) = mine.first() else { continue };
        for (ci, comp) in first.comparisons.iter().enumerate() {
            let col = |f: &dyn Fn(&ComparisonStats) -> f64| -> Vec<f64> {
                mine.iter().map(|x| f(&x.comparisons[ci])).collect()
            };
            let rel =
                |f: &dyn Fn(&ComparisonStats, &ComparisonStats) -> Option<f64>| -> Option<MeanSd> {
                    let v: Vec<f64> = mine
                        .iter()
                        .filter_map(|x| {
                            let base = find(x.replicate, &cfg.reference)?;
                            f(&x.comparisons[ci], &base.comparisons[ci])
                        })
                        .collect();
                    MeanSd::of(&v)
                };
            let ratio = |a: f64, b: f64| if b != 0.0 { Some(100.0 * a / b) } else { None };
            out.push(SummaryRow {
                design: d.name.clone(),
                comparison: comp.comparison.clone(),
                bias: MeanSd::of(&col(&|c| c.bias)).unwrap(),
                variance: MeanSd::of(&col(&|c| c.variance)).unwrap(),
                rmse: MeanSd::of(&col(&|c| c.rmse)).unwrap(),
                rejection_rate: MeanSd::of(&col(&|c| c.rejection_rate)).unwrap(),
                pct_rmse: rel(&|a, b| ratio(a.rmse, b.rmse)),
                pct_abs_bias: rel(&|a, b| ratio(a.bias.abs(), b.bias.abs())),
                pct_var: rel(&|a, b| ratio(a.variance, b.variance)),
                replicates: mine.len(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Minutes on a laptop.
    Desk,
    /// The published settings.
    Full,
}

pub const PRESETS: [&str; 6] = [
    "vignette0-4arm",
    "vignette0-6arm",
    "vignette1",
    "vignette2-gamma025",
    "vignette2-gamma050",
    "vignette2-gamma075",
];

fn igr(name: &str, fitness: FitnessConfig) -> DesignSpec {
    DesignSpec {
        name: name.into(),
        kind: DesignKind::Igr {
            fitness,
            mirror_group: None,
        },
    }
}

fn igrg(name: &str, fitness: FitnessConfig, ga: GaConfig) -> DesignSpec {
    DesignSpec {
        name: name.into(),
        kind: DesignKind::Igrg {
            fitness,
            ga,
            mirror_group: None,
        },
    }
}

fn benchmark(name: &str) -> DesignSpec {
    DesignSpec {
        name: name.into(),
        kind: DesignKind::Benchmark,
    }
}

/// FracCtrlExposed with the exposure rule of the outcome model.
pub fn frac_expo() -> Metric {
    Metric::FracCtrlExposed {
        exposure: ExposureSpec::FractionQ { q: 0.25 },
    }
}

/// Weighted balance/interference fitness for the interference vignette.
pub fn interference_fitness(w_balance: f64, interference: Metric) -> FitnessConfig {
    FitnessConfig::weighted(vec![
        (
            Metric::MaxMahalanobis {
                exclude_salient: false,
            },
            w_balance,
        ),
        (interference, 1.0 - w_balance),
    ])
}

/// Named experiment presets. Aliases: `vignette0` is the 4-arm preset and
/// `vignette2` the `γ = 0.5` one.
pub fn preset(name: &str, scale: Scale) -> Result<ExperimentConfig> {
    let full = scale == Scale::Full;
    let (pool_size, replicates) = if full { (100_000, 5) } else { (10_000, 3) };
    let name = match name {
        "vignette0" => "vignette0-4arm",
        "vignette2" => "vignette2-gamma050",
        n => n,
    };
    let ga_multiarm = GaConfig {
        constraint: ConstraintMode::ToleranceBand,
        tolerance: 1,
        ..GaConfig::default()
    };
    let cfg = match name {
        "vignette0-4arm" | "vignette0-6arm" => {
            let six = name.ends_with("6arm");
            let (arms, effect_sizes) = if six {
                (6u8, vec![0.0, 0.15, 0.3, 0.45, 0.6])
            } else {
                (4u8, vec![0.0, 0.3, 0.6])
            };
            let mah = FitnessConfig::identity(Metric::MaxMahalanobis {
                exclude_salient: false,
            });
            let smd = FitnessConfig::identity(Metric::SumMaxAbsSmd {
                exclude_salient: false,
            });
            // accepted sets are whole orbits of size k
            let m = if full { 500 } else { 200 };
            ExperimentConfig {
                name: name.into(),
                vignette: Vignette::MultiArm {
                    n: 20 * arms as usize,
                    arms,
                    effect_sizes,
                    gender: GenderMode::Bernoulli07,
                },
                pool_size,
                m_accept: m - m % arms as usize,
                replicates,
                seed: 2024,
                alpha: 0.05,
                designs: vec![
                    benchmark("CR"),
                    igr("IGR MaxMahalanobis", mah.clone()),
                    igr("IGR SumMaxAbsSMD", smd.clone()),
                    igrg("IGRg MaxMahalanobis", mah, ga_multiarm.clone()),
                    igrg("IGRg SumMaxAbsSMD", smd, ga_multiarm),
                ],
                reference: "CR".into(),
            }
        }
        "vignette1" => {
            let comps = vec![0.5, 0.3, 0.7];
            let gate = Metric::DesiredComps {
                compositions: comps.clone(),
            };
            let mah = FitnessConfig::gated(
                gate.clone(),
                Metric::MaxMahalanobis {
                    exclude_salient: true,
                },
            );
            let smd = FitnessConfig::gated(
                gate,
                Metric::SumMaxAbsSmd {
                    exclude_salient: true,
                },
            );
            ExperimentConfig {
                name: name.into(),
                vignette: Vignette::GroupFormation {
                    n: 120,
                    compositions: comps,
                    group_size: 20,
                    effect_sizes: vec![0.3, 0.5, 0.1],
                },
                pool_size,
                m_accept: if full { 500 } else { 200 },
                replicates,
                seed: 2024,
                alpha: 0.05,
                designs: vec![
                    benchmark("GFR"),
                    igr("IGR MaxMahalanobis-GD", mah.clone()),
                    igr("IGR SumMaxAbsSMD-GD", smd.clone()),
                    igrg("IGRg MaxMahalanobis-GD", mah, GaConfig::default()),
                    igrg("IGRg SumMaxAbsSMD-GD", smd, GaConfig::default()),
                ],
                reference: "GFR".into(),
            }
        }
        n if n.starts_with("vignette2-gamma") => {
            let gamma = match &n["vignette2-gamma".len()..] {
                "025" => 0.25,
                "050" => 0.5,
                "075" => 0.75,
                other => return invalid(format!("unknown gamma suffix {other:?}")),
            };
            let params = if full {
                SettlementParams::new(4000, 40, gamma)
            } else {
                SettlementParams::new(400, 20, gamma)
            };
            let mut designs = vec![benchmark("CR")];
            for w in [0.25, 0.5, 0.75] {
                designs.push(igr(
                    &format!("IGR {w:.2}*MaxMahalanobis + {:.2}*FracExpo", 1.0 - w),
                    interference_fitness(w, frac_expo()),
                ));
            }
            for w in [0.25, 0.5, 0.75] {
                designs.push(igr(
                    &format!(
                        "IGR {w:.2}*MaxMahalanobis + {:.2}*InvMinEuclidDist",
                        1.0 - w
                    ),
                    interference_fitness(w, Metric::InvMinEuclidean),
                ));
            }
            for w in [0.25, 0.5, 0.75] {
                designs.push(igrg(
                    &format!("IGRg {w:.2}*MaxMahalanobis + {:.2}*FracExpo", 1.0 - w),
                    interference_fitness(w, frac_expo()),
                    GaConfig::default(),
                ));
            }
            ExperimentConfig {
                name: n.into(),
                vignette: Vignette::Interference { params },
                pool_size,
                m_accept: if full { 500 } else { 200 },
                replicates,
                seed: 2024,
                alpha: 0.05,
                designs,
                reference: "CR".into(),
            }
        }
        other => {
            return Err(Error::Invalid(format!(
                "unknown preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
