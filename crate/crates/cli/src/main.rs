mod study;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use igr_core::bundle::{
    append_draw, load_bundle, preregister, read_audit, verify_bundle, BundleMode,
};
use igr_core::design::{add_mirrors, AcceptedDesign};
use igr_core::diagnostics::{diagnose, DiagnosticsReport, Histogram};
use igr_core::fitness::{extend_scores, score_pool, PoolScores};
use igr_core::genetic::evolve;
use igr_core::inference::fisher_test;
use igr_core::metrics::DesignContext;
use igr_core::pipeline::{preset, run_experiment, ExperimentConfig, ResultsTable, Scale, PRESETS};
use igr_core::{dedup, AllocationPool, Candidate, CovariateMatrix, CovariateSidecar, RngSpec};
use igr_service::session::build_mechanism;
use study::{read_json, write_json, Study};

#[derive(Parser)]
#[command(
    name = "igr",
    version,
    about = "Inspection-guided restricted randomization"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the random step this command performs.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Args, Clone)]
struct PoolArg {
    /// Pool written by `enumerate` or `evolve`; enumerates from the config when absent.
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Matrix,
    CodeReference,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a candidate pool.
    Enumerate {
        #[command(flatten)]
        common: Common,
    },
    /// Score a pool under the configured fitness.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: PoolArg,
    },
    /// Restrict a pool to its best-scoring allocations.
    Restrict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: PoolArg,
    },
    /// Refine a pool with the genetic algorithm.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pool: PoolArg,
    },
    /// Diagnostics and figure-ready CSVs for a restricted design.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Design written by `restrict`.
        #[arg(long)]
        design: PathBuf,
    },
    /// Write a pre-registration bundle and lock the design.
    Preregister {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
        #[arg(long, value_enum, default_value = "matrix")]
        mode: ModeArg,
    },
    /// Check a bundle's schema, digest and optionally its seed replay.
    Verify {
        #[command(flatten)]
        common: Common,
        bundle: PathBuf,
        #[arg(long)]
        replay: bool,
    },
    /// Draw the official allocation from a locked bundle.
    Randomize {
        #[command(flatten)]
        common: Common,
        bundle: PathBuf,
        #[arg(long, default_value_t = 0)]
        stream: u64,
    },
    /// Fisher randomization test over a bundle's accepted set.
    Test {
        #[command(flatten)]
        common: Common,
        bundle: PathBuf,
        /// CSV holding the observed outcomes.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        column: Option<String>,
        /// Observed allocation; defaults to the latest official draw.
        #[arg(long)]
        pool_index: Option<usize>,
    },
    /// Run a simulation study from a preset or an experiment config.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
    },
    /// Serve the HTTP API (and a built dashboard, if given).
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = ".igr")]
        workdir: PathBuf,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn load_pool(
    study: &Study,
    ctx: &DesignContext,
    arg: &PoolArg,
    seed: Option<u64>,
) -> Result<AllocationPool> {
    if let Some(p) = &arg.pool {
        return read_json(p);
    }
    let mut req = study
        .enumerate
        .clone()
        .context("config has no \"enumerate\" section and no --pool was given")?;
    if let Some(s) = seed {
        req.seed = s;
    }
    let mech = build_mechanism(&req.mechanism, ctx)?;
    let pool = mech.draw(req.pool_size, RngSpec::with_stream(req.seed, req.stream))?;
    Ok(if req.dedup { dedup(pool) } else { pool })
}

fn restrict_design(
    study: &Study,
    ctx: &DesignContext,
    pool: AllocationPool,
) -> Result<(AcceptedDesign, PoolScores)> {
    let fitness = study.fitness()?.clone();
    let rule = study.rule()?;
    let scores = score_pool(&pool, &fitness, ctx)?;
    let design = match (study.mirror_group, study.orbits) {
        (Some(g), true) => {
            if !study.allow_asymmetric && !fitness.is_symmetric() {
                bail!("fitness is not symmetric under arm relabeling; set allow_asymmetric to mirror anyway");
            }
            AcceptedDesign::restrict_orbits(pool, &scores, fitness, rule, g, ctx)?
        }
        (None, true) => bail!("\"orbits\" needs a \"mirror_group\""),
        (g, false) => {
            let d = AcceptedDesign::restrict(pool, &scores, fitness, rule)?;
            match g {
                Some(g) => add_mirrors(d, ctx, g, study.allow_asymmetric)?,
                None => d,
            }
        }
    };
    let full = extend_scores(&scores, &design.pool.candidates, &design.fitness, ctx)?;
    Ok((design, full))
}

fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lower", "upper", "count"])?;
    for (i, c) in h.counts.iter().enumerate() {
        w.write_record([
            h.edges[i].to_string(),
            h.edges[i + 1].to_string(),
            c.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Report as JSON plus one CSV per figure.
fn write_report(dir: &Path, r: &DiagnosticsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("diagnostics.json"), r)?;
    write_histogram(&dir.join("score_histogram.csv"), &r.scores.histogram)?;
    if let Some(c) = &r.correlation {
        write_histogram(&dir.join("correlation_histogram.csv"), &c.histogram)?;
    }
    for (k, t) in r.tradeoffs.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("tradeoff_{k}.csv")))?;
        w.write_record([
            "metric_a", "metric_b", "bin_a", "bin_b", "a_lower", "b_lower", "count", "accepted",
        ])?;
        for (i, row) in t.grid.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let acc = t.grid.accepted_counts.as_ref().map_or(0, |a| a[i][j]);
                w.write_record([
                    t.metric_a.clone(),
                    t.metric_b.clone(),
                    i.to_string(),
                    j.to_string(),
                    t.grid.edges_a[i].to_string(),
                    t.grid.edges_b[j].to_string(),
                    c.to_string(),
                    acc.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn write_scores_csv(path: &Path, s: &PoolScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string()];
    header.extend(s.metric_names.iter().cloned());
    header.push("fitness".into());
    w.write_record(&header)?;
    for i in 0..s.fitness.len() {
        let mut row = vec![i.to_string()];
        row.extend(s.per_metric.iter().map(|v| v[i].to_string()));
        row.push(s.fitness[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_assignment(path: &Path, z: &Candidate) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    match z {
        Candidate::Labels(a) => {
            w.write_record(["index", "arm"])?;
            for (i, arm) in a.labels.iter().enumerate() {
                w.write_record([i.to_string(), arm.to_string()])?;
            }
        }
        Candidate::Groups(g) => {
            w.write_record(["unit", "group", "arm"])?;
            for (i, &h) in g.group_of.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    h.to_string(),
                    g.arm_of_group[h as usize].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_outcomes(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let t = CovariateMatrix::from_csv_path(path, &CovariateSidecar::default())
        .with_context(|| format!("reading outcomes from {}", path.display()))?;
    let col = match column {
        Some(c) => t.column(c),
        None if t.columns().len() == 1 => t.columns().first(),
        None => t.column("y"),
    }
    .context("name the outcome column with --column")?;
    Ok(col.values.clone())
}

fn print_summary(t: &ResultsTable) {
    println!(
        "{:<48} {:<40} {:>10} {:>10} {:>8}",
        "design", "comparison", "rmse", "%rmse", "reject"
    );
    for r in &t.summary {
        let pct = r
            .pct_rmse
            .as_ref()
            .map_or("-".to_string(), |m| format!("{:.1}", m.mean));
        println!(
            "{:<48} {:<40} {:>10.4} {:>10} {:>8.3}",
            r.design, r.comparison, r.rmse.mean, pct, r.rejection_rate.mean
        );
    }
    if !t.failures.is_empty() {
        println!("{} failed replicate(s); see results.json", t.failures.len());
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Enumerate { common } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let pool = load_pool(&study, &ctx, &PoolArg { pool: None }, common.seed)?;
            let out = common.out_dir("igr-out");
            write_json(&out.join("pool.json"), &pool)?;
            println!(
                "pool: {} allocations -> {}",
                pool.len(),
                out.join("pool.json").display()
            );
        }
        Cmd::Score { common, pool } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let pool = load_pool(&study, &ctx, &pool, common.seed)?;
            let scores = score_pool(&pool, study.fitness()?, &ctx)?;
            let out = common.out_dir("igr-out");
            write_json(&out.join("scores.json"), &scores)?;
            write_scores_csv(&out.join("scores.csv"), &scores)?;
            let best = scores.fitness.iter().copied().fold(f64::INFINITY, f64::min);
            println!(
                "scored {} allocations; best fitness {best}",
                scores.fitness.len()
            );
        }
        Cmd::Restrict { common, pool } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let pool = load_pool(&study, &ctx, &pool, common.seed)?;
            let (design, full) = restrict_design(&study, &ctx, pool)?;
            let out = common.out_dir("igr-out");
            write_json(&out.join("design.json"), &design)?;
            write_json(&out.join("scores.json"), &full)?;
            write_report(&out, &diagnose(&design, Some(&full), study.bins)?)?;
            println!(
                "accepted {} of {} allocations (threshold {}) -> {}",
                design.n_accepted(),
                design.pool.len(),
                design.threshold,
                out.join("design.json").display()
            );
        }
        Cmd::Evolve { common, pool } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let pool = load_pool(&study, &ctx, &pool, None)?;
            let seed = study.seed(common.seed)?;
            let out_ga = evolve(&pool, study.fitness()?, &ctx, &study.ga, RngSpec::new(seed))?;
            let out = common.out_dir("igr-out");
            write_json(&out.join("pool.json"), &out_ga.pool)?;
            out_ga.write_trace_csv(fs::File::create(out.join("trace.csv"))?)?;
            let last = out_ga.trace.last().context("empty trace")?;
            println!(
                "evolved pool of {} allocations; best {} after {} generations{}",
                out_ga.pool.len(),
                last.best,
                last.generation,
                out_ga
                    .stopped_early
                    .as_ref()
                    .map_or(String::new(), |s| format!(" ({s})"))
            );
        }
        Cmd::Diagnose { common, design } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let d: AcceptedDesign = read_json(&design)?;
            let scores = score_pool(&d.pool, &d.fitness, &ctx)?;
            // rescore with the design's stored ranges so appended mirrors line up
            let per = PoolScores {
                ranges: d.ranges.clone(),
                fitness: d.scores.clone(),
                ..scores
            };
            let r = diagnose(&d, Some(&per), study.bins)?;
            let out = common.out_dir("igr-out");
            write_report(&out, &r)?;
            println!(
                "scores: median {} iqr {}{}; correlation flagged: {}",
                r.scores.median,
                r.scores.iqr,
                if r.scores.low_discrimination {
                    " (low discrimination)"
                } else {
                    ""
                },
                r.correlation.as_ref().is_some_and(|c| c.flagged)
            );
        }
        Cmd::Preregister {
            common,
            design,
            mode,
        } => {
            let mut d: AcceptedDesign = read_json(&design)?;
            let mode = match mode {
                ModeArg::Matrix => BundleMode::Matrix,
                ModeArg::CodeReference => BundleMode::CodeReference,
            };
            let out = common.out_dir("bundle");
            let digest = preregister(&mut d, &out, mode)?;
            println!("{digest}  {}", out.display());
        }
        Cmd::Verify {
            common,
            bundle,
            replay,
        } => {
            let report = verify_bundle(&bundle, replay)?;
            for c in &report.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            for w in &report.warnings {
                println!("WARN {w}");
            }
            if let Some(out) = &common.out {
                write_json(&out.join("verify.json"), &report)?;
            }
            if !report.ok() {
                bail!("bundle {} failed verification", bundle.display());
            }
        }
        Cmd::Randomize {
            common,
            bundle,
            stream,
        } => {
            let loaded = load_bundle(&bundle)?;
            loaded.verify_digest()?;
            let mut d = loaded.design()?;
            let seed = common.seed.context("give --seed for the official draw")?;
            let z = d.draw_official(RngSpec::with_stream(seed, stream))?;
            let rec = d.audit.last().context("draw not recorded")?.clone();
            append_draw(&bundle, &rec)?;
            let out = common.out_dir(".");
            fs::create_dir_all(&out)?;
            let path = out.join(format!("assignment_{}.csv", rec.sequence));
            write_assignment(&path, &z)?;
            println!(
                "draw {} -> pool index {} -> {}",
                rec.sequence,
                rec.pool_index,
                path.display()
            );
        }
        Cmd::Test {
            common,
            bundle,
            outcomes,
            column,
            pool_index,
        } => {
            let study = Study::load(common.config.as_deref())?;
            let ctx = study.context()?;
            let loaded = load_bundle(&bundle)?;
            loaded.verify_digest()?;
            let d = loaded.design()?;
            let idx = match pool_index {
                Some(i) => i,
                None => {
                    read_audit(&bundle)?
                        .last()
                        .context("no official draw in the audit trail; give --pool-index")?
                        .pool_index
                }
            };
            let z = d
                .pool
                .candidates
                .get(idx)
                .context("pool index out of range")?;
            let y = read_outcomes(&outcomes, column.as_deref())?;
            let t = fisher_test(&d, &ctx, &y, z, &study.statistic)?;
            if let Some(out) = &common.out {
                write_json(&out.join("test.json"), &t)?;
            }
            println!(
                "observed {:.6}  p = {:.4}  ({} accepted allocations)",
                t.observed,
                t.p_value,
                t.null_stats.len()
            );
        }
        Cmd::Simulate {
            common,
            preset: name,
            scale,
            replicates,
            pool_size,
        } => {
            let mut cfg: ExperimentConfig = match (&name, &common.config) {
                (Some(p), None) => preset(
                    p,
                    match scale {
                        ScaleArg::Desk => Scale::Desk,
                        ScaleArg::Full => Scale::Full,
                    },
                )
                .with_context(|| format!("presets: {}", PRESETS.join(", ")))?,
                (None, Some(c)) => read_json(c)?,
                _ => bail!("give exactly one of --preset or --config"),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            if let Some(m) = pool_size {
                cfg.pool_size = m;
            }
            let out = common.out_dir(&format!("results/{}", cfg.name));
            let table = run_experiment(&cfg)?;
            table.write_dir(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            print_summary(&table);
            println!("-> {}", out.display());
        }
        Cmd::Serve {
            common: _,
            host,
            port,
            workdir,
            static_dir,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .context("bad --host/--port")?;
            let rt = tokio::runtime::Runtime::new()?;
            println!("serving on http://{addr} (workdir {})", workdir.display());
            rt.block_on(igr_service::serve(
                addr,
                igr_service::ServiceConfig {
                    workdir,
                    static_dir,
                },
            ))?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse().cmd)
}
