//! Genetic refinement of a candidate pool.
//!
//! Individuals reproduce on per-individual random streams derived from
//! `(seed, generation, index)`, so results do not depend on thread count.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AllocationPool, Candidate, GroupDesign, Provenance};
use crate::error::{invalid, Error, Result};
use crate::fitness::{aggregate, score_metric_lenient, Aggregator, FitnessConfig, MinMax};
use crate::metrics::{DesignContext, MetricEvaluator};
use crate::par;
use crate::rng::{IgrRng, RngSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    #[default]
    StrictRepair,
    ToleranceBand,
}

fn default_generations() -> usize {
    50
}
fn default_crossover() -> f64 {
    0.9
}
fn default_elite() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    #[serde(default = "default_generations")]
    pub generations: usize,
    /// Defaults to the pool size capped at 1000.
    #[serde(default)]
    pub population: Option<usize>,
    /// Per-entry rate; defaults to `1 / N`.
    #[serde(default)]
    pub mutation_rate: Option<f64>,
    #[serde(default = "default_crossover")]
    pub crossover_rate: f64,
    #[serde(default = "default_elite")]
    pub elite_fraction: f64,
    #[serde(default)]
    pub constraint: ConstraintMode,
    #[serde(default)]
    pub tolerance: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            generations: default_generations(),
            population: None,
            mutation_rate: None,
            crossover_rate: default_crossover(),
            elite_fraction: default_elite(),
            constraint: ConstraintMode::default(),
            tolerance: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.population, Some(p) if p < 2) {
            return invalid("population size must be at least 2");
        }
        for (name, v) in [
            ("crossover_rate", Some(self.crossover_rate)),
            ("elite_fraction", Some(self.elite_fraction)),
            ("mutation_rate", self.mutation_rate),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return invalid(format!("{name}={v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    #[serde(with = "crate::ext::real")]
    pub best: f64,
    #[serde(with = "crate::ext::real")]
    pub median: f64,
    pub finite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveOutput {
    pub pool: AllocationPool,
    /// Evolution fitness of each output member, aligned with `pool`.
    #[serde(with = "crate::ext::reals")]
    pub fitness: Vec<f64>,
    pub trace: Vec<GenerationStats>,
    pub stopped_early: Option<String>,
}

impl EvolveOutput {
    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["generation", "best", "median", "finite"])?;
        for t in &self.trace {
            out.write_record([
                t.generation.to_string(),
                t.best.to_string(),
                t.median.to_string(),
                t.finite.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores candidates with ranges fixed on the initial pool; errors become `+∞`.
struct Scorer<'a> {
    cfg: FitnessConfig,
    ranges: Vec<MinMax>,
    ctx: &'a DesignContext,
}

impl<'a> Scorer<'a> {
    fn new(fitness: &FitnessConfig, pool: &[Candidate], ctx: &'a DesignContext) -> Result<Self> {
        fitness.validate()?;
        // Children may break the gate; it is checked again on output.
        let cfg = if fitness.aggregator == Aggregator::Gated {
            let score = fitness
                .metrics
                .iter()
                .find(|m| !m.metric.is_gate())
                .unwrap();
            FitnessConfig::identity(score.metric.clone())
        } else {
            fitness.clone()
        };
        let per_metric = cfg
            .metrics
            .iter()
            .map(|m| score_metric_lenient(pool, &m.metric, ctx))
            .collect::<Result<Vec<_>>>()?;
        let ranges = cfg.ranges(&per_metric);
        Ok(Self { cfg, ranges, ctx })
    }

    fn score(&self, cands: &[Candidate]) -> Result<Vec<f64>> {
        let evals = self
            .cfg
            .metrics
            .iter()
            .map(|m| MetricEvaluator::new(&m.metric, self.ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok(par::map_slice(cands, |c| {
            let row: Vec<f64> = evals
                .iter()
                .map(|e| e.eval(c).unwrap_or(f64::INFINITY))
                .collect();
            aggregate(&row, &self.cfg, &self.ranges).unwrap_or(f64::INFINITY)
        }))
    }
}

struct Shape {
    arms: u8,
    /// Target per-arm (labels) or per-group (group designs) sizes.
    sizes: Vec<usize>,
    salient: Option<Vec<bool>>,
    mutation_rate: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        return f64::INFINITY;
    }
    f.sort_by(f64::total_cmp);
    let n = f.len();
    if n % 2 == 1 {
        f[n / 2]
    } else {
        0.5 * (f[n / 2 - 1] + f[n / 2])
    }
}

fn stats(generation: usize, fit: &[f64]) -> GenerationStats {
    GenerationStats {
        generation,
        best: fit.iter().copied().fold(f64::INFINITY, f64::min),
        median: median(fit),
        finite: fit.iter().filter(|v| v.is_finite()).count(),
    }
}

fn tournament(fit: &[f64], rng: &mut IgrRng) -> usize {
    let a = rng.random_range(0..fit.len());
    let b = rng.random_range(0..fit.len());
    if fit[b] < fit[a] {
        b
    } else {
        a
    }
}

/// Evolve `pool` and return the deduplicated archive of every generation,
/// sorted by fitness (pool order breaks ties). With a gated fitness, members
/// failing the gate are dropped from the output.
pub fn evolve(
    pool: &AllocationPool,
    fitness: &FitnessConfig,
    ctx: &DesignContext,
    cfg: &GaConfig,
    rng: RngSpec,
) -> Result<EvolveOutput> {
    cfg.validate()?;
    if pool.is_empty() {
        return invalid("cannot evolve an empty pool");
    }
    let initial = crate::allocation::dedup(pool.clone());
    let scorer = Scorer::new(fitness, &initial.candidates, ctx)?;
    let init_fit = scorer.score(&initial.candidates)?;
    let shape = shape_of(&initial.candidates[0], ctx, cfg)?;

    let pop_size = cfg.population.unwrap_or(initial.len().min(1000)).max(2);
    let order = crate::fitness::rank(&init_fit);
    let mut pop: Vec<Candidate> = order
        .iter()
        .take(pop_size)
        .map(|&i| initial.candidates[i].clone())
        .collect();
    let mut fit: Vec<f64> = order.iter().take(pop_size).map(|&i| init_fit[i]).collect();

    let mut archive: Vec<(Candidate, f64)> = Vec::new();
    let mut seen: HashSet<Candidate> = HashSet::new();
    for (c, &f) in initial.candidates.iter().zip(&init_fit) {
        if seen.insert(c.clone()) {
            archive.push((c.clone(), f));
        }
    }
    let mut trace = vec![stats(0, &fit)];
    let mut stopped_early = None;
    let n_elite = ((cfg.elite_fraction * pop_size as f64).ceil() as usize).clamp(1, pop_size);

    for g in 1..=cfg.generations {
        if fit.len() < 2 {
            // a population of one can only clone itself
            pop.push(pop[0].clone());
            fit.push(fit[0]);
        }
        let ranked = crate::fitness::rank(&fit);
        let n_children = pop_size - n_elite;
        let children: Vec<Candidate> = par::map_range(n_children, |c| {
            let mut r = rng.derive(&[g as u64, c as u64]).rng();
            let a = &pop[tournament(&fit, &mut r)];
            let b = &pop[tournament(&fit, &mut r)];
            let mut child = if r.random::<f64>() < cfg.crossover_rate {
                crossover(a, b, &mut r)
            } else {
                a.clone()
            };
            mutate(&mut child, &shape, &mut r);
            repair(&mut child, &shape, cfg, &mut r);
            canonical(child)
        });
        let child_fit = scorer.score(&children)?;
        if !children.is_empty() && child_fit.iter().all(|f| !f.is_finite()) {
            stopped_early = Some(format!(
                "generation {g}: every child scored +inf; keeping generation {}",
                g - 1
            ));
            break;
        }
        let mut next: Vec<Candidate> = ranked
            .iter()
            .take(n_elite)
            .map(|&i| pop[i].clone())
            .collect();
        let mut next_fit: Vec<f64> = ranked.iter().take(n_elite).map(|&i| fit[i]).collect();
        next.extend(children);
        next_fit.extend(child_fit);
        for (c, &f) in next.iter().zip(&next_fit) {
            if seen.insert(c.clone()) {
                archive.push((c.clone(), f));
            }
        }
        pop = next;
        fit = next_fit;
        trace.push(stats(g, &fit));
    }

    let mut idx: Vec<usize> = (0..archive.len()).collect();
    idx.sort_by(|&a, &b| archive[a].1.total_cmp(&archive[b].1));
    let gate = fitness
        .gate_metric()
        .filter(|_| fitness.aggregator == Aggregator::Gated);
    let gate_eval = gate.map(|m| MetricEvaluator::new(m, ctx)).transpose()?;
    let keep: Vec<bool> = par::map_slice(&idx, |&i| match &gate_eval {
        Some(e) => e.eval(&archive[i].0).map(|v| v == 1.0).unwrap_or(false),
        None => true,
    });
    let mut candidates = Vec::new();
    let mut out_fit = Vec::new();
    for (&i, k) in idx.iter().zip(keep) {
        if k {
            candidates.push(archive[i].0.clone());
            out_fit.push(archive[i].1);
        }
    }
    if candidates.is_empty() {
        return Err(Error::Invalid(
            "no evolved allocation passes the gate metric".into(),
        ));
    }
    let provenance = Provenance {
        mechanism: format!("evolved({})", pool.provenance.mechanism),
        rng: Some(rng),
        parameters: serde_json::json!({
            "source": pool.provenance,
            "ga": cfg,
            "fitness": fitness,
        }),
        drawn: archive.len(),
        before_dedup: Some(archive.len()),
        after_dedup: Some(candidates.len()),
        appended_mirrors: 0,
        replayable: false,
    };
    Ok(EvolveOutput {
        pool: AllocationPool::new(candidates, provenance)?,
        fitness: out_fit,
        trace,
        stopped_early,
    })
}

fn shape_of(c: &Candidate, ctx: &DesignContext, cfg: &GaConfig) -> Result<Shape> {
    let len = c.len();
    let mutation_rate = cfg.mutation_rate.unwrap_or(1.0 / len as f64);
    Ok(match c {
        Candidate::Labels(a) => Shape {
            arms: a.arms,
            sizes: a.arm_sizes(),
            salient: None,
            mutation_rate,
        },
        Candidate::Groups(g) => Shape {
            arms: g.arms,
            sizes: g.group_sizes(),
            salient: ctx
                .covariates
                .salient()
                .ok()
                .map(|s| s.iter().map(|&v| v == 1.0).collect()),
            mutation_rate,
        },
    })
}

fn crossover(a: &Candidate, b: &Candidate, r: &mut IgrRng) -> Candidate {
    match (a, b) {
        (Candidate::Labels(x), Candidate::Labels(y)) => {
            let cut = r.random_range(1..x.labels.len().max(2));
            let mut labels = x.labels[..cut.min(x.labels.len())].to_vec();
            labels.extend_from_slice(&y.labels[cut.min(y.labels.len())..]);
            Candidate::Labels(Allocation {
                labels,
                arms: x.arms,
                level: x.level,
            })
        }
        (Candidate::Groups(x), Candidate::Groups(y)) => {
            let cut = r.random_range(1..x.group_of.len().max(2));
            let mut group_of = x.group_of[..cut.min(x.group_of.len())].to_vec();
            group_of.extend_from_slice(&y.group_of[cut.min(y.group_of.len())..]);
            Candidate::Groups(GroupDesign {
                group_of,
                arm_of_group: x.arm_of_group.clone(),
                arms: x.arms,
            })
        }
        _ => a.clone(),
    }
}

fn mutate(c: &mut Candidate, shape: &Shape, r: &mut IgrRng) {
    match c {
        Candidate::Labels(a) => {
            for l in a.labels.iter_mut() {
                if r.random::<f64>() < shape.mutation_rate {
                    let other = r.random_range(0..shape.arms - 1);
                    *l = if other >= *l { other + 1 } else { other };
                }
            }
        }
        Candidate::Groups(g) => {
            let n = g.group_of.len();
            for i in 0..n {
                if r.random::<f64>() >= shape.mutation_rate {
                    continue;
                }
                // swap with a unit in another group, matching the salient
                // attribute when one is declared
                let partners: Vec<usize> = (0..n)
                    .filter(|&j| {
                        g.group_of[j] != g.group_of[i]
                            && shape.salient.as_ref().is_none_or(|s| s[j] == s[i])
                    })
                    .collect();
                if let Some(&j) = partners.choose(r) {
                    g.group_of.swap(i, j);
                }
            }
        }
    }
}

/// Move random members out of over-full bins into under-full ones until
/// every bin size lies within `target ± slack`.
fn rebalance(bins: &mut [u32], targets: &[usize], slack: usize, r: &mut IgrRng) {
    let k = targets.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &b in bins.iter() {
            sizes[b as usize] += 1;
        }
        let over: Vec<usize> = (0..k).filter(|&b| sizes[b] > targets[b] + slack).collect();
        let under: Vec<usize> = (0..k).filter(|&b| sizes[b] + slack < targets[b]).collect();
        let (src, dst) = match (over.first(), under.first()) {
            (Some(&s), Some(&d)) => (s, d),
            (Some(&s), None) => {
                let d = (0..k)
                    .filter(|&b| sizes[b] < targets[b] + slack)
                    .collect::<Vec<_>>();
                match d.choose(r) {
                    Some(&d) => (s, d),
                    None => return,
                }
            }
            (None, Some(&d)) => {
                let s = (0..k)
                    .filter(|&b| sizes[b] + slack > targets[b])
                    .collect::<Vec<_>>();
                match s.choose(r) {
                    Some(&s) => (s, d),
                    None => return,
                }
            }
            (None, None) => return,
        };
        let members: Vec<usize> = (0..bins.len())
            .filter(|&i| bins[i] as usize == src)
            .collect();
        let &i = members.choose(r).expect("over-full bin has members");
        bins[i] = dst as u32;
    }
}

fn repair(c: &mut Candidate, shape: &Shape, cfg: &GaConfig, r: &mut IgrRng) {
    let slack = match cfg.constraint {
        ConstraintMode::StrictRepair => 0,
        ConstraintMode::ToleranceBand => cfg.tolerance,
    };
    match c {
        Candidate::Labels(a) => {
            let mut bins: Vec<u32> = a.labels.iter().map(|&l| l as u32).collect();
            rebalance(&mut bins, &shape.sizes, slack, r);
            a.labels = bins.into_iter().map(|b| b as u8).collect();
        }
        Candidate::Groups(g) => rebalance(&mut g.group_of, &shape.sizes, slack, r),
    }
}

fn canonical(c: Candidate) -> Candidate {
    match c {
        Candidate::Groups(g) => Candidate::Groups(g.canonical()),
        other => other,
    }
}
