//! Evaluation diagnostics: score spread, metric trade-offs and pairwise
//! assignment correlation. Quantiles use linear interpolation between order
//! statistics (type 7).

use serde::{Deserialize, Serialize};

use crate::allocation::{Candidate, Level};
use crate::design::AcceptedDesign;
use crate::error::{invalid, Result};
use crate::fitness::PoolScores;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the last bin is closed.
    pub fn equal_width(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + w * i as f64 })
            .collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            counts[bin_of(v, lo, hi, bins)] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let b = ((v - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

/// Type-7 quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub infinite_count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub iqr: f64,
    pub distinct: usize,
    /// Finite scores only; `infinite_count` holds the rest.
    pub histogram: Histogram,
    pub low_discrimination: bool,
}

/// Freedman–Diaconis bin count, falling back to Sturges when the IQR is 0.
fn fd_bins(sorted: &[f64], iqr: f64) -> usize {
    let n = sorted.len();
    let range = sorted[n - 1] - sorted[0];
    if !(range > 0.0) {
        return 1;
    }
    if iqr > 0.0 {
        let w = 2.0 * iqr / (n as f64).cbrt();
        ((range / w).ceil() as usize).clamp(1, 10_000)
    } else {
        ((n as f64).log2().ceil() as usize + 1).max(1)
    }
}

pub fn score_spread(scores: &[f64]) -> Result<ScoreSummary> {
    let mut f: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    if f.is_empty() {
        return invalid("no finite scores");
    }
    f.sort_by(f64::total_cmp);
    let q1 = quantile(&f, 0.25);
    let q3 = quantile(&f, 0.75);
    let iqr = q3 - q1;
    let mut distinct = 1;
    for w in f.windows(2) {
        if w[1] != w[0] {
            distinct += 1;
        }
    }
    let n = f.len();
    let histogram = Histogram::equal_width(&f, f[0], f[n - 1], fd_bins(&f, iqr));
    Ok(ScoreSummary {
        n: scores.len(),
        infinite_count: scores.len() - n,
        min: f[0],
        q1,
        median: quantile(&f, 0.5),
        q3,
        max: f[n - 1],
        iqr,
        distinct,
        histogram,
        low_discrimination: distinct < 10 || iqr == 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffGrid {
    pub edges_a: Vec<f64>,
    pub edges_b: Vec<f64>,
    /// `counts[i][j]`: allocations in bin `i` of A and bin `j` of B.
    pub counts: Vec<Vec<usize>>,
    #[serde(default)]
    pub accepted_counts: Option<Vec<Vec<usize>>>,
}

pub fn tradeoff_grid(
    a: &[f64],
    b: &[f64],
    bins: usize,
    mask: Option<&[bool]>,
) -> Result<TradeoffGrid> {
    if a.len() != b.len() {
        return invalid("trade-off score vectors differ in length");
    }
    if a.is_empty() {
        return invalid("trade-off grid needs at least one allocation");
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return invalid("trade-off grid needs finite scores");
    }
    if let Some(m) = mask {
        if m.len() < a.len() {
            return invalid("accept mask is shorter than the score vectors");
        }
    }
    let bins = bins.max(1);
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (la, ha) = range(a);
    let (lb, hb) = range(b);
    let mut counts = vec![vec![0usize; bins]; bins];
    let mut acc = mask.map(|_| vec![vec![0usize; bins]; bins]);
    for i in 0..a.len() {
        let (x, y) = (bin_of(a[i], la, ha, bins), bin_of(b[i], lb, hb, bins));
        counts[x][y] += 1;
        if let (Some(acc), Some(m)) = (acc.as_mut(), mask) {
            if m[i] {
                acc[x][y] += 1;
            }
        }
    }
    let edges = |lo: f64, hi: f64| {
        (0..=bins)
            .map(|i| {
                if i == bins {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / bins as f64
                }
            })
            .collect()
    };
    Ok(TradeoffGrid {
        edges_a: edges(la, ha),
        edges_b: edges(lb, hb),
        counts,
        accepted_counts: acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    Pearson,
    CenteredCoassignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kind: CorrelationKind,
    /// Level at which assignments were compared.
    pub level: Level,
    pub n_units: usize,
    pub pairs: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
    /// Units whose assignment never varies across the accepted set.
    pub degenerate_units: Vec<usize>,
    pub flagged: bool,
}

struct Bits {
    /// `sets[unit][arm]` bitset over accepted allocations.
    sets: Vec<Vec<Vec<u64>>>,
}

fn bitsets(rows: &[Vec<u8>], arms: usize) -> Bits {
    let m = rows.len();
    let n = rows[0].len();
    let words = m.div_ceil(64);
    let mut sets = vec![vec![vec![0u64; words]; arms]; n];
    for (r, z) in rows.iter().enumerate() {
        for (i, &a) in z.iter().enumerate() {
            sets[i][a as usize][r / 64] |= 1 << (r % 64);
        }
    }
    Bits { sets }
}

fn common(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

fn assignment_rows(accepted: &[&Candidate]) -> (Vec<Vec<u8>>, Level) {
    let level = accepted[0].level();
    let rows = accepted
        .iter()
        .map(|c| match c {
            Candidate::Labels(a) => a.labels.clone(),
            Candidate::Groups(g) => g.unit_arms(),
        })
        .collect();
    (rows, level)
}

/// Correlation value of every unordered pair `(i, j)`, `i < j`, in row-major
/// order, plus the indices of constant units.
pub fn pair_values(accepted: &[&Candidate]) -> Result<(CorrelationKind, Vec<f64>, Vec<usize>)> {
    if accepted.len() < 2 {
        return invalid("pairwise correlation needs at least two accepted allocations");
    }
    let (rows, _) = assignment_rows(accepted);
    let arms = accepted[0].arms() as usize;
    let m = rows.len() as f64;
    let n = rows[0].len();
    let bits = bitsets(&rows, arms);
    let counts: Vec<Vec<u32>> = bits
        .sets
        .iter()
        .map(|u| {
            u.iter()
                .map(|s| s.iter().map(|w| w.count_ones()).sum())
                .collect()
        })
        .collect();
    let degenerate: Vec<usize> = (0..n)
        .filter(|&i| counts[i].iter().any(|&c| c as f64 == m))
        .collect();
    let kind = if arms == 2 {
        CorrelationKind::Pearson
    } else {
        CorrelationKind::CenteredCoassignment
    };
    let baseline = {
        let per_arm = n as f64 / arms as f64;
        (per_arm - 1.0) / (n as f64 - 1.0)
    };
    let vals: Vec<Vec<f64>> = par::map_range(n, |i| {
        ((i + 1)..n)
            .map(|j| match kind {
                CorrelationKind::Pearson => {
                    let pi = counts[i][1] as f64 / m;
                    let pj = counts[j][1] as f64 / m;
                    let denom = (pi * (1.0 - pi) * pj * (1.0 - pj)).sqrt();
                    if denom == 0.0 {
                        1.0
                    } else {
                        let pij = common(&bits.sets[i][1], &bits.sets[j][1]) as f64 / m;
                        ((pij - pi * pj) / denom).clamp(-1.0, 1.0)
                    }
                }
                CorrelationKind::CenteredCoassignment => {
                    let same: u32 = (0..arms)
                        .map(|a| common(&bits.sets[i][a], &bits.sets[j][a]))
                        .sum();
                    same as f64 / m - baseline
                }
            })
            .collect()
    });
    Ok((kind, vals.into_iter().flatten().collect(), degenerate))
}

pub fn pairwise_assignment_correlation(accepted: &[&Candidate]) -> Result<CorrelationReport> {
    let (kind, vals, degenerate) = pair_values(accepted)?;
    let n_units = accepted[0].len();
    let pairs = vals.len();
    let mean = if pairs == 0 {
        0.0
    } else {
        vals.iter().sum::<f64>() / pairs as f64
    };
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let perfect = kind == CorrelationKind::Pearson && vals.iter().any(|v| v.abs() >= 1.0 - 1e-12);
    Ok(CorrelationReport {
        kind,
        level: accepted[0].level(),
        n_units,
        pairs,
        mean,
        min,
        max,
        histogram: Histogram::equal_width(&vals, -1.0, 1.0, 40),
        flagged: perfect || !degenerate.is_empty(),
        degenerate_units: degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceCounts {
    pub pool: usize,
    pub accepted: usize,
    pub appended_mirrors: usize,
    #[serde(with = "crate::ext::real")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffEntry {
    pub metric_a: String,
    pub metric_b: String,
    pub grid: TradeoffGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub scores: ScoreSummary,
    pub correlation: Option<CorrelationReport>,
    pub tradeoffs: Vec<TradeoffEntry>,
    pub acceptance: AcceptanceCounts,
}

/// Full report for a restricted design. Trade-off grids are built for every
/// pair of metrics in `per_metric` whose values are all finite.
pub fn diagnose(
    design: &AcceptedDesign,
    per_metric: Option<&PoolScores>,
    bins: usize,
) -> Result<DiagnosticsReport> {
    let scores = score_spread(&design.scores)?;
    let accepted = design.accepted();
    let correlation = if accepted.len() >= 2 {
        Some(pairwise_assignment_correlation(&accepted)?)
    } else {
        None
    };
    let mut tradeoffs = Vec::new();
    if let Some(pm) = per_metric {
        if pm.fitness.len() != design.pool.len() {
            return invalid(format!(
                "per-metric scores cover {} of {} pool members; extend them to appended mirrors first",
                pm.fitness.len(),
                design.pool.len()
            ));
        }
        for a in 0..pm.per_metric.len() {
            for b in (a + 1)..pm.per_metric.len() {
                if let Ok(grid) = tradeoff_grid(
                    &pm.per_metric[a],
                    &pm.per_metric[b],
                    bins,
                    Some(&design.accept_mask),
                ) {
                    tradeoffs.push(TradeoffEntry {
                        metric_a: pm.metric_names[a].clone(),
                        metric_b: pm.metric_names[b].clone(),
                        grid,
                    });
                }
            }
        }
    }
    Ok(DiagnosticsReport {
        scores,
        correlation,
        tradeoffs,
        acceptance: AcceptanceCounts {
            pool: design.pool.len(),
            accepted: design.n_accepted(),
            appended_mirrors: design.pool.provenance.appended_mirrors,
            threshold: design.threshold,
        },
    })
}
