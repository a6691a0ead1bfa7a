//! Inspection metrics. Every metric maps an allocation (plus study inputs) to
//! a score where smaller is better.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::allocation::{Candidate, GroupDesign};
use crate::data::{ClusterMap, CovariateMatrix, InterferenceNetwork};
use crate::error::{invalid, Error, Result};

/// Study inputs shared by all metrics of a design problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignContext {
    pub covariates: CovariateMatrix,
    #[serde(default)]
    pub clusters: Option<ClusterMap>,
    #[serde(default)]
    pub network: Option<InterferenceNetwork>,
}

impl DesignContext {
    pub fn new(covariates: CovariateMatrix) -> Self {
        Self {
            covariates,
            clusters: None,
            network: None,
        }
    }

    pub fn n_units(&self) -> usize {
        self.covariates.n_units()
    }

    pub fn unit_arms(&self, c: &Candidate) -> Result<Vec<u8>> {
        let arms = c.unit_arms(self.clusters.as_ref())?;
        if arms.len() != self.n_units() {
            return invalid(format!(
                "allocation covers {} units, covariates have {}",
                arms.len(),
                self.n_units()
            ));
        }
        Ok(arms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureSpec {
    /// Exposed when at least one neighbor is treated.
    OneNeighbor,
    /// Exposed when strictly more than `q · |N(i)|` neighbors are treated.
    FractionQ { q: f64 },
}

impl ExposureSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExposureSpec::OneNeighbor => Ok(()),
            ExposureSpec::FractionQ { q } if (0.0..1.0).contains(q) => Ok(()),
            ExposureSpec::FractionQ { q } => {
                invalid(format!("exposure fraction q={q} outside [0, 1)"))
            }
        }
    }

    fn threshold(&self) -> f64 {
        match self {
            ExposureSpec::OneNeighbor => 0.0,
            ExposureSpec::FractionQ { q } => *q,
        }
    }

    /// Exposure indicator of unit `i` given unit-level binary arms.
    pub fn exposed(&self, net: &InterferenceNetwork, z: &[u8], i: usize) -> bool {
        let nbrs = net.neighbors(i);
        if nbrs.is_empty() {
            return false;
        }
        let treated = nbrs.iter().filter(|&&j| z[j as usize] != 0).count();
        treated as f64 > self.threshold() * nbrs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum Metric {
    SumMaxAbsSmd {
        #[serde(default)]
        exclude_salient: bool,
    },
    MaxMahalanobis {
        #[serde(default)]
        exclude_salient: bool,
    },
    DesiredComps {
        compositions: Vec<f64>,
    },
    FracCtrlExposed {
        exposure: ExposureSpec,
    },
    InvMinEuclidean,
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::SumMaxAbsSmd {
                exclude_salient: true,
            } => "SumMaxAbsSMD-G".into(),
            Metric::SumMaxAbsSmd { .. } => "SumMaxAbsSMD".into(),
            Metric::MaxMahalanobis {
                exclude_salient: true,
            } => "MaxMahalanobis-G".into(),
            Metric::MaxMahalanobis { .. } => "MaxMahalanobis".into(),
            Metric::DesiredComps { .. } => "DesiredComps".into(),
            Metric::FracCtrlExposed { .. } => "FracCtrlExposed".into(),
            Metric::InvMinEuclidean => "InvMinEuclideanDist".into(),
        }
    }

    /// Gate metrics return 1 for admissible allocations and 0 otherwise.
    pub fn is_gate(&self) -> bool {
        matches!(self, Metric::DesiredComps { .. })
    }

    /// Whether the metric is invariant under relabeling arms.
    pub fn is_symmetric(&self) -> bool {
        !matches!(self, Metric::FracCtrlExposed { .. })
    }

    /// Stable key for caching per-metric score vectors.
    pub fn cache_key(&self) -> String {
        serde_json::to_string(self).expect("metric serializes")
    }
}

/// A named metric value; `+∞` is allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: String,
    #[serde(with = "crate::ext::real")]
    pub value: f64,
}

/// Fraction of `group`'s members carrying the salient attribute.
pub fn composition(gd: &GroupDesign, x: &CovariateMatrix, group: usize) -> Result<f64> {
    let salient = x.salient()?;
    if gd.group_of.len() != salient.len() {
        return invalid("group design and covariates cover different units");
    }
    let (mut n, mut with) = (0usize, 0usize);
    for i in gd.members(group) {
        n += 1;
        with += (salient[i] == 1.0) as usize;
    }
    if n == 0 {
        return invalid(format!("group {group} is empty"));
    }
    Ok(with as f64 / n as f64)
}

fn compositions_of(gd: &GroupDesign, salient: &[f64]) -> Vec<f64> {
    let g = gd.n_groups();
    let mut n = vec![0usize; g];
    let mut with = vec![0usize; g];
    for (i, &h) in gd.group_of.iter().enumerate() {
        n[h as usize] += 1;
        with[h as usize] += (salient[i] == 1.0) as usize;
    }
    n.iter()
        .zip(&with)
        .map(|(&n, &w)| {
            if n == 0 {
                f64::NAN
            } else {
                w as f64 / n as f64
            }
        })
        .collect()
}

pub(crate) fn matches_composition(rho: f64, c: f64) -> bool {
    (rho - c).abs() < 1e-9
}

/// 1 when every group has a listed composition and every listed composition
/// has at least one control and one treated group; 0 otherwise.
pub fn desired_comps(gd: &GroupDesign, x: &CovariateMatrix, comps: &[f64]) -> Result<f64> {
    let salient = x.salient()?;
    if gd.group_of.len() != salient.len() {
        return invalid("group design and covariates cover different units");
    }
    Ok(desired_comps_raw(gd, salient, comps))
}

fn desired_comps_raw(gd: &GroupDesign, salient: &[f64], comps: &[f64]) -> f64 {
    let rhos = compositions_of(gd, salient);
    let mut control = vec![0usize; comps.len()];
    let mut treated = vec![0usize; comps.len()];
    for (h, &rho) in rhos.iter().enumerate() {
        let Some(l) = comps.iter().position(|&c| matches_composition(rho, c)) else {
            return 0.0;
        };
        if gd.arm_of_group[h] == 0 {
            control[l] += 1;
        } else {
            treated[l] += 1;
        }
    }
    let ok = control.iter().zip(&treated).all(|(&c, &t)| c > 0 && t > 0);
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Unit partition used by balance metrics: arms for label allocations,
/// groups for group designs.
fn partition(c: &Candidate, ctx: &DesignContext) -> Result<(Vec<u32>, usize)> {
    match c {
        Candidate::Groups(g) => {
            if g.group_of.len() != ctx.n_units() {
                return invalid("group design and covariates cover different units");
            }
            Ok((g.group_of.clone(), g.n_groups()))
        }
        Candidate::Labels(a) => {
            let z = ctx.unit_arms(c)?;
            Ok((z.into_iter().map(u32::from).collect(), a.arms as usize))
        }
    }
}

struct BlockStats {
    counts: Vec<usize>,
    /// means[b][j]
    means: Vec<Vec<f64>>,
}

fn block_stats(
    blocks: &[u32],
    n_blocks: usize,
    cols: &[&[f64]],
    min_size: usize,
) -> Result<BlockStats> {
    let mut counts = vec![0usize; n_blocks];
    for &b in blocks {
        counts[b as usize] += 1;
    }
    if n_blocks < 2 {
        return invalid("balance metrics need at least two arms or groups");
    }
    if let Some(b) = counts.iter().position(|&n| n < min_size) {
        return invalid(format!(
            "arm/group {b} has {} members; at least {min_size} required",
            counts[b]
        ));
    }
    let mut sums = vec![vec![0.0; cols.len()]; n_blocks];
    for (i, &b) in blocks.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            sums[b as usize][j] += col[i];
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(BlockStats { counts, means })
}

fn block_variances(blocks: &[u32], stats: &BlockStats, cols: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut ss = vec![vec![0.0; cols.len()]; stats.counts.len()];
    for (i, &b) in blocks.iter().enumerate() {
        for (j, col) in cols.iter().enumerate() {
            let d = col[i] - stats.means[b as usize][j];
            ss[b as usize][j] += d * d;
        }
    }
    ss.into_iter()
        .zip(&stats.counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / (n as f64 - 1.0)).collect())
        .collect()
}

fn smd_from_blocks(blocks: &[u32], n_blocks: usize, cols: &[&[f64]]) -> Result<f64> {
    let stats = block_stats(blocks, n_blocks, cols, 2)?;
    let vars = block_variances(blocks, &stats, cols);
    let mut total = 0.0;
    for j in 0..cols.len() {
        let mut worst = 0.0f64;
        for a in 0..n_blocks {
            for b in (a + 1)..n_blocks {
                let diff = (stats.means[a][j] - stats.means[b][j]).abs();
                let pooled = vars[a][j] + vars[b][j];
                let v = if pooled == 0.0 {
                    if diff == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    diff / pooled.sqrt()
                };
                worst = worst.max(v);
            }
        }
        total += worst;
    }
    Ok(total)
}

/// Sum over covariates of the largest absolute standardized mean difference
/// across all pairs of arms (or groups).
pub fn smd_summaxabs(c: &Candidate, ctx: &DesignContext, exclude_salient: bool) -> Result<f64> {
    let (blocks, n_blocks) = partition(c, ctx)?;
    let cols: Vec<&[f64]> = ctx
        .covariates
        .balance_columns(exclude_salient)
        .into_iter()
        .map(|c| c.values.as_slice())
        .collect();
    smd_from_blocks(&blocks, n_blocks, &cols)
}

/// Inverse of the full-sample covariance of `cols`, ridge-regularized when
/// the covariance is (numerically) singular.
pub fn inverse_covariance(cols: &[&[f64]]) -> Result<DMatrix<f64>> {
    let p = cols.len();
    if p == 0 {
        return invalid("no covariates available for the Mahalanobis metric");
    }
    let n = cols[0].len();
    let means: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let mut s = DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let v = (0..n)
                .map(|i| (cols[a][i] - means[a]) * (cols[b][i] - means[b]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    let scale = s.trace() / p as f64;
    if !(scale > 0.0) {
        return Err(Error::SingularCovariance);
    }
    let well_conditioned = |m: &DMatrix<f64>| {
        m.clone().cholesky().filter(|ch| {
            let l = ch.l_dirty();
            (0..p).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * scale)
        })
    };
    let chol = match well_conditioned(&s) {
        Some(c) => c,
        None => {
            let ridge = 1e-8 * scale;
            let mut r = s.clone();
            for i in 0..p {
                r[(i, i)] += ridge;
            }
            r.cholesky().ok_or(Error::SingularCovariance)?
        }
    };
    Ok(chol.inverse())
}

fn mahalanobis_from_blocks(
    blocks: &[u32],
    n_blocks: usize,
    cols: &[&[f64]],
    inv: &DMatrix<f64>,
) -> Result<f64> {
    let stats = block_stats(blocks, n_blocks, cols, 1)?;
    let p = cols.len();
    let mut worst = 0.0f64;
    let mut d = vec![0.0; p];
    for a in 0..n_blocks {
        for b in (a + 1)..n_blocks {
            for j in 0..p {
                d[j] = stats.means[a][j] - stats.means[b][j];
            }
            let mut q = 0.0;
            for r in 0..p {
                let mut row = 0.0;
                for c in 0..p {
                    row += inv[(r, c)] * d[c];
                }
                q += d[r] * row;
            }
            worst = worst.max(q);
        }
    }
    Ok(worst)
}

/// Largest Mahalanobis distance between arm (or group) mean vectors, using
/// the full-sample covariance.
pub fn mahalanobis_max(c: &Candidate, ctx: &DesignContext, exclude_salient: bool) -> Result<f64> {
    let cols: Vec<&[f64]> = ctx
        .covariates
        .balance_columns(exclude_salient)
        .into_iter()
        .map(|c| c.values.as_slice())
        .collect();
    let inv = inverse_covariance(&cols)?;
    let (blocks, n_blocks) = partition(c, ctx)?;
    mahalanobis_from_blocks(&blocks, n_blocks, &cols, &inv)
}

fn require_binary(z: &[u8]) -> Result<()> {
    if z.iter().any(|&v| v > 1) {
        return invalid("metric requires a binary allocation");
    }
    Ok(())
}

/// Share of control units that are exposed to treatment through neighbors.
pub fn frac_ctrl_exposed(z: &[u8], net: &InterferenceNetwork, exp: &ExposureSpec) -> Result<f64> {
    exp.validate()?;
    require_binary(z)?;
    if z.len() != net.n_units() {
        return invalid("allocation and network cover different units");
    }
    let mut controls = 0usize;
    let mut exposed = 0usize;
    for i in 0..z.len() {
        if z[i] == 0 {
            controls += 1;
            exposed += exp.exposed(net, z, i) as usize;
        }
    }
    if controls == 0 {
        return invalid("no control units");
    }
    Ok(exposed as f64 / controls as f64)
}

/// Reciprocal of the smallest squared distance between a treated and a
/// control unit; `+∞` when two such units share coordinates.
pub fn inv_min_euclidean(z: &[u8], coords: &[[f64; 2]]) -> Result<f64> {
    require_binary(z)?;
    if z.len() != coords.len() {
        return invalid("allocation and coordinates cover different units");
    }
    // Units sharing a location collapse to one point carrying the arms seen there.
    let mut points: HashMap<(u64, u64), (usize, u8)> = HashMap::new();
    let mut order: Vec<[f64; 2]> = Vec::new();
    for (i, c) in coords.iter().enumerate() {
        let key = (c[0].to_bits(), c[1].to_bits());
        let idx = order.len();
        let entry = points.entry(key).or_insert_with(|| {
            order.push(*c);
            (idx, 0)
        });
        entry.1 |= 1 << z[i];
    }
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for &(idx, mask) in points.values() {
        match mask {
            0b11 => return Ok(f64::INFINITY),
            0b10 => treated.push(order[idx]),
            _ => control.push(order[idx]),
        }
    }
    if treated.is_empty() || control.is_empty() {
        return invalid("both arms must be non-empty");
    }
    control.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut best = f64::INFINITY;
    for t in &treated {
        let start = control.partition_point(|c| c[0] < t[0]);
        for c in control[start..].iter() {
            let dx = c[0] - t[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (c[1] - t[1]).powi(2));
        }
        for c in control[..start].iter().rev() {
            let dx = t[0] - c[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dx * dx + (c[1] - t[1]).powi(2));
        }
    }
    Ok(1.0 / best)
}

/// A metric bound to its context with per-pool precomputation done once.
pub struct MetricEvaluator<'a> {
    metric: Metric,
    ctx: &'a DesignContext,
    cols: Vec<&'a [f64]>,
    inv_cov: Option<DMatrix<f64>>,
}

impl<'a> MetricEvaluator<'a> {
    pub fn new(metric: &Metric, ctx: &'a DesignContext) -> Result<Self> {
        let mut cols = Vec::new();
        let mut inv_cov = None;
        match metric {
            Metric::SumMaxAbsSmd { exclude_salient } => {
                if *exclude_salient {
                    ctx.covariates.salient()?;
                }
                cols = ctx
                    .covariates
                    .balance_columns(*exclude_salient)
                    .into_iter()
                    .map(|c| c.values.as_slice())
                    .collect();
            }
            Metric::MaxMahalanobis { exclude_salient } => {
                if *exclude_salient {
                    ctx.covariates.salient()?;
                }
                cols = ctx
                    .covariates
                    .balance_columns(*exclude_salient)
                    .into_iter()
                    .map(|c| c.values.as_slice())
                    .collect();
                inv_cov = Some(inverse_covariance(&cols)?);
            }
            Metric::DesiredComps { compositions } => {
                ctx.covariates.salient()?;
                if compositions.is_empty() {
                    return invalid("DesiredComps needs at least one composition");
                }
            }
            Metric::FracCtrlExposed { exposure } => {
                exposure.validate()?;
                match &ctx.network {
                    Some(net) if net.n_units() == ctx.n_units() => {}
                    Some(_) => return invalid("network and covariates cover different units"),
                    None => return invalid("FracCtrlExposed needs an interference network"),
                }
            }
            Metric::InvMinEuclidean => {
                if ctx.network.as_ref().and_then(|n| n.coords()).is_none() {
                    return invalid("InvMinEuclideanDist needs unit coordinates");
                }
            }
        }
        Ok(Self {
            metric: metric.clone(),
            ctx,
            cols,
            inv_cov,
        })
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn eval(&self, c: &Candidate) -> Result<f64> {
        match &self.metric {
            Metric::SumMaxAbsSmd { .. } => {
                let (blocks, n) = partition(c, self.ctx)?;
                smd_from_blocks(&blocks, n, &self.cols)
            }
            Metric::MaxMahalanobis { .. } => {
                let (blocks, n) = partition(c, self.ctx)?;
                mahalanobis_from_blocks(&blocks, n, &self.cols, self.inv_cov.as_ref().unwrap())
            }
            Metric::DesiredComps { compositions } => match c {
                Candidate::Groups(g) => desired_comps(g, &self.ctx.covariates, compositions),
                Candidate::Labels(_) => invalid("DesiredComps applies to group designs only"),
            },
            Metric::FracCtrlExposed { exposure } => {
                let z = self.ctx.unit_arms(c)?;
                frac_ctrl_exposed(&z, self.ctx.network.as_ref().unwrap(), exposure)
            }
            Metric::InvMinEuclidean => {
                let z = self.ctx.unit_arms(c)?;
                inv_min_euclidean(&z, self.ctx.network.as_ref().unwrap().coords().unwrap())
            }
        }
    }
}
