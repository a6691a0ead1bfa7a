//! Fitness aggregation and restriction rules.

use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPool, Candidate};
use crate::error::{invalid, Error, Result};
use crate::metrics::{DesignContext, Metric, MetricEvaluator};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    WeightedSum,
    Gated,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    PoolMinmax,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<serde_json::Value> for WeightedMetric {
    type Error = String;

    fn try_from(mut v: serde_json::Value) -> std::result::Result<Self, String> {
        let obj = v.as_object_mut().ok_or("metric entry must be an object")?;
        let weight = match obj.remove("weight") {
            None => one(),
            Some(w) => w.as_f64().ok_or("weight must be a number")?,
        };
        let metric = serde_json::from_value(v).map_err(|e| e.to_string())?;
        Ok(Self { metric, weight })
    }
}

/// A metric with its weight; serialized flat, e.g.
/// `{"metric": "inv_min_euclidean", "weight": 0.25}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value")]
pub struct WeightedMetric {
    #[serde(flatten)]
    pub metric: Metric,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitnessConfig {
    pub metrics: Vec<WeightedMetric>,
    pub aggregator: Aggregator,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Observed range of one metric over a pool, used for min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    #[serde(with = "crate::ext::real")]
    pub min: f64,
    #[serde(with = "crate::ext::real")]
    pub max: f64,
}

impl MinMax {
    pub fn of(values: &[f64]) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in values.iter().filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        Self { min, max }
    }

    pub fn scale(&self, v: f64) -> f64 {
        if !v.is_finite() {
            return v;
        }
        let span = self.max - self.min;
        if !(span > 0.0) {
            0.0
        } else {
            (v - self.min) / span
        }
    }
}

impl FitnessConfig {
    pub fn identity(metric: Metric) -> Self {
        Self {
            metrics: vec![WeightedMetric {
                metric,
                weight: 1.0,
            }],
            aggregator: Aggregator::Identity,
            normalization: Normalization::None,
        }
    }

    pub fn gated(gate: Metric, score: Metric) -> Self {
        Self {
            metrics: vec![
                WeightedMetric {
                    metric: gate,
                    weight: 1.0,
                },
                WeightedMetric {
                    metric: score,
                    weight: 1.0,
                },
            ],
            aggregator: Aggregator::Gated,
            normalization: Normalization::None,
        }
    }

    pub fn weighted(metrics: Vec<(Metric, f64)>) -> Self {
        Self {
            metrics: metrics
                .into_iter()
                .map(|(metric, weight)| WeightedMetric { metric, weight })
                .collect(),
            aggregator: Aggregator::WeightedSum,
            normalization: Normalization::PoolMinmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return invalid("fitness needs at least one metric");
        }
        match self.aggregator {
            Aggregator::WeightedSum => {
                if self
                    .metrics
                    .iter()
                    .any(|m| !(m.weight >= 0.0) || !m.weight.is_finite())
                {
                    return invalid("metric weights must be finite and non-negative");
                }
                if !(self.metrics.iter().map(|m| m.weight).sum::<f64>() > 0.0) {
                    return invalid("metric weights must sum to a positive value");
                }
            }
            Aggregator::Gated => {
                let gates = self.metrics.iter().filter(|m| m.metric.is_gate()).count();
                if self.metrics.len() != 2 || gates != 1 {
                    return invalid(
                        "gated fitness needs exactly one gate metric and one score metric",
                    );
                }
            }
            Aggregator::Identity => {
                if self.metrics.len() != 1 {
                    return invalid("identity fitness takes exactly one metric");
                }
            }
        }
        Ok(())
    }

    /// Symmetric under arm relabeling when every contributing metric is.
    pub fn is_symmetric(&self) -> bool {
        self.metrics
            .iter()
            .filter(|m| self.aggregator != Aggregator::WeightedSum || m.weight > 0.0)
            .all(|m| m.metric.is_symmetric())
    }

    pub fn gate_metric(&self) -> Option<&Metric> {
        self.metrics.iter().map(|m| &m.metric).find(|m| m.is_gate())
    }

    fn normalizes(&self) -> bool {
        self.aggregator == Aggregator::WeightedSum
            && self.normalization == Normalization::PoolMinmax
    }

    /// Ranges used for normalization; empty when none applies.
    pub fn ranges(&self, per_metric: &[Vec<f64>]) -> Vec<MinMax> {
        if self.normalizes() {
            per_metric.iter().map(|v| MinMax::of(v)).collect()
        } else {
            Vec::new()
        }
    }
}

/// Combine one allocation's metric values (in config order) into a fitness
/// score. `ranges` must come from [`FitnessConfig::ranges`].
pub fn aggregate(values: &[f64], cfg: &FitnessConfig, ranges: &[MinMax]) -> Result<f64> {
    if values.len() != cfg.metrics.len() {
        return invalid(format!(
            "{} metric values for {} configured metrics",
            values.len(),
            cfg.metrics.len()
        ));
    }
    match cfg.aggregator {
        Aggregator::Identity => Ok(values[0]),
        Aggregator::Gated => {
            let g = cfg
                .metrics
                .iter()
                .position(|m| m.metric.is_gate())
                .ok_or_else(|| Error::Invalid("gated fitness has no gate metric".into()))?;
            if values[g] == 1.0 {
                Ok(values[1 - g])
            } else {
                Ok(f64::INFINITY)
            }
        }
        Aggregator::WeightedSum => {
            let mut total = 0.0;
            for (l, (wm, &v)) in cfg.metrics.iter().zip(values).enumerate() {
                if v == f64::INFINITY {
                    return Ok(f64::INFINITY);
                }
                let s = if cfg.normalizes() {
                    ranges[l].scale(v)
                } else {
                    v
                };
                if wm.weight > 0.0 {
                    total += wm.weight * s;
                }
            }
            Ok(total)
        }
    }
}

/// Every metric's values over a pool, plus the aggregated fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolScores {
    pub metric_names: Vec<String>,
    #[serde(with = "nested")]
    pub per_metric: Vec<Vec<f64>>,
    pub ranges: Vec<MinMax>,
    #[serde(with = "crate::ext::reals")]
    pub fitness: Vec<f64>,
}

mod nested {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Row(#[serde(with = "crate::ext::reals")] Vec<f64>);

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|r| Row(r.clone())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        Ok(Vec::<Row>::deserialize(d)?
            .into_iter()
            .map(|r| r.0)
            .collect())
    }
}

/// Values of one metric for every pool member, in pool order.
pub fn score_metric(
    candidates: &[Candidate],
    metric: &Metric,
    ctx: &DesignContext,
) -> Result<Vec<f64>> {
    let eval = MetricEvaluator::new(metric, ctx)?;
    par::map_slice(candidates, |c| eval.eval(c))
        .into_iter()
        .collect()
}

/// Like [`score_metric`] but maps per-allocation errors to `+∞`.
pub fn score_metric_lenient(
    candidates: &[Candidate],
    metric: &Metric,
    ctx: &DesignContext,
) -> Result<Vec<f64>> {
    let eval = MetricEvaluator::new(metric, ctx)?;
    Ok(par::map_slice(candidates, |c| {
        eval.eval(c).unwrap_or(f64::INFINITY)
    }))
}

/// Aggregate precomputed per-metric vectors (config order) into fitness.
pub fn combine(per_metric: Vec<Vec<f64>>, cfg: &FitnessConfig) -> Result<PoolScores> {
    cfg.validate()?;
    if per_metric.len() != cfg.metrics.len() {
        return invalid("per-metric vectors do not match the fitness config");
    }
    let n = per_metric.first().map_or(0, Vec::len);
    if per_metric.iter().any(|v| v.len() != n) {
        return invalid("per-metric vectors differ in length");
    }
    let ranges = cfg.ranges(&per_metric);
    let fitness = (0..n)
        .map(|i| {
            let row: Vec<f64> = per_metric.iter().map(|v| v[i]).collect();
            aggregate(&row, cfg, &ranges)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PoolScores {
        metric_names: cfg.metrics.iter().map(|m| m.metric.name()).collect(),
        per_metric,
        ranges,
        fitness,
    })
}

pub fn score_pool(
    pool: &AllocationPool,
    cfg: &FitnessConfig,
    ctx: &DesignContext,
) -> Result<PoolScores> {
    cfg.validate()?;
    let per_metric = cfg
        .metrics
        .iter()
        .map(|m| score_metric(&pool.candidates, &m.metric, ctx))
        .collect::<Result<Vec<_>>>()?;
    combine(per_metric, cfg)
}

/// Fitness of candidates outside the pool, scaled with stored ranges.
pub fn score_with_ranges(
    candidates: &[Candidate],
    cfg: &FitnessConfig,
    ranges: &[MinMax],
    ctx: &DesignContext,
) -> Result<Vec<f64>> {
    let per_metric = cfg
        .metrics
        .iter()
        .map(|m| score_metric(candidates, &m.metric, ctx))
        .collect::<Result<Vec<_>>>()?;
    (0..candidates.len())
        .map(|i| {
            let row: Vec<f64> = per_metric.iter().map(|v| v[i]).collect();
            aggregate(&row, cfg, ranges)
        })
        .collect()
}

/// Extend `scores` to pool members appended after scoring (mirrors), keeping
/// the stored ranges.
pub fn extend_scores(
    scores: &PoolScores,
    candidates: &[Candidate],
    cfg: &FitnessConfig,
    ctx: &DesignContext,
) -> Result<PoolScores> {
    let have = scores.fitness.len();
    if candidates.len() < have {
        return invalid("pool is shorter than its scores");
    }
    let extra = &candidates[have..];
    let mut out = scores.clone();
    let new: Vec<Vec<f64>> = cfg
        .metrics
        .iter()
        .map(|m| score_metric(extra, &m.metric, ctx))
        .collect::<Result<_>>()?;
    for i in 0..extra.len() {
        let row: Vec<f64> = new.iter().map(|v| v[i]).collect();
        out.fitness.push(aggregate(&row, cfg, &scores.ranges)?);
    }
    for (dst, src) in out.per_metric.iter_mut().zip(new) {
        dst.extend(src);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    ThresholdPercentile,
    TopM,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictionRule {
    pub kind: RuleKind,
    pub m_accept: usize,
}

impl RestrictionRule {
    pub fn top_m(m_accept: usize) -> Self {
        Self {
            kind: RuleKind::TopM,
            m_accept,
        }
    }

    /// Percentile of the pool at which the threshold sits.
    pub fn percentile(&self, pool_size: usize) -> f64 {
        100.0 * self.m_accept as f64 / pool_size as f64
    }
}

/// Result of applying a restriction rule to a score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mask: Vec<bool>,
    /// Pool indices of accepted allocations in ascending score order.
    pub order: Vec<usize>,
    /// Largest accepted score.
    pub threshold: f64,
}

/// Pool indices sorted by score, ties in pool order; `+∞` last.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Accept the `m_accept` smallest finite scores.
pub fn select(scores: &[f64], rule: &RestrictionRule) -> Result<Selection> {
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("scores contain NaN");
    }
    let finite = scores.iter().filter(|s| s.is_finite()).count();
    if rule.m_accept == 0 {
        return invalid("m_accept must be at least 1");
    }
    if rule.m_accept > finite {
        return Err(Error::NotEnoughFinite {
            requested: rule.m_accept,
            finite,
            pool: scores.len(),
        });
    }
    let order: Vec<usize> = rank(scores).into_iter().take(rule.m_accept).collect();
    let mut mask = vec![false; scores.len()];
    for &i in &order {
        mask[i] = true;
    }
    let threshold = scores[*order.last().unwrap()];
    Ok(Selection {
        mask,
        order,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ExposureSpec;

    fn smd() -> Metric {
        Metric::SumMaxAbsSmd {
            exclude_salient: true,
        }
    }

    #[test]
    fn gated_and_identity() {
        let cfg = FitnessConfig::gated(
            Metric::DesiredComps {
                compositions: vec![0.5],
            },
            smd(),
        );
        cfg.validate().unwrap();
        assert_eq!(aggregate(&[0.0, 3.2], &cfg, &[]).unwrap(), f64::INFINITY);
        assert_eq!(aggregate(&[1.0, 3.2], &cfg, &[]).unwrap(), 3.2);
        let id = FitnessConfig::identity(Metric::MaxMahalanobis {
            exclude_salient: false,
        });
        assert_eq!(aggregate(&[7.25], &id, &[]).unwrap(), 7.25);
    }

    #[test]
    fn weighted_normalized() {
        let cfg = FitnessConfig::weighted(vec![
            (Metric::InvMinEuclidean, 0.75),
            (
                Metric::FracCtrlExposed {
                    exposure: ExposureSpec::OneNeighbor,
                },
                0.25,
            ),
        ]);
        let ranges = [MinMax { min: 0.0, max: 1.0 }, MinMax { min: 0.0, max: 1.0 }];
        let v = aggregate(&[0.2, 0.4], &cfg, &ranges).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert_eq!(
            aggregate(&[f64::INFINITY, 0.4], &cfg, &ranges).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn minmax_degenerate() {
        let r = MinMax::of(&[2.0, 2.0, f64::INFINITY]);
        assert_eq!(r.scale(2.0), 0.0);
        let r = MinMax::of(&[1.0, 3.0]);
        assert_eq!(r.scale(2.0), 0.5);
    }

    #[test]
    fn weight_one_zero_matches_first_metric() {
        let cfg = FitnessConfig::weighted(vec![(smd(), 1.0), (Metric::InvMinEuclidean, 0.0)]);
        let a = vec![3.0, 1.0, 2.0];
        let b = vec![9.0, 4.0, 0.5];
        let out = combine(vec![a.clone(), b], &cfg).unwrap();
        let r = MinMax::of(&a);
        let expect: Vec<f64> = a.iter().map(|&v| r.scale(v)).collect();
        assert_eq!(out.fitness, expect);
    }

    #[test]
    fn invalid_configs() {
        assert!(FitnessConfig::weighted(vec![(smd(), 0.0)])
            .validate()
            .is_err());
        assert!(FitnessConfig::weighted(vec![(smd(), -1.0), (smd(), 2.0)])
            .validate()
            .is_err());
        let mut g = FitnessConfig::gated(smd(), smd());
        assert!(g.validate().is_err());
        g.aggregator = Aggregator::Identity;
        assert!(g.validate().is_err());
    }

    #[test]
    fn select_cases() {
        let s = select(&[1.0, 2.0, 3.0, f64::INFINITY], &RestrictionRule::top_m(2)).unwrap();
        assert_eq!(s.mask, vec![true, true, false, false]);
        assert_eq!(s.threshold, 2.0);
        let s = select(&[5.0; 6], &RestrictionRule::top_m(3)).unwrap();
        assert_eq!(s.order, vec![0, 1, 2]);
        let err = select(&[1.0, f64::INFINITY], &RestrictionRule::top_m(2)).unwrap_err();
        assert!(matches!(
            err,
            Error::NotEnoughFinite {
                requested: 2,
                finite: 1,
                pool: 2
            }
        ));
    }

    #[test]
    fn config_json() {
        let cfg: FitnessConfig = serde_json::from_str(
            r#"{"metrics":[{"metric":"sum_max_abs_smd","exclude_salient":false,"weight":0.25},
                {"metric":"frac_ctrl_exposed","exposure":{"kind":"one_neighbor"},"weight":0.75}],
                "aggregator":"weighted_sum"}"#,
        )
        .unwrap();
        assert_eq!(cfg.normalization, Normalization::PoolMinmax);
        assert_eq!(cfg.metrics[1].weight, 0.75);
        assert!(!cfg.is_symmetric());
        let back: FitnessConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let typo = r#"{"metrics":[{"metric":"sum_max_abs_smd","exclude_salent":true}],"aggregator":"identity"}"#;
        assert!(serde_json::from_str::<FitnessConfig>(typo).is_err());
    }
}
