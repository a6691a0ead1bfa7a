//! Difference-in-means estimation and Fisher randomization tests over the
//! accepted set.

use serde::{Deserialize, Serialize};

use crate::allocation::Candidate;
use crate::design::AcceptedDesign;
use crate::error::{invalid, Error, Result};
use crate::metrics::{matches_composition, DesignContext};
use crate::par;

pub fn diff_in_means(z: &[u8], y: &[f64], arm_a: u8, arm_b: u8) -> Result<f64> {
    if z.len() != y.len() {
        return invalid("allocation and outcome vector differ in length");
    }
    let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&a, &v) in z.iter().zip(y) {
        if a == arm_a {
            sa += v;
            na += 1;
        } else if a == arm_b {
            sb += v;
            nb += 1;
        }
    }
    if na == 0 || nb == 0 {
        return invalid(format!(
            "arm {} is empty",
            if na == 0 { arm_a } else { arm_b }
        ));
    }
    Ok(sa / na as f64 - sb / nb as f64)
}

fn one() -> u8 {
    1
}

/// Test statistic; its absolute value is compared (two-sided).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Statistic {
    /// Mean outcome of arm `treated` minus that of arm `control`.
    DiffInMeans {
        #[serde(default = "one")]
        treated: u8,
        #[serde(default)]
        control: u8,
    },
    /// Among units in groups of the given composition, treated-group mean
    /// minus control-group mean.
    CompositionContrast {
        composition: f64,
        #[serde(default = "one")]
        treated: u8,
        #[serde(default)]
        control: u8,
    },
}

impl Default for Statistic {
    fn default() -> Self {
        Statistic::DiffInMeans {
            treated: 1,
            control: 0,
        }
    }
}

/// Unit index sets of both sides of the contrast for each allocation.
#[derive(Debug, Clone)]
pub struct Prepared {
    sides: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Statistic {
    fn sides(&self, c: &Candidate, ctx: &DesignContext) -> Result<(Vec<u32>, Vec<u32>)> {
        let z = ctx.unit_arms(c)?;
        let (t, k, keep): (u8, u8, Option<Vec<bool>>) = match *self {
            Statistic::DiffInMeans { treated, control } => (treated, control, None),
            Statistic::CompositionContrast {
                composition,
                treated,
                control,
            } => {
                let g = c.as_groups().ok_or_else(|| {
                    Error::Invalid("composition contrast needs a group design".into())
                })?;
                let salient = ctx.covariates.salient()?;
                let sizes = g.group_sizes();
                let mut with = vec![0usize; sizes.len()];
                for (i, &h) in g.group_of.iter().enumerate() {
                    with[h as usize] += (salient[i] == 1.0) as usize;
                }
                let in_comp: Vec<bool> = sizes
                    .iter()
                    .zip(&with)
                    .map(|(&n, &w)| n > 0 && matches_composition(w as f64 / n as f64, composition))
                    .collect();
                (
                    treated,
                    control,
                    Some(g.group_of.iter().map(|&h| in_comp[h as usize]).collect()),
                )
            }
        };
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, &arm) in z.iter().enumerate() {
            if keep.as_ref().is_some_and(|k| !k[i]) {
                continue;
            }
            if arm == t {
                a.push(i as u32);
            } else if arm == k {
                b.push(i as u32);
            }
        }
        if a.is_empty() || b.is_empty() {
            return invalid("a side of the contrast is empty");
        }
        Ok((a, b))
    }

    pub fn prepare(&self, cands: &[&Candidate], ctx: &DesignContext) -> Result<Prepared> {
        let sides = par::map_slice(cands, |c| self.sides(c, ctx))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { sides })
    }

    pub fn eval(&self, c: &Candidate, ctx: &DesignContext, y: &[f64]) -> Result<f64> {
        if y.len() != ctx.n_units() {
            return invalid("outcome vector length differs from the unit count");
        }
        let s = self.sides(c, ctx)?;
        Ok(contrast(&s, y))
    }
}

fn contrast((a, b): &(Vec<u32>, Vec<u32>), y: &[f64]) -> f64 {
    let ma = a.iter().map(|&i| y[i as usize]).sum::<f64>() / a.len() as f64;
    let mb = b.iter().map(|&i| y[i as usize]).sum::<f64>() / b.len() as f64;
    ma - mb
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    pub fn stat(&self, row: usize, y: &[f64]) -> f64 {
        contrast(&self.sides[row], y)
    }

    pub fn all(&self, y: &[f64]) -> Vec<f64> {
        par::map_range(self.sides.len(), |r| self.stat(r, y))
    }

    /// Fisher test with the observed allocation at `obs_row`.
    pub fn test(&self, y: &[f64], obs_row: usize) -> TestResult {
        let null = self.all(y);
        TestResult::from_null(null[obs_row], null)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub observed: f64,
    pub null_stats: Vec<f64>,
    pub p_value: f64,
}

impl TestResult {
    /// Two-sided p-value: share of null statistics at least as extreme as
    /// the observed one (ties within a relative 1e-10 count as extreme).
    pub fn from_null(observed: f64, null_stats: Vec<f64>) -> Self {
        let tol = 1e-10 * observed.abs().max(1.0);
        let extreme = null_stats
            .iter()
            .filter(|t| t.abs() >= observed.abs() - tol)
            .count();
        let p_value = extreme as f64 / null_stats.len() as f64;
        Self {
            observed,
            null_stats,
            p_value,
        }
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// Exact randomization test of the sharp null over the accepted set.
pub fn fisher_test(
    design: &AcceptedDesign,
    ctx: &DesignContext,
    y_obs: &[f64],
    z_obs: &Candidate,
    statistic: &Statistic,
) -> Result<TestResult> {
    if y_obs.len() != ctx.n_units() {
        return invalid("outcome vector length differs from the unit count");
    }
    let accepted = design.accepted();
    let obs = accepted
        .iter()
        .position(|c| *c == z_obs)
        .ok_or(Error::NotAccepted)?;
    let prep = statistic.prepare(&accepted, ctx)?;
    Ok(prep.test(y_obs, obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_cases() {
        assert_eq!(
            diff_in_means(&[1, 1, 0, 0], &[1.0, 2.0, 3.0, 4.0], 1, 0).unwrap(),
            -2.0
        );
        assert_eq!(diff_in_means(&[1, 0, 1, 0], &[5.0; 4], 1, 0).unwrap(), 0.0);
        assert!(diff_in_means(&[1, 1], &[1.0, 2.0], 1, 0).is_err());
    }

    #[test]
    fn p_value_counts_observed() {
        let r = TestResult::from_null(2.0, vec![2.0]);
        assert_eq!(r.p_value, 1.0);
        let r = TestResult::from_null(3.0, vec![1.0, -3.0, 3.0, 0.5]);
        assert_eq!(r.p_value, 0.5);
        assert!(!r.rejects(0.05));
    }

    #[test]
    fn statistic_json() {
        let s: Statistic = serde_json::from_str(r#"{"kind":"diff_in_means"}"#).unwrap();
        assert_eq!(s, Statistic::default());
        let s: Statistic =
            serde_json::from_str(r#"{"kind":"composition_contrast","composition":0.3}"#).unwrap();
        assert!(matches!(
            s,
            Statistic::CompositionContrast {
                treated: 1,
                control: 0,
                ..
            }
        ));
    }
}
