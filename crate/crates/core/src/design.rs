//! The restricted assignment mechanism: accepted set, mirrors, lock state and
//! the official draw.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPool, Candidate};
use crate::error::{invalid, Error, Result};
use crate::fitness::{
    score_with_ranges, select, FitnessConfig, MinMax, PoolScores, RestrictionRule,
};
use crate::metrics::DesignContext;
use crate::rng::RngSpec;

/// Arm-label permutation group used to close accepted sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorGroup {
    Symmetric,
    Cyclic,
}

impl MirrorGroup {
    pub fn default_for(arms: u8) -> Self {
        if arms <= 4 {
            MirrorGroup::Symmetric
        } else {
            MirrorGroup::Cyclic
        }
    }

    /// Non-identity permutations of `0..arms`, as image vectors.
    pub fn permutations(&self, arms: u8) -> Vec<Vec<u8>> {
        let k = arms as usize;
        match self {
            MirrorGroup::Cyclic => (1..k)
                .map(|s| (0..k).map(|a| ((a + s) % k) as u8).collect())
                .collect(),
            MirrorGroup::Symmetric => {
                let mut out = Vec::new();
                let mut cur: Vec<u8> = Vec::with_capacity(k);
                let mut used = vec![false; k];
                permute(k, &mut cur, &mut used, &mut out);
                out.retain(|p| p.iter().enumerate().any(|(i, &v)| v as usize != i));
                out
            }
        }
    }

    /// Orbit size of an allocation using every arm.
    pub fn order(&self, arms: u8) -> usize {
        self.permutations(arms).len() + 1
    }
}

fn permute(k: usize, cur: &mut Vec<u8>, used: &mut [bool], out: &mut Vec<Vec<u8>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for a in 0..k {
        if !used[a] {
            used[a] = true;
            cur.push(a as u8);
            permute(k, cur, used, out);
            cur.pop();
            used[a] = false;
        }
    }
}

/// One official draw, kept in the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub sequence: usize,
    pub rng: RngSpec,
    pub pool_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedDesign {
    pub pool: AllocationPool,
    #[serde(with = "crate::ext::reals")]
    pub scores: Vec<f64>,
    pub accept_mask: Vec<bool>,
    pub probabilities: Vec<f64>,
    pub fitness: FitnessConfig,
    pub rule: RestrictionRule,
    /// Ranges used to normalize metrics; reused when scoring appended mirrors.
    #[serde(default)]
    pub ranges: Vec<MinMax>,
    #[serde(with = "crate::ext::real")]
    pub threshold: f64,
    pub mirrors_added: bool,
    #[serde(default)]
    pub mirror_group: Option<MirrorGroup>,
    #[serde(default)]
    pub bundle_hash: Option<String>,
    #[serde(default)]
    pub audit: Vec<DrawRecord>,
}

impl AcceptedDesign {
    /// Accept the `rule.m_accept` best-scoring allocations.
    pub fn restrict(
        pool: AllocationPool,
        scores: &PoolScores,
        fitness: FitnessConfig,
        rule: RestrictionRule,
    ) -> Result<Self> {
        if scores.fitness.len() != pool.len() {
            return invalid("scores are not aligned with the pool");
        }
        let sel = select(&scores.fitness, &rule)?;
        let mut d = Self {
            pool,
            scores: scores.fitness.clone(),
            accept_mask: sel.mask,
            probabilities: Vec::new(),
            fitness,
            rule,
            ranges: scores.ranges.clone(),
            threshold: sel.threshold,
            mirrors_added: false,
            mirror_group: None,
            bundle_hash: None,
            audit: Vec::new(),
        };
        d.reset_probabilities();
        Ok(d)
    }

    /// Walk the pool in score order, accepting each unaccepted allocation
    /// together with its whole orbit under `group`, until `rule.m_accept`
    /// allocations are accepted. Orbit members missing from the pool are
    /// appended and scored with the stored ranges.
    pub fn restrict_orbits(
        pool: AllocationPool,
        scores: &PoolScores,
        fitness: FitnessConfig,
        rule: RestrictionRule,
        group: MirrorGroup,
        ctx: &DesignContext,
    ) -> Result<Self> {
        if scores.fitness.len() != pool.len() {
            return invalid("scores are not aligned with the pool");
        }
        let arms = pool
            .arms()
            .ok_or_else(|| Error::Invalid("empty pool".into()))?;
        let orbit = group.order(arms);
        if rule.m_accept == 0 || !rule.m_accept.is_multiple_of(orbit) {
            return invalid(format!(
                "m_accept={} is not a positive multiple of the orbit size {orbit}",
                rule.m_accept
            ));
        }
        let n_top = rule.m_accept / orbit;
        let finite = scores.fitness.iter().filter(|s| s.is_finite()).count();
        if n_top > finite {
            return Err(Error::NotEnoughFinite {
                requested: n_top,
                finite,
                pool: pool.len(),
            });
        }
        let mut d = Self {
            pool,
            scores: scores.fitness.clone(),
            accept_mask: vec![false; scores.fitness.len()],
            probabilities: Vec::new(),
            fitness,
            rule,
            ranges: scores.ranges.clone(),
            threshold: f64::NEG_INFINITY,
            mirrors_added: true,
            mirror_group: Some(group),
            bundle_hash: None,
            audit: Vec::new(),
        };
        let perms = group.permutations(arms);
        let mut index = d.index();
        let mut accepted = 0usize;
        let ranked = crate::fitness::rank(&scores.fitness);
        let mut pending = Vec::new();
        for &i in &ranked {
            if accepted == rule.m_accept {
                break;
            }
            if d.accept_mask[i] {
                continue;
            }
            if !d.scores[i].is_finite() {
                return Err(Error::NotEnoughFinite {
                    requested: n_top,
                    finite,
                    pool: d.pool.len(),
                });
            }
            d.accept_mask[i] = true;
            d.threshold = d.scores[i];
            accepted += 1;
            for p in &perms {
                let m = d.pool.candidates[i].relabel(p);
                match index.get(&m) {
                    Some(&j) => {
                        if !d.accept_mask[j] {
                            d.accept_mask[j] = true;
                            accepted += 1;
                        }
                    }
                    None => {
                        let j = d.push_unscored(m.clone());
                        index.insert(m, j);
                        pending.push(j);
                        accepted += 1;
                    }
                }
            }
        }
        d.score_pending(&pending, ctx)?;
        d.reset_probabilities();
        Ok(d)
    }

    fn index(&self) -> HashMap<Candidate, usize> {
        self.pool
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect()
    }

    fn push_unscored(&mut self, c: Candidate) -> usize {
        self.pool.candidates.push(c);
        self.pool.provenance.appended_mirrors += 1;
        self.scores.push(f64::NAN);
        self.accept_mask.push(true);
        self.pool.candidates.len() - 1
    }

    fn score_pending(&mut self, pending: &[usize], ctx: &DesignContext) -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let cands: Vec<Candidate> = pending
            .iter()
            .map(|&j| self.pool.candidates[j].clone())
            .collect();
        let s = score_with_ranges(&cands, &self.fitness, &self.ranges, ctx)?;
        for (&j, v) in pending.iter().zip(s) {
            self.scores[j] = v;
        }
        Ok(())
    }

    fn reset_probabilities(&mut self) {
        let m = self.accept_mask.iter().filter(|&&a| a).count();
        self.probabilities = self
            .accept_mask
            .iter()
            .map(|&a| if a { 1.0 / m as f64 } else { 0.0 })
            .collect();
    }

    pub fn is_locked(&self) -> bool {
        self.bundle_hash.is_some()
    }

    pub fn accepted_indices(&self) -> Vec<usize> {
        (0..self.accept_mask.len())
            .filter(|&i| self.accept_mask[i])
            .collect()
    }

    pub fn accepted(&self) -> Vec<&Candidate> {
        self.accepted_indices()
            .into_iter()
            .map(|i| &self.pool.candidates[i])
            .collect()
    }

    pub fn n_accepted(&self) -> usize {
        self.accept_mask.iter().filter(|&&a| a).count()
    }

    /// Whether `z` is in the accepted set.
    pub fn contains(&self, z: &Candidate) -> bool {
        self.pool
            .candidates
            .iter()
            .zip(&self.accept_mask)
            .any(|(c, &a)| a && c == z)
    }

    /// Per-unit counts of accepted allocations placing the unit in each arm.
    pub fn unit_arm_counts(&self, ctx: &DesignContext) -> Result<Vec<Vec<usize>>> {
        let k = self.pool.arms().unwrap_or(2) as usize;
        let mut counts = vec![vec![0usize; k]; ctx.n_units()];
        for c in self.accepted() {
            for (i, &a) in ctx.unit_arms(c)?.iter().enumerate() {
                counts[i][a as usize] += 1;
            }
        }
        Ok(counts)
    }

    /// Uniform draw from the accepted set, recorded in the audit trail.
    pub fn draw_official(&mut self, rng: RngSpec) -> Result<Candidate> {
        if !self.is_locked() {
            return Err(Error::NotLocked);
        }
        let acc = self.accepted_indices();
        let pick = acc[rng.rng().random_range(0..acc.len())];
        self.audit.push(DrawRecord {
            sequence: self.audit.len(),
            rng,
            pool_index: pick,
        });
        Ok(self.pool.candidates[pick].clone())
    }
}

/// Close the accepted set under `group`. Mirrors absent from the pool are
/// appended and scored with the stored normalization ranges.
pub fn add_mirrors(
    mut d: AcceptedDesign,
    ctx: &DesignContext,
    group: MirrorGroup,
    allow_asymmetric: bool,
) -> Result<AcceptedDesign> {
    if d.is_locked() {
        return Err(Error::AlreadyLocked);
    }
    if !allow_asymmetric && !d.fitness.is_symmetric() {
        return invalid(
            "fitness is not symmetric under arm relabeling; pass allow_asymmetric to mirror anyway",
        );
    }
    let arms = d
        .pool
        .arms()
        .ok_or_else(|| Error::Invalid("empty pool".into()))?;
    let perms = group.permutations(arms);
    let mut index = d.index();
    let mut pending = Vec::new();
    for i in d.accepted_indices() {
        for p in &perms {
            let m = d.pool.candidates[i].relabel(p);
            match index.get(&m) {
                Some(&j) => d.accept_mask[j] = true,
                None => {
                    let j = d.push_unscored(m.clone());
                    index.insert(m, j);
                    pending.push(j);
                }
            }
        }
    }
    d.score_pending(&pending, ctx)?;
    d.mirrors_added = true;
    d.mirror_group = Some(group);
    d.reset_probabilities();
    Ok(d)
}
