//! Allocations, group designs and candidate pools.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::ClusterMap;
use crate::error::{invalid, Result};
use crate::rng::RngSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Unit,
    Cluster,
    Group,
}

/// One realized vector of arm labels, at unit or cluster level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub labels: Vec<u8>,
    pub arms: u8,
    pub level: Level,
}

impl Allocation {
    pub fn new(labels: Vec<u8>, arms: u8, level: Level) -> Result<Self> {
        if arms < 2 {
            return invalid("an allocation needs at least 2 arms");
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= arms) {
            return invalid(format!("arm label {bad} >= arm count {arms}"));
        }
        Ok(Self {
            labels,
            arms,
            level,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn arm_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.arms as usize];
        for &l in &self.labels {
            s[l as usize] += 1;
        }
        s
    }

    /// Unit-level labels: cluster allocations are expanded through `cmap`.
    pub fn expand(&self, cmap: &ClusterMap) -> Result<Allocation> {
        if self.level != Level::Cluster {
            return invalid("only cluster-level allocations can be expanded");
        }
        if self.labels.len() != cmap.n_clusters() {
            return invalid(format!(
                "allocation covers {} clusters, map has {}",
                self.labels.len(),
                cmap.n_clusters()
            ));
        }
        Ok(Allocation {
            labels: cmap
                .as_slice()
                .iter()
                .map(|&c| self.labels[c as usize])
                .collect(),
            arms: self.arms,
            level: Level::Unit,
        })
    }

    pub fn relabel(&self, perm: &[u8]) -> Allocation {
        Allocation {
            labels: self.labels.iter().map(|&l| perm[l as usize]).collect(),
            arms: self.arms,
            level: self.level,
        }
    }
}

/// Joint group formation and group-level treatment: unit `i` sits in group
/// `group_of[i]`, which receives arm `arm_of_group[group_of[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupDesign {
    pub group_of: Vec<u32>,
    pub arm_of_group: Vec<u8>,
    pub arms: u8,
}

impl GroupDesign {
    pub fn new(group_of: Vec<u32>, arm_of_group: Vec<u8>, arms: u8) -> Result<Self> {
        let g = arm_of_group.len();
        let mut sizes = vec![0usize; g];
        for &h in &group_of {
            match sizes.get_mut(h as usize) {
                Some(s) => *s += 1,
                None => return invalid(format!("group id {h} >= group count {g}")),
            }
        }
        if let Some(h) = sizes.iter().position(|&s| s == 0) {
            return invalid(format!("group {h} is empty"));
        }
        if let Some(a) = arm_of_group.iter().find(|&&a| a >= arms) {
            return invalid(format!("arm label {a} >= arm count {arms}"));
        }
        Ok(Self {
            group_of,
            arm_of_group,
            arms,
        }
        .canonical())
    }

    pub fn n_groups(&self) -> usize {
        self.arm_of_group.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_groups()];
        for &h in &self.group_of {
            s[h as usize] += 1;
        }
        s
    }

    pub fn members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of
            .iter()
            .enumerate()
            .filter(move |(_, &h)| h as usize == group)
            .map(|(i, _)| i)
    }

    pub fn unit_arms(&self) -> Vec<u8> {
        self.group_of
            .iter()
            .map(|&h| self.arm_of_group[h as usize])
            .collect()
    }

    /// Renumbers groups by their smallest member index.
    pub fn canonical(self) -> Self {
        let g = self.arm_of_group.len();
        let mut new_id = vec![u32::MAX; g];
        let mut next = 0u32;
        for &h in &self.group_of {
            if new_id[h as usize] == u32::MAX {
                new_id[h as usize] = next;
                next += 1;
            }
        }
        // groups with no members (only possible mid-evolution) keep trailing ids
        for id in new_id.iter_mut().filter(|id| **id == u32::MAX) {
            *id = next;
            next += 1;
        }
        let mut arm_of_group = vec![0u8; g];
        for (old, &new) in new_id.iter().enumerate() {
            arm_of_group[new as usize] = self.arm_of_group[old];
        }
        Self {
            group_of: self.group_of.iter().map(|&h| new_id[h as usize]).collect(),
            arm_of_group,
            arms: self.arms,
        }
    }

    pub fn relabel(&self, perm: &[u8]) -> GroupDesign {
        GroupDesign {
            group_of: self.group_of.clone(),
            arm_of_group: self
                .arm_of_group
                .iter()
                .map(|&a| perm[a as usize])
                .collect(),
            arms: self.arms,
        }
    }
}

/// A member of a candidate pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Candidate {
    Labels(Allocation),
    Groups(GroupDesign),
}

impl Candidate {
    pub fn arms(&self) -> u8 {
        match self {
            Candidate::Labels(a) => a.arms,
            Candidate::Groups(g) => g.arms,
        }
    }

    pub fn level(&self) -> Level {
        match self {
            Candidate::Labels(a) => a.level,
            Candidate::Groups(_) => Level::Group,
        }
    }

    /// Length of the randomized vector (units, clusters, or units for groups).
    pub fn len(&self) -> usize {
        match self {
            Candidate::Labels(a) => a.labels.len(),
            Candidate::Groups(g) => g.group_of.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Arm of every unit.
    pub fn unit_arms(&self, cmap: Option<&ClusterMap>) -> Result<Vec<u8>> {
        match self {
            Candidate::Labels(a) => match a.level {
                Level::Unit => Ok(a.labels.clone()),
                Level::Cluster => match cmap {
                    Some(m) => Ok(a.expand(m)?.labels),
                    None => invalid("cluster-level allocation needs a cluster map"),
                },
                Level::Group => invalid("label allocation cannot have group level"),
            },
            Candidate::Groups(g) => Ok(g.unit_arms()),
        }
    }

    pub fn relabel(&self, perm: &[u8]) -> Candidate {
        match self {
            Candidate::Labels(a) => Candidate::Labels(a.relabel(perm)),
            Candidate::Groups(g) => Candidate::Groups(g.relabel(perm)),
        }
    }

    pub fn as_labels(&self) -> Option<&Allocation> {
        match self {
            Candidate::Labels(a) => Some(a),
            Candidate::Groups(_) => None,
        }
    }

    pub fn as_groups(&self) -> Option<&GroupDesign> {
        match self {
            Candidate::Groups(g) => Some(g),
            Candidate::Labels(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mechanism: String,
    pub rng: Option<RngSpec>,
    pub parameters: serde_json::Value,
    pub drawn: usize,
    #[serde(default)]
    pub before_dedup: Option<usize>,
    #[serde(default)]
    pub after_dedup: Option<usize>,
    /// Mirrors appended to the pool because they were not enumerated.
    #[serde(default)]
    pub appended_mirrors: usize,
    /// Whether re-running the mechanism from `rng` reproduces the pool.
    #[serde(default)]
    pub replayable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPool {
    pub candidates: Vec<Candidate>,
    pub provenance: Provenance,
}

impl AllocationPool {
    pub fn new(candidates: Vec<Candidate>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = candidates.first() {
            for (i, c) in candidates.iter().enumerate() {
                if c.len() != first.len() || c.arms() != first.arms() || c.level() != first.level()
                {
                    return invalid(format!(
                        "pool member {i} differs in length, arm count or level from member 0"
                    ));
                }
                if let (Candidate::Groups(a), Candidate::Groups(b)) = (c, first) {
                    if a.n_groups() != b.n_groups() {
                        return invalid(format!("pool member {i} has a different group count"));
                    }
                }
            }
        }
        Ok(Self {
            candidates,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn arms(&self) -> Option<u8> {
        self.candidates.first().map(Candidate::arms)
    }
}

/// Order-preserving removal of exact duplicates.
pub fn dedup(pool: AllocationPool) -> AllocationPool {
    let before = pool.candidates.len();
    let mut seen = HashSet::with_capacity(before);
    let candidates: Vec<Candidate> = pool
        .candidates
        .into_iter()
        .filter(|c| seen.insert(c.clone()))
        .collect();
    let mut provenance = pool.provenance;
    provenance.before_dedup = Some(provenance.before_dedup.unwrap_or(before));
    provenance.after_dedup = Some(candidates.len());
    AllocationPool {
        candidates,
        provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Candidate {
        Candidate::Labels(Allocation::new(v.to_vec(), 2, Level::Unit).unwrap())
    }

    fn prov() -> Provenance {
        Provenance {
            mechanism: "test".into(),
            rng: None,
            parameters: serde_json::Value::Null,
            drawn: 3,
            before_dedup: None,
            after_dedup: None,
            appended_mirrors: 0,
            replayable: false,
        }
    }

    #[test]
    fn dedup_keeps_first_occurrence_order() {
        let pool = AllocationPool::new(
            vec![labels(&[0, 1]), labels(&[0, 1]), labels(&[1, 0])],
            prov(),
        )
        .unwrap();
        let d = dedup(pool);
        assert_eq!(d.candidates, vec![labels(&[0, 1]), labels(&[1, 0])]);
        assert_eq!(d.provenance.before_dedup, Some(3));
        assert_eq!(d.provenance.after_dedup, Some(2));
    }

    #[test]
    fn group_designs_equal_iff_both_vectors_equal() {
        let a = GroupDesign::new(vec![0, 0, 1, 1], vec![0, 1], 2).unwrap();
        let b = GroupDesign::new(vec![1, 1, 0, 0], vec![1, 0], 2).unwrap();
        let c = GroupDesign::new(vec![0, 0, 1, 1], vec![1, 0], 2).unwrap();
        assert_eq!(a, b, "canonical relabeling makes these identical");
        assert_ne!(a, c);
        let pool = AllocationPool::new(
            vec![
                Candidate::Groups(a),
                Candidate::Groups(b),
                Candidate::Groups(c),
            ],
            prov(),
        )
        .unwrap();
        assert_eq!(dedup(pool).len(), 2);
    }

    #[test]
    fn canonical_orders_groups_by_first_member() {
        let g = GroupDesign::new(vec![2, 0, 2, 1], vec![1, 0, 1], 2).unwrap();
        assert_eq!(g.group_of, vec![0, 1, 0, 2]);
        assert_eq!(g.arm_of_group, vec![1, 1, 0]);
        assert_eq!(g.unit_arms(), vec![1, 1, 1, 0]);
    }

    #[test]
    fn expand_cluster_allocation() {
        let cmap = ClusterMap::new(vec![0, 1, 1, 0, 2], 3).unwrap();
        let a = Allocation::new(vec![1, 0, 1], 2, Level::Cluster).unwrap();
        assert_eq!(a.expand(&cmap).unwrap().labels, vec![1, 0, 0, 1, 1]);
        assert!(Allocation::new(vec![2], 2, Level::Unit).is_err());
    }

    #[test]
    fn pool_rejects_mixed_members() {
        let c = Candidate::Labels(Allocation::new(vec![0, 1, 1], 2, Level::Unit).unwrap());
        assert!(AllocationPool::new(vec![labels(&[0, 1]), c], prov()).is_err());
    }
}
