//! Candidate pool enumeration: complete, cluster and group-formation
//! randomization.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{Allocation, AllocationPool, Candidate, GroupDesign, Level, Provenance};
use crate::data::{ClusterMap, CovariateMatrix};
use crate::error::{invalid, Error, Result};
use crate::rng::RngSpec;

/// A replayable enumeration mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Mechanism {
    Complete {
        n: usize,
        arms: u8,
    },
    Cluster {
        n_clusters: usize,
        arms: u8,
    },
    GroupFormation {
        salient: Vec<u8>,
        compositions: Vec<f64>,
        group_size: usize,
    },
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Complete { .. } => "complete",
            Mechanism::Cluster { .. } => "cluster",
            Mechanism::GroupFormation { .. } => "group_formation",
        }
    }

    pub fn draw(&self, m_pool: usize, rng: RngSpec) -> Result<AllocationPool> {
        if m_pool == 0 {
            return invalid("pool size must be at least 1");
        }
        let mut r = rng.rng();
        let candidates = match self {
            Mechanism::Complete { n, arms } => {
                let base = balanced_labels(*n, *arms)?;
                (0..m_pool)
                    .map(|_| shuffled(&base, *arms, Level::Unit, &mut r))
                    .collect()
            }
            Mechanism::Cluster { n_clusters, arms } => {
                let base = balanced_labels(*n_clusters, *arms)?;
                (0..m_pool)
                    .map(|_| shuffled(&base, *arms, Level::Cluster, &mut r))
                    .collect()
            }
            Mechanism::GroupFormation {
                salient,
                compositions,
                group_size,
            } => {
                let plan = GfrPlan::new(salient, compositions, *group_size)?;
                (0..m_pool)
                    .map(|_| Candidate::Groups(plan.draw(&mut r)))
                    .collect()
            }
        };
        AllocationPool::new(
            candidates,
            Provenance {
                mechanism: self.name().to_string(),
                rng: Some(rng),
                parameters: serde_json::to_value(self)?,
                drawn: m_pool,
                before_dedup: None,
                after_dedup: None,
                appended_mirrors: 0,
                replayable: true,
            },
        )
    }
}

fn balanced_labels(n: usize, arms: u8) -> Result<Vec<u8>> {
    if arms < 2 {
        return invalid("need at least 2 arms");
    }
    let k = arms as usize;
    if !n.is_multiple_of(k) {
        return Err(Error::UnequalArms {
            n,
            k,
            remainder: n % k,
        });
    }
    Ok((0..n).map(|i| (i / (n / k)) as u8).collect())
}

fn shuffled(base: &[u8], arms: u8, level: Level, rng: &mut impl Rng) -> Candidate {
    let mut labels = base.to_vec();
    labels.shuffle(rng);
    Candidate::Labels(Allocation {
        labels,
        arms,
        level,
    })
}

/// `m_pool` complete-randomization draws with `n / k` units per arm.
pub fn enumerate_complete(n: usize, k: u8, m_pool: usize, rng: RngSpec) -> Result<AllocationPool> {
    Mechanism::Complete { n, arms: k }.draw(m_pool, rng)
}

/// Complete randomization of whole clusters; allocations are cluster level.
pub fn enumerate_cluster(
    cmap: &ClusterMap,
    k: u8,
    m_pool: usize,
    rng: RngSpec,
) -> Result<AllocationPool> {
    if let Some(c) = cmap.sizes().iter().position(|&s| s == 0) {
        return invalid(format!("cluster {c} is empty"));
    }
    Mechanism::Cluster {
        n_clusters: cmap.n_clusters(),
        arms: k,
    }
    .draw(m_pool, rng)
}

/// Group formation randomization: two groups per composition, one treated
/// and one control, each filled from the salient and non-salient blocks.
pub fn enumerate_group_formation(
    x: &CovariateMatrix,
    comps: &[f64],
    group_size: usize,
    m_pool: usize,
    rng: RngSpec,
) -> Result<AllocationPool> {
    group_formation_mechanism(x, comps, group_size)?.draw(m_pool, rng)
}

pub fn group_formation_mechanism(
    x: &CovariateMatrix,
    comps: &[f64],
    group_size: usize,
) -> Result<Mechanism> {
    let salient = x.salient()?.iter().map(|&v| v as u8).collect();
    Ok(Mechanism::GroupFormation {
        salient,
        compositions: comps.to_vec(),
        group_size,
    })
}

struct GfrPlan {
    with_attr: Vec<usize>,
    without_attr: Vec<usize>,
    /// salient members per composition
    per_group_attr: Vec<usize>,
    group_size: usize,
    n: usize,
}

impl GfrPlan {
    fn new(salient: &[u8], comps: &[f64], group_size: usize) -> Result<Self> {
        if comps.is_empty() {
            return invalid("at least one composition is required");
        }
        if group_size == 0 {
            return invalid("group size must be positive");
        }
        let mut per_group_attr = Vec::with_capacity(comps.len());
        for (j, &c) in comps.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return invalid(format!("composition {c} outside [0, 1]"));
            }
            let exact = c * group_size as f64;
            let count = exact.round();
            if (exact - count).abs() > 1e-9 {
                return Err(Error::InfeasibleComposition(format!(
                    "composition {c} (index {j}) is not realizable with groups of {group_size}"
                )));
            }
            if comps[..j].iter().any(|&o| (o - c).abs() < 1e-12) {
                return invalid(format!("composition {c} listed twice"));
            }
            per_group_attr.push(count as usize);
        }
        let with_attr: Vec<usize> = (0..salient.len()).filter(|&i| salient[i] == 1).collect();
        let without_attr: Vec<usize> = (0..salient.len()).filter(|&i| salient[i] == 0).collect();
        let need_attr: usize = per_group_attr.iter().map(|c| 2 * c).sum();
        let need_other: usize = per_group_attr.iter().map(|c| 2 * (group_size - c)).sum();
        if need_attr != with_attr.len() || need_other != without_attr.len() {
            let report = |label: &str, need: usize, have: usize| {
                let delta = have as i64 - need as i64;
                format!("{label} block needs {need}, has {have} ({delta:+})")
            };
            return Err(Error::InfeasibleComposition(format!(
                "{}; {}",
                report("salient", need_attr, with_attr.len()),
                report("non-salient", need_other, without_attr.len())
            )));
        }
        Ok(Self {
            with_attr,
            without_attr,
            per_group_attr,
            group_size,
            n: salient.len(),
        })
    }

    fn draw(&self, rng: &mut impl Rng) -> GroupDesign {
        let mut a = self.with_attr.clone();
        let mut b = self.without_attr.clone();
        a.shuffle(rng);
        b.shuffle(rng);
        let n_groups = 2 * self.per_group_attr.len();
        let mut group_of = vec![0u32; self.n];
        let mut arm_of_group = vec![0u8; n_groups];
        let (mut ia, mut ib) = (0, 0);
        for (j, &n_attr) in self.per_group_attr.iter().enumerate() {
            for h in [2 * j, 2 * j + 1] {
                for &u in &a[ia..ia + n_attr] {
                    group_of[u] = h as u32;
                }
                ia += n_attr;
                let n_other = self.group_size - n_attr;
                for &u in &b[ib..ib + n_other] {
                    group_of[u] = h as u32;
                }
                ib += n_other;
            }
            let first_treated = rng.random_bool(0.5);
            arm_of_group[2 * j] = first_treated as u8;
            arm_of_group[2 * j + 1] = (!first_treated) as u8;
        }
        GroupDesign {
            group_of,
            arm_of_group,
            arms: 2,
        }
        .canonical()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::dedup;
    use crate::data::Column;
    use std::collections::HashSet;

    /// All binary vectors of length `n` with exactly `n / 2` ones.
    fn brute_force_balanced(n: usize) -> HashSet<Vec<u8>> {
        (0u32..1 << n)
            .map(|mask| (0..n).map(|i| ((mask >> i) & 1) as u8).collect::<Vec<_>>())
            .filter(|v| v.iter().filter(|&&x| x == 1).count() == n / 2)
            .collect()
    }

    fn labels_of(pool: &AllocationPool) -> HashSet<Vec<u8>> {
        pool.candidates
            .iter()
            .map(|c| c.as_labels().unwrap().labels.clone())
            .collect()
    }

    #[test]
    fn two_units_two_arms() {
        let pool = dedup(enumerate_complete(2, 2, 200, RngSpec::new(1)).unwrap());
        let expect: HashSet<Vec<u8>> = [vec![0, 1], vec![1, 0]].into_iter().collect();
        assert_eq!(labels_of(&pool), expect);
    }

    #[test]
    fn four_units_give_six_allocations() {
        let pool = dedup(enumerate_complete(4, 2, 10_000, RngSpec::new(9)).unwrap());
        assert_eq!(pool.len(), 6);
        assert_eq!(labels_of(&pool), brute_force_balanced(4));
        assert_eq!(pool.provenance.before_dedup, Some(10_000));
    }

    #[test]
    fn uneven_arms_rejected_with_remainder() {
        let err = enumerate_complete(7, 2, 5, RngSpec::new(0)).unwrap_err();
        assert!(matches!(err, Error::UnequalArms { remainder: 1, .. }));
        assert!(err.to_string().contains("remainder 1"));
    }

    #[test]
    fn every_draw_is_balanced() {
        let pool = enumerate_complete(12, 3, 50, RngSpec::new(3)).unwrap();
        for c in &pool.candidates {
            assert_eq!(c.as_labels().unwrap().arm_sizes(), vec![4, 4, 4]);
        }
    }

    #[test]
    fn cluster_pool_and_expansion() {
        let cmap = ClusterMap::new(vec![0, 1, 1, 2, 2, 2, 3, 3, 3, 3], 4).unwrap();
        let pool = dedup(enumerate_cluster(&cmap, 2, 5_000, RngSpec::new(5)).unwrap());
        assert_eq!(pool.len(), 6);
        let mut treated_counts = HashSet::new();
        for c in &pool.candidates {
            let a = c.as_labels().unwrap();
            assert_eq!(a.level, Level::Cluster);
            let units = a.expand(&cmap).unwrap().labels;
            for i in 0..10 {
                for j in 0..10 {
                    if cmap.cluster_of(i) == cmap.cluster_of(j) {
                        assert_eq!(units[i], units[j]);
                    }
                }
            }
            treated_counts.insert(units.iter().filter(|&&z| z == 1).count());
        }
        // brute force over the six allocations of sizes {1,2,3,4}: 1+4, 2+3, 1+2... etc.
        let sizes = [1usize, 2, 3, 4];
        let brute: HashSet<usize> = brute_force_balanced(4)
            .into_iter()
            .map(|z| (0..4).filter(|&c| z[c] == 1).map(|c| sizes[c]).sum())
            .collect();
        assert_eq!(treated_counts, brute);
        assert_eq!(brute, [3, 4, 5, 6, 7].into_iter().collect());
    }

    #[test]
    fn two_clusters() {
        let cmap = ClusterMap::new(vec![0, 1], 2).unwrap();
        let pool = dedup(enumerate_cluster(&cmap, 2, 100, RngSpec::new(2)).unwrap());
        assert_eq!(
            labels_of(&pool),
            [vec![0, 1], vec![1, 0]].into_iter().collect()
        );
    }

    fn gender_matrix(men: &[u8]) -> CovariateMatrix {
        CovariateMatrix::new(
            vec![
                Column {
                    name: "male".into(),
                    values: men.iter().map(|&m| m as f64).collect(),
                    latent: false,
                },
                Column {
                    name: "age".into(),
                    values: (0..men.len()).map(|i| 20.0 + i as f64).collect(),
                    latent: false,
                },
            ],
            Some("male".into()),
        )
        .unwrap()
    }

    #[test]
    fn half_composition_pairs_one_man_one_woman() {
        let x = gender_matrix(&[1, 0, 1, 0]);
        let pool = enumerate_group_formation(&x, &[0.5], 2, 100, RngSpec::new(4)).unwrap();
        for c in &pool.candidates {
            let g = c.as_groups().unwrap();
            for h in 0..2 {
                let men: usize = g.members(h).map(|i| (i % 2 == 0) as usize).sum();
                assert_eq!(men, 1);
            }
            let mut arms = g.arm_of_group.clone();
            arms.sort();
            assert_eq!(arms, vec![0, 1]);
        }
    }

    #[test]
    fn pure_compositions_vary_only_in_arms() {
        // groups {man},{man},{woman},{woman} are forced; each pair picks its treated group
        let x = gender_matrix(&[1, 1, 0, 0]);
        let pool =
            dedup(enumerate_group_formation(&x, &[1.0, 0.0], 1, 200, RngSpec::new(4)).unwrap());
        assert_eq!(pool.len(), 4);
        // four men into two labeled pairs: 3 partitions × 2 arm choices
        let x = gender_matrix(&[1, 1, 1, 1]);
        let pool = dedup(enumerate_group_formation(&x, &[1.0], 2, 500, RngSpec::new(4)).unwrap());
        assert_eq!(pool.len(), 6);
    }

    #[test]
    fn forced_grouping_leaves_only_arm_swap() {
        // two men must share a group of composition 1.0; the two women form the
        // other pair of composition 0.0 – with a single composition {1.0} and
        // two men, the only grouping is {0},{1}; dedup leaves the two arm swaps.
        let x = gender_matrix(&[1, 1]);
        let pool = dedup(enumerate_group_formation(&x, &[1.0], 1, 100, RngSpec::new(1)).unwrap());
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn infeasible_demand_reports_deficits() {
        let x = gender_matrix(&[1, 0, 0, 0]);
        let err = enumerate_group_formation(&x, &[0.5], 2, 10, RngSpec::new(1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("salient block needs 2, has 1 (-1)"), "{msg}");
        assert!(
            msg.contains("non-salient block needs 2, has 3 (+1)"),
            "{msg}"
        );
        assert!(enumerate_group_formation(&x, &[0.3], 2, 10, RngSpec::new(1)).is_err());
    }

    #[test]
    fn identical_specs_identical_pools() {
        let a = enumerate_complete(20, 2, 100, RngSpec::with_stream(11, 2)).unwrap();
        let b = enumerate_complete(20, 2, 100, RngSpec::with_stream(11, 2)).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }
}
