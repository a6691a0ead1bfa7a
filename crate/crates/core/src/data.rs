//! Study inputs: covariates, cluster membership and the interference network.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub latent: bool,
}

/// `N × p` baseline covariates with an optional binary salient attribute.
///
/// Latent columns are carried along (the simulators need them) but never
/// enter an inspection metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    n_units: usize,
    columns: Vec<Column>,
    salient: Option<String>,
}

/// Sidecar describing how to interpret a covariate CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSidecar {
    #[serde(default)]
    pub salient: Option<String>,
    #[serde(default)]
    pub latent: Vec<String>,
    /// Column holding unit identifiers; dropped from the covariates.
    #[serde(default)]
    pub id_column: Option<String>,
}

impl CovariateMatrix {
    pub fn new(columns: Vec<Column>, salient: Option<String>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return invalid("covariate matrix needs at least one column");
        };
        let n = first.values.len();
        if n < 2 {
            return invalid(format!("need at least 2 units, got {n}"));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if c.values.len() != n {
                return invalid(format!(
                    "column '{}' has {} values, expected {n}",
                    c.name,
                    c.values.len()
                ));
            }
            if !seen.insert(c.name.as_str()) {
                return invalid(format!("duplicate column name '{}'", c.name));
            }
            if let Some(v) = c.values.iter().find(|v| !v.is_finite()) {
                return invalid(format!("column '{}' contains non-finite value {v}", c.name));
            }
        }
        if let Some(s) = &salient {
            let Some(col) = columns.iter().find(|c| &c.name == s) else {
                return invalid(format!("salient column '{s}' not found"));
            };
            if col.values.iter().any(|&v| v != 0.0 && v != 1.0) {
                return invalid(format!("salient column '{s}' must be binary 0/1"));
            }
        }
        Ok(Self {
            n_units: n,
            columns,
            salient,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn salient_name(&self) -> Option<&str> {
        self.salient.as_deref()
    }

    pub fn salient(&self) -> Result<&[f64]> {
        let name = self.salient.as_deref().ok_or(Error::MissingSalient)?;
        Ok(&self.column(name).ok_or(Error::MissingSalient)?.values)
    }

    /// Columns that feed balance metrics: observed, optionally without the
    /// salient attribute.
    pub fn balance_columns(&self, exclude_salient: bool) -> Vec<&Column> {
        self.columns
            .iter()
            .filter(|c| !c.latent)
            .filter(|c| !(exclude_salient && self.salient.as_deref() == Some(c.name.as_str())))
            .collect()
    }

    pub fn from_csv_reader<R: Read>(reader: R, sidecar: &CovariateSidecar) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                if sidecar.id_column.as_deref() == Some(headers[j].as_str()) {
                    continue;
                }
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Invalid(format!(
                        "row {}: column '{}' value '{field}' is not a number",
                        row + 2,
                        headers[j]
                    ))
                })?;
                values[j].push(v);
            }
        }
        for l in &sidecar.latent {
            if !headers.contains(l) {
                return invalid(format!("latent column '{l}' not found"));
            }
        }
        let columns = headers
            .into_iter()
            .zip(values)
            .filter(|(h, _)| sidecar.id_column.as_deref() != Some(h.as_str()))
            .map(|(name, values)| Column {
                latent: sidecar.latent.contains(&name),
                name,
                values,
            })
            .collect();
        Self::new(columns, sidecar.salient.clone())
    }

    pub fn from_csv_path(path: &Path, sidecar: &CovariateSidecar) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, sidecar)
    }

    pub fn sidecar(&self) -> CovariateSidecar {
        CovariateSidecar {
            salient: self.salient.clone(),
            latent: self
                .columns
                .iter()
                .filter(|c| c.latent)
                .map(|c| c.name.clone())
                .collect(),
            id_column: None,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for i in 0..self.n_units {
            w.write_record(self.columns.iter().map(|c| c.values[i].to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unit-to-cluster membership with dense cluster ids `0..C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    unit_to_cluster: Vec<u32>,
    n_clusters: usize,
}

impl ClusterMap {
    pub fn new(unit_to_cluster: Vec<u32>, n_clusters: usize) -> Result<Self> {
        let mut sizes = vec![0usize; n_clusters];
        for (i, &c) in unit_to_cluster.iter().enumerate() {
            let Some(s) = sizes.get_mut(c as usize) else {
                return invalid(format!("unit {i} has cluster id {c} >= {n_clusters}"));
            };
            *s += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return invalid(format!("cluster {empty} is empty"));
        }
        Ok(Self {
            unit_to_cluster,
            n_clusters,
        })
    }

    /// Builds a map from arbitrary cluster labels, numbering them in sorted order.
    pub fn from_labels(labels: &[i64]) -> Result<Self> {
        let ids: BTreeMap<i64, u32> = labels
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i as u32))
            .collect();
        Self::new(labels.iter().map(|l| ids[l]).collect(), ids.len())
    }

    pub fn n_units(&self) -> usize {
        self.unit_to_cluster.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn cluster_of(&self, unit: usize) -> u32 {
        self.unit_to_cluster[unit]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.unit_to_cluster
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters];
        for &c in &self.unit_to_cluster {
            s[c as usize] += 1;
        }
        s
    }

    /// Reads `unit_id,cluster_id` rows; unit ids must cover `0..N`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows: Vec<(usize, i64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return invalid("cluster CSV must have exactly two columns: unit_id, cluster_id");
            }
            let u = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad unit id '{}'", &rec[0])))?;
            let c = rec[1]
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Invalid(format!("bad cluster id '{}'", &rec[1])))?;
            rows.push((u, c));
        }
        rows.sort_by_key(|r| r.0);
        for (expect, (u, _)) in rows.iter().enumerate() {
            if *u != expect {
                return invalid(format!(
                    "unit ids must be 0..N without gaps; missing {expect}"
                ));
            }
        }
        let labels: Vec<i64> = rows.into_iter().map(|r| r.1).collect();
        Self::from_labels(&labels)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "cluster_id"])?;
        for (i, c) in self.unit_to_cluster.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Undirected interference network stored as sorted adjacency lists, plus
/// optional 2-D coordinates per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceNetwork {
    neighbors: Vec<Vec<u32>>,
    #[serde(default)]
    coords: Option<Vec<[f64; 2]>>,
}

impl InterferenceNetwork {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return invalid(format!("edge ({a},{b}) out of range for {n} units"));
            }
            if a == b {
                continue;
            }
            neighbors[a].push(b as u32);
            neighbors[b].push(a as u32);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            neighbors,
            coords: None,
        })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); n],
            coords: None,
        }
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.neighbors.len() {
            return invalid(format!(
                "{} coordinates for {} units",
                coords.len(),
                self.neighbors.len()
            ));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(i, list)| {
            list.iter()
                .filter(move |&&j| (j as usize) > i)
                .map(move |&j| (i, j as usize))
        })
    }

    pub fn edges_from_csv_reader<R: Read>(reader: R) -> Result<Vec<(usize, usize)>> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() < 2 {
                return invalid("edge CSV rows need two unit ids");
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("bad unit id '{s}' in edge list")))
            };
            out.push((parse(&rec[0])?, parse(&rec[1])?));
        }
        Ok(out)
    }

    pub fn coords_from_csv_reader<R: Read>(reader: R, n: usize) -> Result<Vec<[f64; 2]>> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut out = vec![None; n];
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return invalid("coordinate CSV must have columns unit_id, x, y");
            }
            let u: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad unit id '{}'", &rec[0])))?;
            let x: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad coordinate '{}'", &rec[1])))?;
            let y: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad coordinate '{}'", &rec[2])))?;
            if u >= n {
                return invalid(format!("unit id {u} out of range"));
            }
            out[u] = Some([x, y]);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Invalid(format!("no coordinates for unit {i}"))))
            .collect()
    }

    pub fn write_edges_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["source", "target"])?;
        for (a, b) in self.edges() {
            w.write_record([a.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_coords_csv<W: Write>(&self, writer: W) -> Result<()> {
        let Some(coords) = &self.coords else {
            return invalid("network has no coordinates");
        };
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "x", "y"])?;
        for (i, c) in coords.iter().enumerate() {
            w.write_record([i.to_string(), c[0].to_string(), c[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_sidecar() {
        let csv = "id,age,male,skill\n0,20,1,0.5\n1,22,0,1.5\n2,24,1,2.0\n";
        let side = CovariateSidecar {
            salient: Some("male".into()),
            latent: vec!["skill".into()],
            id_column: Some("id".into()),
        };
        let x = CovariateMatrix::from_csv_reader(csv.as_bytes(), &side).unwrap();
        assert_eq!(x.n_units(), 3);
        assert_eq!(x.columns().len(), 3);
        assert_eq!(x.salient().unwrap(), &[1.0, 0.0, 1.0]);
        let names: Vec<_> = x
            .balance_columns(true)
            .iter()
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(names, vec!["age"]);
        let names: Vec<_> = x
            .balance_columns(false)
            .iter()
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(names, vec!["age", "male"]);
    }

    #[test]
    fn rejects_bad_matrices() {
        let col = |n: &str, v: Vec<f64>| Column {
            name: n.into(),
            values: v,
            latent: false,
        };
        assert!(CovariateMatrix::new(vec![col("a", vec![1.0])], None).is_err());
        assert!(CovariateMatrix::new(
            vec![col("a", vec![1.0, 2.0]), col("a", vec![1.0, 2.0])],
            None
        )
        .is_err());
        assert!(
            CovariateMatrix::new(vec![col("a", vec![1.0, 2.0]), col("b", vec![1.0])], None)
                .is_err()
        );
        assert!(CovariateMatrix::new(vec![col("s", vec![1.0, 2.0])], Some("s".into())).is_err());
        assert!(matches!(
            CovariateMatrix::new(vec![col("a", vec![1.0, 2.0])], None)
                .unwrap()
                .salient(),
            Err(Error::MissingSalient)
        ));
    }

    #[test]
    fn cluster_csv_densifies_labels() {
        let csv = "unit_id,cluster_id\n1,70\n0,10\n2,70\n3,40\n";
        let m = ClusterMap::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(m.as_slice(), &[0, 2, 2, 1]);
        assert_eq!(m.sizes(), vec![1, 1, 2]);
        assert!(ClusterMap::new(vec![0, 0, 2], 3).is_err());
    }

    #[test]
    fn network_is_symmetric_without_loops() {
        let net = InterferenceNetwork::from_edges(4, &[(0, 1), (1, 0), (2, 2), (1, 3)]).unwrap();
        assert_eq!(net.neighbors(1), &[0, 3]);
        assert_eq!(net.neighbors(2), &[] as &[u32]);
        assert_eq!(net.n_edges(), 2);
        let mut buf = Vec::new();
        net.write_edges_csv(&mut buf).unwrap();
        let edges = InterferenceNetwork::edges_from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(InterferenceNetwork::from_edges(4, &edges).unwrap(), net);
    }
}
