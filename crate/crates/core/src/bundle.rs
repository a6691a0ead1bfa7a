//! Pre-registration bundles.
//!
//! A bundle directory holds `manifest.json` and `allocations.csv`. The digest
//! is SHA-256 over the manifest JSON (keys sorted, `digest` removed), a
//! newline, and the CSV bytes. Official draws are appended to `audit.jsonl`,
//! which is outside the digest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{
    dedup, Allocation, AllocationPool, Candidate, GroupDesign, Level, Provenance,
};
use crate::design::{AcceptedDesign, DrawRecord, MirrorGroup};
use crate::enumerate::Mechanism;
use crate::error::{Error, Result};
use crate::fitness::{FitnessConfig, MinMax, RestrictionRule};
use crate::CORE_VERSION;

pub const FORMAT: &str = "igr-bundle/1";
pub const MANIFEST: &str = "manifest.json";
pub const ALLOCATIONS: &str = "allocations.csv";
pub const AUDIT: &str = "audit.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    /// Every pool member is written to the CSV.
    Matrix,
    /// Only accepted rows are written; the pool is regenerated from the
    /// recorded mechanism and seed.
    CodeReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Labels,
    Groups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub core_version: String,
    pub mode: BundleMode,
    pub candidate_kind: CandidateKind,
    pub arms: u8,
    pub level: Level,
    pub length: usize,
    #[serde(default)]
    pub n_groups: Option<usize>,
    pub pool_size: usize,
    pub accepted: usize,
    pub fitness: FitnessConfig,
    pub rule: RestrictionRule,
    pub provenance: Provenance,
    pub ranges: Vec<MinMax>,
    #[serde(with = "crate::ext::real")]
    pub threshold: f64,
    pub mirrors_added: bool,
    #[serde(default)]
    pub mirror_group: Option<MirrorGroup>,
    #[serde(default)]
    pub digest: Option<String>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub index: usize,
    pub accepted: bool,
    pub probability: f64,
    pub score: f64,
    pub candidate: Candidate,
}

fn bundle_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Bundle(msg.into()))
}

fn manifest_bytes(m: &Manifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(m)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("digest");
    }
    Ok(serde_json::to_vec(&v)?)
}

pub fn compute_digest(m: &Manifest, csv: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest_bytes(m)?);
    h.update(b"\n");
    h.update(csv);
    Ok(hex::encode(h.finalize()))
}

fn header(m: &Manifest) -> Vec<String> {
    let mut h: Vec<String> = ["index", "accepted", "probability", "score"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    match m.candidate_kind {
        CandidateKind::Labels => h.extend((0..m.length).map(|i| format!("l{i}"))),
        CandidateKind::Groups => {
            h.extend((0..m.length).map(|i| format!("g{i}")));
            h.extend((0..m.n_groups.unwrap_or(0)).map(|i| format!("a{i}")));
        }
    }
    h
}

fn write_csv(d: &AcceptedDesign, m: &Manifest) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(m))?;
    for (i, c) in d.pool.candidates.iter().enumerate() {
        if m.mode == BundleMode::CodeReference && !d.accept_mask[i] {
            continue;
        }
        let mut rec = vec![
            i.to_string(),
            (d.accept_mask[i] as u8).to_string(),
            d.probabilities[i].to_string(),
            d.scores[i].to_string(),
        ];
        match c {
            Candidate::Labels(a) => rec.extend(a.labels.iter().map(u8::to_string)),
            Candidate::Groups(g) => {
                rec.extend(g.group_of.iter().map(u32::to_string));
                rec.extend(g.arm_of_group.iter().map(u8::to_string));
            }
        }
        w.write_record(rec)?;
    }
    w.into_inner().map_err(|e| Error::Bundle(e.to_string()))
}

fn manifest_of(d: &AcceptedDesign, mode: BundleMode) -> Result<Manifest> {
    let first = d
        .pool
        .candidates
        .first()
        .ok_or_else(|| Error::Bundle("empty pool".into()))?;
    if mode == BundleMode::CodeReference && !d.pool.provenance.replayable {
        return bundle_err("code-reference bundles need a replayable enumeration");
    }
    let (kind, n_groups) = match first {
        Candidate::Labels(_) => (CandidateKind::Labels, None),
        Candidate::Groups(g) => (CandidateKind::Groups, Some(g.n_groups())),
    };
    Ok(Manifest {
        format: FORMAT.into(),
        core_version: CORE_VERSION.into(),
        mode,
        candidate_kind: kind,
        arms: first.arms(),
        level: first.level(),
        length: first.len(),
        n_groups,
        pool_size: d.pool.len(),
        accepted: d.n_accepted(),
        fitness: d.fitness.clone(),
        rule: d.rule,
        provenance: d.pool.provenance.clone(),
        ranges: d.ranges.clone(),
        threshold: d.threshold,
        mirrors_added: d.mirrors_added,
        mirror_group: d.mirror_group,
        digest: None,
    })
}

/// Write the bundle into `dir` and lock the design. Returns the digest.
pub fn preregister(design: &mut AcceptedDesign, dir: &Path, mode: BundleMode) -> Result<String> {
    if design.is_locked() {
        return Err(Error::AlreadyLocked);
    }
    let mut m = manifest_of(design, mode)?;
    let csv = write_csv(design, &m)?;
    let digest = compute_digest(&m, &csv)?;
    m.digest = Some(digest.clone());
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ALLOCATIONS), &csv)?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&m)?)?;
    design.bundle_hash = Some(digest.clone());
    Ok(digest)
}

/// Append an official draw to the bundle's audit trail.
pub fn append_draw(dir: &Path, record: &DrawRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(AUDIT))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_audit(dir: &Path) -> Result<Vec<DrawRecord>> {
    let p = dir.join(AUDIT);
    if !p.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(p)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn parse_rows(m: &Manifest, csv: &[u8]) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(csv);
    let expect = header(m);
    let got: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if got != expect {
        return bundle_err("allocation CSV header does not match the manifest");
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            f(i).parse::<f64>()
                .map_err(|_| Error::Bundle(format!("bad number {:?}", f(i))))
        };
        let index = f(0)
            .parse::<usize>()
            .map_err(|_| Error::Bundle("bad index".into()))?;
        let accepted = match f(1) {
            "1" => true,
            "0" => false,
            other => return bundle_err(format!("bad accepted flag {other:?}")),
        };
        let ints = |from: usize, to: usize| -> Result<Vec<u32>> {
            (from..to)
                .map(|i| {
                    f(i).parse::<u32>()
                        .map_err(|_| Error::Bundle(format!("bad label {:?}", f(i))))
                })
                .collect()
        };
        let candidate = match m.candidate_kind {
            CandidateKind::Labels => {
                let labels = ints(4, 4 + m.length)?
                    .into_iter()
                    .map(|v| v as u8)
                    .collect();
                Candidate::Labels(
                    Allocation::new(labels, m.arms, m.level)
                        .map_err(|e| Error::Bundle(e.to_string()))?,
                )
            }
            CandidateKind::Groups => {
                let g = m.n_groups.unwrap_or(0);
                let group_of = ints(4, 4 + m.length)?;
                let arms = ints(4 + m.length, 4 + m.length + g)?
                    .into_iter()
                    .map(|v| v as u8)
                    .collect();
                Candidate::Groups(GroupDesign {
                    group_of,
                    arm_of_group: arms,
                    arms: m.arms,
                })
            }
        };
        rows.push(Row {
            index,
            accepted,
            probability: num(2)?,
            score: num(3)?,
            candidate,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Manifest file bytes as read.
    pub manifest_raw: Vec<u8>,
    pub rows: Vec<Row>,
    pub csv: Vec<u8>,
}

pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let raw = fs::read(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Bundle(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return bundle_err(format!("unknown bundle format {:?}", manifest.format));
    }
    let csv = fs::read(dir.join(ALLOCATIONS))?;
    let rows = parse_rows(&manifest, &csv)?;
    Ok(LoadedBundle {
        dir: dir.to_path_buf(),
        manifest,
        manifest_raw: raw,
        rows,
        csv,
    })
}

fn replay_pool(p: &Provenance) -> Result<AllocationPool> {
    let mech: Mechanism = serde_json::from_value(p.parameters.clone())
        .map_err(|e| Error::Bundle(format!("provenance has no replayable mechanism: {e}")))?;
    let rng = p
        .rng
        .ok_or_else(|| Error::Bundle("provenance has no seed".into()))?;
    let pool = mech.draw(p.drawn, rng)?;
    Ok(if p.before_dedup.is_some() {
        dedup(pool)
    } else {
        pool
    })
}

impl LoadedBundle {
    pub fn verify_digest(&self) -> Result<()> {
        let expected = self
            .manifest
            .digest
            .clone()
            .ok_or_else(|| Error::Bundle("manifest has no digest".into()))?;
        let actual = compute_digest(&self.manifest, &self.csv)?;
        if expected != actual {
            return Err(Error::DigestMismatch { expected, actual });
        }
        // edits that parse to the same manifest (spacing, number spelling)
        if serde_json::to_vec_pretty(&self.manifest)? != self.manifest_raw {
            return bundle_err("manifest bytes differ from the canonical serialization");
        }
        Ok(())
    }

    fn check_schema(&self) -> Result<()> {
        let m = &self.manifest;
        let accepted: Vec<&Row> = self.rows.iter().filter(|r| r.accepted).collect();
        if accepted.len() != m.accepted {
            return bundle_err(format!(
                "{} accepted rows, manifest says {}",
                accepted.len(),
                m.accepted
            ));
        }
        let expect_rows = match m.mode {
            BundleMode::Matrix => m.pool_size,
            BundleMode::CodeReference => m.accepted,
        };
        if self.rows.len() != expect_rows {
            return bundle_err(format!("{} rows, expected {expect_rows}", self.rows.len()));
        }
        if self.rows.iter().any(|r| r.index >= m.pool_size) {
            return bundle_err("row index outside the pool");
        }
        if self
            .rows
            .iter()
            .any(|r| !r.accepted && r.probability != 0.0)
        {
            return bundle_err("rejected allocation with positive probability");
        }
        let total: f64 = accepted.iter().map(|r| r.probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bundle_err(format!("accepted probabilities sum to {total}"));
        }
        Ok(())
    }

    /// Regenerate the enumerated pool from the recorded seed and compare.
    pub fn verify_replay(&self) -> Result<()> {
        let p = &self.manifest.provenance;
        if !p.replayable {
            return bundle_err("pool was not produced by a replayable mechanism");
        }
        let pool = replay_pool(p)?;
        let enumerated = pool.len();
        for r in &self.rows {
            if r.index < enumerated && pool.candidates[r.index] != r.candidate {
                return bundle_err(format!("row {} differs from the replayed pool", r.index));
            }
        }
        if self.manifest.pool_size != enumerated + p.appended_mirrors {
            return bundle_err("replayed pool size does not match the manifest");
        }
        Ok(())
    }

    /// Rebuild the locked design. Code-reference bundles replay the pool.
    pub fn design(&self) -> Result<AcceptedDesign> {
        let m = &self.manifest;
        let n = m.pool_size;
        let mut candidates: Vec<Option<Candidate>> = vec![None; n];
        let mut scores = vec![f64::NAN; n];
        let mut mask = vec![false; n];
        let mut probs = vec![0.0; n];
        if m.mode == BundleMode::CodeReference {
            for (i, c) in replay_pool(&m.provenance)?
                .candidates
                .into_iter()
                .enumerate()
            {
                if i < n {
                    candidates[i] = Some(c);
                }
            }
        }
        for r in &self.rows {
            candidates[r.index] = Some(r.candidate.clone());
            scores[r.index] = r.score;
            mask[r.index] = r.accepted;
            probs[r.index] = r.probability;
        }
        let candidates = candidates
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Bundle("bundle does not determine every pool member".into()))?;
        Ok(AcceptedDesign {
            pool: AllocationPool {
                candidates,
                provenance: m.provenance.clone(),
            },
            scores,
            accept_mask: mask,
            probabilities: probs,
            fitness: m.fitness.clone(),
            rule: m.rule,
            ranges: m.ranges.clone(),
            threshold: m.threshold,
            mirrors_added: m.mirrors_added,
            mirror_group: m.mirror_group,
            bundle_hash: m.digest.clone(),
            audit: read_audit(&self.dir)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, r: Result<()>) -> Check {
    Check {
        name: name.into(),
        passed: r.is_ok(),
        detail: r
            .err()
            .map(|e| e.to_string())
            .unwrap_or_else(|| "ok".into()),
    }
}

/// Check a bundle. Unreadable or unparseable bundles fail the schema check.
pub fn verify_bundle(dir: &Path, replay: bool) -> Result<VerifyReport> {
    let loaded = match load_bundle(dir) {
        Ok(b) => b,
        Err(Error::Io(e)) => return Err(Error::Io(e)),
        Err(e) => {
            return Ok(VerifyReport {
                checks: vec![check("schema", Err(e))],
                warnings: Vec::new(),
            })
        }
    };
    let mut checks = vec![
        check("schema", loaded.check_schema()),
        check("digest", loaded.verify_digest()),
    ];
    let mut warnings = Vec::new();
    if loaded.manifest.core_version != CORE_VERSION {
        warnings.push(format!(
            "bundle written by core {} but this is core {}; replay may differ",
            loaded.manifest.core_version, CORE_VERSION
        ));
    }
    if replay {
        checks.push(check("replay", loaded.verify_replay()));
    }
    Ok(VerifyReport { checks, warnings })
}
