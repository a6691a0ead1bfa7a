//! Synthetic data generators and outcome models for the three vignettes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::allocation::Candidate;
use crate::data::{ClusterMap, Column, CovariateMatrix, InterferenceNetwork};
use crate::design::AcceptedDesign;
use crate::error::{invalid, Error, Result};
use crate::metrics::{matches_composition, DesignContext, ExposureSpec};
use crate::rng::RngSpec;

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderMode {
    /// Exactly half the sample are men, at random positions.
    FixedHalf,
    /// Each student is a man with probability 0.7.
    Bernoulli07,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSample {
    /// Observed columns (age, gender, major_1..3, hw, exam) and latent
    /// ability/confidence; gender is the salient column.
    pub covariates: CovariateMatrix,
}

impl StudentSample {
    pub fn exam(&self) -> &[f64] {
        &self.covariates.column("exam").expect("exam column").values
    }

    pub fn n_units(&self) -> usize {
        self.covariates.n_units()
    }
}

/// Students with unit-variance noise terms.
pub fn gen_students(n: usize, gender: GenderMode, rng: RngSpec) -> Result<StudentSample> {
    gen_students_with_noise(n, gender, 1.0, rng)
}

/// Students whose noise terms have standard deviation `noise_sd`; 0 gives
/// the noise-free identities (e.g. `exam = ability + confidence`).
pub fn gen_students_with_noise(
    n: usize,
    gender: GenderMode,
    noise_sd: f64,
    rng: RngSpec,
) -> Result<StudentSample> {
    if n < 2 {
        return invalid("need at least two students");
    }
    if gender == GenderMode::FixedHalf && !n.is_multiple_of(2) {
        return invalid("fixed-half gender needs an even sample size");
    }
    let mut r = rng.rng();
    let age: Vec<f64> = (0..n).map(|_| r.random_range(19.0..25.0)).collect();
    let male: Vec<f64> = match gender {
        GenderMode::FixedHalf => {
            use rand::seq::SliceRandom;
            let mut g: Vec<f64> = (0..n).map(|i| (i < n / 2) as u8 as f64).collect();
            g.shuffle(&mut r);
            g
        }
        GenderMode::Bernoulli07 => (0..n)
            .map(|_| (r.random::<f64>() < 0.7) as u8 as f64)
            .collect(),
    };
    let major: Vec<u8> = (0..n)
        .map(|_| {
            let u: f64 = r.random();
            if u < 0.5 {
                1
            } else if u < 0.8 {
                2
            } else {
                3
            }
        })
        .collect();
    let eps = {
        let normal = Normal::new(0.0, 1.0).unwrap();
        move |r: &mut crate::rng::IgrRng| noise_sd * normal.sample(r)
    };
    let (age_bar, age_sd) = (mean(&age), sample_sd(&age));
    let mut ability = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut hw = Vec::with_capacity(n);
    let mut exam = Vec::with_capacity(n);
    for i in 0..n {
        let man = male[i];
        let a =
            (age[i] - age_bar) / age_sd - 0.5 * man + (major[i] == 1) as u8 as f64 + eps(&mut r);
        let c = man + (major[i] == 2) as u8 as f64 + eps(&mut r);
        ability.push(a);
        confidence.push(c);
        hw.push(a + eps(&mut r));
        exam.push(a + c + eps(&mut r));
    }
    let col = |name: &str, values: Vec<f64>, latent: bool| Column {
        name: name.into(),
        values,
        latent,
    };
    let one_hot = |m: u8| {
        major
            .iter()
            .map(|&v| (v == m) as u8 as f64)
            .collect::<Vec<f64>>()
    };
    let covariates = CovariateMatrix::new(
        vec![
            col("age", age, false),
            col("gender", male, false),
            col("major_1", one_hot(1), false),
            col("major_2", one_hot(2), false),
            col("major_3", one_hot(3), false),
            col("hw", hw, false),
            col("exam", exam, false),
            col("ability", ability, true),
            col("confidence", confidence, true),
        ],
        Some("gender".into()),
    )?;
    Ok(StudentSample { covariates })
}

/// Effect sizes in outcome units: `d · SD(baseline)`.
pub fn effects_from_sizes(d: &[f64], baseline: &[f64]) -> Vec<f64> {
    let sd = sample_sd(baseline);
    d.iter().map(|v| v * sd).collect()
}

/// `Y_i = exam_i + tau[c(i)] · z_g(i)` where `c(i)` indexes the composition
/// of unit `i`'s group within `comps`.
pub fn outcome_groupform(
    s: &StudentSample,
    c: &Candidate,
    comps: &[f64],
    tau: &[f64],
) -> Result<Vec<f64>> {
    let g = c
        .as_groups()
        .ok_or_else(|| Error::Invalid("group-formation outcomes need a group design".into()))?;
    if comps.len() != tau.len() {
        return invalid("one effect per composition is required");
    }
    let salient = s.covariates.salient()?;
    let sizes = g.group_sizes();
    let mut with = vec![0usize; sizes.len()];
    for (i, &h) in g.group_of.iter().enumerate() {
        with[h as usize] += (salient[i] == 1.0) as usize;
    }
    let mut effect = Vec::with_capacity(sizes.len());
    for (h, (&n, &w)) in sizes.iter().zip(&with).enumerate() {
        let rho = w as f64 / n as f64;
        let l = comps
            .iter()
            .position(|&c| matches_composition(rho, c))
            .ok_or_else(|| {
                Error::Invalid(format!("group {h} has composition {rho} outside the list"))
            })?;
        effect.push(if g.arm_of_group[h] == 0 { 0.0 } else { tau[l] });
    }
    Ok(s.exam()
        .iter()
        .zip(&g.group_of)
        .map(|(&y, &h)| y + effect[h as usize])
        .collect())
}

/// `Y_i = exam_i + tau[z_i]`; `tau[0]` is the control arm's effect (0).
pub fn outcome_multiarm(s: &StudentSample, z: &[u8], tau: &[f64]) -> Result<Vec<f64>> {
    if z.len() != s.n_units() {
        return invalid("allocation and sample differ in size");
    }
    z.iter()
        .zip(s.exam())
        .map(|(&a, &y)| {
            tau.get(a as usize)
                .map(|t| y + t)
                .ok_or_else(|| Error::Invalid(format!("no effect given for arm {a}")))
        })
        .collect()
}

pub const SETTLEMENTS: [&str; 5] = ["Kibera", "Mukuru", "Huruma", "Korogocho", "Dandora"];

/// Approximate (latitude, longitude) of each settlement center.
pub const SETTLEMENT_CENTERS: [[f64; 2]; 5] = [
    [-1.3133, 36.7870],
    [-1.3167, 36.8870],
    [-1.2570, 36.8680],
    [-1.2390, 36.8830],
    [-1.2490, 36.9020],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettlementParams {
    pub n_units: usize,
    pub n_schools: usize,
    /// `mu[j][t]`: mean of covariate `j` in settlement `t`.
    pub mu: [[f64; 5]; 2],
    pub sigma_individual_scale: f64,
    pub sigma_school_scale: f64,
    /// Within-school, between-school same settlement, across settlements.
    pub theta: [f64; 3],
    pub gamma: f64,
    pub beta: [f64; 2],
    pub q: f64,
    /// Direct and spillover effects in units of `SD(Xβ)`.
    pub effect_size: f64,
    pub centers: [[f64; 2]; 5],
    pub grid_spacing: f64,
    pub jitter: f64,
}

impl SettlementParams {
    pub fn new(n_units: usize, n_schools: usize, gamma: f64) -> Self {
        Self {
            n_units,
            n_schools,
            mu: [[0.25, 0.0, 0.05, 0.0, 1.0], [0.25, 0.75, 0.0, 0.25, 0.0]],
            sigma_individual_scale: 0.1,
            sigma_school_scale: 0.2,
            theta: [0.2, 0.1, 0.01],
            gamma,
            beta: [1.0, 1.0],
            q: 0.25,
            effect_size: 0.3,
            centers: SETTLEMENT_CENTERS,
            grid_spacing: 0.004,
            jitter: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementSample {
    /// Homophily-transformed covariates `x1`, `x2`.
    pub covariates: CovariateMatrix,
    /// Unit network; unit coordinates are those of the unit's school.
    pub network: InterferenceNetwork,
    /// Unit to school.
    pub schools: ClusterMap,
    pub school_settlement: Vec<usize>,
    pub school_coords: Vec<[f64; 2]>,
    pub params: SettlementParams,
    /// Edge probabilities above 1 that were clamped.
    pub clamped: usize,
    /// `Xβ`.
    pub xb: Vec<f64>,
}

impl SettlementSample {
    pub fn context(&self) -> DesignContext {
        DesignContext {
            covariates: self.covariates.clone(),
            clusters: Some(self.schools.clone()),
            network: Some(self.network.clone()),
        }
    }

    /// `τ = δ = effect_size · SD(Xβ)`.
    pub fn effect(&self) -> f64 {
        self.params.effect_size * sample_sd(&self.xb)
    }
}

pub fn gen_settlements(p: &SettlementParams, rng: RngSpec) -> Result<SettlementSample> {
    if p.n_schools == 0 || !p.n_schools.is_multiple_of(5) {
        return invalid("school count must be a positive multiple of 5");
    }
    if !p.n_units.is_multiple_of(p.n_schools) || p.n_units / p.n_schools == 0 {
        return invalid("unit count must be a positive multiple of the school count");
    }
    if p.theta.iter().any(|t| !(*t >= 0.0)) || !(p.gamma >= 0.0) {
        return invalid("edge factors and gamma must be non-negative");
    }
    let per_settlement = p.n_schools / 5;
    let per_school = p.n_units / p.n_schools;
    let school_settlement: Vec<usize> = (0..p.n_schools).map(|s| s / per_settlement).collect();

    let mut r = rng.derive(&[0]).rng();
    let side = (per_settlement as f64).sqrt().ceil() as usize;
    let school_coords: Vec<[f64; 2]> = (0..p.n_schools)
        .map(|s| {
            let t = school_settlement[s];
            let local = s % per_settlement;
            let off = |g: usize| (g as f64 - (side as f64 - 1.0) / 2.0) * p.grid_spacing;
            let (gx, gy) = (local % side, local / side);
            [
                p.centers[t][0] + off(gx) + r.random_range(-p.jitter..=p.jitter),
                p.centers[t][1] + off(gy) + r.random_range(-p.jitter..=p.jitter),
            ]
        })
        .collect();

    let mut r = rng.derive(&[1]).rng();
    let mut xt = vec![vec![0.0; p.n_units]; 2];
    for j in 0..2 {
        let sd = sample_sd(&p.mu[j]);
        let (s_ind, s_sch) = (p.sigma_individual_scale * sd, p.sigma_school_scale * sd);
        let school_mean: Vec<f64> = (0..p.n_schools)
            .map(|s| {
                p.mu[j][school_settlement[s]]
                    + s_sch * r.sample::<f64, _>(rand_distr::StandardNormal)
            })
            .collect();
        for i in 0..p.n_units {
            xt[j][i] = school_mean[i / per_school]
                + s_ind * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }

    let d2 = |a: usize, b: usize| {
        let (u, v) = (school_coords[a], school_coords[b]);
        (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)
    };
    let mut dmin = f64::INFINITY;
    for a in 0..p.n_schools {
        for b in (a + 1)..p.n_schools {
            dmin = dmin.min(d2(a, b));
        }
    }
    let mut clamped = 0usize;
    let mut prob = vec![vec![0.0; p.n_schools]; p.n_schools];
    for a in 0..p.n_schools {
        for b in 0..p.n_schools {
            let raw = if a == b {
                p.theta[0]
            } else {
                let dt = d2(a, b) / dmin;
                let th = if school_settlement[a] == school_settlement[b] {
                    p.theta[1]
                } else {
                    p.theta[2]
                };
                th * dt.powf(-p.gamma)
            };
            if raw > 1.0 && a < b {
                clamped += 1;
            }
            prob[a][b] = raw.min(1.0);
        }
    }
    let mut r = rng.derive(&[2]).rng();
    let mut edges = Vec::new();
    for i in 0..p.n_units {
        let si = i / per_school;
        for j in (i + 1)..p.n_units {
            if r.random::<f64>() < prob[si][j / per_school] {
                edges.push((i, j));
            }
        }
    }
    let unit_coords: Vec<[f64; 2]> = (0..p.n_units)
        .map(|i| school_coords[i / per_school])
        .collect();
    let network = InterferenceNetwork::from_edges(p.n_units, &edges)?.with_coords(unit_coords)?;

    // x = (A + I) x̃
    let mut x = xt.clone();
    for (i, j) in network.edges() {
        for c in 0..2 {
            x[c][i] += xt[c][j];
            x[c][j] += xt[c][i];
        }
    }
    let xb: Vec<f64> = (0..p.n_units)
        .map(|i| p.beta[0] * x[0][i] + p.beta[1] * x[1][i])
        .collect();
    let mut cols = x.into_iter();
    let covariates = CovariateMatrix::new(
        vec![
            Column {
                name: "x1".into(),
                values: cols.next().unwrap(),
                latent: false,
            },
            Column {
                name: "x2".into(),
                values: cols.next().unwrap(),
                latent: false,
            },
        ],
        None,
    )?;
    let schools = ClusterMap::new(
        (0..p.n_units).map(|i| (i / per_school) as u32).collect(),
        p.n_schools,
    )?;
    Ok(SettlementSample {
        covariates,
        network,
        schools,
        school_settlement,
        school_coords,
        params: p.clone(),
        clamped,
        xb,
    })
}

/// `Y_i = (Xβ)_i + τ z_i + δ · exposed_i · (1 − z_i)` with exposure defined by
/// strictly more than `q · |N(i)|` treated neighbors.
pub fn outcome_interference(
    xb: &[f64],
    net: &InterferenceNetwork,
    z: &[u8],
    tau: f64,
    delta: f64,
    q: f64,
) -> Result<Vec<f64>> {
    if z.len() != xb.len() || z.len() != net.n_units() {
        return invalid("allocation, baseline and network differ in size");
    }
    let exp = ExposureSpec::FractionQ { q };
    exp.validate()?;
    Ok((0..z.len())
        .map(|i| {
            let treated = z[i] == 1;
            let spill = if !treated && exp.exposed(net, z, i) {
                delta
            } else {
                0.0
            };
            xb[i] + if treated { tau } else { 0.0 } + spill
        })
        .collect())
}

/// Analytic bias of the difference-in-means estimator of the total effect
/// under the accepted set: `−δ / N_c · E[#exposed controls]`, with the
/// expectation taken exactly over the uniform accepted set.
pub fn tate_bias_oracle(
    design: &AcceptedDesign,
    ctx: &DesignContext,
    delta: f64,
    q: f64,
) -> Result<f64> {
    let net = ctx
        .network
        .as_ref()
        .ok_or_else(|| Error::Invalid("bias oracle needs a network".into()))?;
    let exp = ExposureSpec::FractionQ { q };
    exp.validate()?;
    let mut n_c = None;
    let mut total = 0.0;
    let accepted = design.accepted();
    for c in &accepted {
        let z = ctx.unit_arms(c)?;
        let controls = z.iter().filter(|&&a| a == 0).count();
        match n_c {
            None => n_c = Some(controls),
            Some(k) if k != controls => {
                return invalid("control-arm size varies across the accepted set")
            }
            _ => {}
        }
        let exposed = (0..z.len())
            .filter(|&i| z[i] == 0 && exp.exposed(net, &z, i))
            .count();
        total += exposed as f64;
    }
    let n_c = n_c.ok_or_else(|| Error::Invalid("empty accepted set".into()))?;
    if n_c == 0 {
        return invalid("no control units");
    }
    Ok(-delta / n_c as f64 * (total / accepted.len() as f64))
}
