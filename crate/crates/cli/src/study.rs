//! Study configuration shared by the design subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use igr_core::design::MirrorGroup;
use igr_core::fitness::{FitnessConfig, RestrictionRule};
use igr_core::genetic::GaConfig;
use igr_core::inference::Statistic;
use igr_core::metrics::DesignContext;
use igr_core::{ClusterMap, CovariateMatrix, CovariateSidecar, InterferenceNetwork};
use igr_service::session::EnumerateRequest;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFiles {
    pub edges: PathBuf,
    #[serde(default)]
    pub coords: Option<PathBuf>,
}

/// Paths are resolved against the directory of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub covariates: PathBuf,
    #[serde(default)]
    pub sidecar: CovariateSidecar,
    #[serde(default)]
    pub network: Option<NetworkFiles>,
    #[serde(default)]
    pub clusters: Option<PathBuf>,
    #[serde(default)]
    pub enumerate: Option<EnumerateRequest>,
    #[serde(default)]
    pub fitness: Option<FitnessConfig>,
    #[serde(default)]
    pub rule: Option<RestrictionRule>,
    #[serde(default)]
    pub mirror_group: Option<MirrorGroup>,
    #[serde(default)]
    pub orbits: bool,
    #[serde(default)]
    pub allow_asymmetric: bool,
    #[serde(default)]
    pub ga: GaConfig,
    /// Seed for evolution and the official draw unless `--seed` is given.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub statistic: Statistic,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(skip)]
    base: PathBuf,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

impl Study {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            bail!("this command needs --config <study.json>");
        };
        let mut s: Study = read_json(path)?;
        s.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn context(&self) -> Result<DesignContext> {
        let path = self.resolve(&self.covariates);
        let x = CovariateMatrix::from_csv_path(&path, &self.sidecar)
            .with_context(|| format!("loading {}", path.display()))?;
        let n = x.n_units();
        let mut ctx = DesignContext::new(x);
        if let Some(net) = &self.network {
            let edges = InterferenceNetwork::edges_from_csv_reader(fs::File::open(
                self.resolve(&net.edges),
            )?)?;
            let mut g = InterferenceNetwork::from_edges(n, &edges)?;
            if let Some(c) = &net.coords {
                g = g.with_coords(InterferenceNetwork::coords_from_csv_reader(
                    fs::File::open(self.resolve(c))?,
                    n,
                )?)?;
            }
            ctx.network = Some(g);
        }
        if let Some(c) = &self.clusters {
            ctx.clusters = Some(ClusterMap::from_csv_path(&self.resolve(c))?);
        }
        Ok(ctx)
    }

    pub fn fitness(&self) -> Result<&FitnessConfig> {
        self.fitness
            .as_ref()
            .context("config has no \"fitness\" section")
    }

    pub fn rule(&self) -> Result<RestrictionRule> {
        self.rule.context("config has no \"rule\" section")
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        flag.or(self.seed)
            .context("give --seed or a \"seed\" in the config")
    }
}
