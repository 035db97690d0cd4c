//! TOML experiment configuration.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! progeny = "binary"          # binary | geometric | poisson1 | path, or a pmf list
//! step = "srw"                # srw | lazy_srw (uses `dim`), srw_dK, lazy_srw_dK,
//!                             # or [{ x = [1, 0], p = 0.25 }, ...]
//! dim = 6
//! n = [64, 128, 256, 512]
//! m_factor = 2                # m = m_factor * n
//! replicates = 100
//! seed = 1
//! threads = 0                 # 0: all cores
//! height_cap = true           # grow side trees only up to level n in scan-r
//! delta_n = [128, 256, 512, 1024]
//! k = 2
//! c0 = 1.0
//! n_star = 1
//! blocks = false              # block detectors in scan-r (needs 24 | delta_n)
//! restricted = true           # restricted two-tree sampling
//! x = [0, 0, 0, 0, 0, 0]      # separation of the two-tree roots
//! gamma_x = [[0, 0, 0, 0, 0, 0]]
//! theta = [0.1, 0.25, 0.5, 1.0]
//!
//! [solver]
//! rel_tol = 1e-10
//! max_iter_factor = 20
//! reduce = true
//!
//! [output]
//! csv = "scan.csv"            # default: standard output
//! records = "records.jsonl"   # optional JSON-lines block/intersection records
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HarnessError, Result};
use crate::branching::ProgenyLaw;
use crate::resistance::SolverOptions;
use crate::walk::{Site, StepLaw, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProgenySpec {
    Preset(String),
    Pmf(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportPoint {
    pub x: Vec<i32>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSpec {
    Preset(String),
    Support(Vec<SupportPoint>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub max_iter_factor: usize,
    pub reduce: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { rel_tol: d.rel_tol, max_iter_factor: d.max_iter_factor, reduce: d.reduce }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            rel_tol: self.rel_tol,
            max_iter_factor: self.max_iter_factor,
            reduce: self.reduce,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub progeny: ProgenySpec,
    pub step: StepSpec,
    pub dim: Option<usize>,
    pub n: Vec<usize>,
    pub m_factor: usize,
    pub replicates: usize,
    pub seed: u64,
    pub threads: usize,
    pub height_cap: bool,
    pub delta_n: Vec<usize>,
    pub k: usize,
    pub c0: f64,
    pub n_star: usize,
    pub blocks: bool,
    pub restricted: bool,
    pub x: Vec<i32>,
    pub gamma_x: Vec<Vec<i32>>,
    pub theta: Vec<f64>,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            progeny: ProgenySpec::Preset("binary".into()),
            step: StepSpec::Preset("srw".into()),
            dim: None,
            n: vec![64, 128, 256, 512],
            m_factor: 2,
            replicates: 100,
            seed: 1,
            threads: 0,
            height_cap: true,
            delta_n: vec![128, 256, 512, 1024],
            k: 2,
            c0: 1.0,
            n_star: 1,
            blocks: false,
            restricted: true,
            x: Vec::new(),
            gamma_x: vec![Vec::new()],
            theta: vec![0.1, 0.25, 0.5, 1.0],
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// The laws a configuration describes.
#[derive(Debug, Clone)]
pub struct Model {
    pub progeny: ProgenyLaw,
    pub step: StepLaw,
}

const DEFAULT_DIM: usize = 6;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Replaces a dimension-suffixed preset by its family so that `dim`
    /// takes effect.
    pub fn set_dim(&mut self, dim: usize) {
        self.dim = Some(dim);
        if let StepSpec::Preset(name) = &mut self.step {
            for family in ["lazy_srw", "srw"] {
                if name.starts_with(&format!("{family}_d")) {
                    *name = family.to_string();
                    break;
                }
            }
        }
    }

    pub fn progeny_law(&self) -> Result<ProgenyLaw> {
        let law = match &self.progeny {
            ProgenySpec::Preset(name) => ProgenyLaw::from_preset(name)?,
            ProgenySpec::Pmf(pmf) => ProgenyLaw::new(pmf.clone())?,
        };
        law.ensure_critical()?;
        Ok(law)
    }

    pub fn step_law(&self) -> Result<StepLaw> {
        let law = match &self.step {
            StepSpec::Preset(name) => match name.as_str() {
                "srw" => StepLaw::srw(self.dim.unwrap_or(DEFAULT_DIM))?,
                "lazy_srw" => StepLaw::lazy_srw(self.dim.unwrap_or(DEFAULT_DIM))?,
                other => StepLaw::from_preset(other)?,
            },
            StepSpec::Support(points) => {
                let dim = match (self.dim, points.first()) {
                    (Some(d), _) => d,
                    (None, Some(p)) => p.x.len(),
                    (None, None) => return Err(HarnessError::Config("empty step support".into())),
                };
                let support: Vec<(Vec<i32>, f64)> = points.iter().map(|p| (p.x.clone(), p.p)).collect();
                StepLaw::new(dim, &support)?
            }
        };
        if let Some(d) = self.dim {
            if d != law.dim() {
                return Err(HarnessError::Config(format!("dim = {d} but the step law lives in dimension {}", law.dim())));
            }
        }
        Ok(law)
    }

    /// Loads both laws and checks every invariant of the configuration.
    pub fn validate(&self) -> Result<Model> {
        let progeny = self.progeny_law()?;
        let step = self.step_law()?;
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.m_factor < 2 {
            return bad(format!("m_factor = {} must be >= 2 (m >= 2n)", self.m_factor));
        }
        if self.n.iter().any(|&n| n == 0) {
            return bad("every n must be >= 1".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be >= 1".into());
        }
        if !(self.solver.rel_tol > 0.0) || self.solver.max_iter_factor == 0 {
            return bad("solver tolerances must be positive".into());
        }
        if self.delta_n.iter().any(|&d| d < 12) {
            return bad("every delta_n must be >= 12".into());
        }
        if self.blocks {
            if let Some(d) = self.delta_n.iter().find(|&&d| d % 24 != 0) {
                return bad(format!("delta_n = {d} must be divisible by 24 when block detectors are enabled"));
            }
            if self.k < 2 || !(self.c0 > 0.0) {
                return bad("block detectors need k >= 2 and c0 > 0".into());
            }
        }
        if self.theta.iter().any(|t| !(*t > 0.0)) {
            return bad("theta values must be positive".into());
        }
        self.site(&self.x, step.dim())?;
        for x in &self.gamma_x {
            self.site(x, step.dim())?;
        }
        Ok(Model { progeny, step })
    }

    /// A site from a coordinate list, zero-padded to `dim`.
    pub fn site(&self, coords: &[i32], dim: usize) -> Result<Site> {
        if coords.len() > dim || dim > MAX_DIM {
            return Err(HarnessError::Config(format!("point {coords:?} does not fit dimension {dim}")));
        }
        Ok(Site::from_slice(coords)?)
    }

    pub fn m_for(&self, n: usize) -> usize {
        self.m_factor * n
    }

    /// SHA-256 prefix of the canonical JSON form, ignoring output paths and
    /// the thread count, neither of which changes results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = OutputConfig::default();
        canonical.threads = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::default();
        let m = c.validate().unwrap();
        assert_eq!(m.step.dim(), 6);
        assert!(m.step.is_srw());
        assert_eq!(c.m_for(64), 128);
    }

    #[test]
    fn parses_presets_and_explicit_laws() {
        let c = ExperimentConfig::from_toml(
            r#"
            progeny = [0.25, 0.5, 0.25]
            step = [{ x = [1], p = 0.25 }, { x = [-1], p = 0.25 }, { x = [2], p = 0.25 }, { x = [-2], p = 0.25 }]
            n = [8, 16]
            [solver]
            rel_tol = 1e-12
            "#,
        )
        .unwrap();
        let m = c.validate().unwrap();
        assert_eq!(m.step.dim(), 1);
        assert_eq!(m.progeny.pmf(), &[0.25, 0.5, 0.25]);
        assert_eq!(c.solver.options().rel_tol, 1e-12);
        assert_eq!(c.solver.max_iter_factor, 20);

        let c = ExperimentConfig::from_toml("step = \"lazy_srw_d3\"").unwrap();
        assert_eq!(c.validate().unwrap().step.dim(), 3);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let asym = ExperimentConfig::from_toml("step = [{ x = [1], p = 0.6 }, { x = [-1], p = 0.4 }]").unwrap();
        assert!(asym.validate().is_err());
        let c = ExperimentConfig { m_factor: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { blocks: true, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { blocks: true, delta_n: vec![24, 48], ..Default::default() };
        assert!(c.validate().is_ok());
        let c = ExperimentConfig { progeny: ProgenySpec::Pmf(vec![0.5, 0.0, 0.0, 0.5]), ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { dim: Some(4), step: StepSpec::Preset("srw_d6".into()), ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn set_dim_rewrites_suffixed_presets() {
        let mut c = ExperimentConfig { step: StepSpec::Preset("lazy_srw_d6".into()), ..Default::default() };
        c.set_dim(2);
        let law = c.step_law().unwrap();
        assert_eq!(law.dim(), 2);
        assert!(!law.is_periodic());
    }

    #[test]
    fn hash_ignores_output_and_threads() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.threads = 4;
        b.output.csv = Some("elsewhere.csv".into());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = ExperimentConfig { seed: 2, ..Default::default() };
        assert_ne!(a.hash(), c.hash());
    }
}
