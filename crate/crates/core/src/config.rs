//! TOML run configuration.
//!
//! Grammar: top-level keys `seed`, `tol`, `grid_level`, `serial`,
//! `output_dir`, then one table per suite (`[field]`, `[psi]`, `[mollify]`,
//! `[cone]`, `[lemma33]`, `[lemma34]`, `[identity]`, `[carleman]`,
//! `[cutoffs]`, `[calibrate]`). Every key is optional; unknown keys are a
//! configuration error.

use crate::cone::{shifted_field, threshold_fraction_field, ConeParams};
use crate::error::{Error, Result};
use crate::fields::{AffineField, CoefficientField, ConstantField, DomainTag, EllipticityBounds, RadialField};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "CARLEMAN_LAB_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub tol: f64,
    /// Node counts are multiplied by `2^grid_level`.
    pub grid_level: u32,
    pub serial: bool,
    pub output_dir: PathBuf,
    pub field: FieldConfig,
    pub psi: PsiConfig,
    pub mollify: MollifyConfig,
    pub cone: ConeConfig,
    pub lemma33: Lemma33Config,
    pub lemma34: Lemma34Config,
    pub identity: IdentityConfig,
    pub carleman: CarlemanConfig,
    pub cutoffs: CutoffsConfig,
    pub calibrate: CalibrateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 20_260_101,
            tol: 1e-9,
            grid_level: 0,
            serial: false,
            output_dir: PathBuf::from("reports"),
            field: FieldConfig::default(),
            psi: PsiConfig::default(),
            mollify: MollifyConfig::default(),
            cone: ConeConfig::default(),
            lemma33: Lemma33Config::default(),
            lemma34: Lemma34Config::default(),
            identity: IdentityConfig::default(),
            carleman: CarlemanConfig::default(),
            cutoffs: CutoffsConfig::default(),
            calibrate: CalibrateConfig::default(),
        }
    }
}

/// A coefficient field description. `family` is one of `identity`,
/// `constant` (needs `matrix`), `radial` (`c`, `mu`), `affine`, `cone`
/// (`l`) or `cone_threshold` (`fraction` of the field's own `E₀`).
/// `lambda`, `Lambda`, `M`, `E` override the declared bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub family: String,
    pub n: usize,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub c: f64,
    pub mu: f64,
    pub l: f64,
    pub fraction: f64,
    pub lambda: Option<f64>,
    #[serde(rename = "Lambda")]
    pub big_lambda: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    #[serde(rename = "E")]
    pub e: Option<f64>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            family: "identity".into(),
            n: 2,
            matrix: None,
            c: 1.0,
            mu: 0.5,
            l: 1.5,
            fraction: 0.5,
            lambda: None,
            big_lambda: None,
            m: None,
            e: None,
        }
    }
}

/// A field together with its (possibly overridden) declared bounds.
pub struct BuiltField {
    pub field: Box<dyn CoefficientField>,
    pub bounds: EllipticityBounds,
}

impl FieldConfig {
    /// Field of the given family; `half_space` selects the `{xₙ > 0}` domain
    /// for families defined on the whole space.
    pub fn build(&self, half_space: bool) -> Result<BuiltField> {
        let domain = if half_space {
            DomainTag::HalfSpace0_1
        } else {
            DomainTag::WholeSpace0_2
        };
        let n = self.n;
        let field: Box<dyn CoefficientField> = match self.family.as_str() {
            "identity" => Box::new(ConstantField::identity_on(n, domain)),
            "constant" => {
                let rows = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::Config("family `constant` needs `matrix`".into()))?;
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!("`matrix` must be {n}x{n}")));
                }
                let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                Box::new(ConstantField::new(Mat::from_row_slice(n, n, &flat), domain)?)
            }
            "radial" => Box::new(RadialField::new(n, self.c, self.mu)?.on_domain(domain)),
            "affine" => {
                if n != 2 {
                    return Err(Error::Config("family `affine` is planar".into()));
                }
                Box::new(AffineField::example_2d())
            }
            "cone" => {
                if n != 2 {
                    return Err(Error::Config("cone families are planar".into()));
                }
                Box::new(shifted_field(ConeParams::from_l(self.l)?))
            }
            "cone_threshold" => {
                if n != 2 {
                    return Err(Error::Config("cone families are planar".into()));
                }
                Box::new(threshold_fraction_field(self.fraction)?)
            }
            other => return Err(Error::Config(format!("unknown field family `{other}`"))),
        };
        let mut bounds = field.bounds();
        if let Some(v) = self.lambda {
            bounds.lambda = v;
        }
        if let Some(v) = self.big_lambda {
            bounds.big_lambda = v;
        }
        if let Some(v) = self.m {
            bounds.m = v;
        }
        if let Some(v) = self.e {
            bounds.e = v;
        }
        bounds.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(BuiltField { field, bounds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiConfig {
    pub kappas: Vec<f64>,
    pub samples: usize,
    pub x_max: f64,
}

impl Default for PsiConfig {
    fn default() -> Self {
        PsiConfig {
            kappas: vec![1.0, 2.0, 5.0],
            samples: 10_000,
            x_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollifyConfig {
    pub epsilon: f64,
    pub samples: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Synthetic radial perturbation `I + c·m(t)·xxᵀ/(1+|x|²)`.
    pub c: f64,
    pub mu: f64,
}

impl Default for MollifyConfig {
    fn default() -> Self {
        MollifyConfig {
            epsilon: 0.5,
            samples: 1000,
            r_min: 1.0,
            r_max: 10.0,
            c: 1.0,
            mu: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConeConfig {
    pub ls: Vec<f64>,
    pub samples: usize,
}

impl Default for ConeConfig {
    fn default() -> Self {
        ConeConfig {
            ls: vec![1.5, 2.0],
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lemma33Config {
    pub samples: usize,
    pub radius: f64,
    pub gamma: f64,
    #[serde(rename = "N")]
    pub big_n: f64,
}

impl Default for Lemma33Config {
    fn default() -> Self {
        Lemma33Config {
            samples: 10_000,
            radius: 10.0,
            gamma: 1.0,
            big_n: 1.0,
        }
    }
}

/// Half-space estimates run on `[lemma34].field` (default: the cone field
/// at half its decay threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lemma34Config {
    pub samples: usize,
    pub radius: f64,
    pub gamma: f64,
    #[serde(rename = "N")]
    pub big_n: f64,
    pub field: FieldConfig,
}

impl Default for Lemma34Config {
    fn default() -> Self {
        Lemma34Config {
            samples: 2000,
            radius: 10.0,
            gamma: 1.0,
            big_n: 1.0,
            field: FieldConfig {
                family: "cone_threshold".into(),
                ..FieldConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityConfig {
    /// Gauss nodes per axis; 0 selects 24 for `n = 2` and 12 for `n = 3`.
    pub nodes: usize,
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    pub gamma: f64,
    pub d: f64,
    pub convergence_nodes: Vec<usize>,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            nodes: 0,
            support_lo: vec![-1.0, -1.0, 1.2],
            support_hi: vec![1.0, 1.0, 1.9],
            gamma: 1.0,
            d: 2.0,
            convergence_nodes: vec![6, 12, 24],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarlemanConfig {
    /// `13`, `14` or `0` for both.
    pub prop: u32,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub nodes: usize,
    pub max_drift: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub support13_lo: Vec<f64>,
    pub support13_hi: Vec<f64>,
    pub support14_lo: Vec<f64>,
    pub support14_hi: Vec<f64>,
    /// Field for the half-space inequality (the whole-space one uses
    /// `[field]`).
    pub field14: FieldConfig,
    #[serde(rename = "N")]
    pub big_n: f64,
}

impl Default for CarlemanConfig {
    fn default() -> Self {
        CarlemanConfig {
            prop: 0,
            gammas: vec![0.1, 1.0, 10.0],
            seeds: vec![1, 2, 3, 4, 5],
            nodes: 24,
            max_drift: 0.05,
            tol_rel: 1e-2,
            tol_abs: 1e-12,
            support13_lo: vec![-1.0, -1.0, 1.2],
            support13_hi: vec![1.0, 1.0, 1.9],
            support14_lo: vec![-1.0, 1.5, 0.99],
            support14_hi: vec![1.0, 3.0, 0.999],
            field14: FieldConfig {
                family: "cone_threshold".into(),
                ..FieldConfig::default()
            },
            big_n: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutoffsConfig {
    pub samples: usize,
    #[serde(rename = "N")]
    pub big_n: f64,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub d: f64,
}

impl Default for CutoffsConfig {
    fn default() -> Self {
        CutoffsConfig {
            samples: 10_000,
            big_n: 1.0,
            lambda: 1.0,
            big_lambda: 1.0,
            e: 0.0,
            d: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// `prop13` or `prop14`.
    pub variant: String,
    pub d_grid: Vec<f64>,
    pub samples: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            variant: "prop13".into(),
            d_grid: crate::estimates::default_d_grid(),
            samples: 2000,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks that every field description builds and that numeric options
    /// are in range.
    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 0.0) {
            return Err(Error::Config("`tol` must be nonnegative".into()));
        }
        self.field.build(false)?;
        self.lemma34.field.build(true)?;
        self.carleman.field14.build(true)?;
        if ![0, 13, 14].contains(&self.carleman.prop) {
            return Err(Error::Config("`carleman.prop` must be 13, 14 or 0".into()));
        }
        if !["prop13", "prop14"].contains(&self.calibrate.variant.as_str()) {
            return Err(Error::Config("`calibrate.variant` must be prop13 or prop14".into()));
        }
        Ok(())
    }

    /// `base · 2^grid_level`.
    pub fn scaled_nodes(&self, base: usize) -> usize {
        base << self.grid_level
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn overrides_parse() {
        let c = Config::parse("seed = 7\n[field]\nfamily = \"radial\"\nc = 0.5\n[carleman]\ngammas = [1.0]\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.field.family, "radial");
        assert_eq!(c.carleman.gammas, vec![1.0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[field]\nlambda = 2.0\nLambda = 1.0\n",
            "[field]\nfamily = \"unknown\"\n",
            "bogus = 1\n",
            "[field]\nfamily = \"constant\"\n",
            "seed = \"x\"\n",
        ] {
            assert!(matches!(Config::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn constant_matrix_builds() {
        let c = Config::parse("[field]\nfamily = \"constant\"\nmatrix = [[2.0, 0.5], [0.5, 1.0]]\n").unwrap();
        let b = c.field.build(false).unwrap();
        assert!(b.bounds.big_lambda > 2.0);
    }
}
