//! Simulation scenarios and finite-population generation.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{five_treatment_bibd, DesignFile, DesignSpec};
use crate::error::{Error, Result};
use crate::numeric::{chi_squared_quantile, mean};
use crate::population::{Contrast, PotentialOutcomes, WeightKind, Weights};
use crate::randomize::replicate_rng;

use super::derive_seed;

/// Block-size regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// Every block has `base_size` units.
    S1,
    /// `n_k = 3 max(2, X_k)` with `X_k ~ Poisson(poisson_mean)`.
    S2,
    /// As `S2`, sorted so that sizes increase with the block index.
    S3,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

fn default_settings() -> Vec<Setting> {
    vec![Setting::S1]
}
fn default_blocks() -> Vec<usize> {
    vec![10]
}
fn default_beta() -> Vec<f64> {
    vec![0.0]
}
fn default_gamma() -> Vec<f64> {
    vec![1.0]
}
fn default_rho() -> Vec<f64> {
    vec![1.0]
}
fn default_base_size() -> usize {
    15
}
fn default_poisson_mean() -> f64 {
    5.0
}
fn default_within_var() -> f64 {
    100.0
}
fn default_weights() -> WeightKind {
    WeightKind::Unit
}
fn default_replicates() -> usize {
    2000
}
fn default_level() -> f64 {
    0.95
}

/// A grid of simulation cells. Every list field is crossed with the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Explicit design. When absent, the ten-subset five-treatment BIBD is used with
    /// `K / 10` replications of each subset. When present, `blocks` is ignored and block
    /// sizes still follow `settings`.
    #[serde(default)]
    pub design: Option<DesignFile>,
    #[serde(default = "default_settings")]
    pub settings: Vec<Setting>,
    /// Numbers of blocks.
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    #[serde(default = "default_base_size")]
    pub base_size: usize,
    #[serde(default = "default_poisson_mean")]
    pub poisson_mean: f64,
    /// Per-block variance of the error terms.
    #[serde(default = "default_within_var")]
    pub within_var: f64,
    #[serde(default = "default_weights")]
    pub weights: WeightKind,
    /// Contrast coefficients; defaults to `(1, -1, 0, ..., 0)`.
    #[serde(default)]
    pub contrast: Option<Vec<f64>>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Expand the grid into cells, in the order settings, blocks, gamma, rho, beta.
    pub fn cells(&self) -> Result<Vec<Scenario>> {
        let block_counts: Vec<usize> = match &self.design {
            Some(d) => vec![d.num_blocks],
            None => self.blocks.clone(),
        };
        let mut out = Vec::new();
        for &setting in &self.settings {
            for &num_blocks in &block_counts {
                for &gamma in &self.gamma {
                    for &rho in &self.rho {
                        for &beta in &self.beta {
                            let index = out.len() as u64;
                            out.push(Scenario {
                                design: self.design.clone(),
                                setting,
                                num_blocks,
                                beta,
                                gamma,
                                rho,
                                base_size: self.base_size,
                                poisson_mean: self.poisson_mean,
                                within_var: self.within_var,
                                weights: self.weights,
                                contrast: self.contrast.clone(),
                                replicates: self.replicates,
                                level: self.level,
                                seed: derive_seed(self.seed, index),
                            });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("scenario grid has no cells".into()));
        }
        for s in &out {
            s.validate()?;
        }
        Ok(out)
    }
}

/// One fully specified simulation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub design: Option<DesignFile>,
    pub setting: Setting,
    pub num_blocks: usize,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub base_size: usize,
    pub poisson_mean: f64,
    pub within_var: f64,
    pub weights: WeightKind,
    pub contrast: Option<Vec<f64>>,
    pub replicates: usize,
    pub level: f64,
    /// Seed for this cell, already derived from the grid's master seed.
    pub seed: u64,
}

/// A generated design and its potential outcomes.
#[derive(Debug, Clone)]
pub struct Population {
    pub design: DesignSpec,
    pub outcomes: PotentialOutcomes,
}

const POPULATION_STREAM: u64 = 0;

impl Scenario {
    /// Cell with the default grid values and the given scalar overrides.
    pub fn new(setting: Setting, num_blocks: usize, beta: f64, gamma: f64, rho: f64, seed: u64) -> Self {
        let base = ScenarioConfig::default();
        Scenario {
            design: None,
            setting,
            num_blocks,
            beta,
            gamma,
            rho,
            base_size: base.base_size,
            poisson_mean: base.poisson_mean,
            within_var: base.within_var,
            weights: base.weights,
            contrast: None,
            replicates: base.replicates,
            level: base.level,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.design.is_none() && (self.num_blocks == 0 || self.num_blocks % 10 != 0) {
            return bad(format!(
                "the default design needs a positive multiple of 10 blocks, got {}",
                self.num_blocks
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if !(self.within_var > 0.0 && self.within_var.is_finite()) {
            return bad(format!("within_var = {} must be positive", self.within_var));
        }
        if !(self.poisson_mean > 0.0) {
            return bad(format!("poisson_mean = {} must be positive", self.poisson_mean));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level = {} outside (0, 1)", self.level));
        }
        if ![self.beta, self.gamma].iter().all(|v| v.is_finite()) {
            return bad("beta and gamma must be finite".into());
        }
        Ok(())
    }

    pub fn num_treatments(&self) -> usize {
        self.design.as_ref().map_or(5, |d| d.num_treatments)
    }

    pub fn contrast(&self) -> Result<Contrast> {
        match &self.contrast {
            Some(v) => Contrast::new(v.clone()),
            None => Ok(Contrast::pair(self.num_treatments(), 0, 1)),
        }
    }

    pub fn weights_for(&self, design: &DesignSpec) -> Result<Weights> {
        Weights::of_kind(self.weights, design.block_sizes())
    }

    fn block_sizes<R: Rng + ?Sized>(&self, subset_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        let k = self.num_blocks;
        Ok(match self.setting {
            Setting::S1 => vec![self.base_size; k],
            Setting::S2 | Setting::S3 => {
                let poisson = Poisson::new(self.poisson_mean)
                    .map_err(|e| Error::InvalidArgument(format!("poisson mean: {e}")))?;
                let mut sizes: Vec<usize> = (0..k)
                    .map(|_| subset_size * (poisson.sample(rng) as usize).max(2))
                    .collect();
                if self.setting == Setting::S3 {
                    sizes.sort_unstable();
                }
                sizes
            }
        })
    }

    /// Draw block sizes, build the design, and generate potential outcomes
    /// `Y_i(z) = beta_k + gamma_z delta_k + eps_zi` with exactly moment-matched errors.
    pub fn generate_population(&self) -> Result<Population> {
        self.validate()?;
        let mut rng = replicate_rng(self.seed, POPULATION_STREAM);
        let design = match &self.design {
            Some(file) => {
                let base = file.clone().into_design()?;
                let sizes = self.block_sizes(base.subset_size(), &mut rng)?;
                base.with_block_sizes(sizes)?
            }
            None => {
                let sizes = self.block_sizes(3, &mut rng)?;
                five_treatment_bibd(self.num_blocks / 10, sizes)?
            }
        };
        let nk = design.num_blocks();
        let nt = design.num_treatments();
        let sd = self.within_var.sqrt();
        let mut rows = Vec::with_capacity(design.total_units());
        for k in 0..nk {
            let quantile = chi_squared_quantile(1.0 - (k + 1) as f64 / (nk + 1) as f64, 10.0);
            let block_effect = self.beta * quantile;
            let eps = exchangeable_errors(design.block_sizes()[k], nt, self.rho, &mut rng)?;
            for e in eps {
                rows.push(
                    (0..nt)
                        .map(|z| block_effect + self.gamma * (z + 1) as f64 * quantile + sd * e[z])
                        .collect(),
                );
            }
        }
        let outcomes = PotentialOutcomes::from_design_order(&design, rows)?;
        Ok(Population { design, outcomes })
    }
}

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Center and scale to sample mean 0 and sample variance 1. `None` if the input is constant.
fn standardize(x: &mut [f64]) -> Option<()> {
    let m = mean(x);
    x.iter_mut().for_each(|v| *v -= m);
    let ss: f64 = x.iter().map(|v| v * v).sum();
    let s = (ss / (x.len() - 1) as f64).sqrt();
    if !(s > 1e-12) {
        return None;
    }
    x.iter_mut().for_each(|v| *v /= s);
    Some(())
}

/// Remove the component of `x` along the centered vector `c`.
fn orthogonalize(x: &mut [f64], c: &[f64]) {
    let m = mean(x);
    x.iter_mut().for_each(|v| *v -= m);
    let cc: f64 = c.iter().map(|v| v * v).sum();
    let xc: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
    x.iter_mut().zip(c).for_each(|(v, b)| *v -= xc / cc * b);
}

/// `n x T` unit-variance errors with exchangeable correlation `rho`, whose per-column sample
/// mean is exactly 0 and sample variance exactly 1.
///
/// The common column and the idiosyncratic columns are drawn separately; idiosyncratic
/// columns are made orthogonal to the common one before standardizing so the
/// `sqrt(rho), sqrt(1 - rho)` combination keeps unit sample variance.
pub fn exchangeable_errors<R: Rng + ?Sized>(
    n: usize,
    num_treatments: usize,
    rho: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "block of {n} unit(s) is too small to match moments"
        )));
    }
    let degenerate = || Error::InvalidArgument("degenerate error draw; cannot match moments".into());
    let mut common = standard_normals(n, rng);
    standardize(&mut common).ok_or_else(degenerate)?;
    let mut cols = Vec::with_capacity(num_treatments);
    for _ in 0..num_treatments {
        if rho >= 1.0 {
            cols.push(common.clone());
            continue;
        }
        let mut own = standard_normals(n, rng);
        if rho <= 0.0 {
            standardize(&mut own).ok_or_else(degenerate)?;
            cols.push(own);
            continue;
        }
        let mut resid = own.clone();
        orthogonalize(&mut resid, &common);
        let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
        let mut col: Vec<f64> = if standardize(&mut resid).is_some() {
            common.iter().zip(&resid).map(|(c, e)| a * c + b * e).collect()
        } else {
            // Two-unit blocks leave no room for an orthogonal column.
            standardize(&mut own).ok_or_else(degenerate)?;
            common.iter().zip(&own).map(|(c, e)| a * c + b * e).collect()
        };
        standardize(&mut col).ok_or_else(degenerate)?;
        cols.push(col);
    }
    Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::sample_var;
    use crate::population::block_means;

    #[test]
    fn defaults_round_trip() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.base_size, 15);
        assert_eq!(cfg.replicates, 2000);
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.len(), 1);
        let back = ScenarioConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let cfg = ScenarioConfig::from_json(r#"{"beta": []}"#).unwrap();
        assert!(cfg.cells().is_err());
    }

    #[test]
    fn non_multiple_of_ten_rejected() {
        let cfg = ScenarioConfig::from_json(r#"{"blocks": [15]}"#).unwrap();
        assert!(cfg.cells().is_err());
    }

    #[test]
    fn errors_hit_exact_moments() {
        for setting in [Setting::S1, Setting::S2, Setting::S3] {
            for rho in [0.0, 0.3, 0.5, 1.0] {
                let s = Scenario::new(setting, 20, 0.4, 0.5, rho, 11);
                let pop = s.generate_population().unwrap();
                let nt = pop.design.num_treatments();
                for k in 0..pop.design.num_blocks() {
                    let q = chi_squared_quantile(1.0 - (k + 1) as f64 / 21.0, 10.0);
                    for z in 0..nt {
                        let eps: Vec<f64> = pop
                            .outcomes
                            .block_units(k)
                            .iter()
                            .map(|&i| pop.outcomes.outcome(i, z) - 0.4 * q - 0.5 * (z + 1) as f64 * q)
                            .collect();
                        assert!(mean(&eps).abs() < 1e-9);
                        assert!((sample_var(&eps).unwrap() - 100.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn sizes_follow_setting() {
        let s2 = Scenario::new(Setting::S2, 30, 0.0, 0.0, 0.0, 3).generate_population().unwrap();
        let s3 = Scenario::new(Setting::S3, 30, 0.0, 0.0, 0.0, 3).generate_population().unwrap();
        for n in s2.design.block_sizes() {
            assert!(n % 3 == 0 && *n >= 6);
        }
        let mut sorted = s2.design.block_sizes().to_vec();
        sorted.sort_unstable();
        assert_eq!(s3.design.block_sizes(), &sorted[..]);
        assert!(s3.design.block_sizes().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perfectly_correlated_null_population_is_flat() {
        let pop = Scenario::new(Setting::S1, 10, 0.0, 0.0, 1.0, 5).generate_population().unwrap();
        for row in pop.outcomes.outcomes() {
            assert!(row.iter().all(|&y| (y - row[0]).abs() < 1e-12));
        }
        for m in block_means(&pop.outcomes) {
            assert!(m.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn block_effects_decrease() {
        let pop = Scenario::new(Setting::S1, 10, 0.5, 0.0, 1.0, 5).generate_population().unwrap();
        let means: Vec<f64> = block_means(&pop.outcomes).iter().map(|m| m[0]).collect();
        assert!(means.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn sample_correlation_near_target() {
        let mut rng = replicate_rng(9, 0);
        let e = exchangeable_errors(4000, 2, 0.5, &mut rng).unwrap();
        let r: f64 = e.iter().map(|r| r[0] * r[1]).sum::<f64>() / 3999.0;
        assert!((r - 0.5).abs() < 0.05, "{r}");
    }
}
