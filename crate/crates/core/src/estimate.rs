//! Point estimators from observed data: Horvitz-Thompson, Hajek, and the BIBD adjusted
//! pairwise estimator.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::design::{check_pair, incidence, require_bibd, DesignSpec};
use crate::error::{Error, Result};
use crate::population::{Contrast, PotentialOutcomes, WeightKind, Weights};
use crate::randomize::Assignment;

/// One observed unit. Block and treatment are 0-based indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRow {
    pub unit_id: String,
    pub block: usize,
    pub treatment: usize,
    pub outcome: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validation {
    /// Exactly `n_k / t` units per assigned treatment and block sizes matching the design.
    #[default]
    Strict,
    /// Any positive count per assigned treatment; realized counts are used in the cell means.
    Lenient,
}

/// Observed outcomes summarized per (block, treatment) cell.
#[derive(Debug, Clone)]
pub struct ObservedData {
    design: Arc<DesignSpec>,
    subset_index: Vec<usize>,
    counts: Vec<usize>,
    means: Vec<f64>,
    s2: Vec<Option<f64>>,
    balanced: bool,
}

impl ObservedData {
    fn cell(&self, k: usize, z: usize) -> usize {
        k * self.design.num_treatments() + z
    }

    pub fn design(&self) -> &DesignSpec {
        &self.design
    }

    pub fn design_arc(&self) -> &Arc<DesignSpec> {
        &self.design
    }

    pub fn num_blocks(&self) -> usize {
        self.subset_index.len()
    }

    /// Realized subset `R_k`.
    pub fn subset(&self, k: usize) -> &[usize] {
        &self.design.catalog()[self.subset_index[k]]
    }

    pub fn subset_index(&self, k: usize) -> usize {
        self.subset_index[k]
    }

    pub fn contains(&self, k: usize, z: usize) -> bool {
        self.counts[self.cell(k, z)] > 0
    }

    pub fn count(&self, k: usize, z: usize) -> usize {
        self.counts[self.cell(k, z)]
    }

    /// `Yhat_k(z)`, absent when `z` is not in `R_k`.
    pub fn block_mean(&self, k: usize, z: usize) -> Option<f64> {
        self.contains(k, z).then(|| self.means[self.cell(k, z)])
    }

    /// Sample variance of the cell, absent when the cell has fewer than two units.
    pub fn cell_var(&self, k: usize, z: usize) -> Option<f64> {
        self.s2[self.cell(k, z)]
    }

    /// Number of observed units in block `k`.
    pub fn block_size(&self, k: usize) -> usize {
        self.subset(k).iter().map(|&z| self.count(k, z)).sum()
    }

    /// False when lenient validation accepted unequal cell counts.
    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    /// Observed data induced by applying an assignment to a population. Unit `j` of block `k`
    /// in the assignment corresponds to the population's `j`-th unit of block `k`.
    pub fn from_assignment(
        po: &PotentialOutcomes,
        design: &Arc<DesignSpec>,
        a: &Assignment,
    ) -> ObservedData {
        let nt = design.num_treatments();
        let nk = design.num_blocks();
        let mut counts = vec![0usize; nk * nt];
        let mut sums = vec![0.0; nk * nt];
        let mut offset = 0;
        for k in 0..nk {
            let units = po.block_units(k);
            for (j, &i) in units.iter().enumerate() {
                let z = a.unit_treatments[offset + j];
                counts[k * nt + z] += 1;
                sums[k * nt + z] += po.outcome(i, z);
            }
            offset += units.len();
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut ss = vec![0.0; nk * nt];
        let mut offset = 0;
        for k in 0..nk {
            let units = po.block_units(k);
            for (j, &i) in units.iter().enumerate() {
                let z = a.unit_treatments[offset + j];
                let d = po.outcome(i, z) - means[k * nt + z];
                ss[k * nt + z] += d * d;
            }
            offset += units.len();
        }
        let s2 = ss
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c >= 2).then(|| s / (c - 1) as f64))
            .collect();
        ObservedData {
            design: Arc::clone(design),
            subset_index: a.subsets.subsets.clone(),
            counts,
            means,
            s2,
            balanced: true,
        }
    }

    pub fn from_rows(design: Arc<DesignSpec>, rows: &[ObsRow], mode: Validation) -> Result<ObservedData> {
        let nt = design.num_treatments();
        let nk = design.num_blocks();
        let bad = |m: String| Err(Error::InvalidData(m));
        let mut cells: Vec<Vec<f64>> = vec![Vec::new(); nk * nt];
        for r in rows {
            if r.block >= nk {
                return bad(format!("unit {} has block index {} outside 0..{nk}", r.unit_id, r.block));
            }
            if r.treatment >= nt {
                return bad(format!(
                    "unit {} has treatment index {} outside 0..{nt}",
                    r.unit_id, r.treatment
                ));
            }
            if !r.outcome.is_finite() {
                return bad(format!("unit {} has a non-finite outcome", r.unit_id));
            }
            cells[r.block * nt + r.treatment].push(r.outcome);
        }
        let t = design.subset_size();
        let mut subset_index = Vec::with_capacity(nk);
        let mut balanced = true;
        for k in 0..nk {
            let realized: Vec<usize> = (0..nt).filter(|&z| !cells[k * nt + z].is_empty()).collect();
            if realized.is_empty() {
                return bad(format!("block {k} has no observations"));
            }
            let Some(idx) = design.catalog_index(&realized) else {
                return bad(format!(
                    "block {k} realized treatments {realized:?} are not a catalog subset"
                ));
            };
            subset_index.push(idx);
            let n = design.block_sizes()[k];
            for &z in &realized {
                let c = cells[k * nt + z].len();
                if c != n / t {
                    match mode {
                        Validation::Strict => {
                            return bad(format!(
                                "block {k} has {c} units on treatment {z}, expected {}",
                                n / t
                            ))
                        }
                        Validation::Lenient => balanced = false,
                    }
                }
            }
        }
        let mut counts = vec![0usize; design.catalog().len()];
        subset_index.iter().for_each(|&i| counts[i] += 1);
        if counts != design.reps() {
            return bad(format!(
                "realized subset multiplicities {counts:?} differ from replication counts {:?}",
                design.reps()
            ));
        }
        Ok(ObservedData {
            counts: cells.iter().map(Vec::len).collect(),
            means: cells
                .iter()
                .map(|c| if c.is_empty() { 0.0 } else { crate::numeric::mean(c) })
                .collect(),
            s2: cells.iter().map(|c| crate::numeric::sample_var(c)).collect(),
            design,
            subset_index,
            balanced,
        })
    }

    /// Add `c` to every outcome.
    pub fn shifted(&self, c: f64) -> ObservedData {
        let mut out = self.clone();
        for (m, &n) in out.means.iter_mut().zip(&self.counts) {
            if n > 0 {
                *m += c;
            }
        }
        out
    }
}

/// `Yhat_k(z)` for `z` in `R_k`, as a sparse `K x T` table.
pub fn observed_block_means(obs: &ObservedData) -> Vec<Vec<Option<f64>>> {
    let nt = obs.design().num_treatments();
    (0..obs.num_blocks())
        .map(|k| (0..nt).map(|z| obs.block_mean(k, z)).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[serde(rename = "ht")]
    HorvitzThompson,
    Hajek,
    Adjusted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub point: f64,
    /// Per-treatment estimated means (HT and Hajek only).
    pub means: Option<Vec<f64>>,
    /// `1hat_HT(z)`, the HT estimate of the constant one (Hajek only).
    pub normalizers: Option<Vec<f64>>,
    pub weights: WeightKind,
    pub contrast: Vec<f64>,
    /// 0-based pair for the adjusted estimator.
    pub pair: Option<(usize, usize)>,
    /// Set when the data were accepted with unequal cell counts.
    pub unbalanced: bool,
}

fn check_weights(obs: &ObservedData, w: &Weights) -> Result<()> {
    if w.len() != obs.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} blocks",
            w.len(),
            obs.num_blocks()
        )));
    }
    Ok(())
}

fn check_contrast(obs: &ObservedData, g: &Contrast) -> Result<()> {
    if g.values().len() != obs.design().num_treatments() {
        return Err(Error::InvalidArgument(format!(
            "contrast has {} entries for {} treatments",
            g.values().len(),
            obs.design().num_treatments()
        )));
    }
    Ok(())
}

/// `Yhat_HT(z) = sum_k w_k Yhat_k(z) 1[z in R_k] / (L_z / K)` for every treatment.
pub fn ht_means(obs: &ObservedData, w: &Weights) -> Result<Vec<f64>> {
    check_weights(obs, w)?;
    let inc = incidence(obs.design());
    let nt = obs.design().num_treatments();
    Ok((0..nt)
        .map(|z| {
            let s: f64 = (0..obs.num_blocks())
                .filter_map(|k| obs.block_mean(k, z).map(|m| w.values()[k] * m))
                .sum();
            s / inc.marginal[z]
        })
        .collect())
}

/// Hajek means and HT normalizers `1hat_HT(z)`. A zero normalizer for a treatment in
/// `needed` is an error; other treatments get `NaN`.
pub fn hajek_means(obs: &ObservedData, w: &Weights, needed: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_weights(obs, w)?;
    let inc = incidence(obs.design());
    let nt = obs.design().num_treatments();
    let mut means = vec![f64::NAN; nt];
    let mut norms = vec![0.0; nt];
    for z in 0..nt {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..obs.num_blocks() {
            if let Some(m) = obs.block_mean(k, z) {
                num += w.values()[k] * m;
                den += w.values()[k];
            }
        }
        norms[z] = den / inc.marginal[z];
        if den > 0.0 {
            means[z] = num / den;
        } else if needed.contains(&z) {
            return Err(Error::Undefined(format!(
                "Hajek normalizer is zero for treatment {z}"
            )));
        }
    }
    Ok((means, norms))
}

pub fn ht(obs: &ObservedData, w: &Weights, g: &Contrast) -> Result<EstimateReport> {
    check_contrast(obs, g)?;
    let means = ht_means(obs, w)?;
    Ok(EstimateReport {
        estimator: EstimatorKind::HorvitzThompson,
        point: g.dot(&means),
        means: Some(means),
        normalizers: None,
        weights: w.kind(),
        contrast: g.values().to_vec(),
        pair: None,
        unbalanced: !obs.is_balanced(),
    })
}

pub fn hajek(obs: &ObservedData, w: &Weights, g: &Contrast) -> Result<EstimateReport> {
    check_contrast(obs, g)?;
    let (means, norms) = hajek_means(obs, w, &g.support())?;
    let point = g
        .support()
        .iter()
        .map(|&z| g.values()[z] * means[z])
        .sum();
    Ok(EstimateReport {
        estimator: EstimatorKind::Hajek,
        point,
        means: Some(means),
        normalizers: Some(norms),
        weights: w.kind(),
        contrast: g.values().to_vec(),
        pair: None,
        unbalanced: !obs.is_balanced(),
    })
}

/// Block-mean-centered contribution `Yhat_k(z) - t^{-1} sum_m Yhat_k(R_km)`.
pub(crate) fn adjusted_block_term(obs: &ObservedData, k: usize, z: usize) -> Option<f64> {
    let m = obs.block_mean(k, z)?;
    let subset = obs.subset(k);
    let centre: f64 = subset.iter().map(|&u| obs.block_mean(k, u).unwrap()).sum::<f64>() / subset.len() as f64;
    Some(m - centre)
}

/// Adjusted pairwise estimator for a BIBD with block weights.
pub fn adjusted(obs: &ObservedData, z1: usize, z2: usize) -> Result<EstimateReport> {
    let design = obs.design();
    check_pair(design, z1, z2)?;
    let status = require_bibd(design)?;
    let l = status.common_co_occurrences.expect("bibd") as f64;
    let nt = design.num_treatments() as f64;
    let t = design.subset_size() as f64;
    let mut total = 0.0;
    for k in 0..obs.num_blocks() {
        if let Some(a) = adjusted_block_term(obs, k, z1) {
            total += a;
        }
        if let Some(b) = adjusted_block_term(obs, k, z2) {
            total -= b;
        }
    }
    Ok(EstimateReport {
        estimator: EstimatorKind::Adjusted,
        point: t * total / (l * nt),
        means: None,
        normalizers: None,
        weights: WeightKind::Block,
        contrast: Contrast::pair(design.num_treatments(), z1, z2).values().to_vec(),
        pair: Some((z1, z2)),
        unbalanced: !obs.is_balanced(),
    })
}
