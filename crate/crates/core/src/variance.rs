//! Variance estimators, confidence intervals, and exact expected biases of the estimators.

use serde::Serialize;

use crate::design::{check_pair, conditional_probs, incidence, require_bibd, DesignSpec};
use crate::error::{Error, Result};
use crate::estimate::{hajek_means, ht_means, ObservedData};
use crate::numeric::{normal_critical, sum};
use crate::population::{
    contrast_components, variance_components, Contrast, PotentialOutcomes, Weights,
};

/// Sample variance of a (block, treatment) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellVar {
    Value(f64),
    /// Treatment not assigned to the block; contributes zero.
    Absent,
    /// Fewer than two units in the cell.
    Unavailable,
}

impl CellVar {
    /// Value used in sums, with absent cells as zero.
    pub fn value(&self) -> Option<f64> {
        match *self {
            CellVar::Value(v) => Some(v),
            CellVar::Absent => Some(0.0),
            CellVar::Unavailable => None,
        }
    }
}

/// `s_k^2(z)` for every block and treatment.
pub fn within_block_s2(obs: &ObservedData) -> Vec<Vec<CellVar>> {
    let nt = obs.design().num_treatments();
    (0..obs.num_blocks())
        .map(|k| {
            (0..nt)
                .map(|z| {
                    if !obs.contains(k, z) {
                        CellVar::Absent
                    } else {
                        obs.cell_var(k, z).map_or(CellVar::Unavailable, CellVar::Value)
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovKind {
    #[serde(rename = "ht")]
    HorvitzThompson,
    Hajek,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Bb,
    Wb,
}

/// Between-block sample variances; `None` where fewer than two blocks are available.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetweenS2 {
    pub single: Vec<Option<f64>>,
    /// Off-diagonal pairs only; the diagonal is `None`.
    pub pair: Vec<Vec<Option<f64>>>,
}

pub fn between_s2(obs: &ObservedData, w: &Weights, kind: CovKind) -> Result<BetweenS2> {
    let design = obs.design();
    let nt = design.num_treatments();
    let nk = obs.num_blocks();
    let inc = incidence(design);
    let centre = match kind {
        CovKind::HorvitzThompson => ht_means(obs, w)?,
        CovKind::Hajek => hajek_means(obs, w, &[])?.0,
    };
    let gamma: Vec<f64> = (0..nk).map(|k| w.scaled(k)).collect();
    let mut single = vec![None; nt];
    for z in 0..nt {
        let big_l = inc.occurrences[z];
        if big_l < 2 {
            continue;
        }
        let terms = (0..nk).filter_map(|k| {
            obs.block_mean(k, z).map(|m| match kind {
                CovKind::HorvitzThompson => (gamma[k] * m - centre[z]).powi(2),
                CovKind::Hajek => (gamma[k] * (m - centre[z])).powi(2),
            })
        });
        single[z] = Some(sum(terms) / (big_l - 1) as f64);
    }
    let mut pair = vec![vec![None; nt]; nt];
    for a in 0..nt {
        for b in (a + 1)..nt {
            let l = inc.co_occurrences[a][b];
            if l < 2 {
                continue;
            }
            let both: Vec<(usize, f64, f64)> = (0..nk)
                .filter_map(|k| Some((k, obs.block_mean(k, a)?, obs.block_mean(k, b)?)))
                .collect();
            let v = match kind {
                CovKind::HorvitzThompson => {
                    let ca = sum(both.iter().map(|&(k, ya, _)| gamma[k] * ya)) / l as f64;
                    let cb = sum(both.iter().map(|&(k, _, yb)| gamma[k] * yb)) / l as f64;
                    sum(both
                        .iter()
                        .map(|&(k, ya, yb)| (gamma[k] * (ya - yb) - (ca - cb)).powi(2)))
                }
                CovKind::Hajek => {
                    let wsum = sum(both.iter().map(|&(k, _, _)| w.values()[k]));
                    let ca = sum(both.iter().map(|&(k, ya, _)| w.values()[k] * ya)) / wsum;
                    let cb = sum(both.iter().map(|&(k, _, yb)| w.values()[k] * yb)) / wsum;
                    sum(both
                        .iter()
                        .map(|&(k, ya, yb)| (gamma[k] * (ya - yb - (ca - cb))).powi(2)))
                }
            } / (l - 1) as f64;
            pair[a][b] = Some(v);
            pair[b][a] = Some(v);
        }
    }
    Ok(BetweenS2 { single, pair })
}

/// Status of one covariance entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    /// Set to zero because the pair shares fewer than two blocks.
    Zeroed,
    /// Needs a within-block variance from cells with a single unit.
    Unavailable { blocks: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovEstimate {
    pub flavor: Flavor,
    pub kind: CovKind,
    /// `T x T`; unavailable entries hold `NaN`.
    pub matrix: Vec<Vec<f64>>,
    pub mask: Vec<Vec<EntryStatus>>,
}

impl CovEstimate {
    /// `g' S g`. Fails when an entry needed by `g` is unavailable, listing the offenders.
    pub fn contrast_variance(&self, g: &Contrast) -> Result<f64> {
        let gv = g.values();
        let support = g.support();
        let mut offenders = Vec::new();
        for &a in &support {
            for &b in &support {
                if let EntryStatus::Unavailable { blocks } = &self.mask[a][b] {
                    offenders.push(format!("({a},{b}) needs blocks {blocks:?}"));
                }
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Unavailable(format!(
                "{:?} covariance entries are unavailable: {}",
                self.flavor,
                offenders.join("; ")
            )));
        }
        Ok(sum(support
            .iter()
            .flat_map(|&a| support.iter().map(move |&b| (a, b)))
            .map(|(a, b)| gv[a] * gv[b] * self.matrix[a][b])))
    }
}

pub fn cov_bb(obs: &ObservedData, w: &Weights, kind: CovKind) -> Result<CovEstimate> {
    let design = obs.design();
    let nt = design.num_treatments();
    let inc = incidence(design);
    let s = between_s2(obs, w, kind)?;
    let mut matrix = vec![vec![0.0; nt]; nt];
    let mut mask = vec![vec![EntryStatus::Ok; nt]; nt];
    for a in 0..nt {
        for b in 0..nt {
            let l = inc.co_occurrences[a][b];
            if l < 2 {
                mask[a][b] = EntryStatus::Zeroed;
                continue;
            }
            let la = inc.occurrences[a] as f64;
            let lb = inc.occurrences[b] as f64;
            let (sa, sb) = (s.single[a].expect("L >= l >= 2"), s.single[b].expect("L >= l >= 2"));
            let sp = if a == b { 0.0 } else { s.pair[a][b].expect("l >= 2") };
            matrix[a][b] = l as f64 / (2.0 * la * lb) * (sa + sb - sp);
        }
    }
    Ok(CovEstimate {
        flavor: Flavor::Bb,
        kind,
        matrix,
        mask,
    })
}

pub fn cov_wb(obs: &ObservedData, w: &Weights, kind: CovKind) -> Result<CovEstimate> {
    let design = obs.design();
    let nt = design.num_treatments();
    let nk = obs.num_blocks();
    let kf = nk as f64;
    let t = design.subset_size() as f64;
    let inc = incidence(design);
    let mut est = cov_bb(obs, w, kind)?;
    est.flavor = Flavor::Wb;
    for a in 0..nt {
        for b in 0..nt {
            let l = inc.co_occurrences[a][b];
            if l >= 2 {
                let factor = 1.0 - (inc.occurrences[a] * inc.occurrences[b]) as f64 / (kf * l as f64);
                est.matrix[a][b] *= factor;
            }
        }
    }
    let s2 = within_block_s2(obs);
    for z in 0..nt {
        let missing: Vec<usize> = (0..nk).filter(|&k| s2[k][z] == CellVar::Unavailable).collect();
        if !missing.is_empty() {
            est.matrix[z][z] = f64::NAN;
            est.mask[z][z] = EntryStatus::Unavailable { blocks: missing };
            continue;
        }
        let within = sum((0..nk).filter(|&k| obs.contains(k, z)).map(|k| {
            let n = obs.block_size(k) as f64;
            w.scaled(k).powi(2) * s2[k][z].value().unwrap() / (n / t)
        })) / (kf * kf);
        est.matrix[z][z] += within / inc.marginal[z];
        if est.mask[z][z] == EntryStatus::Zeroed {
            est.mask[z][z] = EntryStatus::Ok;
        }
    }
    Ok(est)
}

/// Closed-form average of between-block pair variances over subsets with `own` but not the
/// other pair member.
fn avg_sample_pair(
    probs: &crate::design::SideProbs,
    own: usize,
    pair: [usize; 2],
    t: usize,
    pair_var: &dyn Fn(usize, usize) -> f64,
) -> f64 {
    let nt = probs.single.len();
    let tm1 = (t - 1) as f64;
    let outside: Vec<usize> = (0..nt).filter(|z| !pair.contains(z)).collect();
    let mut total = sum(outside.iter().map(|&z| probs.single[z] / tm1 * pair_var(own, z)));
    for &a in &outside {
        for &b in &outside {
            if a != b && probs.joint[a][b] != 0.0 {
                total -= probs.joint[a][b] / (2.0 * tm1 * tm1) * pair_var(a, b);
            }
        }
    }
    total
}

/// Variance estimator for the adjusted pairwise estimator.
pub fn adjusted_var(obs: &ObservedData, z1: usize, z2: usize, flavor: Flavor) -> Result<f64> {
    let design = obs.design();
    check_pair(design, z1, z2)?;
    let status = require_bibd(design)?;
    let l = status.common_co_occurrences.expect("bibd");
    if l < 2 {
        return Err(Error::Unavailable(format!(
            "every treatment pair shares only {l} block(s); pair variances need at least two"
        )));
    }
    let nk = obs.num_blocks();
    let kf = nk as f64;
    let nt = design.num_treatments();
    let ntf = nt as f64;
    let t = design.subset_size();
    let tf = t as f64;
    let table = conditional_probs(design, z1, z2)?;
    let s = between_s2(obs, &Weights::block(nk), CovKind::HorvitzThompson)?;
    let pv = |a: usize, b: usize| s.pair[a][b].expect("l >= 2 for every pair");
    let pair = [z1, z2];
    let avg = [
        avg_sample_pair(&table.first, z1, pair, t, &pv),
        avg_sample_pair(&table.second, z2, pair, t, &pv),
    ];
    let sigma_bb = (pv(z1, z2) + (ntf - 1.0) * ((tf - 1.0) / tf) * (avg[0] + avg[1])) / kf;
    let lead = (ntf - tf) / (ntf * (tf - 1.0)) * sigma_bb;
    match flavor {
        Flavor::Bb => Ok(lead + pv(z1, z2) / kf),
        Flavor::Wb => {
            let s2 = within_block_s2(obs);
            let missing: Vec<(usize, usize)> = (0..nk)
                .flat_map(|k| pair.map(|z| (k, z)))
                .filter(|&(k, z)| s2[k][z] == CellVar::Unavailable)
                .collect();
            if !missing.is_empty() {
                return Err(Error::Unavailable(format!(
                    "within-block variances need two units per cell; (block, treatment) cells {missing:?} have one"
                )));
            }
            let within = sum((0..nk).flat_map(|k| {
                let n = obs.block_size(k) as f64;
                let s2 = &s2;
                pair.map(move |z| s2[k][z].value().unwrap() / (n / ntf))
            })) / (kf * kf);
            Ok(lead + within)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalReport {
    pub point: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub variance_used: f64,
    /// True when a negative variance estimate was replaced by zero.
    pub clamped: bool,
}

impl IntervalReport {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Normal-approximation interval `point +/- z_{alpha/2} sqrt(variance)`.
pub fn confidence_interval(point: f64, variance: f64, level: f64) -> Result<IntervalReport> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    if !variance.is_finite() || !point.is_finite() {
        return Err(Error::InvalidArgument("point and variance must be finite".into()));
    }
    let clamped = variance < 0.0;
    let half_width = normal_critical(level) * variance.max(0.0).sqrt();
    Ok(IntervalReport {
        point,
        half_width,
        lower: point - half_width,
        upper: point + half_width,
        level,
        variance_used: variance,
        clamped,
    })
}

fn pair_bracket(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    w: &Weights,
    a: usize,
    b: usize,
) -> Result<f64> {
    let c = variance_components(po, w)?;
    let kf = design.num_blocks() as f64;
    let sizes = po.block_sizes();
    let within = sum((0..design.num_blocks()).map(|k| {
        w.scaled(k).powi(2) * (c.within[k][a] + c.within[k][b] - c.within_pair[k][a][b])
            / sizes[k] as f64
    })) / kf;
    Ok(c.between_ht[a] + c.between_ht[b] - c.between_ht_pair[a][b] - within)
}

fn support_with_l(design: &DesignSpec, g: &Contrast) -> Result<Vec<(usize, usize, usize)>> {
    let inc = incidence(design);
    let support = g.support();
    if let Some(&z) = support.iter().find(|&&z| inc.occurrences[z] < 2) {
        return Err(Error::Unavailable(format!(
            "treatment {z} occurs in fewer than two blocks"
        )));
    }
    Ok(support
        .iter()
        .flat_map(|&a| support.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| a != b)
        .map(|(a, b)| (a, b, inc.co_occurrences[a][b]))
        .collect())
}

/// `E[g' S^bb_HT g] - var(g' Yhat_HT)` for a fixed population.
pub fn bias_cov_bb_ht(po: &PotentialOutcomes, design: &DesignSpec, w: &Weights, g: &Contrast) -> Result<f64> {
    let kf = design.num_blocks() as f64;
    let inc = incidence(design);
    let gv = g.values();
    let mut bias = contrast_components(po, w, g)?.between_ht / kf;
    for (a, b, l) in support_with_l(design, g)? {
        if l <= 1 {
            let ll = (inc.occurrences[a] * inc.occurrences[b]) as f64;
            bias -= gv[a] * gv[b] * l as f64 / (2.0 * ll) * pair_bracket(po, design, w, a, b)?;
        }
    }
    Ok(bias)
}

/// `E[g' S^wb_HT g] - var(g' Yhat_HT)` for a fixed population.
pub fn bias_cov_wb_ht(po: &PotentialOutcomes, design: &DesignSpec, w: &Weights, g: &Contrast) -> Result<f64> {
    let kf = design.num_blocks() as f64;
    let inc = incidence(design);
    let gv = g.values();
    let comps = contrast_components(po, w, g)?;
    let sizes = po.block_sizes();
    let mut bias = sum(comps.within.iter().zip(&sizes).map(|(s, &n)| s / n as f64)) / (kf * kf);
    for (a, b, l) in support_with_l(design, g)? {
        if l <= 1 {
            let ll = (inc.occurrences[a] * inc.occurrences[b]) as f64;
            bias += gv[a] * gv[b] / 2.0 * (1.0 / kf - l as f64 / ll) * pair_bracket(po, design, w, a, b)?;
        }
    }
    Ok(bias)
}

/// `E[sigmahat^2_adj] - var(adjusted)` for a fixed population.
pub fn bias_adjusted(po: &PotentialOutcomes, design: &DesignSpec, z1: usize, z2: usize, flavor: Flavor) -> Result<f64> {
    check_pair(design, z1, z2)?;
    require_bibd(design)?;
    let nk = design.num_blocks();
    let kf = nk as f64;
    let c = variance_components(po, &Weights::block(nk))?;
    Ok(match flavor {
        Flavor::Bb => c.between_ht_pair[z1][z2] / kf,
        Flavor::Wb => {
            let sizes = po.block_sizes();
            sum((0..nk).map(|k| c.within_pair[k][z1][z2] / sizes[k] as f64)) / (kf * kf)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, five_treatment_bibd};
    use crate::estimate::{ObsRow, Validation};
    use crate::randomize::assign;
    use std::sync::Arc;

    fn row(block: usize, treatment: usize, outcome: f64) -> ObsRow {
        ObsRow {
            unit_id: String::new(),
            block,
            treatment,
            outcome,
        }
    }

    fn random_po(design: &DesignSpec, seed: u64) -> PotentialOutcomes {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..design.total_units())
            .map(|_| (0..design.num_treatments()).map(|_| rng.gen_range(-2.0..4.0)).collect())
            .collect();
        PotentialOutcomes::from_design_order(design, rows).unwrap()
    }

    #[test]
    fn cell_variances() {
        let d = Arc::new(build_design(2, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![1, 1], vec![4, 2]).unwrap());
        let rows = vec![
            row(0, 0, 1.0),
            row(0, 0, 3.0),
            row(0, 1, 5.0),
            row(0, 1, 5.0),
            row(1, 0, 0.0),
            row(1, 2, 1.0),
        ];
        let obs = ObservedData::from_rows(d, &rows, Validation::Strict).unwrap();
        let s2 = within_block_s2(&obs);
        assert_eq!(s2[0][0], CellVar::Value(2.0));
        assert_eq!(s2[0][1], CellVar::Value(0.0));
        assert_eq!(s2[0][2], CellVar::Absent);
        assert_eq!(s2[0][2].value(), Some(0.0));
        assert_eq!(s2[1][0], CellVar::Unavailable);
    }

    #[test]
    fn interval_rules() {
        let ci = confidence_interval(1.0, 4.0, 0.95).unwrap();
        assert!((ci.half_width - 2.0 * 1.959963985).abs() < 1e-8);
        let ci = confidence_interval(1.0, 0.0, 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper, ci.clamped), (1.0, 1.0, false));
        let ci = confidence_interval(1.0, -0.1, 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper, ci.clamped), (1.0, 1.0, true));
        assert!(confidence_interval(0.0, 1.0, 1.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn constant_outcomes_give_zero_estimates() {
        let d = Arc::new(five_treatment_bibd(2, vec![6; 20]).unwrap());
        let po = PotentialOutcomes::from_design_order(&d, vec![vec![3.0; 5]; 120]).unwrap();
        let obs = ObservedData::from_assignment(&po, &d, &assign(&d, 1));
        let w = Weights::block(20);
        for kind in [CovKind::HorvitzThompson, CovKind::Hajek] {
            for est in [cov_bb(&obs, &w, kind).unwrap(), cov_wb(&obs, &w, kind).unwrap()] {
                assert!(est.matrix.iter().flatten().all(|v| v.abs() < 1e-20));
            }
        }
        for f in [Flavor::Bb, Flavor::Wb] {
            assert!(adjusted_var(&obs, 0, 1, f).unwrap().abs() < 1e-20);
        }
    }

    #[test]
    fn diagonal_of_bb_is_single_over_count() {
        let d = Arc::new(five_treatment_bibd(2, vec![6; 20]).unwrap());
        let po = random_po(&d, 3);
        let obs = ObservedData::from_assignment(&po, &d, &assign(&d, 4));
        let w = Weights::unit(d.block_sizes());
        let s = between_s2(&obs, &w, CovKind::HorvitzThompson).unwrap();
        let est = cov_bb(&obs, &w, CovKind::HorvitzThompson).unwrap();
        for z in 0..5 {
            assert!((est.matrix[z][z] - s.single[z].unwrap() / 12.0).abs() < 1e-14);
        }
    }

    #[test]
    fn indicator_zeroes_rare_pairs() {
        let d = Arc::new(build_design(4, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![2, 1, 1], vec![4; 4]).unwrap());
        let po = random_po(&d, 5);
        let obs = ObservedData::from_assignment(&po, &d, &assign(&d, 6));
        let w = Weights::block(4);
        let est = cov_bb(&obs, &w, CovKind::HorvitzThompson).unwrap();
        assert_eq!(est.matrix[0][2], 0.0);
        assert_eq!(est.mask[1][2], EntryStatus::Zeroed);
        assert_eq!(est.mask[0][1], EntryStatus::Ok);
    }

    #[test]
    fn equal_weights_align_ht_and_hajek() {
        let d = Arc::new(five_treatment_bibd(2, vec![6; 20]).unwrap());
        let po = random_po(&d, 8);
        let w = Weights::block(20);
        for seed in 0..10 {
            let obs = ObservedData::from_assignment(&po, &d, &assign(&d, seed));
            let a = between_s2(&obs, &w, CovKind::HorvitzThompson).unwrap();
            let b = between_s2(&obs, &w, CovKind::Hajek).unwrap();
            for z in 0..5 {
                assert!((a.single[z].unwrap() - b.single[z].unwrap()).abs() < 1e-12);
                for z2 in 0..5 {
                    if z != z2 {
                        assert!((a.pair[z][z2].unwrap() - b.pair[z][z2].unwrap()).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_unit_cells_make_wb_unavailable() {
        let d = Arc::new(five_treatment_bibd(2, vec![3; 20]).unwrap());
        let po = random_po(&d, 2);
        let obs = ObservedData::from_assignment(&po, &d, &assign(&d, 2));
        let w = Weights::block(20);
        let est = cov_wb(&obs, &w, CovKind::HorvitzThompson).unwrap();
        let err = est.contrast_variance(&Contrast::pair(5, 0, 1)).unwrap_err();
        assert!(matches!(err, Error::Unavailable(ref m) if m.contains("(0,0)")));
        assert!(adjusted_var(&obs, 0, 1, Flavor::Wb).is_err());
        assert!(adjusted_var(&obs, 0, 1, Flavor::Bb).is_ok());
    }
}
