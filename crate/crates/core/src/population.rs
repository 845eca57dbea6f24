//! The fixed finite population: potential outcomes, estimands, and exact variances of the
//! estimators under the two-stage randomization.

use serde::{Deserialize, Serialize};

use crate::design::{
    check_pair, conditional_probs, incidence, require_bibd, subsets_with_without,
    AdjustedProbTable, DesignSpec,
};
use crate::error::{Error, Result};
use crate::numeric::{sample_var, sum};

/// Potential outcomes `Y_i(z)` for every unit and treatment, with block labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    outcomes: Vec<Vec<f64>>,
    blocks: Vec<usize>,
    block_units: Vec<Vec<usize>>,
}

impl PotentialOutcomes {
    /// `outcomes[i][z]` with 0-based block label `blocks[i]`.
    pub fn new(outcomes: Vec<Vec<f64>>, blocks: Vec<usize>, num_blocks: usize) -> Result<Self> {
        if outcomes.len() != blocks.len() {
            return Err(Error::InvalidData(format!(
                "{} outcome rows but {} block labels",
                outcomes.len(),
                blocks.len()
            )));
        }
        let nt = outcomes.first().map_or(0, |r| r.len());
        if nt == 0 || outcomes.iter().any(|r| r.len() != nt) {
            return Err(Error::InvalidData("outcome rows must share a positive length".into()));
        }
        if outcomes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("potential outcomes must be finite".into()));
        }
        let mut block_units = vec![Vec::new(); num_blocks];
        for (i, &b) in blocks.iter().enumerate() {
            if b >= num_blocks {
                return Err(Error::InvalidData(format!("unit {i} has block {b} >= {num_blocks}")));
            }
            block_units[b].push(i);
        }
        if let Some(k) = block_units.iter().position(|u| u.is_empty()) {
            return Err(Error::InvalidData(format!("block {k} has no units")));
        }
        Ok(PotentialOutcomes {
            outcomes,
            blocks,
            block_units,
        })
    }

    /// Units listed block by block in the order of the design's block sizes.
    pub fn from_design_order(design: &DesignSpec, outcomes: Vec<Vec<f64>>) -> Result<Self> {
        let blocks = design
            .block_sizes()
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat(k).take(n))
            .collect();
        let po = Self::new(outcomes, blocks, design.num_blocks())?;
        po.check_design(design)?;
        Ok(po)
    }

    pub fn check_design(&self, design: &DesignSpec) -> Result<()> {
        if self.num_treatments() != design.num_treatments() {
            return Err(Error::InvalidData(format!(
                "population has {} treatments, design has {}",
                self.num_treatments(),
                design.num_treatments()
            )));
        }
        if self.block_sizes() != design.block_sizes() {
            return Err(Error::InvalidData(format!(
                "block sizes {:?} differ from design {:?}",
                self.block_sizes(),
                design.block_sizes()
            )));
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.outcomes.len()
    }

    pub fn num_treatments(&self) -> usize {
        self.outcomes[0].len()
    }

    pub fn num_blocks(&self) -> usize {
        self.block_units.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.block_units.iter().map(Vec::len).collect()
    }

    pub fn outcome(&self, unit: usize, treatment: usize) -> f64 {
        self.outcomes[unit][treatment]
    }

    pub fn outcomes(&self) -> &[Vec<f64>] {
        &self.outcomes
    }

    pub fn block_of(&self, unit: usize) -> usize {
        self.blocks[unit]
    }

    /// Units of block `k` in their stored order.
    pub fn block_units(&self, k: usize) -> &[usize] {
        &self.block_units[k]
    }

    /// Every potential outcome shifted by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.outcomes.iter_mut().flatten().for_each(|v| *v += c);
        out
    }

    /// Sample variance within block `k` of the unit-level linear combination `sum_z coef_z Y_i(z)`.
    fn block_combination_var(&self, k: usize, coef: &[f64]) -> Option<f64> {
        let vals: Vec<f64> = self.block_units[k]
            .iter()
            .map(|&i| sum(coef.iter().zip(&self.outcomes[i]).map(|(c, y)| c * y)))
            .collect();
        sample_var(&vals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Block,
    Unit,
    Custom,
}

/// Block weights `w_k`, positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    values: Vec<f64>,
    kind: WeightKind,
}

impl Weights {
    /// `w_k = 1/K`.
    pub fn block(num_blocks: usize) -> Self {
        Weights {
            values: vec![1.0 / num_blocks as f64; num_blocks],
            kind: WeightKind::Block,
        }
    }

    /// `w_k = n_k / N`.
    pub fn unit(block_sizes: &[usize]) -> Self {
        let total: usize = block_sizes.iter().sum();
        Weights {
            values: block_sizes.iter().map(|&n| n as f64 / total as f64).collect(),
            kind: WeightKind::Unit,
        }
    }

    pub fn custom(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be positive and finite".into()));
        }
        if (sum(values.iter().copied()) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument("weights must sum to one".into()));
        }
        Ok(Weights {
            values,
            kind: WeightKind::Custom,
        })
    }

    pub fn of_kind(kind: WeightKind, block_sizes: &[usize]) -> Result<Self> {
        match kind {
            WeightKind::Block => Ok(Self::block(block_sizes.len())),
            WeightKind::Unit => Ok(Self::unit(block_sizes)),
            WeightKind::Custom => Err(Error::InvalidArgument(
                "custom weights need explicit values".into(),
            )),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `K w_k`.
    pub fn scaled(&self, k: usize) -> f64 {
        self.values.len() as f64 * self.values[k]
    }
}

/// Treatment contrast `g` with entries summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    values: Vec<f64>,
}

impl Contrast {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("contrast entries must be finite".into()));
        }
        if sum(values.iter().copied()).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "contrast entries must sum to zero, got {values:?}"
            )));
        }
        Ok(Contrast { values })
    }

    /// `e_{z1} - e_{z2}`.
    pub fn pair(num_treatments: usize, z1: usize, z2: usize) -> Self {
        let mut v = vec![0.0; num_treatments];
        v[z1] += 1.0;
        v[z2] -= 1.0;
        Contrast { values: v }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        sum(self.values.iter().zip(x).map(|(g, v)| g * v))
    }

    pub fn quad(&self, m: &[Vec<f64>]) -> f64 {
        let g = &self.values;
        sum((0..g.len()).flat_map(|a| (0..g.len()).map(move |b| g[a] * g[b] * m[a][b])))
    }

    /// Treatments with nonzero coefficient.
    pub fn support(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&z| self.values[z] != 0.0).collect()
    }
}

/// `Ybar_k(z)`, a `K x T` table.
pub fn block_means(po: &PotentialOutcomes) -> Vec<Vec<f64>> {
    let nt = po.num_treatments();
    (0..po.num_blocks())
        .map(|k| {
            let units = po.block_units(k);
            (0..nt)
                .map(|z| sum(units.iter().map(|&i| po.outcome(i, z))) / units.len() as f64)
                .collect()
        })
        .collect()
}

/// `Ybar(z; w) = sum_k w_k Ybar_k(z)`.
pub fn weighted_means(po: &PotentialOutcomes, w: &Weights) -> Vec<f64> {
    let means = block_means(po);
    (0..po.num_treatments())
        .map(|z| sum(means.iter().zip(w.values()).map(|(m, wk)| wk * m[z])))
        .collect()
}

/// `tau_w(g) = g' Ybar_w`.
pub fn estimand(po: &PotentialOutcomes, w: &Weights, g: &Contrast) -> f64 {
    g.dot(&weighted_means(po, w))
}

/// Within- and between-block variances of potential outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComponents {
    /// `S_k^2(z)`, `K x T`.
    pub within: Vec<Vec<f64>>,
    /// `S_k^2(tau(z,z'))`, `K x T x T`, zero diagonal.
    pub within_pair: Vec<Vec<Vec<f64>>>,
    /// `S^2_HT(z)`.
    pub between_ht: Vec<f64>,
    /// `S^2_HT(tau(z,z'))`.
    pub between_ht_pair: Vec<Vec<f64>>,
    /// `S^2_Haj(z)`.
    pub between_haj: Vec<f64>,
    /// `S^2_Haj(tau(z,z'))`.
    pub between_haj_pair: Vec<Vec<f64>>,
}

/// Contrast-level variances `S^2_HT(tau_w(g))`, `S^2_Haj(tau_w(g))` and `S_k^2(tau_w(g))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastComponents {
    pub between_ht: f64,
    pub between_haj: f64,
    pub within: Vec<f64>,
}

fn require_within(po: &PotentialOutcomes) -> Result<()> {
    if let Some(k) = (0..po.num_blocks()).find(|&k| po.block_units(k).len() < 2) {
        return Err(Error::InvalidData(format!(
            "block {k} has a single unit; within-block variances need at least two"
        )));
    }
    if po.num_blocks() < 2 {
        return Err(Error::InvalidData(
            "between-block variances need at least two blocks".into(),
        ));
    }
    Ok(())
}

fn check_weights(po: &PotentialOutcomes, w: &Weights) -> Result<()> {
    if w.len() != po.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} blocks",
            w.len(),
            po.num_blocks()
        )));
    }
    Ok(())
}

/// `(K-1)^{-1} sum_k x_k^2` for already-centered terms.
fn between_sum(terms: impl Iterator<Item = f64>, num_blocks: usize) -> f64 {
    sum(terms.map(|x| x * x)) / (num_blocks - 1) as f64
}

pub fn variance_components(po: &PotentialOutcomes, w: &Weights) -> Result<VarianceComponents> {
    require_within(po)?;
    check_weights(po, w)?;
    let nt = po.num_treatments();
    let nk = po.num_blocks();
    let means = block_means(po);
    let ybar = weighted_means(po, w);
    let unit = |z: usize| {
        let mut c = vec![0.0; nt];
        c[z] = 1.0;
        c
    };
    let mut within = vec![vec![0.0; nt]; nk];
    let mut within_pair = vec![vec![vec![0.0; nt]; nt]; nk];
    for k in 0..nk {
        for z in 0..nt {
            within[k][z] = po.block_combination_var(k, &unit(z)).expect("n_k >= 2");
            for z2 in (z + 1)..nt {
                let mut c = unit(z);
                c[z2] = -1.0;
                let v = po.block_combination_var(k, &c).expect("n_k >= 2");
                within_pair[k][z][z2] = v;
                within_pair[k][z2][z] = v;
            }
        }
    }
    let gamma: Vec<f64> = (0..nk).map(|k| w.scaled(k)).collect();
    let mut between_ht = vec![0.0; nt];
    let mut between_haj = vec![0.0; nt];
    let mut between_ht_pair = vec![vec![0.0; nt]; nt];
    let mut between_haj_pair = vec![vec![0.0; nt]; nt];
    for z in 0..nt {
        between_ht[z] = between_sum((0..nk).map(|k| gamma[k] * means[k][z] - ybar[z]), nk);
        between_haj[z] = between_sum((0..nk).map(|k| gamma[k] * (means[k][z] - ybar[z])), nk);
        for z2 in (z + 1)..nt {
            let d = ybar[z] - ybar[z2];
            let ht = between_sum(
                (0..nk).map(|k| gamma[k] * (means[k][z] - means[k][z2]) - d),
                nk,
            );
            let haj = between_sum(
                (0..nk).map(|k| gamma[k] * (means[k][z] - means[k][z2] - d)),
                nk,
            );
            between_ht_pair[z][z2] = ht;
            between_ht_pair[z2][z] = ht;
            between_haj_pair[z][z2] = haj;
            between_haj_pair[z2][z] = haj;
        }
    }
    Ok(VarianceComponents {
        within,
        within_pair,
        between_ht,
        between_ht_pair,
        between_haj,
        between_haj_pair,
    })
}

pub fn contrast_components(
    po: &PotentialOutcomes,
    w: &Weights,
    g: &Contrast,
) -> Result<ContrastComponents> {
    require_within(po)?;
    check_weights(po, w)?;
    let nk = po.num_blocks();
    let means = block_means(po);
    let target = g.dot(&weighted_means(po, w));
    let gm: Vec<f64> = means.iter().map(|m| g.dot(m)).collect();
    Ok(ContrastComponents {
        between_ht: between_sum((0..nk).map(|k| w.scaled(k) * gm[k] - target), nk),
        between_haj: between_sum((0..nk).map(|k| w.scaled(k) * (gm[k] - target)), nk),
        within: (0..nk)
            .map(|k| w.scaled(k).powi(2) * po.block_combination_var(k, g.values()).expect("n_k >= 2"))
            .collect(),
    })
}

fn cov_from_between(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    w: &Weights,
    comps: &VarianceComponents,
    between: &[f64],
    between_pair: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let nt = design.num_treatments();
    let nk = design.num_blocks();
    let kf = nk as f64;
    let t = design.subset_size() as f64;
    let inc = incidence(design);
    let p = &inc.marginal;
    let q = &inc.pairwise;
    let sizes = po.block_sizes();
    let mut cov = vec![vec![0.0; nt]; nt];
    for a in 0..nt {
        for b in 0..nt {
            let (bb, wb) = if a == b {
                let within = sum((0..nk).map(|k| {
                    w.scaled(k).powi(2) * comps.within[k][a] * (t - 1.0) / sizes[k] as f64
                })) / kf;
                ((1.0 / p[a] - 1.0) * between[a], within / p[a])
            } else {
                let ratio = q[a][b] / (p[a] * p[b]);
                let between_term = 0.5 * (ratio - 1.0) * (between[a] + between[b] - between_pair[a][b]);
                let within = sum((0..nk).map(|k| {
                    w.scaled(k).powi(2)
                        * (comps.within[k][a] + comps.within[k][b] - comps.within_pair[k][a][b])
                        / sizes[k] as f64
                })) / kf;
                (between_term, -0.5 * ratio * within)
            };
            cov[a][b] = (bb + wb) / kf;
        }
    }
    cov
}

/// Exact covariance matrix of the Horvitz-Thompson treatment means, `K^{-1}(B_HT + W)`.
pub fn true_cov_ht(po: &PotentialOutcomes, design: &DesignSpec, w: &Weights) -> Result<Vec<Vec<f64>>> {
    po.check_design(design)?;
    let comps = variance_components(po, w)?;
    Ok(cov_from_between(po, design, w, &comps, &comps.between_ht, &comps.between_ht_pair))
}

/// `K^{-1}(B_Haj + W)`, the large-sample covariance of the Hajek treatment means.
pub fn asymptotic_cov_hajek(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    w: &Weights,
) -> Result<Vec<Vec<f64>>> {
    po.check_design(design)?;
    let comps = variance_components(po, w)?;
    Ok(cov_from_between(po, design, w, &comps, &comps.between_haj, &comps.between_haj_pair))
}

/// `g' Sigma_HT g`.
pub fn true_var_ht(po: &PotentialOutcomes, design: &DesignSpec, w: &Weights, g: &Contrast) -> Result<f64> {
    Ok(g.quad(&true_cov_ht(po, design, w)?))
}

/// Exact variance of the pairwise Horvitz-Thompson contrast in a BIBD with block weights,
/// written as a between-block term plus a within-block term.
pub fn true_var_bibd(po: &PotentialOutcomes, design: &DesignSpec, z1: usize, z2: usize) -> Result<f64> {
    check_pair(design, z1, z2)?;
    require_bibd(design)?;
    po.check_design(design)?;
    let w = Weights::block(design.num_blocks());
    let c = variance_components(po, &w)?;
    let nt = design.num_treatments() as f64;
    let t = design.subset_size() as f64;
    let kf = design.num_blocks() as f64;
    let sizes = po.block_sizes();
    let between = (nt * c.between_ht[z1] + nt * c.between_ht[z2] - c.between_ht_pair[z1][z2]) / kf;
    let within = sum((0..design.num_blocks()).map(|k| {
        let n = sizes[k] as f64;
        nt * c.within[k][z1] / n + nt * c.within[k][z2] / n - c.within_pair[k][z1][z2] / n
    })) / (kf * kf);
    Ok((nt - t) / (t * (nt - 1.0)) * between + nt * (t - 1.0) / (t * (nt - 1.0)) * within)
}

/// Variance summaries entering the adjusted-estimator variance for a pair `(z1, z2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummaries {
    /// `S_bb^2(tau(z1,z2))`.
    pub between_pair: f64,
    /// `S_bb^2(z1)`, `S_bb^2(z2)`.
    pub between_single: [f64; 2],
    /// `Sbar_bb^2(tau(z, W_z))` for `z = z1, z2`.
    pub between_avg: [f64; 2],
    pub blocks: Vec<BlockPairSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPairSummary {
    pub size: usize,
    /// `S_k^2(z1)`, `S_k^2(z2)`.
    pub within_single: [f64; 2],
    /// `S_k^2(tau(z1,z2))`.
    pub within_pair: f64,
    /// `V_k(z1, z2)`.
    pub v: f64,
    /// `Vbar_k(z1)`, `Vbar_k(z2)`.
    pub v_bar: [f64; 2],
}

/// Closed-form average of pair variances over the subsets containing `own` but not the other
/// member of the pair.
fn avg_pair_var(
    table: &AdjustedProbTable,
    own: usize,
    pair: [usize; 2],
    t: usize,
    pair_var: impl Fn(usize, usize) -> f64,
) -> f64 {
    let side = table.side(own);
    let nt = side.single.len();
    let tm1 = (t - 1) as f64;
    let outside: Vec<usize> = (0..nt).filter(|z| !pair.contains(z)).collect();
    let first = sum(outside.iter().map(|&z| side.single[z] / tm1 * pair_var(own, z)));
    let second = sum(outside.iter().flat_map(|&a| {
        outside
            .iter()
            .filter(move |&&b| b != a)
            .map(move |&b| (a, b))
    })
    .map(|(a, b)| side.joint[a][b] / (2.0 * tm1 * tm1) * pair_var(a, b)));
    first - second
}

pub fn pair_summaries(po: &PotentialOutcomes, design: &DesignSpec, z1: usize, z2: usize) -> Result<PairSummaries> {
    check_pair(design, z1, z2)?;
    require_bibd(design)?;
    po.check_design(design)?;
    let table = conditional_probs(design, z1, z2)?;
    let c = variance_components(po, &Weights::block(design.num_blocks()))?;
    let t = design.subset_size();
    let tf = t as f64;
    let nt = design.num_treatments();
    let pair = [z1, z2];
    let between_avg = pair.map(|own| avg_pair_var(&table, own, pair, t, |a, b| c.between_ht_pair[a][b]));
    let blocks = (0..design.num_blocks())
        .map(|k| {
            let n = po.block_sizes()[k] as f64;
            let wk = &c.within[k];
            let v = wk[z1] / (n / tf) + wk[z2] / (n / tf) - c.within_pair[k][z1][z2] / n;
            let v_bar = pair.map(|own| {
                let side = table.side(own);
                let avg_single = sum((0..nt)
                    .filter(|z| !pair.contains(z))
                    .map(|z| side.single[z] / (tf - 1.0) * wk[z]));
                let avg_pair = avg_pair_var(&table, own, pair, t, |a, b| c.within_pair[k][a][b]);
                wk[own] / (n / tf) + avg_single / (tf - 1.0) / (n / tf) - avg_pair / n
            });
            BlockPairSummary {
                size: po.block_sizes()[k],
                within_single: [wk[z1], wk[z2]],
                within_pair: c.within_pair[k][z1][z2],
                v,
                v_bar,
            }
        })
        .collect();
    Ok(PairSummaries {
        between_pair: c.between_ht_pair[z1][z2],
        between_single: [c.between_ht[z1], c.between_ht[z2]],
        between_avg,
        blocks,
    })
}

/// Between-block and within-block parts of the adjusted estimator's variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjustedVariance {
    pub between: f64,
    pub within: f64,
}

impl AdjustedVariance {
    pub fn total(&self) -> f64 {
        self.between + self.within
    }
}

fn adjusted_from_summaries(design: &DesignSpec, s: &PairSummaries) -> AdjustedVariance {
    let nt = design.num_treatments() as f64;
    let t = design.subset_size() as f64;
    let kf = design.num_blocks() as f64;
    let between = (nt - t) / (nt * (t - 1.0)) / kf
        * (s.between_pair + (nt - 1.0) * ((t - 1.0) / t) * (s.between_avg[0] + s.between_avg[1]));
    let within = (nt - 1.0) / (nt * (t - 1.0)) / (kf * kf)
        * sum(s.blocks.iter().map(|b| {
            t * b.v + (nt - t) * ((t - 1.0) / t) * (b.v_bar[0] + b.v_bar[1])
        }));
    AdjustedVariance { between, within }
}

/// Exact variance of the adjusted pairwise estimator in a BIBD.
pub fn true_var_adjusted(po: &PotentialOutcomes, design: &DesignSpec, z1: usize, z2: usize) -> Result<f64> {
    Ok(true_var_adjusted_parts(po, design, z1, z2)?.total())
}

pub fn true_var_adjusted_parts(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    z1: usize,
    z2: usize,
) -> Result<AdjustedVariance> {
    let s = pair_summaries(po, design, z1, z2)?;
    Ok(adjusted_from_summaries(design, &s))
}

/// Same quantity as [`true_var_adjusted`], averaging contrast variances subset by subset
/// instead of using the closed-form probability weights.
pub fn true_var_adjusted_explicit(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    z1: usize,
    z2: usize,
) -> Result<f64> {
    check_pair(design, z1, z2)?;
    require_bibd(design)?;
    po.check_design(design)?;
    let nt = design.num_treatments();
    let nk = design.num_blocks();
    let t = design.subset_size();
    let tf = t as f64;
    let c = variance_components(po, &Weights::block(nk))?;
    let means = block_means(po);
    // Coefficients of Y(own) - (t-1)^{-1} sum_{z in subset, z != own} Y(z).
    let coefs = |own: usize, subset: &[usize]| -> Vec<f64> {
        let mut v = vec![0.0; nt];
        for &z in subset {
            v[z] = if z == own { 1.0 } else { -1.0 / (tf - 1.0) };
        }
        v
    };
    let mut between_avg = [0.0; 2];
    let mut v_bar = vec![[0.0; 2]; nk];
    for (side, (own, other)) in [(z1, z2), (z2, z1)].into_iter().enumerate() {
        let idx = subsets_with_without(design, own, other);
        let total: f64 = idx.iter().map(|&i| design.reps()[i] as f64).sum();
        for &i in &idx {
            let weight = design.reps()[i] as f64 / total;
            let subset = &design.catalog()[i];
            let cf = coefs(own, subset);
            let block_vals: Vec<f64> = means
                .iter()
                .map(|m| sum(cf.iter().zip(m).map(|(a, b)| a * b)))
                .collect();
            between_avg[side] += weight * sample_var(&block_vals).expect("K >= 2");
            for k in 0..nk {
                let n = po.block_sizes()[k] as f64;
                let var_est = sum(subset.iter().map(|&z| cf[z] * cf[z] * c.within[k][z] / (n / tf)))
                    - po.block_combination_var(k, &cf).expect("n_k >= 2") / n;
                v_bar[k][side] += weight * var_est;
            }
        }
    }
    let blocks = (0..nk)
        .map(|k| {
            let n = po.block_sizes()[k] as f64;
            let wk = &c.within[k];
            BlockPairSummary {
                size: po.block_sizes()[k],
                within_single: [wk[z1], wk[z2]],
                within_pair: c.within_pair[k][z1][z2],
                v: wk[z1] / (n / tf) + wk[z2] / (n / tf) - c.within_pair[k][z1][z2] / n,
                v_bar: v_bar[k],
            }
        })
        .collect();
    let s = PairSummaries {
        between_pair: c.between_ht_pair[z1][z2],
        between_single: [c.between_ht[z1], c.between_ht[z2]],
        between_avg,
        blocks,
    };
    Ok(adjusted_from_summaries(design, &s).total())
}

/// Difference between the between-block variances of the HT and Hajek treatment means,
/// computed directly and through the weight-moment identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HtHajGap {
    pub direct: f64,
    pub identity: f64,
}

/// `S^2_HT(z) - S^2_Haj(z)`.
pub fn ht_haj_gap(po: &PotentialOutcomes, w: &Weights, z: usize) -> Result<HtHajGap> {
    check_weights(po, w)?;
    let nk = po.num_blocks();
    if nk < 2 {
        return Err(Error::InvalidData("need at least two blocks".into()));
    }
    let kf = nk as f64;
    let means = block_means(po);
    let ybar = weighted_means(po, w)[z];
    let gamma: Vec<f64> = (0..nk).map(|k| w.scaled(k)).collect();
    let ht = between_sum((0..nk).map(|k| gamma[k] * means[k][z] - ybar), nk);
    let haj = between_sum((0..nk).map(|k| gamma[k] * (means[k][z] - ybar)), nk);
    let gamma_sq = sum(gamma.iter().map(|g| g * g)) / kf;
    let gamma_sq_y = sum((0..nk).map(|k| gamma[k] * gamma[k] * means[k][z])) / kf;
    let haj_minus_ht = (ybar * ybar * (gamma_sq + 1.0) - 2.0 * ybar * gamma_sq_y) / (1.0 - 1.0 / kf);
    Ok(HtHajGap {
        direct: ht - haj,
        identity: -haj_minus_ht,
    })
}

/// Threshold on between-block variability, relative to `K^{-1} sum_k S_k^2 / n_k`, beyond
/// which the adjusted estimator has the smaller variance under an additive model with
/// exchangeable within-block correlation `rho`.
pub fn threshold_constant(num_treatments: usize, subset_size: usize, rho: f64) -> f64 {
    let nt = num_treatments as f64;
    let t = subset_size as f64;
    (nt - 1.0) / nt * (1.0 + rho / (t - 1.0)) + rho
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDiffs {
    /// Between-block part of `var(adjusted) - var(design-based)`.
    pub between: f64,
    /// Within-block part of the same difference.
    pub within: f64,
    /// `1 + t(T-1)/(T(t-1))`.
    pub perfect_correlation_threshold: f64,
    /// `(T-1)/T`.
    pub independent_threshold: f64,
}

impl VarianceDiffs {
    pub fn total(&self) -> f64 {
        self.between + self.within
    }
}

/// Between- and within-block components of `var(adjusted) - var(design-based)` for a pair.
pub fn model_variance_diffs(s: &PairSummaries, design: &DesignSpec) -> Result<VarianceDiffs> {
    require_bibd(design)?;
    if s.blocks.len() != design.num_blocks() {
        return Err(Error::InvalidArgument("one block summary per block is required".into()));
    }
    let nt = design.num_treatments() as f64;
    let t = design.subset_size() as f64;
    let kf = design.num_blocks() as f64;
    let lead = (2.0 * nt * t - nt - t) / (nt * (nt - 1.0) * (t - 1.0));
    let between = (nt - t) / (kf * t)
        * (lead * s.between_pair
            + (0..2)
                .map(|i| (nt - 1.0) / nt * s.between_avg[i] - nt / (nt - 1.0) * s.between_single[i])
                .sum::<f64>());
    let within = (nt - t) / (kf * kf * t)
        * sum(s.blocks.iter().map(|b| {
            let n = b.size as f64;
            lead * b.v
                + (0..2)
                    .map(|i| {
                        (nt - 1.0) / nt * b.v_bar[i] - nt * (t - 1.0) / (nt - 1.0) * b.within_single[i] / n
                    })
                    .sum::<f64>()
        }));
    Ok(VarianceDiffs {
        between,
        within,
        perfect_correlation_threshold: 1.0 + t * (nt - 1.0) / (nt * (t - 1.0)),
        independent_threshold: (nt - 1.0) / nt,
    })
}

/// Summaries implied by an additive model `Y_i(z) = beta_k + alpha_z + e_zi` where the
/// block effects have variance `between_var`, block `k` has within variance `within_var[k]`
/// for every treatment, and errors are exchangeable with correlation `rho`.
pub fn additive_model_summaries(
    design: &DesignSpec,
    between_var: f64,
    within_var: &[f64],
    rho: f64,
) -> Result<PairSummaries> {
    require_bibd(design)?;
    if within_var.len() != design.num_blocks() {
        return Err(Error::InvalidArgument("one within-block variance per block".into()));
    }
    let t = design.subset_size() as f64;
    let blocks = within_var
        .iter()
        .zip(design.block_sizes())
        .map(|(&s2, &size)| {
            let n = size as f64;
            let pair_var = 2.0 * s2 * (1.0 - rho);
            let avg_pair = s2 * (1.0 - rho) * t / (t - 1.0);
            let v = 2.0 * s2 / (n / t) - pair_var / n;
            let vb = s2 / (n / t) + s2 / (t - 1.0) / (n / t) - avg_pair / n;
            BlockPairSummary {
                size,
                within_single: [s2, s2],
                within_pair: pair_var,
                v,
                v_bar: [vb, vb],
            }
        })
        .collect();
    Ok(PairSummaries {
        between_pair: 0.0,
        between_single: [between_var, between_var],
        between_avg: [0.0, 0.0],
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, five_treatment_bibd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_po(design: &DesignSpec, seed: u64) -> PotentialOutcomes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..design.total_units())
            .map(|_| (0..design.num_treatments()).map(|_| rng.gen_range(-3.0..5.0)).collect())
            .collect();
        PotentialOutcomes::from_design_order(design, rows).unwrap()
    }

    fn three_pairs(reps: usize, n: usize) -> DesignSpec {
        build_design(3 * reps, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![reps; 3], vec![n; 3 * reps]).unwrap()
    }

    #[test]
    fn block_means_by_naive_loop() {
        let d = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![2, 4, 6]).unwrap();
        let po = random_po(&d, 1);
        let m = block_means(&po);
        let mut start = 0;
        for (k, &n) in d.block_sizes().iter().enumerate() {
            for z in 0..3 {
                let mut acc = 0.0;
                for i in start..start + n {
                    acc += po.outcome(i, z);
                }
                assert!((m[k][z] - acc / n as f64).abs() < 1e-14);
            }
            start += n;
        }
        let one = PotentialOutcomes::new(vec![vec![1.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]], vec![0, 0], 1).unwrap();
        assert_eq!(block_means(&one)[0][0], 2.0);
    }

    #[test]
    fn estimand_cases() {
        let d = three_pairs(1, 2);
        let rows = vec![vec![5.0, 2.0, 1.0]; 6];
        let po = PotentialOutcomes::from_design_order(&d, rows).unwrap();
        let w = Weights::block(3);
        assert!((estimand(&po, &w, &Contrast::pair(3, 0, 1)) - 3.0).abs() < 1e-14);
        assert_eq!(estimand(&po, &w, &Contrast::new(vec![0.0; 3]).unwrap()), 0.0);
        let po = random_po(&d, 4);
        let g = Contrast::new(vec![1.0, 0.5, -1.5]).unwrap();
        let wu = Weights::unit(&d.block_sizes().to_vec());
        assert!((estimand(&po, &wu, &g) - estimand(&po.shifted(7.5), &wu, &g)).abs() < 1e-12);
        assert!(Contrast::new(vec![1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn constant_population_has_zero_variance() {
        let d = three_pairs(2, 4);
        let po = PotentialOutcomes::from_design_order(&d, vec![vec![2.0; 3]; 24]).unwrap();
        let w = Weights::block(6);
        let c = variance_components(&po, &w).unwrap();
        assert!(c.within.iter().flatten().all(|&v| v.abs() < 1e-24));
        assert!(c.between_ht.iter().all(|&v| v.abs() < 1e-24));
        let cov = true_cov_ht(&po, &d, &w).unwrap();
        assert!(cov.iter().flatten().all(|&v| v.abs() < 1e-20));
        assert!(true_var_bibd(&po, &d, 0, 1).unwrap().abs() < 1e-20);
        assert!(true_var_adjusted(&po, &d, 0, 1).unwrap().abs() < 1e-20);
    }

    #[test]
    fn block_weights_make_ht_and_hajek_components_equal() {
        let d = three_pairs(2, 4);
        let po = random_po(&d, 2);
        let c = variance_components(&po, &Weights::block(6)).unwrap();
        for z in 0..3 {
            assert!((c.between_ht[z] - c.between_haj[z]).abs() < 1e-12);
            for z2 in 0..3 {
                assert!((c.between_ht_pair[z][z2] - c.between_haj_pair[z][z2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_outcomes_have_zero_pair_variance() {
        let d = three_pairs(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = (0..12)
            .map(|_| {
                let base: f64 = rng.gen();
                vec![base, base + 1.0, base - 2.0]
            })
            .collect();
        let po = PotentialOutcomes::from_design_order(&d, rows).unwrap();
        let c = variance_components(&po, &Weights::block(3)).unwrap();
        assert!(c.within_pair.iter().flatten().flatten().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn shift_changes_ht_between_only_for_unequal_weights() {
        let d = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![2, 4, 6]).unwrap();
        let po = random_po(&d, 5);
        let shifted = po.shifted(10.0);
        let wu = Weights::unit(d.block_sizes());
        let a = variance_components(&po, &wu).unwrap();
        let b = variance_components(&shifted, &wu).unwrap();
        assert!((a.between_ht[0] - b.between_ht[0]).abs() > 1e-3);
        assert!((a.between_haj[0] - b.between_haj[0]).abs() < 1e-10);
        assert!((a.within[1][2] - b.within[1][2]).abs() < 1e-10);
        assert!((a.between_ht_pair[0][1] - b.between_ht_pair[0][1]).abs() < 1e-10);
        let wb = Weights::block(3);
        let a = variance_components(&po, &wb).unwrap();
        let b = variance_components(&shifted, &wb).unwrap();
        assert!((a.between_ht[0] - b.between_ht[0]).abs() < 1e-10);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let d = five_treatment_bibd(1, vec![6; 10]).unwrap();
        for seed in 0..5 {
            let po = random_po(&d, seed);
            let cov = true_cov_ht(&po, &d, &Weights::block(10)).unwrap();
            for a in 0..5 {
                for b in 0..5 {
                    assert!((cov[a][b] - cov[b][a]).abs() < 1e-14);
                }
            }
            // Check PSD via random quadratic forms.
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..50 {
                let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let q: f64 = (0..5).flat_map(|a| (0..5).map(move |b| (a, b))).map(|(a, b)| x[a] * x[b] * cov[a][b]).sum();
                assert!(q > -1e-10);
            }
        }
    }

    #[test]
    fn corollary_route_matches_quadratic_form() {
        let d = five_treatment_bibd(2, vec![6; 20]).unwrap();
        let po = random_po(&d, 9);
        let w = Weights::block(20);
        for (z1, z2) in [(0, 1), (2, 4)] {
            let a = true_var_bibd(&po, &d, z1, z2).unwrap();
            let b = true_var_ht(&po, &d, &w, &Contrast::pair(5, z1, z2)).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn explicit_average_matches_closed_form() {
        for d in [five_treatment_bibd(1, vec![6; 10]).unwrap(), three_pairs(2, 4), unreduced(6, 3)] {
            let po = random_po(&d, 17);
            let nt = d.num_treatments();
            for (z1, z2) in [(0, 1), (nt - 1, 1)] {
                let a = true_var_adjusted(&po, &d, z1, z2).unwrap();
                let b = true_var_adjusted_explicit(&po, &d, z1, z2).unwrap();
                assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
            }
        }
    }

    fn unreduced(nt: usize, t: usize) -> DesignSpec {
        crate::design::unreduced_design(nt, t, 1, 2 * t).unwrap()
    }

    #[test]
    fn additive_population_has_no_between_adjusted_term() {
        let d = five_treatment_bibd(1, vec![6; 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha = [0.0, 1.0, -2.0, 0.5, 3.0];
        let mut rows = Vec::new();
        for k in 0..10 {
            let beta = k as f64 * 0.7;
            for _ in 0..6 {
                rows.push(alpha.iter().map(|a| beta + a + rng.gen_range(-1.0..1.0)).collect());
            }
        }
        // Make block means exactly additive by centering each column within each block.
        let mut po_rows: Vec<Vec<f64>> = rows;
        for k in 0..10 {
            for z in 0..5 {
                let m: f64 = (0..6).map(|j| po_rows[6 * k + j][z]).sum::<f64>() / 6.0;
                for j in 0..6 {
                    po_rows[6 * k + j][z] += k as f64 * 0.7 + alpha[z] - m;
                }
            }
        }
        let po = PotentialOutcomes::from_design_order(&d, po_rows).unwrap();
        let parts = true_var_adjusted_parts(&po, &d, 0, 1).unwrap();
        assert!(parts.between.abs() < 1e-12);
        assert!(parts.within > 0.0);
    }

    #[test]
    fn gap_identity_and_sign_cases() {
        let d = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![2, 4, 6]).unwrap();
        let po = random_po(&d, 21);
        let wu = Weights::unit(d.block_sizes());
        for z in 0..3 {
            let g = ht_haj_gap(&po, &wu, z).unwrap();
            assert!((g.direct - g.identity).abs() < 1e-10);
            let g = ht_haj_gap(&po, &Weights::block(3), z).unwrap();
            assert!(g.direct.abs() < 1e-12 && g.identity.abs() < 1e-12);
        }
        // Block means constant over blocks.
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![3.0 + if i % 2 == 0 { 1.0 } else { -1.0 }, 1.0, 2.0]).collect();
        let po = PotentialOutcomes::from_design_order(&d, rows).unwrap();
        let g = ht_haj_gap(&po, &wu, 0).unwrap();
        assert!(g.direct >= 0.0 && (g.direct - g.identity).abs() < 1e-10);
        // K w_k Ybar_k constant over blocks.
        let sizes = d.block_sizes();
        let rows: Vec<Vec<f64>> = sizes
            .iter()
            .flat_map(|&n| {
                let level = 12.0 / (3.0 * n as f64);
                std::iter::repeat(vec![level, 1.0, 1.0]).take(n)
            })
            .collect();
        let po = PotentialOutcomes::from_design_order(&d, rows).unwrap();
        let g = ht_haj_gap(&po, &wu, 0).unwrap();
        assert!(g.direct <= 1e-12 && (g.direct - g.identity).abs() < 1e-10);
    }

    #[test]
    fn threshold_constants() {
        let c1 = threshold_constant(5, 3, 1.0);
        assert!((c1 - (1.0 + 3.0 * 4.0 / (5.0 * 2.0))).abs() < 1e-15);
        assert!((threshold_constant(5, 3, 0.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn additive_model_boundaries_give_zero_difference() {
        let d = five_treatment_bibd(1, vec![15; 10]).unwrap();
        let within: Vec<f64> = (0..10).map(|k| 50.0 + k as f64).collect();
        let m = within.iter().zip(d.block_sizes()).map(|(s, &n)| s / n as f64).sum::<f64>() / 10.0;
        for rho in [0.0, 0.3, 1.0] {
            let c = threshold_constant(5, 3, rho);
            let s = additive_model_summaries(&d, c * m, &within, rho).unwrap();
            let diff = model_variance_diffs(&s, &d).unwrap();
            assert!(diff.total().abs() < 1e-10, "rho {rho}: {}", diff.total());
            let above = additive_model_summaries(&d, 1.5 * c * m, &within, rho).unwrap();
            assert!(model_variance_diffs(&above, &d).unwrap().total() < 0.0);
        }
    }

    #[test]
    fn diffs_match_difference_of_exact_variances() {
        for d in [five_treatment_bibd(1, vec![6; 10]).unwrap(), three_pairs(2, 4)] {
            let po = random_po(&d, 33);
            let s = pair_summaries(&po, &d, 0, 1).unwrap();
            let diff = model_variance_diffs(&s, &d).unwrap();
            let exact = true_var_adjusted(&po, &d, 0, 1).unwrap() - true_var_bibd(&po, &d, 0, 1).unwrap();
            assert!((diff.total() - exact).abs() < 1e-9, "{} vs {exact}", diff.total());
        }
    }

    #[test]
    fn non_bibd_rejected() {
        let d = build_design(2, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![1, 1], vec![2; 2]).unwrap();
        let po = random_po(&d, 1);
        assert!(matches!(true_var_bibd(&po, &d, 0, 1), Err(Error::NotBibd(_))));
        assert!(true_var_adjusted(&po, &d, 0, 1).is_err());
    }
}
