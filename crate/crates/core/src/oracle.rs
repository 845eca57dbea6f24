//! Exhaustive-enumeration checks of the exact mean, variance and bias formulas.

use std::sync::Arc;

use serde::Serialize;

use crate::design::{check_bibd, incidence, DesignSpec};
use crate::error::Result;
use crate::estimate::{adjusted, ht_means, ObservedData};
use crate::population::{
    estimand, true_cov_ht, true_var_adjusted, true_var_bibd, weighted_means, Contrast,
    PotentialOutcomes, Weights,
};
use crate::randomize::{enumerate_assignments_capped, Assignment, DEFAULT_ENUMERATION_CAP};
use crate::variance::{
    adjusted_var, bias_adjusted, bias_cov_bb_ht, bias_cov_wb_ht, cov_bb, cov_wb, CovKind, Flavor,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(name: impl Into<String>, expected: f64, observed: f64, tolerance: f64) -> Self {
        let passed = (expected - observed).abs() <= tolerance * expected.abs().max(1.0);
        IdentityCheck {
            name: name.into(),
            expected,
            observed,
            tolerance,
            passed,
        }
    }
}

/// Probability-weighted first and second moments of quantities computed on every assignment.
#[derive(Debug, Clone)]
pub struct Moments {
    count: usize,
    centre: Vec<f64>,
    first: Vec<f64>,
    second: Vec<Vec<f64>>,
}

impl Moments {
    /// Accumulates around `centre`, usually the known expectation, to limit cancellation.
    pub fn new(centre: Vec<f64>) -> Self {
        let n = centre.len();
        Moments {
            count: 0,
            centre,
            first: vec![0.0; n],
            second: vec![vec![0.0; n]; n],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let d: Vec<f64> = x.iter().zip(&self.centre).map(|(a, c)| a - c).collect();
        for i in 0..d.len() {
            self.first[i] += d[i];
            for j in 0..d.len() {
                self.second[i][j] += d[i] * d[j];
            }
        }
    }

    pub fn merge(mut self, other: Moments) -> Moments {
        self.count += other.count;
        for i in 0..self.first.len() {
            self.first[i] += other.first[i];
            for j in 0..self.first.len() {
                self.second[i][j] += other.second[i][j];
            }
        }
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.first.iter().zip(&self.centre).map(|(s, c)| c + s / n).collect()
    }

    pub fn cov(&self) -> Vec<Vec<f64>> {
        let n = self.count as f64;
        let m: Vec<f64> = self.first.iter().map(|s| s / n).collect();
        (0..m.len())
            .map(|i| (0..m.len()).map(|j| self.second[i][j] / n - m[i] * m[j]).collect())
            .collect()
    }
}

/// Enumerate all assignments and accumulate the moments of `f`.
pub fn enumerate_moments<F>(
    po: &PotentialOutcomes,
    design: &DesignSpec,
    cap: u64,
    centre: Vec<f64>,
    f: F,
) -> Result<Moments>
where
    F: Fn(&ObservedData) -> Vec<f64> + Sync,
{
    po.check_design(design)?;
    let dist = enumerate_assignments_capped(design, cap)?;
    let shared = Arc::new(design.clone());
    Ok(dist.fold(
        || Moments::new(centre.clone()),
        |acc, a: &Assignment| {
            let obs = ObservedData::from_assignment(po, &shared, a);
            acc.push(&f(&obs));
        },
        Moments::merge,
    ))
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub contrast: Contrast,
    pub pair: (usize, usize),
    pub cap: u64,
}

impl VerifyOptions {
    pub fn for_design(design: &DesignSpec) -> Self {
        VerifyOptions {
            contrast: Contrast::pair(design.num_treatments(), 0, 1),
            pair: (0, 1),
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Run every applicable enumeration identity for a design and population.
pub fn verify(po: &PotentialOutcomes, design: &DesignSpec, opts: &VerifyOptions) -> Result<Vec<IdentityCheck>> {
    let nt = design.num_treatments();
    let nk = design.num_blocks();
    let g = &opts.contrast;
    let (z1, z2) = opts.pair;
    let inc = incidence(design);
    let bibd = check_bibd(design);
    let t = design.subset_size();
    let replicated = design.block_sizes().iter().all(|&n| n / t >= 2);
    let support_ok = g.support().iter().all(|&z| inc.occurrences[z] >= 2);
    let pair_ok = bibd.is_bibd && bibd.common_co_occurrences.unwrap_or(0) >= 2;
    let weights = [
        ("block", Weights::block(nk)),
        ("unit", Weights::unit(design.block_sizes())),
    ];

    // Layout: per weight kind T HT means, then bb and wb contrast variances; then the
    // adjusted point and its two variance estimates.
    let per_weight = nt + 2;
    let mut centre = Vec::new();
    for (_, w) in &weights {
        centre.extend(weighted_means(po, w));
        centre.extend([0.0, 0.0]);
    }
    let tau_pair = estimand(po, &weights[0].1, &Contrast::pair(nt, z1, z2));
    centre.extend([tau_pair, 0.0, 0.0]);

    let moments = enumerate_moments(po, design, opts.cap, centre, |obs| {
        let mut out = Vec::with_capacity(2 * per_weight + 3);
        for (_, w) in &weights {
            out.extend(ht_means(obs, w).expect("weights sized"));
            let bb = if support_ok {
                cov_bb(obs, w, CovKind::HorvitzThompson)
                    .and_then(|c| c.contrast_variance(g))
                    .unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            let wb = if support_ok && replicated {
                cov_wb(obs, w, CovKind::HorvitzThompson)
                    .and_then(|c| c.contrast_variance(g))
                    .unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            out.extend([bb, wb]);
        }
        if bibd.is_bibd {
            out.push(adjusted(obs, z1, z2).expect("bibd").point);
            out.push(if pair_ok { adjusted_var(obs, z1, z2, Flavor::Bb).unwrap_or(f64::NAN) } else { f64::NAN });
            out.push(if pair_ok && replicated {
                adjusted_var(obs, z1, z2, Flavor::Wb).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            });
        } else {
            out.extend([f64::NAN; 3]);
        }
        out
    })?;
    let mean = moments.mean();
    let cov = moments.cov();
    let mut checks = Vec::new();
    for (wi, (label, w)) in weights.iter().enumerate() {
        let base = wi * per_weight;
        let target = weighted_means(po, w);
        for z in 0..nt {
            checks.push(IdentityCheck::new(
                format!("ht_mean_unbiased[{label}][z={}]", z + 1),
                target[z],
                mean[base + z],
                1e-12,
            ));
        }
        let exact = true_cov_ht(po, design, w)?;
        for a in 0..nt {
            for b in a..nt {
                checks.push(IdentityCheck::new(
                    format!("ht_covariance[{label}][{},{}]", a + 1, b + 1),
                    exact[a][b],
                    cov[base + a][base + b],
                    1e-10,
                ));
            }
        }
        let var_g = g.quad(&exact);
        if support_ok {
            checks.push(IdentityCheck::new(
                format!("bb_bias[{label}]"),
                var_g + bias_cov_bb_ht(po, design, w, g)?,
                mean[base + nt],
                1e-9,
            ));
            if replicated {
                checks.push(IdentityCheck::new(
                    format!("wb_bias[{label}]"),
                    var_g + bias_cov_wb_ht(po, design, w, g)?,
                    mean[base + nt + 1],
                    1e-9,
                ));
            }
        }
    }
    if bibd.is_bibd {
        let a = 2 * per_weight;
        let pair_g = Contrast::pair(nt, z1, z2);
        let ht_pair_var = {
            let idx = [z1, z2];
            let c = &cov;
            c[idx[0]][idx[0]] + c[idx[1]][idx[1]] - 2.0 * c[idx[0]][idx[1]]
        };
        let bibd_var = true_var_bibd(po, design, z1, z2)?;
        checks.push(IdentityCheck::new(
            "pairwise_variance_closed_form",
            pair_g.quad(&true_cov_ht(po, design, &weights[0].1)?),
            bibd_var,
            1e-12,
        ));
        checks.push(IdentityCheck::new("pairwise_variance_enumeration", bibd_var, ht_pair_var, 1e-10));
        checks.push(IdentityCheck::new("adjusted_unbiased", tau_pair, mean[a], 1e-12));
        let adj_var = true_var_adjusted(po, design, z1, z2)?;
        checks.push(IdentityCheck::new("adjusted_variance", adj_var, cov[a][a], 1e-10));
        if pair_ok {
            checks.push(IdentityCheck::new(
                "adjusted_bb_bias",
                adj_var + bias_adjusted(po, design, z1, z2, Flavor::Bb)?,
                mean[a + 1],
                1e-9,
            ));
            if replicated {
                checks.push(IdentityCheck::new(
                    "adjusted_wb_bias",
                    adj_var + bias_adjusted(po, design, z1, z2, Flavor::Wb)?,
                    mean[a + 2],
                    1e-9,
                ));
            }
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::build_design;
    use rand::{Rng, SeedableRng};

    fn random_po(design: &DesignSpec, seed: u64) -> PotentialOutcomes {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..design.total_units())
            .map(|_| (0..design.num_treatments()).map(|_| rng.gen_range(-2.0..4.0)).collect())
            .collect();
        PotentialOutcomes::from_design_order(design, rows).unwrap()
    }

    #[test]
    fn all_identities_on_small_designs() {
        let designs = [
            build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![2; 3]).unwrap(),
            build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![4, 2, 6]).unwrap(),
            build_design(6, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![2; 3], vec![2; 6]).unwrap(),
            build_design(4, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![2, 2], vec![4; 4]).unwrap(),
            build_design(5, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![2, 2, 1], vec![4, 4, 2, 4, 4]).unwrap(),
        ];
        let mut names = std::collections::BTreeSet::new();
        for (i, d) in designs.iter().enumerate() {
            let po = random_po(d, i as u64);
            let checks = verify(&po, d, &VerifyOptions::for_design(d)).unwrap();
            for c in &checks {
                assert!(c.passed, "design {i}: {c:?}");
                names.insert(c.name.clone());
            }
        }
        for name in ["wb_bias[unit]", "bb_bias[block]", "adjusted_bb_bias", "adjusted_variance"] {
            assert!(names.contains(name), "{name} never exercised");
        }
    }
}
