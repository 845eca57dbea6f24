//! Replicated random assignment over a fixed population, with coverage and SE summaries.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::design::check_bibd;
use crate::error::{Error, Result};
use crate::estimate::{adjusted, hajek, ht, EstimatorKind, ObservedData};
use crate::numeric::{mean, sample_var, sum};
use crate::population::{estimand, true_var_adjusted, true_var_bibd, true_var_ht, Contrast, Weights};
use crate::randomize::{draw_assignment, replicate_rng};
use crate::variance::{adjusted_var, confidence_interval, cov_bb, cov_wb, CovKind, Flavor};

use super::scenario::{Population, Scenario};
use super::worker_pool;

const REPLICATE_SEED_SALT: u64 = 0x5eed_0f_4e91;

/// Summary of one (estimator, variance flavor) combination over all replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalMetrics {
    pub estimator: EstimatorKind,
    pub flavor: Flavor,
    /// Replicates where both the point and the variance estimate were available.
    pub used: usize,
    pub coverage: Option<f64>,
    pub mean_length: Option<f64>,
    pub mean_variance: Option<f64>,
    /// Replicates whose variance estimate was negative and clamped to zero.
    pub clamped: usize,
    /// First reason a replicate could not produce this interval.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointMetrics {
    pub estimator: EstimatorKind,
    pub used: usize,
    pub target: f64,
    pub mean_point: Option<f64>,
    pub empirical_se: Option<f64>,
    /// Exact randomization variance where a closed form is available.
    pub true_var: Option<f64>,
    pub skipped: Option<String>,
}

/// `SE(numerator) / SE(denominator)` over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeRatio {
    pub numerator: EstimatorKind,
    pub denominator: EstimatorKind,
    pub empirical: f64,
    /// Delta-method Monte Carlo standard error of the empirical ratio.
    pub mc_se: f64,
    pub theoretical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub replicates: usize,
    pub estimand: f64,
    pub points: Vec<PointMetrics>,
    pub intervals: Vec<IntervalMetrics>,
    pub se_ratios: Vec<SeRatio>,
}

impl MetricsReport {
    pub fn interval(&self, estimator: EstimatorKind, flavor: Flavor) -> Option<&IntervalMetrics> {
        self.intervals
            .iter()
            .find(|m| m.estimator == estimator && m.flavor == flavor)
    }

    pub fn point(&self, estimator: EstimatorKind) -> Option<&PointMetrics> {
        self.points.iter().find(|m| m.estimator == estimator)
    }

    pub fn se_ratio(&self, numerator: EstimatorKind, denominator: EstimatorKind) -> Option<&SeRatio> {
        self.se_ratios
            .iter()
            .find(|r| r.numerator == numerator && r.denominator == denominator)
    }

    /// Flat `(column, value)` pairs with a fixed column set; missing values are empty.
    pub fn flat_row(&self) -> Vec<(String, String)> {
        let s = &self.scenario;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![
            ("setting".to_string(), s.setting.to_string()),
            ("blocks".into(), s.num_blocks.to_string()),
            ("beta".into(), s.beta.to_string()),
            ("gamma".into(), s.gamma.to_string()),
            ("rho".into(), s.rho.to_string()),
            ("weights".into(), format!("{:?}", s.weights).to_lowercase()),
            ("replicates".into(), self.replicates.to_string()),
            ("seed".into(), s.seed.to_string()),
            ("estimand".into(), self.estimand.to_string()),
        ];
        for est in ESTIMATORS {
            let tag = estimator_tag(est);
            let p = self.point(est);
            row.push((format!("{tag}_mean_point"), opt(p.and_then(|p| p.mean_point))));
            row.push((format!("{tag}_empirical_se"), opt(p.and_then(|p| p.empirical_se))));
            row.push((format!("{tag}_true_se"), opt(p.and_then(|p| p.true_var).map(f64::sqrt))));
            for flavor in [Flavor::Bb, Flavor::Wb] {
                let ftag = format!("{tag}_{}", flavor_tag(flavor));
                let m = self.interval(est, flavor);
                row.push((format!("{ftag}_coverage"), opt(m.and_then(|m| m.coverage))));
                row.push((format!("{ftag}_mean_length"), opt(m.and_then(|m| m.mean_length))));
                row.push((format!("{ftag}_mean_variance"), opt(m.and_then(|m| m.mean_variance))));
            }
        }
        for (num, den) in RATIO_PAIRS {
            let tag = format!("se_ratio_{}_{}", estimator_tag(num), estimator_tag(den));
            let r = self.se_ratio(num, den);
            row.push((tag.clone(), opt(r.map(|r| r.empirical))));
            row.push((format!("{tag}_mc_se"), opt(r.map(|r| r.mc_se))));
            row.push((format!("{tag}_theoretical"), opt(r.and_then(|r| r.theoretical))));
        }
        row
    }
}

const ESTIMATORS: [EstimatorKind; 3] = [
    EstimatorKind::HorvitzThompson,
    EstimatorKind::Hajek,
    EstimatorKind::Adjusted,
];
const RATIO_PAIRS: [(EstimatorKind, EstimatorKind); 2] = [
    (EstimatorKind::Adjusted, EstimatorKind::HorvitzThompson),
    (EstimatorKind::Hajek, EstimatorKind::HorvitzThompson),
];

pub fn estimator_tag(e: EstimatorKind) -> &'static str {
    match e {
        EstimatorKind::HorvitzThompson => "ht",
        EstimatorKind::Hajek => "hajek",
        EstimatorKind::Adjusted => "adjusted",
    }
}

pub fn flavor_tag(f: Flavor) -> &'static str {
    match f {
        Flavor::Bb => "bb",
        Flavor::Wb => "wb",
    }
}

/// The pair `(z1, z2)` when `g = e_z1 - e_z2`.
fn as_pair(g: &Contrast) -> Option<(usize, usize)> {
    let v = g.values();
    let support = g.support();
    if support.len() != 2 {
        return None;
    }
    let (a, b) = (support[0], support[1]);
    match (v[a], v[b]) {
        (x, y) if x == 1.0 && y == -1.0 => Some((a, b)),
        (x, y) if x == -1.0 && y == 1.0 => Some((b, a)),
        _ => None,
    }
}

/// Per-replicate output: for each estimator, the point and the two variance estimates.
#[derive(Debug, Clone, Default)]
struct Replicate {
    values: [Option<(f64, [std::result::Result<f64, String>; 2])>; 3],
    errors: [Option<String>; 3],
}

struct Plan {
    weights: Weights,
    contrast: Contrast,
    /// Adjusted pair, or why the adjusted estimator is skipped.
    adjusted: std::result::Result<(usize, usize), String>,
}

fn plan(scenario: &Scenario, pop: &Population) -> Result<Plan> {
    let weights = scenario.weights_for(&pop.design)?;
    let contrast = scenario.contrast()?;
    if contrast.values().len() != pop.design.num_treatments() {
        return Err(Error::InvalidArgument(format!(
            "contrast has {} entries for {} treatments",
            contrast.values().len(),
            pop.design.num_treatments()
        )));
    }
    let k = pop.design.num_blocks() as f64;
    let equal_weights = weights.values().iter().all(|&w| (w - 1.0 / k).abs() < 1e-15);
    let adjusted = if !check_bibd(&pop.design).is_bibd {
        Err("design is not a BIBD".to_string())
    } else if !equal_weights {
        Err("adjusted estimator targets block-level weights only".to_string())
    } else {
        as_pair(&contrast).ok_or_else(|| "contrast is not a treatment pair".to_string())
    };
    Ok(Plan {
        weights,
        contrast,
        adjusted,
    })
}

fn one_replicate(obs: &ObservedData, p: &Plan) -> Replicate {
    let mut out = Replicate::default();
    let mut record = |slot: usize, point: Result<f64>, vars: [Result<f64>; 2]| match point {
        Ok(x) => {
            let [bb, wb] = vars.map(|v| v.map_err(|e| e.to_string()));
            out.values[slot] = Some((x, [bb, wb]));
        }
        Err(e) => out.errors[slot] = Some(e.to_string()),
    };
    for (slot, kind) in [(0, CovKind::HorvitzThompson), (1, CovKind::Hajek)] {
        let point = if slot == 0 {
            ht(obs, &p.weights, &p.contrast)
        } else {
            hajek(obs, &p.weights, &p.contrast)
        }
        .map(|r| r.point);
        let bb = cov_bb(obs, &p.weights, kind).and_then(|c| c.contrast_variance(&p.contrast));
        let wb = cov_wb(obs, &p.weights, kind).and_then(|c| c.contrast_variance(&p.contrast));
        record(slot, point, [bb, wb]);
    }
    match p.adjusted {
        Ok((z1, z2)) => record(
            2,
            adjusted(obs, z1, z2).map(|r| r.point),
            [
                adjusted_var(obs, z1, z2, Flavor::Bb),
                adjusted_var(obs, z1, z2, Flavor::Wb),
            ],
        ),
        Err(ref why) => out.errors[2] = Some(why.clone()),
    }
    out
}

/// Run `scenario.replicates` independent assignments on a freshly generated population.
pub fn run_monte_carlo(scenario: &Scenario) -> Result<MetricsReport> {
    let pop = scenario.generate_population()?;
    run_on_population(scenario, &pop)
}

/// As [`run_monte_carlo`] with a caller-supplied population.
///
/// Replicate `r` draws its assignment from an independent stream keyed by `r`, and results
/// are reduced in replicate order, so the report does not depend on the worker count.
pub fn run_on_population(scenario: &Scenario, pop: &Population) -> Result<MetricsReport> {
    if scenario.replicates == 0 {
        return Err(Error::InvalidArgument("replicate count must be positive".into()));
    }
    pop.outcomes.check_design(&pop.design)?;
    let p = plan(scenario, pop)?;
    let design = Arc::new(pop.design.clone());
    let stream_seed = scenario.seed ^ REPLICATE_SEED_SALT;
    let reps: Vec<Replicate> = worker_pool()?.install(|| {
        (0..scenario.replicates as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = replicate_rng(stream_seed, r);
                let a = draw_assignment(&design, &mut rng);
                let obs = ObservedData::from_assignment(&pop.outcomes, &design, &a);
                one_replicate(&obs, &p)
            })
            .collect()
    });

    let target = estimand(&pop.outcomes, &p.weights, &p.contrast);
    let adjusted_target = p.adjusted.as_ref().ok().map(|&(z1, z2)| {
        estimand(
            &pop.outcomes,
            &Weights::block(pop.design.num_blocks()),
            &Contrast::pair(pop.design.num_treatments(), z1, z2),
        )
    });
    let true_ht = true_var_ht(&pop.outcomes, &pop.design, &p.weights, &p.contrast).ok();
    let (true_adj, true_bibd) = match p.adjusted {
        Ok((z1, z2)) => (
            true_var_adjusted(&pop.outcomes, &pop.design, z1, z2).ok(),
            true_var_bibd(&pop.outcomes, &pop.design, z1, z2).ok(),
        ),
        Err(_) => (None, None),
    };

    let mut points = Vec::new();
    let mut intervals = Vec::new();
    let mut series: Vec<Vec<Option<f64>>> = Vec::new();
    for (slot, est) in ESTIMATORS.into_iter().enumerate() {
        let tgt = if slot == 2 { adjusted_target.unwrap_or(f64::NAN) } else { target };
        let first_error = reps.iter().find_map(|r| r.errors[slot].clone());
        let xs: Vec<Option<f64>> = reps.iter().map(|r| r.values[slot].as_ref().map(|v| v.0)).collect();
        let present: Vec<f64> = xs.iter().flatten().copied().collect();
        points.push(PointMetrics {
            estimator: est,
            used: present.len(),
            target: tgt,
            mean_point: (!present.is_empty()).then(|| mean(&present)),
            empirical_se: sample_var(&present).map(f64::sqrt),
            true_var: match slot {
                0 => true_ht,
                2 => true_adj,
                _ => None,
            },
            skipped: first_error,
        });
        series.push(xs);
        for (fi, flavor) in [Flavor::Bb, Flavor::Wb].into_iter().enumerate() {
            let mut covered = Vec::new();
            let mut lengths = Vec::new();
            let mut variances = Vec::new();
            let mut clamped = 0;
            let mut skipped = reps.iter().find_map(|r| r.errors[slot].clone());
            for r in &reps {
                let Some((x, vars)) = &r.values[slot] else { continue };
                match &vars[fi] {
                    Ok(v) => {
                        let ci = confidence_interval(*x, *v, scenario.level)?;
                        covered.push(if ci.covers(tgt) { 1.0 } else { 0.0 });
                        lengths.push(ci.length());
                        variances.push(*v);
                        clamped += ci.clamped as usize;
                    }
                    Err(e) => {
                        skipped.get_or_insert_with(|| e.clone());
                    }
                }
            }
            let avg = |v: &[f64]| (!v.is_empty()).then(|| sum(v.iter().copied()) / v.len() as f64);
            intervals.push(IntervalMetrics {
                estimator: est,
                flavor,
                used: covered.len(),
                coverage: avg(&covered),
                mean_length: avg(&lengths),
                mean_variance: avg(&variances),
                clamped,
                skipped,
            });
        }
    }

    let mut se_ratios = Vec::new();
    for (num, den) in RATIO_PAIRS {
        let (ni, di) = (slot_of(num), slot_of(den));
        let pairs: Vec<(f64, f64)> = series[ni]
            .iter()
            .zip(&series[di])
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .collect();
        if let Some((empirical, mc_se)) = sd_ratio(&pairs) {
            let theoretical = match (num, true_adj, true_bibd) {
                (EstimatorKind::Adjusted, Some(a), Some(b)) if b > 0.0 => Some((a / b).sqrt()),
                _ => None,
            };
            se_ratios.push(SeRatio {
                numerator: num,
                denominator: den,
                empirical,
                mc_se,
                theoretical,
            });
        }
    }

    Ok(MetricsReport {
        scenario: scenario.clone(),
        replicates: scenario.replicates,
        estimand: target,
        points,
        intervals,
        se_ratios,
    })
}

fn slot_of(e: EstimatorKind) -> usize {
    ESTIMATORS.iter().position(|&x| x == e).expect("listed")
}

/// Ratio of sample standard deviations of paired draws, with its delta-method standard error
/// computed from fourth moments of the centered pairs.
pub fn sd_ratio(pairs: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pairs.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let ma = sum(pairs.iter().map(|p| p.0)) / nf;
    let mb = sum(pairs.iter().map(|p| p.1)) / nf;
    let central = |f: &dyn Fn(f64, f64) -> f64| sum(pairs.iter().map(|&(a, b)| f(a - ma, b - mb))) / nf;
    let va = central(&|a, _| a * a);
    let vb = central(&|_, b| b * b);
    if !(va > 0.0 && vb > 0.0) {
        return None;
    }
    let ka = central(&|a, _| a.powi(4)) / (va * va);
    let kb = central(&|_, b| b.powi(4)) / (vb * vb);
    let kab = central(&|a, b| a * a * b * b) / (va * vb);
    let ratio = (va / vb).sqrt();
    let var_log = ((ka - 1.0) + (kb - 1.0) - 2.0 * (kab - 1.0)) / (4.0 * nf);
    Some((ratio, ratio * var_log.max(0.0).sqrt()))
}

/// One row of an SE-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub num_blocks: usize,
    pub empirical: f64,
    pub mc_se: f64,
    pub theoretical: f64,
}

impl SweepRow {
    /// Distance between the empirical and theoretical ratios in Monte Carlo standard errors.
    pub fn z_score(&self) -> f64 {
        (self.empirical - self.theoretical) / self.mc_se
    }
}

/// `SE(adjusted) / SE(HT)` for every cell, which must all admit the adjusted estimator.
pub fn se_ratio_sweep(cells: &[Scenario]) -> Result<Vec<SweepRow>> {
    cells
        .iter()
        .map(|s| {
            let report = run_monte_carlo(s)?;
            let r = report
                .se_ratio(EstimatorKind::Adjusted, EstimatorKind::HorvitzThompson)
                .ok_or_else(|| {
                    let why = report
                        .point(EstimatorKind::Adjusted)
                        .and_then(|p| p.skipped.clone())
                        .unwrap_or_else(|| "no replicates".into());
                    Error::InvalidArgument(format!("adjusted estimator unavailable: {why}"))
                })?;
            let theoretical = r
                .theoretical
                .ok_or_else(|| Error::Undefined("theoretical variance ratio".into()))?;
            Ok(SweepRow {
                beta: s.beta,
                gamma: s.gamma,
                rho: s.rho,
                num_blocks: s.num_blocks,
                empirical: r.empirical,
                mc_se: r.mc_se,
                theoretical,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::Setting;
    use crate::population::WeightKind;

    fn small(setting: Setting) -> Scenario {
        let mut s = Scenario::new(setting, 10, 0.3, 1.0, 0.5, 42);
        s.replicates = 200;
        s
    }

    #[test]
    fn zero_replicates_rejected() {
        let mut s = small(Setting::S1);
        s.replicates = 0;
        assert!(run_monte_carlo(&s).is_err());
    }

    #[test]
    fn metrics_are_in_range_and_adjusted_follows_rules() {
        let r1 = run_monte_carlo(&small(Setting::S1)).unwrap();
        for m in &r1.intervals {
            if let Some(c) = m.coverage {
                assert!((0.0..=1.0).contains(&c));
                assert!(m.mean_length.unwrap() >= 0.0);
            }
        }
        assert_eq!(r1.point(EstimatorKind::Adjusted).unwrap().used, 200);
        assert!(r1.se_ratio(EstimatorKind::Adjusted, EstimatorKind::HorvitzThompson).is_some());

        let r2 = run_monte_carlo(&small(Setting::S2)).unwrap();
        let adj = r2.point(EstimatorKind::Adjusted).unwrap();
        assert_eq!(adj.used, 0);
        assert!(adj.skipped.is_some());

        let mut s = small(Setting::S2);
        s.weights = WeightKind::Block;
        let r3 = run_monte_carlo(&s).unwrap();
        assert_eq!(r3.point(EstimatorKind::Adjusted).unwrap().used, 200);
    }

    #[test]
    fn equal_sizes_make_ht_and_hajek_identical() {
        let r = run_monte_carlo(&small(Setting::S1)).unwrap();
        let a = r.interval(EstimatorKind::HorvitzThompson, Flavor::Wb).unwrap();
        let b = r.interval(EstimatorKind::Hajek, Flavor::Wb).unwrap();
        assert_eq!(a.coverage, b.coverage);
        assert!((a.mean_variance.unwrap() - b.mean_variance.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn flat_row_has_fixed_columns() {
        let a = run_monte_carlo(&small(Setting::S1)).unwrap().flat_row();
        let b = run_monte_carlo(&small(Setting::S3)).unwrap().flat_row();
        let names = |r: &[(String, String)]| r.iter().map(|c| c.0.clone()).collect::<Vec<_>>();
        assert_eq!(names(&a), names(&b));
    }

    #[test]
    fn sd_ratio_of_scaled_copy() {
        let pairs: Vec<(f64, f64)> = (0..50).map(|i| (2.0 * i as f64, i as f64)).collect();
        let (r, se) = sd_ratio(&pairs).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
        assert!(se < 1e-6);
    }
}
