//! Turning complete-block data into incomplete-block subsamples and averaging the analyses.

use std::collections::HashMap;
use std::io::Read;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, DesignSpec};
use crate::error::{Error, Result};
use crate::estimate::{adjusted, hajek, ht, EstimatorKind, ObsRow, ObservedData, Validation};
use crate::numeric::{mean, sum};
use crate::population::{Contrast, WeightKind, Weights};
use crate::randomize::rng_from_seed;
use crate::variance::{adjusted_var, cov_bb, cov_wb, CovKind, Flavor};

use super::derive_seed;

/// One CSV record: `unit_id,block,treatment,outcome`, with free-form block and treatment labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub unit_id: String,
    pub block: String,
    pub treatment: String,
    pub outcome: f64,
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<DatasetRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Units grouped by block (in order of first appearance) and treatment index.
#[derive(Debug, Clone)]
struct Grouped {
    block_ids: Vec<String>,
    /// `cells[b][z]` holds `(unit_id, outcome)`.
    cells: Vec<Vec<Vec<(String, f64)>>>,
}

fn group(rows: &[DatasetRow], treatments: &[String]) -> Result<Grouped> {
    let label_index: HashMap<&str, usize> = treatments
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let mut block_index: HashMap<&str, usize> = HashMap::new();
    let mut g = Grouped {
        block_ids: Vec::new(),
        cells: Vec::new(),
    };
    for r in rows {
        let &z = label_index.get(r.treatment.as_str()).ok_or_else(|| {
            Error::InvalidData(format!("unit {} has unknown treatment label {:?}", r.unit_id, r.treatment))
        })?;
        if !r.outcome.is_finite() {
            return Err(Error::InvalidData(format!("unit {} has a non-finite outcome", r.unit_id)));
        }
        let b = *block_index.entry(r.block.as_str()).or_insert_with(|| {
            g.block_ids.push(r.block.clone());
            g.cells.push(vec![Vec::new(); treatments.len()]);
            g.block_ids.len() - 1
        });
        g.cells[b][z].push((r.unit_id.clone(), r.outcome));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    Bibd,
    Ibd,
}

/// How to carve a two-treatment design out of complete-block data. Treatments are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub mode: SubsampleMode,
    /// Treatment pairs forming the catalog.
    pub pairs: Vec<[usize; 2]>,
    /// Blocks per pair, counting blocks that already hold exactly that pair. `None` splits
    /// the blocks equally across pairs.
    pub targets: Option<Vec<usize>>,
    /// Keep only blocks with at least this many units on every treatment they contain.
    pub min_per_treatment: usize,
    /// Randomly drop complete blocks until at most this many blocks remain.
    pub max_blocks: Option<usize>,
}

impl SubsampleSpec {
    /// Every pair of `num_treatments` treatments, equally allocated.
    pub fn bibd(num_treatments: usize) -> Self {
        let pairs = (0..num_treatments)
            .flat_map(|a| (a + 1..num_treatments).map(move |b| [a, b]))
            .collect();
        SubsampleSpec {
            mode: SubsampleMode::Bibd,
            pairs,
            targets: None,
            min_per_treatment: 1,
            max_blocks: None,
        }
    }

    pub fn ibd(pairs: Vec<[usize; 2]>, targets: Vec<usize>) -> Self {
        SubsampleSpec {
            mode: SubsampleMode::Ibd,
            pairs,
            targets: Some(targets),
            min_per_treatment: 1,
            max_blocks: None,
        }
    }
}

/// A balanced two-treatment subsample.
#[derive(Debug, Clone)]
pub struct Subsample {
    pub design: Arc<DesignSpec>,
    pub observed: ObservedData,
    /// Original block label of each design block.
    pub block_ids: Vec<String>,
    /// Blocks skipped because they hold neither a catalog pair nor every catalog treatment,
    /// or fail the size threshold.
    pub excluded: Vec<String>,
}

/// Allocate catalog pairs to blocks and equalize within-block counts by dropping units at
/// random.
pub fn subsample_cbd(
    rows: &[DatasetRow],
    treatments: &[String],
    spec: &SubsampleSpec,
    seed: u64,
) -> Result<Subsample> {
    let data = group(rows, treatments)?;
    subsample_grouped(&data, spec, seed)
}

fn subsample_grouped(data: &Grouped, spec: &SubsampleSpec, seed: u64) -> Result<Subsample> {
    let nt = data.cells.first().map_or(0, Vec::len);
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if spec.pairs.is_empty() {
        return bad("no treatment pairs given".into());
    }
    let mut pairs: Vec<[usize; 2]> = Vec::new();
    for p in &spec.pairs {
        if p[0] == p[1] || p[0] >= nt || p[1] >= nt {
            return bad(format!("invalid pair {p:?} for {nt} treatments"));
        }
        pairs.push([p[0].min(p[1]), p[0].max(p[1])]);
    }
    let needed: Vec<usize> = {
        let mut v: Vec<usize> = pairs.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut rng = rng_from_seed(seed);

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut complete: Vec<usize> = Vec::new();
    let mut excluded = Vec::new();
    for (b, cells) in data.cells.iter().enumerate() {
        let present: Vec<usize> = (0..nt).filter(|&z| !cells[z].is_empty()).collect();
        let big_enough = present.iter().all(|&z| cells[z].len() >= spec.min_per_treatment.max(1));
        let as_pair = (present.len() == 2)
            .then(|| pairs.iter().position(|p| p[..] == present[..]))
            .flatten();
        match (big_enough, as_pair) {
            (true, Some(p)) => fixed.push((b, p)),
            (true, None) if needed.iter().all(|z| present.contains(z)) => complete.push(b),
            _ => excluded.push(data.block_ids[b].clone()),
        }
    }
    if let Some(max) = spec.max_blocks {
        if fixed.len() > max {
            return bad(format!("{} blocks already hold a single pair, above max_blocks {max}", fixed.len()));
        }
        let keep = max - fixed.len();
        if complete.len() > keep {
            complete.shuffle(&mut rng);
            for b in complete.drain(keep..) {
                excluded.push(data.block_ids[b].clone());
            }
            complete.sort_unstable();
        }
    }
    let num_blocks = fixed.len() + complete.len();
    let targets = match &spec.targets {
        Some(t) => {
            if t.len() != pairs.len() || t.iter().sum::<usize>() != num_blocks {
                return bad(format!(
                    "targets {t:?} must give one count per pair summing to {num_blocks} blocks"
                ));
            }
            t.clone()
        }
        None => {
            if num_blocks % pairs.len() != 0 {
                return bad(format!(
                    "{num_blocks} blocks cannot be split equally across {} pairs",
                    pairs.len()
                ));
            }
            vec![num_blocks / pairs.len(); pairs.len()]
        }
    };
    let mut remaining = targets.clone();
    for &(_, p) in &fixed {
        if remaining[p] == 0 {
            return bad(format!("more blocks already hold pair {:?} than its target", pairs[p]));
        }
        remaining[p] -= 1;
    }
    let mut allocation: Vec<usize> = remaining
        .iter()
        .enumerate()
        .flat_map(|(p, &c)| std::iter::repeat(p).take(c))
        .collect();
    allocation.shuffle(&mut rng);

    let mut chosen: Vec<(usize, usize)> = fixed;
    chosen.extend(complete.iter().copied().zip(allocation));
    chosen.sort_unstable();

    let mut obs_rows = Vec::new();
    let mut sizes = Vec::with_capacity(chosen.len());
    let mut block_ids = Vec::with_capacity(chosen.len());
    for (k, &(b, p)) in chosen.iter().enumerate() {
        let pair = pairs[p];
        let cells = &data.cells[b];
        let m = pair.iter().map(|&z| cells[z].len()).min().expect("two entries");
        if m == 0 {
            return bad(format!("block {} lacks a treatment of pair {pair:?}", data.block_ids[b]));
        }
        for &z in &pair {
            for i in keep_indices(cells[z].len(), m, &mut rng) {
                let (unit_id, outcome) = &cells[z][i];
                obs_rows.push(ObsRow {
                    unit_id: unit_id.clone(),
                    block: k,
                    treatment: z,
                    outcome: *outcome,
                });
            }
        }
        sizes.push(2 * m);
        block_ids.push(data.block_ids[b].clone());
    }
    let catalog = pairs.iter().map(|p| p.to_vec()).collect();
    let design = Arc::new(build_design(chosen.len(), nt, 2, catalog, targets, sizes)?);
    let observed = ObservedData::from_rows(Arc::clone(&design), &obs_rows, Validation::Strict)?;
    Ok(Subsample {
        design,
        observed,
        block_ids,
        excluded,
    })
}

/// `m` of `n` indices uniformly at random, in increasing order.
fn keep_indices<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

/// Average over blocks containing both treatments of the within-block mean difference,
/// using all units. Returns the estimate and the number of blocks used.
pub fn cbd_block_difference(
    rows: &[DatasetRow],
    treatments: &[String],
    z1: usize,
    z2: usize,
    min_per_treatment: usize,
) -> Result<(f64, usize)> {
    let data = group(rows, treatments)?;
    let diffs: Vec<f64> = data
        .cells
        .iter()
        .filter(|c| {
            c.iter()
                .filter(|u| !u.is_empty())
                .all(|u| u.len() >= min_per_treatment.max(1))
        })
        .filter(|c| !c[z1].is_empty() && !c[z2].is_empty())
        .map(|c| {
            let m = |units: &[(String, f64)]| mean(&units.iter().map(|u| u.1).collect::<Vec<_>>());
            m(&c[z1]) - m(&c[z2])
        })
        .collect();
    if diffs.is_empty() {
        return Err(Error::InvalidData("no block contains both treatments".into()));
    }
    Ok((mean(&diffs), diffs.len()))
}

fn default_repetitions() -> usize {
    500
}

fn default_pair() -> [usize; 2] {
    [1, 2]
}

fn default_min_per_treatment() -> usize {
    1
}

/// Analysis plan file. Treatment positions are 1-based indices into `treatments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    /// Treatment labels as they appear in the data; label `i` becomes treatment `i + 1`.
    pub treatments: Vec<String>,
    /// Compared treatments; the contrast is `e_first - e_second`.
    #[serde(default = "default_pair")]
    pub pair: [usize; 2],
    pub mode: SubsampleMode,
    /// Catalog pairs. Defaults to every pair in BIBD mode.
    #[serde(default)]
    pub pairs: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
    #[serde(default = "default_min_per_treatment")]
    pub min_per_treatment: usize,
    #[serde(default)]
    pub max_blocks: Option<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AnalysisPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn to_zero(&self, label: usize) -> Result<usize> {
        if label == 0 || label > self.treatments.len() {
            return Err(Error::InvalidArgument(format!(
                "treatment {label} outside 1..={}",
                self.treatments.len()
            )));
        }
        Ok(label - 1)
    }

    pub fn subsample_spec(&self) -> Result<SubsampleSpec> {
        let mut spec = match (&self.pairs, self.mode) {
            (Some(p), mode) => SubsampleSpec {
                mode,
                pairs: p
                    .iter()
                    .map(|&[a, b]| Ok([self.to_zero(a)?, self.to_zero(b)?]))
                    .collect::<Result<_>>()?,
                targets: None,
                min_per_treatment: 1,
                max_blocks: None,
            },
            (None, SubsampleMode::Bibd) => SubsampleSpec::bibd(self.treatments.len()),
            (None, SubsampleMode::Ibd) => {
                return Err(Error::InvalidArgument("IBD mode needs explicit pairs".into()))
            }
        };
        spec.targets = self.targets.clone();
        spec.min_per_treatment = self.min_per_treatment;
        spec.max_blocks = self.max_blocks;
        Ok(spec)
    }

    pub fn compared(&self) -> Result<(usize, usize)> {
        Ok((self.to_zero(self.pair[0])?, self.to_zero(self.pair[1])?))
    }
}

/// Averages for one estimator and weighting. `None` marks a cell that could not be computed
/// on every repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub estimator: EstimatorKind,
    pub weights: WeightKind,
    pub point: Option<f64>,
    pub var_bb: Option<f64>,
    pub var_wb: Option<f64>,
    /// `sqrt` of the averaged variance estimate.
    pub se_bb: Option<f64>,
    pub se_wb: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub mode: SubsampleMode,
    pub repetitions: usize,
    pub blocks: usize,
    pub rows: Vec<ReportRow>,
}

impl DatasetReport {
    pub fn row(&self, estimator: EstimatorKind, weights: WeightKind) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.weights == weights)
    }
}

const CELLS: [(EstimatorKind, WeightKind); 5] = [
    (EstimatorKind::HorvitzThompson, WeightKind::Block),
    (EstimatorKind::Hajek, WeightKind::Block),
    (EstimatorKind::Adjusted, WeightKind::Block),
    (EstimatorKind::HorvitzThompson, WeightKind::Unit),
    (EstimatorKind::Hajek, WeightKind::Unit),
];

type CellResult = [std::result::Result<f64, String>; 3];

fn analyze_once(obs: &ObservedData, z1: usize, z2: usize) -> Vec<CellResult> {
    let design = obs.design();
    let g = Contrast::pair(design.num_treatments(), z1, z2);
    let err = |e: Error| e.to_string();
    CELLS
        .iter()
        .map(|&(est, wk)| {
            let w = match Weights::of_kind(wk, design.block_sizes()) {
                Ok(w) => w,
                Err(e) => return [Err(err(e.clone())), Err(err(e.clone())), Err(err(e))],
            };
            match est {
                EstimatorKind::Adjusted => [
                    adjusted(obs, z1, z2).map(|r| r.point).map_err(err),
                    adjusted_var(obs, z1, z2, Flavor::Bb).map_err(err),
                    adjusted_var(obs, z1, z2, Flavor::Wb).map_err(err),
                ],
                _ => {
                    let (point, kind) = if est == EstimatorKind::HorvitzThompson {
                        (ht(obs, &w, &g), CovKind::HorvitzThompson)
                    } else {
                        (hajek(obs, &w, &g), CovKind::Hajek)
                    };
                    [
                        point.map(|r| r.point).map_err(err),
                        cov_bb(obs, &w, kind).and_then(|c| c.contrast_variance(&g)).map_err(err),
                        cov_wb(obs, &w, kind).and_then(|c| c.contrast_variance(&g)).map_err(err),
                    ]
                }
            }
        })
        .collect()
}

/// Repeat the subsample-and-analyze step with derived seeds and average the estimates.
pub fn analyze_dataset(rows: &[DatasetRow], plan: &AnalysisPlan) -> Result<DatasetReport> {
    if plan.repetitions == 0 {
        return Err(Error::InvalidArgument("repetition count must be positive".into()));
    }
    let data = group(rows, &plan.treatments)?;
    let spec = plan.subsample_spec()?;
    let (z1, z2) = plan.compared()?;
    let mut values: Vec<[Vec<f64>; 3]> = vec![Default::default(); CELLS.len()];
    let mut notes: Vec<Vec<String>> = vec![Vec::new(); CELLS.len()];
    let mut blocks = 0;
    for r in 0..plan.repetitions {
        let sub = subsample_grouped(&data, &spec, derive_seed(plan.seed, r as u64))?;
        blocks = sub.design.num_blocks();
        for (c, res) in analyze_once(&sub.observed, z1, z2).into_iter().enumerate() {
            for (i, v) in res.into_iter().enumerate() {
                match v {
                    Ok(x) => values[c][i].push(x),
                    Err(e) => {
                        if !notes[c].contains(&e) {
                            notes[c].push(e);
                        }
                    }
                }
            }
        }
    }
    let avg = |v: &[f64]| (v.len() == plan.repetitions).then(|| sum(v.iter().copied()) / v.len() as f64);
    let rows = CELLS
        .iter()
        .enumerate()
        .map(|(c, &(estimator, weights))| {
            let var_bb = avg(&values[c][1]);
            let var_wb = avg(&values[c][2]);
            ReportRow {
                estimator,
                weights,
                point: avg(&values[c][0]),
                var_bb,
                var_wb,
                se_bb: var_bb.map(|v| v.max(0.0).sqrt()),
                se_wb: var_wb.map(|v| v.max(0.0).sqrt()),
                notes: notes[c].clone(),
            }
        })
        .collect();
    Ok(DatasetReport {
        mode: spec.mode,
        repetitions: plan.repetitions,
        blocks,
        rows,
    })
}
