//! File readers shared by the subcommands.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ibd_core::design::DesignSpec;
use ibd_core::estimate::ObsRow;
use ibd_core::harness::{read_dataset, DatasetRow};
use ibd_core::population::PotentialOutcomes;

pub fn read_design(path: &Path) -> Result<DesignSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    DesignSpec::from_json(&text).with_context(|| format!("parsing design {}", path.display()))
}

pub fn read_rows(path: &Path) -> Result<Vec<DatasetRow>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(file).with_context(|| format!("parsing {}", path.display()))
}

/// Potential outcomes CSV: a `block` column (1-based) followed by one column per treatment.
pub fn read_outcomes(path: &Path, design: &DesignSpec) -> Result<PotentialOutcomes> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let nt = design.num_treatments();
    if headers.len() != nt + 1 || &headers[0] != "block" {
        bail!(
            "{}: expected header `block` plus {nt} outcome columns, found {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        );
    }
    let mut blocks = Vec::new();
    let mut outcomes = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let block: usize = rec[0]
            .trim()
            .parse()
            .with_context(|| format!("row {}: bad block {:?}", line + 2, &rec[0]))?;
        if block == 0 {
            bail!("row {}: blocks are numbered from 1", line + 2);
        }
        let row = (1..=nt)
            .map(|c| {
                rec[c]
                    .trim()
                    .parse::<f64>()
                    .with_context(|| format!("row {}: bad outcome {:?}", line + 2, &rec[c]))
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(block - 1);
        outcomes.push(row);
    }
    let po = PotentialOutcomes::new(outcomes, blocks, design.num_blocks())?;
    po.check_design(design)?;
    Ok(po)
}

/// Convert dataset rows with 1-based block numbers and declared treatment labels.
pub fn observation_rows(rows: &[DatasetRow], labels: &[String]) -> Result<Vec<ObsRow>> {
    rows.iter()
        .map(|r| {
            let block: usize = r
                .block
                .trim()
                .parse()
                .with_context(|| format!("unit {}: block {:?} is not a number", r.unit_id, r.block))?;
            if block == 0 {
                bail!("unit {}: blocks are numbered from 1", r.unit_id);
            }
            let treatment = labels
                .iter()
                .position(|l| l == r.treatment.trim())
                .with_context(|| format!("unit {}: unknown treatment label {:?}", r.unit_id, r.treatment))?;
            Ok(ObsRow {
                unit_id: r.unit_id.clone(),
                block: block - 1,
                treatment,
                outcome: r.outcome,
            })
        })
        .collect()
}
