//! Block/treatment structure of an incomplete block design.
//!
//! Treatments are 0-based indices `0..T` inside the library. Design files and the
//! CLI use 1-based labels; [`DesignFile`] converts between the two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated incomplete block design: `K` blocks, `T` treatments, `t` treatments per
/// block, a catalog of distinct treatment subsets with replication counts, and block sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignSpec {
    num_blocks: usize,
    num_treatments: usize,
    subset_size: usize,
    catalog: Vec<Vec<usize>>,
    reps: Vec<usize>,
    block_sizes: Vec<usize>,
}

/// Counts and probabilities derived from the catalog and replication counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncidenceSummary {
    /// `L_z`: number of blocks receiving treatment `z`.
    pub occurrences: Vec<usize>,
    /// `l_{z,z'}`: number of blocks receiving both; the diagonal equals `occurrences`.
    pub co_occurrences: Vec<Vec<usize>>,
    /// `L_z / K`.
    pub marginal: Vec<f64>,
    /// `l_{z,z'} / K`.
    pub pairwise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BibdStatus {
    pub is_bibd: bool,
    pub common_occurrences: Option<usize>,
    pub common_co_occurrences: Option<usize>,
    pub violation: Option<String>,
}

/// Co-occurrence probabilities for blocks that contain one member of a pair but not the other.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideProbs {
    /// The treatment of the pair that the block contains.
    pub treatment: usize,
    /// Number of blocks containing `treatment` but not the other member (`L - l`).
    pub count: usize,
    /// `p(z)`: probability that `z` is in the block given the conditioning event. Zero for the pair.
    pub single: Vec<f64>,
    /// `p(z, z')` joint probabilities for distinct `z, z'` outside the pair. Zero on the diagonal.
    pub joint: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjustedProbTable {
    pub first: SideProbs,
    pub second: SideProbs,
}

impl AdjustedProbTable {
    pub fn side(&self, treatment: usize) -> &SideProbs {
        if treatment == self.first.treatment {
            &self.first
        } else {
            &self.second
        }
    }
}

/// Serialized design with 1-based treatment labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignFile {
    #[serde(rename = "K")]
    pub num_blocks: usize,
    #[serde(rename = "T")]
    pub num_treatments: usize,
    #[serde(rename = "t")]
    pub subset_size: usize,
    pub catalog: Vec<Vec<usize>>,
    pub reps: Vec<usize>,
    pub block_sizes: Vec<usize>,
}

impl DesignFile {
    pub fn into_design(self) -> Result<DesignSpec> {
        let mut catalog = Vec::with_capacity(self.catalog.len());
        for subset in &self.catalog {
            let mut zero_based = Vec::with_capacity(subset.len());
            for &label in subset {
                if label == 0 || label > self.num_treatments {
                    return Err(Error::InvalidDesign(format!(
                        "treatment label {label} outside 1..={}",
                        self.num_treatments
                    )));
                }
                zero_based.push(label - 1);
            }
            catalog.push(zero_based);
        }
        build_design(
            self.num_blocks,
            self.num_treatments,
            self.subset_size,
            catalog,
            self.reps,
            self.block_sizes,
        )
    }

    pub fn from_design(design: &DesignSpec) -> Self {
        DesignFile {
            num_blocks: design.num_blocks,
            num_treatments: design.num_treatments,
            subset_size: design.subset_size,
            catalog: design
                .catalog
                .iter()
                .map(|s| s.iter().map(|z| z + 1).collect())
                .collect(),
            reps: design.reps.clone(),
            block_sizes: design.block_sizes.clone(),
        }
    }
}

impl DesignSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: DesignFile = serde_json::from_str(text)?;
        file.into_design()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DesignFile::from_design(self)).expect("design serializes")
    }

    /// `K`.
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// `T`.
    pub fn num_treatments(&self) -> usize {
        self.num_treatments
    }

    /// `t`.
    pub fn subset_size(&self) -> usize {
        self.subset_size
    }

    /// Sorted, 0-based treatment subsets.
    pub fn catalog(&self) -> &[Vec<usize>] {
        &self.catalog
    }

    pub fn reps(&self) -> &[usize] {
        &self.reps
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn total_units(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Index of the first unit of each block when units are laid out block by block.
    pub fn block_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_blocks);
        let mut acc = 0;
        for &n in &self.block_sizes {
            offsets.push(acc);
            acc += n;
        }
        offsets
    }

    /// Position of a sorted subset in the catalog.
    pub fn catalog_index(&self, subset: &[usize]) -> Option<usize> {
        self.catalog.iter().position(|s| s.as_slice() == subset)
    }

    /// Same catalog and replication counts with new block sizes.
    pub fn with_block_sizes(&self, block_sizes: Vec<usize>) -> Result<Self> {
        build_design(
            self.num_blocks,
            self.num_treatments,
            self.subset_size,
            self.catalog.clone(),
            self.reps.clone(),
            block_sizes,
        )
    }
}

/// Validate and normalize a design. Subsets use 0-based treatment indices.
pub fn build_design(
    num_blocks: usize,
    num_treatments: usize,
    subset_size: usize,
    catalog: Vec<Vec<usize>>,
    reps: Vec<usize>,
    block_sizes: Vec<usize>,
) -> Result<DesignSpec> {
    let bad = |msg: String| Err(Error::InvalidDesign(msg));
    if num_blocks == 0 {
        return bad("at least one block is required".into());
    }
    if num_treatments < 3 {
        return bad(format!("need at least 3 treatments, got {num_treatments}"));
    }
    if subset_size < 2 || subset_size >= num_treatments {
        return bad(format!(
            "treatments per block must satisfy 2 <= t < T, got t={subset_size}, T={num_treatments}"
        ));
    }
    if catalog.is_empty() {
        return bad("catalog is empty".into());
    }
    if catalog.len() != reps.len() {
        return bad(format!(
            "catalog has {} subsets but {} replication counts",
            catalog.len(),
            reps.len()
        ));
    }
    if block_sizes.len() != num_blocks {
        return bad(format!(
            "expected {num_blocks} block sizes, got {}",
            block_sizes.len()
        ));
    }
    let mut normalized: Vec<Vec<usize>> = Vec::with_capacity(catalog.len());
    for subset in catalog {
        let mut s = subset.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != subset.len() {
            return bad(format!("subset {subset:?} repeats a treatment"));
        }
        if s.len() != subset_size {
            return bad(format!(
                "subset {subset:?} has {} treatments, expected {subset_size}",
                s.len()
            ));
        }
        if let Some(z) = s.iter().find(|&&z| z >= num_treatments) {
            return bad(format!("treatment index {z} outside 0..{num_treatments}"));
        }
        if normalized.contains(&s) {
            return bad(format!("duplicate subset {s:?} in catalog"));
        }
        normalized.push(s);
    }
    if let Some(i) = reps.iter().position(|&r| r == 0) {
        return bad(format!("replication count for subset {i} is zero"));
    }
    let total: usize = reps.iter().sum();
    if total != num_blocks {
        return bad(format!(
            "replication counts sum to {total}, expected K={num_blocks}"
        ));
    }
    for (k, &n) in block_sizes.iter().enumerate() {
        if n == 0 || n % subset_size != 0 {
            return bad(format!(
                "block {k} has size {n}, which is not a positive multiple of t={subset_size}"
            ));
        }
    }
    let mut seen = vec![false; num_treatments];
    for s in &normalized {
        for &z in s {
            seen[z] = true;
        }
    }
    if let Some(z) = seen.iter().position(|&b| !b) {
        return bad(format!("treatment {z} does not appear in any subset"));
    }
    Ok(DesignSpec {
        num_blocks,
        num_treatments,
        subset_size,
        catalog: normalized,
        reps,
        block_sizes,
    })
}

/// All `C(T, t)` subsets, each replicated `reps` times.
pub fn unreduced_design(
    num_treatments: usize,
    subset_size: usize,
    reps: usize,
    block_size: usize,
) -> Result<DesignSpec> {
    let mut catalog = Vec::new();
    let mut current = Vec::with_capacity(subset_size);
    fn rec(start: usize, t: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for z in start..n {
            cur.push(z);
            rec(z + 1, t, n, cur, out);
            cur.pop();
        }
    }
    rec(0, subset_size, num_treatments, &mut current, &mut catalog);
    let k = catalog.len() * reps;
    let len = catalog.len();
    build_design(
        k,
        num_treatments,
        subset_size,
        catalog,
        vec![reps; len],
        vec![block_size; k],
    )
}

/// The ten-subset catalog for five treatments in blocks of three, each subset used `reps` times.
pub fn five_treatment_bibd(reps: usize, block_sizes: Vec<usize>) -> Result<DesignSpec> {
    let labels: [[usize; 3]; 10] = [
        [1, 2, 3],
        [1, 3, 4],
        [3, 4, 5],
        [2, 3, 5],
        [1, 2, 4],
        [2, 3, 4],
        [1, 3, 5],
        [1, 2, 5],
        [2, 4, 5],
        [1, 4, 5],
    ];
    let catalog = labels
        .iter()
        .map(|s| s.iter().map(|z| z - 1).collect())
        .collect();
    build_design(10 * reps, 5, 3, catalog, vec![reps; 10], block_sizes)
}

pub fn incidence(design: &DesignSpec) -> IncidenceSummary {
    let nt = design.num_treatments;
    let mut occ = vec![0usize; nt];
    let mut co = vec![vec![0usize; nt]; nt];
    for (s, &r) in design.catalog.iter().zip(&design.reps) {
        for &a in s {
            occ[a] += r;
            for &b in s {
                co[a][b] += r;
            }
        }
    }
    let k = design.num_blocks as f64;
    IncidenceSummary {
        marginal: occ.iter().map(|&x| x as f64 / k).collect(),
        pairwise: co
            .iter()
            .map(|row| row.iter().map(|&x| x as f64 / k).collect())
            .collect(),
        occurrences: occ,
        co_occurrences: co,
    }
}

pub fn check_bibd(design: &DesignSpec) -> BibdStatus {
    let fail = |msg: String| BibdStatus {
        is_bibd: false,
        common_occurrences: None,
        common_co_occurrences: None,
        violation: Some(msg),
    };
    let r0 = design.reps[0];
    if let Some(i) = design.reps.iter().position(|&r| r != r0) {
        return fail(format!(
            "replication counts differ: subset 0 has {r0}, subset {i} has {}",
            design.reps[i]
        ));
    }
    let inc = incidence(design);
    let l0 = inc.occurrences[0];
    if let Some(z) = inc.occurrences.iter().position(|&l| l != l0) {
        return fail(format!(
            "treatment occurrence counts differ: L[0]={l0}, L[{z}]={}",
            inc.occurrences[z]
        ));
    }
    let pair0 = inc.co_occurrences[0][1];
    let nt = design.num_treatments;
    for a in 0..nt {
        for b in (a + 1)..nt {
            if inc.co_occurrences[a][b] != pair0 {
                return fail(format!(
                    "pair counts differ: l[0,1]={pair0}, l[{a},{b}]={}",
                    inc.co_occurrences[a][b]
                ));
            }
        }
    }
    debug_assert_eq!(nt * l0, design.subset_size * design.num_blocks);
    debug_assert_eq!(pair0 * (nt - 1), l0 * (design.subset_size - 1));
    BibdStatus {
        is_bibd: true,
        common_occurrences: Some(l0),
        common_co_occurrences: Some(pair0),
        violation: None,
    }
}

pub(crate) fn require_bibd(design: &DesignSpec) -> Result<BibdStatus> {
    let status = check_bibd(design);
    if status.is_bibd {
        Ok(status)
    } else {
        Err(Error::NotBibd(status.violation.unwrap_or_default()))
    }
}

pub(crate) fn check_pair(design: &DesignSpec, z1: usize, z2: usize) -> Result<()> {
    let nt = design.num_treatments;
    if z1 == z2 {
        return Err(Error::InvalidArgument(format!(
            "pair treatments must differ, got {z1} twice"
        )));
    }
    if z1 >= nt || z2 >= nt {
        return Err(Error::InvalidArgument(format!(
            "pair ({z1}, {z2}) outside 0..{nt}"
        )));
    }
    Ok(())
}

/// Catalog indices of subsets containing `with` but not `without`.
pub fn subsets_with_without(design: &DesignSpec, with: usize, without: usize) -> Vec<usize> {
    design
        .catalog
        .iter()
        .enumerate()
        .filter(|(_, s)| s.contains(&with) && !s.contains(&without))
        .map(|(i, _)| i)
        .collect()
}

pub fn conditional_probs(design: &DesignSpec, z1: usize, z2: usize) -> Result<AdjustedProbTable> {
    check_pair(design, z1, z2)?;
    require_bibd(design)?;
    let side = |own: usize, other: usize| -> SideProbs {
        let nt = design.num_treatments;
        let idx = subsets_with_without(design, own, other);
        let count: usize = idx.iter().map(|&i| design.reps[i]).sum();
        let mut single = vec![0.0; nt];
        let mut joint = vec![vec![0.0; nt]; nt];
        for &i in &idx {
            let r = design.reps[i] as f64;
            let s = &design.catalog[i];
            for &a in s {
                if a == own {
                    continue;
                }
                single[a] += r;
                for &b in s {
                    if b != own && b != a {
                        joint[a][b] += r;
                    }
                }
            }
        }
        let c = count as f64;
        single.iter_mut().for_each(|v| *v /= c);
        joint
            .iter_mut()
            .for_each(|row| row.iter_mut().for_each(|v| *v /= c));
        SideProbs {
            treatment: own,
            count,
            single,
            joint,
        }
    };
    Ok(AdjustedProbTable {
        first: side(z1, z2),
        second: side(z2, z1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_pairs(reps: usize, n: usize) -> DesignSpec {
        build_design(
            3 * reps,
            3,
            2,
            vec![vec![0, 1], vec![0, 2], vec![1, 2]],
            vec![reps; 3],
            vec![n; 3 * reps],
        )
        .unwrap()
    }

    #[test]
    fn five_treatment_catalog_is_bibd() {
        let d = five_treatment_bibd(1, vec![15; 10]).unwrap();
        let inc = incidence(&d);
        assert!(inc.occurrences.iter().all(|&l| l == 6));
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    assert_eq!(inc.co_occurrences[a][b], 3);
                }
            }
        }
        let st = check_bibd(&d);
        assert!(st.is_bibd);
        assert_eq!(st.common_occurrences, Some(6));
        assert_eq!(st.common_co_occurrences, Some(3));
        assert_eq!(5 * 6, 3 * 10);
        assert_eq!(3 * 4, 6 * 2);
    }

    #[test]
    fn rejects_bad_designs() {
        let e = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![3, 2, 2]);
        assert!(matches!(e, Err(Error::InvalidDesign(_))));
        let e = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1, 1, 2], vec![2; 3]);
        assert!(e.is_err());
        let e = build_design(2, 3, 2, vec![vec![0, 1, 2], vec![0, 2]], vec![1, 1], vec![2; 2]);
        assert!(e.is_err());
        let e = build_design(2, 4, 2, vec![vec![0, 1], vec![0, 2]], vec![1, 1], vec![2; 2]);
        assert!(e.is_err(), "treatment 3 never used");
        assert!(build_design(2, 2, 2, vec![vec![0, 1]], vec![2], vec![2; 2]).is_err());
        assert!(build_design(2, 3, 3, vec![vec![0, 1, 2]], vec![2], vec![3; 2]).is_err());
        let dup = build_design(2, 3, 2, vec![vec![0, 2], vec![2, 0]], vec![1, 1], vec![2; 2]);
        assert!(dup.is_err());
    }

    #[test]
    fn subsets_are_sorted() {
        let d = build_design(3, 3, 2, vec![vec![1, 0], vec![2, 0], vec![2, 1]], vec![1; 3], vec![2; 3]).unwrap();
        assert_eq!(d.catalog(), &[vec![0, 1], vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn incidence_counts() {
        let d = build_design(2, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![1, 1], vec![2; 2]).unwrap();
        let inc = incidence(&d);
        assert_eq!(inc.occurrences, vec![2, 1, 1]);
        assert_eq!(inc.co_occurrences[1][2], 0);
        assert!(!check_bibd(&d).is_bibd);

        let d = three_pairs(2, 2);
        let inc = incidence(&d);
        assert_eq!(inc.occurrences, vec![4, 4, 4]);
        assert_eq!(inc.co_occurrences[0][1], 2);
        assert_eq!(inc.marginal[0], 4.0 / 6.0);
    }

    #[test]
    fn disjoint_pairs_not_bibd() {
        let d = build_design(2, 4, 2, vec![vec![0, 1], vec![2, 3]], vec![1, 1], vec![2; 2]).unwrap();
        let st = check_bibd(&d);
        assert!(!st.is_bibd);
        assert!(st.violation.is_some());
    }

    #[test]
    fn conditional_probabilities_five_treatments() {
        let d = five_treatment_bibd(1, vec![3; 10]).unwrap();
        let tab = conditional_probs(&d, 0, 1).unwrap();
        assert_eq!(tab.first.count, 3);
        assert!((tab.first.single[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tab.first.joint[2][3] - 1.0 / 3.0).abs() < 1e-15);
        let sum: f64 = tab.first.single.iter().sum();
        assert!((sum - 2.0).abs() < 1e-12);
        let scaled = five_treatment_bibd(3, vec![3; 30]).unwrap();
        assert_eq!(conditional_probs(&scaled, 0, 1).unwrap().first.single, tab.first.single);
    }

    #[test]
    fn conditional_probabilities_three_treatments() {
        let d = three_pairs(1, 2);
        let tab = conditional_probs(&d, 0, 1).unwrap();
        assert_eq!(tab.first.single[2], 1.0);
        assert_eq!(tab.second.single[2], 1.0);
        assert!(tab.first.joint.iter().flatten().all(|&v| v == 0.0));
        assert!(conditional_probs(&d, 1, 1).is_err());
    }

    #[test]
    fn json_round_trip_uses_labels() {
        let text = r#"{"K":3,"T":3,"t":2,"catalog":[[1,2],[1,3],[2,3]],"reps":[1,1,1],"block_sizes":[2,2,2]}"#;
        let d = DesignSpec::from_json(text).unwrap();
        assert_eq!(d.catalog()[2], vec![1, 2]);
        let back = DesignSpec::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unreduced_is_bibd() {
        let d = unreduced_design(5, 3, 1, 3).unwrap();
        assert_eq!(d.num_blocks(), 10);
        assert!(check_bibd(&d).is_bibd);
    }
}
