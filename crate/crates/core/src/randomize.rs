//! Two-stage randomization: subsets to blocks, then treatments to units within blocks.
//!
//! Units are laid out block by block: block `k` owns positions
//! `offset_k .. offset_k + n_k` of [`Assignment::unit_treatments`].

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::design::DesignSpec;
use crate::error::{Error, Result};

/// Default ceiling on exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

/// Catalog index of the subset given to each block.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubsetAssignment {
    pub subsets: Vec<usize>,
}

impl SubsetAssignment {
    pub fn subset<'a>(&self, design: &'a DesignSpec, block: usize) -> &'a [usize] {
        &design.catalog()[self.subsets[block]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    pub subsets: SubsetAssignment,
    /// Treatment of each unit, in block-major order.
    pub unit_treatments: Vec<usize>,
}

/// Deterministic generator for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for replicate `index` under a master seed.
pub fn replicate_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

pub fn draw_stage1<R: Rng + ?Sized>(design: &DesignSpec, rng: &mut R) -> SubsetAssignment {
    let mut expanded = expanded_catalog(design);
    expanded.shuffle(rng);
    SubsetAssignment { subsets: expanded }
}

pub fn draw_stage2<R: Rng + ?Sized>(
    design: &DesignSpec,
    subsets: &SubsetAssignment,
    rng: &mut R,
) -> Assignment {
    let mut units = Vec::with_capacity(design.total_units());
    for k in 0..design.num_blocks() {
        let mut labels = block_labels(design, subsets.subset(design, k), design.block_sizes()[k]);
        labels.shuffle(rng);
        units.extend(labels);
    }
    Assignment {
        subsets: subsets.clone(),
        unit_treatments: units,
    }
}

pub fn draw_assignment<R: Rng + ?Sized>(design: &DesignSpec, rng: &mut R) -> Assignment {
    let s = draw_stage1(design, rng);
    draw_stage2(design, &s, rng)
}

pub fn assign_stage1(design: &DesignSpec, seed: u64) -> SubsetAssignment {
    draw_stage1(design, &mut rng_from_seed(seed))
}

pub fn assign_stage2(design: &DesignSpec, subsets: &SubsetAssignment, seed: u64) -> Result<Assignment> {
    validate_subsets(design, subsets)?;
    Ok(draw_stage2(design, subsets, &mut rng_from_seed(seed)))
}

/// Both stages from one seed.
pub fn assign(design: &DesignSpec, seed: u64) -> Assignment {
    draw_assignment(design, &mut rng_from_seed(seed))
}

pub fn validate_subsets(design: &DesignSpec, subsets: &SubsetAssignment) -> Result<()> {
    if subsets.subsets.len() != design.num_blocks() {
        return Err(Error::InvalidArgument(format!(
            "expected {} block subsets, got {}",
            design.num_blocks(),
            subsets.subsets.len()
        )));
    }
    let mut counts = vec![0usize; design.catalog().len()];
    for &i in &subsets.subsets {
        if i >= counts.len() {
            return Err(Error::InvalidArgument(format!("catalog index {i} out of range")));
        }
        counts[i] += 1;
    }
    if counts != design.reps() {
        return Err(Error::InvalidArgument(format!(
            "subset multiplicities {counts:?} differ from replication counts {:?}",
            design.reps()
        )));
    }
    Ok(())
}

/// Check every structural requirement of a legal assignment.
pub fn validate_assignment(design: &DesignSpec, a: &Assignment) -> Result<()> {
    validate_subsets(design, &a.subsets)?;
    if a.unit_treatments.len() != design.total_units() {
        return Err(Error::InvalidArgument("unit count mismatch".into()));
    }
    let offsets = design.block_offsets();
    for k in 0..design.num_blocks() {
        let n = design.block_sizes()[k];
        let subset = a.subsets.subset(design, k);
        let block = &a.unit_treatments[offsets[k]..offsets[k] + n];
        for &z in subset {
            let c = block.iter().filter(|&&u| u == z).count();
            if c != n / design.subset_size() {
                return Err(Error::InvalidArgument(format!(
                    "block {k} has {c} units on treatment {z}, expected {}",
                    n / design.subset_size()
                )));
            }
        }
        if block.iter().any(|z| !subset.contains(z)) {
            return Err(Error::InvalidArgument(format!(
                "block {k} uses a treatment outside its subset"
            )));
        }
    }
    Ok(())
}

fn expanded_catalog(design: &DesignSpec) -> Vec<usize> {
    design
        .reps()
        .iter()
        .enumerate()
        .flat_map(|(i, &r)| std::iter::repeat(i).take(r))
        .collect()
}

fn block_labels(design: &DesignSpec, subset: &[usize], n: usize) -> Vec<usize> {
    let per = n / design.subset_size();
    subset
        .iter()
        .flat_map(|&z| std::iter::repeat(z).take(per))
        .collect()
}

fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

/// Number of distinct first-stage arrangements, `K! / prod r!`.
pub fn count_stage1(design: &DesignSpec) -> BigUint {
    let denom = design
        .reps()
        .iter()
        .fold(BigUint::one(), |acc, &r| acc * factorial(r));
    factorial(design.num_blocks()) / denom
}

/// Number of distinct within-block arrangements given any first stage.
pub fn count_stage2(design: &DesignSpec) -> BigUint {
    let t = design.subset_size();
    design.block_sizes().iter().fold(BigUint::one(), |acc, &n| {
        let per = factorial(n / t);
        let mut denom = BigUint::one();
        for _ in 0..t {
            denom *= &per;
        }
        acc * (factorial(n) / denom)
    })
}

pub fn count_assignments(design: &DesignSpec) -> BigUint {
    count_stage1(design) * count_stage2(design)
}

/// Rearranges `v` into the next lexicographic permutation. Returns `false` (and leaves `v`
/// sorted ascending) when `v` was the last one.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        v.reverse();
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// The full randomization distribution of a design. Every legal assignment is equally likely.
#[derive(Debug, Clone)]
pub struct AssignmentDistribution {
    design: DesignSpec,
    count: BigUint,
}

pub fn enumerate_assignments(design: &DesignSpec) -> Result<AssignmentDistribution> {
    enumerate_assignments_capped(design, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_assignments_capped(design: &DesignSpec, cap: u64) -> Result<AssignmentDistribution> {
    let count = count_assignments(design);
    if count > BigUint::from(cap) {
        return Err(Error::EnumerationCap {
            count: count.to_string(),
            cap,
        });
    }
    Ok(AssignmentDistribution {
        design: design.clone(),
        count,
    })
}

impl AssignmentDistribution {
    pub fn count(&self) -> &BigUint {
        &self.count
    }

    /// Probability of each assignment: `prod r! / K! * prod ((n/t)!)^t / n!`.
    pub fn probability(&self) -> f64 {
        1.0 / self.count.to_f64().expect("count fits in f64")
    }

    pub fn iter(&self) -> AssignmentIter<'_> {
        AssignmentIter::new(&self.design)
    }

    /// Visit every assignment in enumeration order without cloning.
    pub fn for_each<F: FnMut(&Assignment)>(&self, mut f: F) {
        let mut it = AssignmentIter::new(&self.design);
        while let Some(a) = it.advance() {
            f(a);
        }
    }

    /// Parallel fold over the distribution. Work is split by first-stage arrangement and the
    /// partial results are merged in enumeration order, so the output does not depend on the
    /// number of threads.
    pub fn fold<A, I, F, M>(&self, init: I, fold: F, merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync,
        F: Fn(&mut A, &Assignment) + Sync,
        M: Fn(A, A) -> A,
    {
        let mut stage1 = Vec::new();
        let mut perm = expanded_catalog(&self.design);
        loop {
            stage1.push(perm.clone());
            if !next_permutation(&mut perm) {
                break;
            }
        }
        let parts: Vec<A> = stage1
            .into_par_iter()
            .map(|subsets| {
                let mut acc = init();
                let mut it = AssignmentIter::with_stage1(&self.design, subsets, true);
                while let Some(a) = it.advance() {
                    fold(&mut acc, a);
                }
                acc
            })
            .collect();
        let mut iter = parts.into_iter();
        let first = iter.next().unwrap_or_else(&init);
        iter.fold(first, merge)
    }
}

/// Lexicographic enumeration: first-stage arrangements outermost, then blocks in index order
/// with the last block varying fastest.
pub struct AssignmentIter<'a> {
    design: &'a DesignSpec,
    offsets: Vec<usize>,
    current: Assignment,
    started: bool,
    done: bool,
    fixed_stage1: bool,
}

impl<'a> AssignmentIter<'a> {
    fn new(design: &'a DesignSpec) -> Self {
        Self::with_stage1(design, expanded_catalog(design), false)
    }

    fn with_stage1(design: &'a DesignSpec, subsets: Vec<usize>, fixed_stage1: bool) -> Self {
        let subsets = SubsetAssignment { subsets };
        let mut units = Vec::with_capacity(design.total_units());
        for k in 0..design.num_blocks() {
            units.extend(block_labels(design, subsets.subset(design, k), design.block_sizes()[k]));
        }
        AssignmentIter {
            design,
            offsets: design.block_offsets(),
            current: Assignment {
                subsets,
                unit_treatments: units,
            },
            started: false,
            done: false,
            fixed_stage1,
        }
    }

    fn reset_stage2(&mut self) {
        let d = self.design;
        for k in 0..d.num_blocks() {
            let labels = block_labels(d, self.current.subsets.subset(d, k), d.block_sizes()[k]);
            let o = self.offsets[k];
            self.current.unit_treatments[o..o + labels.len()].copy_from_slice(&labels);
        }
    }

    /// Step to the next assignment and borrow it.
    pub fn advance(&mut self) -> Option<&Assignment> {
        if self.done {
            return None;
        }
        if !self.started {
            self.started = true;
            return Some(&self.current);
        }
        for k in (0..self.design.num_blocks()).rev() {
            let o = self.offsets[k];
            let n = self.design.block_sizes()[k];
            if next_permutation(&mut self.current.unit_treatments[o..o + n]) {
                return Some(&self.current);
            }
        }
        if self.fixed_stage1 || !next_permutation(&mut self.current.subsets.subsets) {
            self.done = true;
            return None;
        }
        self.reset_stage2();
        Some(&self.current)
    }
}

impl Iterator for AssignmentIter<'_> {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        self.advance().cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, five_treatment_bibd};
    use std::collections::{HashMap, HashSet};

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
    fn counts() {
        assert_eq!(count_assignments(&three_pairs(1, 2)), BigUint::from(48u32));
        assert_eq!(count_assignments(&three_pairs(2, 2)), BigUint::from(5760u32));
        let d = five_treatment_bibd(1, vec![3; 10]).unwrap();
        let expected = factorial(10) * BigUint::from(6u32).pow(10);
        assert_eq!(count_assignments(&d), expected);
        let single = build_design(4, 3, 2, vec![vec![0, 1]], vec![4], vec![2; 4]);
        assert!(single.is_err(), "treatment 2 unused");
    }

    #[test]
    fn single_subset_count() {
        let d = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![2, 1], vec![2; 3]).unwrap();
        assert_eq!(count_stage1(&d), BigUint::from(3u32));
        assert_eq!(count_stage2(&d), BigUint::from(8u32));
    }

    #[test]
    fn enumeration_is_exhaustive_and_distinct() {
        for d in [three_pairs(1, 2), three_pairs(2, 2), three_pairs(1, 4)] {
            let dist = enumerate_assignments(&d).unwrap();
            let mut seen = HashSet::new();
            for a in dist.iter() {
                validate_assignment(&d, &a).unwrap();
                assert!(seen.insert(a));
            }
            assert_eq!(BigUint::from(seen.len()), *dist.count());
            let total: f64 = crate::numeric::sum(seen.iter().map(|_| dist.probability()));
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_order_is_lexicographic() {
        let d = three_pairs(1, 2);
        let all: Vec<_> = enumerate_assignments(&d).unwrap().iter().collect();
        assert_eq!(all[0].subsets.subsets, vec![0, 1, 2]);
        assert_eq!(all[0].unit_treatments, vec![0, 1, 0, 2, 1, 2]);
        assert_eq!(all[1].unit_treatments, vec![0, 1, 0, 2, 2, 1]);
        assert_eq!(all[47].subsets.subsets, vec![2, 1, 0]);
        let keys: Vec<(Vec<usize>, Vec<usize>)> = all
            .iter()
            .map(|a| (a.subsets.subsets.clone(), a.unit_treatments.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn parallel_fold_matches_sequential() {
        let d = three_pairs(2, 2);
        let dist = enumerate_assignments(&d).unwrap();
        let n = dist.fold(|| 0usize, |c, _| *c += 1, |a, b| a + b);
        assert_eq!(n, 5760);
    }

    #[test]
    fn cap_is_enforced() {
        let d = five_treatment_bibd(1, vec![3; 10]).unwrap();
        match enumerate_assignments(&d) {
            Err(Error::EnumerationCap { count, .. }) => assert!(count.len() > 8),
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn enumerated_marginals_match_incidence() {
        let d = build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2]], vec![2, 1], vec![2; 3]).unwrap();
        let inc = crate::design::incidence(&d);
        let dist = enumerate_assignments(&d).unwrap();
        let p = dist.probability();
        let mut marg = vec![vec![0.0; 3]; 3];
        let mut pair = vec![vec![vec![0.0; 3]; 3]; 3];
        dist.for_each(|a| {
            for k in 0..3 {
                let s = a.subsets.subset(&d, k);
                for &z in s {
                    marg[k][z] += p;
                    for &w in s {
                        pair[k][z][w] += p;
                    }
                }
            }
        });
        for k in 0..3 {
            for z in 0..3 {
                assert!((marg[k][z] - inc.marginal[z]).abs() < 1e-12);
                for w in 0..3 {
                    assert!((pair[k][z][w] - inc.pairwise[z][w]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn stage1_is_uniform() {
        let d = three_pairs(1, 2);
        let mut rng = rng_from_seed(7);
        let draws = 60_000;
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            *freq.entry(draw_stage1(&d, &mut rng).subsets).or_default() += 1;
        }
        assert_eq!(freq.len(), 6);
        let p = 1.0 / 6.0;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in freq.values() {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sd + 1.0, "count {c}");
        }
    }

    #[test]
    fn stage2_is_uniform_over_arrangements() {
        let d =build_design(2, 4, 3, vec![vec![0, 1, 2], vec![1, 2, 3]], vec![1, 1], vec![6, 3]).unwrap();
        let s = SubsetAssignment { subsets: vec![0, 1] };
        let mut rng = rng_from_seed(11);
        let draws = 90_000;
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..draws {
            let a = draw_stage2(&d, &s, &mut rng);
            validate_assignment(&d, &a).unwrap();
            *freq.entry(a.unit_treatments[..6].to_vec()).or_default() += 1;
        }
        assert_eq!(freq.len(), 90);
        let expect = draws as f64 / 90.0;
        let chi2: f64 = freq.values().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 89 degrees of freedom; 99.9% quantile is about 135.
        assert!(chi2 < 135.0, "chi2 = {chi2}");
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let d = five_treatment_bibd(2, vec![6; 20]).unwrap();
        assert_eq!(assign(&d, 42), assign(&d, 42));
        assert_eq!(assign_stage1(&d, 3), assign_stage1(&d, 3));
        let a = assign(&d, 5);
        validate_assignment(&d, &a).unwrap();
        let b = assign_stage2(&d, &a.subsets, 9).unwrap();
        validate_assignment(&d, &b).unwrap();
        assert_ne!(replicate_rng(1, 0).gen::<u64>(), replicate_rng(1, 1).gen::<u64>());
    }

    #[test]
    fn two_unit_block_orders() {
        let d = three_pairs(1, 2);
        let s = SubsetAssignment { subsets: vec![0, 1, 2] };
        let mut rng = rng_from_seed(1);
        let mut first = 0;
        for _ in 0..4000 {
            let a = draw_stage2(&d, &s, &mut rng);
            if a.unit_treatments[0] == 0 {
                first += 1;
            }
        }
        assert!((first as f64 - 2000.0).abs() < 3.0 * 1000f64.sqrt());
    }
}
