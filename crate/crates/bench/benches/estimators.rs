use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ibd_core::design::{build_design, five_treatment_bibd, DesignSpec};
use ibd_core::estimate::{adjusted, hajek, ht, ObservedData};
use ibd_core::population::{Contrast, PotentialOutcomes, Weights};
use ibd_core::randomize::{assign, enumerate_assignments};
use ibd_core::variance::{adjusted_var, cov_bb, cov_wb, CovKind, Flavor};

fn outcomes(design: &DesignSpec) -> PotentialOutcomes {
    let nt = design.num_treatments();
    let rows = (0..design.total_units())
        .map(|i| (0..nt).map(|z| ((i * 37 + z * 11) % 23) as f64 * 0.5).collect())
        .collect();
    PotentialOutcomes::from_design_order(design, rows).unwrap()
}

fn estimators(c: &mut Criterion) {
    let design = Arc::new(five_treatment_bibd(5, (0..50).map(|k| 3 * (2 + k % 5)).collect()).unwrap());
    let po = outcomes(&design);
    let obs = ObservedData::from_assignment(&po, &design, &assign(&design, 1));
    let unit = Weights::unit(design.block_sizes());
    let block = Weights::block(design.num_blocks());
    let g = Contrast::pair(5, 0, 1);

    c.bench_function("ht_unit", |b| b.iter(|| ht(black_box(&obs), &unit, &g).unwrap()));
    c.bench_function("hajek_unit", |b| b.iter(|| hajek(black_box(&obs), &unit, &g).unwrap()));
    c.bench_function("ht_block", |b| b.iter(|| ht(black_box(&obs), &block, &g).unwrap()));
    c.bench_function("adjusted", |b| b.iter(|| adjusted(black_box(&obs), 0, 1).unwrap()));
    c.bench_function("cov_bb_hajek", |b| {
        b.iter(|| cov_bb(black_box(&obs), &unit, CovKind::Hajek).unwrap())
    });
    c.bench_function("cov_wb_hajek", |b| {
        b.iter(|| cov_wb(black_box(&obs), &unit, CovKind::Hajek).unwrap())
    });
    c.bench_function("adjusted_var_wb", |b| {
        b.iter(|| adjusted_var(black_box(&obs), 0, 1, Flavor::Wb).unwrap())
    });
    c.bench_function("assign_50_blocks", |b| b.iter(|| assign(&design, black_box(7))));
}

fn enumeration(c: &mut Criterion) {
    // 3! * 6^3 = 1296 assignments
    let design = Arc::new(
        build_design(3, 3, 2, vec![vec![0, 1], vec![0, 2], vec![1, 2]], vec![1; 3], vec![4; 3]).unwrap(),
    );
    let po = outcomes(&design);
    let w = Weights::unit(design.block_sizes());
    let g = Contrast::pair(3, 0, 2);
    c.bench_function("enumerate_ht_1296", |b| {
        b.iter(|| {
            let dist = enumerate_assignments(&design).unwrap();
            let mut total = 0.0;
            dist.for_each(|a| {
                let obs = ObservedData::from_assignment(&po, &design, a);
                total += ht(&obs, &w, &g).unwrap().point;
            });
            total
        })
    });
}

criterion_group!(benches, estimators, enumeration);
criterion_main!(benches);
