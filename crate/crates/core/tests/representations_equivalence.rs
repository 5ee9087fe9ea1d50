mod common;

use common::{direct_inputs, energy_test, rng};
use dgsi::depmodel::{CopulaSpec, DmFamily};
use dgsi::margins::MarginSpec;
use dgsi::models::ModelSpec;
use dgsi::representations::{build_representation, route_subset, BlockStructure, DependentBlock, PermutationPlan};
use dgsi::sampling::{generate_panel, ColumnLayout, Generator, PanelId, SamplePlan};
use std::collections::BTreeSet;

const N: usize = 10_000;

fn reference_specs() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("linear", ModelSpec::linear_reference()),
        ("portfolio", ModelSpec::portfolio_reference()),
        ("gsobol", ModelSpec::gsobol_reference()),
    ]
}

#[test]
fn every_representation_matches_direct_sampling() {
    for (name, spec) in reference_specs() {
        let structure = spec.default_structure().unwrap().unwrap();
        let model = spec.build().unwrap();
        let plan = PermutationPlan::for_structure(&structure).unwrap();
        let labels = plan.all_labels();
        let alpha = 0.01 / labels.len() as f64;

        let mut r = rng(99);
        let mut out = vec![0.0; 1];
        let direct: Vec<f64> = (0..N)
            .map(|_| {
                let x = direct_inputs(&structure, &mut r);
                model.evaluate(&x, &mut out).unwrap();
                out[0]
            })
            .collect();

        let layout = ColumnLayout::for_structure(&structure);
        for (k, label) in labels.iter().enumerate() {
            let rep = build_representation(&structure, &plan, model.clone(), label).unwrap();
            let sp = SamplePlan::new(Generator::Prng, 1000 + k as u64, layout.clone());
            let panel = generate_panel(&sp, N, PanelId::First).unwrap();
            let mut x = vec![0.0; rep.input_dim()];
            let ys: Vec<f64> = (0..N)
                .map(|i| {
                    rep.evaluate_row(panel.row(i), &mut x, &mut out).unwrap();
                    out[0]
                })
                .collect();
            let p = energy_test(&ys, &direct, 199, 7 + k as u64);
            assert!(p > alpha, "{name}: representation g{} rejected, p = {p}", k + 1);
        }
    }
}

fn random_structure(seed: u64) -> BlockStructure {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut r = rng(seed);
    let d = r.random_range(2..=10);
    let mut idx: Vec<usize> = (1..=d).collect();
    idx.shuffle(&mut r);
    let mut dependent = Vec::new();
    let mut rest = &idx[..];
    let mut independent = Vec::new();
    while !rest.is_empty() {
        let take = r.random_range(1..=rest.len().min(5));
        let (head, tail) = rest.split_at(take);
        if take == 1 {
            independent.push((head[0], MarginSpec::standard_uniform()));
        } else {
            let mut c = vec![vec![0.0; take]; take];
            for (i, row) in c.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            dependent.push(DependentBlock {
                indices: head.to_vec(),
                family: DmFamily::Copula {
                    copula: CopulaSpec::gaussian(c).unwrap(),
                    margins: vec![MarginSpec::standard_uniform(); take],
                },
            });
        }
        rest = tail;
    }
    BlockStructure::new(independent, dependent).unwrap()
}

fn check_prefix_routes(structure: &BlockStructure) {
    let plan = PermutationPlan::for_structure(structure).unwrap();
    let d = structure.d();
    let labels: BTreeSet<_> = plan
        .all_labels()
        .into_iter()
        .map(|l| l.0.iter().enumerate().map(|(b, &k)| plan.blocks[b].permutations[k].clone()).collect::<Vec<_>>())
        .collect();
    assert_eq!(labels.len() as u128, plan.r_min(), "duplicate representations");
    for mask in 1u32..(1 << d) {
        let u: Vec<usize> = (0..d).filter(|k| mask >> k & 1 == 1).map(|k| k + 1).collect();
        let (label, _) = route_subset(&plan, structure, &u).unwrap();
        for (b, blk) in plan.blocks.iter().enumerate() {
            let part: BTreeSet<usize> = u.iter().copied().filter(|i| blk.indices.contains(i)).collect();
            let perm = &blk.permutations[label.0[b]];
            let prefix: BTreeSet<usize> = perm[..part.len()].iter().copied().collect();
            assert_eq!(prefix, part, "u = {u:?}, block {:?}, permutation {perm:?}", blk.indices);
        }
    }
}

#[test]
fn routes_are_prefix_consistent_for_models() {
    for (_, spec) in reference_specs() {
        check_prefix_routes(&spec.default_structure().unwrap().unwrap());
    }
}

#[test]
fn routes_are_prefix_consistent_for_random_structures() {
    for seed in 0..40 {
        check_prefix_routes(&random_structure(seed));
    }
}
