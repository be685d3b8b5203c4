mod common;

use common::*;

const TOL: f64 = 1e-4;

#[test]
fn align_path_matches_finite_differences() {
    let case = pretrain_case(3);
    let mut store = case.model.store.clone();
    let r = check_gradients(&mut store, &[], 3, |s| align_path(&case, s));
    assert!(r.checked > 100, "{r:?}");
    assert!(r.max_rel < TOL, "{r:?}");
}

#[test]
fn point_path_matches_finite_differences() {
    let case = pretrain_case(4);
    let mut store = case.model.store.clone();
    let r = check_gradients(&mut store, &[], 3, |s| point_path(&case, s));
    assert!(r.max_rel < TOL, "{r:?}");
}

#[test]
fn codebook_receives_point_gradients() {
    let case = pretrain_case(5);
    let mut store = case.model.store.clone();
    let r = check_gradients(&mut store, &["codebook."], 16, |s| point_path(&case, s));
    assert!(r.checked >= 16 && r.max_rel < TOL, "{r:?}");
    let (_, g) = point_path(&case, &case.model.store);
    let entries = case.model.store.id("codebook.entries").unwrap();
    assert!(g.get(entries).unwrap().iter().any(|v| v.abs() > 0.0));
}

#[test]
fn shared_position_mlp_accumulates_both_consumers() {
    let case = pretrain_case(6);
    let mut store = case.model.store.clone();
    let r = check_gradients(&mut store, &["pos_embed."], 64, |s| align_path(&case, s));
    assert!(r.max_rel < TOL, "{r:?}");
}

#[test]
fn classifier_path_matches_finite_differences() {
    let (model, cloud) = classifier_case(7);
    let mut store = model.store.clone();
    let r = check_gradients(&mut store, &[], 3, |s| classifier_path(&model, &cloud, s));
    assert!(r.checked > 100, "{r:?}");
    assert!(r.max_rel < TOL, "{r:?}");
}
