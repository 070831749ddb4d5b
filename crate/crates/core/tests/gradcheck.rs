//! Analytic gradients against central finite differences.

mod common;

use common::gradcheck::{layer_norm_centering_worst, transformer_loss_worst, worst_over, PRIMITIVES, TOLERANCE};

fn check(name: &str) {
    let (_, case) = PRIMITIVES.iter().find(|(n, _)| *n == name).unwrap();
    let worst = worst_over(name, *case);
    assert!(worst <= TOLERANCE, "{name}: worst relative error {worst:e}");
}

#[test]
fn matmul() {
    check("matmul");
}

#[test]
fn add_mul_scale() {
    check("add_mul_scale");
}

#[test]
fn add_row() {
    check("add_row");
}

#[test]
fn sum() {
    check("sum");
}

#[test]
fn gelu() {
    check("gelu");
}

#[test]
fn softmax_rows() {
    check("softmax_rows");
}

#[test]
fn layer_norm() {
    check("layer_norm");
}

#[test]
fn embedding() {
    check("embedding");
}

#[test]
fn causal_attention() {
    check("causal_attention");
}

#[test]
fn replace_and_select_rows() {
    check("replace_and_select_rows");
}

#[test]
fn masked_cross_entropy() {
    check("masked_cross_entropy");
}

#[test]
fn kl_to_reference() {
    check("kl_to_reference");
}

#[test]
fn three_layer_mlp() {
    check("three_layer_mlp");
}

#[test]
fn layer_norm_rows_are_centered() {
    let worst = layer_norm_centering_worst();
    assert!(worst <= 1e-10, "row mean {worst:e}");
}

#[test]
fn transformer_loss() {
    let worst = transformer_loss_worst();
    assert!(worst <= TOLERANCE, "transformer loss: worst relative error {worst:e}");
}
