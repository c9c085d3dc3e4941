mod common;

use common::grad::{worst_error, TOLERANCE};

fn check(kind: &str) {
    let err = worst_error(kind);
    assert!(err < TOLERANCE, "{kind}: relative error {err:.3e}");
}

#[test]
fn conv2d() {
    check("conv2d");
}

#[test]
fn conv2d_padded() {
    check("conv2d_padded");
}

#[test]
fn max_pool2d() {
    check("max_pool2d");
}

#[test]
fn fully_connected() {
    check("fully_connected");
}

#[test]
fn relu() {
    check("relu");
}

#[test]
fn softmax_cross_entropy() {
    check("softmax_cross_entropy");
}

#[test]
fn broadcast_add_and_mul() {
    check("add_mul");
}

#[test]
fn mse() {
    check("mse");
}

#[test]
fn composed_network() {
    check("network");
}
