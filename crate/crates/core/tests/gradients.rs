//! Finite-difference checks of every hand-written backward pass.

mod common;

use alc_core::objective::ClsLoss;
use common::*;

#[test]
fn c2f_block() {
    grad_c2f().assert_within(1e-4);
}

#[test]
fn lska_attention() {
    grad_lska().assert_within(1e-4);
}

#[test]
fn sppf_with_lska() {
    grad_sppf_lska().assert_within(1e-4);
}

#[test]
fn cfc_crb_block() {
    grad_cfc_crb().assert_within(1e-4);
}

#[test]
fn sfc_g2_block() {
    grad_sfc_g2().assert_within(1e-4);
}

#[test]
fn scalar_losses() {
    for r in [grad_atf(), grad_dfl(), grad_box()] {
        r.assert_within(1e-6);
    }
}

#[test]
fn full_loss_on_toy_scene() {
    grad_full_loss(ClsLoss::Bce).assert_within(1e-3);
    grad_full_loss(ClsLoss::Atf { gamma: 2.0, tau: 0.25 }).assert_within(1e-3);
}

#[test]
fn full_model() {
    grad_full_model(2).assert_within(1e-3);
}
