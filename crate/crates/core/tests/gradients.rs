mod common;

use common::{gradient_blocks, run_block};

fn assert_block(name: &str) {
    let (_, block) = gradient_blocks().into_iter().find(|(n, _)| *n == name).unwrap();
    let (worst, failed) = run_block(block);
    assert!(failed.is_empty(), "{name}: seeds {failed:?} failed, worst rel error {worst:e}");
}

#[test]
fn char_cnn_gradients() {
    assert_block("char-cnn");
}

#[test]
fn bilstm_gradients() {
    assert_block("bilstm");
}

#[test]
fn self_attention_gradients() {
    assert_block("self-attention");
}

#[test]
fn prior_alignment_gradients() {
    assert_block("prior-alignment");
}

#[test]
fn enhancement_gradients() {
    assert_block("enhancement");
}

#[test]
fn attention_aggregation_gradients() {
    assert_block("aggregation-attention");
}

#[test]
fn rnn_aggregation_gradients() {
    assert_block("aggregation-rnn");
}

#[test]
fn mlp_gradients() {
    assert_block("mlp");
}
