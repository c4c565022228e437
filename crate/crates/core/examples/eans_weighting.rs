//! Shows how routing distance turns into negative weights and how the
//! weighted loss compares with plain InfoNCE on one batch.

use moe_embed::loss::{decay_weight, eans, infonce, negative_weights, routing_distance, ContrastiveBatch, EansParams};
use moe_embed::moe_lora::{LayerMask, RoutingSignature};
use moe_embed::numcore::{RngState, Tape, Tensor};

fn signature(probs: &[f64]) -> RoutingSignature {
    RoutingSignature { values: Tensor::new(vec![1, 1, probs.len()], probs.to_vec()).unwrap(), layer_mask: LayerMask::all(1) }
}

fn main() -> moe_embed::Result<()> {
    let p = EansParams::default();
    for d in [0.0, 0.001, 0.002, 0.005, 0.02, 0.2] {
        println!("d = {d:<6} w = {:.4}", decay_weight(d, &p));
    }

    let sigs = [signature(&[0.5, 0.5]), signature(&[0.499, 0.501]), signature(&[0.9, 0.1]), signature(&[0.1, 0.9])];
    println!("d(0,1) = {:.4}, d(0,3) = {:.4}", routing_distance(&sigs[0], &sigs[1])?, routing_distance(&sigs[0], &sigs[3])?);

    let mut rng = RngState::new(7);
    let mut rows = |b: usize| {
        let t = moe_embed::numcore::randn(&[b, 8], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        tape.constant(&t).l2_normalize_rows().unwrap().value()
    };
    let (q, t) = (rows(4), rows(4));
    let tape = Tape::new();
    let batch = ContrastiveBatch::new(tape.constant(&q), tape.constant(&t), sigs.to_vec(), sigs.to_vec(), 0.05)?;
    for (i, row) in negative_weights(&batch, &p)?.iter().enumerate() {
        println!("query {i} weights {:.3?}", row);
    }
    println!("infonce {:.5}  eans {:.5}", infonce(&batch)?.item(), eans(&batch, &p)?.item());
    Ok(())
}
