//! Compares tape gradients against central differences for the mixture
//! forward pass and for both contrastive objectives.

use moe_embed::loss::{eans, infonce, ContrastiveBatch, EansParams};
use moe_embed::moe_lora::{moe_forward, BoundExpert, BoundMoe, RoutingSignature, LayerMask};
use moe_embed::numcore::{finite_diff_check, randn, RngState, Tensor};

fn main() -> moe_embed::Result<()> {
    let mut rng = RngState::new(11);
    let a = randn(&[2, 6], 0.5, &mut rng)?;
    let b = randn(&[4, 2], 0.5, &mut rng)?;
    let gate = randn(&[2, 6], 0.5, &mut rng)?;
    let w0 = randn(&[4, 6], 0.5, &mut rng)?;
    let x = randn(&[3, 6], 1.0, &mut rng)?;

    let err = finite_diff_check(
        |tape, v| {
            let layer = BoundMoe {
                experts: vec![
                    BoundExpert { a: v, b: tape.constant(&b), scaling: 2.0 },
                    BoundExpert { a: tape.constant(&a), b: tape.constant(&b), scaling: 2.0 },
                ],
                gate: tape.constant(&gate),
                router_temperature: 1.0,
            };
            let (out, _) = moe_forward(&tape.constant(&w0), &layer, &tape.constant(&x))?;
            Ok(out.mul(&out)?.sum())
        },
        &a,
        1e-6,
    )?;
    println!("moe_forward wrt A_0       rel err {err:.2e}");

    let sig = |p: f64| RoutingSignature { values: Tensor::new(vec![1, 1, 2], vec![p, 1.0 - p]).unwrap(), layer_mask: LayerMask::all(1) };
    let sigs: Vec<_> = [0.2, 0.5, 0.7, 0.9].into_iter().map(sig).collect();
    let q = randn(&[4, 5], 1.0, &mut rng)?;
    let t = randn(&[4, 5], 1.0, &mut rng)?;
    for weighted in [false, true] {
        let err = finite_diff_check(
            |tape, v| {
                let batch = ContrastiveBatch::new(
                    v.l2_normalize_rows()?,
                    tape.constant(&t).l2_normalize_rows()?,
                    sigs.clone(),
                    sigs.clone(),
                    0.1,
                )?;
                if weighted {
                    eans(&batch, &EansParams { sigma: 0.1, ..EansParams::default() })
                } else {
                    infonce(&batch)
                }
            },
            &q,
            1e-6,
        )?;
        println!("{:<25} rel err {err:.2e}", if weighted { "eans wrt queries" } else { "infonce wrt queries" });
    }
    Ok(())
}
