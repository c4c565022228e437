//! Embeds a few conflict-dataset pairs with the frozen encoder and prints
//! query/positive similarities.

use moe_embed::data::{generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{similarity, Encoder, EncoderConfig};

fn main() -> moe_embed::Result<()> {
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 16,
        num_layers: 2,
        ffn_dim: 32,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    println!("frozen checksum {}", enc.frozen_checksum());
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 4, 64, 0))?;
    for rec in &data.records {
        let (q, _) = enc.embed(&rec.query, None)?;
        let (p, _) = enc.embed(&rec.positive, None)?;
        println!("task {} {:?} -> {:?}  cos {:.4}", rec.task_id, rec.query.tokens, rec.positive.tokens, similarity(&q, &p)?);
    }
    Ok(())
}
