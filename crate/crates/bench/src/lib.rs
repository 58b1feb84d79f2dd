//! Fixtures shared by the criterion benches.

use co4_core::model::init_params;
use co4_core::{LayerKind, ModelConfig, Result, TensorSet};

/// Sequence lengths the layer benches sweep.
pub const NS: [usize; 4] = [256, 512, 1024, 2048];

/// Small-embedding model so the attention term dominates at moderate N.
pub fn bench_config(kind: LayerKind, max_seq: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        embed_dim: 64,
        max_seq,
        dropout: 0.0,
        layer_kind: kind,
        ..ModelConfig::default()
    }
}

/// Parameters and a deterministic token sequence of length `n`.
pub fn fixture(cfg: &ModelConfig, n: usize) -> Result<(TensorSet<f32>, Vec<usize>)> {
    let params = init_params(cfg, 0)?;
    let tokens = (0..n).map(|i| (i * 31 + 7) % cfg.vocab_size).collect();
    Ok((params, tokens))
}
