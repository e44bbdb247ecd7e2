use super::{AttentionConfig, MediatorConfig};
use crate::flops::FlopsReport;
use crate::tensor::ops::pool_add_count;

/// Analytic MACs of one vanilla multi-head layer.
pub fn attention_flops(cfg: &AttentionConfig) -> FlopsReport {
    let (n, c) = (cfg.tokens as u64, cfg.hidden as u64);
    FlopsReport {
        qkv_proj: 3 * n * c * c,
        key_scores: n * n * c,
        value_aggregate: n * n * c,
        out_proj: n * c * c,
        ..FlopsReport::default()
    }
}

/// Analytic MACs of one mediator layer, including pooling and the
/// depthwise-conv branch.
pub fn mediator_flops(cfg: &AttentionConfig, mcfg: &MediatorConfig) -> FlopsReport {
    let (n_tok, c, n_med) = (cfg.tokens as u64, cfg.hidden as u64, mcfg.count() as u64);
    FlopsReport {
        qkv_proj: 3 * n_tok * c * c,
        key_scores: n_med * n_tok * c,
        value_aggregate: n_med * n_tok * c,
        query_scores: n_tok * n_med * c,
        mediator_aggregate: n_tok * n_med * c,
        pooling: pool_add_count(cfg.grid, mcfg.grid, cfg.hidden),
        dwconv: 9 * n_tok * c,
        out_proj: n_tok * c * c,
    }
}
