use crate::{write_atomic, write_resolved, CliResult, RunConfig};
use mtat_core::attention::{attention_flops, mediator_flops, AttentionConfig, MediatorConfig};
use mtat_core::flops::FlopsReport;
use serde::Serialize;
use std::fmt::Write as _;

/// Published full-model GFLOPs for the 12-layer, width-384, 256-token
/// setting: vanilla baseline, then `n = 4, 16, 64`. Echoed for context only.
pub const REFERENCE_GFLOPS: [(&str, f64); 4] = [("vanilla", 6.06), ("n=4", 5.49), ("n=16", 5.55), ("n=64", 5.78)];

#[derive(Clone, Debug, Serialize)]
pub struct FlopsRow {
    pub setting: String,
    pub kind: &'static str,
    pub n: Option<usize>,
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub per_layer: FlopsReport,
}

impl FlopsRow {
    /// Attention GFLOPs of a forward pass with every layer of this kind.
    pub fn model_gflops(&self) -> f64 {
        self.per_layer.gflops() * self.layers as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopsTable {
    pub rows: Vec<FlopsRow>,
}

impl FlopsTable {
    /// `setting,kind,n,tokens,hidden,heads,layers,interaction_macs,layer_macs,model_gflops`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,kind,n,tokens,hidden,heads,layers,interaction_macs,layer_macs,model_gflops\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.setting,
                r.kind,
                r.n.map_or(String::new(), |n| n.to_string()),
                r.tokens,
                r.hidden,
                r.heads,
                r.layers,
                r.per_layer.interaction(),
                r.per_layer.total_macs(),
                r.model_gflops()
            )
            .unwrap();
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<8} {:<9} {:>4} {:>6} {:>6} {:>6} {:>16} {:>16} {:>12}\n",
            "setting", "kind", "n", "tokens", "hidden", "layers", "interaction/layer", "MACs/layer", "attn GFLOPs"
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<8} {:<9} {:>4} {:>6} {:>6} {:>6} {:>16} {:>16} {:>12.4}",
                r.setting,
                r.kind,
                r.n.map_or("-".to_string(), |n| n.to_string()),
                r.tokens,
                r.hidden,
                r.layers,
                r.per_layer.interaction(),
                r.per_layer.total_macs(),
                r.model_gflops()
            )
            .unwrap();
        }
        if self.rows.iter().any(|r| r.setting == "preset") {
            out.push_str("\nreported reference (not reconstructed), full-model GFLOPs for the preset setting:\n  ");
            let refs: Vec<String> = REFERENCE_GFLOPS.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
            out.push_str(&refs.join(" | "));
            out.push_str("\nThe rows above count attention layers only; MLP, embedding and head costs are excluded.\n");
        }
        out
    }
}

fn rows_for(setting: &str, cfg: &AttentionConfig, layers: usize, counts: &[usize]) -> CliResult<Vec<FlopsRow>> {
    let row = |kind, n, per_layer| FlopsRow {
        setting: setting.to_string(),
        kind,
        n,
        tokens: cfg.tokens,
        hidden: cfg.hidden,
        heads: cfg.heads,
        layers,
        per_layer,
    };
    let mut rows = vec![row("vanilla", None, attention_flops(cfg))];
    for &n in counts {
        let m = MediatorConfig::for_count(n, cfg.grid)?;
        rows.push(row("mediator", Some(n), mediator_flops(cfg, &m)));
    }
    Ok(rows)
}

pub fn cmd_flops(cfg: &RunConfig) -> CliResult<FlopsTable> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let mut rows = rows_for(
        "config",
        &cfg.model.attention_config()?,
        cfg.model.layers(),
        &cfg.flops.counts,
    )?;
    if cfg.flops.preset {
        let preset = AttentionConfig::new((16, 16), 384, 6)?;
        rows.extend(rows_for("preset", &preset, 12, &[4, 16, 64])?);
    }
    let table = FlopsTable { rows };
    write_atomic(&cfg.out.join("flops.csv"), table.to_csv().as_bytes())?;
    let json = serde_json::json!({
        "rows": table.rows.iter().map(|r| serde_json::json!({
            "setting": r.setting,
            "kind": r.kind,
            "n": r.n,
            "tokens": r.tokens,
            "hidden": r.hidden,
            "heads": r.heads,
            "layers": r.layers,
            "per_layer": r.per_layer,
            "model_gflops": r.model_gflops(),
        })).collect::<Vec<_>>(),
        "reported_reference_not_reconstructed": REFERENCE_GFLOPS
            .iter()
            .map(|(k, v)| serde_json::json!({"setting": k, "gflops": v}))
            .collect::<Vec<_>>(),
    });
    write_atomic(
        &cfg.out.join("flops.json"),
        serde_json::to_string_pretty(&json).expect("json").as_bytes(),
    )?;
    Ok(table)
}
