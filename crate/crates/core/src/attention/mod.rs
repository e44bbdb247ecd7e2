//! Vanilla multi-head attention and mediator-token attention.
//!
//! Mediator attention replaces the `N×N` query/key interaction of each head
//! with two softmax attentions through `n` pooled mediator tokens `t`:
//!
//! ```text
//! v_med = softmax(t·kᵀ/√d) · v        (n×d)
//! h     = softmax(q·tᵀ/√d) · v_med    (N×d)
//! ```
//!
//! Both stages cost `N·n·d` MACs per matmul, so a layer is linear in `N`.
//! Mediators are the full-width queries average-pooled over the spatial grid
//! and then split into heads the same way as `q`, `k` and `v`. A depthwise
//! 3×3 conv over `v` is added to the concatenated head outputs before `W_O`.
//!
//! Each operation has a tape-level form (`*_on`, differentiable, used by the
//! model) and a tensor-level convenience wrapper that runs the same code on
//! an inference tape.

mod flops;

pub use flops::{attention_flops, mediator_flops};

use crate::error::{Error, Result};
use crate::flops::{FlopsReport, Section};
use crate::tensor::{ops, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Token count, width, head count and the spatial grid the tokens tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub grid: (usize, usize),
}

impl AttentionConfig {
    pub fn new(grid: (usize, usize), hidden: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            tokens: grid.0 * grid.1,
            hidden,
            heads,
            grid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden width {} must be a positive multiple of head count {}",
                self.hidden, self.heads
            )));
        }
        if self.grid.0 * self.grid.1 != self.tokens || self.tokens == 0 {
            return Err(Error::config(format!(
                "grid {}×{} does not tile {} tokens",
                self.grid.0, self.grid.1, self.tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        if z.shape() != [self.tokens, self.hidden] {
            return Err(Error::dim(format!(
                "input {:?} does not match [{}×{}]",
                z.shape(),
                self.tokens,
                self.hidden
            )));
        }
        Ok(())
    }
}

/// Mediator pooling grid; `n = h·w` mediators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorConfig {
    pub grid: (usize, usize),
}

impl MediatorConfig {
    pub fn new(h: usize, w: usize) -> Self {
        MediatorConfig { grid: (h, w) }
    }

    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Picks a pooling grid with `h·w = n` that fits in `grid`, preferring
    /// the aspect ratio closest to the token grid's (square for square).
    pub fn for_count(n: usize, grid: (usize, usize)) -> Result<Self> {
        let target = grid.0 as f64 / grid.1 as f64;
        (1..=n)
            .filter(|h| n % h == 0)
            .map(|h| (h, n / h))
            .filter(|&(h, w)| h <= grid.0 && w <= grid.1)
            .min_by(|a, b| {
                let da = ((a.0 as f64 / a.1 as f64) / target).ln().abs();
                let db = ((b.0 as f64 / b.1 as f64) / target).ln().abs();
                da.total_cmp(&db).then(a.0.cmp(&b.0))
            })
            .map(|(h, w)| MediatorConfig::new(h, w))
            .ok_or_else(|| {
                Error::config(format!(
                    "{n} mediators cannot be pooled from a {}×{} grid",
                    grid.0, grid.1
                ))
            })
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let (h, w) = self.grid;
        if h == 0 || w == 0 || h > cfg.grid.0 || w > cfg.grid.1 {
            return Err(Error::dim(format!(
                "mediator grid {h}×{w} must lie within 1..={}×1..={}",
                cfg.grid.0, cfg.grid.1
            )));
        }
        Ok(())
    }
}

/// Bias-free `C×C` projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl MultiHeadParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let c = w_q.rows();
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [c, c] {
                return Err(Error::dim(format!(
                    "projection {:?} is not [{c}×{c}]",
                    w.shape()
                )));
            }
        }
        Ok(MultiHeadParams { w_q, w_k, w_v, w_o })
    }

    pub fn identity(hidden: usize) -> Self {
        let i = Tensor::eye(hidden);
        MultiHeadParams {
            w_q: i.clone(),
            w_k: i.clone(),
            w_v: i.clone(),
            w_o: i,
        }
    }

    /// Entries drawn from `N(0, 1/C)`.
    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let std = (1.0 / hidden as f64).sqrt();
        let mut draw = || Tensor::random_normal(&[hidden, hidden], std, rng);
        MultiHeadParams {
            w_q: draw(),
            w_k: draw(),
            w_v: draw(),
            w_o: draw(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows()
    }

    pub fn on_tape(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            dw_kernels: None,
        }
    }
}

/// Projections plus the `[3×3×C]` depthwise kernels of a mediator layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MediatorParams {
    pub attn: MultiHeadParams,
    pub dw_kernels: Tensor,
}

impl MediatorParams {
    pub fn new(attn: MultiHeadParams, dw_kernels: Tensor) -> Result<Self> {
        let c = attn.hidden();
        if dw_kernels.shape() != [3, 3, c] {
            return Err(Error::dim(format!(
                "depthwise kernels {:?} are not [3×3×{c}]",
                dw_kernels.shape()
            )));
        }
        Ok(MediatorParams { attn, dw_kernels })
    }

    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let attn = MultiHeadParams::random(hidden, rng);
        let dw_kernels = Tensor::random_normal(&[3, 3, hidden], 1.0 / 3.0, rng);
        MediatorParams { attn, dw_kernels }
    }

    pub fn on_tape(&self, tape: &mut Tape) -> AttentionVars {
        let mut vars = self.attn.on_tape(tape);
        vars.dw_kernels = Some(tape.leaf(self.dw_kernels.clone()));
        vars
    }
}

/// Layer weights living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub dw_kernels: Option<Var>,
}

/// Per-head row-stochastic attention matrices of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMaps {
    /// `A` per head, `[N×N]`.
    Full(Vec<Tensor>),
    /// `A_qt` (`[N×n]`) and `A_tk` (`[n×N]`) per head.
    Mediated { qt: Vec<Tensor>, tk: Vec<Tensor> },
}

impl AttentionMaps {
    pub fn heads(&self) -> usize {
        match self {
            AttentionMaps::Full(a) => a.len(),
            AttentionMaps::Mediated { qt, .. } => qt.len(),
        }
    }

    /// Every stored matrix, in head order (`qt` before `tk`).
    pub fn matrices(&self) -> Vec<&Tensor> {
        match self {
            AttentionMaps::Full(a) => a.iter().collect(),
            AttentionMaps::Mediated { qt, tk } => qt.iter().chain(tk).collect(),
        }
    }

    /// Largest `|row sum − 1|` over all stored matrices.
    pub fn max_row_sum_error(&self) -> f64 {
        self.matrices()
            .into_iter()
            .flat_map(|m| (0..m.rows()).map(move |i| (m.row(i).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// The `N×N` map each head effectively applies: `A` itself for full maps,
    /// `A_qt·A_tk` for mediated ones.
    pub fn effective(&self) -> Result<Vec<Tensor>> {
        match self {
            AttentionMaps::Full(a) => Ok(a.clone()),
            AttentionMaps::Mediated { .. } => composed_attention_map(self),
        }
    }
}

/// Maps recorded on a tape, materialized on demand.
#[derive(Clone, Debug)]
pub enum LayerMaps {
    Full(Vec<Var>),
    Mediated { qt: Vec<Var>, tk: Vec<Var> },
}

impl LayerMaps {
    pub fn materialize(&self, tape: &Tape) -> AttentionMaps {
        let take = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        match self {
            LayerMaps::Full(a) => AttentionMaps::Full(take(a)),
            LayerMaps::Mediated { qt, tk } => AttentionMaps::Mediated {
                qt: take(qt),
                tk: take(tk),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    pub maps: AttentionMaps,
    pub flops: FlopsReport,
}

#[derive(Clone, Debug)]
pub struct MediatorHeadOutput {
    pub h: Tensor,
    pub a_qt: Tensor,
    pub a_tk: Tensor,
}

fn same_width(tape: &Tape, vars: &[Var], op: &str) -> Result<usize> {
    let d = tape.value(vars[0]).cols();
    for &v in vars {
        let t = tape.value(v);
        t.expect_rank(2, op)?;
        if t.cols() != d {
            return Err(Error::dim(format!(
                "{op}: head widths differ ({:?} vs width {d})",
                t.shape()
            )));
        }
    }
    if d == 0 {
        return Err(Error::dim(format!("{op}: zero head width")));
    }
    Ok(d)
}

/// `softmax(a·bᵀ/√d)` with the matmul charged to `section`.
fn scaled_scores(tape: &mut Tape, a: Var, b: Var, d: usize, section: Section) -> Result<Var> {
    tape.enter(section);
    let logits = tape.matmul_nt(a, b)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    tape.softmax_rows(logits)
}

/// `q = zW_q`, `k = zW_k`, `v = zW_v` on a tape.
pub fn project_qkv_on(tape: &mut Tape, z: Var, w: &AttentionVars) -> Result<(Var, Var, Var)> {
    tape.enter(Section::QkvProj);
    let q = tape.matmul(z, w.w_q)?;
    let k = tape.matmul(z, w.w_k)?;
    let v = tape.matmul(z, w.w_v)?;
    Ok((q, k, v))
}

/// One vanilla head: returns `(h, A)` with `A = softmax(q·kᵀ/√d)`, `h = A·v`.
pub fn vanilla_head_on(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = same_width(tape, &[q, k, v], "vanilla_attention_head")?;
    let a = scaled_scores(tape, q, k, d, Section::KeyScores)?;
    tape.enter(Section::ValueAggregate);
    let h = tape.matmul(a, v)?;
    Ok((h, a))
}

/// One mediator head: returns `(h, A_qt, A_tk)`. `A_tk·v` is formed first,
/// so no `N×N` matrix is ever materialized.
pub fn mediator_head_on(tape: &mut Tape, q: Var, k: Var, v: Var, t: Var) -> Result<(Var, Var, Var)> {
    let d = same_width(tape, &[q, k, v, t], "mediator_attention_head")?;
    let a_tk = scaled_scores(tape, t, k, d, Section::KeyScores)?;
    tape.enter(Section::ValueAggregate);
    let v_med = tape.matmul(a_tk, v)?;
    let a_qt = scaled_scores(tape, q, t, d, Section::QueryScores)?;
    tape.enter(Section::MediatorAggregate);
    let h = tape.matmul(a_qt, v_med)?;
    Ok((h, a_qt, a_tk))
}

/// Pools full-width queries `[N×C]` on the token grid into `[n×C]` mediators.
pub fn mediators_on(tape: &mut Tape, q: Var, cfg: &AttentionConfig, mcfg: &MediatorConfig) -> Result<Var> {
    mcfg.validate(cfg)?;
    let qv = tape.value(q);
    if qv.shape() != [cfg.tokens, cfg.hidden] {
        return Err(Error::dim(format!(
            "make_mediators: q {:?} does not match grid {}×{} with width {}",
            qv.shape(),
            cfg.grid.0,
            cfg.grid.1,
            cfg.hidden
        )));
    }
    tape.enter(Section::Pooling);
    let grid = tape.reshape(q, &[cfg.grid.0, cfg.grid.1, cfg.hidden])?;
    let pooled = tape.adaptive_avg_pool2d(grid, mcfg.grid)?;
    tape.reshape(pooled, &[mcfg.count(), cfg.hidden])
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize, d: usize) -> Result<Vec<Var>> {
    (0..heads).map(|m| tape.slice_cols(x, m * d, d)).collect()
}

/// Full vanilla multi-head layer on a tape: `Concat(h¹…hᴹ)·W_O`.
pub fn multi_head_attention_on(
    tape: &mut Tape,
    z: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<(Var, LayerMaps)> {
    cfg.validate()?;
    cfg.check_input(tape.value(z))?;
    let (q, k, v) = project_qkv_on(tape, z, w)?;
    let d = cfg.head_dim();
    let (qs, ks, vs) = (
        split_heads(tape, q, cfg.heads, d)?,
        split_heads(tape, k, cfg.heads, d)?,
        split_heads(tape, v, cfg.heads, d)?,
    );
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let (h, a) = vanilla_head_on(tape, qs[m], ks[m], vs[m])?;
        outs.push(h);
        maps.push(a);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.enter(Section::OutProj);
    let out = tape.matmul(cat, w.w_o)?;
    tape.enter(Section::Other);
    Ok((out, LayerMaps::Full(maps)))
}

/// Full mediator layer on a tape: per-head mediator attention, plus the
/// depthwise-conv branch over `v` (when `w.dw_kernels` is set), then `W_O`.
pub fn mediator_attention_on(
    tape: &mut Tape,
    z: Var,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    mcfg: &MediatorConfig,
) -> Result<(Var, LayerMaps)> {
    cfg.validate()?;
    mcfg.validate(cfg)?;
    cfg.check_input(tape.value(z))?;
    let (q, k, v) = project_qkv_on(tape, z, w)?;
    let t = mediators_on(tape, q, cfg, mcfg)?;
    let d = cfg.head_dim();
    let (qs, ks, vs, ts) = (
        split_heads(tape, q, cfg.heads, d)?,
        split_heads(tape, k, cfg.heads, d)?,
        split_heads(tape, v, cfg.heads, d)?,
        split_heads(tape, t, cfg.heads, d)?,
    );
    let mut outs = Vec::with_capacity(cfg.heads);
    let (mut qt, mut tk) = (Vec::new(), Vec::new());
    for m in 0..cfg.heads {
        let (h, a_qt, a_tk) = mediator_head_on(tape, qs[m], ks[m], vs[m], ts[m])?;
        outs.push(h);
        qt.push(a_qt);
        tk.push(a_tk);
    }
    let mut cat = tape.concat_cols(&outs)?;
    if let Some(kernels) = w.dw_kernels {
        tape.enter(Section::DwConv);
        let vg = tape.reshape(v, &[cfg.grid.0, cfg.grid.1, cfg.hidden])?;
        let conv = tape.depthwise_conv3x3(vg, kernels)?;
        let conv = tape.reshape(conv, &[cfg.tokens, cfg.hidden])?;
        cat = tape.add(cat, conv)?;
    }
    tape.enter(Section::OutProj);
    let out = tape.matmul(cat, w.w_o)?;
    tape.enter(Section::Other);
    Ok((out, LayerMaps::Mediated { qt, tk }))
}

/// `(zW_q, zW_k, zW_v)`.
pub fn project_qkv(z: &Tensor, params: &MultiHeadParams) -> Result<(Tensor, Tensor, Tensor)> {
    if z.rank() != 2 || z.cols() != params.hidden() {
        return Err(Error::dim(format!(
            "project_qkv: input {:?} does not have width {}",
            z.shape(),
            params.hidden()
        )));
    }
    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let w = params.on_tape(&mut tape);
    let (q, k, v) = project_qkv_on(&mut tape, zv, &w)?;
    Ok((tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()))
}

/// `(h, A)` for one head.
pub fn vanilla_attention_head(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::inference();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (h, a) = vanilla_head_on(&mut tape, qv, kv, vv)?;
    Ok((tape.value(h).clone(), tape.value(a).clone()))
}

pub fn mediator_attention_head(q: &Tensor, k: &Tensor, v: &Tensor, t: &Tensor) -> Result<MediatorHeadOutput> {
    let mut tape = Tape::inference();
    let ids = [q, k, v, t].map(|x| tape.constant(x.clone()));
    let (h, a_qt, a_tk) = mediator_head_on(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
    Ok(MediatorHeadOutput {
        h: tape.value(h).clone(),
        a_qt: tape.value(a_qt).clone(),
        a_tk: tape.value(a_tk).clone(),
    })
}

/// Pools full-width `q` into `n = h·w` mediator tokens `[n×C]`.
pub fn make_mediators(q: &Tensor, cfg: &AttentionConfig, mcfg: &MediatorConfig) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let qv = tape.constant(q.clone());
    let t = mediators_on(&mut tape, qv, cfg, mcfg)?;
    Ok(tape.value(t).clone())
}

pub fn multi_head_attention(z: &Tensor, params: &MultiHeadParams, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let w = params.on_tape(&mut tape);
    let (out, maps) = multi_head_attention_on(&mut tape, zv, &w, cfg)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        maps: maps.materialize(&tape),
        flops: tape.macs().report(),
    })
}

pub fn mediator_attention(
    z: &Tensor,
    params: &MediatorParams,
    cfg: &AttentionConfig,
    mcfg: &MediatorConfig,
) -> Result<AttentionOutput> {
    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let w = params.on_tape(&mut tape);
    let (out, maps) = mediator_attention_on(&mut tape, zv, &w, cfg, mcfg)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        maps: maps.materialize(&tape),
        flops: tape.macs().report(),
    })
}

/// `A_qt·A_tk` per head: the `N×N` map a mediator layer effectively applies.
pub fn composed_attention_map(maps: &AttentionMaps) -> Result<Vec<Tensor>> {
    match maps {
        AttentionMaps::Full(_) => Err(Error::usage(
            "composed_attention_map needs mediated maps, got full maps",
        )),
        AttentionMaps::Mediated { qt, tk } => qt.iter().zip(tk).map(|(a, b)| ops::matmul(a, b)).collect(),
    }
}

#[cfg(test)]
mod tests;
