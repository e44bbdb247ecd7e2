use crate::attention::{
    mediator_attention_on, multi_head_attention_on, AttentionConfig, AttentionMaps, AttentionVars, LayerMaps,
    MediatorConfig,
};
use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::rng::{self, Stream};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Vanilla,
    Mediator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub temb_dim: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// One entry per layer.
    pub attention: Vec<AttentionKind>,
    /// Mediator count used for training and when no schedule is given.
    pub mediators: usize,
    /// Start the output head at zero, so the initial prediction is zero.
    pub zero_head: bool,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            hidden: 32,
            heads: 2,
            grid: (8, 8),
            channels: 1,
            temb_dim: 16,
            mlp_ratio: 2,
            classes: 4,
            attention: vec![AttentionKind::Mediator; 4],
            mediators: 16,
            zero_head: true,
        }
    }
}

impl ToyModelConfig {
    /// Two layers, width 8, two heads, 4×4 grid.
    pub fn micro() -> Self {
        ToyModelConfig {
            hidden: 8,
            heads: 2,
            grid: (4, 4),
            channels: 1,
            temb_dim: 4,
            mlp_ratio: 2,
            classes: 2,
            attention: vec![AttentionKind::Vanilla, AttentionKind::Mediator],
            mediators: 4,
            zero_head: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.grid, self.hidden, self.heads)
    }

    pub fn has_mediator_layers(&self) -> bool {
        self.attention.contains(&AttentionKind::Mediator)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.channels == 0 || self.classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("channels, classes and mlp_ratio must be positive"));
        }
        if self.temb_dim == 0 || self.temb_dim % 2 != 0 {
            return Err(Error::config(format!("temb_dim {} must be positive and even", self.temb_dim)));
        }
        self.attention_config()?;
        self.mediator_config(self.mediators)?;
        Ok(())
    }

    /// Pooling grid for `n` mediators, or `None` when the model has no
    /// mediator layers.
    pub fn mediator_config(&self, n: usize) -> Result<Option<MediatorConfig>> {
        if !self.has_mediator_layers() {
            return Ok(None);
        }
        if n == 0 || n > self.tokens() {
            return Err(Error::config(format!(
                "mediator count {n} must lie in 1..={}",
                self.tokens()
            )));
        }
        MediatorConfig::for_count(n, self.grid).map(Some)
    }

    /// Analytic attention MACs of one forward pass with `n` mediators.
    pub fn step_flops(&self, n: usize) -> Result<FlopsReport> {
        let cfg = self.attention_config()?;
        let mcfg = self.mediator_config(n)?;
        Ok(self
            .attention
            .iter()
            .map(|k| match (k, mcfg) {
                (AttentionKind::Mediator, Some(m)) => crate::attention::mediator_flops(&cfg, &m),
                _ => crate::attention::attention_flops(&cfg),
            })
            .sum())
    }
}

/// Parameters keyed by name, plus the config that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub cfg: ToyModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn layer_key(l: usize, name: &str) -> String {
    format!("blocks.{l}.{name}")
}

impl ToyModel {
    /// Weights `N(0, 1/fan_in)`, biases zero, embeddings `N(0, 0.02²)`,
    /// depthwise kernels start as the identity tap.
    pub fn init(cfg: ToyModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, Stream::Init, 0);
        let (c, ch, hid) = (cfg.hidden, cfg.channels, cfg.hidden * cfg.mlp_ratio);
        let mut params = BTreeMap::new();
        let dense = |r: &mut dyn rand::RngCore, rows: usize, cols: usize| {
            Tensor::random_normal(&[rows, cols], (1.0 / rows as f64).sqrt(), r)
        };
        params.insert("in.w".into(), dense(&mut r, ch, c));
        params.insert("pos".into(), Tensor::random_normal(&[cfg.tokens(), c], 0.02, &mut r));
        params.insert("t.w".into(), dense(&mut r, cfg.temb_dim, c));
        params.insert("t.b".into(), Tensor::zeros(&[1, c]));
        params.insert("class.table".into(), Tensor::random_normal(&[cfg.classes, c], 0.02, &mut r));
        for (l, kind) in cfg.attention.iter().enumerate() {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(layer_key(l, &format!("attn.{w}")), dense(&mut r, c, c));
            }
            if *kind == AttentionKind::Mediator {
                let mut k = vec![0.0; 9 * c];
                k[4 * c..5 * c].iter_mut().for_each(|v| *v = 1.0);
                let noise = Tensor::random_normal(&[9 * c], 0.01, &mut r);
                for (v, e) in k.iter_mut().zip(noise.data()) {
                    *v += e;
                }
                params.insert(layer_key(l, "attn.dw"), Tensor::new(vec![3, 3, c], k)?);
            }
            params.insert(layer_key(l, "mlp.w1"), dense(&mut r, c, hid));
            params.insert(layer_key(l, "mlp.b1"), Tensor::zeros(&[1, hid]));
            params.insert(layer_key(l, "mlp.w2"), dense(&mut r, hid, c));
            params.insert(layer_key(l, "mlp.b2"), Tensor::zeros(&[1, c]));
        }
        let head = if cfg.zero_head {
            Tensor::zeros(&[c, ch])
        } else {
            dense(&mut r, c, ch)
        };
        params.insert("head.w".into(), head);
        params.insert("head.b".into(), Tensor::zeros(&[1, ch]));
        Ok(ToyModel { cfg, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over every parameter's name, shape and values, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Checkpoint layout: `b"MTCK"`, config JSON (u64 length + bytes),
    /// parameter count (u32), then per parameter a u32-length name and an
    /// MTAT tensor.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.cfg)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, t)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::config("not a model checkpoint"));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut cfg = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut cfg)?;
        let cfg: ToyModelConfig = serde_json::from_slice(&cfg)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4);
        let mut params = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::config("parameter name is not UTF-8"))?;
            params.insert(name, read_tensor(&mut r)?);
        }
        let expected = ToyModel::init(cfg.clone(), 0)?;
        for (name, t) in &expected.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::config("checkpoint has unexpected parameters"));
        }
        Ok(ToyModel { cfg, params })
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MTCK";

/// `[sin(1000·t·f_i), cos(1000·t·f_i)]` with `f_i = 10000^(−i/(E/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (1000.0 * t * f).sin();
        out[half + i] = (1000.0 * t * f).cos();
    }
    Tensor::raw(vec![1, dim], out)
}

/// Velocity prediction for one sample of tokens `[N×channels]` on `tape`.
/// Returns the prediction and, when `capture` is set, each layer's maps.
pub fn model_forward_on(
    tape: &mut Tape,
    p: &BTreeMap<String, Var>,
    cfg: &ToyModelConfig,
    x_t: Var,
    t: f64,
    class: usize,
    n: usize,
) -> Result<(Var, Vec<LayerMaps>)> {
    let acfg = cfg.attention_config()?;
    let mcfg = cfg.mediator_config(n)?;
    if tape.value(x_t).shape() != [cfg.tokens(), cfg.channels] {
        return Err(Error::dim(format!(
            "model input {:?} is not [{}×{}]",
            tape.value(x_t).shape(),
            cfg.tokens(),
            cfg.channels
        )));
    }
    if class >= cfg.classes {
        return Err(Error::config(format!("class {class} out of range 0..{}", cfg.classes)));
    }
    let get = |name: &str| -> Result<Var> {
        p.get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    };
    let mut z = tape.matmul(x_t, get("in.w")?)?;
    z = tape.add(z, get("pos")?)?;
    let temb = tape.constant(timestep_embedding(t, cfg.temb_dim));
    let temb = tape.matmul(temb, get("t.w")?)?;
    let temb = tape.add(temb, get("t.b")?)?;
    let cemb = tape.gather_row(get("class.table")?, class)?;
    let cond = tape.add(temb, cemb)?;
    z = tape.add_row(z, cond)?;

    let mut maps = Vec::with_capacity(cfg.layers());
    for (l, kind) in cfg.attention.iter().enumerate() {
        let key = |n: &str| get(&layer_key(l, n));
        let w = AttentionVars {
            w_q: key("attn.wq")?,
            w_k: key("attn.wk")?,
            w_v: key("attn.wv")?,
            w_o: key("attn.wo")?,
            dw_kernels: match kind {
                AttentionKind::Mediator => Some(key("attn.dw")?),
                AttentionKind::Vanilla => None,
            },
        };
        let h = tape.layer_norm(z)?;
        let (a, m) = match (kind, &mcfg) {
            (AttentionKind::Mediator, Some(mc)) => mediator_attention_on(tape, h, &w, &acfg, mc)?,
            _ => multi_head_attention_on(tape, h, &w, &acfg)?,
        };
        maps.push(m);
        z = tape.add(z, a)?;
        let h = tape.layer_norm(z)?;
        let h = tape.matmul(h, key("mlp.w1")?)?;
        let h = tape.add_row(h, key("mlp.b1")?)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, key("mlp.w2")?)?;
        let h = tape.add_row(h, key("mlp.b2")?)?;
        z = tape.add(z, h)?;
    }
    let z = tape.layer_norm(z)?;
    let out = tape.matmul(z, get("head.w")?)?;
    let out = tape.add_row(out, get("head.b")?)?;
    Ok((out, maps))
}

/// Result of one inference forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: Tensor,
    pub flops: FlopsReport,
    pub maps: Option<Vec<AttentionMaps>>,
}

/// Inference forward pass of `model` on `x_t` with `n` mediators.
pub fn model_forward(model: &ToyModel, x_t: &Tensor, t: f64, class: usize, n: usize, capture: bool) -> Result<ForwardOutput> {
    let mut tape = Tape::inference();
    let p = model.bind(&mut tape);
    let x = tape.constant(x_t.clone());
    let (out, maps) = model_forward_on(&mut tape, &p, &model.cfg, x, t, class, n)?;
    Ok(ForwardOutput {
        velocity: tape.value(out).clone(),
        flops: tape.macs().report(),
        maps: capture.then(|| maps.iter().map(|m| m.materialize(&tape)).collect()),
    })
}

/// Standard-normal tensor, used for noise draws.
pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::random_normal(shape, 1.0, rng)
}
