use super::data::{interpolate, Dataset};
use super::model::{gaussian, model_forward_on, ToyModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub x: Tensor,
    pub class: usize,
    pub t: f64,
    pub eps: Tensor,
}

/// Training examples with their interpolation time and noise fixed, plus
/// the seed they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub seed: u64,
}

impl Batch {
    /// `size` examples drawn uniformly from `data`, each with
    /// `t ~ U(0, 1)` and standard-normal noise.
    pub fn draw(data: &Dataset, size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() || size == 0 {
            return Err(Error::config("cannot draw a batch from an empty dataset"));
        }
        let mut r = rng::named(seed, "batch", 0);
        let items = (0..size)
            .map(|_| {
                let i = r.gen_range(0..data.len());
                let x = data.samples[i].clone();
                let eps = gaussian(x.shape(), &mut r);
                BatchItem {
                    class: data.labels[i],
                    t: r.gen_range(0.0..1.0),
                    x,
                    eps,
                }
            })
            .collect();
        Ok(Batch { items, seed })
    }
}

/// Plain SGD with optional momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }
}

/// Mean squared velocity error over a batch, and its parameter gradients.
pub fn batch_loss(model: &ToyModel, batch: &Batch, n: usize) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.items.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let mut total = None;
    for item in &batch.items {
        let (x_t, v) = interpolate(&item.x, &item.eps, item.t)?;
        let xv = tape.constant(x_t);
        let (pred, _) = model_forward_on(&mut tape, &p, &model.cfg, xv, item.t, item.class, n)?;
        let target = tape.constant(v);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let l = tape.mean(sq)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / batch.items.len() as f64)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    let g = p
        .iter()
        .map(|(k, &v)| (k.clone(), grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))))
        .collect();
    Ok((value, g))
}

/// Loss without gradients.
pub fn eval_loss(model: &ToyModel, batch: &Batch, n: usize) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = model.bind(&mut tape);
    let mut sum = 0.0;
    for item in &batch.items {
        let (x_t, v) = interpolate(&item.x, &item.eps, item.t)?;
        let xv = tape.constant(x_t);
        let (pred, _) = model_forward_on(&mut tape, &p, &model.cfg, xv, item.t, item.class, n)?;
        let diff = tape.value(pred).zip_map(&v, |a, b| (a - b) * (a - b))?;
        sum += diff.mean();
    }
    Ok(sum / batch.items.len() as f64)
}

/// One optimizer step on `batch` using the model's default mediator count.
/// Returns the pre-update loss.
pub fn train_step(model: &mut ToyModel, batch: &Batch, opt: &mut Sgd, step: usize) -> Result<f64> {
    let n = model.cfg.mediators;
    let (loss, grads) = batch_loss(model, batch, n).map_err(|e| e.context(format!("step {step}, batch seed {}", batch.seed)))?;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss at step {step}, batch seed {}", batch.seed)));
    }
    for (name, g) in grads {
        let p = model.params.get_mut(&name).expect("gradient for a bound parameter");
        let v = opt
            .velocity
            .entry(name)
            .or_insert_with(|| Tensor::zeros(g.shape()));
        *v = v.zip_map(&g, |a, b| opt.momentum * a + b)?;
        *p = p.zip_map(v, |a, b| a - opt.lr * b)?;
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Size of the held-out batch used for the before/after loss.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            eval_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub eval_initial: f64,
    pub eval_final: f64,
}

/// Runs `cfg.steps` SGD steps on fresh batches; batch `s` is drawn from
/// a stream derived from `(seed, s)`.
pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let eval = Batch::draw(data, cfg.eval_batch.max(1), rng::derive_u64(seed, "eval", 0))?;
    let n = model.cfg.mediators;
    let eval_initial = eval_loss(model, &eval, n)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let batch = Batch::draw(data, cfg.batch_size, rng::derive_u64(seed, "train", s as u64))?;
        losses.push(train_step(model, &batch, &mut opt, s)?);
    }
    let eval_final = eval_loss(model, &eval, n)?;
    Ok(TrainReport {
        losses,
        eval_initial,
        eval_final,
    })
}

/// `step,loss`.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in losses.iter().enumerate() {
        out.push_str(&format!("{s},{l}\n"));
    }
    out
}
