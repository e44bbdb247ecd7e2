use super::model::{gaussian, model_forward, ToyModel};
use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::redundancy::{trace_over_steps, PairSampling, RedundancyTrace, TraceMeta};
use crate::rng::{self, Stream};
use crate::scheduler::{LatentTrace, MediatorSchedule, ScheduleRunner};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Anything that predicts a velocity for tokens `x` at time `t`.
pub trait VelocityModel: Sync {
    /// `[N×channels]` shape of a latent.
    fn latent_shape(&self) -> [usize; 2];

    /// Count used when no schedule is given.
    fn default_mediators(&self) -> usize;

    fn velocity(&self, x: &Tensor, t: f64, class: usize, n: usize, capture: bool) -> Result<VelocityOutput>;
}

#[derive(Clone, Debug)]
pub struct VelocityOutput {
    pub v: Tensor,
    pub flops: FlopsReport,
    pub maps: Option<Vec<AttentionMaps>>,
}

impl VelocityModel for ToyModel {
    fn latent_shape(&self) -> [usize; 2] {
        [self.cfg.tokens(), self.cfg.channels]
    }

    fn default_mediators(&self) -> usize {
        self.cfg.mediators
    }

    fn velocity(&self, x: &Tensor, t: f64, class: usize, n: usize, capture: bool) -> Result<VelocityOutput> {
        let out = model_forward(self, x, t, class, n, capture)?;
        Ok(VelocityOutput {
            v: out.velocity,
            flops: out.flops,
            maps: out.maps,
        })
    }
}

/// Separately trained weights per mediator count; the count selects the
/// checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointEnsemble {
    pub models: BTreeMap<usize, ToyModel>,
}

impl CheckpointEnsemble {
    pub fn new(models: BTreeMap<usize, ToyModel>) -> Result<Self> {
        let first = models
            .values()
            .next()
            .ok_or_else(|| Error::config("ensemble needs at least one checkpoint"))?;
        let shape = first.latent_shape();
        if models.values().any(|m| m.latent_shape() != shape) {
            return Err(Error::config("ensemble checkpoints disagree on latent shape"));
        }
        Ok(CheckpointEnsemble { models })
    }
}

impl VelocityModel for CheckpointEnsemble {
    fn latent_shape(&self) -> [usize; 2] {
        self.models.values().next().unwrap().latent_shape()
    }

    fn default_mediators(&self) -> usize {
        *self.models.keys().next().unwrap()
    }

    fn velocity(&self, x: &Tensor, t: f64, class: usize, n: usize, capture: bool) -> Result<VelocityOutput> {
        let m = self
            .models
            .get(&n)
            .ok_or_else(|| Error::config(format!("no checkpoint for {n} mediators")))?;
        m.velocity(x, t, class, n, capture)
    }
}

/// Velocity from a closure, with no attention and no MACs.
pub struct FnVelocity<F> {
    pub shape: [usize; 2],
    pub f: F,
}

impl<F> VelocityModel for FnVelocity<F>
where
    F: Fn(&Tensor, f64, usize) -> Tensor + Sync,
{
    fn latent_shape(&self) -> [usize; 2] {
        self.shape
    }

    fn default_mediators(&self) -> usize {
        1
    }

    fn velocity(&self, x: &Tensor, t: f64, _class: usize, n: usize, _capture: bool) -> Result<VelocityOutput> {
        Ok(VelocityOutput {
            v: (self.f)(x, t, n),
            flops: FlopsReport::default(),
            maps: None,
        })
    }
}

/// Always predicts zero velocity.
pub fn zero_velocity(shape: [usize; 2]) -> FnVelocity<impl Fn(&Tensor, f64, usize) -> Tensor + Sync> {
    FnVelocity {
        shape,
        f: |x: &Tensor, _, _| Tensor::zeros(x.shape()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: Option<MediatorSchedule>,
    /// Keep every layer's attention maps at every step.
    #[serde(default)]
    pub capture_maps: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        SamplerConfig {
            steps,
            seed,
            schedule: None,
            capture_maps: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub sample: Tensor,
    /// `x` before the first step and after every step.
    pub trajectory: Vec<Tensor>,
    pub trace: LatentTrace,
    pub step_flops: Vec<FlopsReport>,
    /// Per step, per layer, when capture was requested.
    pub maps: Vec<Vec<AttentionMaps>>,
}

impl SampleOutput {
    pub fn total_flops(&self) -> FlopsReport {
        self.step_flops.iter().copied().sum()
    }

    pub fn avg_gflops(&self) -> f64 {
        self.total_flops().gflops() / self.step_flops.len().max(1) as f64
    }
}

/// Unit Gaussian noise for sample `index`.
pub fn initial_noise(shape: [usize; 2], seed: u64, index: u64) -> Tensor {
    gaussian(&shape, &mut rng::stream(seed, Stream::Sampling, index))
}

/// Euler integration from `t = 1` (noise) to `t = 0`: `x ← x − v/T`.
/// Mediator counts follow `cfg.schedule` (constant at the model's default
/// when absent); each step's change is fed to the schedule.
pub fn euler_sample_from<M: VelocityModel + ?Sized>(model: &M, cfg: &SamplerConfig, class: usize, x1: Tensor) -> Result<SampleOutput> {
    if cfg.steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if x1.shape() != model.latent_shape() {
        return Err(Error::dim(format!(
            "initial latent {:?} does not match model {:?}",
            x1.shape(),
            model.latent_shape()
        )));
    }
    let schedule = cfg
        .schedule
        .clone()
        .unwrap_or_else(|| MediatorSchedule::constant(model.default_mediators()));
    let mut runner = ScheduleRunner::new(schedule)?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = x1;
    let mut trajectory = vec![x.clone()];
    let mut step_flops = Vec::with_capacity(cfg.steps);
    let mut maps = Vec::new();
    for s in 0..cfg.steps {
        let t = 1.0 - s as f64 * dt;
        let n = runner.current();
        let out = model
            .velocity(&x, t, class, n, cfg.capture_maps)
            .map_err(|e| e.context(format!("sampler step {s}")))?;
        let next = x.zip_map(&out.v, |a, v| a - dt * v)?;
        if !next.is_finite() {
            return Err(Error::numeric(format!("non-finite latent at sampler step {s}")));
        }
        runner.observe(&x, &next, out.flops.total_macs())?;
        step_flops.push(out.flops);
        if let Some(m) = out.maps {
            maps.push(m);
        }
        trajectory.push(next.clone());
        x = next;
    }
    Ok(SampleOutput {
        sample: x,
        trajectory,
        trace: runner.finish(),
        step_flops,
        maps,
    })
}

/// [`euler_sample_from`] starting at the noise of sample `index`.
pub fn euler_sample<M: VelocityModel + ?Sized>(model: &M, cfg: &SamplerConfig, class: usize, index: u64) -> Result<SampleOutput> {
    euler_sample_from(model, cfg, class, initial_noise(model.latent_shape(), cfg.seed, index))
}

/// Runs the sampler once per entry of `classes`, capturing maps, and
/// reduces them to a (layer × step) redundancy trace. Samples are processed
/// one at a time so only one trajectory's maps are held in memory.
pub fn capture_redundancy<M: VelocityModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    classes: &[usize],
    meta: TraceMeta,
    sampling: Option<PairSampling>,
) -> Result<RedundancyTrace> {
    let cfg = SamplerConfig {
        capture_maps: true,
        ..cfg.clone()
    };
    let mut err = None;
    let runs = classes.iter().enumerate().map_while(|(i, &c)| match euler_sample(model, &cfg, c, i as u64) {
        Ok(out) if out.maps.is_empty() => {
            err = Some(Error::usage("model exposes no attention maps"));
            None
        }
        Ok(out) => Some(out.maps),
        Err(e) => {
            err = Some(e);
            None
        }
    });
    let trace = trace_over_steps(runs, meta, sampling);
    match err {
        Some(e) => Err(e),
        None => trace,
    }
}
