//! Step-wise mediator-count schedules driven by how much the latent moves
//! between sampler steps, plus the threshold sweep used to tune them.
//!
//! Sampling starts with `n1` mediators. After every step the change
//! `Δ_t = dist(x_t, x_{t+1})` is compared against fractions `ρ_i` of the first
//! step's change `Δ_0`; clearing `ρ_i` moves the next step to level `i + 1`.

mod sweep;

pub use sweep::{
    pareto_envelope, sweep_csv, sweep_thresholds, EnvelopePoint, SweepGrid, SweepPoint, SweepResult,
};

use crate::diffusion::{euler_sample, SamplerConfig, VelocityModel};
use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    L1,
    L2,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
        }
    }
}

/// `L1`: mean `|a − b|`. `L2`: `sqrt(mean (a − b)²)`.
pub fn latent_distance(a: &Tensor, b: &Tensor, metric: DistanceMetric) -> Result<f64> {
    a.expect_same_shape(b, "latent_distance")?;
    let n = a.numel().max(1) as f64;
    let it = a.data().iter().zip(b.data());
    Ok(match metric {
        DistanceMetric::L1 => it.map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        DistanceMetric::L2 => (it.map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLevel {
    pub rho: f64,
    pub n: usize,
}

/// `n1` followed by levels with strictly decreasing `ρ` and non-decreasing
/// counts. JSON: `{"n1": 4, "levels": [{"rho": 0.6, "n": 16}], "metric": "l1"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MediatorSchedule {
    pub n1: usize,
    #[serde(default)]
    pub levels: Vec<ScheduleLevel>,
    #[serde(default)]
    pub metric: DistanceMetric,
    /// Re-evaluate the level from scratch every step instead of latching.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pointwise: bool,
}

impl MediatorSchedule {
    pub fn new(n1: usize, levels: Vec<ScheduleLevel>, metric: DistanceMetric) -> Result<Self> {
        let s = MediatorSchedule {
            n1,
            levels,
            metric,
            pointwise: false,
        };
        s.validate()?;
        Ok(s)
    }

    /// A schedule that never switches.
    pub fn constant(n: usize) -> Self {
        MediatorSchedule {
            n1: n,
            levels: Vec::new(),
            metric: DistanceMetric::L1,
            pointwise: false,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sched: MediatorSchedule = serde_json::from_str(s)?;
        sched.validate()?;
        Ok(sched)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 {
            return Err(Error::config("schedule n1 must be at least 1"));
        }
        let mut prev_rho = f64::INFINITY;
        let mut prev_n = self.n1;
        for (i, l) in self.levels.iter().enumerate() {
            if !(0.0..=1.0).contains(&l.rho) {
                return Err(Error::config(format!("level {i}: rho {} outside [0, 1]", l.rho)));
            }
            if l.rho >= prev_rho {
                return Err(Error::config(format!(
                    "level {i}: thresholds must strictly decrease ({} after {prev_rho})",
                    l.rho
                )));
            }
            if l.n < prev_n {
                return Err(Error::config(format!(
                    "level {i}: mediator counts must not decrease ({} after {prev_n})",
                    l.n
                )));
            }
            prev_rho = l.rho;
            prev_n = l.n;
        }
        Ok(())
    }

    /// Mediator count at level `level` (0 = `n1`).
    pub fn count(&self, level: usize) -> usize {
        if level == 0 {
            self.n1
        } else {
            self.levels[level - 1].n
        }
    }

    /// Every distinct mediator count, ascending.
    pub fn counts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = std::iter::once(self.n1).chain(self.levels.iter().map(|l| l.n)).collect();
        c.dedup();
        c
    }
}

/// The level a schedule has reached so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleState {
    pub level: usize,
}

/// Count for the step after one that moved the latent by `delta_t`.
///
/// Level `i + 1` is reached when `Δ_t/Δ_0 ≤ ρ_i`; several levels may be
/// cleared at once. In latching mode the level never decreases.
pub fn select_mediator_count(
    delta_t: f64,
    delta0: f64,
    state: &mut ScheduleState,
    schedule: &MediatorSchedule,
) -> Result<usize> {
    if delta0 == 0.0 {
        return Err(Error::DegenerateTrajectory);
    }
    if !(delta_t.is_finite() && delta0.is_finite()) || delta_t < 0.0 || delta0 < 0.0 {
        return Err(Error::Domain(format!(
            "latent differences must be finite and non-negative (Δ_t={delta_t}, Δ_0={delta0})"
        )));
    }
    let ratio = delta_t / delta0;
    let reached = schedule.levels.iter().take_while(|l| ratio <= l.rho).count();
    state.level = if schedule.pointwise {
        reached
    } else {
        state.level.max(reached)
    };
    Ok(schedule.count(state.level))
}

/// The single-threshold rule: `n1` while `Δ_t > ρ_0·Δ_0`, else `n2`.
pub fn two_threshold_count(delta_t: f64, delta0: f64, rho0: f64, n1: usize, n2: usize) -> Result<usize> {
    if delta0 == 0.0 {
        return Err(Error::DegenerateTrajectory);
    }
    Ok(if delta_t / delta0 > rho0 { n1 } else { n2 })
}

/// Per-step record of a scheduled sampling run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LatentTrace {
    /// `Δ_t` after step `t`.
    pub deltas: Vec<f64>,
    /// `Δ` of the first step, once known.
    pub delta0: Option<f64>,
    /// Mediator count used by step `t`.
    pub selected: Vec<usize>,
    /// Attention MACs spent by step `t`.
    pub step_macs: Vec<u64>,
}

impl LatentTrace {
    /// `step,delta,n_t,step_macs`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,delta,n_t,step_macs\n");
        for t in 0..self.selected.len() {
            let d = self.deltas.get(t).map_or(String::new(), |d| d.to_string());
            let m = self.step_macs.get(t).copied().unwrap_or(0);
            writeln!(out, "{t},{d},{},{m}", self.selected[t]).unwrap();
        }
        out
    }
}

/// Drives a schedule through a sampling loop: ask [`Self::current`] for the
/// count of the next step, then report the step's endpoints to
/// [`Self::observe`].
#[derive(Clone, Debug)]
pub struct ScheduleRunner {
    schedule: MediatorSchedule,
    state: ScheduleState,
    next: usize,
    trace: LatentTrace,
}

impl ScheduleRunner {
    pub fn new(schedule: MediatorSchedule) -> Result<Self> {
        schedule.validate()?;
        let next = schedule.n1;
        Ok(ScheduleRunner {
            schedule,
            state: ScheduleState::default(),
            next,
            trace: LatentTrace::default(),
        })
    }

    pub fn current(&self) -> usize {
        self.next
    }

    pub fn schedule(&self) -> &MediatorSchedule {
        &self.schedule
    }

    /// Records a finished step that used [`Self::current`] mediators and
    /// picks the count for the following step. A zero first-step change
    /// leaves every threshold meaningless, so the count then stays at `n1`.
    pub fn observe(&mut self, before: &Tensor, after: &Tensor, macs: u64) -> Result<()> {
        let d = latent_distance(after, before, self.schedule.metric)?;
        let step = self.trace.selected.len();
        if !d.is_finite() {
            return Err(Error::numeric(format!("latent difference at step {step} is not finite")));
        }
        self.trace.selected.push(self.next);
        self.trace.deltas.push(d);
        self.trace.step_macs.push(macs);
        let d0 = *self.trace.delta0.get_or_insert(d);
        match select_mediator_count(d, d0, &mut self.state, &self.schedule) {
            Ok(n) => self.next = n,
            Err(Error::DegenerateTrajectory) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    pub fn finish(self) -> LatentTrace {
        self.trace
    }
}

/// Samples with `schedule`, returning the sample, the per-step record and
/// the total attention MACs.
pub fn run_scheduled_sampling<M: VelocityModel + ?Sized>(
    model: &M,
    schedule: &MediatorSchedule,
    steps: usize,
    seed: u64,
    class: usize,
    index: u64,
) -> Result<(Tensor, LatentTrace, FlopsReport)> {
    let cfg = SamplerConfig {
        schedule: Some(schedule.clone()),
        ..SamplerConfig::new(steps, seed)
    };
    let out = euler_sample(model, &cfg, class, index)?;
    let total = out.total_flops();
    Ok((out.sample, out.trace, total))
}
