use super::{DistanceMetric, MediatorSchedule, ScheduleLevel};
use crate::error::Result;
use crate::rng::{self, Stream};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

/// One grid point. Thresholds are held in integer tenths so the grid is
/// exact. `rho1 = None` is the variant with no second threshold (`n1 → n2`
/// only); `rho1 == rho0` switches straight from `n1` to `n3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SweepPoint {
    pub id: usize,
    pub rho0_tenths: u32,
    pub rho1_tenths: Option<u32>,
    pub metric: DistanceMetric,
}

fn tenths(t: u32) -> f64 {
    f64::from(t) / 10.0
}

impl SweepPoint {
    pub fn rho0(&self) -> f64 {
        tenths(self.rho0_tenths)
    }

    pub fn rho1(&self) -> Option<f64> {
        self.rho1_tenths.map(tenths)
    }

    /// The schedule over counts `(n1, n2, n3)`.
    pub fn schedule(&self, counts: [usize; 3]) -> Result<MediatorSchedule> {
        let [n1, n2, n3] = counts;
        let level = |t, n| ScheduleLevel { rho: tenths(t), n };
        let levels = match self.rho1_tenths {
            None => vec![level(self.rho0_tenths, n2)],
            Some(r1) if r1 == self.rho0_tenths => vec![level(r1, n3)],
            Some(r1) => vec![level(self.rho0_tenths, n2), level(r1, n3)],
        };
        MediatorSchedule::new(n1, levels, self.metric)
    }

    pub fn label(&self) -> String {
        match self.rho1() {
            Some(r1) => format!("rho0={:.1} rho1={r1:.1} {}", self.rho0(), self.metric.name()),
            None => format!("rho0={:.1} rho1=- {}", self.rho0(), self.metric.name()),
        }
    }
}

/// `ρ0 ∈ {1.0, 0.9, …, 0.0}`, `ρ1 ∈ {ρ0, ρ0 − 0.1, …, 0.0}` plus one
/// no-second-threshold point per `ρ0`, for each metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepGrid {
    pub counts: [usize; 3],
    pub metrics: Vec<DistanceMetric>,
    /// Largest `ρ0`, in tenths.
    pub rho_max_tenths: u32,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            counts: [4, 16, 64],
            metrics: vec![DistanceMetric::L1],
            rho_max_tenths: 10,
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &metric in &self.metrics {
            for r0 in (0..=self.rho_max_tenths).rev() {
                let mut push = |rho1_tenths| {
                    out.push(SweepPoint {
                        id: out.len(),
                        rho0_tenths: r0,
                        rho1_tenths,
                        metric,
                    })
                };
                for r1 in (0..=r0).rev() {
                    push(Some(r1));
                }
                push(None);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub point: SweepPoint,
    pub avg_gflops: f64,
    pub quality: f64,
    pub on_envelope: bool,
}

/// Evaluates every point with `eval(schedule, rng)`, where each point's RNG
/// is derived from `(base_seed, point id)`. Parallel and serial execution
/// produce identical results. Envelope membership is computed per metric.
pub fn sweep_thresholds<F>(points: &[SweepPoint], counts: [usize; 3], base_seed: u64, eval: F) -> Result<Vec<SweepResult>>
where
    F: Fn(&MediatorSchedule, &mut ChaCha8Rng) -> Result<(f64, f64)> + Sync,
{
    let mut results = points
        .par_iter()
        .map(|p| {
            let ctx = || format!("grid point {} ({})", p.id, p.label());
            let schedule = p.schedule(counts).map_err(|e| e.context(ctx()))?;
            let mut r = rng::stream(base_seed, Stream::Sweep, p.id as u64);
            let (avg_gflops, quality) = eval(&schedule, &mut r).map_err(|e| e.context(ctx()))?;
            Ok(SweepResult {
                point: *p,
                avg_gflops,
                quality,
                on_envelope: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut metrics: Vec<DistanceMetric> = results.iter().map(|r| r.point.metric).collect();
    metrics.sort_by_key(|m| m.name());
    metrics.dedup();
    for m in metrics {
        let pts: Vec<EnvelopePoint> = results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.point.metric == m)
            .map(|(i, r)| EnvelopePoint {
                cost: r.avg_gflops,
                score: r.quality,
                id: i,
            })
            .collect();
        for e in pareto_envelope(&pts) {
            results[e.id].on_envelope = true;
        }
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvelopePoint {
    pub cost: f64,
    pub score: f64,
    pub id: usize,
}

/// Non-dominated subset (lower cost and lower score are better), sorted by
/// cost. Of exact duplicates the lowest id is kept; non-finite points are
/// ignored.
pub fn pareto_envelope(points: &[EnvelopePoint]) -> Vec<EnvelopePoint> {
    let mut sorted: Vec<EnvelopePoint> = points
        .iter()
        .copied()
        .filter(|p| p.cost.is_finite() && p.score.is_finite())
        .collect();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.score.total_cmp(&b.score))
            .then(a.id.cmp(&b.id))
    });
    let mut best = f64::INFINITY;
    sorted
        .into_iter()
        .filter(|p| {
            let keep = p.score < best;
            if keep {
                best = p.score;
            }
            keep
        })
        .collect()
}

/// `rho0,rho1,metric,avg_gflops,quality,on_envelope`; `rho1` is empty for
/// points without a second threshold.
pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut out = String::from("rho0,rho1,metric,avg_gflops,quality,on_envelope\n");
    for r in results {
        let rho1 = r.point.rho1().map_or(String::new(), |v| format!("{v:.1}"));
        writeln!(
            out,
            "{:.1},{rho1},{},{},{},{}",
            r.point.rho0(),
            r.point.metric.name(),
            r.avg_gflops,
            r.quality,
            u8::from(r.on_envelope)
        )
        .unwrap();
    }
    out
}

impl From<&SweepResult> for EnvelopePoint {
    fn from(r: &SweepResult) -> Self {
        EnvelopePoint {
            cost: r.avg_gflops,
            score: r.quality,
            id: r.point.id,
        }
    }
}
