use crate::config::square_side;
use crate::{write_atomic, write_resolved, CliError, CliResult, RunConfig};
use mtat_core::attention::{
    mediator_attention, multi_head_attention, AttentionConfig, MediatorConfig, MediatorParams, MultiHeadParams,
};
use mtat_core::diffusion::gaussian;
use mtat_core::rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    /// `vanilla`, `mediator`, or `mediator-full` for the `n = N` run.
    pub kind: &'static str,
    pub tokens: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mediators: Option<usize>,
    pub interaction_macs: u64,
    pub total_macs: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchFit {
    pub kind: &'static str,
    pub points: usize,
    pub mac_exponent: f64,
    pub wall_exponent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fits: Vec<BenchFit>,
}

impl BenchReport {
    /// `kind,tokens,hidden,heads,mediators,interaction_macs,total_macs,wall_seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,tokens,hidden,heads,mediators,interaction_macs,total_macs,wall_seconds\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.kind,
                r.tokens,
                r.hidden,
                r.heads,
                r.mediators.map_or(String::new(), |n| n.to_string()),
                r.interaction_macs,
                r.total_macs,
                r.wall_seconds
            )
            .unwrap();
        }
        out
    }

    /// `kind,points,mac_exponent,wall_exponent`.
    pub fn fit_csv(&self) -> String {
        let mut out = String::from("kind,points,mac_exponent,wall_exponent\n");
        for f in &self.fits {
            writeln!(out, "{},{},{},{}", f.kind, f.points, f.mac_exponent, f.wall_exponent).unwrap();
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> mtat_core::Result<T>) -> mtat_core::Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let v = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(v);
    }
    Ok((last.expect("at least one run"), best))
}

pub fn cmd_bench(cfg: &RunConfig) -> CliResult<BenchReport> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let b = &cfg.bench;
    let mut r = rng::named(cfg.seed, "bench", 0);
    let vanilla = MultiHeadParams::random(b.hidden, &mut r);
    let mediator = MediatorParams::random(b.hidden, &mut r);
    let mut rows = Vec::new();
    let mut run = |kind, tokens: usize, n: Option<usize>| -> CliResult<()> {
        let side = square_side(tokens).ok_or_else(|| CliError::Config(format!("{tokens} is not a square")))?;
        let acfg = AttentionConfig::new((side, side), b.hidden, b.heads)?;
        let z = gaussian(&[tokens, b.hidden], &mut rng::named(cfg.seed, "bench-input", tokens as u64));
        let (flops, wall) = match n {
            None => timed(b.repeats, || multi_head_attention(&z, &vanilla, &acfg).map(|o| o.flops))?,
            Some(n) => {
                let m = MediatorConfig::for_count(n, acfg.grid)?;
                timed(b.repeats, || mediator_attention(&z, &mediator, &acfg, &m).map(|o| o.flops))?
            }
        };
        rows.push(BenchRow {
            kind,
            tokens,
            hidden: b.hidden,
            heads: b.heads,
            mediators: n,
            interaction_macs: flops.interaction(),
            total_macs: flops.total_macs(),
            wall_seconds: wall,
        });
        Ok(())
    };
    for &n_tok in &b.sizes {
        run("vanilla", n_tok, None)?;
        run("mediator", n_tok, Some(b.mediators))?;
    }
    if b.degenerate {
        if let Some(&smallest) = b.sizes.iter().min() {
            run("mediator-full", smallest, Some(smallest))?;
        }
    }
    let fits = ["vanilla", "mediator"]
        .into_iter()
        .map(|kind| {
            let sel: Vec<&BenchRow> = rows.iter().filter(|r| r.kind == kind).collect();
            let xs: Vec<f64> = sel.iter().map(|r| r.tokens as f64).collect();
            let macs: Vec<f64> = sel.iter().map(|r| r.interaction_macs as f64).collect();
            let wall: Vec<f64> = sel.iter().map(|r| r.wall_seconds.max(1e-9)).collect();
            let (mac_exponent, wall_exponent) = if sel.len() >= 2 {
                (fit_exponent(&xs, &macs), fit_exponent(&xs, &wall))
            } else {
                (f64::NAN, f64::NAN)
            };
            BenchFit {
                kind,
                points: sel.len(),
                mac_exponent,
                wall_exponent,
            }
        })
        .collect();
    let report = BenchReport { rows, fits };
    write_atomic(&cfg.out.join("bench.csv"), report.to_csv().as_bytes())?;
    write_atomic(&cfg.out.join("bench_fit.csv"), report.fit_csv().as_bytes())?;
    Ok(report)
}
