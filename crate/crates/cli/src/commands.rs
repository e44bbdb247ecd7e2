use crate::{write_atomic, write_resolved, CliError, CliResult, RunConfig};
use mtat_core::diffusion::{
    capture_redundancy, euler_sample, fid_proxy, loss_csv, synth_dataset, train, SamplerConfig, ToyModel,
    TrainReport,
};
use mtat_core::flops::FlopsReport;
use mtat_core::redundancy::{PairSampling, RedundancyTrace, TraceMeta};
use mtat_core::rng;
use mtat_core::scheduler::{sweep_csv, sweep_thresholds, LatentTrace, MediatorSchedule, SweepGrid, SweepResult};
use mtat_core::tensor::{write_tensor, write_tensor_json, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::fs::File;
use std::io::BufReader;

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub checksum: String,
    pub parameters: usize,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let data = synth_dataset(cfg.seed, &cfg.dataset_spec(cfg.data.size))?;
    let mut model = ToyModel::init(cfg.model.clone(), cfg.seed)?;
    let report = train(&mut model, &data, &cfg.train, cfg.seed)?;
    let mut ckpt = Vec::new();
    model.save(&mut ckpt)?;
    write_atomic(&cfg.out.join("model.ckpt"), &ckpt)?;
    write_atomic(&cfg.out.join("loss.csv"), loss_csv(&report.losses).as_bytes())?;
    let summary = TrainSummary {
        report,
        checksum: model.checksum(),
        parameters: model.parameter_count(),
    };
    write_atomic(&cfg.out.join("train.json"), &json_bytes(&summary))?;
    Ok(summary)
}

/// The checkpoint named by the config, or the seeded initialization. The
/// checkpoint's architecture must match `cfg.model`; its default mediator
/// count is taken from the config.
pub fn load_model(cfg: &RunConfig) -> CliResult<ToyModel> {
    let Some(path) = &cfg.checkpoint else {
        return Ok(ToyModel::init(cfg.model.clone(), cfg.seed)?);
    };
    let f = File::open(path).map_err(|e| CliError::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut model = ToyModel::load(BufReader::new(f)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (a, b) = (&model.cfg, &cfg.model);
    let same = a.hidden == b.hidden
        && a.heads == b.heads
        && a.grid == b.grid
        && a.channels == b.channels
        && a.temb_dim == b.temb_dim
        && a.mlp_ratio == b.mlp_ratio
        && a.classes == b.classes
        && a.attention == b.attention;
    if !same {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different architecture: {}",
            path.display(),
            serde_json::to_string(a).unwrap_or_default()
        )));
    }
    model.cfg.mediators = b.mediators;
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct SampleSummary {
    pub samples: Vec<Tensor>,
    pub traces: Vec<LatentTrace>,
    pub total: FlopsReport,
    pub avg_gflops: f64,
}

pub fn cmd_sample(cfg: &RunConfig) -> CliResult<SampleSummary> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let model = load_model(cfg)?;
    let scfg = SamplerConfig {
        schedule: cfg.sampler.schedule.clone(),
        ..SamplerConfig::new(cfg.sampler.steps, cfg.seed)
    };
    let classes = cfg.model.classes;
    let outs = (0..cfg.sampler.samples)
        .into_par_iter()
        .map(|i| euler_sample(&model, &scfg, i % classes, i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_sample = Vec::new();
    for (i, o) in outs.iter().enumerate() {
        let dir = cfg.out.join(format!("sample_{i:03}"));
        write_atomic(&dir.join("trace.csv"), o.trace.to_csv().as_bytes())?;
        let mut buf = Vec::new();
        write_tensor(&mut buf, &o.sample)?;
        write_atomic(&dir.join("sample.mtat"), &buf)?;
        per_sample.push(json!({
            "class": i % classes,
            "counts": o.trace.selected,
            "gflops": o.total_flops().gflops(),
        }));
    }
    let total: FlopsReport = outs.iter().map(|o| o.total_flops()).sum();
    let steps = outs.iter().map(|o| o.step_flops.len()).sum::<usize>();
    let avg_gflops = total.gflops() / steps.max(1) as f64;
    let report = json!({
        "samples": outs.len(),
        "steps_per_sample": cfg.sampler.steps,
        "total": total,
        "avg_gflops_per_step": avg_gflops,
        "per_sample": per_sample,
    });
    write_atomic(&cfg.out.join("flops.json"), &json_bytes(&report))?;
    Ok(SampleSummary {
        samples: outs.iter().map(|o| o.sample.clone()).collect(),
        traces: outs.into_iter().map(|o| o.trace).collect(),
        total,
        avg_gflops,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RedundancySummary {
    pub trace: RedundancyTrace,
    pub mean_by_step: Vec<f64>,
    pub trend_slope: f64,
    /// Scores rise along the trajectory, i.e. redundancy falls.
    pub scores_rise: bool,
}

pub fn cmd_redundancy(cfg: &RunConfig) -> CliResult<RedundancySummary> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let model = load_model(cfg)?;
    let scfg = SamplerConfig {
        schedule: cfg.sampler.schedule.clone(),
        ..SamplerConfig::new(cfg.sampler.steps, cfg.seed)
    };
    let classes: Vec<usize> = (0..cfg.redundancy.samples).map(|i| i % cfg.model.classes).collect();
    let meta = TraceMeta {
        model_id: model.checksum()[..16].to_string(),
        heads: cfg.model.heads,
    };
    let sampling = cfg.redundancy.pair_cap.map(|cap| PairSampling {
        cap,
        seed: rng::derive_u64(cfg.seed, "pairs", 0),
    });
    let trace = capture_redundancy(&model, &scfg, &classes, meta, sampling)?;
    write_atomic(&cfg.out.join("redundancy.csv"), trace.to_csv().as_bytes())?;
    if cfg.redundancy.dump_maps && !classes.is_empty() {
        let out = euler_sample(&model, &SamplerConfig { capture_maps: true, ..scfg }, classes[0], 0)?;
        for (t, layers) in out.maps.iter().enumerate() {
            for (l, maps) in layers.iter().enumerate() {
                for (h, m) in maps.effective()?.iter().enumerate() {
                    let p = cfg.out.join("maps").join(format!("step{t}_layer{l}_head{h}.json"));
                    write_atomic(&p, write_tensor_json(m).as_bytes())?;
                }
            }
        }
    }
    let trend_slope = trace.trend_slope();
    let summary = RedundancySummary {
        mean_by_step: trace.mean_by_step(),
        trend_slope,
        scores_rise: trend_slope > 0.0,
        trace,
    };
    write_atomic(&cfg.out.join("redundancy_summary.json"), &json_bytes(&summary))?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub results: Vec<SweepResult>,
    /// Points whose evaluation failed, with the reason.
    pub failures: Vec<(usize, String)>,
}

/// Evaluates every threshold pair on the same noise: each point generates
/// `sweep.samples` samples, scored by the FID proxy against a held-out
/// synthetic set. A failing point is reported and kept with NaN values.
pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<SweepSummary> {
    cfg.validate()?;
    write_resolved(cfg)?;
    let model = load_model(cfg)?;
    let counts = cfg.sweep.counts;
    for n in counts {
        model.cfg.mediator_config(n)?;
    }
    let grid = SweepGrid {
        counts,
        metrics: cfg.sweep.metrics.clone(),
        rho_max_tenths: cfg.sweep.rho_max_tenths,
    };
    let points = grid.points();
    let reference = synth_dataset(
        rng::derive_u64(cfg.seed, "reference", 0),
        &cfg.dataset_spec(cfg.data.reference_size),
    )?;
    let classes = cfg.model.classes;
    let eval_point = |s: &MediatorSchedule| -> mtat_core::Result<(f64, f64)> {
        let scfg = SamplerConfig {
            schedule: Some(s.clone()),
            ..SamplerConfig::new(cfg.sampler.steps, cfg.seed)
        };
        let mut generated = Vec::with_capacity(cfg.sweep.samples);
        let mut gflops = 0.0;
        for i in 0..cfg.sweep.samples {
            let out = euler_sample(&model, &scfg, i % classes, i as u64)?;
            gflops += out.avg_gflops();
            generated.push(out.sample);
        }
        let quality = fid_proxy(&generated, &reference.samples, cfg.seed)?;
        Ok((gflops / cfg.sweep.samples.max(1) as f64, quality))
    };
    let failures = std::sync::Mutex::new(Vec::new());
    let results = sweep_thresholds(&points, counts, cfg.seed, |s, _rng| match eval_point(s) {
        Ok(v) => Ok(v),
        Err(e) => {
            failures.lock().unwrap().push((s.to_json(), e.to_string()));
            Ok((f64::NAN, f64::NAN))
        }
    })?;
    let mut failed = Vec::new();
    for (sched, msg) in failures.into_inner().unwrap() {
        let id = results
            .iter()
            .find(|r| r.point.schedule(counts).map(|p| p.to_json()).ok().as_deref() == Some(sched.as_str()))
            .map_or(usize::MAX, |r| r.point.id);
        eprintln!("sweep: point {id} failed: {msg}");
        failed.push((id, msg));
    }
    failed.sort();
    write_atomic(&cfg.out.join("sweep.csv"), sweep_csv(&results).as_bytes())?;
    let envelope: Vec<SweepResult> = results.iter().filter(|r| r.on_envelope).cloned().collect();
    write_atomic(&cfg.out.join("envelope.csv"), sweep_csv(&envelope).as_bytes())?;
    Ok(SweepSummary {
        results,
        failures: failed,
    })
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("summary serializes");
    s.push('\n');
    s.into_bytes()
}
