use mtat_cli::RunConfig;
use mtat_core::diffusion::{FnVelocity, ToyModel, ToyModelConfig};
use mtat_core::redundancy::js_slice;
use mtat_core::scheduler::{
    run_scheduled_sampling, sweep_thresholds, DistanceMetric, MediatorSchedule, ScheduleLevel, SweepGrid,
};
use mtat_core::tensor::{read_tensor, read_tensor_json, Tensor};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn micro_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        model: ToyModelConfig::micro(),
        ..RunConfig::default()
    };
    cfg.data.size = 32;
    cfg.data.reference_size = 32;
    cfg.train.steps = 20;
    cfg.sampler.steps = 4;
    cfg.sampler.samples = 2;
    cfg.sweep.counts = [1, 4, 16];
    cfg.sweep.samples = 4;
    cfg.flops.counts = vec![1, 4, 16];
    cfg.bench.sizes = vec![16, 64, 256];
    cfg.bench.hidden = 8;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn mtat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtat")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run(cmd: &str, dir: &Path, cfg: &RunConfig, extra: &[&str]) -> Output {
    let c = write_config(dir, cfg);
    let mut args = vec![cmd, "--config", c.to_str().unwrap()];
    args.extend_from_slice(extra);
    mtat(&args)
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn csv_column(text: &str, col: &str) -> Vec<String> {
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == col).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

fn train_micro(tmp: &TempDir, steps: usize) -> (RunConfig, PathBuf) {
    let out = tmp.path().join("train");
    let mut cfg = micro_config(&out);
    cfg.train.steps = steps;
    ok(&run("train", tmp.path(), &cfg, &[]));
    (cfg, out.join("model.ckpt"))
}

#[test]
fn train_with_zero_steps_writes_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = train_micro(&tmp, 0);
    let saved = ToyModel::load(fs::File::open(ckpt).unwrap()).unwrap();
    assert_eq!(saved, ToyModel::init(cfg.model.clone(), cfg.seed).unwrap());
    assert_eq!(read(cfg.out.join("loss.csv")), "step,loss\n");
    let resolved: RunConfig = serde_json::from_str(&read(cfg.out.join("config.resolved.json"))).unwrap();
    assert_eq!(resolved, cfg);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(&tmp.path().join("a"));
    cfg.train.steps = 200;
    ok(&run("train", tmp.path(), &cfg, &[]));
    ok(&run("train", tmp.path(), &cfg, &["--out", tmp.path().join("b").to_str().unwrap()]));
    let a = read(tmp.path().join("a/loss.csv"));
    assert_eq!(a, read(tmp.path().join("b/loss.csv")));
    assert_eq!(a.lines().count(), 201);
    let summary: serde_json::Value = serde_json::from_str(&read(tmp.path().join("a/train.json"))).unwrap();
    let (first, last) = (
        summary["report"]["eval_initial"].as_f64().unwrap(),
        summary["report"]["eval_final"].as_f64().unwrap(),
    );
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn sampling_without_schedule_keeps_count_constant() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = train_micro(&tmp, 5);
    let out = tmp.path().join("s");
    let args = ["--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()];
    ok(&run("sample", tmp.path(), &cfg, &args));
    for i in 0..2 {
        let trace = read(out.join(format!("sample_{i:03}/trace.csv")));
        assert!(trace.starts_with("step,delta,n_t,step_macs\n"));
        let n = csv_column(&trace, "n_t");
        assert_eq!(n.len(), 4);
        assert!(n.iter().all(|v| v == "4"));
        let x = read_tensor(fs::File::open(out.join(format!("sample_{i:03}/sample.mtat"))).unwrap()).unwrap();
        assert!(x.is_finite());
        assert_eq!(x.shape(), &[16, 1]);
    }
    let flops: serde_json::Value = serde_json::from_str(&read(out.join("flops.json"))).unwrap();
    assert_eq!(flops["samples"], 2);
    assert_eq!(flops["total"]["total_macs"], 2 * 4 * cfg.model.step_flops(4).unwrap().total_macs());
}

#[test]
fn different_seeds_give_different_samples_and_the_same_echo() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = train_micro(&tmp, 5);
    let sample = |seed: &str, dir: &str| {
        let out = tmp.path().join(dir);
        let args = ["--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seed];
        ok(&run("sample", tmp.path(), &cfg, &args));
        let x = read_tensor(fs::File::open(out.join("sample_000/sample.mtat")).unwrap()).unwrap();
        let mut echo: RunConfig = serde_json::from_str(&read(out.join("config.resolved.json"))).unwrap();
        echo.seed = 0;
        echo.out = PathBuf::new();
        (x, echo)
    };
    let (a, ea) = sample("1", "s1");
    let (b, eb) = sample("2", "s2");
    assert_ne!(a, b);
    assert_eq!(ea, eb);
}

#[test]
fn resolved_config_reproduces_outputs() {
    let tmp = TempDir::new().unwrap();
    let (cfg, ckpt) = train_micro(&tmp, 5);
    let first = tmp.path().join("first");
    let args = [
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--schedule",
        r#"{"n1": 1, "levels": [{"rho": 0.9, "n": 16}]}"#,
    ];
    ok(&run("sample", tmp.path(), &cfg, &args));
    let mut resolved: RunConfig = serde_json::from_str(&read(first.join("config.resolved.json"))).unwrap();
    resolved.out = tmp.path().join("second");
    let c = tmp.path().join("resolved.json");
    fs::write(&c, resolved.to_json()).unwrap();
    ok(&mtat(&["sample", "--config", c.to_str().unwrap()]));
    for f in ["sample_000/trace.csv", "sample_001/sample.mtat", "flops.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(resolved.out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(&tmp.path().join("x"));
    let c = write_config(tmp.path(), &cfg);
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_mtat"))
            .args(["sweep", "--config", c.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("MTAT_THREADS", threads)
            .output()
            .unwrap();
        ok(&o);
        runs.push(read(out.join("sweep.csv")));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn scripted_stub_shows_the_breakpoint_in_the_trace() {
    let stub = FnVelocity {
        shape: [4, 1],
        f: |x: &Tensor, t: f64, _n: usize| Tensor::filled(x.shape(), if t > 0.55 { 1.0 } else { 0.25 }),
    };
    let sched = MediatorSchedule::new(4, vec![ScheduleLevel { rho: 0.5, n: 16 }], DistanceMetric::L1).unwrap();
    let (_, trace, _) = run_scheduled_sampling(&stub, &sched, 10, 0, 0, 0).unwrap();
    let csv = trace.to_csv();
    assert_eq!(
        csv_column(&csv, "n_t"),
        ["4", "4", "4", "4", "4", "4", "16", "16", "16", "16"]
    );
}

#[test]
fn redundancy_rows_bounds_and_pair_loop_cross_check() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = micro_config(&tmp.path().join("r"));
    cfg.model.attention = vec![mtat_core::diffusion::AttentionKind::Mediator];
    cfg.sampler.steps = 2;
    cfg.redundancy.samples = 1;
    cfg.redundancy.dump_maps = true;
    ok(&run("redundancy", tmp.path(), &cfg, &[]));
    let csv = read(cfg.out.join("redundancy.csv"));
    assert!(csv.starts_with("layer,step,score,samples,heads\n"));
    let scores: Vec<f64> = csv_column(&csv, "score").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| (0.0..=std::f64::consts::LN_2).contains(s)));

    let heads: Vec<Tensor> = (0..cfg.model.heads)
        .map(|h| read_tensor_json(&read(cfg.out.join(format!("maps/step1_layer0_head{h}.json")))).unwrap())
        .collect();
    let n = heads[0].rows();
    let mut total = 0.0;
    for a in &heads {
        for i in 0..n {
            for j in 0..n {
                if i < j {
                    total += js_slice(a.row(i), a.row(j));
                }
            }
        }
    }
    let oracle = 2.0 * total / (heads.len() * n * (n - 1)) as f64;
    assert!((oracle - scores[1]).abs() <= 1e-10, "{oracle} vs {}", scores[1]);
}

#[test]
fn sweep_writes_77_rows_and_a_flagged_envelope() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(&tmp.path().join("w"));
    ok(&run("sweep", tmp.path(), &cfg, &[]));
    let sweep = read(cfg.out.join("sweep.csv"));
    let envelope = read(cfg.out.join("envelope.csv"));
    assert_eq!(sweep.lines().count(), 78);
    assert!(sweep.starts_with("rho0,rho1,metric,avg_gflops,quality,on_envelope\n"));
    let flagged: Vec<&str> = sweep.lines().filter(|l| l.ends_with(",1")).collect();
    let env_rows: Vec<&str> = envelope.lines().skip(1).collect();
    assert!(!env_rows.is_empty());
    assert_eq!(flagged, env_rows);
}

#[test]
fn dominated_grid_has_a_single_envelope_row() {
    let g = SweepGrid::default();
    let pts = g.points();
    let best = MediatorSchedule::new(4, vec![ScheduleLevel { rho: 0.5, n: 16 }], DistanceMetric::L1).unwrap();
    let res = sweep_thresholds(&pts, g.counts, 0, |s, _| Ok(if *s == best { (1.0, 1.0) } else { (2.0, 2.0) })).unwrap();
    let on: Vec<_> = res.iter().filter(|r| r.on_envelope).collect();
    assert_eq!(on.len(), 1);
    assert_eq!(on[0].point.schedule(g.counts).unwrap(), best);
}

#[test]
fn flops_preset_prints_reference_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(&tmp.path().join("f"));
    let stdout = ok(&run("flops", tmp.path(), &cfg, &[]));
    assert!(stdout.contains("50331648"));
    assert!(stdout.contains("25165824"));
    assert!(stdout.contains("reported reference (not reconstructed)"));
    assert!(stdout.contains("6.06") && stdout.contains("5.78"));
    let csv = read(cfg.out.join("flops.csv"));
    assert!(csv.contains("preset,vanilla,,256,384,6,12,50331648,"));
    assert!(csv.contains("preset,mediator,64,256,384,6,12,25165824,"));
}

#[test]
fn bench_fits_exact_mac_exponents() {
    let tmp = TempDir::new().unwrap();
    let cfg = micro_config(&tmp.path().join("b"));
    ok(&run("bench", tmp.path(), &cfg, &[]));
    let fit = read(cfg.out.join("bench_fit.csv"));
    let exps: Vec<f64> = csv_column(&fit, "mac_exponent").iter().map(|s| s.parse().unwrap()).collect();
    assert!((exps[0] - 2.0).abs() <= 1e-9 && (exps[1] - 1.0).abs() <= 1e-9, "{exps:?}");
    let bench = read(cfg.out.join("bench.csv"));
    let full = bench.lines().find(|l| l.starts_with("mediator-full,")).unwrap();
    let f: Vec<&str> = full.split(',').collect();
    assert_eq!(f[5].parse::<u64>().unwrap(), 4 * 16 * 16 * 8);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\n  \"model\": {\"hidden\": \"wide\"}\n}").unwrap();
    let o = mtat(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.hidden") && err.contains("line 2"), "{err}");

    let o = mtat(&["train", "--config", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(mtat(&["train", "--bogus"]).status.code(), Some(2));

    let mut cfg = micro_config(&tmp.path().join("n"));
    cfg.train.lr = 1e300;
    assert_eq!(run("train", tmp.path(), &cfg, &[]).status.code(), Some(3));

    let (_, ckpt) = train_micro(&tmp, 0);
    let mut other = micro_config(&tmp.path().join("o"));
    other.model.hidden = 12;
    let o = run("sample", tmp.path(), &other, &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let mut cfg = micro_config(&tmp.path().join("s"));
    cfg.sampler.steps = 1;
    let o = run("sample", tmp.path(), &cfg, &["--schedule", r#"{"n1": 4, "levels": [{"rho": 0.5, "n": 2}]}"#]);
    assert_eq!(o.status.code(), Some(2));
}
