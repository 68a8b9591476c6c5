use std::fs;
use std::path::Path;
use std::process::Command;

use cldm_cli::commands::{self, Arm};
use cldm_cli::config::ExperimentConfig;
use cldm_core::metrics::Scope;

const SMALL: &str = "dataset.classes = 3
dataset.n_max = 40
dataset.rho = 0.2
dataset.modes_per_class = 2
schedule.steps = 40
model.d_hidden = 24
model.d_latent = 12
train.iterations = 120
train.warmup_iters = 10
train.batch_size = 16
train.checkpoint_every = 60
sample.ddim_steps = 8
sample.n_samples = 15
eval.per_class = 15
eval.reference_per_class = 20
eval.uncond_samples = 20
eval.omega_grid = 0, 1
eval.seeds = 4
";

fn cldm(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_cldm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), SMALL).unwrap();

    let (code, _, err) = cldm(d, &["--config", "cfg.txt", "--out", "data/ds.csv", "gen-data"]);
    assert_eq!(code, 0, "{err}");
    let first = fs::read(d.join("data/ds.csv")).unwrap();
    assert!(d.join("data/ds.csv.meta.json").exists());
    assert!(d.join("data").join(commands::RESOLVED_CONFIG).exists());
    cldm(d, &["--config", "cfg.txt", "--out", "data/ds.csv", "gen-data"]);
    assert_eq!(fs::read(d.join("data/ds.csv")).unwrap(), first);

    let (code, out, err) = cldm(d, &["--config", "cfg.txt", "--out", "run", "train", "--data", "data/ds.csv"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("step 120"));
    for f in ["model.cldm", "ckpt_60.cldm", "ckpt_120.cldm", "loss_history.csv", "normalization.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(d.join("run/loss_history.csv")).unwrap();
    assert!(history.starts_with("step,l_ddpm,l_nce,l_mse,lr,wall_ms\n"));
    assert_eq!(history.lines().count(), 121);
    assert_eq!(
        fs::read(d.join("run/model.cldm")).unwrap(),
        fs::read(d.join("run/ckpt_120.cldm")).unwrap()
    );

    let (code, _, err) = cldm(
        d,
        &["--config", "cfg.txt", "--out", "s/c1.csv", "sample", "--checkpoint", "run/model.cldm", "--class", "1", "--omega", "0.5"],
    );
    assert_eq!(code, 0, "{err}");
    let samples = fs::read_to_string(d.join("s/c1.csv")).unwrap();
    assert!(samples.starts_with("sample_id,class,x0,x1\n0,1,"));
    assert_eq!(samples.lines().count(), 16);
    let resolved = fs::read_to_string(d.join("s").join(commands::RESOLVED_CONFIG)).unwrap();
    assert!(resolved.contains("sample.class = 1\n") && resolved.contains("sample.omega = 0.5\n"));
    let (code, _, _) = cldm(d, &["--config", "cfg.txt", "--out", "s/u.csv", "sample", "--checkpoint", "run/model.cldm", "--class", "null"]);
    assert_eq!(code, 0);

    let (code, out, err) = cldm(
        d,
        &["--config", "cfg.txt", "--out", "ev", "eval", "--data", "data/ds.csv", "--samples", "s/c1.csv", "s/u.csv", "--checkpoint", "run/model.cldm"],
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("metric,scope,value\n"));
    assert!(out.contains("coverage,class:1,") && out.contains("uncond_coverage,all,") && out.contains("spectrum_rank,t:20,"));
    assert!(fs::read_to_string(d.join("ev/scatter.svg")).unwrap().contains("<circle"));
    assert!(d.join("ev/spectrum.csv").exists());

    let (code, out, err) = cldm(
        d,
        &["--config", "cfg.txt", "--out", "g", "grid-omega", "--checkpoint", "run/model.cldm", "--data", "data/ds.csv"],
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("best omega"));
    let grid = fs::read_to_string(d.join("g/grid.csv")).unwrap();
    assert!(grid.starts_with("omega,score,chosen\n0,"));
    assert_eq!(grid.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn echoed_config_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), SMALL).unwrap();
    cldm(d, &["--config", "cfg.txt", "--seed", "11", "--out", "ds.csv", "gen-data"]);
    let (code, _, err) = cldm(d, &["--config", "cfg.txt", "--seed", "11", "--out", "a", "train", "--data", "ds.csv"]);
    assert_eq!(code, 0, "{err}");
    let echoed = d.join("a").join(commands::RESOLVED_CONFIG);
    assert!(fs::read_to_string(&echoed).unwrap().contains("train.seed = 11\n"));
    let (code, _, err) = cldm(d, &["--config", echoed.to_str().unwrap(), "--out", "b", "train", "--data", "ds.csv"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read(d.join("a/model.cldm")).unwrap(), fs::read(d.join("b/model.cldm")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("a").join(commands::RESOLVED_CONFIG)).unwrap(),
        fs::read_to_string(d.join("b").join(commands::RESOLVED_CONFIG)).unwrap()
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.txt"), "train.lr = -1\n").unwrap();
    let (code, _, err) = cldm(d, &["--config", "bad.txt", "gen-data"]);
    assert_eq!(code, 2, "{err}");

    let (code, _, _) = cldm(d, &["--config", "missing.txt", "gen-data"]);
    assert_eq!(code, 4);
    let (code, _, _) = cldm(d, &["train", "--data", "nope.csv"]);
    assert_eq!(code, 4);

    // Data generated for 3 classes, config expects 10.
    fs::write(d.join("cfg.txt"), SMALL).unwrap();
    cldm(d, &["--config", "cfg.txt", "--out", "ds.csv", "gen-data"]);
    let (code, _, err) = cldm(d, &["train", "--data", "ds.csv"]);
    assert_eq!(code, 2);
    assert!(err.contains("expects 10") && err.contains("has 3"), "{err}");

    fs::write(d.join("nan.txt"), format!("{}train.lr = 1e300\ntrain.warmup_iters = 0\ntrain.grad_clip = none\n", SMALL.replace("train.warmup_iters = 10\n", ""))).unwrap();
    let (code, _, err) = cldm(d, &["--config", "nan.txt", "--out", "r", "train", "--data", "ds.csv"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn self_comparison_gives_identical_arms() {
    let cfg = ExperimentConfig::parse(&format!("{SMALL}train.alpha = 0\ntrain.gamma = 0\n")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = commands::compare(&cfg, tmp.path()).unwrap();
    let base = &out.arm(4, Arm::Baseline).unwrap().report.rows;
    let cldm = &out.arm(4, Arm::Cldm).unwrap().report.rows;
    assert_eq!(base, cldm);
    assert!(out.summary.iter().all(|r| r.outcome == "tie" || r.outcome == "-"));
}

#[test]
fn three_seeds_give_three_sets_and_medians() {
    let cfg = ExperimentConfig::parse(&SMALL.replace("eval.seeds = 4", "eval.seeds = 1, 2, 3")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = commands::compare(&cfg, tmp.path()).unwrap();
    assert_eq!(out.arms.len(), 6);
    let metrics_per_arm = out.arms[0].report.rows.len();
    assert!(out.arms.iter().all(|a| a.report.rows.len() == metrics_per_arm));
    assert_eq!(out.summary.len(), metrics_per_arm);
    let mut v = out.values(Arm::Cldm, "frechet", Scope::All);
    assert_eq!(v.len(), 3);
    let median = commands::median(&mut v);
    assert_eq!(out.summary_row("frechet", Scope::All).unwrap().cldm, median);
    let csv = fs::read_to_string(tmp.path().join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * metrics_per_arm);
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,scope,baseline_median,cldm_median,cldm_outcome\n"));
    assert!(tmp.path().join("seed_2/cldm.cldm").exists());
}
