//! The harness verbs, callable from code as well as from the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cldm_core::checkpoint;
use cldm_core::data::{LabeledDataset, Normalization};
use cldm_core::denoiser::{DenoiserParams, Label};
use cldm_core::metrics::{
    evaluate, frechet_distance, mean_pairwise_distance, mode_coverage, EvalInputs, MetricsReport, Scope,
};
use cldm_core::sampler::{
    grid_search_omega, pgm_8x8, probe_latents, sample, sample_classes, write_samples_csv, Budget, GridResult,
    SampleConfig,
};
use cldm_core::trainer::{self, history_csv, HistoryRow, TrainConfig};
use ndarray::{concatenate, Array2, Axis};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::svg;

pub const RESOLVED_CONFIG: &str = "config.resolved.txt";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const FINAL_CHECKPOINT: &str = "model.cldm";

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the resolved config into `dir`.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write(&dir.join(RESOLVED_CONFIG), &cfg.to_text())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::load(path).map_err(|e| match e {
        cldm_core::Error::Io(io) => io_err(path, io),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn check_dataset(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<()> {
    if ds.dim() != cfg.model.d_in {
        return Err(CliError::Config(format!(
            "dataset dimension mismatch: config expects {}, dataset has {}",
            cfg.model.d_in,
            ds.dim()
        )));
    }
    if ds.classes() != cfg.model.classes {
        return Err(CliError::Config(format!(
            "dataset class count mismatch: config expects {}, dataset has {}",
            cfg.model.classes,
            ds.classes()
        )));
    }
    Ok(())
}

fn check_params(cfg: &ExperimentConfig, params: &DenoiserParams) -> Result<()> {
    if params.config != cfg.model {
        return Err(CliError::Config(format!(
            "checkpoint architecture mismatch: config expects {:?}, checkpoint has {:?}",
            cfg.model, params.config
        )));
    }
    Ok(())
}

/// Ground-truth reference set drawn from the dataset's own generator.
pub fn reference_set(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<LabeledDataset> {
    let generator = ds.meta.generator.clone().unwrap_or_else(|| cfg.generator());
    let mut reference = generator
        .balanced(cfg.eval.reference_per_class)
        .generate(cfg.eval.reference_seed)?;
    reference.meta.normalization = ds.meta.normalization.clone();
    Ok(reference)
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<LabeledDataset> {
    echo_config(cfg, &parent_dir(out))?;
    let ds = cfg.generator().generate(cfg.dataset.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    ds.save(out).map_err(|e| io_err(out, e))?;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: DenoiserParams,
    pub history: Vec<HistoryRow>,
}

fn train_on(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    ds: &LabeledDataset,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainRun> {
    let sched = cfg.schedule()?;
    let x = ds.normalized_samples();
    let out = trainer::train(x.view(), &ds.labels, &sched, cfg.model, train_cfg, checkpoint_dir)?;
    Ok(TrainRun {
        params: out.state.params,
        history: out.history,
    })
}

/// Trains on the dataset at `data`, writing periodic checkpoints, the final
/// model, the data normalization and `loss_history.csv` to `out_dir`.
pub fn train(cfg: &ExperimentConfig, data: &Path, out_dir: &Path) -> Result<TrainRun> {
    echo_config(cfg, out_dir)?;
    let ds = load_dataset(data)?;
    check_dataset(cfg, &ds)?;
    let run = train_on(cfg, &cfg.train, &ds, Some(out_dir))?;
    checkpoint::save(&run.params, &out_dir.join(FINAL_CHECKPOINT))?;
    let norm = serde_json::to_string_pretty(&ds.meta.normalization)
        .map_err(|e| CliError::Io(e.to_string()))?;
    write(&out_dir.join(NORMALIZATION_FILE), &norm)?;
    write(&out_dir.join("loss_history.csv"), &history_csv(&run.history))?;
    Ok(run)
}

/// Normalization for a checkpoint: from `data` when given, else from the
/// file `train` writes next to the checkpoint, else identity.
pub fn resolve_normalization(checkpoint: &Path, data: Option<&Path>, dim: usize) -> Result<Normalization> {
    if let Some(path) = data {
        return Ok(load_dataset(path)?.meta.normalization);
    }
    let sidecar = parent_dir(checkpoint).join(NORMALIZATION_FILE);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| io_err(&sidecar, e))?;
        return serde_json::from_str(&text).map_err(|e| io_err(&sidecar, e));
    }
    Ok(Normalization::identity(dim))
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<DenoiserParams> {
    let params = checkpoint::load(path).map_err(|e| match e {
        cldm_core::Error::Io(io) => io_err(path, io),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })?;
    check_params(cfg, &params)?;
    Ok(params)
}

/// Draws `cfg.sample` from the checkpoint and writes them, in original
/// coordinates, to the CSV at `out`. With `pgm_dir`, 8x8 samples are also
/// written as greymaps.
pub fn sample_cmd(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    data: Option<&Path>,
    out: &Path,
    pgm_dir: Option<&Path>,
) -> Result<Array2<f64>> {
    echo_config(cfg, &parent_dir(out))?;
    let params = load_checkpoint(cfg, checkpoint_path)?;
    let norm = resolve_normalization(checkpoint_path, data, cfg.model.d_in)?;
    let sched = cfg.schedule()?;
    let mut x = sample(&params, &sched, cfg.model.d_in, &cfg.sample)?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(CliError::Numeric("sampler produced non-finite values".into()));
    }
    norm.invert_rows(&mut x);
    write_samples_csv(out, &[(cfg.sample.class_label, x.clone())]).map_err(|e| io_err(out, e))?;
    if let Some(dir) = pgm_dir {
        if cfg.model.d_in != 64 {
            return Err(CliError::Config("greymap export needs 8x8 samples".into()));
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (i, row) in x.rows().into_iter().enumerate() {
            write(&dir.join(format!("sample_{i}.pgm")), &pgm_8x8(&row.to_vec())?)?;
        }
    }
    Ok(x)
}

/// Samples grouped by label, read from `sample_id,class,x0,..` files.
pub fn read_samples(paths: &[PathBuf], dim: usize) -> Result<Vec<(Label, Array2<f64>)>> {
    let mut groups: Vec<(Label, Vec<f64>)> = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if !header.starts_with("sample_id,class") || header.split(',').count() != dim + 2 {
            return Err(io_err(path, format!("expected a sample header with {dim} columns")));
        }
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || io_err(path, format!("malformed row {}", n + 2));
            let mut parts = line.split(',');
            parts.next();
            let label = match parts.next().ok_or_else(bad)? {
                "null" => Label::Null,
                k => Label::Class(k.parse().map_err(|_| bad())?),
            };
            let values = parts.map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad())?;
            if values.len() != dim {
                return Err(bad());
            }
            match groups.iter_mut().find(|g| g.0 == label) {
                Some(g) => g.1.extend(values),
                None => groups.push((label, values)),
            }
        }
    }
    groups
        .into_iter()
        .map(|(label, flat)| {
            let n = flat.len() / dim;
            Ok((label, Array2::from_shape_vec((n, dim), flat).expect("row-major samples")))
        })
        .collect()
}

/// Metrics for sample files against the dataset at `data`. When every class
/// is present the full report is produced; otherwise only per-class rows.
/// A checkpoint adds the latent spectrum at the probe timestep.
pub fn eval_cmd(
    cfg: &ExperimentConfig,
    samples: &[PathBuf],
    data: &Path,
    checkpoint_path: Option<&Path>,
    out_dir: &Path,
) -> Result<MetricsReport> {
    echo_config(cfg, out_dir)?;
    let ds = load_dataset(data)?;
    check_dataset(cfg, &ds)?;
    let reference = reference_set(cfg, &ds)?;
    let groups = read_samples(samples, ds.dim())?;
    let classes = ds.classes();
    let mut by_class: Vec<Option<Array2<f64>>> = vec![None; classes];
    let mut unconditional = None;
    for (label, x) in &groups {
        match label {
            Label::Class(k) if *k < classes => by_class[*k] = Some(x.clone()),
            Label::Class(k) => {
                return Err(CliError::Config(format!(
                    "sample class {k} out of range for {classes} classes"
                )))
            }
            Label::Null => unconditional = Some(x.clone()),
        }
    }
    let mut probe = Vec::new();
    if let Some(path) = checkpoint_path {
        let params = load_checkpoint(cfg, path)?;
        let pooled: Vec<Array2<f64>> = groups.iter().map(|g| g.1.clone()).collect();
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let mut x = concatenate(Axis(0), &views).map_err(|e| CliError::Config(e.to_string()))?;
        ds.meta.normalization.apply_rows(&mut x);
        let t = cfg.probe_t();
        probe.push((t, probe_latents(&params, x.view(), t, &cfg.schedule()?, cfg.sample.seed)?));
    }
    let report = if by_class.iter().all(Option::is_some) {
        let generated: Vec<Array2<f64>> = by_class.iter().flatten().cloned().collect();
        evaluate(EvalInputs {
            generated: &generated,
            reference: &reference,
            train_counts: &ds.meta.class_counts,
            unconditional: unconditional.as_ref(),
            probe_latents: &probe,
        })?
    } else {
        partial_report(&reference, &by_class, unconditional.as_ref(), &probe)?
    };
    write(&out_dir.join("metrics.csv"), &report.to_csv())?;
    if !report.spectra.is_empty() {
        write(&out_dir.join("spectrum.csv"), &report.spectrum_csv())?;
    }
    if ds.dim() == 2 {
        let centers: Vec<Vec<f64>> = ds.meta.mode_centers.iter().flatten().cloned().collect();
        write(&out_dir.join("scatter.svg"), &svg::scatter(&groups, &centers))?;
    }
    Ok(report)
}

fn partial_report(
    reference: &LabeledDataset,
    by_class: &[Option<Array2<f64>>],
    unconditional: Option<&Array2<f64>>,
    probe: &[(usize, Array2<f64>)],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let radius = reference.meta.coverage_radius;
    for (k, x) in by_class.iter().enumerate() {
        let Some(x) = x else { continue };
        let r = reference.class_samples(k);
        report.push("frechet", Scope::Class(k), frechet_distance(x.view(), r.view())?);
        report.push("coverage", Scope::Class(k), mode_coverage(x.view(), &reference.meta.mode_centers[k], radius));
        report.push("diversity", Scope::Class(k), mean_pairwise_distance(x.view()));
    }
    if let Some(u) = unconditional {
        let every: Vec<Vec<f64>> = reference.meta.mode_centers.iter().flatten().cloned().collect();
        report.push("uncond_coverage", Scope::All, mode_coverage(u.view(), &every, radius));
        report.push("uncond_diversity", Scope::All, mean_pairwise_distance(u.view()));
    }
    for (t, h) in probe {
        let s = cldm_core::metrics::latent_spectrum(h.view())?;
        report.push(
            "spectrum_rank",
            Scope::Timestep(*t),
            cldm_core::metrics::spectrum_rank(&s, cldm_core::metrics::SPECTRUM_RANK_THRESHOLD) as f64,
        );
        report.spectra.push((*t, s));
    }
    Ok(report)
}

fn budget(cfg: &ExperimentConfig, seed: u64) -> Budget {
    Budget {
        method: cfg.sample.method,
        ddim_steps: cfg.sample.ddim_steps,
        per_class: cfg.eval.per_class,
        seed,
    }
}

fn grid_csv(result: &GridResult) -> String {
    let mut out = String::from("omega,score,chosen\n");
    for (omega, score) in &result.table {
        writeln!(out, "{omega},{score},{}", u8::from(*omega == result.best)).expect("string write");
    }
    out
}

/// Scores `eval.omega_grid` for a checkpoint and writes `grid.csv` to
/// `out_dir`.
pub fn grid_omega_cmd(cfg: &ExperimentConfig, checkpoint_path: &Path, data: &Path, out_dir: &Path) -> Result<GridResult> {
    echo_config(cfg, out_dir)?;
    let ds = load_dataset(data)?;
    check_dataset(cfg, &ds)?;
    let params = load_checkpoint(cfg, checkpoint_path)?;
    let reference = reference_set(cfg, &ds)?;
    let result = grid_search_omega(
        &params,
        &cfg.schedule()?,
        &cfg.eval.omega_grid,
        &reference,
        &budget(cfg, cfg.sample.seed),
        cfg.eval.grid_metric,
        None,
    )?;
    write(&out_dir.join("grid.csv"), &grid_csv(&result))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Cldm,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Baseline, Arm::Cldm];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Cldm => "cldm",
        }
    }
}

/// Everything one arm produces for one seed.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: Arm,
    pub params: DenoiserParams,
    pub grid: GridResult,
    pub report: MetricsReport,
    /// Median wall time of one training iteration, in milliseconds.
    pub median_step_ms: f64,
}

/// Trains, tunes omega, samples and evaluates one arm for one seed.
pub fn run_arm(
    cfg: &ExperimentConfig,
    ds: &LabeledDataset,
    reference: &LabeledDataset,
    arm: Arm,
    seed: u64,
) -> Result<ArmResult> {
    let train_cfg = TrainConfig {
        seed,
        ..match arm {
            Arm::Baseline => cfg.baseline_train(),
            Arm::Cldm => cfg.train.clone(),
        }
    };
    let run = train_on(cfg, &train_cfg, ds, None)?;
    let sched = cfg.schedule()?;
    let budget = budget(cfg, seed);
    let grid = grid_search_omega(
        &run.params,
        &sched,
        &cfg.eval.omega_grid,
        reference,
        &budget,
        cfg.eval.grid_metric,
        None,
    )?;
    let norm = &ds.meta.normalization;
    let normalized = sample_classes(&run.params, &sched, ds.dim(), ds.classes(), &budget, grid.best)?;
    let generated: Vec<Array2<f64>> = normalized
        .iter()
        .map(|x| {
            let mut x = x.clone();
            norm.invert_rows(&mut x);
            x
        })
        .collect();
    let mut uncond = sample(
        &run.params,
        &sched,
        ds.dim(),
        &SampleConfig {
            method: cfg.sample.method,
            ddim_steps: cfg.sample.ddim_steps,
            omega: 0.0,
            class_label: Label::Null,
            n_samples: cfg.eval.uncond_samples,
            seed,
        },
    )?;
    norm.invert_rows(&mut uncond);
    let views: Vec<_> = normalized.iter().map(|x| x.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| CliError::Config(e.to_string()))?;
    let t = cfg.probe_t();
    let latents = probe_latents(&run.params, pooled.view(), t, &sched, seed)?;
    let mut report = evaluate(EvalInputs {
        generated: &generated,
        reference,
        train_counts: &ds.meta.class_counts,
        unconditional: Some(&uncond),
        probe_latents: &[(t, latents)],
    })?;
    report.push("omega", Scope::All, grid.best);
    let mut times: Vec<f64> = run.history.iter().map(|h| h.wall_ms).collect();
    Ok(ArmResult {
        seed,
        arm,
        params: run.params,
        grid,
        report,
        median_step_ms: median(&mut times),
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Direction in which a metric improves; `None` for descriptive rows.
pub fn higher_is_better(metric: &str) -> Option<bool> {
    match metric {
        "frechet" => Some(false),
        "coverage" | "diversity" | "uncond_coverage" | "uncond_diversity" | "spectrum_rank" => Some(true),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub scope: Scope,
    pub baseline: f64,
    pub cldm: f64,
    /// `win`, `loss`, `tie` from CLDM's side, or `-` for descriptive rows.
    pub outcome: &'static str,
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub arms: Vec<ArmResult>,
    pub summary: Vec<SummaryRow>,
}

impl CompareOutput {
    pub fn arm(&self, seed: u64, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.seed == seed && a.arm == arm)
    }

    pub fn summary_row(&self, metric: &str, scope: Scope) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == metric && r.scope == scope)
    }

    /// Per-seed metric values for one arm, in seed order.
    pub fn values(&self, arm: Arm, metric: &str, scope: Scope) -> Vec<f64> {
        self.arms
            .iter()
            .filter(|a| a.arm == arm)
            .filter_map(|a| a.report.get(metric, scope))
            .collect()
    }

    pub fn comparison_csv(&self) -> String {
        let mut out = String::from("seed,arm,metric,scope,value\n");
        for a in &self.arms {
            for r in &a.report.rows {
                writeln!(out, "{},{},{},{},{}", a.seed, a.arm.name(), r.metric, r.scope, r.value).expect("string write");
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,scope,baseline_median,cldm_median,cldm_outcome\n");
        for r in &self.summary {
            writeln!(out, "{},{},{},{},{}", r.metric, r.scope, r.baseline, r.cldm, r.outcome).expect("string write");
        }
        out
    }

    pub fn grid_csv(&self) -> String {
        let mut out = String::from("seed,arm,omega,score,chosen\n");
        for a in &self.arms {
            for (omega, score) in &a.grid.table {
                writeln!(
                    out,
                    "{},{},{omega},{score},{}",
                    a.seed,
                    a.arm.name(),
                    u8::from(*omega == a.grid.best)
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("seed,arm,timestep,rank,singular_value\n");
        for a in &self.arms {
            for (t, values) in &a.report.spectra {
                for (i, v) in values.iter().enumerate() {
                    writeln!(out, "{},{},{t},{},{v}", a.seed, a.arm.name(), i + 1).expect("string write");
                }
            }
        }
        out
    }

    /// Wall-clock figures; the only output that differs between reruns.
    pub fn timing_text(&self) -> String {
        let mut out = String::new();
        for a in &self.arms {
            writeln!(out, "seed {} {}: median step {:.4} ms", a.seed, a.arm.name(), a.median_step_ms).expect("string write");
        }
        out
    }
}

fn summarize(arms: &[ArmResult]) -> Vec<SummaryRow> {
    let Some(first) = arms.first() else {
        return Vec::new();
    };
    first
        .report
        .rows
        .iter()
        .map(|row| {
            let per_arm = |arm: Arm| {
                let mut v: Vec<f64> = arms
                    .iter()
                    .filter(|a| a.arm == arm)
                    .filter_map(|a| a.report.get(&row.metric, row.scope))
                    .collect();
                median(&mut v)
            };
            let baseline = per_arm(Arm::Baseline);
            let cldm = per_arm(Arm::Cldm);
            let outcome = match higher_is_better(&row.metric) {
                None => "-",
                Some(_) if cldm == baseline => "tie",
                Some(true) if cldm > baseline => "win",
                Some(false) if cldm < baseline => "win",
                Some(_) => "loss",
            };
            SummaryRow {
                metric: row.metric.clone(),
                scope: row.scope,
                baseline,
                cldm,
                outcome,
            }
        })
        .collect()
}

/// Baseline vs CLDM over `eval.seeds` on one dataset. Writes
/// `comparison.csv`, `summary.csv`, `grid.csv`, `spectrum.csv`, per-arm final
/// checkpoints and `timing.txt` to `out_dir`.
pub fn compare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<CompareOutput> {
    echo_config(cfg, out_dir)?;
    let ds = cfg.generator().generate(cfg.dataset.seed)?;
    let reference = reference_set(cfg, &ds)?;
    let mut arms = Vec::new();
    for &seed in &cfg.eval.seeds {
        for arm in Arm::BOTH {
            let result = run_arm(cfg, &ds, &reference, arm, seed)?;
            let ckpt = out_dir.join(format!("seed_{seed}")).join(format!("{}.cldm", arm.name()));
            fs::create_dir_all(parent_dir(&ckpt)).map_err(|e| io_err(&ckpt, e))?;
            checkpoint::save(&result.params, &ckpt)?;
            arms.push(result);
        }
    }
    let summary = summarize(&arms);
    let output = CompareOutput { arms, summary };
    write(&out_dir.join("comparison.csv"), &output.comparison_csv())?;
    write(&out_dir.join("summary.csv"), &output.summary_csv())?;
    write(&out_dir.join("grid.csv"), &output.grid_csv())?;
    write(&out_dir.join("spectrum.csv"), &output.spectrum_csv())?;
    write(&out_dir.join("timing.txt"), &output.timing_text())?;
    Ok(output)
}
