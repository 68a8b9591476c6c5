//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cldm_core::data::Generator;
use cldm_core::denoiser::{Activation, DenoiserConfig, Label};
use cldm_core::losses::LossWeights;
use cldm_core::sampler::{GridMetric, Method, SampleConfig};
use cldm_core::schedule::{linear_schedule, Schedule};
use cldm_core::trainer::{Objective, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    GaussianMixture,
    Shapes8x8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub classes: usize,
    pub n_max: usize,
    pub rho: f64,
    pub modes_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    /// Generated samples per class for evaluation and the omega grid.
    pub per_class: usize,
    /// Ground-truth samples per class in the reference set.
    pub reference_per_class: usize,
    pub reference_seed: u64,
    pub omega_grid: Vec<f64>,
    pub grid_metric: GridMetric,
    /// Probe timestep for the latent spectrum; 0 means `T / 2`.
    pub probe_t: usize,
    pub uncond_samples: usize,
    /// Seeds for `compare`; each seeds data, training and sampling.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection {
                kind: DatasetKind::GaussianMixture,
                classes: 10,
                n_max: 500,
                rho: 0.01,
                modes_per_class: 4,
                noise_std: 0.1,
                seed: 0,
            },
            schedule: ScheduleSection {
                steps: 200,
                beta1: 5e-4,
                beta_t: 0.1,
            },
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig {
                method: Method::Ddim,
                ddim_steps: 50,
                omega: 0.0,
                class_label: Label::Class(0),
                n_samples: 200,
                seed: 0,
            },
            eval: EvalSection {
                per_class: 200,
                reference_per_class: 200,
                reference_seed: 1_000_003,
                omega_grid: vec![0.0, 0.5, 1.0, 2.0],
                grid_metric: GridMetric::Frechet,
                probe_t: 0,
                uncond_samples: 1000,
                seeds: vec![1, 2, 3],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn label_text(label: Label) -> String {
    match label {
        Label::Class(k) => k.to_string(),
        Label::Null => "null".into(),
    }
}

pub fn parse_label(key: &str, value: &str) -> Result<Label, CliError> {
    if value == "null" {
        Ok(Label::Null)
    } else {
        parse(key, value).map(Label::Class)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses the key-value text, starting from defaults. `#` starts a
    /// comment; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        let mut cfg = Self::default();
        let mut model_d_in = None;
        let mut model_classes = None;
        for (key, value) in &entries {
            cfg.set(key, value, &mut model_d_in, &mut model_classes)?;
        }
        cfg.model.d_in = cfg.data_dim();
        cfg.model.classes = cfg.dataset.classes;
        if let Some(d) = model_d_in {
            if d != cfg.model.d_in {
                return Err(CliError::Config(format!(
                    "model.d_in = {d} but the {} generator produces dimension {}",
                    cfg.generator_name(),
                    cfg.model.d_in
                )));
            }
        }
        if let Some(k) = model_classes {
            if k != cfg.dataset.classes {
                return Err(CliError::Config(format!(
                    "model.classes = {k} but dataset.classes = {}",
                    cfg.dataset.classes
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(
        &mut self,
        key: &str,
        v: &str,
        model_d_in: &mut Option<usize>,
        model_classes: &mut Option<usize>,
    ) -> Result<(), CliError> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sample;
        let e = &mut self.eval;
        match key {
            "dataset.generator" => {
                d.kind = match v {
                    "gaussian_mixture" => DatasetKind::GaussianMixture,
                    "shapes8x8" => DatasetKind::Shapes8x8,
                    _ => return Err(CliError::Config(format!("{key}: unknown generator {v:?}"))),
                }
            }
            "dataset.classes" => d.classes = parse(key, v)?,
            "dataset.n_max" => d.n_max = parse(key, v)?,
            "dataset.rho" => d.rho = parse(key, v)?,
            "dataset.modes_per_class" => d.modes_per_class = parse(key, v)?,
            "dataset.noise_std" => d.noise_std = parse(key, v)?,
            "dataset.seed" => d.seed = parse(key, v)?,
            "schedule.steps" => self.schedule.steps = parse(key, v)?,
            "schedule.beta1" => self.schedule.beta1 = parse(key, v)?,
            "schedule.beta_t" => self.schedule.beta_t = parse(key, v)?,
            "model.d_in" => *model_d_in = Some(parse(key, v)?),
            "model.classes" => *model_classes = Some(parse(key, v)?),
            "model.d_time" => m.d_time = parse(key, v)?,
            "model.d_class" => m.d_class = parse(key, v)?,
            "model.d_hidden" => m.d_hidden = parse(key, v)?,
            "model.d_latent" => m.d_latent = parse(key, v)?,
            "model.activation" => {
                m.activation = match v {
                    "silu" => Activation::Silu,
                    "identity" => Activation::Identity,
                    _ => return Err(CliError::Config(format!("{key}: unknown activation {v:?}"))),
                }
            }
            "train.objective" => {
                t.objective = match v {
                    "cldm" => Objective::Cldm,
                    "ddpm" => Objective::Ddpm,
                    _ => return Err(CliError::Config(format!("{key}: unknown objective {v:?}"))),
                }
            }
            "train.p_uncond" => t.p_uncond = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.warmup_iters" => t.warmup_iters = parse(key, v)?,
            "train.adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam.eps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.grad_clip" => {
                t.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "train.alpha" => t.weights.alpha = parse(key, v)?,
            "train.gamma" => t.weights.gamma = parse(key, v)?,
            "train.tau" => t.weights.tau = parse(key, v)?,
            "train.nce_time_weight" => t.weights.nce_time_weight = parse_bool(key, v)?,
            "train.nce_raw_dot" => t.weights.nce_raw_dot = parse_bool(key, v)?,
            "sample.method" => s.method = parse(key, v).map_err(|_| CliError::Config(format!("{key}: unknown method {v:?}")))?,
            "sample.ddim_steps" => s.ddim_steps = parse(key, v)?,
            "sample.omega" => s.omega = parse(key, v)?,
            "sample.class" => s.class_label = parse_label(key, v)?,
            "sample.n_samples" => s.n_samples = parse(key, v)?,
            "sample.seed" => s.seed = parse(key, v)?,
            "eval.per_class" => e.per_class = parse(key, v)?,
            "eval.reference_per_class" => e.reference_per_class = parse(key, v)?,
            "eval.reference_seed" => e.reference_seed = parse(key, v)?,
            "eval.omega_grid" => e.omega_grid = parse_list(key, v)?,
            "eval.grid_metric" => e.grid_metric = parse(key, v).map_err(|_| CliError::Config(format!("{key}: unknown metric {v:?}")))?,
            "eval.probe_t" => e.probe_t = parse(key, v)?,
            "eval.uncond_samples" => e.uncond_samples = parse(key, v)?,
            "eval.seeds" => e.seeds = parse_list(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    fn generator_name(&self) -> &'static str {
        match self.dataset.kind {
            DatasetKind::GaussianMixture => "gaussian_mixture",
            DatasetKind::Shapes8x8 => "shapes8x8",
        }
    }

    pub fn data_dim(&self) -> usize {
        self.generator().dim()
    }

    pub fn generator(&self) -> Generator {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::GaussianMixture => Generator::GaussianMixture {
                classes: d.classes,
                modes_per_class: d.modes_per_class,
                n_max: d.n_max,
                rho: d.rho,
                noise_std: d.noise_std,
            },
            DatasetKind::Shapes8x8 => Generator::Shapes8x8 {
                classes: d.classes,
                n_max: d.n_max,
                rho: d.rho,
            },
        }
    }

    pub fn schedule(&self) -> Result<Schedule, CliError> {
        Ok(linear_schedule(self.schedule.steps, self.schedule.beta1, self.schedule.beta_t)?)
    }

    /// Probe timestep with the `T / 2` default applied.
    pub fn probe_t(&self) -> usize {
        if self.eval.probe_t == 0 {
            (self.schedule.steps / 2).max(1)
        } else {
            self.eval.probe_t
        }
    }

    /// Baseline arm: same settings with the plain DDPM objective and both
    /// regularizer weights at zero.
    pub fn baseline_train(&self) -> TrainConfig {
        TrainConfig {
            objective: Objective::Ddpm,
            weights: LossWeights {
                alpha: 0.0,
                gamma: 0.0,
                ..self.train.weights
            },
            ..self.train.clone()
        }
    }

    /// Applies a `--seed` override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.sample.seed = seed;
        self.eval.seeds = vec![seed];
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.kind == DatasetKind::GaussianMixture && d.modes_per_class == 0 {
            return Err(CliError::Config("dataset.modes_per_class must be >= 1".into()));
        }
        if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
            return Err(CliError::Config("dataset.noise_std must be finite and >= 0".into()));
        }
        self.generator().counts()?;
        if self.model.d_in != self.data_dim() || self.model.classes != d.classes {
            return Err(CliError::Config(format!(
                "model (d_in {}, classes {}) does not match dataset (dim {}, classes {})",
                self.model.d_in,
                self.model.classes,
                self.data_dim(),
                d.classes
            )));
        }
        self.model.validate()?;
        self.schedule()?;
        self.train.validate()?;
        self.sample.validate(self.schedule.steps)?;
        if let Label::Class(k) = self.sample.class_label {
            if k >= d.classes {
                return Err(CliError::Config(format!(
                    "sample.class = {k} but dataset.classes = {}",
                    d.classes
                )));
            }
        }
        let e = &self.eval;
        if e.omega_grid.is_empty() || e.omega_grid.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CliError::Config("eval.omega_grid needs finite values >= 0".into()));
        }
        if e.seeds.is_empty() {
            return Err(CliError::Config("eval.seeds must not be empty".into()));
        }
        if e.per_class < 2 || e.reference_per_class < 2 {
            return Err(CliError::Config("eval budgets need at least 2 samples per class".into()));
        }
        if self.probe_t() > self.schedule.steps {
            return Err(CliError::Config(format!(
                "eval.probe_t = {} exceeds schedule.steps = {}",
                e.probe_t, self.schedule.steps
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`Self::parse`] accepts.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let s = &self.sample;
        let e = &self.eval;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("dataset.generator", self.generator_name().into());
        kv("dataset.classes", d.classes.to_string());
        kv("dataset.n_max", d.n_max.to_string());
        kv("dataset.rho", d.rho.to_string());
        kv("dataset.modes_per_class", d.modes_per_class.to_string());
        kv("dataset.noise_std", d.noise_std.to_string());
        kv("dataset.seed", d.seed.to_string());
        kv("schedule.steps", self.schedule.steps.to_string());
        kv("schedule.beta1", self.schedule.beta1.to_string());
        kv("schedule.beta_t", self.schedule.beta_t.to_string());
        kv("model.d_in", m.d_in.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.d_time", m.d_time.to_string());
        kv("model.d_class", m.d_class.to_string());
        kv("model.d_hidden", m.d_hidden.to_string());
        kv("model.d_latent", m.d_latent.to_string());
        kv(
            "model.activation",
            match m.activation {
                Activation::Silu => "silu",
                Activation::Identity => "identity",
            }
            .into(),
        );
        kv(
            "train.objective",
            match t.objective {
                Objective::Cldm => "cldm",
                Objective::Ddpm => "ddpm",
            }
            .into(),
        );
        kv("train.p_uncond", t.p_uncond.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.iterations", t.iterations.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.warmup_iters", t.warmup_iters.to_string());
        kv("train.adam_beta1", t.adam.beta1.to_string());
        kv("train.adam_beta2", t.adam.beta2.to_string());
        kv("train.adam_eps", t.adam.eps.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv("train.alpha", t.weights.alpha.to_string());
        kv("train.gamma", t.weights.gamma.to_string());
        kv("train.tau", t.weights.tau.to_string());
        kv("train.nce_time_weight", t.weights.nce_time_weight.to_string());
        kv("train.nce_raw_dot", t.weights.nce_raw_dot.to_string());
        kv(
            "sample.method",
            match s.method {
                Method::Ddpm => "ddpm",
                Method::Ddim => "ddim",
            }
            .into(),
        );
        kv("sample.ddim_steps", s.ddim_steps.to_string());
        kv("sample.omega", s.omega.to_string());
        kv("sample.class", label_text(s.class_label));
        kv("sample.n_samples", s.n_samples.to_string());
        kv("sample.seed", s.seed.to_string());
        kv("eval.per_class", e.per_class.to_string());
        kv("eval.reference_per_class", e.reference_per_class.to_string());
        kv("eval.reference_seed", e.reference_seed.to_string());
        kv("eval.omega_grid", join(&e.omega_grid));
        kv(
            "eval.grid_metric",
            match e.grid_metric {
                GridMetric::Frechet => "frechet",
                GridMetric::Coverage => "coverage",
            }
            .into(),
        );
        kv("eval.probe_t", e.probe_t.to_string());
        kv("eval.uncond_samples", e.uncond_samples.to_string());
        kv("eval.seeds", join(&e.seeds));
        out
    }
}
