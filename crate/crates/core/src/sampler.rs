//! Ancestral DDPM and deterministic DDIM sampling with classifier-free
//! guidance.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::denoiser::{forward_batch, DenoiserParams, Label};
use crate::error::{check_len, Error, Result};
use crate::metrics::{frechet_distance, mode_coverage};
use crate::rng::{substream, Purpose};
use crate::schedule::{forward_noise, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            _ => Err(Error::InvalidArgument(format!("unknown sampling method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub method: Method,
    /// Only used by DDIM.
    pub ddim_steps: usize,
    pub omega: f64,
    pub class_label: Label,
    pub n_samples: usize,
    pub seed: u64,
}

impl SampleConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "guidance strength must be finite and >= 0, got {}",
                self.omega
            )));
        }
        if self.method == Method::Ddim && !(1..=steps).contains(&self.ddim_steps) {
            return Err(Error::InvalidArgument(format!(
                "ddim_steps must be in 1..={steps}, got {}",
                self.ddim_steps
            )));
        }
        Ok(())
    }
}

/// Anything that predicts the noise in a batch of `x_t` rows sharing one
/// timestep.
pub trait NoiseModel {
    fn predict(&self, x_t: ArrayView2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>>;
}

impl NoiseModel for DenoiserParams {
    fn predict(&self, x_t: ArrayView2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>> {
        let steps = vec![t; x_t.nrows()];
        Ok(forward_batch(self, x_t, &steps, labels)?.output().to_owned())
    }
}

/// `(1 + omega) * eps_cond - omega * eps_unc`.
pub fn cfg_combine(eps_cond: &[f64], eps_unc: &[f64], omega: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_unc)
        .map(|(c, u)| (1.0 + omega) * c - omega * u)
        .collect()
}

/// Guided noise estimate for every row. Conditional and null rows go
/// through the model as a single stacked batch.
pub fn guided_eps<M: NoiseModel + ?Sized>(
    model: &M,
    x_t: ArrayView2<f64>,
    t: usize,
    label: Label,
    omega: f64,
) -> Result<Array2<f64>> {
    let n = x_t.nrows();
    if label == Label::Null || omega == 0.0 {
        return model.predict(x_t, t, &vec![label; n]);
    }
    let stacked = concatenate![Axis(0), x_t, x_t];
    let mut labels = vec![label; n];
    labels.resize(2 * n, Label::Null);
    let out = model.predict(stacked.view(), t, &labels)?;
    check_len("guided batch", 2 * n, out.nrows())?;
    let cond = out.slice(s![..n, ..]);
    let unc = out.slice(s![n.., ..]);
    Ok(&cond * (1.0 + omega) - &unc * omega)
}

fn chain_rngs(config: &SampleConfig) -> Vec<ChaCha8Rng> {
    let lane = match config.class_label {
        Label::Class(k) => k as u64,
        Label::Null => u64::MAX,
    };
    (0..config.n_samples)
        .map(|i| substream(config.seed, Purpose::Sample, lane, i as u64))
        .collect()
}

fn fill_normal(rngs: &mut [ChaCha8Rng], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rngs.len(), dim));
    for (mut row, rng) in out.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    out
}

/// Ancestral sampling: `x_{t-1} = mean(x_t, eps) + sigma_t z`, with `z = 0`
/// at `t = 1`. Each chain draws `x_T` and then its per-step noise from its
/// own substream, so output does not depend on batching.
pub fn ddpm_sample<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    dim: usize,
    config: &SampleConfig,
) -> Result<Array2<f64>> {
    config.validate(sched.steps())?;
    let mut rngs = chain_rngs(config);
    let mut x = fill_normal(&mut rngs, dim);
    for t in (1..=sched.steps()).rev() {
        let eps = guided_eps(model, x.view(), t, config.class_label, config.omega)?;
        check_len("noise estimate width", dim, eps.ncols())?;
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let coef = sched.eps_coefficient(t);
        x = &x * inv_sqrt_alpha - &eps * coef;
        if t > 1 {
            let z = fill_normal(&mut rngs, dim);
            x.scaled_add(sched.sigma(t), &z);
        }
    }
    Ok(x)
}

/// Evenly spaced steps `round(i T / S)` for `i = 1..=S`; always ends at `T`.
pub fn ddim_subsequence(steps: usize, ddim_steps: usize) -> Result<Vec<usize>> {
    if !(1..=steps).contains(&ddim_steps) {
        return Err(Error::InvalidArgument(format!(
            "ddim_steps must be in 1..={steps}, got {ddim_steps}"
        )));
    }
    Ok((1..=ddim_steps)
        .map(|i| (2 * i * steps + ddim_steps) / (2 * ddim_steps))
        .collect())
}

/// Deterministic (eta = 0) DDIM over [`ddim_subsequence`]. The last hop
/// lands on `alpha_bar = 1`, so the output is the final `x0` estimate.
pub fn ddim_sample<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    dim: usize,
    config: &SampleConfig,
) -> Result<Array2<f64>> {
    config.validate(sched.steps())?;
    let taus = ddim_subsequence(sched.steps(), config.ddim_steps)?;
    let mut rngs = chain_rngs(config);
    let mut x = fill_normal(&mut rngs, dim);
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps = guided_eps(model, x.view(), t, config.class_label, config.omega)?;
        check_len("noise estimate width", dim, eps.ncols())?;
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(prev);
        let x0 = (&x - &(&eps * (1.0 - ab).sqrt())) / ab.sqrt();
        x = if prev == 0 {
            x0
        } else {
            x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt()
        };
    }
    Ok(x)
}

pub fn sample<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    dim: usize,
    config: &SampleConfig,
) -> Result<Array2<f64>> {
    match config.method {
        Method::Ddpm => ddpm_sample(model, sched, dim, config),
        Method::Ddim => ddim_sample(model, sched, dim, config),
    }
}

/// Shared settings for drawing a fixed budget from every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub method: Method,
    pub ddim_steps: usize,
    pub per_class: usize,
    pub seed: u64,
}

/// `per_class` samples for each class, in normalized coordinates.
pub fn sample_classes<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    dim: usize,
    classes: usize,
    budget: &Budget,
    omega: f64,
) -> Result<Vec<Array2<f64>>> {
    (0..classes)
        .map(|k| {
            sample(
                model,
                sched,
                dim,
                &SampleConfig {
                    method: budget.method,
                    ddim_steps: budget.ddim_steps,
                    omega,
                    class_label: Label::Class(k),
                    n_samples: budget.per_class,
                    seed: budget.seed,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMetric {
    /// Pooled Fréchet distance to the reference set; lower is better.
    Frechet,
    /// Fraction of reference modes covered; higher is better.
    Coverage,
}

impl std::str::FromStr for GridMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frechet" => Ok(GridMetric::Frechet),
            "coverage" => Ok(GridMetric::Coverage),
            _ => Err(Error::InvalidArgument(format!("unknown grid metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: f64,
    /// `(omega, score)` in ascending omega order.
    pub table: Vec<(f64, f64)>,
}

/// Scores each candidate guidance strength on `classes` (all classes when
/// `None`) against `reference`, which is in original coordinates. Every
/// candidate uses the same seed. Ties go to the smaller omega.
pub fn grid_search_omega<M: NoiseModel + ?Sized>(
    model: &M,
    sched: &Schedule,
    candidates: &[f64],
    reference: &LabeledDataset,
    budget: &Budget,
    metric: GridMetric,
    classes: Option<&[usize]>,
) -> Result<GridResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no guidance candidates".into()));
    }
    let mut omegas = candidates.to_vec();
    omegas.sort_by(f64::total_cmp);
    let all: Vec<usize> = (0..reference.classes()).collect();
    let members = classes.unwrap_or(&all);
    let dim = reference.dim();
    let refs: Vec<Array2<f64>> = members.iter().map(|&k| reference.class_samples(k)).collect();
    let ref_views: Vec<_> = refs.iter().map(|r| r.view()).collect();
    let pooled_ref = concatenate(Axis(0), &ref_views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centers: Vec<Vec<f64>> = members
        .iter()
        .flat_map(|&k| reference.meta.mode_centers[k].iter().cloned())
        .collect();

    let mut table = Vec::with_capacity(omegas.len());
    for &omega in &omegas {
        let mut parts = Vec::with_capacity(members.len());
        for &k in members {
            let mut x = sample(
                model,
                sched,
                dim,
                &SampleConfig {
                    method: budget.method,
                    ddim_steps: budget.ddim_steps,
                    omega,
                    class_label: Label::Class(k),
                    n_samples: budget.per_class,
                    seed: budget.seed,
                },
            )?;
            reference.meta.normalization.invert_rows(&mut x);
            parts.push(x);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let pooled = concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let score = match metric {
            GridMetric::Frechet => frechet_distance(pooled.view(), pooled_ref.view())?,
            GridMetric::Coverage => {
                mode_coverage(pooled.view(), &centers, reference.meta.coverage_radius)
            }
        };
        if !score.is_finite() {
            return Err(Error::Numeric(format!("grid score for omega {omega} is {score}")));
        }
        table.push((omega, score));
    }
    let mut best = table[0];
    for &(omega, score) in &table[1..] {
        let better = match metric {
            GridMetric::Frechet => score < best.1,
            GridMetric::Coverage => score > best.1,
        };
        if better {
            best = (omega, score);
        }
    }
    Ok(GridResult {
        best: best.0,
        table,
    })
}

/// Encoder latents of `x0` rows noised to step `t` with the null label.
/// Noise for row `i` comes from the probe substream `(t, i)`.
pub fn probe_latents(
    params: &DenoiserParams,
    x0: ArrayView2<f64>,
    t: usize,
    sched: &Schedule,
    seed: u64,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    let mut noised = Array2::zeros(x0.raw_dim());
    for (i, row) in x0.rows().into_iter().enumerate() {
        let mut rng = substream(seed, Purpose::Probe, t as u64, i as u64);
        let eps: Vec<f64> = (0..row.len()).map(|_| rng.sample(StandardNormal)).collect();
        let xt = forward_noise(&row.to_vec(), t, &eps, sched)?;
        noised.row_mut(i).assign(&ndarray::ArrayView1::from(&xt));
    }
    let steps = vec![t; x0.nrows()];
    let labels = vec![Label::Null; x0.nrows()];
    Ok(forward_batch(params, noised.view(), &steps, &labels)?.latent().to_owned())
}

pub const SAMPLES_HEADER_PREFIX: &str = "sample_id,class";

/// CSV rows `sample_id,class,x0,..`; unconditional samples have class `null`.
pub fn samples_csv(groups: &[(Label, Array2<f64>)]) -> String {
    let dim = groups.first().map_or(0, |g| g.1.ncols());
    let mut out = String::from(SAMPLES_HEADER_PREFIX);
    for j in 0..dim {
        write!(out, ",x{j}").expect("string write");
    }
    out.push('\n');
    let mut id = 0usize;
    for (label, x) in groups {
        let class = match label {
            Label::Class(k) => k.to_string(),
            Label::Null => "null".to_string(),
        };
        for row in x.rows() {
            write!(out, "{id},{class}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
            id += 1;
        }
    }
    out
}

pub fn write_samples_csv(path: &Path, groups: &[(Label, Array2<f64>)]) -> Result<()> {
    std::fs::write(path, samples_csv(groups))?;
    Ok(())
}

/// Plain-text greymap of an 8x8 sample; values in [-1, 1] map to 0..=255.
pub fn pgm_8x8(pixels: &[f64]) -> Result<String> {
    check_len("8x8 image", 64, pixels.len())?;
    let mut out = String::from("P2\n8 8\n255\n");
    for row in pixels.chunks(8) {
        let line: Vec<String> = row
            .iter()
            .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}
