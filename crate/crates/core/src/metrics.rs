//! Sample-quality metrics computed directly in data space.

use std::fmt::{self, Write as _};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::data::{category_split, Category, CategorySplit, LabeledDataset};
use crate::error::{check_len, Error, Result};

/// Added to both covariances before the matrix square root.
pub const COVARIANCE_JITTER: f64 = 1e-6;

/// Singular values below `SPECTRUM_RANK_THRESHOLD * top` count as collapsed.
pub const SPECTRUM_RANK_THRESHOLD: f64 = 1e-3;

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn mean_and_covariance(x: ArrayView2<f64>, unbiased: bool) -> (Vec<f64>, Array2<f64>) {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let denom = if unbiased { (n.max(2) - 1) as f64 } else { n as f64 };
    let cov = centered.t().dot(&centered) / denom;
    (mean.to_vec(), cov)
}

fn sym_eigen(m: &Array2<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut d = to_dmatrix(m);
    let t = d.transpose();
    d = (d + t) * 0.5;
    SymmetricEigen::new(d)
}

/// Squared Fréchet distance between Gaussians fitted to two sample sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`, which shares its spectrum
/// with `S_a S_b`.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("Fréchet distance needs non-empty sample sets".into()));
    }
    check_len("Fréchet sample width", a.ncols(), b.ncols())?;
    let d = a.ncols();
    let (mu_a, mut cov_a) = mean_and_covariance(a, true);
    let (mu_b, mut cov_b) = mean_and_covariance(b, true);
    for k in 0..d {
        cov_a[[k, k]] += COVARIANCE_JITTER;
        cov_b[[k, k]] += COVARIANCE_JITTER;
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();

    let ea = sym_eigen(&cov_a);
    let root_vals = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&root_vals) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * to_dmatrix(&cov_b) * &sqrt_a;
    let inner = Array2::from_shape_fn((d, d), |(i, j)| inner[(i, j)]);
    let eig = sym_eigen(&inner).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut trace_sqrt = 0.0;
    for &v in eig.iter() {
        if v < -1e-8 * scale {
            return Err(Error::Numeric(format!(
                "covariance product has negative eigenvalue {v}"
            )));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }
    let trace = cov_a.diag().sum() + cov_b.diag().sum() - 2.0 * trace_sqrt;
    Ok((mean_term + trace).max(0.0))
}

/// Fraction of `centers` with at least one sample within `radius`.
pub fn mode_coverage(samples: ArrayView2<f64>, centers: &[Vec<f64>], radius: f64) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let hit = centers
        .iter()
        .filter(|c| {
            samples
                .rows()
                .into_iter()
                .any(|s| squared_distance(s, c) <= r2)
        })
        .count();
    hit as f64 / centers.len() as f64
}

fn squared_distance(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean Euclidean distance over all unordered pairs; 0 for fewer than two
/// samples.
pub fn mean_pairwise_distance(samples: ArrayView2<f64>) -> f64 {
    let n = samples.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = samples.row(i);
        for j in i + 1..n {
            total += a
                .iter()
                .zip(samples.row(j))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Singular values (descending) of the latent covariance
/// `C = (1/N) sum (h_i - mean)(h_i - mean)^T`.
pub fn latent_spectrum(latents: ArrayView2<f64>) -> Result<Vec<f64>> {
    if latents.nrows() < 2 {
        return Err(Error::InvalidArgument("latent spectrum needs at least 2 latents".into()));
    }
    let (_, cov) = mean_and_covariance(latents, false);
    let mut vals: Vec<f64> = sym_eigen(&cov).eigenvalues.iter().map(|v| v.abs()).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Number of values above `threshold * max`.
pub fn spectrum_rank(spectrum: &[f64], threshold: f64) -> usize {
    let top = spectrum.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    spectrum.iter().filter(|v| **v > threshold * top).count()
}

/// Natural log of each value, floored at `1e-12` first.
pub fn log_spectrum(spectrum: &[f64]) -> Vec<f64> {
    spectrum.iter().map(|v| v.max(1e-12).ln()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exact `k` nearest rows of `set` to `anchor`, ascending by distance with
/// ties broken by index.
pub fn knn_probe(anchor: &[f64], set: ArrayView2<f64>, k: usize) -> Result<Vec<Neighbor>> {
    check_len("knn anchor width", set.ncols(), anchor.len())?;
    let mut all: Vec<Neighbor> = set
        .rows()
        .into_iter()
        .enumerate()
        .map(|(index, row)| Neighbor {
            index,
            distance: squared_distance(row, anchor).sqrt(),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Category(Category),
    Class(usize),
    Timestep(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::Category(c) => f.write_str(c.name()),
            Scope::Class(k) => write!(f, "class:{k}"),
            Scope::Timestep(t) => write!(f, "t:{t}"),
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown metric scope {s:?}"));
        match s {
            "all" => Ok(Scope::All),
            "head" => Ok(Scope::Category(Category::Head)),
            "body" => Ok(Scope::Category(Category::Body)),
            "tail" => Ok(Scope::Category(Category::Tail)),
            _ => {
                if let Some(k) = s.strip_prefix("class:") {
                    k.parse().map(Scope::Class).map_err(|_| bad())
                } else if let Some(t) = s.strip_prefix("t:") {
                    t.parse().map(Scope::Timestep).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub scope: Scope,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    /// `(timestep, singular values descending)`.
    pub spectra: Vec<(usize, Vec<f64>)>,
}

pub const REPORT_HEADER: &str = "metric,scope,value";
pub const SPECTRUM_HEADER: &str = "timestep,rank,singular_value";

impl MetricsReport {
    pub fn push(&mut self, metric: &str, scope: Scope, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            scope,
            value,
        });
    }

    pub fn get(&self, metric: &str, scope: Scope) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.scope == scope)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.metric, r.scope, r.value).expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format("missing metrics header".into()));
        }
        let mut report = MetricsReport::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad metrics row {line:?}")));
            }
            let value = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad metric value {:?}", parts[2])))?;
            report.push(parts[0], parts[1].parse()?, value);
        }
        Ok(report)
    }

    /// Spectra as `timestep,rank,singular_value` with 1-based ranks.
    pub fn spectrum_csv(&self) -> String {
        let mut out = format!("{SPECTRUM_HEADER}\n");
        for (t, values) in &self.spectra {
            for (i, v) in values.iter().enumerate() {
                writeln!(out, "{t},{},{v}", i + 1).expect("string write");
            }
        }
        out
    }
}

/// Inputs to [`evaluate`]. All samples are in original coordinates.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    /// Generated samples, `generated[k]` conditioned on class `k`.
    pub generated: &'a [Array2<f64>],
    /// Balanced draw from the ground-truth distribution.
    pub reference: &'a LabeledDataset,
    /// Training-set class counts, which decide the head/body/tail split.
    pub train_counts: &'a [usize],
    /// Unconditionally generated samples, if any.
    pub unconditional: Option<&'a Array2<f64>>,
    /// Encoder latents of generated samples at probe timesteps.
    pub probe_latents: &'a [(usize, Array2<f64>)],
}

fn stack(parts: &[&Array2<f64>], dim: usize) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, dim));
    }
    ndarray::concatenate(Axis(0), &views).expect("same widths")
}

/// Per-class, per-category and overall metrics.
///
/// Category Fréchet distances pool the category's generated samples and
/// compare them to the pooled reference samples of the same classes.
/// Category coverage is covered modes over total modes; category diversity is
/// the mean of the per-class values.
pub fn evaluate(inputs: EvalInputs<'_>) -> Result<MetricsReport> {
    let reference = inputs.reference;
    let classes = reference.classes();
    check_len("generated classes", classes, inputs.generated.len())?;
    check_len("training class counts", classes, inputs.train_counts.len())?;
    let split: CategorySplit = category_split(inputs.train_counts);
    let dim = reference.dim();
    let radius = reference.meta.coverage_radius;
    let centers = &reference.meta.mode_centers;
    let ref_by_class: Vec<Array2<f64>> = (0..classes).map(|k| reference.class_samples(k)).collect();

    let mut report = MetricsReport::default();
    let mut frechet = Vec::with_capacity(classes);
    let mut coverage = Vec::with_capacity(classes);
    let mut diversity = Vec::with_capacity(classes);
    for k in 0..classes {
        let g = &inputs.generated[k];
        check_len("generated sample width", dim, g.ncols())?;
        frechet.push(frechet_distance(g.view(), ref_by_class[k].view())?);
        coverage.push(mode_coverage(g.view(), &centers[k], radius));
        diversity.push(mean_pairwise_distance(g.view()));
    }

    let group = |members: &[usize]| -> Result<(f64, f64, f64)> {
        let gen: Vec<&Array2<f64>> = members.iter().map(|&k| &inputs.generated[k]).collect();
        let refs: Vec<&Array2<f64>> = members.iter().map(|&k| &ref_by_class[k]).collect();
        let fd = frechet_distance(stack(&gen, dim).view(), stack(&refs, dim).view())?;
        let modes: usize = members.iter().map(|&k| centers[k].len()).sum();
        let covered: f64 = members
            .iter()
            .map(|&k| coverage[k] * centers[k].len() as f64)
            .sum();
        let div = members.iter().map(|&k| diversity[k]).sum::<f64>() / members.len() as f64;
        Ok((fd, covered / modes.max(1) as f64, div))
    };

    let all: Vec<usize> = (0..classes).collect();
    let mut scopes = vec![(Scope::All, all.as_slice())];
    for cat in Category::ALL {
        if !split.classes(cat).is_empty() {
            scopes.push((Scope::Category(cat), split.classes(cat)));
        }
    }
    for (scope, members) in scopes {
        let (fd, cov, div) = group(members)?;
        report.push("frechet", scope, fd);
        report.push("coverage", scope, cov);
        report.push("diversity", scope, div);
    }
    for k in 0..classes {
        report.push("frechet", Scope::Class(k), frechet[k]);
        report.push("coverage", Scope::Class(k), coverage[k]);
        report.push("diversity", Scope::Class(k), diversity[k]);
    }
    if let Some(u) = inputs.unconditional {
        let every_mode: Vec<Vec<f64>> = centers.iter().flatten().cloned().collect();
        report.push("uncond_coverage", Scope::All, mode_coverage(u.view(), &every_mode, radius));
        report.push("uncond_diversity", Scope::All, mean_pairwise_distance(u.view()));
    }
    for (t, latents) in inputs.probe_latents {
        let spectrum = latent_spectrum(latents.view())?;
        report.push(
            "spectrum_rank",
            Scope::Timestep(*t),
            spectrum_rank(&spectrum, SPECTRUM_RANK_THRESHOLD) as f64,
        );
        report.spectra.push((*t, spectrum));
    }
    Ok(report)
}
