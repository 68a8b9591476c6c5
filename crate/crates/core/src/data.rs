//! Long-tailed synthetic datasets with known ground-truth modes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Spacing of the mode grid for the Gaussian-mixture generator.
pub const MODE_SPACING: f64 = 3.0;

/// Per-class counts decaying exponentially from `n_max` to `n_max * rho`:
/// `n_k = max(1, round(n_max * rho^(k / (K - 1))))`.
pub fn longtail_counts(n_max: usize, classes: usize, rho: f64) -> Result<Vec<usize>> {
    if n_max < 1 {
        return Err(Error::InvalidArgument("n_max must be >= 1".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho must be in (0, 1], got {rho}")));
    }
    if classes == 0 || (classes < 2 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need K >= 2 for an imbalanced split, got K={classes}"
        )));
    }
    if classes == 1 {
        return Ok(vec![n_max]);
    }
    let span = (classes - 1) as f64;
    Ok((0..classes)
        .map(|k| {
            let n = (n_max as f64 * rho.powf(k as f64 / span)).round() as usize;
            n.max(1)
        })
        .collect())
}

/// Affine map from original to training coordinates: `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Centers the bounding box of `points` and divides by its largest
    /// half-extent, so the points land in `[-1, 1]`.
    pub fn fit(points: &[Vec<f64>]) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for (k, v) in p.iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        let shift = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let half = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| 0.5 * (h - l))
            .fold(0.0, f64::max);
        Self {
            shift,
            scale: if half > 0.0 { half } else { 1.0 },
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.shift) {
            *v = (*v - s) / self.scale;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.shift) {
            *v = *v * self.scale + s;
        }
    }

    pub fn apply_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            self.apply(row.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn invert_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            self.invert(row.as_slice_mut().expect("standard layout"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    GaussianMixture {
        classes: usize,
        modes_per_class: usize,
        n_max: usize,
        rho: f64,
        noise_std: f64,
    },
    Shapes8x8 {
        classes: usize,
        n_max: usize,
        rho: f64,
    },
}

impl Generator {
    pub fn classes(&self) -> usize {
        match self {
            Generator::GaussianMixture { classes, .. } | Generator::Shapes8x8 { classes, .. } => *classes,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::GaussianMixture { .. } => 2,
            Generator::Shapes8x8 { .. } => 64,
        }
    }

    pub fn counts(&self) -> Result<Vec<usize>> {
        match self {
            Generator::GaussianMixture { classes, n_max, rho, .. }
            | Generator::Shapes8x8 { classes, n_max, rho } => longtail_counts(*n_max, *classes, *rho),
        }
    }

    /// Same generator with a balanced `per_class` budget; used for reference
    /// sets drawn from the ground-truth distribution.
    pub fn balanced(&self, per_class: usize) -> Self {
        let mut g = self.clone();
        match &mut g {
            Generator::GaussianMixture { n_max, rho, .. } | Generator::Shapes8x8 { n_max, rho, .. } => {
                *n_max = per_class;
                *rho = 1.0;
            }
        }
        g
    }

    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        let counts = self.counts()?;
        let mut ds = match self {
            Generator::GaussianMixture {
                classes,
                modes_per_class,
                noise_std,
                ..
            } => gaussian_mixture_dataset(*classes, *modes_per_class, &counts, *noise_std, seed)?,
            Generator::Shapes8x8 { classes, .. } => shapes8x8_dataset(*classes, &counts, seed)?,
        };
        ds.meta.generator = Some(self.clone());
        Ok(ds)
    }
}

/// Everything about a dataset except the sample rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: Option<Generator>,
    pub seed: u64,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    /// `mode_centers[k]` lists the ground-truth modes of class `k`, in
    /// original coordinates.
    pub mode_centers: Vec<Vec<Vec<f64>>>,
    pub normalization: Normalization,
    /// Radius within which a sample counts as hitting a mode.
    pub coverage_radius: f64,
}

/// Samples (original coordinates) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(samples: Array2<f64>, labels: Vec<usize>, meta: DatasetMeta) -> Result<Self> {
        check_len("dataset labels", samples.nrows(), labels.len())?;
        check_len("dataset dimension", meta.dim, samples.ncols())?;
        let classes = meta.class_counts.len();
        let mut seen = vec![0usize; classes];
        for &l in &labels {
            if l >= classes {
                return Err(Error::ClassIndex { index: l, classes });
            }
            seen[l] += 1;
        }
        if seen != meta.class_counts {
            return Err(Error::InvalidArgument(format!(
                "labels give class counts {seen:?}, metadata says {:?}",
                meta.class_counts
            )));
        }
        Ok(Self { samples, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn classes(&self) -> usize {
        self.meta.class_counts.len()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    /// Samples in training coordinates.
    pub fn normalized_samples(&self) -> Array2<f64> {
        let mut x = self.samples.clone();
        self.meta.normalization.apply_rows(&mut x);
        x
    }

    /// Rows belonging to class `k`.
    pub fn class_samples(&self, k: usize) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == k).collect();
        self.samples.select(ndarray::Axis(0), &idx)
    }

    /// Writes `path` as CSV (`label,x0,...`) and `path.meta.json` alongside.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("label");
        for k in 0..self.dim() {
            write!(out, ",x{k}").expect("string write");
        }
        out.push('\n');
        for (row, label) in self.samples.rows().into_iter().zip(&self.labels) {
            write!(out, "{label}").expect("string write");
            for v in row {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(meta_path(path), meta + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)
            .map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
        if header.split(',').count() != meta.dim + 1 || !header.starts_with("label") {
            return Err(Error::Format(format!("unexpected dataset header {header:?}")));
        }
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let label = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Format(format!("bad label on data line {}", lineno + 1)))?;
            labels.push(label);
            let before = values.len();
            for f in fields {
                values.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value {f:?} on data line {}", lineno + 1)))?,
                );
            }
            check_len("dataset row width", meta.dim, values.len() - before)?;
        }
        let samples = Array2::from_shape_vec((labels.len(), meta.dim), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(samples, labels, meta)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// 2-D mixture: class `k`, mode `m` is centered at `(3k, 3m)`. Samples of a
/// class are assigned to its modes round-robin, so every mode of a class with
/// at least `M` samples appears in the data.
pub fn gaussian_mixture_dataset(
    classes: usize,
    modes_per_class: usize,
    counts: &[usize],
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    check_len("class counts", classes, counts.len())?;
    if modes_per_class == 0 {
        return Err(Error::InvalidArgument("modes_per_class must be >= 1".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let centers: Vec<Vec<Vec<f64>>> = (0..classes)
        .map(|k| {
            (0..modes_per_class)
                .map(|m| vec![MODE_SPACING * k as f64, MODE_SPACING * m as f64])
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut samples = Array2::zeros((total, 2));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (k, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let c = &centers[k][j % modes_per_class];
            for d in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                samples[[row, d]] = c[d] + noise_std * z;
            }
            labels.push(k);
            row += 1;
        }
    }
    let all: Vec<Vec<f64>> = centers.iter().flatten().cloned().collect();
    let meta = DatasetMeta {
        generator: None,
        seed,
        dim: 2,
        class_counts: counts.to_vec(),
        normalization: Normalization::fit(&all),
        mode_centers: centers,
        coverage_radius: 3.0 * noise_std,
    };
    LabeledDataset::new(samples, labels, meta)
}

/// Number of 8x8 shape families available.
pub const SHAPE_FAMILIES: usize = 10;

/// Variant counts per family, in family order: horizontal bar, vertical bar,
/// diagonal, anti-diagonal, filled square, square outline, plus, X, L, T.
pub const SHAPE_VARIANTS: [usize; SHAPE_FAMILIES] = [12, 12, 9, 9, 13, 13, 16, 16, 9, 16];

type Canvas = [[bool; 8]; 8];

fn lit(cells: impl IntoIterator<Item = (usize, usize)>) -> Canvas {
    let mut c = [[false; 8]; 8];
    for (r, col) in cells {
        c[r][col] = true;
    }
    c
}

fn transpose(c: Canvas) -> Canvas {
    let mut t = [[false; 8]; 8];
    for r in 0..8 {
        for col in 0..8 {
            t[col][r] = c[r][col];
        }
    }
    t
}

fn hbars() -> Vec<Canvas> {
    let mut out = Vec::new();
    for r in 1..7 {
        out.push(lit((1..7).map(|c| (r, c))));
        out.push(lit((2..6).map(|c| (r, c))));
    }
    out
}

fn diagonals(anti: bool) -> Vec<Canvas> {
    let mut out = Vec::new();
    for r0 in 0..3 {
        for c0 in 0..3 {
            out.push(lit((0..6).map(|i| {
                let c = c0 + i;
                (r0 + i, if anti { 7 - c } else { c })
            })));
        }
    }
    out
}

fn squares(outline: bool) -> Vec<Canvas> {
    let mut out = Vec::new();
    let mut push = |size: usize, r0: usize, c0: usize| {
        out.push(lit((r0..r0 + size).flat_map(|r| (c0..c0 + size).map(move |c| (r, c))).filter(
            |&(r, c)| !outline || r == r0 || c == c0 || r == r0 + size - 1 || c == c0 + size - 1,
        )));
    };
    let (small, large) = if outline { ((4, [0, 2, 4]), (5, [0, 3])) } else { ((2, [1, 3, 5]), (3, [1, 4])) };
    for &r in &small.1 {
        for &c in &small.1 {
            push(small.0, r, c);
        }
    }
    for &r in &large.1 {
        for &c in &large.1 {
            push(large.0, r, c);
        }
    }
    out
}

fn crosses(diagonal: bool) -> Vec<Canvas> {
    let mut out = Vec::new();
    for r in 2..6 {
        for c in 2..6 {
            let mut cells = vec![(r, c)];
            for a in 1..=2 {
                if diagonal {
                    cells.extend([(r - a, c - a), (r - a, c + a), (r + a, c - a), (r + a, c + a)]);
                } else {
                    cells.extend([(r - a, c), (r + a, c), (r, c - a), (r, c + a)]);
                }
            }
            out.push(lit(cells));
        }
    }
    out
}

fn ells() -> Vec<Canvas> {
    let mut out = Vec::new();
    for r in 4..7 {
        for c in 1..4 {
            let mut cells: Vec<_> = (0..4).map(|i| (r - i, c)).collect();
            cells.extend((1..4).map(|i| (r, c + i)));
            out.push(lit(cells));
        }
    }
    out
}

fn tees() -> Vec<Canvas> {
    let mut out = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let mut cells: Vec<_> = (0..5).map(|i| (r, c + i)).collect();
            cells.extend((1..4).map(|i| (r + i, c + 2)));
            out.push(lit(cells));
        }
    }
    out
}

/// All canonical variants of a shape family.
pub fn shape_variants(family: usize) -> Result<Vec<Vec<f64>>> {
    let canvases = match family {
        0 => hbars(),
        1 => hbars().into_iter().map(transpose).collect(),
        2 => diagonals(false),
        3 => diagonals(true),
        4 => squares(false),
        5 => squares(true),
        6 => crosses(false),
        7 => crosses(true),
        8 => ells(),
        9 => tees(),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "only {SHAPE_FAMILIES} shape families exist, asked for family {family}"
            )))
        }
    };
    Ok(canvases
        .iter()
        .map(|c| c.iter().flatten().map(|&on| if on { 1.0 } else { -1.0 }).collect())
        .collect())
}

/// 8x8 images (64-dim, pixels in {-1, 1}); class `k` is shape family `k`, and
/// each sample is one of the family's enumerated variants, visited in a
/// seeded order.
pub fn shapes8x8_dataset(classes: usize, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
    check_len("class counts", classes, counts.len())?;
    if classes > SHAPE_FAMILIES {
        return Err(Error::InvalidArgument(format!(
            "K = {classes} exceeds the {SHAPE_FAMILIES} available shape families"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = counts.iter().sum();
    let mut samples = Array2::zeros((total, 64));
    let mut labels = Vec::with_capacity(total);
    let mut centers = Vec::with_capacity(classes);
    let mut row = 0;
    for (k, &n) in counts.iter().enumerate() {
        let variants = shape_variants(k)?;
        let mut order: Vec<usize> = (0..variants.len()).collect();
        order.shuffle(&mut rng);
        for j in 0..n {
            let v = &variants[order[j % order.len()]];
            samples.row_mut(row).assign(&ArrayView1::from(v.as_slice()));
            labels.push(k);
            row += 1;
        }
        centers.push(variants);
    }
    let meta = DatasetMeta {
        generator: None,
        seed,
        dim: 64,
        class_counts: counts.to_vec(),
        mode_centers: centers,
        normalization: Normalization::identity(64),
        // One flipped pixel moves a sample by 2 in L2.
        coverage_radius: 2.0,
    };
    LabeledDataset::new(samples, labels, meta)
}

/// Class-index sets of the head, body and tail categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySplit {
    pub head: Vec<usize>,
    pub body: Vec<usize>,
    pub tail: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Head,
    Body,
    Tail,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Head, Category::Body, Category::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Category::Head => "head",
            Category::Body => "body",
            Category::Tail => "tail",
        }
    }
}

impl CategorySplit {
    pub fn classes(&self, cat: Category) -> &[usize] {
        match cat {
            Category::Head => &self.head,
            Category::Body => &self.body,
            Category::Tail => &self.tail,
        }
    }
}

/// Head / body / tail split with `floor(K/3)` classes in head and tail and
/// the remainder in body (10 -> 3/4/3, 200 -> 66/68/66).
pub fn category_split(class_counts: &[usize]) -> CategorySplit {
    category_split_with(class_counts, 1.0 / 3.0)
}

/// Split with `floor(fraction * K)` classes in each of head and tail.
/// Classes are ordered by descending count, ties by index.
pub fn category_split_with(class_counts: &[usize], fraction: f64) -> CategorySplit {
    let k = class_counts.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| class_counts[*b].cmp(&class_counts[*a]));
    let edge = ((fraction.clamp(0.0, 0.5) * k as f64) + 1e-9).floor() as usize;
    CategorySplit {
        head: order[..edge].to_vec(),
        body: order[edge..k - edge].to_vec(),
        tail: order[k - edge..].to_vec(),
    }
}
