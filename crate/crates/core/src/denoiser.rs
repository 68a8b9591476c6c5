//! The noise-estimation network: a 3-layer MLP encoder producing a latent `h`
//! followed by a 3-layer MLP decoder producing the noise estimate.
//!
//! Both halves are conditioned by concatenation: the encoder sees
//! `[x_t, time_embedding(t), class_embed[c]]`, the decoder sees
//! `[h, time_embedding(t)]`. Row `K` of the class-embedding table is the
//! null (unconditional) token.
//!
//! All passes are batched: row `b` of every cached matrix belongs to sample
//! `b`, and rows never interact, so a batch of one is the per-sample network.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Normal, Uniform};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    /// Makes the network affine; used to check gradients against products of
    /// weight matrices.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Identity),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub d_in: usize,
    pub d_time: usize,
    pub d_class: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
    /// Number of real classes; the null token is row `classes`.
    pub classes: usize,
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_in: 2,
            d_time: 32,
            d_class: 16,
            d_hidden: 128,
            d_latent: 64,
            classes: 10,
            activation: Activation::Silu,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_time", self.d_time),
            ("d_class", self.d_class),
            ("d_hidden", self.d_hidden),
            ("d_latent", self.d_latent),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.d_time % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_time must be even, got {}",
                self.d_time
            )));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> [(usize, usize); 3] {
        [
            (self.d_in + self.d_time + self.d_class, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_latent),
        ]
    }

    fn decoder_dims(&self) -> [(usize, usize); 3] {
        [
            (self.d_latent + self.d_time, self.d_hidden),
            (self.d_hidden, self.d_hidden),
            (self.d_hidden, self.d_in),
        ]
    }
}

/// Class conditioning for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    /// Row of the class-embedding table used for this label.
    pub fn row(self, classes: usize) -> Result<usize> {
        match self {
            Label::Class(k) if k < classes => Ok(k),
            Label::Class(k) => Err(Error::ClassIndex { index: k, classes }),
            Label::Null => Ok(classes),
        }
    }
}

/// Sinusoidal embedding: pairs `(sin(t w_j), cos(t w_j))` with
/// `w_j = 10000^(-2j/d_time)`.
pub fn time_embedding(t: usize, steps: usize, d_time: usize) -> Result<Vec<f64>> {
    if d_time % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_time must be even, got {d_time}"
        )));
    }
    if t == 0 || t > steps {
        return Err(Error::Timestep { t, steps });
    }
    let mut out = vec![0.0; d_time];
    fill_time_embedding(t as f64, &mut out);
    Ok(out)
}

fn fill_time_embedding(t: f64, out: &mut [f64]) {
    let d = out.len();
    for j in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * j as f64 / d as f64);
        out[2 * j] = (t * freq).sin();
        out[2 * j + 1] = (t * freq).cos();
    }
}

fn time_embedding_rows(steps: &[usize], d_time: usize) -> Array2<f64> {
    let mut out = Array2::zeros((steps.len(), d_time));
    for (mut row, &t) in out.rows_mut().into_iter().zip(steps) {
        fill_time_embedding(t as f64, row.as_slice_mut().expect("standard layout"));
    }
    out
}

/// An affine layer `y = x W + b` with `W` stored `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }
}

/// All learnable tensors. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// `(classes + 1, d_class)`; the last row is the null token.
    pub class_embed: Array2<f64>,
    pub encoder: [Affine; 3],
    pub decoder: [Affine; 3],
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_dims();
        let dec = config.decoder_dims();
        Ok(Self {
            config,
            class_embed: Array2::zeros((config.classes + 1, config.d_class)),
            encoder: enc.map(|(i, o)| Affine::zeros(i, o)),
            decoder: dec.map(|(i, o)| Affine::zeros(i, o)),
        })
    }

    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases, class
    /// embeddings `N(0, 0.02^2)`.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let embed = Normal::new(0.0, 0.02).expect("valid std");
        params.class_embed.mapv_inplace(|_| rng.sample(embed));
        for layer in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
            let bound = (1.0 / layer.weight.nrows() as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("valid bounds");
            layer.weight.mapv_inplace(|_| rng.sample(dist));
        }
        Ok(params)
    }

    /// Tensors in checkpoint order: class embeddings, then encoder layers,
    /// then decoder layers, each as weight followed by bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.class_embed.as_slice().expect("standard layout")];
        for layer in self.encoder.iter().chain(&self.decoder) {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            class_embed,
            encoder,
            decoder,
            ..
        } = self;
        let mut out = vec![class_embed.as_slice_mut().expect("standard layout")];
        for layer in encoder.iter_mut().chain(decoder.iter_mut()) {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &DenoiserParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    config: DenoiserConfig,
    embed_rows: Vec<usize>,
    enc_in: Array2<f64>,
    enc_pre: [Array2<f64>; 2],
    enc_act: [Array2<f64>; 2],
    latent: Array2<f64>,
    dec_in: Array2<f64>,
    dec_pre: [Array2<f64>; 2],
    dec_act: [Array2<f64>; 2],
    output: Array2<f64>,
}

impl ForwardTrace {
    /// Encoder outputs `h`, one row per sample.
    pub fn latent(&self) -> ArrayView2<'_, f64> {
        self.latent.view()
    }

    /// Noise estimates, one row per sample.
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.output.view()
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

fn activate(act: Activation, pre: &Array2<f64>) -> Array2<f64> {
    pre.mapv(|z| act.apply(z))
}

fn check_batch(
    params: &DenoiserParams,
    x_t: &ArrayView2<f64>,
    steps: &[usize],
    rows: &[usize],
) -> Result<()> {
    let cfg = &params.config;
    check_len("denoiser input width", cfg.d_in, x_t.ncols())?;
    check_len("denoiser timesteps", x_t.nrows(), steps.len())?;
    check_len("denoiser labels", x_t.nrows(), rows.len())?;
    if let Some(&t) = steps.iter().find(|t| **t == 0) {
        return Err(Error::Timestep { t, steps: 0 });
    }
    if let Some(&r) = rows.iter().find(|r| **r > cfg.classes) {
        return Err(Error::ClassIndex {
            index: r,
            classes: cfg.classes,
        });
    }
    Ok(())
}

/// Runs the network on a batch, conditioning row `b` on embedding-table row
/// `embed_rows[b]` (index `classes` is the null token).
pub fn forward_rows(
    params: &DenoiserParams,
    x_t: ArrayView2<f64>,
    steps: &[usize],
    embed_rows: &[usize],
) -> Result<ForwardTrace> {
    check_batch(params, &x_t, steps, embed_rows)?;
    let cfg = params.config;
    let act = cfg.activation;
    let temb = time_embedding_rows(steps, cfg.d_time);
    let cemb = params.class_embed.select(Axis(0), embed_rows);

    let enc_in = concatenate![Axis(1), x_t, temb, cemb];
    let pre0 = params.encoder[0].apply(&enc_in);
    let act0 = activate(act, &pre0);
    let pre1 = params.encoder[1].apply(&act0);
    let act1 = activate(act, &pre1);
    let latent = params.encoder[2].apply(&act1);

    let dec_in = concatenate![Axis(1), latent, temb];
    let dpre0 = params.decoder[0].apply(&dec_in);
    let dact0 = activate(act, &dpre0);
    let dpre1 = params.decoder[1].apply(&dact0);
    let dact1 = activate(act, &dpre1);
    let output = params.decoder[2].apply(&dact1);

    Ok(ForwardTrace {
        config: cfg,
        embed_rows: embed_rows.to_vec(),
        enc_in,
        enc_pre: [pre0, pre1],
        enc_act: [act0, act1],
        latent,
        dec_in,
        dec_pre: [dpre0, dpre1],
        dec_act: [dact0, dact1],
        output,
    })
}

/// Batched forward pass with per-row labels.
pub fn forward_batch(
    params: &DenoiserParams,
    x_t: ArrayView2<f64>,
    steps: &[usize],
    labels: &[Label],
) -> Result<ForwardTrace> {
    let rows = labels
        .iter()
        .map(|l| l.row(params.config.classes))
        .collect::<Result<Vec<_>>>()?;
    forward_rows(params, x_t, steps, &rows)
}

/// Single-sample forward pass.
pub fn forward(params: &DenoiserParams, x_t: &[f64], t: usize, label: Label) -> Result<ForwardTrace> {
    let x = ArrayView2::from_shape((1, x_t.len()), x_t)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    forward_batch(params, x, &[t], &[label])
}

pub fn encode(params: &DenoiserParams, x_t: &[f64], t: usize, label: Label) -> Result<Vec<f64>> {
    Ok(forward(params, x_t, t, label)?.latent.row(0).to_vec())
}

/// Decoder half on its own: `h` and `t` to a noise estimate.
pub fn decode(params: &DenoiserParams, h: &[f64], t: usize) -> Result<Vec<f64>> {
    let cfg = params.config;
    check_len("decoder latent width", cfg.d_latent, h.len())?;
    if t == 0 {
        return Err(Error::Timestep { t, steps: 0 });
    }
    let h = Array2::from_shape_vec((1, h.len()), h.to_vec()).expect("1-row shape");
    let temb = time_embedding_rows(&[t], cfg.d_time);
    let mut z = concatenate![Axis(1), h, temb];
    for (i, layer) in params.decoder.iter().enumerate() {
        z = layer.apply(&z);
        if i < 2 {
            z = activate(cfg.activation, &z);
        }
    }
    Ok(z.row(0).to_vec())
}

/// Gradients from [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: DenoiserParams,
    /// `dL/dx_t`, one row per sample.
    pub input: Array2<f64>,
}

fn affine_backward(
    layer: &Affine,
    input: &Array2<f64>,
    grad_out: &Array2<f64>,
    grad_layer: &mut Affine,
) -> Array2<f64> {
    grad_layer.weight = input.t().dot(grad_out);
    grad_layer.bias = grad_out.sum_axis(Axis(0));
    grad_out.dot(&layer.weight.t())
}

fn through_activation(act: Activation, grad: &mut Array2<f64>, pre: &Array2<f64>) {
    if act == Activation::Identity {
        return;
    }
    grad.zip_mut_with(pre, |g, &z| *g *= act.derivative(z));
}

/// Reverse-mode pass. `d_output` is `dL/d(eps_hat)`; `d_latent`, when given,
/// is an additional upstream gradient attached directly at `h`.
pub fn backward(
    params: &DenoiserParams,
    trace: &ForwardTrace,
    d_output: ArrayView2<f64>,
    d_latent: Option<ArrayView2<f64>>,
) -> Result<Backward> {
    let cfg = params.config;
    if cfg != trace.config {
        return Err(Error::InvalidArgument(
            "trace was produced by a network with a different configuration".into(),
        ));
    }
    let batch = trace.batch_size();
    check_len("d_output rows", batch, d_output.nrows())?;
    check_len("d_output width", cfg.d_in, d_output.ncols())?;
    if let Some(dl) = &d_latent {
        check_len("d_latent rows", batch, dl.nrows())?;
        check_len("d_latent width", cfg.d_latent, dl.ncols())?;
    }
    let act = cfg.activation;
    let mut grads = DenoiserParams::zeros(cfg)?;

    // Decoder.
    let g = d_output.to_owned();
    let mut g = affine_backward(&params.decoder[2], &trace.dec_act[1], &g, &mut grads.decoder[2]);
    through_activation(act, &mut g, &trace.dec_pre[1]);
    let mut g = affine_backward(&params.decoder[1], &trace.dec_act[0], &g, &mut grads.decoder[1]);
    through_activation(act, &mut g, &trace.dec_pre[0]);
    let g_dec_in = affine_backward(&params.decoder[0], &trace.dec_in, &g, &mut grads.decoder[0]);

    let mut g_latent = g_dec_in.slice(s![.., ..cfg.d_latent]).to_owned();
    if let Some(dl) = d_latent {
        g_latent += &dl;
    }

    // Encoder.
    let mut g = affine_backward(&params.encoder[2], &trace.enc_act[1], &g_latent, &mut grads.encoder[2]);
    through_activation(act, &mut g, &trace.enc_pre[1]);
    let mut g = affine_backward(&params.encoder[1], &trace.enc_act[0], &g, &mut grads.encoder[1]);
    through_activation(act, &mut g, &trace.enc_pre[0]);
    let g_enc_in = affine_backward(&params.encoder[0], &trace.enc_in, &g, &mut grads.encoder[0]);

    let class_offset = cfg.d_in + cfg.d_time;
    for (b, &row) in trace.embed_rows.iter().enumerate() {
        let src = g_enc_in.slice(s![b, class_offset..]);
        let mut dst = grads.class_embed.row_mut(row);
        dst += &src;
    }
    let input = g_enc_in.slice(s![.., ..cfg.d_in]).to_owned();
    Ok(Backward {
        params: grads,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            d_in: 3,
            d_time: 4,
            d_class: 2,
            d_hidden: 5,
            d_latent: 4,
            classes: 3,
            activation: Activation::Silu,
        }
    }

    fn random_params(cfg: DenoiserConfig, seed: u64) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DenoiserParams::init(cfg, &mut rng).unwrap();
        // Non-zero biases so the oracle exercises them.
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    // Independent per-sample re-implementation with explicit loops.
    fn oracle_layer(w: &Array2<f64>, b: &Array1<f64>, x: &[f64], silu: bool) -> Vec<f64> {
        (0..w.ncols())
            .map(|j| {
                let mut acc = b[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * w[[i, j]];
                }
                if silu {
                    acc / (1.0 + (-acc).exp())
                } else {
                    acc
                }
            })
            .collect()
    }

    fn oracle_embedding(t: usize, d: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for j in 0..d / 2 {
            let w = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
            v.push((t as f64 * w).sin());
            v.push((t as f64 * w).cos());
        }
        v
    }

    fn oracle_encode(p: &DenoiserParams, x: &[f64], t: usize, row: usize) -> Vec<f64> {
        let mut z: Vec<f64> = x.to_vec();
        z.extend(oracle_embedding(t, p.config.d_time));
        z.extend(p.class_embed.row(row).iter());
        for (i, l) in p.encoder.iter().enumerate() {
            z = oracle_layer(&l.weight, &l.bias, &z, i < 2);
        }
        z
    }

    fn oracle_decode(p: &DenoiserParams, h: &[f64], t: usize) -> Vec<f64> {
        let mut z: Vec<f64> = h.to_vec();
        z.extend(oracle_embedding(t, p.config.d_time));
        for (i, l) in p.decoder.iter().enumerate() {
            z = oracle_layer(&l.weight, &l.bias, &z, i < 2);
        }
        z
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(1, 10, 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((e[0] - 0.84147).abs() < 1e-5);
        assert!((e[3] - 0.99995).abs() < 1e-5);
        let mut zero = vec![0.0; 6];
        fill_time_embedding(0.0, &mut zero);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        for t in 1..=1000 {
            assert!(time_embedding(t, 1000, 32)
                .unwrap()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(time_embedding(1, 10, 3).is_err());
        assert!(time_embedding(11, 10, 4).is_err());
    }

    #[test]
    fn zero_params_give_bias() {
        let cfg = small_config();
        let mut p = DenoiserParams::zeros(cfg).unwrap();
        assert_eq!(encode(&p, &[1.0, 2.0, 3.0], 5, Label::Class(1)).unwrap(), vec![0.0; 4]);
        p.encoder[2].bias = Array1::from(vec![0.5, -1.0, 2.0, 3.0]);
        p.decoder[2].bias = Array1::from(vec![7.0, 8.0, 9.0]);
        assert_eq!(
            encode(&p, &[1.0, 2.0, 3.0], 5, Label::Null).unwrap(),
            vec![0.5, -1.0, 2.0, 3.0]
        );
        assert_eq!(decode(&p, &[1.0; 4], 3).unwrap(), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn matches_oracle() {
        let cfg = small_config();
        let p = random_params(cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let t = 1 + trial * 37;
            let label = if trial % 4 == 0 { Label::Null } else { Label::Class(trial % 3) };
            let row = label.row(3).unwrap();
            let h = encode(&p, &x, t, label).unwrap();
            let h_ref = oracle_encode(&p, &x, t, row);
            for (a, b) in h.iter().zip(&h_ref) {
                assert!((a - b).abs() < 1e-12);
            }
            let e = decode(&p, &h, t).unwrap();
            let e_ref = oracle_decode(&p, &h_ref, t);
            for (a, b) in e.iter().zip(&e_ref) {
                assert!((a - b).abs() < 1e-12);
            }
            let trace = forward(&p, &x, t, label).unwrap();
            assert_eq!(trace.latent().row(0).to_vec(), h);
            assert_eq!(trace.output().row(0).to_vec(), e);
        }
    }

    #[test]
    fn deterministic_and_null_equivalent() {
        let cfg = small_config();
        let p = random_params(cfg, 2);
        let x = [0.3, -0.2, 1.1];
        assert_eq!(
            encode(&p, &x, 7, Label::Class(2)).unwrap(),
            encode(&p, &x, 7, Label::Class(2)).unwrap()
        );
        let a = forward(&p, &x, 7, Label::Null).unwrap();
        let xv = ArrayView2::from_shape((1, 3), &x[..]).unwrap();
        let b = forward_rows(&p, xv, &[7], &[cfg.classes]).unwrap();
        assert_eq!(a.output(), b.output());
        assert_eq!(a.latent(), b.latent());
    }

    #[test]
    fn conditioning_changes_latent() {
        let cfg = small_config();
        let p = random_params(cfg, 8);
        let x = [0.5, 0.5, -0.5];
        let hs: Vec<_> = (0..3).map(|k| encode(&p, &x, 4, Label::Class(k)).unwrap()).collect();
        assert_ne!(hs[0], hs[1]);
        assert_ne!(hs[1], hs[2]);
        assert_ne!(hs[0], encode(&p, &x, 4, Label::Null).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_config();
        let p = random_params(cfg, 1);
        assert!(matches!(
            encode(&p, &[0.0; 3], 1, Label::Class(3)),
            Err(Error::ClassIndex { index: 3, classes: 3 })
        ));
        assert!(encode(&p, &[0.0; 2], 1, Label::Null).is_err());
        assert!(encode(&p, &[0.0; 3], 0, Label::Null).is_err());
        assert!(decode(&p, &[0.0; 3], 1).is_err());
        let mut odd = cfg;
        odd.d_time = 3;
        assert!(DenoiserParams::zeros(odd).is_err());
        let mut other = cfg;
        other.d_hidden = 6;
        let q = random_params(other, 1);
        let trace = forward(&q, &[0.0; 3], 1, Label::Null).unwrap();
        let d = Array2::zeros((1, 3));
        assert!(backward(&p, &trace, d.view(), None).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_config();
        let p = random_params(cfg, 3);
        let x = Array2::from_shape_vec((2, 3), vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
        let trace = forward_batch(&p, x.view(), &[3, 9], &[Label::Class(0), Label::Null]).unwrap();
        let back = backward(&p, &trace, Array2::zeros((2, 3)).view(), Some(Array2::zeros((2, 4)).view())).unwrap();
        assert_eq!(back.params.squared_norm(), 0.0);
        assert!(back.input.iter().all(|v| *v == 0.0));
    }

    fn scalar_loss(p: &DenoiserParams, x: &Array2<f64>, steps: &[usize], labels: &[Label], wo: &Array2<f64>, wl: &Array2<f64>) -> f64 {
        let tr = forward_batch(p, x.view(), steps, labels).unwrap();
        (&tr.output() * wo).sum() + (&tr.latent() * wl).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_config();
        let p = random_params(cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((3, 3), |_| rng.sample(StandardNormal));
        let steps = [2, 50, 400];
        let labels = [Label::Class(1), Label::Null, Label::Class(1)];
        let wo = Array2::from_shape_fn((3, 3), |_| rng.sample(StandardNormal));
        let wl = Array2::from_shape_fn((3, 4), |_| rng.sample(StandardNormal));
        let trace = forward_batch(&p, x.view(), &steps, &labels).unwrap();
        let back = backward(&p, &trace, wo.view(), Some(wl.view())).unwrap();

        let h = 1e-5;
        let analytic = back.params.tensors().concat();
        let n = analytic.len();
        for idx in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            set_flat(&mut plus, idx, h);
            set_flat(&mut minus, idx, -h);
            let numeric = (scalar_loss(&plus, &x, &steps, &labels, &wo, &wl)
                - scalar_loss(&minus, &x, &steps, &labels, &wo, &wl))
                / (2.0 * h);
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1e-8);
            assert!(err < 1e-4 || (analytic[idx] - numeric).abs() < 1e-9, "param {idx}: {} vs {numeric}", analytic[idx]);
        }
        for b in 0..3 {
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[b, k]] += h;
                xm[[b, k]] -= h;
                let numeric = (scalar_loss(&p, &xp, &steps, &labels, &wo, &wl)
                    - scalar_loss(&p, &xm, &steps, &labels, &wo, &wl))
                    / (2.0 * h);
                assert!((back.input[[b, k]] - numeric).abs() < 1e-7);
            }
        }
    }

    fn set_flat(p: &mut DenoiserParams, mut idx: usize, delta: f64) {
        for t in p.tensors_mut() {
            if idx < t.len() {
                t[idx] += delta;
                return;
            }
            idx -= t.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn linear_network_input_jacobian_is_weight_product() {
        let mut cfg = small_config();
        cfg.activation = Activation::Identity;
        let p = random_params(cfg, 13);
        let x = [0.4, -0.7, 0.2];
        let trace = forward(&p, &x, 10, Label::Class(0)).unwrap();
        // d eps / d x = W_e0[x rows] W_e1 W_e2 W_d0[h rows] W_d1 W_d2.
        let we0 = p.encoder[0].weight.slice(s![..cfg.d_in, ..]);
        let wd0 = p.decoder[0].weight.slice(s![..cfg.d_latent, ..]);
        let jac = we0
            .dot(&p.encoder[1].weight)
            .dot(&p.encoder[2].weight)
            .dot(&wd0)
            .dot(&p.decoder[1].weight)
            .dot(&p.decoder[2].weight);
        for k in 0..cfg.d_in {
            let mut upstream = Array2::zeros((1, cfg.d_in));
            upstream[[0, k]] = 1.0;
            let back = backward(&p, &trace, upstream.view(), None).unwrap();
            for i in 0..cfg.d_in {
                assert!((back.input[[0, i]] - jac[[i, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_follows_distributions() {
        let cfg = DenoiserConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DenoiserParams::init(cfg, &mut rng).unwrap();
        for l in p.encoder.iter().chain(&p.decoder) {
            let bound = (1.0 / l.weight.nrows() as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|b| *b == 0.0));
        }
        let n = p.class_embed.len() as f64;
        let var = p.class_embed.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() - 0.02).abs() < 0.005);
        assert_eq!(p.class_embed.nrows(), 11);
    }
}
