//! Loss terms of the contrastive objective.
//!
//! Per-sample losses use component sums. Batch averaging happens once, when
//! the trainer assembles the total.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the negatives-only InfoNCE term.
    pub alpha: f64,
    /// Weight of the conditional/unconditional alignment term.
    pub gamma: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Scale each InfoNCE anchor by `t / T`.
    pub nce_time_weight: bool,
    /// Use raw latent dot products instead of L2-normalized latents.
    pub nce_raw_dot: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            gamma: 0.25,
            tau: 0.1,
            nce_time_weight: false,
            nce_raw_dot: false,
        }
    }
}

impl LossWeights {
    /// Plain DDPM: both regularizers switched off.
    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Squared error `||eps_hat - eps_true||^2` and its gradient w.r.t. `eps_hat`.
pub fn ddpm_loss(eps_true: &[f64], eps_hat: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("ddpm_loss", eps_true.len(), eps_hat.len())?;
    let diff: Vec<f64> = eps_hat.iter().zip(eps_true).map(|(h, e)| h - e).collect();
    let value = diff.iter().map(|d| d * d).sum();
    Ok((value, diff.into_iter().map(|d| 2.0 * d).collect()))
}

#[derive(Debug, Clone)]
pub struct InfoNce {
    /// Weighted mean over anchors.
    pub loss: f64,
    /// Gradient w.r.t. each input latent (same shape as the input).
    pub grad: Array2<f64>,
}

/// Negatives-only InfoNCE where every anchor is its own positive:
///
/// `l_i = -log( exp(s_ii) / sum_j exp(s_ij) )`, `s_ij = z_i . z_j / tau`,
///
/// with `z = h / ||h||` unless `raw_dot`. Returns `(1/B) sum_i w_i l_i`.
pub fn infonce_negatives(
    latents: ArrayView2<f64>,
    tau: f64,
    weights: Option<&[f64]>,
    raw_dot: bool,
) -> Result<InfoNce> {
    let batch = latents.nrows();
    if batch == 0 {
        return Err(Error::InvalidArgument("InfoNCE needs at least one latent".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite latent passed to InfoNCE".into()));
    }
    let weights = match weights {
        Some(w) => {
            check_len("InfoNCE weights", batch, w.len())?;
            Array1::from(w.to_vec())
        }
        None => Array1::ones(batch),
    };

    let norms: Array1<f64> = if raw_dot {
        Array1::ones(batch)
    } else {
        latents
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect()
    };
    let z = &latents / &norms.view().insert_axis(Axis(1));
    let scores = z.dot(&z.t()) / tau;

    // coeff[i][j] = w_i (softmax_ij - delta_ij) / B = dL/ds_ij
    let mut coeff = Array2::zeros((batch, batch));
    let mut loss = 0.0;
    for i in 0..batch {
        let row = scores.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += weights[i] * (lse - row[i]);
        let scale = weights[i] / batch as f64;
        for j in 0..batch {
            let p = (row[j] - lse).exp();
            coeff[[i, j]] = scale * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    loss /= batch as f64;

    let sym = &coeff + &coeff.t();
    let grad_z = sym.dot(&z) / tau;
    let grad = if raw_dot {
        grad_z
    } else {
        // Through z = h / ||h||: dh = (dz - z (z . dz)) / ||h||.
        let mut g = grad_z;
        for ((mut gr, zr), n) in g.rows_mut().into_iter().zip(z.rows()).zip(norms.iter()) {
            let proj = gr.dot(&zr);
            Zip::from(&mut gr).and(&zr).for_each(|g, &zv| *g = (*g - zv * proj) / n);
        }
        g
    };
    Ok(InfoNce { loss, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseClr {
    pub value: f64,
    pub grad_cond: Vec<f64>,
    pub grad_unc: Vec<f64>,
}

/// `(t / T) ||eps_cond - eps_unc||^2`; both branches receive gradients.
pub fn mseclr(eps_cond: &[f64], eps_unc: &[f64], t: usize, steps: usize) -> Result<MseClr> {
    if t == 0 || t > steps {
        return Err(Error::Timestep { t, steps });
    }
    check_len("mseclr", eps_cond.len(), eps_unc.len())?;
    let w = t as f64 / steps as f64;
    let diff: Vec<f64> = eps_cond.iter().zip(eps_unc).map(|(c, u)| c - u).collect();
    let value = w * diff.iter().map(|d| d * d).sum::<f64>();
    let grad_cond: Vec<f64> = diff.iter().map(|d| 2.0 * w * d).collect();
    let grad_unc = grad_cond.iter().map(|g| -g).collect();
    Ok(MseClr {
        value,
        grad_cond,
        grad_unc,
    })
}

/// `l_ddpm + alpha l_nce + gamma l_mse` on batch-averaged terms.
pub fn total_loss(l_ddpm: f64, l_nce: f64, l_mse: f64, weights: &LossWeights) -> f64 {
    l_ddpm + weights.alpha * l_nce + weights.gamma * l_mse
}

/// KL divergence between `N(mu1, sigma2 I)` and `N(mu2, sigma2 I)`.
pub fn kl_gaussian_shared_var(mu1: &[f64], mu2: &[f64], sigma2: f64) -> Result<f64> {
    check_len("kl_gaussian_shared_var", mu1.len(), mu2.len())?;
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let sq: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{linear_schedule, posterior_mean};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ddpm_loss_cases() {
        let (v, g) = ddpm_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (v, g) = ddpm_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(g, vec![6.0, 8.0]);
        assert!(ddpm_loss(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn infonce_hand_values() {
        let one = infonce_negatives(array![[0.3, 0.4]].view(), 0.1, None, false).unwrap();
        assert_eq!(one.loss, 0.0);
        assert!(one.grad.iter().all(|g| *g == 0.0));

        let same = infonce_negatives(array![[1.0, 0.0], [1.0, 0.0]].view(), 1.0, None, false).unwrap();
        assert!((same.loss - 2f64.ln()).abs() < 1e-12);

        let ortho = infonce_negatives(array![[1.0, 0.0], [0.0, 1.0]].view(), 1.0, None, false).unwrap();
        let e = 1f64.exp();
        assert!((ortho.loss + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((ortho.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn infonce_equal_latents_give_log_batch() {
        for b in [2usize, 4, 8, 16] {
            let h = Array2::from_elem((b, 3), 0.7);
            let out = infonce_negatives(h.view(), 0.1, None, false).unwrap();
            assert!((out.loss - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_rejects_bad_input() {
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(infonce_negatives(empty.view(), 0.1, None, false).is_err());
        let h = array![[1.0, 0.0]];
        assert!(infonce_negatives(h.view(), 0.0, None, false).is_err());
        assert!(infonce_negatives(array![[f64::NAN, 0.0]].view(), 0.1, None, false).is_err());
        assert!(infonce_negatives(h.view(), 0.1, Some(&[1.0, 2.0]), false).is_err());
    }

    fn infonce_value(h: &Array2<f64>, tau: f64, w: &[f64], raw: bool) -> f64 {
        infonce_negatives(h.view(), tau, Some(w), raw).unwrap().loss
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for raw in [false, true] {
            let h = Array2::from_shape_fn((5, 4), |_| rng.sample::<f64, _>(StandardNormal) * 0.5);
            let w: Vec<f64> = (0..5).map(|i| 0.2 + 0.15 * i as f64).collect();
            let tau = if raw { 1.0 } else { 0.1 };
            let out = infonce_negatives(h.view(), tau, Some(&w), raw).unwrap();
            let step = 1e-6;
            for i in 0..5 {
                for k in 0..4 {
                    let mut p = h.clone();
                    let mut m = h.clone();
                    p[[i, k]] += step;
                    m[[i, k]] -= step;
                    let numeric = (infonce_value(&p, tau, &w, raw) - infonce_value(&m, tau, &w, raw)) / (2.0 * step);
                    let err = (out.grad[[i, k]] - numeric).abs() / numeric.abs().max(1e-3);
                    assert!(err < 1e-6, "raw={raw} ({i},{k}): {} vs {numeric}", out.grad[[i, k]]);
                }
            }
        }
    }

    #[test]
    fn mseclr_cases() {
        let out = mseclr(&[0.2, 0.1], &[0.2, 0.1], 7, 10).unwrap();
        assert_eq!(out.value, 0.0);
        let out = mseclr(&[0.5; 4], &[0.0; 4], 10, 10).unwrap();
        assert_eq!(out.value, 1.0);
        let out = mseclr(&[1.0, 0.0], &[0.0, 0.0], 5, 10).unwrap();
        assert_eq!(out.value, 0.5);
        assert_eq!(out.grad_cond, vec![1.0, 0.0]);
        assert_eq!(out.grad_unc, vec![-1.0, 0.0]);
        assert!(mseclr(&[1.0], &[0.0], 0, 10).is_err());
        assert!(mseclr(&[1.0], &[0.0], 11, 10).is_err());
        assert!(mseclr(&[1.0], &[0.0, 1.0], 1, 10).is_err());
    }

    #[test]
    fn mseclr_gradient_matches_finite_differences() {
        let c = [0.3, -0.8, 1.2];
        let u = [-0.1, 0.4, 0.9];
        let out = mseclr(&c, &u, 37, 200).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut cp = c;
            let mut cm = c;
            cp[k] += h;
            cm[k] -= h;
            let num = (mseclr(&cp, &u, 37, 200).unwrap().value - mseclr(&cm, &u, 37, 200).unwrap().value) / (2.0 * h);
            assert!((out.grad_cond[k] - num).abs() / num.abs().max(1e-3) < 1e-6);
            let mut up = u;
            let mut um = u;
            up[k] += h;
            um[k] -= h;
            let num = (mseclr(&c, &up, 37, 200).unwrap().value - mseclr(&c, &um, 37, 200).unwrap().value) / (2.0 * h);
            assert!((out.grad_unc[k] - num).abs() / num.abs().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights {
            alpha: 0.5,
            gamma: 0.25,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w), 2.75);
        assert_eq!(total_loss(1.3, 2.0, 3.0, &LossWeights::baseline()), 1.3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { gamma: f64::INFINITY, ..LossWeights::default() }.validate().is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_gaussian_shared_var(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert_eq!(kl_gaussian_shared_var(&[0.0], &[2.0], 1.0).unwrap(), 2.0);
        let base = kl_gaussian_shared_var(&[0.3, -0.2], &[1.0, 0.5], 0.7).unwrap();
        let scaled = kl_gaussian_shared_var(&[0.9, -0.6], &[3.0, 1.5], 0.7).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(kl_gaussian_shared_var(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn kl_of_reverse_steps_reduces_to_scaled_noise_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let steps = rng.random_range(2..=1000);
            let b1 = rng.random_range(1e-5..1e-3);
            let bt = rng.random_range(1e-3..0.2);
            let s = linear_schedule(steps, b1, bt).unwrap();
            let t = rng.random_range(1..=steps);
            let d = rng.random_range(1..6);
            let draw = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
            let (x, ec, eu) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let sigma2 = s.sigma(t).powi(2);
            let kl = kl_gaussian_shared_var(
                &posterior_mean(&x, &ec, t, &s).unwrap(),
                &posterior_mean(&x, &eu, t, &s).unwrap(),
                sigma2,
            )
            .unwrap();
            let sq: f64 = ec.iter().zip(&eu).map(|(a, b)| (a - b).powi(2)).sum();
            let closed = s.beta(t).powi(2) / (2.0 * sigma2 * s.alpha(t) * (1.0 - s.alpha_bar(t))) * sq;
            assert!((kl - closed).abs() / closed < 1e-10, "{kl} vs {closed}");
        }
    }

    proptest! {
        #[test]
        fn infonce_is_nonnegative(
            vals in proptest::collection::vec(-3.0f64..3.0, 2..40),
            tau in 0.05f64..2.0,
        ) {
            let b = vals.len() / 2;
            prop_assume!(b >= 1);
            let h = Array2::from_shape_vec((b, 2), vals[..2 * b].to_vec()).unwrap();
            let out = infonce_negatives(h.view(), tau, None, false).unwrap();
            prop_assert!(out.loss >= 0.0);
            if b > 1 {
                prop_assert!(out.loss > 0.0);
            }
        }

        #[test]
        fn mseclr_symmetric_and_quadratic(
            c in proptest::collection::vec(-5.0f64..5.0, 3),
            u in proptest::collection::vec(-5.0f64..5.0, 3),
            scale in -3.0f64..3.0,
            t in 1usize..=100,
        ) {
            let a = mseclr(&c, &u, t, 100).unwrap().value;
            let b = mseclr(&u, &c, t, 100).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            let cs: Vec<f64> = c.iter().zip(&u).map(|(ci, ui)| ui + scale * (ci - ui)).collect();
            let scaled = mseclr(&cs, &u, t, 100).unwrap().value;
            prop_assert!((scaled - scale * scale * a).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
