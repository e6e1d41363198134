//! Reconstruction and KL terms of the training objective.

use super::tape::kl_term;
use super::{ImageBatch, LatentState, Real};
use crate::error::{Error, Result};

/// `1/2 * sum((x - x_hat)^2)` over every batch, spatial and channel entry.
pub fn recon_loss<T: Real>(x: &ImageBatch<T>, x_hat: &ImageBatch<T>) -> Result<T> {
    if x.batch != x_hat.batch || x.size != x_hat.size {
        return Err(Error::shape(
            format!("[{}, {s}, {s}, 2]", x.batch, s = x.size),
            format!("[{}, {s}, {s}, 2]", x_hat.batch, s = x_hat.size),
        ));
    }
    half_sq_err(&x.data, &x_hat.data)
}

/// Slice form of [`recon_loss`].
pub fn half_sq_err<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() * T::of(0.5))
}

/// KL of the residual posterior `N(mu + delta_mu, sigma * delta_sigma)` from the prior `N(mu, sigma)`.
pub fn kl_variable(mu: f64, sigma: f64, delta_mu: f64, delta_sigma: f64) -> Result<f64> {
    let _ = mu;
    if !(sigma > 0.0) || !(delta_sigma > 0.0) {
        return Err(Error::invalid(format!(
            "scales must be positive (sigma={sigma}, delta_sigma={delta_sigma})"
        )));
    }
    Ok(kl_term(delta_mu, sigma, delta_sigma))
}

/// Sum of per-variable KL terms over all groups (and all samples in the batch).
pub fn kl_total<T: Real>(state: &LatentState<T>) -> T {
    state
        .group_dists
        .iter()
        .map(|d| {
            (0..d.delta_mu.len())
                .map(|i| kl_term(d.delta_mu[i], d.sigma[i], d.delta_sigma[i]))
                .sum::<T>()
        })
        .sum()
}

pub fn elbo_loss<T: Real>(x: &ImageBatch<T>, x_hat: &ImageBatch<T>, state: &LatentState<T>) -> Result<T> {
    Ok(recon_loss(x, x_hat)? + kl_total(state))
}

#[cfg(test)]
mod tests {
    use super::super::GroupDistribution;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// KL(N(m1, s1^2) || N(m2, s2^2)) for arbitrary Gaussians.
    fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
        (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_variable(0.3, 2.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((kl_variable(0.0, 1.5, 1.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_variable(0.0, 1.0, 1.0, 2.0).unwrap();
        let oracle = gaussian_kl(1.0, 2.0, 0.0, 1.0);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 1.306_852_819_440_054_7).abs() < 1e-12);
        assert!(kl_variable(0.0, 0.0, 1.0, 1.0).is_err());
        assert!(kl_variable(0.0, 1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn recon_examples() {
        let one = |v: f64| ImageBatch { batch: 1, size: 1, data: vec![v] };
        assert_eq!(half_sq_err(&[1.0f64], &[3.0]).unwrap(), 2.0);
        assert_eq!(recon_loss(&one(1.0), &one(1.0)).unwrap(), 0.0);
        assert!(half_sq_err(&[1.0f64], &[1.0, 2.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2 * 4 * 4 * 2;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let xa = ImageBatch::new(2, 4, a.clone()).unwrap();
        let xb = ImageBatch::new(2, 4, b.clone()).unwrap();
        let mut brute = 0.0;
        for bi in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    for c in 0..2 {
                        let k = ((bi * 4 + i) * 4 + j) * 2 + c;
                        brute += (a[k] - b[k]).powi(2);
                    }
                }
            }
        }
        assert!((recon_loss(&xa, &xb).unwrap() - brute / 2.0).abs() < 1e-9);
    }

    fn state(dists: Vec<GroupDistribution<f64>>) -> LatentState<f64> {
        LatentState {
            batch: 1,
            dims: dists.iter().map(|d| d.mu.len()).collect(),
            samples: dists.iter().map(|d| d.mu.clone()).collect(),
            group_dists: dists,
        }
    }

    #[test]
    fn kl_total_examples() {
        let prior_like = GroupDistribution {
            mu: vec![0.4; 3],
            sigma: vec![2.0; 3],
            delta_mu: vec![0.0; 3],
            delta_sigma: vec![1.0; 3],
        };
        assert_eq!(kl_total(&state(vec![prior_like.clone(), prior_like])), 0.0);
        let half = GroupDistribution {
            mu: vec![0.0; 2],
            sigma: vec![1.0; 2],
            delta_mu: vec![1.0; 2],
            delta_sigma: vec![1.0; 2],
        };
        assert!((kl_total(&state(vec![half])) - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut groups = Vec::new();
        for len in [5, 3, 2] {
            let g = GroupDistribution {
                mu: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                sigma: (0..len).map(|_| rng.random_range(0.2..3.0)).collect(),
                delta_mu: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
                delta_sigma: (0..len).map(|_| rng.random_range(0.2..3.0)).collect(),
            };
            groups.push(g);
        }
        let s = state(groups);
        let mut oracle = 0.0;
        for g in &s.group_dists {
            for i in 0..g.mu.len() {
                oracle += gaussian_kl(
                    g.mu[i] + g.delta_mu[i],
                    g.sigma[i] * g.delta_sigma[i],
                    g.mu[i],
                    g.sigma[i],
                );
            }
        }
        assert!((kl_total(&s) - oracle).abs() < 1e-9);

        let x = ImageBatch::new(1, 2, vec![0.5; 8]).unwrap();
        let xh = ImageBatch::new(1, 2, vec![0.0; 8]).unwrap();
        let e = elbo_loss(&x, &xh, &s).unwrap();
        assert!((e - (recon_loss(&x, &xh).unwrap() + kl_total(&s))).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_matches_closed_form_and_is_nonnegative(
            mu in -5f64..5.0, sigma in 0.05f64..5.0, dmu in -5f64..5.0, dsigma in 0.05f64..5.0,
        ) {
            let v = kl_variable(mu, sigma, dmu, dsigma).unwrap();
            let oracle = gaussian_kl(mu + dmu, sigma * dsigma, mu, sigma);
            prop_assert!((v - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
            prop_assert!(v >= 0.0);
            if dmu != 0.0 || dsigma != 1.0 {
                prop_assert!(v > 0.0);
            }
        }
    }
}
