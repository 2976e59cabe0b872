//! Posterior means by Tweedie's formula and the posterior-mean diagnostic sweep.

use serde::Serialize;

use crate::backend::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::guidance::guided_score;
use crate::latent::Latent;
use crate::rng::Rng;
use crate::schedule::{alpha_at, diffuse_with_alpha, NoiseSchedule};

/// `(z_t - sqrt(1 - a) eps_hat) / sqrt(a)` for a given alpha.
pub fn posterior_mean_with_alpha(z_t: &Latent, eps_hat: &Latent, alpha: f64) -> Result<Latent> {
    if !(alpha > 0.0) {
        return Err(Error::Singularity("posterior mean undefined where alpha = 0".into()));
    }
    let (sa, sb) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - sb * e) / sa)
}

/// `z_{0|t}` from an already evaluated noise prediction.
pub fn posterior_mean(z_t: &Latent, eps_hat: &Latent, t: f64, schedule: &NoiseSchedule) -> Result<Latent> {
    posterior_mean_with_alpha(z_t, eps_hat, alpha_at(schedule, t)?)
}

/// Posterior mean under the backend's guided score.
pub fn guided_posterior_mean<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_t: &Latent,
    cond: Condition,
    t: f64,
    omega: f64,
) -> Result<Latent> {
    let eps_hat = guided_score(backend, z_t, cond, t, omega)?;
    posterior_mean(z_t, &eps_hat, t, backend.schedule())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub t: f64,
    pub posterior_mean: Latent,
    /// Euclidean distance between the source and its posterior mean.
    pub distance: f64,
}

/// For each t: draw eps, diffuse `z_src`, and report how far the guided
/// posterior mean lands from the source.
pub fn posterior_mean_sweep<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_src: &Latent,
    cond: Condition,
    ts: &[f64],
    rng: &mut Rng,
    omega: f64,
) -> Result<Vec<SweepPoint>> {
    if ts.is_empty() {
        return Err(Error::Data("posterior sweep needs at least one t".into()));
    }
    ts.iter()
        .map(|&t| {
            let eps = rng.sample_gaussian(z_src.shape())?;
            let alpha = alpha_at(backend.schedule(), t)?;
            let z_t = diffuse_with_alpha(z_src, &eps, alpha)?;
            let z0 = guided_posterior_mean(backend, &z_t, cond, t, omega)?;
            let distance = z0.distance(z_src)?;
            Ok(SweepPoint {
                t,
                posterior_mean: z0,
                distance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::GaussianMixtureBackend;
    use crate::rng::Rng;
    use crate::schedule::forward_diffuse;
    use proptest::prelude::*;

    fn lat(v: &[f64]) -> Latent {
        Latent::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn inverts_forward_with_true_noise() {
        let s = NoiseSchedule::default();
        let z0 = lat(&[0.3, -2.0, 1.1]);
        let eps = lat(&[1.0, 0.2, -0.4]);
        let zt = forward_diffuse(&z0, &eps, 0.7, &s).unwrap();
        let back = posterior_mean(&zt, &eps, 0.7, &s).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(posterior_mean(&zt, &eps, 0.0, &s).unwrap(), zt);
        assert!(posterior_mean_with_alpha(&zt, &eps, 0.0).is_err());
    }

    #[test]
    fn gmm_matches_closed_form() {
        let b = GaussianMixtureBackend::one_component_per_label(
            vec![lat(&[-2.0, 0.0]), lat(&[2.0, 0.0])],
            vec![0.3, 0.5],
            NoiseSchedule::default(),
        )
        .unwrap();
        let z = lat(&[0.4, 0.3]);
        for t in [0.1, 0.5, 0.9] {
            for cond in [Condition::Label(0), Condition::Label(1)] {
                let tw = guided_posterior_mean(&b, &z, cond, t, 0.0).unwrap();
                let exact = b.exact_posterior_mean(&z, cond, t).unwrap();
                for (x, y) in tw.data().iter().zip(exact.data()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn sweep_at_zero_time_returns_source() {
        let b = GaussianMixtureBackend::one_component_per_label(
            vec![lat(&[1.0, 1.0])],
            vec![0.5],
            NoiseSchedule::default(),
        )
        .unwrap();
        let src = lat(&[0.7, 1.4]);
        let pts = posterior_mean_sweep(&b, &src, Condition::Label(0), &[0.0], &mut Rng::new(0), 0.0).unwrap();
        assert!(pts[0].distance < 1e-12);
        assert!(posterior_mean_sweep(&b, &src, Condition::Label(0), &[], &mut Rng::new(0), 0.0).is_err());
    }

    #[test]
    fn single_gaussian_sweep_matches_shrinkage() {
        // z0|t = mu + c (z_t - sqrt(a) mu), c = sqrt(a) s^2 / (a s^2 + 1 - a)
        let (mu, sig) = ([0.5, -1.0], 0.8);
        let s = NoiseSchedule::default();
        let b = GaussianMixtureBackend::one_component_per_label(vec![lat(&mu)], vec![sig], s).unwrap();
        let src = lat(&[1.2, -0.4]);
        let ts = [0.2, 0.5, 0.8];
        let pts = posterior_mean_sweep(&b, &src, Condition::Label(0), &ts, &mut Rng::new(5), 0.0).unwrap();
        let mut rng = Rng::new(5);
        for (p, &t) in pts.iter().zip(&ts) {
            let eps = rng.sample_gaussian(&[2]).unwrap();
            let a = alpha_at(&s, t).unwrap();
            let c = a.sqrt() * sig * sig / (a * sig * sig + 1.0 - a);
            let d: f64 = (0..2)
                .map(|i| {
                    let zt = a.sqrt() * src.data()[i] + (1.0 - a).sqrt() * eps.data()[i];
                    let z0 = mu[i] + c * (zt - a.sqrt() * mu[i]);
                    (z0 - src.data()[i]).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!((d - p.distance).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_distance_grows_with_t() {
        let b = GaussianMixtureBackend::one_component_per_label(
            vec![lat(&[-2.0, 0.0]), lat(&[2.0, 0.0])],
            vec![0.3, 0.3],
            NoiseSchedule::default(),
        )
        .unwrap();
        let ts = [0.1, 0.5, 0.9];
        let mut sums = [0.0; 3];
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let src = b.sample(Condition::Label(0), &mut rng).unwrap();
            let pts = posterior_mean_sweep(&b, &src, Condition::Label(0), &ts, &mut rng, 0.0).unwrap();
            for (s, p) in sums.iter_mut().zip(&pts) {
                *s += p.distance;
            }
        }
        assert!(sums[0] <= sums[1] && sums[1] <= sums[2], "{sums:?}");
    }

    proptest! {
        #[test]
        fn round_trip(z in prop::collection::vec(-5.0f64..5.0, 3), e in prop::collection::vec(-3.0f64..3.0, 3), t in 0.0f64..=1.0) {
            let s = NoiseSchedule::default();
            let z0 = Latent::from_vec(z).unwrap();
            let eps = Latent::from_vec(e).unwrap();
            let zt = forward_diffuse(&z0, &eps, t, &s).unwrap();
            let back = posterior_mean(&zt, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()) * 10.0);
            }
        }
    }
}
