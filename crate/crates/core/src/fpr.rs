//! Fixed-point regularization of the guided score.
//!
//! Starting from `z_t = sqrt(a) z_src + sqrt(1 - a) eps`, gradient steps on
//! `L = d(z_src, z_{0|t}(z_t))` pull the Tweedie posterior mean of the noisy
//! source back onto the source. The refined latent then yields the guided
//! noise `eps* = (z_t* - sqrt(a) z_src) / sqrt(1 - a)`.
//!
//! By the chain rule through the posterior mean,
//! `grad_{z_t} L = (g - sqrt(1 - a) J^T g) / sqrt(a)` where `g = dL/dz_{0|t}`
//! and `J` is the Jacobian of the guided score. For the euclidean metric
//! `L = sum (z_{0|t} - z_src)^2`, so `g = 2 r`.

use serde::{Deserialize, Serialize};

use crate::backend::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::guidance::{guided_score, guided_score_vjp, DEFAULT_OMEGA};
use crate::latent::Latent;
use crate::metrics::ssim_and_grad;
use crate::schedule::{alpha_at, diffuse_with_alpha, NoiseSchedule};
use crate::tweedie::posterior_mean_with_alpha;

/// Loss growth (relative to the first recorded loss) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FprMetric {
    /// Sum of squared differences.
    Euclidean,
    /// Sum of absolute differences.
    L1,
    /// `1 - SSIM`, grid latents only.
    Ssim,
}

/// Which variable the FPR gradient steps move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateTarget {
    NoisyLatent,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FprConfig {
    pub lambda: f64,
    pub n_iters: usize,
    pub metric: FprMetric,
    pub omega: f64,
    pub update: UpdateTarget,
}

impl Default for FprConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            n_iters: 3,
            metric: FprMetric::Euclidean,
            omega: DEFAULT_OMEGA,
            update: UpdateTarget::NoisyLatent,
        }
    }
}

impl FprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters > 0 && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "FPR scale lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !self.omega.is_finite() || self.omega < -1.0 {
            return Err(Error::Domain(format!("FPR omega {} must be >= -1", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FprTrace {
    /// Loss measured before each of the `n_iters` updates.
    pub losses: Vec<f64>,
    /// Diagnostic: loss at the refined latent, after the last update.
    pub final_loss: f64,
    pub z_t_star: Latent,
    pub eps_star: Latent,
}

fn source_range(z_src: &Latent) -> f64 {
    let (lo, hi) = z_src.min_max();
    hi - lo
}

/// Loss and its gradient with respect to the posterior mean.
fn loss_and_grad(z_src: &Latent, z0t: &Latent, metric: FprMetric) -> Result<(f64, Vec<f64>)> {
    z_src.check_same_shape(z0t)?;
    let pairs = z0t.data().iter().zip(z_src.data());
    Ok(match metric {
        FprMetric::Euclidean => {
            let r: Vec<f64> = pairs.map(|(a, b)| a - b).collect();
            (r.iter().map(|x| x * x).sum(), r.iter().map(|x| 2.0 * x).collect())
        }
        FprMetric::L1 => {
            let r: Vec<f64> = pairs.map(|(a, b)| a - b).collect();
            let g = r
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (r.iter().map(|x| x.abs()).sum(), g)
        }
        FprMetric::Ssim => {
            let (s, g) = ssim_and_grad(z_src, z0t, source_range(z_src))?;
            (1.0 - s, g.into_iter().map(|x| -x).collect())
        }
    })
}

/// `d(z_src, z0t)` under the chosen metric.
pub fn fpr_loss(z_src: &Latent, z0t: &Latent, metric: FprMetric) -> Result<f64> {
    Ok(loss_and_grad(z_src, z0t, metric)?.0)
}

/// FPR loss at `z_t` and its gradient with respect to `z_t`.
pub fn fpr_loss_and_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_src: &Latent,
    cond: Condition,
    t: f64,
    z_t: &Latent,
    cfg: &FprConfig,
) -> Result<(f64, Latent)> {
    let alpha = alpha_at(backend.schedule(), t)?;
    loss_grad_at_alpha(backend, z_src, cond, t, alpha, z_t, cfg)
}

fn loss_grad_at_alpha<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_src: &Latent,
    cond: Condition,
    t: f64,
    alpha: f64,
    z_t: &Latent,
    cfg: &FprConfig,
) -> Result<(f64, Latent)> {
    let eps_hat = guided_score(backend, z_t, cond, t, cfg.omega)?;
    let z0t = posterior_mean_with_alpha(z_t, &eps_hat, alpha)?;
    let (loss, g) = loss_and_grad(z_src, &z0t, cfg.metric)?;
    let g = Latent::new(g, z_t.shape().to_vec())?;
    let jtg = guided_score_vjp(backend, z_t, cond, t, cfg.omega, &g)?;
    let (sa, sb) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let grad = g.zip_map(&jtg, |gi, ji| (gi - sb * ji) / sa)?;
    Ok((loss, grad))
}

/// Result of the FPR loop before noise extraction.
#[derive(Debug, Clone)]
pub struct Refined {
    pub z_t: Latent,
    /// The injection noise consistent with `z_t` (tracked directly by the
    /// noise-update variant, `None` for the latent-update variant).
    pub eps: Option<Latent>,
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

fn divergence(iteration: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        iteration,
        detail: detail.into(),
    }
}

fn non_finite_as_divergence(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidLatent(d) => divergence(iteration, d),
        other => other,
    }
}

/// Runs the FPR iterations without extracting the guided noise, so it is
/// also usable at t = 0.
pub fn refine<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_src: &Latent,
    cond: Condition,
    t: f64,
    eps: &Latent,
    cfg: &FprConfig,
) -> Result<Refined> {
    cfg.validate()?;
    z_src.check_shape(backend.shape())?;
    eps.check_same_shape(z_src)?;
    let alpha = alpha_at(backend.schedule(), t)?;
    let mut eps = eps.clone();
    let mut z_t = diffuse_with_alpha(z_src, &eps, alpha)?;
    let mut losses = Vec::with_capacity(cfg.n_iters);
    let noise_gain = (1.0 - alpha).sqrt();

    for i in 0..cfg.n_iters {
        let (loss, grad) =
            loss_grad_at_alpha(backend, z_src, cond, t, alpha, &z_t, cfg).map_err(non_finite_as_divergence(i))?;
        let reference = losses.first().copied().unwrap_or(loss).max(1e-12);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * reference {
            return Err(divergence(i, format!("FPR loss grew to {loss}")));
        }
        losses.push(loss);
        let stepped = match cfg.update {
            UpdateTarget::NoisyLatent => z_t.axpy(-cfg.lambda, &grad),
            UpdateTarget::Noise => eps.axpy(-cfg.lambda * noise_gain, &grad).and_then(|e| {
                let z = diffuse_with_alpha(z_src, &e, alpha)?;
                eps = e;
                Ok(z)
            }),
        };
        z_t = stepped.map_err(|_| divergence(i, "FPR update produced a non-finite latent"))?;
    }

    let eps_hat = guided_score(backend, &z_t, cond, t, cfg.omega).map_err(non_finite_as_divergence(cfg.n_iters))?;
    let z0t = posterior_mean_with_alpha(&z_t, &eps_hat, alpha).map_err(non_finite_as_divergence(cfg.n_iters))?;
    let final_loss = fpr_loss(z_src, &z0t, cfg.metric)?;
    Ok(Refined {
        z_t,
        eps: (cfg.update == UpdateTarget::Noise).then_some(eps),
        losses,
        final_loss,
    })
}

/// Refines the noisy source and extracts the guided noise.
pub fn fpr_refine<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_src: &Latent,
    cond: Condition,
    t: f64,
    eps: &Latent,
    cfg: &FprConfig,
) -> Result<FprTrace> {
    let r = refine(backend, z_src, cond, t, eps, cfg)?;
    let eps_star = if cfg.n_iters == 0 {
        eps.clone()
    } else if let Some(e) = r.eps {
        e
    } else {
        extract_guided_noise(&r.z_t, z_src, t, backend.schedule())?
    };
    Ok(FprTrace {
        losses: r.losses,
        final_loss: r.final_loss,
        z_t_star: r.z_t,
        eps_star,
    })
}

/// `(z_t* - sqrt(a) z_src) / sqrt(1 - a)`.
pub fn extract_guided_noise(z_t_star: &Latent, z_src: &Latent, t: f64, schedule: &NoiseSchedule) -> Result<Latent> {
    let alpha = alpha_at(schedule, t)?;
    if !(alpha < 1.0) {
        return Err(Error::Singularity(format!(
            "guided noise undefined at t = {t} (alpha = 1)"
        )));
    }
    let (sa, sb) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z_t_star.zip_map(z_src, |z, s| (z - sa * s) / sb)
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

    fn single(mu: &[f64], sigma: f64) -> GaussianMixtureBackend {
        GaussianMixtureBackend::one_component_per_label(vec![lat(mu)], vec![sigma], NoiseSchedule::default()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = lat(&[0.0, 0.0]);
        let b = lat(&[3.0, 4.0]);
        assert_eq!(fpr_loss(&a, &b, FprMetric::Euclidean).unwrap(), 25.0);
        assert_eq!(fpr_loss(&lat(&[1.0]), &lat(&[-1.0]), FprMetric::L1).unwrap(), 2.0);
        assert!(matches!(
            fpr_loss(&a, &b, FprMetric::Ssim),
            Err(Error::MetricUnsupported { .. })
        ));
        let g = Latent::new((0..64).map(|i| (i % 7) as f64).collect(), vec![8, 8]).unwrap();
        for m in [FprMetric::Euclidean, FprMetric::L1, FprMetric::Ssim] {
            assert_eq!(fpr_loss(&g, &g, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn extract_examples() {
        let s = NoiseSchedule::default();
        let z_src = lat(&[0.5, -0.2]);
        let eps = lat(&[1.3, 0.4]);
        let zt = forward_diffuse(&z_src, &eps, 0.4, &s).unwrap();
        let back = extract_guided_noise(&zt, &z_src, 0.4, &s).unwrap();
        for (a, b) in back.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            extract_guided_noise(&zt, &z_src, 0.0, &s),
            Err(Error::Singularity(_))
        ));
        // alpha = 0.36 at t = 0.64 / 0.99 under the linear schedule
        let t = 0.64 / 0.99;
        let v = extract_guided_noise(&lat(&[1.0]), &lat(&[0.5]), t, &s).unwrap();
        assert!((v.data()[0] - 0.875).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let b = single(&[0.0, 0.0], 1.0);
        let z_src = lat(&[0.3, 0.1]);
        let eps = lat(&[-0.7, 1.1]);
        let cfg = FprConfig {
            n_iters: 0,
            ..FprConfig::default()
        };
        let tr = fpr_refine(&b, &z_src, Condition::Label(0), 0.5, &eps, &cfg).unwrap();
        assert!(tr.losses.is_empty());
        assert_eq!(tr.eps_star, eps);
        assert_eq!(tr.z_t_star, forward_diffuse(&z_src, &eps, 0.5, b.schedule()).unwrap());
    }

    #[test]
    fn lambda_must_be_positive() {
        let b = single(&[0.0], 1.0);
        let cfg = FprConfig {
            lambda: 0.0,
            ..FprConfig::default()
        };
        let r = fpr_refine(&b, &lat(&[0.1]), Condition::Label(0), 0.5, &lat(&[0.0]), &cfg);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn huge_step_reports_divergence() {
        let b = single(&[0.0, 0.0], 3.0);
        let cfg = FprConfig {
            lambda: 1e4,
            n_iters: 20,
            ..FprConfig::default()
        };
        let r = fpr_refine(&b, &lat(&[1.0, 1.0]), Condition::Label(0), 0.5, &lat(&[0.5, 0.5]), &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn converges_to_closed_form_fixed_point() {
        // z0|t = mu + c (z_t - sqrt(a) mu), so z0|t = z_src at
        // z_t* = sqrt(a) mu + (z_src - mu) / c.
        let (mu, sigma) = ([0.5, -0.3], 1.2);
        let b = single(&mu, sigma);
        let z_src = lat(&[1.1, 0.4]);
        let cfg = FprConfig {
            n_iters: 50,
            omega: 0.0,
            ..FprConfig::default()
        };
        for t in [0.3, 0.6, 0.9] {
            let a = alpha_at(b.schedule(), t).unwrap();
            let c = a.sqrt() * sigma * sigma / (a * sigma * sigma + 1.0 - a);
            let tr = fpr_refine(&b, &z_src, Condition::Label(0), t, &lat(&[0.2, -0.9]), &cfg).unwrap();
            for i in 0..2 {
                let star = a.sqrt() * mu[i] + (z_src.data()[i] - mu[i]) / c;
                assert!((tr.z_t_star.data()[i] - star).abs() < 1e-6);
            }
            // Once converged the loss sits at the f64 floor and jitters there.
            let floor = (64.0 * f64::EPSILON).powi(2);
            assert!(tr.losses.windows(2).all(|w| w[1] <= w[0] + floor));
        }
    }

    #[test]
    fn l1_and_ssim_reduce_loss() {
        let mut rng = Rng::new(3);
        let mean = Latent::new((0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect(), vec![8, 8]).unwrap();
        let b =
            GaussianMixtureBackend::one_component_per_label(vec![mean.clone()], vec![0.5], NoiseSchedule::default())
                .unwrap();
        let z_src = mean.axpy(0.3, &rng.sample_gaussian(&[8, 8]).unwrap()).unwrap();
        let eps = rng.sample_gaussian(&[8, 8]).unwrap();
        for (metric, lambda) in [(FprMetric::L1, 0.01), (FprMetric::Ssim, 0.5)] {
            let cfg = FprConfig {
                metric,
                lambda,
                n_iters: 5,
                omega: 0.0,
                ..FprConfig::default()
            };
            let tr = fpr_refine(&b, &z_src, Condition::Label(0), 0.5, &eps, &cfg).unwrap();
            assert!(
                tr.final_loss < tr.losses[0],
                "{metric:?}: {:?} -> {}",
                tr.losses,
                tr.final_loss
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_all_metrics() {
        let mut rng = Rng::new(12);
        let mean = Latent::new((0..64).map(|i| (i as f64 / 64.0).sin()).collect(), vec![8, 8]).unwrap();
        let other = mean.scale(-1.0).unwrap();
        let b = GaussianMixtureBackend::one_component_per_label(
            vec![mean.clone(), other],
            vec![0.4, 0.6],
            NoiseSchedule::default(),
        )
        .unwrap();
        let z_src = mean.axpy(0.2, &rng.sample_gaussian(&[8, 8]).unwrap()).unwrap();
        let z_t = rng.sample_gaussian(&[8, 8]).unwrap();
        let h = 1e-5;
        for metric in [FprMetric::Euclidean, FprMetric::Ssim] {
            let cfg = FprConfig {
                metric,
                omega: 2.0,
                ..FprConfig::default()
            };
            let (_, g) = fpr_loss_and_gradient(&b, &z_src, Condition::Label(0), 0.4, &z_t, &cfg).unwrap();
            let dir = rng.sample_gaussian(&[8, 8]).unwrap();
            let lp = fpr_loss_and_gradient(&b, &z_src, Condition::Label(0), 0.4, &z_t.axpy(h, &dir).unwrap(), &cfg)
                .unwrap()
                .0;
            let lm = fpr_loss_and_gradient(&b, &z_src, Condition::Label(0), 0.4, &z_t.axpy(-h, &dir).unwrap(), &cfg)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.dot(&dir).unwrap();
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-5, "{metric:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn noise_variant_tracks_consistent_noise() {
        let b = single(&[0.0, 0.0], 0.5);
        let z_src = lat(&[0.4, -0.3]);
        let eps = lat(&[1.0, 0.5]);
        let cfg = FprConfig {
            update: UpdateTarget::Noise,
            omega: 0.0,
            ..FprConfig::default()
        };
        let tr = fpr_refine(&b, &z_src, Condition::Label(0), 0.6, &eps, &cfg).unwrap();
        let z = forward_diffuse(&z_src, &tr.eps_star, 0.6, b.schedule()).unwrap();
        assert_eq!(z, tr.z_t_star);
        assert!(tr.final_loss < tr.losses[0]);
    }

    proptest! {
        #[test]
        fn extract_then_diffuse_round_trips(x in prop::collection::vec(-4.0f64..4.0, 2), s in prop::collection::vec(-3.0f64..3.0, 2), t in 0.01f64..1.0) {
            let sched = NoiseSchedule::default();
            let x = Latent::from_vec(x).unwrap();
            let z_src = Latent::from_vec(s).unwrap();
            let eps = extract_guided_noise(&x, &z_src, t, &sched).unwrap();
            let back = forward_diffuse(&z_src, &eps, t, &sched).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()) * 4.0);
            }
        }

        #[test]
        fn loss_trace_monotone_on_single_gaussian(seed in 0u64..20, t_idx in 0usize..3) {
            let t = [0.3, 0.6, 0.9][t_idx];
            let b = single(&[0.5, -0.3], 1.2);
            let mut rng = Rng::new(seed);
            let z_src = b.sample(Condition::Label(0), &mut rng).unwrap();
            let eps = rng.sample_gaussian(&[2]).unwrap();
            let cfg = FprConfig { n_iters: 10, ..FprConfig::default() };
            let tr = fpr_refine(&b, &z_src, Condition::Label(0), t, &eps, &cfg).unwrap();
            prop_assert!(tr.losses.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(tr.final_loss <= tr.losses[0]);
        }
    }
}
