//! Analytic Gaussian-mixture score oracle.
//!
//! Data distribution `p(z0 | y) = sum_k w_k N(mu_k, sigma_k^2 I)` over the
//! components a label selects. Diffusing to time t keeps every component
//! Gaussian: `N(sqrt(a) mu_k, v_k I)` with `v_k = a sigma_k^2 + 1 - a`, so the
//! score, its Jacobian and the posterior mean are all closed form.

use serde::{Deserialize, Serialize};

use super::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::Rng;
use crate::schedule::{alpha_at, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Latent,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureBackend {
    shape: Vec<usize>,
    schedule: NoiseSchedule,
    components: Vec<MixtureComponent>,
    /// For label k, the component indices it selects.
    label_map: Vec<Vec<usize>>,
}

/// Per-query quantities shared by score, vjp and posterior mean.
struct Diffused {
    alpha: f64,
    /// selected component indices
    idx: Vec<usize>,
    /// responsibilities gamma_k(z_t)
    gamma: Vec<f64>,
    /// diffused variances v_k
    var: Vec<f64>,
    /// per-component scores m_k = (sqrt(a) mu_k - z_t) / v_k
    m: Vec<Vec<f64>>,
    /// mixture score s = sum gamma_k m_k
    s: Vec<f64>,
    log_density: f64,
}

impl GaussianMixtureBackend {
    pub fn new(components: Vec<MixtureComponent>, label_map: Vec<Vec<usize>>, schedule: NoiseSchedule) -> Result<Self> {
        let shape = components
            .first()
            .ok_or_else(|| Error::Data("mixture needs at least one component".into()))?
            .mean
            .shape()
            .to_vec();
        let b = Self {
            shape,
            schedule,
            components,
            label_map,
        };
        b.validate()?;
        Ok(b)
    }

    /// Equal-weight mixture where label k selects component k alone.
    pub fn one_component_per_label(means: Vec<Latent>, sigmas: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if means.len() != sigmas.len() {
            return Err(Error::Data("means and sigmas differ in length".into()));
        }
        let w = 1.0 / means.len() as f64;
        let n = means.len();
        let components = means
            .into_iter()
            .zip(sigmas)
            .map(|(mean, sigma)| MixtureComponent { weight: w, mean, sigma })
            .collect();
        Self::new(components, (0..n).map(|k| vec![k]).collect(), schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.components.is_empty() {
            return Err(Error::Data("mixture needs at least one component".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("mixture weights sum to {total}, not 1")));
        }
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0) || !(c.sigma > 0.0) || !c.sigma.is_finite() {
                return Err(Error::Data(format!("component {k}: weight and sigma must be positive")));
            }
            c.mean.check_shape(&self.shape)?;
        }
        for (label, sel) in self.label_map.iter().enumerate() {
            if sel.is_empty() || sel.iter().any(|&i| i >= self.components.len()) {
                return Err(Error::Data(format!(
                    "label {label} selects an empty or out-of-range component set"
                )));
            }
        }
        Ok(())
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn label_map(&self) -> &[Vec<usize>] {
        &self.label_map
    }

    /// Components selected by `cond`; the null condition selects all.
    pub fn selection(&self, cond: Condition) -> Result<Vec<usize>> {
        self.check_condition(cond)?;
        Ok(match cond {
            Condition::Null => (0..self.components.len()).collect(),
            Condition::Label(k) => self.label_map[k].clone(),
        })
    }

    fn diffused(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Diffused> {
        self.check_inputs(z_t, t)?;
        let idx = self.selection(cond)?;
        let alpha = alpha_at(&self.schedule, t)?;
        let sa = alpha.sqrt();
        let d = z_t.len() as f64;
        let z = z_t.data();
        let wsum: f64 = idx.iter().map(|&k| self.components[k].weight).sum();

        let mut logp = Vec::with_capacity(idx.len());
        let mut var = Vec::with_capacity(idx.len());
        let mut m = Vec::with_capacity(idx.len());
        for &k in &idx {
            let c = &self.components[k];
            let v = alpha * c.sigma * c.sigma + 1.0 - alpha;
            let mk: Vec<f64> = c.mean.data().iter().zip(z).map(|(mu, zi)| (sa * mu - zi) / v).collect();
            let dist_sq: f64 = mk.iter().map(|x| x * x).sum::<f64>() * v * v;
            logp.push((c.weight / wsum).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - dist_sq / (2.0 * v));
            var.push(v);
            m.push(mk);
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut gamma: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = gamma.iter().sum();
        gamma.iter_mut().for_each(|g| *g /= norm);
        let log_density = max + norm.ln();

        let mut s = vec![0.0; z.len()];
        for (g, mk) in gamma.iter().zip(&m) {
            for (si, mi) in s.iter_mut().zip(mk) {
                *si += g * mi;
            }
        }
        Ok(Diffused {
            alpha,
            idx,
            gamma,
            var,
            m,
            s,
            log_density,
        })
    }

    /// `log p_t(z_t | cond)` of the diffused mixture.
    pub fn log_density(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<f64> {
        Ok(self.diffused(z_t, cond, t)?.log_density)
    }

    /// `grad log p_t(z_t | cond)`.
    pub fn data_score(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent> {
        let q = self.diffused(z_t, cond, t)?;
        Latent::new(q.s, self.shape.clone())
    }

    /// Closed-form `E[z0 | z_t, cond]`: responsibility-weighted component
    /// posterior means.
    pub fn exact_posterior_mean(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent> {
        let q = self.diffused(z_t, cond, t)?;
        let sa = q.alpha.sqrt();
        let mut out = vec![0.0; z_t.len()];
        for ((&k, g), v) in q.idx.iter().zip(&q.gamma).zip(&q.var) {
            let c = &self.components[k];
            let gain = sa * c.sigma * c.sigma / v;
            for ((o, mu), zi) in out.iter_mut().zip(c.mean.data()).zip(z_t.data()) {
                *o += g * (mu + gain * (zi - sa * mu));
            }
        }
        Latent::new(out, self.shape.clone())
    }

    /// Draws `z0 ~ p(z0 | cond)`.
    pub fn sample(&self, cond: Condition, rng: &mut Rng) -> Result<Latent> {
        let idx = self.selection(cond)?;
        let wsum: f64 = idx.iter().map(|&k| self.components[k].weight).sum();
        let mut u = rng.uniform() * wsum;
        let mut pick = *idx.last().expect("non-empty selection");
        for &k in &idx {
            u -= self.components[k].weight;
            if u < 0.0 {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let noise = rng.sample_gaussian(&self.shape)?;
        c.mean.axpy(c.sigma, &noise)
    }
}

impl ScoreBackend for GaussianMixtureBackend {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn num_labels(&self) -> usize {
        self.label_map.len()
    }

    fn score(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent> {
        let q = self.diffused(z_t, cond, t)?;
        let c = -(1.0 - q.alpha).sqrt();
        Latent::new(q.s.iter().map(|s| c * s).collect(), self.shape.clone())
    }

    fn score_vjp(&self, z_t: &Latent, cond: Condition, t: f64, u: &Latent) -> Result<Latent> {
        u.check_shape(&self.shape)?;
        let q = self.diffused(z_t, cond, t)?;
        // Hessian of log p: -sum(g_k / v_k) I + sum g_k m_k m_k^T - s s^T (symmetric).
        let u = u.data();
        let diag: f64 = q.gamma.iter().zip(&q.var).map(|(g, v)| g / v).sum();
        let s_dot_u: f64 = q.s.iter().zip(u).map(|(a, b)| a * b).sum();
        let mut h: Vec<f64> = u.iter().zip(&q.s).map(|(ui, si)| -diag * ui - s_dot_u * si).collect();
        for (g, mk) in q.gamma.iter().zip(&q.m) {
            let proj: f64 = mk.iter().zip(u).map(|(a, b)| a * b).sum();
            for (hi, mi) in h.iter_mut().zip(mk) {
                *hi += g * proj * mi;
            }
        }
        let c = -(1.0 - q.alpha).sqrt();
        Latent::new(h.into_iter().map(|x| c * x).collect(), self.shape.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn lat(v: &[f64]) -> Latent {
        Latent::from_vec(v.to_vec()).unwrap()
    }

    fn standard() -> GaussianMixtureBackend {
        GaussianMixtureBackend::one_component_per_label(vec![lat(&[0.0, 0.0])], vec![1.0], sched()).unwrap()
    }

    fn two_mode() -> GaussianMixtureBackend {
        GaussianMixtureBackend::one_component_per_label(
            vec![lat(&[-2.0, 0.0]), lat(&[2.0, 0.0])],
            vec![0.3, 0.3],
            sched(),
        )
        .unwrap()
    }

    #[test]
    fn standard_gaussian_score_is_scaled_input() {
        let b = standard();
        let z = lat(&[0.7, -1.3]);
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let a = alpha_at(&sched(), t).unwrap();
            let eps = b.score(&z, Condition::Null, t).unwrap();
            let expect = z.scale((1.0 - a).sqrt()).unwrap();
            for (x, y) in eps.data().iter().zip(expect.data()) {
                assert!((x - y).abs() < 1e-14);
            }
            let u = lat(&[0.3, 2.0]);
            let vjp = b.score_vjp(&z, Condition::Label(0), t, &u).unwrap();
            for (x, y) in vjp.data().iter().zip(u.data()) {
                assert!((x - (1.0 - a).sqrt() * y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_pair_vanishes_at_origin() {
        let b = two_mode();
        let eps = b.score(&lat(&[0.0, 0.0]), Condition::Null, 0.4).unwrap();
        assert!(eps.data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn zero_direction_vjp_is_zero() {
        let b = two_mode();
        let v = b
            .score_vjp(&lat(&[0.3, 0.1]), Condition::Null, 0.5, &Latent::zeros(&[2]))
            .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unknown_label_rejected() {
        let b = two_mode();
        let err = b.score(&lat(&[0.0, 0.0]), Condition::Label(2), 0.5);
        assert!(matches!(err, Err(Error::Condition(_))));
        assert!(b.score(&lat(&[0.0]), Condition::Null, 0.5).is_err());
    }

    #[test]
    fn label_covering_everything_matches_null() {
        let comps = two_mode().components().to_vec();
        let b = GaussianMixtureBackend::new(comps, vec![vec![0, 1], vec![1]], sched()).unwrap();
        let z = lat(&[0.4, -0.2]);
        assert_eq!(
            b.score(&z, Condition::Label(0), 0.6).unwrap(),
            b.score(&z, Condition::Null, 0.6).unwrap()
        );
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let b = two_mode();
        let h = 1e-5;
        for (z, t) in [([0.3, 0.2], 0.5), ([-1.0, 0.4], 0.2), ([0.1, -0.7], 0.9)] {
            for cond in [Condition::Null, Condition::Label(1)] {
                let z = lat(&z);
                let s = b.data_score(&z, cond, t).unwrap();
                for i in 0..2 {
                    let mut p = z.data().to_vec();
                    let mut m = z.data().to_vec();
                    p[i] += h;
                    m[i] -= h;
                    let fd = (b.log_density(&lat(&p), cond, t).unwrap() - b.log_density(&lat(&m), cond, t).unwrap())
                        / (2.0 * h);
                    let rel = (fd - s.data()[i]).abs() / s.data()[i].abs().max(1e-3);
                    assert!(rel < 1e-6, "rel {rel}");
                }
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let comps = vec![
            MixtureComponent {
                weight: 0.5,
                mean: lat(&[1.0, 0.0, -0.5]),
                sigma: 0.4,
            },
            MixtureComponent {
                weight: 0.3,
                mean: lat(&[-1.0, 0.5, 0.0]),
                sigma: 0.8,
            },
            MixtureComponent {
                weight: 0.2,
                mean: lat(&[0.0, -1.0, 1.0]),
                sigma: 0.6,
            },
        ];
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 0.02).unwrap();
        let b = GaussianMixtureBackend::new(comps, vec![vec![0, 2], vec![1]], sched).unwrap();
        let mut rng = Rng::new(11);
        let h = 1e-5;
        for _ in 0..10 {
            let z = rng.sample_gaussian(&[3]).unwrap();
            let u = rng.sample_gaussian(&[3]).unwrap();
            let dir = rng.sample_gaussian(&[3]).unwrap();
            let t = rng.sample_time(0.05, 0.95).unwrap();
            for cond in [Condition::Null, Condition::Label(0)] {
                let vjp = b.score_vjp(&z, cond, t, &u).unwrap();
                let plus = b.score(&z.axpy(h, &dir).unwrap(), cond, t).unwrap();
                let minus = b.score(&z.axpy(-h, &dir).unwrap(), cond, t).unwrap();
                let fd = plus.sub(&minus).unwrap().scale(0.5 / h).unwrap().dot(&u).unwrap();
                let an = vjp.dot(&dir).unwrap();
                assert!((fd - an).abs() / an.abs().max(1e-3) < 1e-5, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn rejects_invalid_mixtures() {
        let bad = GaussianMixtureBackend::new(
            vec![MixtureComponent {
                weight: 0.5,
                mean: lat(&[0.0]),
                sigma: 1.0,
            }],
            vec![vec![0]],
            sched(),
        );
        assert!(bad.is_err());
        let bad = GaussianMixtureBackend::one_component_per_label(vec![lat(&[0.0])], vec![0.0], sched());
        assert!(bad.is_err());
    }
}
