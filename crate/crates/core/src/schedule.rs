//! Continuous-time noise schedules and the forward diffusion process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// alpha(t) = 1 - t (1 - alpha_min)
    LinearAlpha,
    /// alpha(t) = alpha_min + (1 - alpha_min) cos^2(pi t / 2)
    Cosine,
}

/// Signal fraction alpha(t) on t in [0, 1], strictly decreasing from 1 to `alpha_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alpha_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearAlpha,
            alpha_min: 0.01,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, alpha_min: f64) -> Result<Self> {
        let s = Self { kind, alpha_min };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        // alpha_min = 0 is allowed for exploratory use; every op that divides
        // by sqrt(alpha) reports a singularity instead.
        if !(0.0..1.0).contains(&self.alpha_min) {
            return Err(Error::Domain(format!(
                "alpha_min must lie in [0, 1), got {}",
                self.alpha_min
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        alpha_at(self, t)
    }
}

pub fn alpha_at(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
    }
    let span = 1.0 - schedule.alpha_min;
    Ok(match schedule.kind {
        ScheduleKind::LinearAlpha => 1.0 - t * span,
        ScheduleKind::Cosine => {
            let c = (std::f64::consts::FRAC_PI_2 * t).cos();
            schedule.alpha_min + span * c * c
        }
    })
}

/// `sqrt(alpha) * z0 + sqrt(1 - alpha) * eps`, given alpha directly.
pub fn diffuse_with_alpha(z0: &Latent, eps: &Latent, alpha: f64) -> Result<Latent> {
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z0.zip_map(eps, |x, e| a * x + b * e)
}

pub fn forward_diffuse(z0: &Latent, eps: &Latent, t: f64, schedule: &NoiseSchedule) -> Result<Latent> {
    diffuse_with_alpha(z0, eps, alpha_at(schedule, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn lin(amin: f64) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::LinearAlpha, amin).unwrap()
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_at(&lin(0.01), 0.0).unwrap(), 1.0);
        assert_eq!(alpha_at(&lin(0.0), 0.5).unwrap(), 0.5);
        let cos = NoiseSchedule::new(ScheduleKind::Cosine, 0.01).unwrap();
        assert!((alpha_at(&cos, 1.0).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(alpha_at(&cos, 0.0).unwrap(), 1.0);
        assert!(alpha_at(&cos, 1.2).is_err());
        assert!(alpha_at(&cos, -0.01).is_err());
    }

    #[test]
    fn forward_examples() {
        let z0 = Latent::from_vec(vec![1.0]).unwrap();
        let eps = Latent::from_vec(vec![2.0]).unwrap();
        let out = diffuse_with_alpha(&z0, &eps, 0.64).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-15);

        let s = lin(0.01);
        let z = Latent::from_vec(vec![0.3, -1.2]).unwrap();
        let e = Latent::from_vec(vec![0.7, 0.1]).unwrap();
        assert_eq!(forward_diffuse(&z, &e, 0.0, &s).unwrap(), z);
        let zero = Latent::zeros(&[2]);
        let a = alpha_at(&s, 0.4).unwrap();
        assert_eq!(forward_diffuse(&z, &zero, 0.4, &s).unwrap(), z.scale(a.sqrt()).unwrap());
        assert!(forward_diffuse(&z, &Latent::zeros(&[3]), 0.4, &s).is_err());
    }

    #[test]
    fn marginal_mean_matches() {
        let s = lin(0.01);
        let t = 0.6;
        let a = alpha_at(&s, t).unwrap();
        let z0 = Latent::from_vec(vec![1.5, -0.5]).unwrap();
        let mut rng = Rng::new(3);
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let eps = rng.sample_gaussian(&[2]).unwrap();
            let zt = forward_diffuse(&z0, &eps, t, &s).unwrap();
            acc[0] += zt.data()[0];
            acc[1] += zt.data()[1];
        }
        let tol = 3.0 * (1.0 - a).sqrt() / (n as f64).sqrt();
        for i in 0..2 {
            let mean = acc[i] / n as f64;
            assert!((mean - a.sqrt() * z0.data()[i]).abs() < tol);
        }
    }

    proptest! {
        #[test]
        fn strictly_decreasing(t1 in 0.0f64..1.0, dt in 1e-6f64..1.0, amin in 0.001f64..0.9, cosine: bool) {
            let t2 = (t1 + dt).min(1.0);
            prop_assume!(t2 > t1);
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::LinearAlpha };
            let s = NoiseSchedule::new(kind, amin).unwrap();
            let (a1, a2) = (alpha_at(&s, t1).unwrap(), alpha_at(&s, t2).unwrap());
            prop_assert!(a1 > a2);
            prop_assert!(a2 > 0.0 && a1 <= 1.0);
        }
    }
}
