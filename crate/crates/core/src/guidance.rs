//! Classifier-free guidance: `(1 + w) eps(z, y, t) - w eps(z, null, t)`.

use serde::{Deserialize, Serialize};

use crate::backend::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::latent::Latent;

pub const DEFAULT_OMEGA: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: DEFAULT_OMEGA }
    }
}

impl GuidanceConfig {
    pub fn new(omega: f64) -> Result<Self> {
        check_omega(omega)?;
        Ok(Self { omega })
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !omega.is_finite() || omega < -1.0 {
        return Err(Error::Domain(format!(
            "guidance scale {omega} must be finite and >= -1"
        )));
    }
    Ok(())
}

pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, omega: f64) -> Result<Latent> {
    eps_cond.zip_map(eps_uncond, |c, u| (1.0 + omega) * c - omega * u)
}

fn require_label(cond: Condition) -> Result<()> {
    if cond == Condition::Null {
        return Err(Error::Usage(
            "guided score needs a label; the null branch is taken internally".into(),
        ));
    }
    Ok(())
}

/// The guided noise prediction used by every distillation operator.
pub fn guided_score<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_t: &Latent,
    cond: Condition,
    t: f64,
    omega: f64,
) -> Result<Latent> {
    require_label(cond)?;
    check_omega(omega)?;
    let c = backend.score(z_t, cond, t)?;
    if omega == 0.0 {
        return Ok(c);
    }
    let u = backend.score(z_t, Condition::Null, t)?;
    cfg_combine(&c, &u, omega)
}

/// `u^T d guided_score / d z_t`, the same guidance combination of per-branch vjps.
pub fn guided_score_vjp<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_t: &Latent,
    cond: Condition,
    t: f64,
    omega: f64,
    u: &Latent,
) -> Result<Latent> {
    require_label(cond)?;
    check_omega(omega)?;
    let c = backend.score_vjp(z_t, cond, t, u)?;
    if omega == 0.0 {
        return Ok(c);
    }
    let n = backend.score_vjp(z_t, Condition::Null, t, u)?;
    cfg_combine(&c, &n, omega)
}
