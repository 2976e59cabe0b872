//! SDS, DDS and IDS update directions, the editing loop and its inversion.
//!
//! The generator is the identity (`theta = z`), so each gradient is a plain
//! difference of noise predictions and never differentiates through the
//! score network. The score Jacobian only enters inside FPR.

use serde::{Deserialize, Serialize};

use crate::backend::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::fpr::{fpr_refine, FprConfig, FprTrace};
use crate::guidance::{guided_score, DEFAULT_OMEGA};
use crate::latent::Latent;
use crate::rng::Rng;
use crate::schedule::{alpha_at, diffuse_with_alpha, forward_diffuse};

/// `||theta||` beyond which an edit is declared divergent.
pub const THETA_NORM_LIMIT: f64 = 1e6;

pub const EDIT_RESULT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sds,
    Dds,
    Ids,
    FprSds,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sds => "sds",
            Method::Dds => "dds",
            Method::Ids => "ids",
            Method::FprSds => "fpr-sds",
        }
    }

    pub fn uses_fpr(&self) -> bool {
        matches!(self, Method::Ids | Method::FprSds)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    pub omega: f64,
    pub steps: usize,
    pub lr: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub fpr: FprConfig,
    pub seed: u64,
    /// Keep a copy of theta every this many steps (0 disables).
    pub snapshot_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Ids,
            omega: DEFAULT_OMEGA,
            steps: 200,
            lr: 0.05,
            t_min: 0.05,
            t_max: 0.95,
            fpr: FprConfig::default(),
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::Domain(format!(
                "time range [{}, {}) must satisfy 0 <= t_min < t_max <= 1",
                self.t_min, self.t_max
            )));
        }
        if !self.omega.is_finite() || self.omega < -1.0 {
            return Err(Error::Domain(format!("omega {} must be >= -1", self.omega)));
        }
        if self.method.uses_fpr() {
            self.fpr.validate()?;
        }
        Ok(())
    }
}

/// Edit `z_src` (described by `cond_src`) towards `cond_trg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTask {
    pub z_src: Latent,
    pub cond_src: Condition,
    pub cond_trg: Condition,
}

/// Time and shared noise of one optimisation step. For FPR methods the
/// noise is the guided noise actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub t: f64,
    pub noise: Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub config: DistillConfig,
    pub z_trg: Latent,
    /// `(step, theta after that step)` snapshots.
    pub trajectory: Vec<(usize, Latent)>,
    pub noise_record: Vec<NoiseRecord>,
    pub grad_norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditResultDocument {
    schema: u32,
    result: EditResult,
}

impl EditResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&EditResultDocument {
            schema: EDIT_RESULT_SCHEMA,
            result: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: EditResultDocument = serde_json::from_str(s)?;
        if doc.schema != EDIT_RESULT_SCHEMA {
            return Err(Error::Config(format!("edit result schema {} unsupported", doc.schema)));
        }
        Ok(doc.result)
    }
}

/// `eps_hat^w(z_t, cond, t) - eps` with `z_t` diffused from `z`.
pub fn sds_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    z: &Latent,
    cond: Condition,
    t: f64,
    eps: &Latent,
    omega: f64,
) -> Result<Latent> {
    let z_t = forward_diffuse(z, eps, t, backend.schedule())?;
    guided_score(backend, &z_t, cond, t, omega)?.sub(eps)
}

/// Difference of guided predictions at target and source, both noised with
/// the same `eps`.
#[allow(clippy::too_many_arguments)]
pub fn dds_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_trg: &Latent,
    cond_trg: Condition,
    z_src: &Latent,
    cond_src: Condition,
    t: f64,
    eps: &Latent,
    omega: f64,
) -> Result<Latent> {
    z_trg.check_same_shape(z_src)?;
    let alpha = alpha_at(backend.schedule(), t)?;
    let zt_trg = diffuse_with_alpha(z_trg, eps, alpha)?;
    let zt_src = diffuse_with_alpha(z_src, eps, alpha)?;
    guided_score(backend, &zt_trg, cond_trg, t, omega)?.sub(&guided_score(backend, &zt_src, cond_src, t, omega)?)
}

/// DDS evaluated with the guided noise from FPR on the source side.
///
/// Both noisy latents are rebuilt as `forward_diffuse(., eps*, t)`, so equal
/// inputs give exactly zero and `n_iters = 0` reproduces DDS bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn ids_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    z_trg: &Latent,
    cond_trg: Condition,
    z_src: &Latent,
    cond_src: Condition,
    t: f64,
    eps: &Latent,
    omega: f64,
    fpr_cfg: &FprConfig,
) -> Result<(Latent, FprTrace)> {
    z_trg.check_same_shape(z_src)?;
    let trace = fpr_refine(backend, z_src, cond_src, t, eps, fpr_cfg)?;
    let g = dds_gradient(backend, z_trg, cond_trg, z_src, cond_src, t, &trace.eps_star, omega)?;
    Ok((g, trace))
}

/// SDS with FPR applied to the current latent against itself.
pub fn fpr_sds_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    z: &Latent,
    cond: Condition,
    t: f64,
    eps: &Latent,
    omega: f64,
    fpr_cfg: &FprConfig,
) -> Result<(Latent, FprTrace)> {
    let trace = fpr_refine(backend, z, cond, t, eps, fpr_cfg)?;
    let g = sds_gradient(backend, z, cond, t, &trace.eps_star, omega)?;
    Ok((g, trace))
}

fn method_gradient<B: ScoreBackend + ?Sized>(
    backend: &B,
    theta: &Latent,
    task: &EditTask,
    t: f64,
    eps: &Latent,
    cfg: &DistillConfig,
) -> Result<(Latent, Latent)> {
    let w = cfg.omega;
    Ok(match cfg.method {
        Method::Sds => (sds_gradient(backend, theta, task.cond_trg, t, eps, w)?, eps.clone()),
        Method::Dds => (
            dds_gradient(backend, theta, task.cond_trg, &task.z_src, task.cond_src, t, eps, w)?,
            eps.clone(),
        ),
        Method::Ids => {
            let (g, tr) = ids_gradient(
                backend,
                theta,
                task.cond_trg,
                &task.z_src,
                task.cond_src,
                t,
                eps,
                w,
                &cfg.fpr,
            )?;
            (g, tr.eps_star)
        }
        Method::FprSds => {
            let (g, tr) = fpr_sds_gradient(backend, theta, task.cond_trg, t, eps, w, &cfg.fpr)?;
            (g, tr.eps_star)
        }
    })
}

fn descend(theta: &Latent, grad: &Latent, lr: f64, step: usize) -> Result<Latent> {
    let next = theta.axpy(-lr, grad).map_err(|_| Error::Divergence {
        iteration: step,
        detail: "non-finite update".into(),
    })?;
    let n = next.norm();
    if !(n <= THETA_NORM_LIMIT) {
        return Err(Error::Divergence {
            iteration: step,
            detail: format!("||theta|| = {n:e} exceeds {THETA_NORM_LIMIT:e}"),
        });
    }
    Ok(next)
}

fn lift_step_error(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidLatent(d) => Error::Divergence {
            iteration: step,
            detail: d,
        },
        other => other,
    }
}

/// Gradient-descent editing loop starting from the source.
pub fn edit<B: ScoreBackend + ?Sized>(backend: &B, task: &EditTask, cfg: &DistillConfig) -> Result<EditResult> {
    cfg.validate()?;
    task.z_src.check_shape(backend.shape())?;
    backend.check_condition(task.cond_src)?;
    backend.check_condition(task.cond_trg)?;

    let mut rng = Rng::new(cfg.seed);
    let mut theta = task.z_src.clone();
    let mut noise_record = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut trajectory = Vec::new();
    for step in 0..cfg.steps {
        let eps = rng.sample_gaussian(backend.shape())?;
        let t = rng.sample_time(cfg.t_min, cfg.t_max)?;
        let (grad, noise) = method_gradient(backend, &theta, task, t, &eps, cfg).map_err(lift_step_error(step))?;
        grad_norms.push(grad.norm());
        theta = descend(&theta, &grad, cfg.lr, step)?;
        noise_record.push(NoiseRecord { t, noise });
        if cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0 {
            trajectory.push((step + 1, theta.clone()));
        }
    }
    Ok(EditResult {
        config: *cfg,
        z_trg: theta,
        trajectory,
        noise_record,
        grad_norms,
    })
}

/// Runs the edit backwards: starts from the edited latent, swaps the
/// source and target pairs and replays the recorded noise in reverse order.
pub fn invert<B: ScoreBackend + ?Sized>(
    backend: &B,
    result: &EditResult,
    original: &EditTask,
    cfg: &DistillConfig,
) -> Result<Latent> {
    let rc = &result.config;
    if rc.method != cfg.method || rc.lr != cfg.lr || rc.omega != cfg.omega {
        return Err(Error::Replay(format!(
            "edit was produced by {} (lr {}, omega {}), inversion asked for {} (lr {}, omega {})",
            rc.method, rc.lr, rc.omega, cfg.method, cfg.lr, cfg.omega
        )));
    }
    if result.noise_record.len() != cfg.steps {
        return Err(Error::Replay(format!(
            "noise record has {} steps, config expects {}",
            result.noise_record.len(),
            cfg.steps
        )));
    }
    result.z_trg.check_same_shape(&original.z_src)?;
    let src = &result.z_trg;
    let mut theta = result.z_trg.clone();
    for (i, rec) in result.noise_record.iter().rev().enumerate() {
        if rec.noise.shape() != theta.shape() {
            return Err(Error::Replay(format!(
                "record {i} has noise of shape {:?}",
                rec.noise.shape()
            )));
        }
        let grad = match cfg.method {
            Method::Dds | Method::Ids => dds_gradient(
                backend,
                &theta,
                original.cond_src,
                src,
                original.cond_trg,
                rec.t,
                &rec.noise,
                cfg.omega,
            ),
            Method::Sds | Method::FprSds => {
                sds_gradient(backend, &theta, original.cond_src, rec.t, &rec.noise, cfg.omega)
            }
        }
        .map_err(lift_step_error(i))?;
        theta = descend(&theta, &grad, cfg.lr, i)?;
    }
    Ok(theta)
}
