//! Conditional noise predictors `eps_hat(z_t, y, t)` with exact
//! vector-Jacobian products.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::schedule::NoiseSchedule;

mod gmm;
mod mlp;

pub use gmm::{GaussianMixtureBackend, MixtureComponent};
pub use mlp::{train_denoiser, MlpDenoiserBackend, TrainConfig, TrainReport, T_EMBED_FREQS};

/// The condition `y`: a discrete label or the null token used by the
/// unconditional branch of classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Null,
    Label(usize),
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Null => write!(f, "null"),
            Condition::Label(k) => write!(f, "label{k}"),
        }
    }
}

pub trait ScoreBackend: Send + Sync {
    /// Shape of the latents this backend accepts.
    fn shape(&self) -> &[usize];

    fn schedule(&self) -> &NoiseSchedule;

    fn num_labels(&self) -> usize;

    /// Predicted noise `eps_hat(z_t, cond, t)`.
    fn score(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent>;

    /// `u^T d eps_hat / d z_t`.
    fn score_vjp(&self, z_t: &Latent, cond: Condition, t: f64, u: &Latent) -> Result<Latent>;

    fn check_condition(&self, cond: Condition) -> Result<()> {
        match cond {
            Condition::Label(k) if k >= self.num_labels() => Err(Error::Condition(format!(
                "label {k} not in backend label set (0..{})",
                self.num_labels()
            ))),
            _ => Ok(()),
        }
    }

    fn check_inputs(&self, z_t: &Latent, t: f64) -> Result<()> {
        z_t.check_shape(self.shape())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Serializable choice of backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Gmm(GaussianMixtureBackend),
    Mlp(MlpDenoiserBackend),
}

pub const BACKEND_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendDocument {
    schema: u32,
    backend: Backend,
}

impl Backend {
    pub fn as_score(&self) -> &dyn ScoreBackend {
        match self {
            Backend::Gmm(b) => b,
            Backend::Mlp(b) => b,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BackendDocument {
            schema: BACKEND_SCHEMA,
            backend: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BackendDocument = serde_json::from_str(s)?;
        if doc.schema != BACKEND_SCHEMA {
            return Err(Error::Config(format!(
                "backend schema {} unsupported (expected {BACKEND_SCHEMA})",
                doc.schema
            )));
        }
        match &doc.backend {
            Backend::Gmm(g) => g.validate()?,
            Backend::Mlp(m) => m.validate()?,
        }
        Ok(doc.backend)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl ScoreBackend for Backend {
    fn shape(&self) -> &[usize] {
        self.as_score().shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.as_score().schedule()
    }

    fn num_labels(&self) -> usize {
        self.as_score().num_labels()
    }

    fn score(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent> {
        self.as_score().score(z_t, cond, t)
    }

    fn score_vjp(&self, z_t: &Latent, cond: Condition, t: f64, u: &Latent) -> Result<Latent> {
        self.as_score().score_vjp(z_t, cond, t, u)
    }
}
