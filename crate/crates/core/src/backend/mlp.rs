//! Tiny conditional MLP noise predictor with hand-written reverse mode.
//!
//! Input layout: `[z_t (D) | sin(f_k t), cos(f_k t) for f_k in T_EMBED_FREQS | one-hot(label) with a trailing null slot]`.
//! Hidden layers use tanh, the output layer is linear with `D` outputs.

use serde::{Deserialize, Serialize};

use super::{Condition, ScoreBackend};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::Rng;
use crate::schedule::{forward_diffuse, NoiseSchedule};

/// Sinusoidal time-embedding frequencies (geometric, ratio 2).
pub const T_EMBED_FREQS: [f64; 8] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// row-major `outputs x inputs`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()),
        );
    }

    /// `W^T g`
    fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, gi) in self.weights.chunks_exact(self.inputs).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gi;
            }
        }
        out
    }

    fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDenoiserBackend {
    shape: Vec<usize>,
    schedule: NoiseSchedule,
    num_labels: usize,
    layers: Vec<Dense>,
}

struct Activations {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer l.
    acts: Vec<Vec<f64>>,
}

impl MlpDenoiserBackend {
    /// Xavier-uniform initialisation with zero biases.
    pub fn new(
        shape: &[usize],
        num_labels: usize,
        hidden: &[usize],
        schedule: NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d: usize = shape.iter().product();
        if d == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Data("layer widths must be positive".into()));
        }
        let mut widths = vec![d + 2 * T_EMBED_FREQS.len() + num_labels + 1];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                Dense {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| limit * (2.0 * rng.uniform() - 1.0))
                        .collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        let b = Self {
            shape: shape.to_vec(),
            schedule,
            num_labels,
            layers,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let d: usize = self.shape.iter().product();
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Data("network has no layers".into()))?;
        if first.inputs != self.input_width() {
            return Err(Error::Data(format!(
                "first layer expects {} inputs, layout needs {}",
                first.inputs,
                self.input_width()
            )));
        }
        if self.layers.last().map(|l| l.outputs) != Some(d) {
            return Err(Error::Data("last layer width must equal latent size".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Data("consecutive layer widths disagree".into()));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Data("layer parameter arrays have wrong length".into()));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::Data("non-finite network parameter".into()));
            }
        }
        Ok(())
    }

    fn latent_len(&self) -> usize {
        self.shape.iter().product()
    }

    fn input_width(&self) -> usize {
        self.latent_len() + 2 * T_EMBED_FREQS.len() + self.num_labels + 1
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    fn encode(&self, z: &[f64], cond: Condition, t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.input_width());
        x.extend_from_slice(z);
        for f in T_EMBED_FREQS {
            x.push((f * t).sin());
            x.push((f * t).cos());
        }
        let slot = match cond {
            Condition::Label(k) => k,
            Condition::Null => self.num_labels,
        };
        x.extend((0..=self.num_labels).map(|i| if i == slot { 1.0 } else { 0.0 }));
        x
    }

    fn forward(&self, z: &[f64], cond: Condition, t: f64) -> Activations {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.encode(z, cond, t));
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&acts[l], &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        Activations { acts }
    }

    /// Reverse pass from output gradient `g`. Returns the gradient with
    /// respect to the network input and, when `param_grad` is given,
    /// accumulates parameter gradients into it (layer order, weights then bias).
    fn backward(&self, a: &Activations, g: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut g = g.to_vec();
        let last = self.layers.len() - 1;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.n_params();
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l < last {
                for (gi, y) in g.iter_mut().zip(&a.acts[l + 1]) {
                    *gi *= 1.0 - y * y;
                }
            }
            if let Some(pg) = param_grad.as_deref_mut() {
                let base = offsets[l];
                let input = &a.acts[l];
                for (o, gi) in g.iter().enumerate() {
                    let row = &mut pg[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                    for (p, x) in row.iter_mut().zip(input) {
                        *p += gi * x;
                    }
                    pg[base + layer.weights.len() + o] += gi;
                }
            }
            g = layer.backward_input(&g);
        }
        g
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

impl ScoreBackend for MlpDenoiserBackend {
    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn score(&self, z_t: &Latent, cond: Condition, t: f64) -> Result<Latent> {
        self.check_inputs(z_t, t)?;
        self.check_condition(cond)?;
        let mut a = self.forward(z_t.data(), cond, t);
        Latent::new(a.acts.pop().expect("output layer"), self.shape.clone())
    }

    fn score_vjp(&self, z_t: &Latent, cond: Condition, t: f64, u: &Latent) -> Result<Latent> {
        self.check_inputs(z_t, t)?;
        self.check_condition(cond)?;
        u.check_shape(&self.shape)?;
        let a = self.forward(z_t.data(), cond, t);
        let mut g = self.backward(&a, u.data(), None);
        g.truncate(self.latent_len());
        Latent::new(g, self.shape.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing the condition by the null token.
    pub cond_drop_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 3e-3,
            batch_size: 32,
            cond_drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub backend: MlpDenoiserBackend,
    /// Mean of `||eps_hat - eps||^2` per epoch.
    pub losses: Vec<f64>,
}

/// Minimises `E ||eps_hat(z_t, y, t) - eps||^2` with Adam over shuffled
/// minibatches, dropping the condition to null with `cond_drop_prob`.
pub fn train_denoiser(
    mut backend: MlpDenoiserBackend,
    dataset: &[(Latent, Condition)],
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.cond_drop_prob) {
        return Err(Error::Domain(
            "need lr > 0, batch_size > 0 and cond_drop_prob in [0, 1]".into(),
        ));
    }
    for (z, c) in dataset {
        z.check_shape(&backend.shape)?;
        backend.check_condition(*c)?;
    }

    let (beta1, beta2, eps_adam): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let n_params = backend.n_params();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let schedule = backend.schedule;

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; n_params];
            for &i in batch {
                let (z0, cond) = &dataset[i];
                let cond = if rng.uniform() < cfg.cond_drop_prob {
                    Condition::Null
                } else {
                    *cond
                };
                let t = rng.uniform();
                let eps = rng.sample_gaussian(&backend.shape)?;
                let z_t = forward_diffuse(z0, &eps, t, &schedule)?;
                let a = backend.forward(z_t.data(), cond, t);
                let out = a.acts.last().expect("output layer");
                let resid: Vec<f64> = out.iter().zip(eps.data()).map(|(o, e)| o - e).collect();
                epoch_loss += resid.iter().map(|r| r * r).sum::<f64>();
                let g: Vec<f64> = resid.iter().map(|r| 2.0 * r / batch.len() as f64).collect();
                backend.backward(&a, &g, Some(&mut grad));
            }
            step += 1;
            let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
            for (((p, g), mi), vi) in backend.params_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps_adam);
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                iteration: epoch,
                detail: "training loss is not finite".into(),
            });
        }
        losses.push(mean);
    }
    Ok(TrainReport { backend, losses })
}
