//! Identity-preservation and fidelity metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;

/// PSNR in dB, or one of the explicit sentinels. Never serialized as a
/// non-finite float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// Zero mean-squared error.
    Infinite,
    /// Nothing to compare (empty mask).
    Undefined,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.16e}"),
            Psnr::Infinite => write!(f, "inf"),
            Psnr::Undefined => write!(f, "undefined"),
        }
    }
}

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Result<Psnr> {
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("psnr peak must be positive, got {peak}")));
    }
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Db(10.0 * (peak * peak / mse).log10()))
}

pub fn psnr(a: &Latent, b: &Latent, peak: f64) -> Result<Psnr> {
    psnr_from_mse(mse(a, b)?, peak)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    shape: Vec<usize>,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(cells: Vec<bool>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != cells.len() {
            return Err(Error::Data("mask cells do not match shape".into()));
        }
        Ok(Self { shape, cells })
    }

    /// Cells with intensity strictly above `threshold`.
    pub fn from_threshold(image: &Latent, threshold: f64) -> Self {
        Self {
            shape: image.shape().to_vec(),
            cells: image.data().iter().map(|&x| x > threshold).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// `|a & b| / |a | b|`; two empty masks count as identical (1).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPsnr {
    pub psnr: Psnr,
    pub mask: BinaryMask,
}

/// Odd window scaled from 30 px at 512 px, never below 5.
pub fn default_window(h: usize, w: usize) -> usize {
    let scaled = (30.0 * h.min(w) as f64 / 512.0).round() as usize;
    let odd = if scaled % 2 == 0 { scaled + 1 } else { scaled };
    odd.max(5)
}

fn grid(l: &Latent) -> Result<(usize, usize)> {
    l.grid_dims().ok_or_else(|| Error::MetricUnsupported {
        metric: "grid metric",
        reason: format!("needs an [H, W] latent, got shape {:?}", l.shape()),
    })
}

/// Population standard deviation of `values` over a `window x window`
/// neighbourhood of every pixel, clamped at the borders.
pub fn local_std(values: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
            let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
            let n = ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64;
            let mut sum = 0.0;
            for ii in i0..=i1 {
                sum += values[ii * w + j0..=ii * w + j1].iter().sum::<f64>();
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for ii in i0..=i1 {
                ss += values[ii * w + j0..=ii * w + j1]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            out.push((ss / n).sqrt());
        }
    }
    out
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// PSNR restricted to pixels whose residual is locally flat: the local
/// standard deviation of `trg - src` must not exceed its mean (or median).
pub fn background_psnr(
    src: &Latent,
    trg: &Latent,
    window: usize,
    mode: ThresholdMode,
    peak: f64,
) -> Result<BackgroundPsnr> {
    src.check_same_shape(trg)?;
    let (h, w) = grid(src)?;
    if window % 2 == 0 || window == 0 || window > h.min(w) {
        return Err(Error::Domain(format!(
            "window {window} must be odd and at most {}",
            h.min(w)
        )));
    }
    let resid: Vec<f64> = trg.data().iter().zip(src.data()).map(|(a, b)| a - b).collect();
    let sigma = local_std(&resid, h, w, window);
    let threshold = match mode {
        ThresholdMode::Mean => sigma.iter().sum::<f64>() / sigma.len() as f64,
        ThresholdMode::Median => median(&sigma),
    };
    let cells: Vec<bool> = sigma.iter().map(|&s| s <= threshold).collect();
    let mask = BinaryMask::new(cells, vec![h, w])?;
    let kept = mask.count();
    let psnr = if kept == 0 {
        Psnr::Undefined
    } else {
        let sq: f64 = resid
            .iter()
            .zip(mask.cells())
            .filter(|(_, &m)| m)
            .map(|(r, _)| r * r)
            .sum();
        psnr_from_mse(sq / kept as f64, peak)?
    };
    Ok(BackgroundPsnr { psnr, mask })
}

/// `||(z - mu_cond) - (z_src - mu_src)||`: how far the edit moved away from
/// carrying the source's offset over to the new mode.
pub fn identity_residual(z: &Latent, mu_cond: &Latent, z_src: &Latent, mu_src: &Latent) -> Result<f64> {
    z.check_same_shape(mu_cond)?;
    z.check_same_shape(z_src)?;
    z.check_same_shape(mu_src)?;
    Ok(z.data()
        .iter()
        .zip(mu_cond.data())
        .zip(z_src.data().iter().zip(mu_src.data()))
        .map(|((z, mc), (s, ms))| {
            let d = (z - mc) - (s - ms);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Intensity-weighted centroid `(row, col)` using pixel centres.
pub fn centroid(image: &Latent) -> Result<(f64, f64)> {
    let (h, w) = grid(image)?;
    let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = image.data()[i * w + j].max(0.0);
            m += v;
            r += v * (i as f64 + 0.5);
            c += v * (j as f64 + 0.5);
        }
    }
    if m == 0.0 {
        return Err(Error::Data("centroid of an all-zero image".into()));
    }
    Ok((r / m, c / m))
}

fn ssim_constants(range: f64) -> (f64, f64) {
    let l = if range > 0.0 { range } else { 1.0 };
    ((0.01 * l).powi(2), (0.03 * l).powi(2))
}

fn check_ssim_grid(a: &Latent, b: &Latent) -> Result<(usize, usize)> {
    a.check_same_shape(b)?;
    let (h, w) = a.grid_dims().ok_or_else(|| Error::MetricUnsupported {
        metric: "ssim",
        reason: format!("needs an [H, W] latent, got shape {:?}", a.shape()),
    })?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::MetricUnsupported {
            metric: "ssim",
            reason: format!("grid {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    Ok((h, w))
}

/// Mean SSIM over all valid 7x7 windows with dynamic range `range`; when
/// `grad` is given it receives `d SSIM / d b`.
fn ssim_impl(a: &Latent, b: &Latent, range: f64, mut grad: Option<&mut Vec<f64>>) -> Result<f64> {
    let (h, w) = check_ssim_grid(a, b)?;
    let (c1, c2) = ssim_constants(range);
    let (ad, bd) = (a.data(), b.data());
    let k = SSIM_WINDOW;
    let n = (k * k) as f64;
    let n_windows = ((h - k + 1) * (w - k + 1)) as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(ad.len(), 0.0);
    }
    let mut total = 0.0;
    for i0 in 0..=h - k {
        for j0 in 0..=w - k {
            let cells = || (i0..i0 + k).flat_map(move |i| (j0..j0 + k).map(move |j| i * w + j));
            let mu_a = cells().map(|p| ad[p]).sum::<f64>() / n;
            let mu_b = cells().map(|p| bd[p]).sum::<f64>() / n;
            let var_a = cells().map(|p| (ad[p] - mu_a).powi(2)).sum::<f64>() / n;
            let var_b = cells().map(|p| (bd[p] - mu_b).powi(2)).sum::<f64>() / n;
            let cov = cells().map(|p| (ad[p] - mu_a) * (bd[p] - mu_b)).sum::<f64>() / n;
            let a1 = 2.0 * mu_a * mu_b + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = mu_a * mu_a + mu_b * mu_b + c1;
            let b2 = var_a + var_b + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if let Some(g) = grad.as_deref_mut() {
                for p in cells() {
                    let d = 2.0 * mu_a / (n * a1) + 2.0 * (ad[p] - mu_a) / (n * a2)
                        - 2.0 * mu_b / (n * b1)
                        - 2.0 * (bd[p] - mu_b) / (n * b2);
                    g[p] += s * d / n_windows;
                }
            }
        }
    }
    Ok(total / n_windows)
}

/// SSIM with an explicit dynamic range `range` for the stabilising constants.
pub fn ssim_with_range(a: &Latent, b: &Latent, range: f64) -> Result<f64> {
    ssim_impl(a, b, range, None)
}

/// SSIM and its gradient with respect to the second image.
pub fn ssim_and_grad(a: &Latent, b: &Latent, range: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = Vec::new();
    let s = ssim_impl(a, b, range, Some(&mut g))?;
    Ok((s, g))
}

/// Single-scale SSIM; the dynamic range spans both images so the metric is
/// symmetric.
pub fn ssim(a: &Latent, b: &Latent) -> Result<f64> {
    check_ssim_grid(a, b)?;
    let (lo_a, hi_a) = a.min_max();
    let (lo_b, hi_b) = b.min_max();
    ssim_with_range(a, b, hi_a.max(hi_b) - lo_a.min(lo_b))
}
