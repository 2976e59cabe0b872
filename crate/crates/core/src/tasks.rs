//! Synthetic worlds with a ground-truth notion of identity.
//!
//! Vector worlds: one isotropic Gaussian mode per label, identity is the
//! offset from the mode. Shape images: a square (label 0) or a disc
//! (label 1) of fixed size at a random integer centre on a 16x16 grid,
//! identity is the centre.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Condition, GaussianMixtureBackend, MixtureComponent};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorWorldSpec {
    pub modes: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

impl VectorWorldSpec {
    /// Modes at (-2, 0) and (+2, 0), sigma 0.3.
    pub fn two_mode() -> Self {
        Self {
            modes: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            sigmas: vec![0.3, 0.3],
            schedule: NoiseSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorWorld {
    modes: Vec<Latent>,
    sigmas: Vec<f64>,
    backend: GaussianMixtureBackend,
}

pub fn make_vector_world(spec: &VectorWorldSpec) -> Result<VectorWorld> {
    if spec.modes.len() < 2 {
        return Err(Error::Config(format!(
            "vector world needs at least 2 labels, got {}",
            spec.modes.len()
        )));
    }
    if spec.sigmas.len() != spec.modes.len() {
        return Err(Error::Config(format!(
            "{} modes but {} sigmas",
            spec.modes.len(),
            spec.sigmas.len()
        )));
    }
    let modes = spec
        .modes
        .iter()
        .map(|m| Latent::from_vec(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in modes.iter().enumerate() {
        for b in &modes[i + 1..] {
            if a == b {
                return Err(Error::Config("vector world labels must have distinct modes".into()));
            }
        }
    }
    let backend = GaussianMixtureBackend::one_component_per_label(modes.clone(), spec.sigmas.clone(), spec.schedule)?;
    Ok(VectorWorld {
        modes,
        sigmas: spec.sigmas.clone(),
        backend,
    })
}

impl VectorWorld {
    pub fn backend(&self) -> &GaussianMixtureBackend {
        &self.backend
    }

    pub fn num_labels(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.modes[0].len()
    }

    pub fn mode(&self, cond: Condition) -> Result<&Latent> {
        match cond {
            Condition::Label(k) if k < self.modes.len() => Ok(&self.modes[k]),
            other => Err(Error::Condition(format!("{other} is not a label of this world"))),
        }
    }

    pub fn sigma(&self, cond: Condition) -> Result<f64> {
        self.mode(cond)?;
        match cond {
            Condition::Label(k) => Ok(self.sigmas[k]),
            Condition::Null => unreachable!(),
        }
    }

    pub fn sample(&self, cond: Condition, rng: &mut Rng) -> Result<Latent> {
        self.mode(cond)?;
        self.backend.sample(cond, rng)
    }
}

/// One-label world `N(mu, sigma^2 I)`; its posterior mean is affine in z_t.
pub fn single_gaussian(mu: &[f64], sigma: f64, schedule: NoiseSchedule) -> Result<GaussianMixtureBackend> {
    GaussianMixtureBackend::one_component_per_label(vec![Latent::from_vec(mu.to_vec())?], vec![sigma], schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
}

impl ShapeKind {
    pub fn label(&self) -> Condition {
        match self {
            ShapeKind::Square => Condition::Label(0),
            ShapeKind::Disc => Condition::Label(1),
        }
    }

    pub fn from_condition(cond: Condition) -> Result<Self> {
        match cond {
            Condition::Label(0) => Ok(ShapeKind::Square),
            Condition::Label(1) => Ok(ShapeKind::Disc),
            other => Err(Error::Condition(format!("no shape for {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeSpec {
    pub side: usize,
    pub object_size: usize,
    pub center_min: usize,
    pub center_max: usize,
    pub per_label: usize,
    /// Box-blur radius applied after rasterising (0 keeps binary images).
    pub blur_radius: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            side: 16,
            object_size: 6,
            center_min: 3,
            center_max: 13,
            per_label: 20,
            blur_radius: 0,
        }
    }
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(8..=32).contains(&self.side) {
            return Err(Error::Config(format!("side {} outside 8..=32", self.side)));
        }
        if self.object_size == 0 || self.object_size > self.side {
            return Err(Error::Config(format!(
                "object_size {} invalid for side {}",
                self.object_size, self.side
            )));
        }
        if self.center_min > self.center_max || self.center_max > self.side {
            return Err(Error::Config(format!(
                "centre range [{}, {}] invalid for side {}",
                self.center_min, self.center_max, self.side
            )));
        }
        if self.per_label == 0 {
            return Err(Error::Config("per_label must be positive".into()));
        }
        Ok(())
    }
}

/// Rasterises a shape. A pixel (r, c) is on when its centre (r+0.5, c+0.5)
/// lies strictly inside the square of side `size`, or within the disc of
/// diameter `size`, centred at `center = (row, col)`.
pub fn render_shape(kind: ShapeKind, center: (f64, f64), size: usize, side: usize) -> Latent {
    let half = size as f64 / 2.0;
    let mut data = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let dy = r as f64 + 0.5 - center.0;
            let dx = c as f64 + 0.5 - center.1;
            let on = match kind {
                ShapeKind::Square => dy.abs() < half && dx.abs() < half,
                ShapeKind::Disc => dx * dx + dy * dy <= half * half,
            };
            if on {
                data[r * side + c] = 1.0;
            }
        }
    }
    Latent::new(data, vec![side, side]).expect("finite by construction")
}

/// Mean over the (2r+1)^2 neighbourhood clamped to the image.
pub fn box_blur(image: &Latent, radius: usize) -> Result<Latent> {
    let (h, w) = image
        .grid_dims()
        .ok_or_else(|| Error::Domain(format!("box blur needs a grid, got shape {:?}", image.shape())))?;
    if radius == 0 {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (r0, r1) = (i.saturating_sub(radius), (i + radius).min(h - 1));
            let (c0, c1) = (j.saturating_sub(radius), (j + radius).min(w - 1));
            let mut s = 0.0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    s += src[r * w + c];
                }
            }
            out[i * w + j] = s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    Latent::new(out, image.shape().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    pub image: Latent,
    pub kind: ShapeKind,
    /// `(row, col)` of the object's centre.
    pub center: (f64, f64),
}

impl ShapeSample {
    pub fn cond(&self) -> Condition {
        self.kind.label()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeImageDataset {
    pub spec: ShapeSpec,
    pub samples: Vec<ShapeSample>,
}

/// `per_label` squares then `per_label` discs, centres uniform over the
/// integer range.
pub fn make_shape_dataset(spec: &ShapeSpec, rng: &mut Rng) -> Result<ShapeImageDataset> {
    spec.validate()?;
    let span = spec.center_max - spec.center_min + 1;
    let mut samples = Vec::with_capacity(2 * spec.per_label);
    for kind in [ShapeKind::Square, ShapeKind::Disc] {
        for _ in 0..spec.per_label {
            let r = (spec.center_min + rng.below(span)) as f64;
            let c = (spec.center_min + rng.below(span)) as f64;
            let image = box_blur(
                &render_shape(kind, (r, c), spec.object_size, spec.side),
                spec.blur_radius,
            )?;
            samples.push(ShapeSample {
                image,
                kind,
                center: (r, c),
            });
        }
    }
    Ok(ShapeImageDataset { spec: *spec, samples })
}

impl ShapeImageDataset {
    pub fn pairs(&self) -> Vec<(Latent, Condition)> {
        self.samples.iter().map(|s| (s.image.clone(), s.cond())).collect()
    }

    /// Empirical mixture: one equal-weight component of std `sigma` per
    /// image, each label selecting its own images.
    pub fn to_gmm(&self, sigma: f64, schedule: NoiseSchedule) -> Result<GaussianMixtureBackend> {
        let n = self.samples.len();
        let mut label_map = vec![Vec::new(), Vec::new()];
        let components = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if let Condition::Label(k) = s.cond() {
                    label_map[k].push(i);
                }
                MixtureComponent {
                    weight: 1.0 / n as f64,
                    mean: s.image.clone(),
                    sigma,
                }
            })
            .collect();
        GaussianMixtureBackend::new(components, label_map, schedule)
    }

    /// Writes `images/NNNN.pgm` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("images/{i:04}.pgm");
            write_pgm(&dir.join(&file), &s.image)?;
            entries.push(ManifestEntry {
                file,
                kind: s.kind,
                label: s.cond(),
                center: [s.center.0, s.center.1],
            });
        }
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA,
            spec: self.spec,
            entries,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reloads a dataset written by [`ShapeImageDataset::save`]. Pixel
    /// values come back quantised to 8 bits.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!(
                "manifest schema {} unsupported",
                manifest.schema
            )));
        }
        let samples = manifest
            .entries
            .into_iter()
            .map(|e| {
                Ok(ShapeSample {
                    image: read_pgm(&dir.join(&e.file))?,
                    kind: e.kind,
                    center: (e.center[0], e.center[1]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: manifest.spec,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: ShapeKind,
    pub label: Condition,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub spec: ShapeSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Binary PGM: values clamped to [0, 1], scaled to 0..255, round half to even.
pub fn encode_pgm(image: &Latent) -> Result<Vec<u8>> {
    let (h, w) = image
        .grid_dims()
        .ok_or_else(|| Error::Domain(format!("PGM needs a grid, got shape {:?}", image.shape())))?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8),
    );
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Latent> {
    let bad = |m: &str| Error::Data(format!("malformed PGM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if pixels.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", pixels.len(), w * h)));
    }
    Latent::new(pixels.iter().map(|&p| p as f64 / maxval as f64).collect(), vec![h, w])
}

pub fn write_pgm(path: &Path, image: &Latent) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Latent> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
