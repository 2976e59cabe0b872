//! Experiment runner behind the `idslab` binary.
//!
//! A run reads one JSON config (`"schema": 1`, unknown keys rejected) and
//! writes `<out>/<name>/<command>/` containing `results.csv`,
//! `resolved-config.json` (every default filled in) and `images/`.
//! Independent cells run in parallel; rows are written in cell order, so
//! outputs are byte-identical for a given config and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    train_denoiser, Backend, Condition, GaussianMixtureBackend, MlpDenoiserBackend, ScoreBackend, TrainConfig,
};
use crate::distill::{edit, invert, DistillConfig, EditResult, EditTask, Method};
use crate::error::{Error, Result};
use crate::fpr::{refine, FprConfig, FprMetric, UpdateTarget};
use crate::guidance::{guided_score, DEFAULT_OMEGA};
use crate::latent::Latent;
use crate::metrics::{
    background_psnr, centroid, default_window, identity_residual, iou, mse, psnr, ssim, BinaryMask, Psnr,
    ThresholdMode, SSIM_WINDOW,
};
use crate::rng::Rng;
use crate::schedule::{alpha_at, diffuse_with_alpha, NoiseSchedule};
use crate::tasks::{
    encode_pgm, make_shape_dataset, make_vector_world, ShapeImageDataset, ShapeKind, ShapeSpec, VectorWorld,
    VectorWorldSpec,
};
use crate::tweedie::posterior_mean_with_alpha;

pub const CONFIG_SCHEMA: u32 = 1;

/// Grid masks for IoU come from thresholding intensities at this value.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Edit,
    Ablate,
    Invert,
    SweepPosterior,
    Train,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Edit => "edit",
            Command::Ablate => "ablate",
            Command::Invert => "invert",
            Command::SweepPosterior => "sweep-posterior",
            Command::Train => "train",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub jobs: Option<usize>,
    /// Replaces the config's master seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub backend: BackendSource,
    #[serde(default)]
    pub tasks: TaskConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub edit: EditSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WorldConfig {
    Vector {
        modes: Vec<Vec<f64>>,
        sigmas: Vec<f64>,
        #[serde(default)]
        schedule: NoiseSchedule,
    },
    Shapes {
        #[serde(default)]
        shapes: ShapeSpec,
        /// Std of each empirical-mixture component.
        #[serde(default = "default_shape_sigma")]
        sigma: f64,
        #[serde(default)]
        schedule: NoiseSchedule,
        #[serde(default)]
        dataset_seed: u64,
    },
}

fn default_shape_sigma() -> f64 {
    0.1
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = VectorWorldSpec::two_mode();
        WorldConfig::Vector {
            modes: s.modes,
            sigmas: s.sigmas,
            schedule: s.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSource {
    /// The world's own Gaussian mixture.
    #[default]
    Analytic,
    /// A backend JSON document; relative paths resolve against the config.
    Trained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub count: usize,
    pub cond_src: usize,
    pub cond_trg: usize,
    /// Explicit source latents for vector worlds; overrides `count`.
    pub sources: Vec<Vec<f64>>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            count: 1,
            cond_src: 0,
            cond_trg: 1,
            sources: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FprSection {
    pub lambda: f64,
    pub n_iters: usize,
    pub metric: FprMetric,
    /// Defaults to the enclosing section's omega.
    pub omega: Option<f64>,
    pub update: UpdateTarget,
}

impl Default for FprSection {
    fn default() -> Self {
        let d = FprConfig::default();
        Self {
            lambda: d.lambda,
            n_iters: d.n_iters,
            metric: d.metric,
            omega: None,
            update: d.update,
        }
    }
}

impl FprSection {
    fn resolve(&mut self, omega: f64) {
        self.omega.get_or_insert(omega);
    }

    fn to_config(self) -> FprConfig {
        FprConfig {
            lambda: self.lambda,
            n_iters: self.n_iters,
            metric: self.metric,
            omega: self.omega.unwrap_or(DEFAULT_OMEGA),
            update: self.update,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub omega: f64,
    pub steps: usize,
    /// Defaults to 0.05 for vector worlds and 0.1 for shape worlds.
    pub lr: Option<f64>,
    pub t_min: f64,
    pub t_max: f64,
    pub fpr: FprSection,
    pub snapshot_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            omega: d.omega,
            steps: d.steps,
            lr: None,
            t_min: d.t_min,
            t_max: d.t_max,
            fpr: FprSection::default(),
            snapshot_every: d.snapshot_every,
        }
    }
}

impl DistillSection {
    fn config(&self, method: Method, seed: u64) -> DistillConfig {
        DistillConfig {
            method,
            omega: self.omega,
            steps: self.steps,
            lr: self.lr.unwrap_or(0.05),
            t_min: self.t_min,
            t_max: self.t_max,
            fpr: self.fpr.to_config(),
            seed,
            snapshot_every: self.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub methods: Vec<Method>,
    pub seeds: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dds, Method::Ids],
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub lambdas: Vec<f64>,
    pub n_iters: Vec<usize>,
    pub steps: Vec<usize>,
    pub t_ranges: Vec<[f64; 2]>,
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.1, 0.3, 1.0, 3.0],
            n_iters: vec![0, 1, 3],
            steps: vec![200, 400],
            t_ranges: vec![[0.05, 0.95], [0.0, 0.2]],
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSection {
    pub methods: Vec<Method>,
    pub seeds: usize,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dds, Method::Ids],
            seeds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ts: Vec<f64>,
    pub seeds: usize,
    /// Guidance inside the diagnostic; 0 uses the plain conditional score.
    pub omega: f64,
    pub fpr: FprSection,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            ts: (0..10).map(|i| i as f64 / 10.0).collect(),
            seeds: 20,
            omega: 0.0,
            fpr: FprSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Points drawn per label from a vector world (shape worlds use their
    /// dataset as is).
    pub per_label: usize,
    pub hidden: Vec<usize>,
    #[serde(flatten)]
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            per_label: 200,
            hidden: vec![64, 64],
            optim: TrainConfig::default(),
        }
    }
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {msg}", path.display()))
}

/// Parses and validates a config file, materialising every default and
/// applying the seed override.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: Config = serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let BackendSource::Trained { path: p } = &mut cfg.backend {
        if p.is_relative() {
            *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
        }
    }
    cfg.resolve();
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => config_error(path, m),
        other => other,
    })?;
    Ok(cfg)
}

impl Config {
    fn resolve(&mut self) {
        if self.distill.lr.is_none() {
            self.distill.lr = Some(match self.world {
                WorldConfig::Vector { .. } => 0.05,
                WorldConfig::Shapes { .. } => 0.1,
            });
        }
        let omega = self.distill.omega;
        self.distill.fpr.resolve(omega);
        let omega = self.sweep.omega;
        self.sweep.fpr.resolve(omega);
        if !self.tasks.sources.is_empty() {
            self.tasks.count = self.tasks.sources.len();
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("schema {} unsupported (expected {CONFIG_SCHEMA})", self.schema));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name {:?} must be a plain directory name", self.name));
        }
        if self.tasks.count == 0 {
            return bad("tasks.count must be positive".into());
        }
        if self.edit.methods.is_empty() || self.inversion.methods.is_empty() {
            return bad("method lists must not be empty".into());
        }
        if self.edit.seeds == 0 || self.inversion.seeds == 0 || self.ablation.seeds == 0 || self.sweep.seeds == 0 {
            return bad("seed counts must be positive".into());
        }
        let a = &self.ablation;
        if a.lambdas.is_empty() || a.n_iters.is_empty() || a.steps.is_empty() || a.t_ranges.is_empty() {
            return bad("ablation lists must not be empty".into());
        }
        if self.sweep.ts.is_empty() || self.sweep.ts.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("sweep.ts must be a non-empty list in [0, 1)".into());
        }
        if self.train.hidden.is_empty() || self.train.per_label == 0 {
            return bad("train.hidden and train.per_label must be non-empty / positive".into());
        }
        let check = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        for m in [Method::Sds, Method::Dds, Method::Ids, Method::FprSds] {
            check(self.distill.config(m, 0).validate())?;
        }
        for &[lo, hi] in &a.t_ranges {
            check(
                DistillConfig {
                    t_min: lo,
                    t_max: hi,
                    ..self.distill.config(Method::Dds, 0)
                }
                .validate(),
            )?;
        }
        for &lambda in &a.lambdas {
            let fpr = FprConfig {
                lambda,
                ..self.distill.fpr.to_config()
            };
            check(fpr.validate())?;
        }
        check(self.sweep.fpr.to_config().validate())?;
        let world = World::build(&self.world).map_err(|e| Error::Config(format!("world: {e}")))?;
        for c in [self.tasks.cond_src, self.tasks.cond_trg] {
            if c >= world.num_labels() {
                return bad(format!("label {c} does not exist (world has {})", world.num_labels()));
            }
        }
        if let Some(src) = self
            .tasks
            .sources
            .iter()
            .find(|s| s.len() != world.shape().iter().product::<usize>())
        {
            return bad(format!(
                "source of length {} does not fit shape {:?}",
                src.len(),
                world.shape()
            ));
        }
        Ok(())
    }
}

/// Ground truth behind a config: a vector world or a shape dataset.
#[derive(Debug, Clone)]
pub enum World {
    Vector(VectorWorld),
    Shapes {
        dataset: ShapeImageDataset,
        gmm: GaussianMixtureBackend,
    },
}

impl World {
    pub fn build(cfg: &WorldConfig) -> Result<Self> {
        Ok(match cfg {
            WorldConfig::Vector {
                modes,
                sigmas,
                schedule,
            } => World::Vector(make_vector_world(&VectorWorldSpec {
                modes: modes.clone(),
                sigmas: sigmas.clone(),
                schedule: *schedule,
            })?),
            WorldConfig::Shapes {
                shapes,
                sigma,
                schedule,
                dataset_seed,
            } => {
                let dataset = make_shape_dataset(shapes, &mut Rng::new(*dataset_seed))?;
                let gmm = dataset.to_gmm(*sigma, *schedule)?;
                World::Shapes { dataset, gmm }
            }
        })
    }

    pub fn analytic(&self) -> &GaussianMixtureBackend {
        match self {
            World::Vector(w) => w.backend(),
            World::Shapes { gmm, .. } => gmm,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.analytic().shape()
    }

    pub fn num_labels(&self) -> usize {
        self.analytic().num_labels()
    }

    fn is_grid(&self) -> bool {
        matches!(self, World::Shapes { .. })
    }

    /// Source latents for the configured tasks.
    pub fn tasks(&self, cfg: &TaskConfig, master: u64) -> Result<Vec<EditTask>> {
        let (cond_src, cond_trg) = (Condition::Label(cfg.cond_src), Condition::Label(cfg.cond_trg));
        let sources: Vec<Latent> = match self {
            World::Vector(w) if cfg.sources.is_empty() => (0..cfg.count)
                .map(|i| w.sample(cond_src, &mut Rng::derive(master, u64::MAX - i as u64)))
                .collect::<Result<_>>()?,
            World::Vector(_) => cfg
                .sources
                .iter()
                .map(|s| Latent::new(s.clone(), self.shape().to_vec()))
                .collect::<Result<_>>()?,
            World::Shapes { dataset, .. } => {
                let kind = ShapeKind::from_condition(cond_src)?;
                let pool: Vec<&Latent> = dataset
                    .samples
                    .iter()
                    .filter(|s| s.kind == kind)
                    .map(|s| &s.image)
                    .collect();
                (0..cfg.count).map(|i| pool[i % pool.len()].clone()).collect()
            }
        };
        Ok(sources
            .into_iter()
            .map(|z_src| EditTask {
                z_src,
                cond_src,
                cond_trg,
            })
            .collect())
    }

    pub fn training_pairs(&self, per_label: usize, rng: &mut Rng) -> Result<Vec<(Latent, Condition)>> {
        match self {
            World::Vector(w) => {
                let mut out = Vec::with_capacity(per_label * w.num_labels());
                for k in 0..w.num_labels() {
                    for _ in 0..per_label {
                        out.push((w.sample(Condition::Label(k), rng)?, Condition::Label(k)));
                    }
                }
                Ok(out)
            }
            World::Shapes { dataset, .. } => Ok(dataset.pairs()),
        }
    }

    fn mode(&self, cond: Condition) -> Option<&Latent> {
        match self {
            World::Vector(w) => w.mode(cond).ok(),
            World::Shapes { .. } => None,
        }
    }
}

fn load_backend(cfg: &Config, world: &World) -> Result<Backend> {
    let backend = match &cfg.backend {
        BackendSource::Analytic => Backend::Gmm(world.analytic().clone()),
        BackendSource::Trained { path } => Backend::load(path)?,
    };
    if backend.shape() != world.shape() {
        return Err(Error::Config(format!(
            "backend shape {:?} does not match world shape {:?}",
            backend.shape(),
            world.shape()
        )));
    }
    if backend.num_labels() < world.num_labels() {
        return Err(Error::Config(format!(
            "backend knows {} labels, world has {}",
            backend.num_labels(),
            world.num_labels()
        )));
    }
    Ok(backend)
}

/// Seed of replicate `rep` of task `task`; independent of the method and
/// of any swept hyperparameter, so cells differing only there share noise.
pub fn replicate_seed(master: u64, task: usize, rep: usize) -> u64 {
    Rng::derive(master, ((task as u64) << 32) | rep as u64).next_u64()
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "undefined".into()
    }
}

fn psnr_cell(p: Psnr) -> String {
    p.to_string()
}

fn peak_of(z: &Latent) -> f64 {
    let (lo, hi) = z.min_max();
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

fn tag_task(task: usize, seed: u64, what: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Divergence { iteration, detail } => Error::Divergence {
            iteration,
            detail: format!("task {task} seed {seed} {what}: {detail}"),
        },
        Error::Singularity(d) => Error::Singularity(format!("task {task} seed {seed} {what}: {d}")),
        other => other,
    }
}

/// Output columns shared by edit and ablation rows.
const METRIC_HEADER: [&str; 11] = [
    "mse_to_source",
    "identity_residual",
    "target_mode_distance",
    "source_mode_distance",
    "psnr_db",
    "psnr_peak",
    "ssim",
    "background_psnr_db",
    "iou",
    "centroid_shift",
    "final_grad_norm",
];

struct EditMetrics {
    cells: Vec<String>,
    /// Identity residual for vectors, centroid shift for grids.
    identity: f64,
}

fn edit_metrics(world: &World, task: &EditTask, r: &EditResult) -> Result<EditMetrics> {
    let (z, src) = (&r.z_trg, &task.z_src);
    let peak = peak_of(src);
    let blank = String::new;
    let mut cells = vec![num(mse(src, z)?)];
    let mut identity = f64::NAN;
    match (world.mode(task.cond_trg), world.mode(task.cond_src)) {
        (Some(mu_t), Some(mu_s)) => {
            identity = identity_residual(z, mu_t, src, mu_s)?;
            cells.push(num(identity));
            cells.push(num(z.distance(mu_t)?));
            cells.push(num(z.distance(mu_s)?));
        }
        _ => cells.extend([blank(), blank(), blank()]),
    }
    cells.push(psnr_cell(psnr(src, z, peak)?));
    cells.push(num(peak));
    match z.grid_dims() {
        Some((h, w)) if h.min(w) >= SSIM_WINDOW => {
            cells.push(num(ssim(src, z)?));
            let bg = background_psnr(src, z, default_window(h, w), ThresholdMode::Mean, peak)?;
            cells.push(psnr_cell(bg.psnr));
            let (ma, mb) = (
                BinaryMask::from_threshold(src, MASK_THRESHOLD),
                BinaryMask::from_threshold(z, MASK_THRESHOLD),
            );
            cells.push(num(iou(&ma, &mb)?));
            identity = match (centroid(src), centroid(z)) {
                (Ok(a), Ok(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
                _ => f64::NAN,
            };
            cells.push(num(identity));
        }
        _ => cells.extend([blank(), blank(), blank(), blank()]),
    }
    cells.push(r.grad_norms.last().map_or_else(blank, |&g| num(g)));
    Ok(EditMetrics { cells, identity })
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(opts: &RunOptions, cfg: &Config, cmd: Command) -> Result<Self> {
        let dir = opts.out.join(&cfg.name).join(cmd.name());
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let out = Output { dir };
        out.write(
            "resolved-config.json",
            (serde_json::to_string_pretty(cfg)? + "\n").as_bytes(),
        )?;
        Ok(out)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(name, &csv_bytes(header, rows)?)
    }

    fn pgm(&self, name: &str, image: &Latent) -> Result<()> {
        self.write(&format!("images/{name}.pgm"), &encode_pgm(image)?)
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Places images side by side.
fn hstack(images: &[&Latent]) -> Result<Latent> {
    let (h, _) = images[0]
        .grid_dims()
        .ok_or_else(|| Error::Usage("hstack needs grids".into()))?;
    let widths: Vec<usize> = images.iter().map(|l| l.grid_dims().map_or(0, |d| d.1)).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(h * total);
    for r in 0..h {
        for (img, &w) in images.iter().zip(&widths) {
            data.extend_from_slice(&img.data()[r * w..(r + 1) * w]);
        }
    }
    Latent::new(data, vec![h, total])
}

struct Setup {
    world: World,
    backend: Backend,
    tasks: Vec<EditTask>,
}

fn setup(cfg: &Config) -> Result<Setup> {
    let world = World::build(&cfg.world)?;
    let backend = load_backend(cfg, &world)?;
    let tasks = world.tasks(&cfg.tasks, cfg.seed)?;
    Ok(Setup { world, backend, tasks })
}

type CellOutput = (Vec<Vec<String>>, Vec<(String, Latent)>);

fn write_cells(out: &Output, header: &[&str], cells: Vec<Result<CellOutput>>) -> Result<()> {
    let mut rows = Vec::new();
    for cell in cells {
        let (r, images) = cell?;
        rows.extend(r);
        for (name, img) in images {
            out.pgm(&name, &img)?;
        }
    }
    out.csv("results.csv", header, &rows)
}

/// Runs every configured method on every task and seed.
pub fn run_edit(cfg: &Config, opts: &RunOptions) -> Result<PathBuf> {
    let s = setup(cfg)?;
    let out = Output::create(opts, cfg, Command::Edit)?;
    let cells: Vec<(usize, usize)> = (0..s.tasks.len())
        .flat_map(|i| (0..cfg.edit.seeds).map(move |r| (i, r)))
        .collect();
    let results = with_pool(opts.jobs, || {
        cells
            .par_iter()
            .map(|&(i, rep)| -> Result<(CellOutput, Vec<Vec<String>>)> {
                let task = &s.tasks[i];
                let seed = replicate_seed(cfg.seed, i, rep);
                let mut rows = Vec::new();
                let mut latents = Vec::new();
                let mut images = Vec::new();
                if s.world.is_grid() && rep == 0 {
                    images.push((format!("task{i}_source"), task.z_src.clone()));
                }
                for &m in &cfg.edit.methods {
                    let dc = cfg.distill.config(m, seed);
                    let r = edit(&s.backend, task, &dc).map_err(tag_task(i, seed, m.name()))?;
                    let mut row = vec![i.to_string(), m.to_string(), seed.to_string(), dc.steps.to_string()];
                    row.extend(edit_metrics(&s.world, task, &r)?.cells);
                    rows.push(row);
                    for (k, v) in r.z_trg.data().iter().enumerate() {
                        latents.push(vec![
                            i.to_string(),
                            m.to_string(),
                            seed.to_string(),
                            k.to_string(),
                            num(*v),
                        ]);
                    }
                    if s.world.is_grid() {
                        let rec = invert(&s.backend, &r, task, &dc).map_err(tag_task(i, seed, m.name()))?;
                        images.push((format!("task{i}_seed{rep}_{m}_edited"), r.z_trg.clone()));
                        images.push((format!("task{i}_seed{rep}_{m}_reconstruction"), rec));
                    }
                }
                Ok(((rows, images), latents))
            })
            .collect::<Vec<_>>()
    })?;
    let mut all_latents = Vec::new();
    let mut cell_outputs = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok((c, l)) => {
                all_latents.extend(l);
                cell_outputs.push(Ok(c));
            }
            Err(e) => cell_outputs.push(Err(e)),
        }
    }
    let mut header = vec!["task", "method", "seed", "steps"];
    header.extend(METRIC_HEADER);
    write_cells(&out, &header, cell_outputs)?;
    out.csv(
        "latents.csv",
        &["task", "method", "seed", "index", "value"],
        &all_latents,
    )?;
    Ok(out.dir)
}

#[derive(Serialize)]
struct Timing {
    method: String,
    lambda: Option<f64>,
    n_iters: Option<usize>,
    steps: usize,
    edits: usize,
    mean_seconds_per_edit: f64,
}

/// Sweeps FPR scale, FPR iterations, step count and time range for ids,
/// with a dds baseline in every (t-range, steps) group. Diverged cells are
/// written with status `diverged`; the sweep then fails with the first one.
pub fn run_ablation(cfg: &Config, opts: &RunOptions) -> Result<PathBuf> {
    let s = setup(cfg)?;
    let a = &cfg.ablation;
    let out = Output::create(opts, cfg, Command::Ablate)?;
    // One cell per (task, replicate, t-range, steps); variants run inside.
    let mut cells = Vec::new();
    for i in 0..s.tasks.len() {
        for rep in 0..a.seeds {
            for &tr in &a.t_ranges {
                for &steps in &a.steps {
                    cells.push((i, rep, tr, steps));
                }
            }
        }
    }
    let mut variants: Vec<(Method, Option<(f64, usize)>)> = vec![(Method::Dds, None)];
    for &lambda in &a.lambdas {
        for &n in &a.n_iters {
            variants.push((Method::Ids, Some((lambda, n))));
        }
    }
    // Rows, (variant, identity, seconds) for completed edits, first divergence.
    type AblationCell = (Vec<Vec<String>>, Vec<(usize, f64, f64)>, Option<Error>);
    let results: Vec<Result<AblationCell>> = with_pool(opts.jobs, || {
        cells
            .par_iter()
            .map(|&(i, rep, [t_min, t_max], steps)| {
                let task = &s.tasks[i];
                let seed = replicate_seed(cfg.seed, i, rep);
                let mut rows = Vec::new();
                let mut stats = Vec::new();
                let mut failure = None;
                for (v, &(method, fpr)) in variants.iter().enumerate() {
                    let mut dc = DistillConfig {
                        t_min,
                        t_max,
                        steps,
                        ..cfg.distill.config(method, seed)
                    };
                    if let Some((lambda, n_iters)) = fpr {
                        dc.fpr = FprConfig {
                            lambda,
                            n_iters,
                            ..dc.fpr
                        };
                    }
                    let start = Instant::now();
                    let outcome = edit(&s.backend, task, &dc).map_err(tag_task(i, seed, method.name()));
                    let secs = start.elapsed().as_secs_f64();
                    let mut row = vec![
                        i.to_string(),
                        seed.to_string(),
                        num(t_min),
                        num(t_max),
                        steps.to_string(),
                        method.to_string(),
                        fpr.map_or_else(String::new, |f| num(f.0)),
                        fpr.map_or_else(String::new, |f| f.1.to_string()),
                    ];
                    match outcome {
                        Ok(r) => {
                            let m = edit_metrics(&s.world, task, &r)?;
                            row.push("ok".into());
                            row.extend(m.cells);
                            stats.push((v, m.identity, secs));
                        }
                        // A diverging cell is a result of the sweep: keep the row,
                        // finish the sweep, report the divergence at the end.
                        Err(e @ Error::Divergence { .. }) => {
                            row.push("diverged".into());
                            row.extend(METRIC_HEADER.iter().map(|_| num(f64::NAN)));
                            failure.get_or_insert(e);
                        }
                        Err(e) => return Err(e),
                    }
                    rows.push(row);
                }
                Ok((rows, stats, failure))
            })
            .collect()
    })?;

    let mut rows = Vec::new();
    // Indexed by (cell group without task/rep, variant).
    let groups = a.t_ranges.len() * a.steps.len();
    let mut identity_sum = vec![0.0; groups * variants.len()];
    let mut count = vec![0usize; groups * variants.len()];
    let mut secs = vec![0.0; a.steps.len() * variants.len()];
    let mut secs_n = vec![0usize; a.steps.len() * variants.len()];
    let mut diverged = vec![0usize; groups * variants.len()];
    let mut first_failure = None;
    for (c, res) in results.into_iter().enumerate() {
        let (r, stats, failure) = res?;
        let g = c % groups;
        for (v, row) in r.iter().enumerate() {
            diverged[g * variants.len() + v] += (row[8] == "diverged") as usize;
        }
        if first_failure.is_none() {
            first_failure = failure;
        }
        rows.extend(r);
        let steps_idx = g % a.steps.len();
        for (v, identity, t) in stats {
            if identity.is_finite() {
                identity_sum[g * variants.len() + v] += identity;
                count[g * variants.len() + v] += 1;
            }
            secs[steps_idx * variants.len() + v] += t;
            secs_n[steps_idx * variants.len() + v] += 1;
        }
    }
    let mut header = vec![
        "task", "seed", "t_min", "t_max", "steps", "method", "lambda", "n_iters", "status",
    ];
    header.extend(METRIC_HEADER);
    out.csv("results.csv", &header, &rows)?;

    let mut trend = Vec::new();
    for (ti, &[t_min, t_max]) in a.t_ranges.iter().enumerate() {
        for (si, &steps) in a.steps.iter().enumerate() {
            let g = ti * a.steps.len() + si;
            for (v, &(method, fpr)) in variants.iter().enumerate() {
                let k = g * variants.len() + v;
                let mean = if count[k] > 0 {
                    identity_sum[k] / count[k] as f64
                } else {
                    f64::NAN
                };
                trend.push(vec![
                    num(t_min),
                    num(t_max),
                    steps.to_string(),
                    method.to_string(),
                    fpr.map_or_else(String::new, |f| f.1.to_string()),
                    fpr.map_or_else(String::new, |f| num(f.0)),
                    num(mean),
                    count[k].to_string(),
                    diverged[k].to_string(),
                ]);
            }
        }
    }
    out.csv(
        "lambda_trend.csv",
        &[
            "t_min",
            "t_max",
            "steps",
            "method",
            "n_iters",
            "lambda",
            "mean_identity",
            "count",
            "diverged",
        ],
        &trend,
    )?;

    let mut timings = Vec::new();
    for (si, &steps) in a.steps.iter().enumerate() {
        for (v, &(method, fpr)) in variants.iter().enumerate() {
            let k = si * variants.len() + v;
            timings.push(Timing {
                method: method.to_string(),
                lambda: fpr.map(|f| f.0),
                n_iters: fpr.map(|f| f.1),
                steps,
                edits: secs_n[k],
                mean_seconds_per_edit: secs[k] / secs_n[k].max(1) as f64,
            });
        }
    }
    out.write(
        "timings.json",
        (serde_json::to_string_pretty(&timings)? + "\n").as_bytes(),
    )?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(out.dir),
    }
}

/// Edit, then invert by replaying the noise record with source and target
/// swapped.
pub fn run_inversion(cfg: &Config, opts: &RunOptions) -> Result<PathBuf> {
    let s = setup(cfg)?;
    let out = Output::create(opts, cfg, Command::Invert)?;
    let mut cells = Vec::new();
    for i in 0..s.tasks.len() {
        for &m in &cfg.inversion.methods {
            for rep in 0..cfg.inversion.seeds {
                cells.push((i, m, rep));
            }
        }
    }
    let results = with_pool(opts.jobs, || {
        cells
            .par_iter()
            .map(|&(i, m, rep)| -> Result<CellOutput> {
                let task = &s.tasks[i];
                let seed = replicate_seed(cfg.seed, i, rep);
                let dc = cfg.distill.config(m, seed);
                let r = edit(&s.backend, task, &dc).map_err(tag_task(i, seed, m.name()))?;
                let rec = invert(&s.backend, &r, task, &dc).map_err(tag_task(i, seed, m.name()))?;
                let row = vec![
                    i.to_string(),
                    m.to_string(),
                    seed.to_string(),
                    dc.steps.to_string(),
                    num(mse(&rec, &task.z_src)?),
                    num(mse(&r.z_trg, &task.z_src)?),
                ];
                let mut images = Vec::new();
                if s.world.is_grid() {
                    images.push((
                        format!("task{i}_seed{rep}_{m}"),
                        hstack(&[&task.z_src, &r.z_trg, &rec])?,
                    ));
                }
                Ok((vec![row], images))
            })
            .collect()
    })?;
    write_cells(
        &out,
        &[
            "task",
            "method",
            "seed",
            "steps",
            "reconstruction_mse",
            "edit_mse_to_source",
        ],
        results,
    )?;
    Ok(out.dir)
}

/// Distance of the posterior mean to the source before FPR and after it,
/// for both update variants, on a grid of times.
pub fn run_posterior_sweep(cfg: &Config, opts: &RunOptions) -> Result<PathBuf> {
    let s = setup(cfg)?;
    let sw = &cfg.sweep;
    let out = Output::create(opts, cfg, Command::SweepPosterior)?;
    let cells: Vec<(usize, usize)> = (0..s.tasks.len())
        .flat_map(|i| (0..sw.seeds).map(move |r| (i, r)))
        .collect();
    let backend = &s.backend;
    let results = with_pool(opts.jobs, || {
        cells
            .par_iter()
            .map(|&(i, rep)| -> Result<CellOutput> {
                let task = &s.tasks[i];
                let (z_src, cond) = (&task.z_src, task.cond_src);
                let seed = replicate_seed(cfg.seed, i, rep);
                let mut rng = Rng::new(seed);
                let mut rows = Vec::new();
                for &t in &sw.ts {
                    let eps = rng.sample_gaussian(backend.shape())?;
                    let alpha = alpha_at(backend.schedule(), t)?;
                    let dist = |z_t: &Latent| -> Result<f64> {
                        let e = guided_score(backend, z_t, cond, t, sw.omega)?;
                        posterior_mean_with_alpha(z_t, &e, alpha)?.distance(z_src)
                    };
                    let pre = dist(&diffuse_with_alpha(z_src, &eps, alpha)?)?;
                    let mut post = Vec::new();
                    for update in [UpdateTarget::NoisyLatent, UpdateTarget::Noise] {
                        let fc = FprConfig {
                            update,
                            ..sw.fpr.to_config()
                        };
                        let r = refine(backend, z_src, cond, t, &eps, &fc).map_err(tag_task(i, seed, "fpr"))?;
                        post.push(dist(&r.z_t)?);
                    }
                    rows.push(vec![
                        i.to_string(),
                        seed.to_string(),
                        num(t),
                        num(pre),
                        num(post[0]),
                        num(post[1]),
                    ]);
                }
                Ok((rows, Vec::new()))
            })
            .collect()
    })?;
    write_cells(
        &out,
        &[
            "task",
            "seed",
            "t",
            "pre_distance",
            "post_distance_zt_update",
            "post_distance_eps_update",
        ],
        results,
    )?;
    Ok(out.dir)
}

/// Trains the MLP denoiser on data drawn from the world. `results.csv`
/// holds the per-epoch loss trace.
pub fn train(cfg: &Config, opts: &RunOptions) -> Result<PathBuf> {
    let world = World::build(&cfg.world)?;
    let out = Output::create(opts, cfg, Command::Train)?;
    let mut rng = Rng::new(cfg.seed);
    let data = world.training_pairs(cfg.train.per_label, &mut rng)?;
    let init = MlpDenoiserBackend::new(
        world.shape(),
        world.num_labels(),
        &cfg.train.hidden,
        *world.analytic().schedule(),
        &mut rng,
    )?;
    Backend::Mlp(init.clone()).save(&out.dir.join("weights-init.json"))?;
    let report = train_denoiser(init, &data, &mut rng, &cfg.train.optim)?;
    Backend::Mlp(report.backend).save(&out.dir.join("weights.json"))?;
    let rows: Vec<Vec<String>> = report
        .losses
        .iter()
        .enumerate()
        .map(|(e, &l)| vec![e.to_string(), num(l)])
        .collect();
    out.csv("results.csv", &["epoch", "loss"], &rows)?;
    Ok(out.dir)
}

/// Loads `config_path` and runs `command`; returns the output directory.
pub fn run(command: Command, config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let cfg = load_config(config_path, opts.seed)?;
    match command {
        Command::Edit => run_edit(&cfg, opts),
        Command::Ablate => run_ablation(&cfg, opts),
        Command::Invert => run_inversion(&cfg, opts),
        Command::SweepPosterior => run_posterior_sweep(&cfg, opts),
        Command::Train => train(&cfg, opts),
    }
}
